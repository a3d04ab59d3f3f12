import math

import numpy as np
import pytest
import torch

from gazefield.errors import InvalidArgument
from gazefield.estimators import SubjectClassifier, freeze
from gazefield.field import LatentCodes, init_latents_from_subject
from gazefield.objectives import (TERMS, LossWeights, alpha_loss, disentanglement_loss, functional_loss,
                                  masked_l1, perceptual_loss, reconstruction_loss, reconstruction_terms,
                                  total_loss)
from gazefield.synth import SyntheticSubject

from fdcheck import pipeline_gradient_check


class FixedGaze(torch.nn.Module):
    """Stand-in estimator: returns preset outputs for the first and second image it sees."""

    def __init__(self, first, second):
        super().__init__()
        self.outputs = [torch.tensor([first], dtype=torch.float64), torch.tensor([second], dtype=torch.float64)]
        self.calls = 0

    def forward(self, x):
        out = self.outputs[self.calls % 2]
        self.calls += 1
        return out + 0 * x.sum()


class CentreGaze(torch.nn.Module):
    """Looks only at the central 8x8 crop of its input."""

    def __init__(self):
        super().__init__()
        torch.manual_seed(0)
        self.lin = torch.nn.Linear(3 * 64, 2).double()

    def forward(self, x):
        return self.lin(x[:, :, 4:12, 4:12].reshape(x.shape[0], -1))


def extractor(seed=0, size=16):
    torch.manual_seed(seed)
    return freeze(SubjectClassifier(3, embed_dim=8, width=4, image_size=size).double())


def fixture(seed=0, size=8):
    gen = torch.Generator().manual_seed(seed)
    gt = torch.rand(2, 3, size, size, generator=gen, dtype=torch.float64)
    m_e = (torch.rand(2, size, size, generator=gen) < 0.2).double()
    m_f = ((torch.rand(2, size, size, generator=gen) < 0.6).double() * (1 - m_e))
    return gt, m_e + m_f, m_f, m_e


def perfect_inputs(size=16):
    gt, m_wf, m_f, m_e = fixture(size=size)
    z = init_latents_from_subject(SyntheticSubject.random(0), dtype=torch.float64)
    grid_wf = torch.cat([torch.zeros(2, 3, size, size, dtype=torch.float64), m_wf[:, None]], 1)
    grid_e = torch.cat([torch.zeros(2, 3, size, size, dtype=torch.float64), m_e[:, None]], 1)
    images = {"I_wf": gt.clone(), "I_fwo": gt.clone(), "I_e": gt.clone(), "F_wf": grid_wf, "F_e": grid_e}
    return images, gt, (m_wf, m_f, m_e), z


# ---------------------------------------------------------------- weights

def test_default_weights():
    w = LossWeights()
    assert (w.lambda_r, w.lambda_p, w.lambda_f, w.lambda_d) == (1.0, 1.0, 1.0, 1.0)
    assert w.w_sh == w.w_te == w.w_il == 1e-3 and w.w_ex == 1.0
    assert w.content_weight(0) == 1e-3
    assert math.isclose(w.content_weight(1), 2e-3) and math.isclose(w.content_weight(9), 1e-2)
    with pytest.raises(InvalidArgument):
        LossWeights(lambda_r=-1.0)


# -------------------------------------------------------------- masked L1

def test_masked_l1_examples():
    pred = torch.full((1, 3, 1, 1), 0.2, dtype=torch.float64)
    target = torch.full((1, 3, 1, 1), 0.6, dtype=torch.float64)
    assert math.isclose(masked_l1(pred, target, torch.ones(1, 1, 1)).item(), 0.4, abs_tol=1e-12)
    assert masked_l1(pred, target, torch.zeros(1, 1, 1)).item() == 0.0
    gt, m_wf, _, _ = fixture()
    assert masked_l1(gt, gt, m_wf).item() == 0.0
    with pytest.raises(InvalidArgument):
        masked_l1(gt, gt[:, :, :4], m_wf)


def _loop_l1(pred, target, mask):
    # scalar reference: per image sum over masked pixels and channels / (3 |M|)
    total = 0.0
    for b in range(pred.shape[0]):
        s, n = 0.0, 0
        for i in range(pred.shape[2]):
            for j in range(pred.shape[3]):
                if mask[b, i, j]:
                    for c in range(3):
                        s += abs(float(pred[b, c, i, j]) - float(target[b, c, i, j]))
                        n += 1
        total += s / n if n else 0.0
    return total / pred.shape[0]


def test_reconstruction_matches_loop_reference():
    gt, m_wf, m_f, m_e = fixture(1)
    gen = torch.Generator().manual_seed(9)
    preds = [torch.rand(gt.shape, generator=gen, dtype=torch.float64) for _ in range(3)]
    got = reconstruction_loss(*preds, gt, m_wf, m_f, m_e).item()
    ref = sum(_loop_l1(p, gt, m) for p, m in zip(preds, (m_wf, m_f, m_e)))
    assert abs(got - ref) < 1e-9
    terms = reconstruction_terms(*preds, gt, m_wf, m_f, m_e)
    separate = masked_l1(preds[0], gt, m_wf) + masked_l1(preds[1], gt, m_f) + masked_l1(preds[2], gt, m_e)
    assert abs(sum(terms.values()).item() - separate.item()) < 1e-12


# ------------------------------------------------------------ perceptual

def test_perceptual_zero_and_layer_check():
    ex = extractor()
    gt, m_wf, _, _ = fixture(size=16)
    assert perceptual_loss(gt, gt, m_wf, ex).item() == 0.0
    with pytest.raises(InvalidArgument):
        perceptual_loss(gt, gt, m_wf, ex, layers=(0,))
    with pytest.raises(InvalidArgument):
        perceptual_loss(gt, gt, m_wf, ex, layers=(5,))


def test_perceptual_shuffle_increases_loss():
    ex = extractor(1)
    for seed in range(20):
        gen = torch.Generator().manual_seed(seed)
        gt = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
        mask = torch.ones(1, 16, 16, dtype=torch.float64)
        perm = torch.randperm(256, generator=gen)
        shuffled = gt.reshape(1, 3, 256)[:, :, perm].reshape(1, 3, 16, 16)
        assert perceptual_loss(shuffled, gt, mask, ex).item() > perceptual_loss(gt, gt, mask, ex).item()


class Doubled(torch.nn.Module):
    def __init__(self, base):
        super().__init__()
        self.base = base
        self.n_layers = base.n_layers

    def features(self, x, layers):
        return [2 * f for f in self.base.features(x, layers)]


def test_perceptual_scales_linearly_with_activations():
    ex = extractor(2)
    gt, m_wf, _, _ = fixture(3, size=16)
    gen = torch.Generator().manual_seed(4)
    a = torch.rand(gt.shape, generator=gen, dtype=torch.float64)
    b = torch.rand(gt.shape, generator=gen, dtype=torch.float64)
    la, lb = perceptual_loss(a, gt, m_wf, ex).item(), perceptual_loss(b, gt, m_wf, ex).item()
    la2, lb2 = perceptual_loss(a, gt, m_wf, Doubled(ex)).item(), perceptual_loss(b, gt, m_wf, Doubled(ex)).item()
    assert math.isclose(la2, 2 * la, rel_tol=1e-12) and math.isclose(lb2, 2 * lb, rel_tol=1e-12)
    assert math.isclose(la2 / lb2, la / lb, rel_tol=1e-12)


def test_perceptual_gradient_reaches_pred_only():
    ex = extractor()
    gt, m_wf, _, _ = fixture(size=16)
    pred = torch.rand(gt.shape, dtype=torch.float64, requires_grad=True)
    perceptual_loss(pred, gt, m_wf, ex).backward()
    assert pred.grad is not None and pred.grad.abs().sum() > 0
    assert all(p.grad is None for p in ex.parameters())


# ------------------------------------------------------------ functional

def test_functional_hand_example():
    gt = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    net = FixedGaze([0.0, 0.0], [0.0, math.pi / 2])
    assert math.isclose(functional_loss(gt, gt, net, 0.5).item(), 0.5 * math.pi / 2, rel_tol=1e-12)


def test_functional_zero_and_receptive_field():
    net = CentreGaze()
    gen = torch.Generator().manual_seed(0)
    gt = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    assert functional_loss(gt, gt, net, 1e-3).item() == 0.0
    pred = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    base = functional_loss(pred, gt, net, 1.0).item()
    poked = pred.clone()
    poked[:, :, 0, 0] += 0.7
    assert abs(functional_loss(poked, gt, net, 1.0).item() - base) < 1e-9


# -------------------------------------------------------- disentanglement

def test_disentanglement_hand_example():
    # one code with weight 1 and dimension 2 offset by (1, 1): 1 / 2 * 2 = 1
    w = LossWeights(w_sh=0.0, w_ex=1.0, w_te=0.0, w_il=0.0)
    z0 = {"sh": torch.zeros(16), "ex": torch.zeros(8), "te": torch.zeros(16), "il": torch.zeros(4)}
    ex = torch.zeros(8, dtype=torch.float64)
    ex[:2] = 1.0
    z = LatentCodes(torch.zeros(16), ex, torch.zeros(16), torch.zeros(4), z0=z0)
    # the expression code has 8 slots, so the hand example (dim 2) is scaled by 2/8
    assert math.isclose(disentanglement_loss(z, w).item(), 2 / 8, rel_tol=1e-12)

    class TwoDim:
        def code(self, name):
            return torch.tensor([1.0, 1.0]) if name == "ex" else torch.zeros(1)

        def initial(self, name):
            return torch.zeros(2) if name == "ex" else torch.zeros(1)

    assert disentanglement_loss(TwoDim(), w).item() == 1.0


def test_disentanglement_zero_at_init():
    z = init_latents_from_subject(SyntheticSubject.random(0))
    assert disentanglement_loss(z, LossWeights()).item() == 0.0


# ------------------------------------------------------------------ alpha

def test_alpha_loss():
    grid = torch.zeros(1, 4, 4, 4, dtype=torch.float64)
    mask = torch.zeros(1, 8, 8, dtype=torch.float64)
    assert alpha_loss(grid, mask).item() == 0.0
    mask[:, :4] = 1.0
    assert alpha_loss(grid, mask).item() == 0.5


# ------------------------------------------------------------------ total

def test_every_term_zero_on_perfect_fixture():
    images, gt, masks, z = perfect_inputs()
    net = CentreGaze()
    report = total_loss(images, gt, masks, z, LossWeights(), extractor(), net)
    assert set(report.terms) == set(TERMS)
    for k, v in report.terms.items():
        assert v.item() == 0.0, k
    assert report.total.item() == 0.0


def test_total_is_weighted_sum_and_linear():
    images, gt, masks, z = perfect_inputs()
    gen = torch.Generator().manual_seed(5)
    for k in ("I_wf", "I_fwo", "I_e"):
        images[k] = torch.rand(gt.shape, generator=gen, dtype=torch.float64)
    for k in ("F_wf", "F_e"):
        images[k] = torch.rand(images[k].shape, generator=gen, dtype=torch.float64)
    z = init_latents_from_subject(SyntheticSubject.random(0), noise_scale=0.5, dtype=torch.float64)
    ex, net = extractor(), CentreGaze()
    full = total_loss(images, gt, masks, z, LossWeights(), ex, net)
    assert all(v.item() > 0 for v in full.terms.values())
    assert abs(full.recompute_total(LossWeights()) - full.total.item()) < 1e-9
    groups = {"lambda_r": ("recon_whole", "recon_face", "recon_eyes"),
              "lambda_p": ("perc_whole", "perc_face", "perc_eyes"),
              "lambda_f": ("functional",), "lambda_d": ("disentangle",),
              "lambda_a": ("alpha_whole", "alpha_eyes")}
    for lam, names in groups.items():
        part = total_loss(images, gt, masks, z, LossWeights(**{lam: 0.0}), ex, net)
        removed = sum(full.terms[n].item() for n in names)
        assert abs(full.total.item() - part.total.item() - removed) < 1e-12


def test_total_without_eye_stream():
    images, gt, masks, z = perfect_inputs()
    images.update(I_fwo=None, I_e=None, F_e=None)
    report = total_loss(images, gt, masks, z, LossWeights(), extractor(), CentreGaze())
    assert report.terms["recon_face"].item() == 0.0 and report.terms["perc_eyes"].item() == 0.0


def test_gradients_through_render_pipeline():
    errors = pipeline_gradient_check(seed=0)
    assert set(errors) == {"field", "decoder", "z_sh", "z_ex", "z_te", "z_il", "g"}
    assert max(errors.values()) < 1e-4, errors

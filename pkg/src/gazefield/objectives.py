"""Training objective: reconstruction, perceptual, functional and disentanglement terms.

Images are (B, 3, H, W) tensors in [0, 1]; masks are (B, H, W) or
(B, 1, H, W) and are treated as {0, 1}.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch

from .errors import InvalidArgument
from .field import LATENT_NAMES
from .geometry import pitchyaw_to_vector, smooth_angular_error


@dataclass
class LossWeights:
    lambda_r: float = 1.0
    lambda_p: float = 1.0
    lambda_f: float = 1.0
    lambda_d: float = 1.0
    lambda_a: float = 1.0
    w_sh: float = 1e-3
    w_ex: float = 1.0
    w_te: float = 1e-3
    w_il: float = 1e-3
    lambda_f_content: float = 1e-3
    lambda_f_content_increment: float = 1e-3

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise InvalidArgument(f"loss weight {k} must be non-negative")

    def content_weight(self, epoch: int) -> float:
        """Functional-loss coefficient after ``epoch`` completed epochs."""
        return self.lambda_f_content + self.lambda_f_content_increment * epoch

    def latent_weight(self, name: str) -> float:
        return getattr(self, f"w_{name}")


TERMS = ("recon_whole", "recon_face", "recon_eyes", "perc_whole", "perc_face", "perc_eyes",
         "functional", "disentangle", "alpha_whole", "alpha_eyes")


@dataclass
class LossReport:
    total: torch.Tensor
    terms: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        return {"total": _f(self.total), **{k: _f(v) for k, v in self.terms.items()}}

    def recompute_total(self, weights: LossWeights) -> float:
        t = self.as_floats()
        return (weights.lambda_r * (t["recon_whole"] + t["recon_face"] + t["recon_eyes"])
                + weights.lambda_p * (t["perc_whole"] + t["perc_face"] + t["perc_eyes"])
                + weights.lambda_f * t["functional"]
                + weights.lambda_d * t["disentangle"]
                + weights.lambda_a * (t["alpha_whole"] + t["alpha_eyes"]))


def _f(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _mask4(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(mask).to(like.dtype)
    if m.ndim == like.ndim - 1:
        m = m.unsqueeze(-3)
    return m


def masked_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """||M * (pred - target)||_1 / (3 |M|) per image, averaged over the batch.

    Images with an empty mask contribute 0.
    """
    if pred.shape != target.shape:
        raise InvalidArgument(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    m = _mask4(mask, pred)
    if m.shape[-2:] != pred.shape[-2:]:
        raise InvalidArgument("mask does not match image size")
    if pred.ndim == 3:
        pred, target, m = pred[None], target[None], m[None]
    err = (m * (pred - target)).abs().sum(dim=(1, 2, 3))
    count = (m.sum(dim=(1, 2, 3)) * pred.shape[1] / m.shape[1])
    per_image = torch.where(count > 0, err / count.clamp_min(1.0), torch.zeros_like(err))
    return per_image.mean()


def reconstruction_terms(i_wf, i_fwo, i_e, i_gt, m_wf, m_f, m_e) -> dict:
    terms = {"recon_whole": masked_l1(i_wf, i_gt, m_wf)}
    zero = i_wf.new_zeros(())
    terms["recon_face"] = masked_l1(i_fwo, i_gt, m_f) if i_fwo is not None else zero
    terms["recon_eyes"] = masked_l1(i_e, i_gt, m_e) if i_e is not None else zero
    return terms


def reconstruction_loss(i_wf, i_fwo, i_e, i_gt, m_wf, m_f, m_e) -> torch.Tensor:
    return sum(reconstruction_terms(i_wf, i_fwo, i_e, i_gt, m_wf, m_f, m_e).values())


def perceptual_loss(pred, target, mask, extractor, layers=(1, 2, 3)) -> torch.Tensor:
    """sum_i ||phi_i(pred*M) - phi_i(target*M)||_1 / numel(phi_i(target*M)).

    ``extractor.features(x, layers)`` must return one activation per
    requested layer; its weights are expected to be frozen.
    """
    if pred.shape != target.shape:
        raise InvalidArgument(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    n_layers = getattr(extractor, "n_layers", None)
    for i in layers:
        if n_layers is not None and not 1 <= i <= n_layers:
            raise InvalidArgument(f"layer index {i} out of range 1..{n_layers}")
    m = _mask4(mask, pred)
    fp = extractor.features(pred * m, layers)
    with torch.no_grad():
        ft = extractor.features(target * m, layers)
    total = pred.new_zeros(())
    for a, b in zip(fp, ft):
        total = total + (a - b).abs().sum() / b.numel()
    return total


def perceptual_terms(i_wf, i_fwo, i_e, i_gt, m_wf, m_f, m_e, extractor, layers=(1, 2, 3)) -> dict:
    zero = i_wf.new_zeros(())
    return {
        "perc_whole": perceptual_loss(i_wf, i_gt, m_wf, extractor, layers),
        "perc_face": perceptual_loss(i_fwo, i_gt, m_f, extractor, layers) if i_fwo is not None else zero,
        "perc_eyes": perceptual_loss(i_e, i_gt, m_e, extractor, layers) if i_e is not None else zero,
    }


def functional_loss(i_wf, i_gt, gaze_net, lambda_f_content: float) -> torch.Tensor:
    """lambda * mean angular error between the estimator's gazes on both images."""
    pred = gaze_net(i_wf)[..., :2]
    with torch.no_grad():
        ref = gaze_net(i_gt)[..., :2]
    err = smooth_angular_error(pitchyaw_to_vector(pred, check=False),
                               pitchyaw_to_vector(ref.to(pred.dtype), check=False))
    return lambda_f_content * err.mean()


def alpha_loss(grid: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean |A - M| over the full image, A being the grid's upsampled alpha.

    This supervises the coverage of a stream (including the background,
    which none of the masked image terms see).
    """
    m = _mask4(mask, grid)
    if m.ndim == 3:
        m = m[None]
    a = grid[:, -1:]
    size = m.shape[-2:]
    if a.shape[-2:] != size:
        a = torch.nn.functional.interpolate(a, size=tuple(size), mode="bilinear", align_corners=False)
    return (a - m).abs().mean()


def disentanglement_loss(latents, weights: LossWeights) -> torch.Tensor:
    """sum_* w_* / dim(z_*) * ||z_* - z0_*||^2, averaged over a list of latent sets."""
    if not isinstance(latents, (list, tuple)):
        latents = [latents]
    total = 0.0
    for lat in latents:
        for name in LATENT_NAMES:
            z0 = lat.initial(name)
            diff = lat.code(name) - z0
            total = total + weights.latent_weight(name) / z0.numel() * (diff * diff).sum()
    return total / len(latents)


def total_loss(images: dict, i_gt, masks: tuple, latents, weights: LossWeights,
               extractor=None, gaze_net=None, lambda_f_content: float | None = None,
               layers=(1, 2, 3)) -> LossReport:
    """Weighted sum of all four terms.

    ``images`` holds I_wf, I_fwo and I_e (the last two may be None for the
    single-stream model) and, when available, the feature grids F_wf and
    F_e whose alpha channels are matched to M_wf and M_e.  ``masks`` is
    (M_wf, M_f, M_e).  Terms whose network or grid is not supplied (or
    whose weight is zero) are reported as 0 and skipped.
    """
    m_wf, m_f, m_e = masks
    i_wf, i_fwo, i_e = images["I_wf"], images.get("I_fwo"), images.get("I_e")
    zero = i_wf.new_zeros(())
    terms = reconstruction_terms(i_wf, i_fwo, i_e, i_gt, m_wf, m_f, m_e)
    if extractor is not None and weights.lambda_p > 0:
        terms.update(perceptual_terms(i_wf, i_fwo, i_e, i_gt, m_wf, m_f, m_e, extractor, layers))
    else:
        terms.update(perc_whole=zero, perc_face=zero, perc_eyes=zero)
    lam_c = weights.lambda_f_content if lambda_f_content is None else lambda_f_content
    if gaze_net is not None and weights.lambda_f > 0:
        terms["functional"] = functional_loss(i_wf, i_gt, gaze_net, lam_c)
    else:
        terms["functional"] = zero
    if latents is not None and weights.lambda_d > 0:
        terms["disentangle"] = disentanglement_loss(latents, weights)
    else:
        terms["disentangle"] = zero
    f_wf, f_e = images.get("F_wf"), images.get("F_e")
    use_alpha = weights.lambda_a > 0
    terms["alpha_whole"] = alpha_loss(f_wf, m_wf) if use_alpha and f_wf is not None else zero
    terms["alpha_eyes"] = alpha_loss(f_e, m_e) if use_alpha and f_e is not None else zero
    total = (weights.lambda_r * (terms["recon_whole"] + terms["recon_face"] + terms["recon_eyes"])
             + weights.lambda_p * (terms["perc_whole"] + terms["perc_face"] + terms["perc_eyes"])
             + weights.lambda_f * terms["functional"]
             + weights.lambda_d * terms["disentangle"]
             + weights.lambda_a * (terms["alpha_whole"] + terms["alpha_eyes"]))
    return LossReport(total, {k: terms[k] for k in TERMS})

"""Training loop, checkpoint I/O for the model state, latent fine-tuning and redirection."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from PIL import Image

from .camera import Camera
from .checkpoint import (CheckpointData, arrays_to_state, load_checkpoint,
                         save_checkpoint, state_to_arrays)
from .compositor import GazeFieldModel, render_triplet
from .config import TrainConfig, from_dict
from .errors import CheckpointError, InvalidArgument, NumericFailure
from .field import LATENT_SIZE, LatentCodes, init_latents_from_subject
from .objectives import LossWeights, masked_l1, perceptual_terms, total_loss
from .synth import SyntheticSubject

log = logging.getLogger(__name__)


def _mask(arr) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr, dtype=np.float32))[None]


@dataclass
class TrainingData:
    """Samples converted once into the tensors the training step needs."""

    images: torch.Tensor      # (N, 3, H, W)
    m_wf: torch.Tensor        # (N, 1, H, W)
    m_f: torch.Tensor
    m_e: torch.Tensor
    gaze: torch.Tensor        # (N, 2)
    subject_ids: list
    rays: list
    subjects: dict            # subject_id -> SyntheticSubject

    @classmethod
    def from_samples(cls, samples, model: GazeFieldModel) -> "TrainingData":
        if not samples:
            raise InvalidArgument("empty dataset")
        imgs = torch.tensor(np.stack([s.image for s in samples]), dtype=torch.float32).permute(0, 3, 1, 2)
        size = model.config.image_size
        if imgs.shape[-1] != size or imgs.shape[-2] != size:
            raise InvalidArgument(f"model renders {size}x{size} but the images are {tuple(imgs.shape[-2:])}")
        subjects = {}
        for s in samples:
            if s.subject_id not in subjects and "subject" in s.meta:
                subjects[s.subject_id] = SyntheticSubject.from_dict(s.meta["subject"])
        return cls(
            images=imgs.contiguous(),
            m_wf=torch.stack([_mask(s.mask_whole_face) for s in samples]),
            m_f=torch.stack([_mask(s.mask_face_only) for s in samples]),
            m_e=torch.stack([_mask(s.mask_eyes) for s in samples]),
            gaze=torch.tensor(np.stack([s.gaze for s in samples]), dtype=torch.float32),
            subject_ids=[int(s.subject_id) for s in samples],
            rays=[model.rays_for(s.camera, torch.float32) for s in samples],
            subjects=subjects,
        )

    def __len__(self) -> int:
        return len(self.subject_ids)


class GazeFieldSystem(nn.Module):
    """The model plus one set of latent codes per training subject."""

    def __init__(self, model: GazeFieldModel, latents: dict):
        super().__init__()
        self.model = model
        self.latents = nn.ModuleDict({str(k): v for k, v in sorted(latents.items())})

    @property
    def subject_ids(self) -> list[int]:
        return sorted(int(k) for k in self.latents)

    def latent_batch(self, ids) -> torch.Tensor:
        return torch.stack([self.latents[str(i)].vector() for i in ids])

    def latent_list(self, ids) -> list:
        return [self.latents[str(i)] for i in ids]


@dataclass
class TrainState:
    config: TrainConfig
    system: GazeFieldSystem
    optimizer: torch.optim.Optimizer
    step: int = 0
    meta: dict | None = None

    @property
    def model(self) -> GazeFieldModel:
        return self.system.model


def build_state(config: TrainConfig, subjects: dict) -> TrainState:
    """Fresh model, latents initialized from the subjects, and the optimizer."""
    torch.manual_seed(config.seed)
    model = GazeFieldModel(config.model)
    latents = {sid: init_latents_from_subject(subj, seed=config.seed) for sid, subj in subjects.items()}
    system = GazeFieldSystem(model, latents)
    opt = torch.optim.Adam(system.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.adam_eps)
    return TrainState(config, system, opt, 0, {})


# --------------------------------------------------------------------------- checkpoints

def state_checkpoint(state: TrainState) -> CheckpointData:
    names = {id(p): n for n, p in state.system.named_parameters()}
    tensors = state_to_arrays("param/", state.system.state_dict())
    steps = {}
    for p, st in state.optimizer.state.items():
        n = names[id(p)]
        steps[n] = int(st["step"])
        tensors[f"adam/{n}/exp_avg"] = st["exp_avg"].detach().numpy().astype(np.float32)
        tensors[f"adam/{n}/exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().astype(np.float32)
    header = {
        "kind": "gazefield-model",
        "config": state.config.to_dict(),
        "step": state.step,
        "rng": {"seed": state.config.seed, "next_step": state.step},
        "subject_ids": state.system.subject_ids,
        "adam_steps": steps,
        "meta": state.meta or {},
    }
    return CheckpointData(header, tensors)


def save_state(state: TrainState, path) -> None:
    save_checkpoint(path, state_checkpoint(state))


def load_state(path) -> TrainState:
    data = load_checkpoint(path)
    h = data.header
    if h.get("kind") != "gazefield-model":
        raise CheckpointError(f"{path} does not hold a model checkpoint")
    config = from_dict(h["config"])
    model = GazeFieldModel(config.model)
    z = torch.zeros(LATENT_SIZE)
    latents = {sid: LatentCodes.from_vectors(z.clone(), z.clone()) for sid in h["subject_ids"]}
    system = GazeFieldSystem(model, latents)
    system.load_state_dict(arrays_to_state("param/", data.tensors))
    opt = torch.optim.Adam(system.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.adam_eps)
    for name, p in system.named_parameters():
        if name in h["adam_steps"]:
            opt.state[p] = {
                "step": torch.tensor(float(h["adam_steps"][name])),
                "exp_avg": torch.from_numpy(data.tensors[f"adam/{name}/exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(data.tensors[f"adam/{name}/exp_avg_sq"].copy()),
            }
    return TrainState(config, system, opt, int(h["step"]), h.get("meta", {}))


# --------------------------------------------------------------------------- training

def step_generators(seed: int, step: int):
    """Per-step randomness derived only from (seed, step)."""
    rng = np.random.default_rng([seed, step, 0xBA7C])
    gen = torch.Generator().manual_seed(int(rng.integers(0, 2 ** 62)))
    return rng, gen


def compute_loss(state: TrainState, data: TrainingData, idx, aux=None, generator=None,
                 stratified: bool | None = None):
    cfg = state.config
    ids = [data.subject_ids[i] for i in idx]
    sys_ = state.system
    z = sys_.latent_batch(ids)
    out = sys_.model(z, data.gaze[idx], [data.rays[i] for i in idx],
                     cfg.stratified if stratified is None else stratified, generator)
    epoch = state.step // cfg.steps_per_epoch
    weights = cfg.effective_weights()
    return total_loss(
        out, data.images[idx], (data.m_wf[idx], data.m_f[idx], data.m_e[idx]),
        sys_.latent_list(ids), weights,
        extractor=getattr(aux, "extractor", None) if cfg.perceptual else None,
        gaze_net=getattr(aux, "loss_net", None) if cfg.functional else None,
        lambda_f_content=weights.content_weight(epoch),
    )


@dataclass
class AuxNets:
    """Frozen helpers used by the training objective."""
    extractor: nn.Module | None = None
    loss_net: nn.Module | None = None


def train(config: TrainConfig, samples, out_dir, aux: AuxNets | None = None, resume=None,
          stop_at: int | None = None, data: TrainingData | None = None) -> TrainState:
    """Optimize fields, decoder and per-subject latents.

    Writes ``checkpoint.gznf`` every ``checkpoint_every`` steps and at the
    end, and a JSON-lines loss log.  Wall-clock timings go to a separate
    ``timing.jsonl`` so the loss log itself is reproducible byte for byte.
    On a non-finite loss the pre-step state is saved to ``last_good.gznf``
    and :class:`NumericFailure` is raised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.functional and (aux is None or aux.loss_net is None):
        raise InvalidArgument("the functional loss needs a frozen loss_net")
    if config.perceptual and (aux is None or aux.extractor is None):
        raise InvalidArgument("the perceptual loss needs a feature extractor")
    if resume is not None:
        state = load_state(resume)
        if state.config.digest() != config.digest():
            raise InvalidArgument("resume checkpoint was written with a different configuration")
    else:
        subjects = {}
        for s in samples:
            subjects.setdefault(int(s.subject_id), SyntheticSubject.from_dict(s.meta["subject"]))
        state = build_state(config, subjects)
    if data is None:
        data = TrainingData.from_samples(samples, state.model)
    log_path, timing_path = out / "train_log.jsonl", out / "timing.jsonl"
    if state.step == 0:
        log_path.write_text("")
        timing_path.write_text("")
    else:
        _truncate_log(log_path, state.step)
    end = config.steps if stop_at is None else min(stop_at, config.steps)
    n_pick = min(config.images_per_step, len(data))
    params = [p for p in state.system.parameters()]
    t0 = time.perf_counter()
    with open(log_path, "a") as flog, open(timing_path, "a") as ftime:
        while state.step < end:
            rng, gen = step_generators(config.seed, state.step)
            idx = np.sort(rng.choice(len(data), size=n_pick, replace=False)).tolist()
            report = compute_loss(state, data, idx, aux, gen)
            if not torch.isfinite(report.total):
                bad = state.step
                save_state(state, out / "last_good.gznf")
                raise NumericFailure(f"non-finite loss at step {bad}; last good state saved to "
                                     f"{out / 'last_good.gznf'}")
            state.optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            gnorm = float(torch.nn.utils.clip_grad_norm_(params, config.grad_clip))
            state.optimizer.step()
            state.step += 1
            if state.step % config.log_every == 0 or state.step == 1 or state.step == end:
                rec = {"step": state.step, "epoch": (state.step - 1) // config.steps_per_epoch,
                       "grad_norm": round(gnorm, 6), **{k: round(v, 8) for k, v in report.as_floats().items()}}
                flog.write(json.dumps(rec, sort_keys=True) + "\n")
                flog.flush()
                ftime.write(json.dumps({"step": state.step, "elapsed_s": time.perf_counter() - t0}) + "\n")
                ftime.flush()
            if state.step % config.checkpoint_every == 0 or state.step == end:
                save_state(state, out / "checkpoint.gznf")
    return state


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] <= step]
    path.write_text("".join(ln + "\n" for ln in keep))


def read_log(out_dir) -> list[dict]:
    p = Path(out_dir) / "train_log.jsonl"
    return [json.loads(ln) for ln in p.read_text().splitlines() if ln]


# --------------------------------------------------------------------------- inference

def latents_for_subject(state: TrainState, subject: SyntheticSubject) -> LatentCodes:
    """Trained codes for a training subject, otherwise the subject's initial codes."""
    key = str(subject.subject_id)
    if key in state.system.latents:
        return state.system.latents[key].copy()
    return init_latents_from_subject(subject, seed=state.config.seed)


def finetune_latents(model: GazeFieldModel, latents: LatentCodes, image, masks, camera: Camera, gaze,
                     steps: int = 200, lr: float = 5e-3, extractor=None,
                     weights: LossWeights | None = None) -> LatentCodes:
    """Fit only the four latent codes to one reference image.

    ``masks`` is (M_wf, M_f, M_e) as (H, W) arrays and ``gaze`` is the
    reference image's own gaze label.  Network weights are
    left untouched (their ``requires_grad`` flags are restored afterwards).
    Returns the iterate with the lowest objective, the starting codes
    included.
    """
    if steps < 0:
        raise InvalidArgument("steps must be non-negative")
    codes = latents.copy()
    if steps == 0:
        return codes
    weights = weights or LossWeights()
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        dtype = next(model.parameters()).dtype
        target = torch.as_tensor(np.asarray(image), dtype=dtype).permute(2, 0, 1)[None]
        m = [torch.as_tensor(np.asarray(x, dtype=np.float32)).to(dtype)[None, None] for x in masks]
        rays = [model.rays_for(camera, dtype)]
        opt = torch.optim.Adam(codes.parameters(), lr=lr)
        gaze = torch.as_tensor(np.asarray(gaze, dtype=np.float64), dtype=dtype).reshape(1, 2)
        best, best_loss = codes.vector().detach().clone(), float("inf")
        # one extra forward pass scores the final iterate; the best iterate
        # is returned, so fine-tuning never ends worse than it started
        for i in range(steps + 1):
            out = model(codes.vector().to(dtype)[None], gaze, rays)
            recon = masked_l1(out["I_wf"], target, m[0])
            if out["I_fwo"] is not None:
                recon = recon + masked_l1(out["I_fwo"], target, m[1]) + masked_l1(out["I_e"], target, m[2])
            loss = weights.lambda_r * recon
            if extractor is not None and weights.lambda_p > 0:
                terms = perceptual_terms(out["I_wf"], out["I_fwo"], out["I_e"], target, m[0], m[1], m[2], extractor)
                loss = loss + weights.lambda_p * sum(terms.values())
            value = float(loss.detach())
            if value < best_loss:
                best, best_loss = codes.vector().detach().clone(), value
            if i == steps:
                break
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
    return LatentCodes.from_vectors(best, codes.initial_vector().clone())


def save_png(array, path) -> None:
    """(3, H, W) tensor or (H, W, 3) array in [0, 1] to an 8-bit PNG."""
    a = array.detach().cpu().numpy() if isinstance(array, torch.Tensor) else np.asarray(array)
    if a.ndim == 3 and a.shape[0] == 3:
        a = np.moveaxis(a, 0, -1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(a, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path, optimize=False)


@torch.no_grad()
def redirect(model: GazeFieldModel, latents: LatentCodes, target_gaze, camera: Camera, out_dir=None,
             prefix: str = "") -> tuple:
    """Render (I_fwo, I_e, I_wf) at ``target_gaze``; optionally write them as PNGs."""
    g = np.asarray(getattr(target_gaze, "as_array", lambda: target_gaze)(), dtype=np.float64)
    if g.shape != (2,) or not np.isfinite(g).all():
        raise InvalidArgument("target gaze must be two finite angles")
    triplet = render_triplet(model, latents, g, camera)
    if out_dir is not None:
        for name, img in zip(("I_fwo", "I_e", "I_wf"), triplet):
            if img is not None:
                save_png(img, Path(out_dir) / f"{prefix}{name}.png")
    return triplet

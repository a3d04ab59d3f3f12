"""Small frozen convolutional networks used by the losses and the metrics.

* ``GazeEstimator`` (role ``loss_net``): gaze only, used by the functional loss.
* ``GazeEstimator`` (role ``eval_net``): deeper, predicts gaze and head pose and
  exposes penultimate features for the Frechet distance.
* ``SubjectClassifier``: subject-ID classifier whose intermediate activations
  serve as the perceptual-loss extractor and whose embedding serves as the
  identity model (two separately seeded instances).
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import InvalidArgument, TrainingFailure
from .geometry import pitchyaw_error

log = logging.getLogger(__name__)


def _block(cin, cout, n_convs):
    layers = []
    for i in range(n_convs):
        layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, stride=2 if i == 0 else 1, padding=1),
                   nn.BatchNorm2d(cout), nn.ReLU()]
    return nn.Sequential(*layers)


class GazeEstimator(nn.Module):
    """CNN regressing (pitch, yaw) gaze and optionally head pose, in radians."""

    def __init__(self, role: str = "loss_net", image_size: int = 64):
        super().__init__()
        if role not in ("loss_net", "eval_net"):
            raise InvalidArgument(f"unknown estimator role {role!r}")
        self.role = role
        self.image_size = image_size
        if role == "loss_net":
            chans, depth, feat = (16, 32, 64, 64), 1, 128
        else:
            chans, depth, feat = (24, 48, 96, 128), 2, 128
        blocks, cin = [], 3
        for c in chans:
            blocks.append(_block(cin, c, depth))
            cin = c
        self.body = nn.Sequential(*blocks)
        side = image_size // 2 ** len(chans)
        self.fc = nn.Sequential(nn.Flatten(), nn.Linear(cin * side * side, feat), nn.ReLU())
        self.feature_dim = feat
        self.out = nn.Linear(feat, 4 if role == "eval_net" else 2)

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.body(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.penultimate(x))


class SubjectClassifier(nn.Module):
    """Subject-ID classifier with an embedding layer and tappable conv stages."""

    def __init__(self, n_classes: int, embed_dim: int = 64, width: int = 32, image_size: int = 64):
        super().__init__()
        self.width, self.image_size = width, image_size
        self.stages = nn.ModuleList([
            _block(3, width, 1), _block(width, 2 * width, 1), _block(2 * width, 2 * width, 1),
            _block(2 * width, 4 * width, 1),
        ])
        side = image_size // 16
        self.embed = nn.Sequential(nn.Flatten(), nn.Linear(4 * width * side * side, embed_dim))
        self.classify = nn.Linear(embed_dim, n_classes)
        self.embed_dim = embed_dim

    @property
    def n_layers(self) -> int:
        return len(self.stages)

    def features(self, x: torch.Tensor, layers=(1, 2, 3)) -> list[torch.Tensor]:
        """Activations after the requested 1-based conv stages."""
        for i in layers:
            if not 1 <= i <= self.n_layers:
                raise InvalidArgument(f"layer index {i} out of range 1..{self.n_layers}")
        out, h = [], x
        for i, stage in enumerate(self.stages, start=1):
            if i > max(layers):
                break
            h = stage(h)
            if i in layers:
                out.append(h)
        return out

    def embedding(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for stage in self.stages:
            h = stage(h)
        return self.embed(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classify(F.relu(self.embedding(x)))


def fingerprint(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    module.frozen_fingerprint = fingerprint(module)
    return module


def images_tensor(samples) -> torch.Tensor:
    return torch.tensor(np.stack([s.image for s in samples]), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()


@dataclass
class EstimatorTrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 1e-4
    gate_deg: float = 2.0
    val_fraction: float = 0.15


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # brightness/contrast jitter keeps the nets usable on rendered (blurrier) images
    b = x.shape[0]
    gain = 1.0 + 0.1 * (torch.rand(b, 1, 1, 1, generator=gen) - 0.5)
    bias = 0.05 * (torch.rand(b, 1, 1, 1, generator=gen) - 0.5)
    return (x * gain + bias).clamp(0, 1)


def _fit(model, x, y, loss_fn, cfg: EstimatorTrainConfig, seed: int, augment=True):
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = x.shape[0]
    steps = cfg.epochs * max(1, n // cfg.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, cfg.lr, total_steps=steps, pct_start=0.15)
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            xb = _augment(x[idx], gen) if augment else x[idx]
            loss = loss_fn(model(xb), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step < steps - 1:
                sched.step()
            step += 1
    model.eval()
    return model


def split_by_subject(samples, val_fraction: float, seed: int):
    """Hold out whole subjects for validation."""
    ids = sorted({s.subject_id for s in samples})
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(len(ids) * val_fraction)))
    val_ids = set(rng.choice(ids, size=n_val, replace=False).tolist())
    train = [s for s in samples if s.subject_id not in val_ids]
    val = [s for s in samples if s.subject_id in val_ids]
    return train, val


@torch.no_grad()
def predict(model: nn.Module, x: torch.Tensor, batch: int = 128) -> torch.Tensor:
    model.eval()
    return torch.cat([model(x[i:i + batch]) for i in range(0, x.shape[0], batch)])


def estimator_errors(model: GazeEstimator, samples) -> dict:
    """Mean angular errors in degrees against generator labels."""
    pred = predict(model, images_tensor(samples)).double().numpy()
    gaze = np.stack([s.gaze for s in samples])
    out = {"gaze_deg": float(np.rad2deg(pitchyaw_error(pred[:, :2], gaze)).mean())}
    if pred.shape[1] == 4:
        head = np.stack([s.head_pose for s in samples])
        out["head_deg"] = float(np.rad2deg(pitchyaw_error(pred[:, 2:], head)).mean())
    return out


def train_estimator(samples, role: str, seed: int, config: EstimatorTrainConfig | None = None,
                    val_samples=None, enforce_gate: bool = True) -> GazeEstimator:
    """Train and freeze a gaze estimator on generator samples.

    Raises :class:`TrainingFailure` when the held-out error exceeds the gate.
    """
    cfg = config or EstimatorTrainConfig()
    if val_samples is None:
        samples, val_samples = split_by_subject(samples, cfg.val_fraction, seed)
    torch.manual_seed(seed)
    model = GazeEstimator(role, image_size=samples[0].image.shape[0])
    x = images_tensor(samples)
    y = torch.tensor(np.stack([np.concatenate([s.gaze, s.head_pose]) if role == "eval_net" else s.gaze
                               for s in samples]), dtype=torch.float32)
    _fit(model, x, y, lambda p, t: F.l1_loss(p, t), cfg, seed)
    errors = estimator_errors(model, val_samples)
    model.validation = errors
    log.info("%s validation: %s", role, errors)
    worst = max(errors.values())
    if enforce_gate and worst > cfg.gate_deg:
        raise TrainingFailure(f"{role} held-out error {worst:.2f} deg exceeds {cfg.gate_deg} deg",
                              diagnostics=errors)
    return freeze(model)


def train_subject_classifier(samples, seed: int, config: EstimatorTrainConfig | None = None,
                             val_samples=None, width: int = 32, embed_dim: int = 64,
                             gate_accuracy: float = 0.95, enforce_gate: bool = True) -> SubjectClassifier:
    cfg = config or EstimatorTrainConfig(epochs=15)
    ids = sorted({s.subject_id for s in samples})
    index = {sid: i for i, sid in enumerate(ids)}
    torch.manual_seed(seed)
    model = SubjectClassifier(len(ids), embed_dim, width, samples[0].image.shape[0])
    model.subject_ids = ids
    x = images_tensor(samples)
    y = torch.tensor([index[s.subject_id] for s in samples])
    _fit(model, x, y, F.cross_entropy, cfg, seed)
    if val_samples:
        pred = predict(model, images_tensor(val_samples)).argmax(1).numpy()
        truth = np.array([index[s.subject_id] for s in val_samples])
        acc = float((pred == truth).mean())
        model.validation = {"accuracy": acc}
        log.info("subject classifier validation accuracy %.3f", acc)
        if enforce_gate and acc < gate_accuracy:
            raise TrainingFailure(f"identity accuracy {acc:.3f} below {gate_accuracy}",
                                  diagnostics={"accuracy": acc})
    return freeze(model)


def fresh_copy(model: nn.Module) -> nn.Module:
    """Trainable deep copy of a frozen network."""
    m = copy.deepcopy(model)
    for p in m.parameters():
        p.requires_grad_(True)
    return m


def save_network(path, model: nn.Module) -> None:
    """Store a frozen helper network in the checkpoint container format."""
    from .checkpoint import CheckpointData, save_checkpoint, state_to_arrays

    if isinstance(model, GazeEstimator):
        arch = {"type": "gaze", "role": model.role, "image_size": model.image_size}
    elif isinstance(model, SubjectClassifier):
        arch = {"type": "subject", "n_classes": model.classify.out_features, "embed_dim": model.embed_dim,
                "width": model.width, "image_size": model.image_size,
                "subject_ids": list(getattr(model, "subject_ids", []))}
    else:
        raise InvalidArgument(f"cannot save network of type {type(model).__name__}")
    header = {"kind": "gazefield-network", "arch": arch, "validation": getattr(model, "validation", {}),
              "fingerprint": fingerprint(model)}
    save_checkpoint(path, CheckpointData(header, state_to_arrays("", model.state_dict())))


def load_network(path) -> nn.Module:
    from .checkpoint import arrays_to_state, load_checkpoint
    from .errors import CheckpointError

    data = load_checkpoint(path)
    h = data.header
    if h.get("kind") != "gazefield-network":
        raise CheckpointError(f"{path} does not hold a helper network")
    a = h["arch"]
    if a["type"] == "gaze":
        model = GazeEstimator(a["role"], a["image_size"])
    else:
        model = SubjectClassifier(a["n_classes"], a["embed_dim"], a["width"], a["image_size"])
        model.subject_ids = a["subject_ids"]
    model.load_state_dict(arrays_to_state("", data.tensors))
    model.validation = h.get("validation", {})
    freeze(model)
    if model.frozen_fingerprint != h["fingerprint"]:
        raise CheckpointError(f"{path}: weights do not match the stored fingerprint")
    return model

"""Image-quality and identity metrics plus the aggregate report."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import linalg

from .errors import InvalidArgument, UndefinedSimilarity

SSIM_WINDOW = 8
SSIM_K1, SSIM_K2 = 0.01, 0.03
PSNR_CAP_DB = 100.0
FID_EPS = 1e-6

# column order follows the usual redirection results table (LPIPS omitted)
REPORT_COLUMNS = ("Gaze", "Head Pose", "SSIM", "PSNR", "FID", "Identity Similarity")


def _as_hwc(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
        if x.ndim == 3 and x.shape[0] in (1, 3) and x.shape[-1] not in (1, 3):
            x = np.moveaxis(x, 0, -1)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    return x


def _check_pair(a, b):
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _box(x: np.ndarray, k: int) -> np.ndarray:
    """Mean over every valid k x k window of an (H, W, C) array."""
    c = np.cumsum(np.cumsum(np.pad(x, ((1, 0), (1, 0), (0, 0))), 0), 1)
    s = c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]
    return s / (k * k)


def ssim(a, b, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean SSIM over all 8x8 windows (uniform weights), averaged over channels.

    Images are (H, W), (H, W, C) arrays or (C, H, W) tensors in [0, 1].
    """
    a, b = _check_pair(a, b)
    if min(a.shape[:2]) < window:
        raise InvalidArgument(f"images must be at least {window}x{window}")
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _box(a, window), _box(b, window)
    # unbiased window covariances, as in the reference implementation
    n = window * window
    corr = n / (n - 1)
    va = (_box(a * a, window) - mu_a ** 2) * corr
    vb = (_box(b * b, window) - mu_b ** 2) * corr
    cov = (_box(a * b, window) - mu_a * mu_b) * corr
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    return float(s.mean(axis=(0, 1)).mean())


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def cosine_similarity_100(ea, eb) -> float:
    ea = np.asarray(ea, dtype=np.float64).ravel()
    eb = np.asarray(eb, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarity("identity similarity is undefined for a zero embedding")
    return float(100.0 * np.dot(ea, eb) / (na * nb))


def _batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        x = images.float()
    else:
        x = torch.tensor(np.stack([_as_hwc(i) for i in images]), dtype=torch.float32).permute(0, 3, 1, 2)
    if x.ndim == 3:
        x = x[None]
    return x.contiguous()


@torch.no_grad()
def identity_similarity(a, b, embedder) -> float:
    """100 * cosine between the embedder's vectors for two images."""
    emb = embedder.embedding(_batch([a, b])).double().numpy()
    return cosine_similarity_100(emb[0], emb[1])


def frechet_distance(feat_a: np.ndarray, feat_b: np.ndarray, eps: float = FID_EPS) -> tuple[float, dict]:
    """Frechet distance between gaussians fitted to two feature sets.

    Returns the distance and metadata noting whether the covariances had
    to be regularized with ``eps * I``.
    """
    feat_a, feat_b = np.asarray(feat_a, np.float64), np.asarray(feat_b, np.float64)
    if feat_a.ndim != 2 or feat_b.ndim != 2 or feat_a.shape[1] != feat_b.shape[1]:
        raise InvalidArgument("feature sets must be (n, d) with matching d")
    if len(feat_a) < 2 or len(feat_b) < 2:
        raise InvalidArgument("need at least two samples per set")
    mu_a, mu_b = feat_a.mean(0), feat_b.mean(0)
    sa = np.atleast_2d(np.cov(feat_a, rowvar=False))
    sb = np.atleast_2d(np.cov(feat_b, rowvar=False))
    meta = {"regularized": False, "eps": 0.0}
    d = sa.shape[0]
    singular = min(np.linalg.eigvalsh(sa).min(), np.linalg.eigvalsh(sb).min()) <= eps
    if singular:
        sa, sb = sa + eps * np.eye(d), sb + eps * np.eye(d)
        meta = {"regularized": True, "eps": eps}
    # symmetric form tr(sqrt(sqrt(Sa) Sb sqrt(Sa))) keeps fid(a,b) == fid(b,a)
    ra = linalg.sqrtm(sa).real
    cross = linalg.sqrtm(ra @ sb @ ra).real
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(cross))
    return max(value, 0.0), meta


@torch.no_grad()
def penultimate_features(images, eval_net, batch: int = 128) -> np.ndarray:
    x = _batch(images)
    eval_net.eval()
    return torch.cat([eval_net.penultimate(x[i:i + batch]) for i in range(0, len(x), batch)]).double().numpy()


def fid_proxy(set_a, set_b, eval_net) -> float:
    """Frechet distance over the eval network's penultimate features."""
    value, _ = fid_proxy_with_meta(set_a, set_b, eval_net)
    return value


def fid_proxy_with_meta(set_a, set_b, eval_net) -> tuple[float, dict]:
    fa = penultimate_features(set_a, eval_net)
    fb = penultimate_features(set_b, eval_net)
    if np.array_equal(fa, fb):
        return 0.0, {"regularized": False, "eps": 0.0}
    # ordering the pair makes the result bit-symmetric
    if fa.tobytes() > fb.tobytes():
        fa, fb = fb, fa
    return frechet_distance(fa, fb)


@dataclass
class MetricReport:
    gaze_error: float
    head_error: float
    ssim: float
    psnr: float
    fid_proxy: float
    identity_similarity: float
    n_pairs: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("gaze_error", "head_error", "ssim", "psnr", "fid_proxy", "identity_similarity"):
            if not math.isfinite(getattr(self, k)):
                raise InvalidArgument(f"metric {k} is not finite")
        if self.ssim > 1.0 + 1e-9:
            raise InvalidArgument("ssim cannot exceed 1")

    def row(self) -> list[float]:
        return [self.gaze_error, self.head_error, self.ssim, self.psnr, self.fid_proxy, self.identity_similarity]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def table(self, label: str = "model") -> str:
        return format_table([(label, self)])


def format_table(rows, extra_status: dict | None = None) -> str:
    """Tab-separated table; rows are (label, MetricReport or None for a failed run)."""
    lines = ["\t".join(("Model",) + REPORT_COLUMNS)]
    for label, rep in rows:
        if rep is None:
            status = (extra_status or {}).get(label, "failed")
            lines.append("\t".join([label] + [status] * len(REPORT_COLUMNS)))
        else:
            lines.append("\t".join([label] + [f"{v:.3f}" for v in rep.row()]))
    return "\n".join(lines) + "\n"

"""Positional encoding, latent codes and the conditional radiance-field MLPs."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import InvalidArgument

LATENT_DIMS = {"sh": 16, "ex": 8, "te": 16, "il": 4}
LATENT_NAMES = ("sh", "ex", "te", "il")
LATENT_SIZE = sum(LATENT_DIMS.values())


class PositionalEncoding(nn.Module):
    """gamma(x) = [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]."""

    def __init__(self, n_frequencies: int = 6, include_input: bool = True):
        super().__init__()
        self.n_frequencies = n_frequencies
        self.include_input = include_input
        self.register_buffer("freqs", (2.0 ** torch.arange(n_frequencies)) * math.pi, persistent=False)

    @property
    def out_dim(self) -> int:
        return 3 * (2 * self.n_frequencies + int(self.include_input))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xf = x[..., None, :] * self.freqs.to(x.dtype)[:, None]
        parts = torch.stack([torch.sin(xf), torch.cos(xf)], -2).flatten(-3)
        return torch.cat([x, parts], -1) if self.include_input else parts


def encode_position(x, n_frequencies: int = 6, include_input: bool = True) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float64)
    return PositionalEncoding(n_frequencies, include_input)(x)


class LatentCodes(nn.Module):
    """Shape, expression, texture and illumination codes plus their frozen initial values."""

    def __init__(self, z_sh, z_ex, z_te, z_il, z0=None):
        super().__init__()
        values = dict(zip(LATENT_NAMES, (z_sh, z_ex, z_te, z_il)))
        for name in LATENT_NAMES:
            v = torch.as_tensor(values[name]).clone()
            if v.shape != (LATENT_DIMS[name],):
                raise InvalidArgument(f"z_{name} must have shape ({LATENT_DIMS[name]},)")
            if not torch.isfinite(v).all():
                raise InvalidArgument(f"z_{name} must be finite")
            setattr(self, f"z_{name}", nn.Parameter(v))
            init = v if z0 is None else torch.as_tensor(z0[name]).to(v.dtype)
            self.register_buffer(f"z0_{name}", init.clone())

    def code(self, name: str) -> torch.Tensor:
        return getattr(self, f"z_{name}")

    def initial(self, name: str) -> torch.Tensor:
        return getattr(self, f"z0_{name}")

    def vector(self) -> torch.Tensor:
        return torch.cat([self.code(n) for n in LATENT_NAMES])

    def initial_vector(self) -> torch.Tensor:
        return torch.cat([self.initial(n) for n in LATENT_NAMES])

    @classmethod
    def from_vectors(cls, z: torch.Tensor, z0: torch.Tensor) -> "LatentCodes":
        parts, parts0, i = [], {}, 0
        for n in LATENT_NAMES:
            d = LATENT_DIMS[n]
            parts.append(z[i:i + d])
            parts0[n] = z0[i:i + d]
            i += d
        return cls(*parts, z0=parts0)

    def copy(self) -> "LatentCodes":
        return LatentCodes.from_vectors(self.vector().detach().clone(), self.initial_vector().clone())


def subject_embedding(subject) -> np.ndarray:
    """Fixed linear placement of a synthetic subject's parameters in code space.

    z_sh[0:8]  head radius, eye radius, left/right eye x, y (standardized)
    z_ex[0]    expression bulge
    z_te[0:9]  skin, iris, sclera albedo
    z_il[0:3]  illumination direction
    Remaining slots are zero.
    """
    z = {n: np.zeros(LATENT_DIMS[n]) for n in LATENT_NAMES}
    eyes = np.asarray(subject.eye_offsets)
    z["sh"][:8] = [
        (subject.head_radius - 35.5) / 2.5,
        (subject.eye_radius - 9.0) / 0.5,
        (eyes[0, 0] + 12.0), (eyes[0, 1] + 6.25) / 1.25,
        (eyes[1, 0] - 12.0), (eyes[1, 1] + 6.25) / 1.25,
        (eyes[0, 2] + 31.0) / 2.0, (eyes[1, 2] + 31.0) / 2.0,
    ]
    z["ex"][0] = 2.0 * subject.expression_bulge - 1.0
    z["te"][:9] = (np.concatenate([subject.skin_albedo, subject.iris_albedo, subject.sclera_albedo]) - 0.5) * 2.0
    z["il"][:3] = np.asarray(subject.illumination_dir)
    return np.concatenate([z[n] for n in LATENT_NAMES])


def init_latents_from_subject(subject, noise_scale: float = 0.0, seed: int = 0,
                              dtype=torch.float32) -> LatentCodes:
    """Latent codes for a subject: exact embedding as z0, plus gaussian noise for z."""
    z0 = subject_embedding(subject)
    rng = np.random.default_rng([seed, int(subject.subject_id), 0x1A7])
    z = z0 + noise_scale * rng.standard_normal(z0.shape) if noise_scale else z0.copy()
    return LatentCodes.from_vectors(torch.tensor(z, dtype=dtype), torch.tensor(z0, dtype=dtype))


class RadianceField(nn.Module):
    """h: (gamma(x), z_sh, z_ex, z_te, z_il, g) -> (sigma, f).

    ``depth`` hidden layers of ``width`` units with the full input
    re-injected before layer ``skip``.  sigma goes through softplus and the
    features through a sigmoid, so empty space renders to an all-zero
    feature vector that the max-merge leaves untouched.
    """

    def __init__(self, n_frequencies: int = 6, depth: int = 6, width: int = 128, skip: int = 3,
                 feature_dim: int = 24, latent_dim: int = LATENT_SIZE, gaze_dim: int = 2):
        super().__init__()
        if feature_dim % 3:
            raise InvalidArgument("feature_dim must be divisible by 3")
        self.encoding = PositionalEncoding(n_frequencies, True)
        self.feature_dim = feature_dim
        self.skip = skip
        in_dim = self.encoding.out_dim + latent_dim + gaze_dim
        self.in_dim = in_dim
        layers = []
        for i in range(depth):
            d_in = in_dim if i == 0 else width
            if i == skip:
                d_in += in_dim
            layers.append(nn.Linear(d_in, width))
        self.layers = nn.ModuleList(layers)
        self.sigma_head = nn.Linear(width, 1)
        self.feature_head = nn.Linear(width, feature_dim)

    def _split_linear(self, layer: nn.Linear, h, enc, cond):
        # Same as layer(cat([h, enc, cond])) without materializing the
        # per-point copy of the conditioning vector.
        w = layer.weight
        nh = 0 if h is None else h.shape[-1]
        ne = enc.shape[-1]
        out = F.linear(enc, w[:, nh:nh + ne])
        if h is not None:
            out = out + F.linear(h, w[:, :nh])
        return out + F.linear(cond, w[:, nh + ne:], layer.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor):
        """x: (..., 3) normalized positions; cond: (..., latent+gaze), broadcastable against x."""
        enc = self.encoding(x)
        if enc.shape[-1] + cond.shape[-1] != self.in_dim:
            raise InvalidArgument(
                f"field expects {self.in_dim} input features, got {enc.shape[-1] + cond.shape[-1]}")
        h = None
        for i, layer in enumerate(self.layers):
            if i == 0:
                h = self._split_linear(layer, None, enc, cond)
            elif i == self.skip:
                h = self._split_linear(layer, h, enc, cond)
            else:
                h = layer(h)
            h = F.relu(h)
        sigma = F.softplus(self.sigma_head(h))[..., 0]
        return sigma, torch.sigmoid(self.feature_head(h))


STREAMS = ("eyes", "face_without_eyes")


def field_forward(stream: str, x, latents: LatentCodes, g, params):
    """Evaluate one stream at points ``x`` (N, 3) for one latent set and gaze.

    ``params`` maps stream names to :class:`RadianceField` instances (an
    ``nn.ModuleDict`` or a plain dict).
    """
    if stream not in STREAMS:
        raise InvalidArgument(f"unknown stream {stream!r}")
    try:
        field = params[stream]
    except KeyError:
        raise InvalidArgument(f"no parameters for stream {stream!r}") from None
    x = torch.as_tensor(x)
    if x.ndim != 2 or x.shape[-1] != 3:
        raise InvalidArgument("x must have shape (N, 3)")
    g = torch.as_tensor(g, dtype=x.dtype).reshape(-1)
    if g.shape != (2,):
        raise InvalidArgument("gaze must have two entries")
    cond = torch.cat([latents.vector().to(x.dtype), g])[None]
    return field(x, cond)

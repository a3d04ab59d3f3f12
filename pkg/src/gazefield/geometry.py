"""Gaze label conversions, angular error and the gaze rotation matrix.

Convention: a (pitch, yaw) label maps to the unit vector

    v = (-cos(pitch) sin(yaw), -sin(pitch), -cos(pitch) cos(yaw))

so that (0, 0) looks back along -z toward a camera on the -z side and
positive pitch looks up (-y is up in image coordinates).

Every function accepts either numpy arrays or torch tensors with a trailing
dimension of 2 (angles) or 3 (vectors) and returns the same kind of object.
The torch path is differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidArgument


def _is_torch(x) -> bool:
    return isinstance(x, torch.Tensor)


def _as_array(x):
    if _is_torch(x):
        return x
    return np.asarray(x, dtype=np.float64)


def _check_finite(x, what: str) -> None:
    ok = bool(torch.isfinite(x).all()) if _is_torch(x) else bool(np.isfinite(x).all())
    if not ok:
        raise InvalidArgument(f"{what} must be finite")


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    a = _as_array(a)
    lib = torch if _is_torch(a) else np
    w = lib.remainder(a + math.pi, 2 * math.pi) - math.pi
    return lib.where(w <= -math.pi, w + 2 * math.pi, w)


@dataclass(frozen=True)
class GazeAngles:
    """A pitch-yaw label in radians, with yaw wrapped to (-pi, pi]."""

    pitch: float
    yaw: float

    def __post_init__(self):
        if not (math.isfinite(self.pitch) and math.isfinite(self.yaw)):
            raise InvalidArgument("gaze angles must be finite")
        pitch, yaw = float(self.pitch), float(self.yaw)
        if abs(pitch) > math.pi / 2:
            pitch, yaw = (float(a) for a in vector_to_pitchyaw(pitchyaw_to_vector([pitch, yaw])))
        object.__setattr__(self, "pitch", pitch)
        object.__setattr__(self, "yaw", float(wrap_angle(yaw)))

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw])

    @classmethod
    def from_array(cls, a) -> "GazeAngles":
        a = np.asarray(a, dtype=np.float64).reshape(2)
        return cls(float(a[0]), float(a[1]))


def pitchyaw_to_vector(g, check: bool = True):
    """Unit gaze vector(s) for pitch-yaw label(s) of shape (..., 2).

    ``check=False`` skips the finiteness test so that a NaN coming out of a
    network propagates into the loss (where the training loop catches it)
    instead of raising here.
    """
    g = _as_array(g)
    if check:
        _check_finite(g, "gaze")
    if g.shape[-1] != 2:
        raise InvalidArgument(f"expected trailing dimension 2, got shape {tuple(g.shape)}")
    lib = torch if _is_torch(g) else np
    p, y = g[..., 0], g[..., 1]
    cp = lib.cos(p)
    return lib.stack([-cp * lib.sin(y), -lib.sin(p), -cp * lib.cos(y)], -1)


def vector_to_pitchyaw(v):
    """Inverse of :func:`pitchyaw_to_vector`; input need not be normalized."""
    v = _as_array(v)
    _check_finite(v, "vector")
    if v.shape[-1] != 3:
        raise InvalidArgument(f"expected trailing dimension 3, got shape {tuple(v.shape)}")
    lib = torch if _is_torch(v) else np
    n = lib.linalg.norm(v, axis=-1) if not _is_torch(v) else torch.linalg.norm(v, dim=-1)
    if bool((n == 0).any()):
        raise InvalidArgument("zero-length gaze vector")
    u = v / n[..., None]
    if _is_torch(u):
        pitch = torch.asin(torch.clamp(-u[..., 1], -1.0, 1.0))
    else:
        pitch = np.arcsin(np.clip(-u[..., 1], -1.0, 1.0))
    # adding 0.0 turns -0.0 into +0.0 so the poles get yaw 0 rather than -pi
    yaw = lib.arctan2(-u[..., 0] + 0.0, -u[..., 2] + 0.0)
    return lib.stack([pitch, yaw], -1)


def gaze_rotation_matrix(g):
    """R(g) = Rot_y(yaw) @ Rot_x(-pitch), so that R(g) @ (0, 0, -1) = v(g).

    Batched over leading dimensions of ``g``; returns shape (..., 3, 3).
    """
    g = _as_array(g)
    _check_finite(g, "gaze")
    if g.shape[-1] != 2:
        raise InvalidArgument(f"expected trailing dimension 2, got shape {tuple(g.shape)}")
    lib = torch if _is_torch(g) else np
    p, y = g[..., 0], g[..., 1]
    cp, sp = lib.cos(p), lib.sin(p)
    cy, sy = lib.cos(y), lib.sin(y)
    zero = lib.zeros_like(p)
    one = lib.ones_like(p)
    # Rot_x(-p) has rows (1,0,0), (0,cp,sp), (0,-sp,cp).
    rx = lib.stack([
        lib.stack([one, zero, zero], -1),
        lib.stack([zero, cp, sp], -1),
        lib.stack([zero, -sp, cp], -1),
    ], -2)
    ry = lib.stack([
        lib.stack([cy, zero, sy], -1),
        lib.stack([zero, one, zero], -1),
        lib.stack([-sy, zero, cy], -1),
    ], -2)
    return ry @ rx


def angular_error(v, v_hat):
    """Angle in radians between vectors of shape (..., 3).

    The cosine is clamped to [-1, 1]; zero-length inputs raise.
    """
    v, v_hat = _as_array(v), _as_array(v_hat)
    if _is_torch(v) or _is_torch(v_hat):
        v = torch.as_tensor(v)
        v_hat = torch.as_tensor(v_hat, dtype=v.dtype)
        nv, nh = torch.linalg.norm(v, dim=-1), torch.linalg.norm(v_hat, dim=-1)
        if bool((nv == 0).any()) or bool((nh == 0).any()):
            raise InvalidArgument("zero-length vector in angular_error")
        cos = (v * v_hat).sum(-1) / (nv * nh)
        return torch.arccos(torch.clamp(cos, -1.0, 1.0))
    nv, nh = np.linalg.norm(v, axis=-1), np.linalg.norm(v_hat, axis=-1)
    if np.any(nv == 0) or np.any(nh == 0):
        raise InvalidArgument("zero-length vector in angular_error")
    cos = (v * v_hat).sum(-1) / (nv * nh)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def pitchyaw_error(a, b):
    """Angular error in radians between two pitch-yaw labels."""
    return angular_error(pitchyaw_to_vector(a), pitchyaw_to_vector(b))


def smooth_angular_error(v, v_hat):
    """Angular error via atan2(|v x v_hat|, v . v_hat) for training losses.

    Same value as :func:`angular_error` but with finite gradients near
    parallel vectors, where the arccos form has an unbounded derivative.
    """
    w = v_hat.to(v.dtype)
    # explicit products: a fused cross kernel can leave rounding residue for v == v_hat
    cross = torch.stack([v[..., 1] * w[..., 2] - v[..., 2] * w[..., 1],
                         v[..., 2] * w[..., 0] - v[..., 0] * w[..., 2],
                         v[..., 0] * w[..., 1] - v[..., 1] * w[..., 0]], -1)
    return torch.atan2(torch.linalg.norm(cross, dim=-1), (v * w).sum(-1))

"""Rays, volume rendering of feature grids, eye-feature rotation, merging and decoding.

Feature grids are tensors of shape (B, C + 1, h, w): ``C`` feature
channels (C divisible by 3) followed by one accumulated-alpha channel.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .camera import Camera
from .errors import InvalidArgument
from .field import LATENT_SIZE, RadianceField
from .geometry import gaze_rotation_matrix


@dataclass
class RayBundle:
    origins: torch.Tensor      # (N, 3)
    directions: torch.Tensor   # (N, 3), unit norm
    near: float
    far: float

    def __post_init__(self):
        if not self.near < self.far:
            raise InvalidArgument("near must be smaller than far")


def generate_rays(camera: Camera, h: int, w: int, near: float | None = None, far: float | None = None,
                  margin: tuple[float, float] = (55.0, 25.0), dtype=torch.float64) -> RayBundle:
    """One ray per pixel centre of an h x w grid spanning the camera's field of view.

    Without explicit bounds the depth range is the distance to the world
    origin minus/plus ``margin``.
    """
    origin, dirs = camera.pixel_rays(h, w)
    dist = float(np.linalg.norm(origin))
    near = dist - margin[0] if near is None else near
    far = dist + margin[1] if far is None else far
    d = torch.tensor(dirs.reshape(-1, 3), dtype=dtype)
    o = torch.tensor(np.broadcast_to(origin, dirs.reshape(-1, 3).shape).copy(), dtype=dtype)
    return RayBundle(o, d, float(near), float(far))


def sample_along_rays(rays: RayBundle, n_samples: int, stratified: bool = False, seed=None):
    """Depths partitioning [near, far] into ``n_samples`` bins, one sample per bin.

    Without stratification the samples sit at bin midpoints.  With it each
    sample is jittered uniformly inside its bin using ``seed`` (an int or a
    ``torch.Generator``).  Each sample's delta is the length of the interval
    between the midpoints to its neighbours, with the first and last capped
    at near and far, so deltas always sum to far - near.

    Returns (points (N, S, 3), deltas (N, S), depths (N, S)).
    """
    if n_samples < 2:
        raise InvalidArgument("need at least two samples per ray")
    n_rays = rays.origins.shape[0]
    dtype = rays.origins.dtype
    edges = torch.linspace(rays.near, rays.far, n_samples + 1, dtype=dtype)
    lo, width = edges[:-1], edges[1:] - edges[:-1]
    if stratified:
        gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed or 0))
        u = torch.rand((n_rays, n_samples), generator=gen, dtype=dtype)
    else:
        u = torch.full((n_rays, n_samples), 0.5, dtype=dtype)
    depths = lo + u * width
    mids = 0.5 * (depths[:, 1:] + depths[:, :-1])
    bounds = torch.cat([torch.full((n_rays, 1), rays.near, dtype=dtype), mids,
                        torch.full((n_rays, 1), rays.far, dtype=dtype)], -1)
    deltas = bounds[:, 1:] - bounds[:, :-1]
    points = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    return points, deltas, depths


def volume_render(sigma: torch.Tensor, features: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Emission-absorption quadrature over the last sample axis.

    sigma, deltas: (..., S); features: (..., S, C).  Returns (..., C + 1)
    holding sum_i T_i a_i f_i followed by the alpha sum_i T_i a_i, with
    a_i = 1 - exp(-sigma_i delta_i) and T_i = prod_{j<i} (1 - a_j).
    """
    if bool((sigma < 0).any()):
        raise InvalidArgument("density must be non-negative")
    tau = sigma * deltas
    alpha = 1.0 - torch.exp(-tau)
    # exclusive cumulative sum of optical depth gives the transmittance
    acc = torch.cumsum(tau, -1) - tau
    weights = alpha * torch.exp(-acc)
    feat = (weights[..., None] * features).sum(-2)
    return torch.cat([feat, weights.sum(-1, keepdim=True)], -1)


def rotate_eye_features(grid: torch.Tensor, rotation, has_alpha: bool = True) -> torch.Tensor:
    """Apply a 3x3 rotation to every contiguous channel triplet of a feature grid.

    ``grid`` is (B, C [+1], h, w); ``rotation`` is (3, 3) or (B, 3, 3).  The
    alpha channel passes through unchanged.
    """
    c = grid.shape[1] - int(has_alpha)
    if c % 3:
        raise InvalidArgument(f"feature channel count {c} is not divisible by 3")
    rot = torch.as_tensor(rotation, dtype=grid.dtype)
    if rot.ndim == 2:
        rot = rot.expand(grid.shape[0], 3, 3)
    b, _, h, w = grid.shape
    trip = grid[:, :c].reshape(b, c // 3, 3, h, w)
    out = torch.einsum("bij,bkjhw->bkihw", rot, trip).reshape(b, c, h, w)
    return torch.cat([out, grid[:, c:]], 1) if has_alpha else out


def merge_features(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Element-wise maximum over every channel, alpha included."""
    if a.shape != b.shape:
        raise InvalidArgument(f"cannot merge grids of shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return torch.maximum(a, b)


def upsample_alpha(grid: torch.Tensor, size: int) -> torch.Tensor:
    """Alpha channel of a (B, C+1, h, w) grid resized to (B, 1, size, size)."""
    a = grid[:, -1:]
    if a.shape[-1] == size and a.shape[-2] == size:
        return a
    return F.interpolate(a, size=(size, size), mode="bilinear", align_corners=False)


class NeuralRenderer(nn.Module):
    """Upsampling decoder from a low-resolution feature grid to RGB in [0, 1].

    Each stage doubles the resolution (nearest) and applies a 3x3
    convolution with a leaky ReLU; a 3x3 head with a sigmoid gives RGB.
    """

    def __init__(self, in_channels: int = 25, stages: int = 2, width: int = 64, low_res: int = 16):
        super().__init__()
        self.in_channels = in_channels
        self.stages = stages
        self.low_res = low_res
        self.stem = nn.Conv2d(in_channels, width, 1)
        convs, ch = [], width
        for _ in range(stages):
            nxt = max(ch // 2, 16)
            convs.append(nn.Conv2d(ch, nxt, 3, padding=1))
            ch = nxt
        self.convs = nn.ModuleList(convs)
        self.head = nn.Conv2d(ch, 3, 3, padding=1)

    @property
    def out_res(self) -> int:
        return self.low_res * 2 ** self.stages

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        if grid.ndim != 4 or grid.shape[1] != self.in_channels or grid.shape[-2:] != (self.low_res, self.low_res):
            raise InvalidArgument(
                f"decoder expects (B, {self.in_channels}, {self.low_res}, {self.low_res}), got {tuple(grid.shape)}")
        h = F.leaky_relu(self.stem(grid), 0.2)
        for conv in self.convs:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.leaky_relu(conv(h), 0.2)
        return torch.sigmoid(self.head(h))


def neural_render(grid: torch.Tensor, decoder: NeuralRenderer) -> torch.Tensor:
    """Decode (B, C+1, h, w) grids into (B, 3, H, W) images."""
    return decoder(grid)


def composite(rgb: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Decoded colour over a black background, weighted by the grid's upsampled alpha.

    A grid with zero alpha therefore yields a black image.
    """
    return rgb * upsample_alpha(grid, rgb.shape[-1])


@dataclass
class ModelConfig:
    n_frequencies: int = 6
    depth: int = 6
    width: int = 128
    skip: int = 3
    feature_dim: int = 24
    grid: int = 16
    decoder_stages: int = 2
    decoder_width: int = 64
    n_samples: int = 24
    scene_scale: float = 50.0
    near_margin: float = 55.0
    far_margin: float = 25.0
    two_stream: bool = True
    rotation: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def image_size(self) -> int:
        return self.grid * 2 ** self.decoder_stages


class GazeFieldModel(nn.Module):
    """Two-stream (or single-stream) conditional feature fields plus the shared decoder."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        names = ("eyes", "face_without_eyes") if cfg.two_stream else ("whole",)
        self.fields = nn.ModuleDict({
            n: RadianceField(cfg.n_frequencies, cfg.depth, cfg.width, cfg.skip, cfg.feature_dim, LATENT_SIZE, 2)
            for n in names
        })
        self.decoder = NeuralRenderer(cfg.feature_dim + 1, cfg.decoder_stages, cfg.decoder_width, cfg.grid)

    def rays_for(self, camera: Camera, dtype=torch.float32) -> RayBundle:
        cfg = self.config
        return generate_rays(camera, cfg.grid, cfg.grid, margin=(cfg.near_margin, cfg.far_margin), dtype=dtype)

    def feature_grids(self, latents: torch.Tensor, gaze: torch.Tensor, rays: list[RayBundle],
                      stratified: bool = False, generator: torch.Generator | None = None) -> dict:
        """Volume-render one feature grid per stream for a batch of views.

        latents (B, LATENT_SIZE), gaze (B, 2), one ray bundle per view.
        """
        cfg = self.config
        b = latents.shape[0]
        if gaze.shape != (b, 2) or len(rays) != b:
            raise InvalidArgument("latents, gaze and rays must agree on the batch size")
        pts, dts = [], []
        for r in rays:
            p, d, _ = sample_along_rays(r, cfg.n_samples, stratified, generator)
            pts.append(p)
            dts.append(d)
        points = torch.stack(pts).to(latents.dtype) / cfg.scene_scale        # (B, N, S, 3)
        deltas = torch.stack(dts).to(latents.dtype) / cfg.scene_scale        # (B, N, S)
        cond = torch.cat([latents, gaze.to(latents.dtype)], -1)[:, None, None, :]
        grids = {}
        for name, field in self.fields.items():
            sigma, feat = field(points, cond)
            out = volume_render(sigma, feat, deltas)                          # (B, N, C+1)
            grids[name] = out.transpose(1, 2).reshape(b, -1, cfg.grid, cfg.grid)
        return grids

    def forward(self, latents: torch.Tensor, gaze: torch.Tensor, rays: list[RayBundle],
                stratified: bool = False, generator: torch.Generator | None = None) -> dict:
        """Render (I_fwo, I_e, I_wf); single-stream models only produce I_wf.

        Each image is the shared decoder's output composited over black with
        its grid's alpha channel.
        """
        cfg = self.config
        grids = self.feature_grids(latents, gaze, rays, stratified, generator)
        rot = gaze_rotation_matrix(gaze.to(latents.dtype)) if cfg.rotation else None
        out = {}
        if cfg.two_stream:
            f_fwo = grids["face_without_eyes"]
            f_e = rotate_eye_features(grids["eyes"], rot) if rot is not None else grids["eyes"]
            f_wf = merge_features(f_fwo, f_e)
            b = f_wf.shape[0]
            stacked = torch.cat([f_fwo, f_e, f_wf], 0)
            imgs = composite(self.decoder(stacked), stacked)
            out.update(I_fwo=imgs[:b], I_e=imgs[b:2 * b], I_wf=imgs[2 * b:],
                       F_fwo=f_fwo, F_e=grids["eyes"], F_e_rot=f_e, F_wf=f_wf)
        else:
            f = grids["whole"]
            f_wf = rotate_eye_features(f, rot) if rot is not None else f
            out.update(I_wf=composite(self.decoder(f_wf), f_wf), F_wf=f_wf, I_fwo=None, I_e=None)
        return out


def render_triplet(model: GazeFieldModel, latents, g_target, camera: Camera,
                   stratified: bool = False, generator=None) -> tuple:
    """Render (I_fwo, I_e, I_wf) for one view as (3, H, W) tensors."""
    p = next(model.parameters())
    z = latents.vector() if hasattr(latents, "vector") else torch.as_tensor(latents)
    z = z.to(p.dtype)[None]
    g = torch.as_tensor(g_target, dtype=p.dtype).reshape(1, 2)
    out = model(z, g, [model.rays_for(camera, p.dtype)], stratified, generator)
    pick = lambda k: None if out[k] is None else out[k][0]  # noqa: E731
    return pick("I_fwo"), pick("I_e"), pick("I_wf")

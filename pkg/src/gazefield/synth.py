"""Procedural ray-traced heads with exact masks and gaze labels.

A head is a union of spheres in its own frame (millimetres, -z forward,
-y up): a cranium, a lower-face bump whose size follows the expression
parameter, a nose, and two eyeballs.  Skin is Lambertian under one
directional light; eyeballs are flat-shaded (sclera plus an iris cap) so
that iris coverage can be read back from pixel colours exactly.

The head centre is the face centre used for normalization.  Cameras stored
on a :class:`SceneSample` are expressed in the head frame, which is also
the canonical frame of the radiance fields.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.optimize import minimize

from .camera import (NORMALIZED_DISTANCE_MM, Camera, CameraIntrinsics, CameraPose,
                     focal_for_source, normalization_transform)
from .errors import GeometryError, InvalidArgument, NotEstimable
from .geometry import gaze_rotation_matrix, pitchyaw_to_vector, vector_to_pitchyaw

IRIS_HALF_ANGLE = np.deg2rad(38.0)
AMBIENT = 0.35
SUPERSAMPLES = 4
MIN_IRIS_PIXELS = 10

# Part labels returned by the ray caster.
BACKGROUND, FACE, EYE_LEFT, EYE_RIGHT = 0, 1, 2, 3


@dataclass(frozen=True)
class SyntheticSubject:
    subject_id: int
    head_radius: float
    eye_radius: float
    eye_offsets: tuple  # ((x, y, z) left, (x, y, z) right), head frame, mm
    skin_albedo: tuple
    iris_albedo: tuple
    sclera_albedo: tuple
    expression_bulge: float
    illumination_dir: tuple

    def __post_init__(self):
        if not self.eye_radius < self.head_radius:
            raise InvalidArgument("eye radius must be smaller than head radius")
        for name in ("skin_albedo", "iris_albedo", "sclera_albedo"):
            a = np.asarray(getattr(self, name))
            if a.shape != (3,) or a.min() < 0 or a.max() > 1:
                raise InvalidArgument(f"{name} must be an RGB triple in [0, 1]")
        for c in self.eye_offsets:
            c = np.asarray(c)
            if c[2] >= 0 or np.linalg.norm(c) + self.eye_radius <= self.head_radius:
                raise InvalidArgument("eyeballs must protrude from the front of the head")

    @classmethod
    def random(cls, subject_id: int, seed: int = 0) -> "SyntheticSubject":
        rng = np.random.default_rng([seed, subject_id, 0x5EED])
        head_r = rng.uniform(33.0, 38.0)
        eye_r = rng.uniform(8.5, 9.5)
        ex, ey = rng.uniform(11.0, 13.0), rng.uniform(-7.5, -5.0)
        depth = head_r - rng.uniform(1.5, 2.5)
        ez = -np.sqrt(depth**2 - ex**2 - ey**2)
        skin = np.array([rng.uniform(0.55, 0.95), rng.uniform(0.4, 0.75), rng.uniform(0.3, 0.6)])
        iris = np.array([rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.35)])
        sclera = np.full(3, rng.uniform(0.85, 0.95))
        light = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.2), -1.0])
        light /= np.linalg.norm(light)
        return cls(
            subject_id=int(subject_id),
            head_radius=float(head_r),
            eye_radius=float(eye_r),
            eye_offsets=((float(-ex), float(ey), float(ez)), (float(ex), float(ey), float(ez))),
            skin_albedo=tuple(float(v) for v in skin),
            iris_albedo=tuple(float(v) for v in iris),
            sclera_albedo=tuple(float(v) for v in sclera),
            expression_bulge=float(rng.uniform(0.0, 1.0)),
            illumination_dir=tuple(float(v) for v in light),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eye_offsets"] = [list(c) for c in self.eye_offsets]
        for k in ("skin_albedo", "iris_albedo", "sclera_albedo", "illumination_dir"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSubject":
        return cls(
            subject_id=int(d["subject_id"]),
            head_radius=float(d["head_radius"]),
            eye_radius=float(d["eye_radius"]),
            eye_offsets=tuple(tuple(float(v) for v in c) for c in d["eye_offsets"]),
            skin_albedo=tuple(d["skin_albedo"]),
            iris_albedo=tuple(d["iris_albedo"]),
            sclera_albedo=tuple(d["sclera_albedo"]),
            expression_bulge=float(d["expression_bulge"]),
            illumination_dir=tuple(d["illumination_dir"]),
        )

    def face_spheres(self) -> list[tuple[np.ndarray, float]]:
        r = self.head_radius
        return [
            (np.zeros(3), r),
            (np.array([0.0, 0.45 * r, -0.3 * r]), r * (0.55 + 0.2 * self.expression_bulge)),
            (np.array([0.0, 0.1 * r, -0.95 * r]), 0.2 * r),
        ]

    def eye_centers(self) -> np.ndarray:
        return np.asarray(self.eye_offsets, dtype=np.float64)

    @property
    def bounding_radius(self) -> float:
        return 1.35 * self.head_radius


@dataclass
class SceneSample:
    image: np.ndarray
    mask_eyes: np.ndarray
    mask_face_only: np.ndarray
    mask_whole_face: np.ndarray
    gaze: np.ndarray
    head_pose: np.ndarray
    camera: Camera
    subject_id: int
    meta: dict = field(default_factory=dict)


def _ray_spheres(origin, dirs, spheres):
    """Entry distance of each ray into each sphere (inf on miss)."""
    out = np.full(dirs.shape[:-1] + (len(spheres),), np.inf)
    for k, (c, r) in enumerate(spheres):
        oc = origin - c
        b = dirs @ oc
        disc = b * b - (oc @ oc - r * r)
        hit = disc >= 0
        t = -b - np.sqrt(np.where(hit, disc, 0.0))
        out[..., k] = np.where(hit & (t > 0), t, np.inf)
    return out


def cast_rays(subject: SyntheticSubject, origin: np.ndarray, dirs: np.ndarray):
    """First-hit label, distance and point for rays in the head frame."""
    spheres = subject.face_spheres() + [(c, subject.eye_radius) for c in subject.eye_centers()]
    t_all = _ray_spheres(origin, dirs, spheres)
    idx = np.argmin(t_all, axis=-1)
    t = np.take_along_axis(t_all, idx[..., None], -1)[..., 0]
    label = np.where(np.isinf(t), BACKGROUND,
                     np.where(idx < 3, FACE, np.where(idx == 3, EYE_LEFT, EYE_RIGHT)))
    points = origin + dirs * np.where(np.isinf(t), 0.0, t)[..., None]
    centers = np.stack([c for c, _ in spheres])
    normals = points - centers[idx]
    normals /= np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), 1e-12)
    return label, t, points, normals


def _iris_cos(subject, label, points, gaze_dir):
    """cos of the angle between each eye hit point and the gaze axis."""
    centers = subject.eye_centers()
    c = np.where((label == EYE_LEFT)[..., None], centers[0], centers[1])
    u = (points - c) / subject.eye_radius
    return u @ gaze_dir


def shade(subject: SyntheticSubject, label, points, normals, gaze_dir) -> np.ndarray:
    skin = np.asarray(subject.skin_albedo)
    light = np.asarray(subject.illumination_dir)
    lam = AMBIENT + (1 - AMBIENT) * np.clip(normals @ light, 0.0, None)
    face_rgb = skin * lam[..., None]
    iris = _iris_cos(subject, label, points, gaze_dir) >= np.cos(IRIS_HALF_ANGLE)
    eye_rgb = np.where(iris[..., None], np.asarray(subject.iris_albedo), np.asarray(subject.sclera_albedo))
    is_eye = (label == EYE_LEFT) | (label == EYE_RIGHT)
    rgb = np.where(is_eye[..., None], eye_rgb, np.where((label == FACE)[..., None], face_rgb, 0.0))
    return rgb


def head_frame_camera(camera: Camera, head_pose) -> Camera:
    """Express a world camera in the frame of a head rotated by ``head_pose``."""
    r_h = gaze_rotation_matrix(np.asarray(head_pose, dtype=np.float64))
    pose = CameraPose(camera.pose.rotation @ r_h, camera.pose.translation)
    return Camera(pose, camera.intrinsics)


def relative_head_pose(camera: Camera) -> np.ndarray:
    """Pitch-yaw of the head forward axis seen from a head-frame camera."""
    return vector_to_pitchyaw(camera.pose.rotation @ np.array([0.0, 0.0, -1.0]))


def render_ground_truth(subject: SyntheticSubject, gaze, head_pose, camera: Camera,
                        resolution: int | None = None) -> SceneSample:
    """Ray-trace one observation.

    ``camera`` lives in the world frame, in which the head is centred at the
    origin and rotated by ``head_pose``; ``gaze`` is expressed in the head
    frame.  The returned sample carries the head-frame camera and the head
    pose relative to that camera.
    """
    gaze = np.asarray(gaze, dtype=np.float64)
    if resolution is not None:
        if resolution < 16:
            raise InvalidArgument("resolution must be at least 16")
        camera = Camera(camera.pose, camera.intrinsics.scaled(resolution, resolution))
    elif min(camera.intrinsics.width, camera.intrinsics.height) < 16:
        raise InvalidArgument("resolution must be at least 16")
    cam = head_frame_camera(camera, head_pose)
    origin = cam.pose.center
    if np.linalg.norm(origin) <= subject.bounding_radius:
        raise GeometryError("camera is inside the head geometry")
    gaze_dir = pitchyaw_to_vector(gaze)

    _, dirs = cam.pixel_rays(subsamples=SUPERSAMPLES)
    label, _, points, normals = cast_rays(subject, origin, dirs)
    image = shade(subject, label, points, normals, gaze_dir).mean(axis=2)

    _, center_dirs = cam.pixel_rays()
    center_label, *_ = cast_rays(subject, origin, center_dirs)
    mask_e = (center_label == EYE_LEFT) | (center_label == EYE_RIGHT)
    mask_f = center_label == FACE
    return SceneSample(
        image=np.clip(image, 0.0, 1.0),
        mask_eyes=mask_e,
        mask_face_only=mask_f,
        mask_whole_face=mask_e | mask_f,
        gaze=gaze.copy(),
        head_pose=relative_head_pose(cam),
        camera=cam,
        subject_id=subject.subject_id,
    )


# --------------------------------------------------------------------------
# gaze oracle

def _eye_pixel_setup(subject: SyntheticSubject, camera: Camera):
    """Subsample hit points for pixels fully covered by an eyeball."""
    origin = camera.pose.center
    _, dirs = camera.pixel_rays(subsamples=SUPERSAMPLES)
    label, _, points, _ = cast_rays(subject, origin, dirs)
    out = []
    for eye in (EYE_LEFT, EYE_RIGHT):
        full = (label == eye).all(axis=2)
        rows, cols = np.nonzero(full)
        c = subject.eye_centers()[eye - EYE_LEFT]
        u = (points[rows, cols] - c) / subject.eye_radius
        out.append((rows, cols, u))
    return out


def iris_fraction(image: np.ndarray, subject: SyntheticSubject) -> np.ndarray:
    """Per-pixel iris coverage estimated from colour, assuming eye pixels."""
    s = np.asarray(subject.sclera_albedo)
    i = np.asarray(subject.iris_albedo)
    d = i - s
    return np.clip(((np.asarray(image)[..., :3] - s) @ d) / (d @ d), 0.0, 1.0)


def oracle_gaze_from_image(image, subject: SyntheticSubject, camera: Camera,
                           refine: bool = True) -> np.ndarray:
    """Recover the head-frame gaze of a rendered head from its pixels.

    Iris pixels are located by colour inside the known eyeball silhouettes,
    back-projected onto the eyeball spheres and averaged into an initial
    direction.  With ``refine`` the direction is then fitted so that the
    analytic iris coverage of every fully-visible eyeball pixel matches the
    observed one.  ``camera`` must be the head-frame camera of the image.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.dtype.kind in "ui" or image.max() > 1.0 + 1e-9:
        image = image / 255.0
    k = camera.intrinsics
    if image.shape[:2] != (k.height, k.width):
        camera = Camera(camera.pose, k.scaled(image.shape[1], image.shape[0]))
    frac = iris_fraction(image, subject)
    setup = _eye_pixel_setup(subject, camera)

    obs, dirs, weights = [], [], []
    for rows, cols, u in setup:
        f = frac[rows, cols]
        if f.sum() < MIN_IRIS_PIXELS * 0.5 or (f > 0.5).sum() < MIN_IRIS_PIXELS:
            raise NotEstimable("too few iris pixels visible")
        # dark pixels project onto the iris end of the colour axis, so an
        # eye region without any sclera is not an eye at all (a blank image)
        if (f < 0.5).sum() < MIN_IRIS_PIXELS:
            raise NotEstimable("no sclera visible around the iris")
        obs.append(f)
        dirs.append(u)
        weights.append(f)
    mean_dir = sum((w[:, None] * u.mean(axis=1)).sum(0) for w, u in zip(weights, dirs))
    g0 = vector_to_pitchyaw(mean_dir)
    if not refine:
        return g0

    cos_a = np.cos(IRIS_HALF_ANGLE)
    tau = 0.01

    def loss(g):
        v = pitchyaw_to_vector(g)
        total = 0.0
        for f, u in zip(obs, dirs):
            pred = 1.0 / (1.0 + np.exp(-np.clip((u @ v - cos_a) / tau, -60, 60)))
            total += ((pred.mean(axis=1) - f) ** 2).sum()
        return total

    res = minimize(loss, g0, method="Nelder-Mead",
                   options={"xatol": 1e-6, "fatol": 1e-10, "maxiter": 400})
    return np.asarray(res.x, dtype=np.float64)


# --------------------------------------------------------------------------
# dataset generation

@dataclass(frozen=True)
class GeneratorConfig:
    n_subjects: int = 8
    views_per_subject: int = 20
    resolution: int = 64
    gaze_range: float = 0.45
    head_range: float = 0.35
    focal: float = focal_for_source("synthetic")
    distance: float = NORMALIZED_DISTANCE_MM
    seed: int = 0
    subject_offset: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def sample_view(subject: SyntheticSubject, view: int, cfg: GeneratorConfig):
    """Draw gaze, head pose and a raw camera, then normalize the camera.

    Returns (gaze, world head pose, normalized world camera, raw camera).
    """
    rng = np.random.default_rng([cfg.seed, subject.subject_id, view, 0xCA3])
    gaze = np.array([rng.uniform(-0.75, 0.75) * cfg.gaze_range, rng.uniform(-1, 1) * cfg.gaze_range])
    head_world = np.array([rng.uniform(-0.5, 0.5) * cfg.head_range, rng.uniform(-0.5, 0.5) * cfg.head_range])
    cam_dir = np.array([rng.uniform(-0.5, 0.5) * cfg.head_range, rng.uniform(-0.5, 0.5) * cfg.head_range])
    dist = rng.uniform(450.0, 900.0)
    # camera sits in front of the face, on the -z side
    eye = dist * pitchyaw_to_vector(cam_dir)
    aim = rng.normal(0.0, 15.0, size=3)
    raw_pose = CameraPose.look_at(eye, aim)
    roll = rng.uniform(-0.3, 0.3)
    c, s = np.cos(roll), np.sin(roll)
    raw_pose = CameraPose(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]]) @ raw_pose.rotation,
                          np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]]) @ raw_pose.translation)
    raw_focal = cfg.focal * dist / cfg.distance
    raw_cam = Camera(raw_pose, CameraIntrinsics.centered(raw_focal, cfg.resolution))
    head_rot = gaze_rotation_matrix(head_world)
    _, _, norm_pose = normalization_transform(np.zeros(3), head_rot, raw_pose, cfg.distance)
    norm_cam = Camera(norm_pose, CameraIntrinsics.centered(cfg.focal, cfg.resolution))
    return gaze, head_world, norm_cam, raw_cam


def generate_sample(subject: SyntheticSubject, view: int, cfg: GeneratorConfig) -> SceneSample:
    gaze, head_world, norm_cam, raw_cam = sample_view(subject, view, cfg)
    sample = render_ground_truth(subject, gaze, head_world, norm_cam)
    sample.meta = {
        "subject_id": subject.subject_id,
        "view": view,
        "gaze": [float(v) for v in gaze],
        "head_pose": [float(v) for v in sample.head_pose],
        "head_pose_world": [float(v) for v in head_world],
        "camera": sample.camera.to_dict(),
        "raw_camera": raw_cam.to_dict(),
        "subject": subject.to_dict(),
        "generator_seed": cfg.seed,
    }
    return sample


def subjects_for(cfg: GeneratorConfig) -> list[SyntheticSubject]:
    return [SyntheticSubject.random(cfg.subject_offset + i, cfg.seed) for i in range(cfg.n_subjects)]


def _to_png(arr: np.ndarray) -> Image.Image:
    a = np.asarray(arr)
    if a.dtype == bool:
        return Image.fromarray((a * 255).astype(np.uint8), mode="L")
    return Image.fromarray(np.round(np.clip(a, 0, 1) * 255).astype(np.uint8), mode="RGB")


def _write_sample(root: Path, sample: SceneSample) -> dict:
    rel = Path(f"subject_{sample.subject_id}") / f"view_{sample.meta['view']}"
    d = root / rel
    d.mkdir(parents=True, exist_ok=True)
    _to_png(sample.image).save(d / "image.png", optimize=False)
    _to_png(sample.mask_eyes).save(d / "mask_eyes.png", optimize=False)
    _to_png(sample.mask_face_only).save(d / "mask_face.png", optimize=False)
    _to_png(sample.mask_whole_face).save(d / "mask_whole.png", optimize=False)
    (d / "meta.json").write_text(json.dumps(sample.meta, indent=2, sort_keys=True))
    return {"path": rel.as_posix(), "subject_id": sample.subject_id, "view": sample.meta["view"],
            "gaze": sample.meta["gaze"], "head_pose": sample.meta["head_pose"]}


def generate_dataset(n_subjects: int, views_per_subject: int, gaze_range: float, seed: int,
                     out_dir, resolution: int = 64, workers: int = 1, **kwargs) -> dict:
    """Render and write a dataset; returns the manifest dict.

    The manifest is written last so a tree with a manifest is complete.
    """
    if n_subjects < 1 or views_per_subject < 1:
        raise InvalidArgument("need at least one subject and one view")
    cfg = GeneratorConfig(n_subjects=n_subjects, views_per_subject=views_per_subject,
                          resolution=resolution, gaze_range=gaze_range, seed=seed, **kwargs)
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"cannot write dataset to {root}: {e}") from e

    jobs = [(s, v) for s in subjects_for(cfg) for v in range(views_per_subject)]

    def work(job):
        return _write_sample(root, generate_sample(job[0], job[1], cfg))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(work, jobs))
    else:
        rows = [work(j) for j in jobs]
    manifest = {"format": "gazefield-dataset/1", "config": cfg.to_dict(), "samples": rows}
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, root / "manifest.json")
    return manifest


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def load_sample(root, rel: str) -> SceneSample:
    d = Path(root) / rel
    meta = json.loads((d / "meta.json").read_text())
    return SceneSample(
        image=_read_png(d / "image.png").astype(np.float64) / 255.0,
        mask_eyes=_read_png(d / "mask_eyes.png") > 127,
        mask_face_only=_read_png(d / "mask_face.png") > 127,
        mask_whole_face=_read_png(d / "mask_whole.png") > 127,
        gaze=np.array(meta["gaze"]),
        head_pose=np.array(meta["head_pose"]),
        camera=Camera.from_dict(meta["camera"]),
        subject_id=int(meta["subject_id"]),
        meta=meta,
    )


def load_dataset(root) -> tuple[dict, list[SceneSample]]:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    return manifest, [load_sample(root, row["path"]) for row in manifest["samples"]]


def manifest_hash(root) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


def generate_in_memory(cfg: GeneratorConfig) -> list[SceneSample]:
    """Render a dataset without touching disk (images quantized like PNGs)."""
    out = []
    for s in subjects_for(cfg):
        for v in range(cfg.views_per_subject):
            sample = generate_sample(s, v, cfg)
            sample.image = np.round(sample.image * 255) / 255
            out.append(sample)
    return out

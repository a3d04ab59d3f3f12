"""Pinhole cameras and the face-centred data normalization.

Poses map world (head-frame) points to camera coordinates,
``x_cam = R @ x_world + t``; camera axes are x right, y down, z forward.
Pixel ``(row, col)`` has its centre at continuous image coordinates
``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, InvalidArgument
from .geometry import vector_to_pitchyaw

NORMALIZED_DISTANCE_MM = 680.0

SOURCE_FOCALS = {"xgaze": 1600.0, "mpii": 1400.0, "columbia": 1600.0, "gazecapture": 1200.0}
SYNTHETIC_FOCAL = 512.0


def focal_for_source(source_tag: str, synthetic_focal: float = SYNTHETIC_FOCAL) -> float:
    """Normalized-camera focal length (pixels) used for a data source."""
    if source_tag == "synthetic":
        return float(synthetic_focal)
    try:
        return SOURCE_FOCALS[source_tag]
    except KeyError:
        raise InvalidArgument(f"unknown source tag {source_tag!r}") from None


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_x: float
    focal_y: float
    center_x: float
    center_y: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise InvalidArgument("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidArgument("image size must be positive")
        if not (0 < self.center_x < self.width and 0 < self.center_y < self.height):
            raise InvalidArgument("principal point must lie inside the image")

    @classmethod
    def centered(cls, focal: float, width: int, height: int | None = None) -> "CameraIntrinsics":
        height = width if height is None else height
        return cls(focal, focal, width / 2.0, height / 2.0, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([
            [self.focal_x, 0.0, self.center_x],
            [0.0, self.focal_y, self.center_y],
            [0.0, 0.0, 1.0],
        ])

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Same field of view resampled to a different pixel grid."""
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(self.focal_x * sx, self.focal_y * sy,
                                self.center_x * sx, self.center_y * sy, width, height)

    def to_dict(self) -> dict:
        return {"focal_x": self.focal_x, "focal_y": self.focal_y, "center_x": self.center_x,
                "center_y": self.center_y, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["focal_x"]), float(d["focal_y"]), float(d["center_x"]),
                   float(d["center_y"]), int(d["width"]), int(d["height"]))


def _check_rotation(r: np.ndarray, tol: float = 1e-6) -> None:
    if r.shape != (3, 3) or not np.isfinite(r).all():
        raise InvalidArgument("rotation must be a finite 3x3 matrix")
    if np.abs(r.T @ r - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise InvalidArgument("rotation matrix is not orthonormal with det 1")


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "CameraPose":
        """Camera at ``eye`` looking at ``target``; ``up`` is the world up (-y)."""
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        forward = target - eye
        n = np.linalg.norm(forward)
        if n == 0:
            raise GeometryError("camera and target coincide")
        forward /= n
        right = np.cross(-up, forward)
        if np.linalg.norm(right) < 1e-12:
            raise GeometryError("up vector parallel to viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        r = np.stack([right, down, forward])
        return cls(r, -r @ eye)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
                   np.array(d["translation"], dtype=np.float64))


@dataclass(frozen=True)
class Camera:
    pose: CameraPose
    intrinsics: CameraIntrinsics

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) -> continuous pixel coordinates (..., 2) as (x, y)."""
        pc = self.pose.to_camera(points)
        if np.any(pc[..., 2] <= 0):
            raise GeometryError("point behind the camera")
        k = self.intrinsics
        return np.stack([k.focal_x * pc[..., 0] / pc[..., 2] + k.center_x,
                         k.focal_y * pc[..., 1] / pc[..., 2] + k.center_y], -1)

    def pixel_rays(self, height: int | None = None, width: int | None = None,
                   subsamples: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """World-space ray origins and unit directions through pixel centres.

        With ``subsamples = s`` each pixel is split into an s x s regular
        grid and directions get shape (H, W, s*s, 3).
        """
        k = self.intrinsics
        if height is not None or width is not None:
            k = k.scaled(width or k.width, height or k.height)
        offs = (np.arange(subsamples) + 0.5) / subsamples
        cols = np.arange(k.width)[None, :, None, None] + offs[None, None, None, :]
        rows = np.arange(k.height)[:, None, None, None] + offs[None, None, :, None]
        x = (cols - k.center_x) / k.focal_x
        y = (rows - k.center_y) / k.focal_y
        x, y = np.broadcast_arrays(x, y)
        d_cam = np.stack([x, y, np.ones_like(x)], -1).reshape(k.height, k.width, subsamples**2, 3)
        d_world = d_cam @ self.pose.rotation
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        if subsamples == 1:
            d_world = d_world[:, :, 0]
        return self.pose.center, d_world

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "intrinsics": self.intrinsics.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(CameraPose.from_dict(d["pose"]), CameraIntrinsics.from_dict(d["intrinsics"]))


@dataclass(frozen=True)
class NormalizationResult:
    normalized_pose: CameraPose
    warp: np.ndarray
    normalized_gaze: np.ndarray
    normalized_head_pose: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray


def normalization_transform(face_center, head_rotation, pose: CameraPose,
                            distance: float = NORMALIZED_DISTANCE_MM):
    """Rotation and scaling that bring the face centre onto the optical axis.

    ``face_center`` and ``head_rotation`` are given in world coordinates.
    Returns ``(rot, scale, normalized_pose)`` where ``rot`` maps original
    camera coordinates to normalized camera coordinates and
    ``normalized_pose`` is the virtual camera placed ``distance`` mm from the
    face centre.
    """
    head_rotation = np.asarray(head_rotation, dtype=np.float64)
    _check_rotation(head_rotation)
    center_cam = pose.to_camera(np.asarray(face_center, dtype=np.float64))
    d = np.linalg.norm(center_cam)
    if d < 1e-9:
        raise GeometryError("face centre coincides with the camera centre")
    forward = center_cam / d
    head_x = pose.rotation @ head_rotation[:, 0]
    down = np.cross(forward, head_x)
    if np.linalg.norm(down) < 1e-9:
        raise GeometryError("head x-axis parallel to the viewing direction")
    down /= np.linalg.norm(down)
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    rot = np.stack([right, down, forward])
    scale = np.diag([1.0, 1.0, distance / d])
    r_n = rot @ pose.rotation
    world_center = np.asarray(face_center, dtype=np.float64)
    t_n = np.array([0.0, 0.0, distance]) - r_n @ world_center
    return rot, scale, CameraPose(r_n, t_n)


def warp_image(image: np.ndarray, warp: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Inverse-map bilinear resampling of ``image`` under homography ``warp``.

    ``warp`` maps source pixel coordinates to destination pixel coordinates;
    destination pixels that fall outside the source are filled with black.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    inv = np.linalg.inv(warp)
    ys, xs = np.mgrid[0:out_height, 0:out_width]
    dst = np.stack([xs + 0.5, ys + 0.5, np.ones_like(xs, dtype=np.float64)], -1)
    src = dst @ inv.T
    sx = src[..., 0] / src[..., 2] - 0.5
    sy = src[..., 1] / src[..., 2] - 0.5
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros((out_height, out_width, img.shape[2]))
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (src[..., 2] > 0)
            vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += np.where(valid[..., None], (wx * wy)[..., None] * vals, 0.0)
    return out[..., 0] if squeeze else out


def normalize_sample(image, face_center, head_rotation, gaze_vector, intrinsics: CameraIntrinsics,
                     target: CameraIntrinsics, distance: float = NORMALIZED_DISTANCE_MM,
                     pose: CameraPose | None = None):
    """Warp an image into the normalized camera and re-express its labels.

    ``face_center``, ``head_rotation`` and ``gaze_vector`` are in the
    coordinates of ``pose`` (default: the camera frame itself). Returns the
    warped image and a :class:`NormalizationResult` whose gaze and head pose
    are pitch-yaw labels in the normalized camera frame. The head pose label
    is the direction of the head's forward axis (0, 0, -1).
    """
    pose = CameraPose() if pose is None else pose
    rot, scale, normalized_pose = normalization_transform(face_center, head_rotation, pose, distance)
    warp = target.matrix @ scale @ rot @ np.linalg.inv(intrinsics.matrix)
    gaze_cam = pose.rotation @ np.asarray(gaze_vector, dtype=np.float64)
    head_cam = pose.rotation @ np.asarray(head_rotation, dtype=np.float64)
    result = NormalizationResult(
        normalized_pose=normalized_pose,
        warp=warp,
        normalized_gaze=vector_to_pitchyaw(rot @ gaze_cam),
        normalized_head_pose=vector_to_pitchyaw(rot @ head_cam @ np.array([0.0, 0.0, -1.0])),
        rotation=rot,
        scale=scale,
    )
    out = warp_image(image, warp, target.height, target.width)
    return out, result


def normalized_distance(result: NormalizationResult, face_center) -> float:
    return float(np.linalg.norm(result.normalized_pose.to_camera(np.asarray(face_center, dtype=np.float64))))


__all__ = [
    "Camera", "CameraIntrinsics", "CameraPose", "NormalizationResult", "NORMALIZED_DISTANCE_MM",
    "focal_for_source", "normalization_transform", "normalize_sample", "normalized_distance",
    "warp_image",
]

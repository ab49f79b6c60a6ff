"""Pinhole camera geometry for a calibrated multi-view rig.

World frame is metric (meters) and gravity-aligned; pixel coordinates have
the origin at the top-left corner of each image. Extrinsics follow the
world-to-camera convention ``x_cam = R @ x_world + t``, so a camera's
projection matrix is ``P = K [R | t]``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

EPS_DEPTH = 1e-6


class GeometryError(ValueError):
    """Invalid camera/rig parameters or unusable geometric input."""


class BehindCameraError(GeometryError):
    """Projection was requested for a point at or behind the camera plane."""


class DegenerateInputError(GeometryError):
    """Point set does not determine the requested alignment."""


def _as_array(x, shape, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != shape:
        raise GeometryError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class CameraView:
    """One calibrated camera.

    Attributes
    ----------
    cam_id : int
        Unique id within the rig.
    intrinsics : (3, 3) array
        Upper-triangular K with positive focal lengths.
    rotation : (3, 3) array
        World-to-camera rotation (orthonormal, det +1).
    translation : (3,) array
        World-to-camera translation in meters.
    resolution : (width, height) in pixels.
    """

    cam_id: int
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    resolution: tuple[int, int]

    def __post_init__(self):
        K = _as_array(self.intrinsics, (3, 3), "intrinsics")
        R = _as_array(self.rotation, (3, 3), "rotation")
        t = _as_array(self.translation, (3,), "translation")
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise GeometryError(f"resolution must be positive, got {self.resolution}")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0 or abs(K[2, 2] - 1.0) > 1e-9:
            raise GeometryError("intrinsics must be upper-triangular with K[2,2] == 1")
        if not (0.0 <= K[0, 2] <= w and 0.0 <= K[1, 2] <= h):
            raise GeometryError("principal point must lie inside the image")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0.0:
            raise GeometryError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "resolution", (int(w), int(h)))
        object.__setattr__(self, "_projection", K @ np.hstack([R, t[:, None]]))

    @property
    def projection(self) -> np.ndarray:
        """3x4 projection matrix K [R | t]."""
        return self._projection

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CameraRig:
    """A synchronized set of calibrated cameras."""

    cameras: tuple[CameraView, ...]
    frame_rate: float = 20.0
    world_up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        cams = tuple(self.cameras)
        if len(cams) < 2:
            raise GeometryError("a rig needs at least 2 cameras")
        ids = [c.cam_id for c in cams]
        if len(set(ids)) != len(ids):
            raise GeometryError("camera ids must be unique")
        if self.frame_rate <= 0:
            raise GeometryError("frame_rate must be positive")
        up = _as_array(self.world_up, (3,), "world_up")
        n = np.linalg.norm(up)
        if abs(n - 1.0) > 1e-6:
            raise GeometryError("world_up must be a unit vector")
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "world_up", up)

    def __len__(self) -> int:
        return len(self.cameras)

    def projections(self) -> np.ndarray:
        """Stacked (C, 3, 4) projection matrices in camera order."""
        return np.stack([c.projection for c in self.cameras])


@dataclass(frozen=True)
class SimilarityTransform:
    """y = scale * R @ x + t."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation


def project(camera: CameraView, point) -> np.ndarray:
    """Project one world point to pixel coordinates.

    Raises :class:`BehindCameraError` when the camera-frame depth is below
    ``EPS_DEPTH`` (1e-6 m).
    """
    p = _as_array(point, (3,), "point")
    cam_pt = camera.rotation @ p + camera.translation
    if cam_pt[2] < EPS_DEPTH:
        raise BehindCameraError(
            f"point depth {cam_pt[2]:.3e} m is behind camera {camera.cam_id}"
        )
    hom = camera.intrinsics @ cam_pt
    return hom[:2] / cam_pt[2]


def project_points(camera: CameraView, points: np.ndarray):
    """Vectorized projection of (N, 3) points.

    Returns ``(pixels, depths)``; callers decide how to treat non-positive
    depths (no exception is raised here).
    """
    pts = np.asarray(points, dtype=np.float64)
    cam_pts = pts @ camera.rotation.T + camera.translation
    z = cam_pts[..., 2]
    safe_z = np.where(np.abs(z) < EPS_DEPTH, np.inf, z)
    hom = cam_pts @ camera.intrinsics.T
    return hom[..., :2] / safe_z[..., None], z


def reprojection_error(camera: CameraView, point, pixel) -> float:
    """Euclidean pixel distance between the projection of ``point`` and ``pixel``."""
    px = _as_array(np.asarray(pixel, dtype=np.float64), (2,), "pixel")
    return float(np.linalg.norm(project(camera, point) - px))


def procrustes_align(source, target, with_scale: bool = True):
    """Least-squares similarity alignment of ``source`` onto ``target``.

    Classic closed-form solution via SVD of the cross-covariance, with the
    determinant sign correction so the rotation is proper even for
    reflective configurations.

    Returns ``(SimilarityTransform, rms_residual)``.

    Raises
    ------
    DegenerateInputError
        If fewer than 3 points are given or the source points do not span a
        plane (cross-covariance rank < 2), which leaves the rotation
        underdetermined.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != tgt.shape:
        raise DegenerateInputError(
            f"expected matching (N, 3) arrays, got {src.shape} and {tgt.shape}"
        )
    n = src.shape[0]
    if n < 3:
        raise DegenerateInputError("similarity alignment needs at least 3 points")
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    x = src - mu_s
    y = tgt - mu_t
    cov = y.T @ x / n
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= 1e-12 * max(s[0], 1.0):
        raise DegenerateInputError("source points are collinear or coincident")
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    dvec = np.array([1.0, 1.0, d])
    rot = (u * dvec) @ vt
    var_x = (x * x).sum() / n
    scale = float((s * dvec).sum() / var_x) if with_scale else 1.0
    transform = SimilarityTransform(scale, rot, mu_t - scale * rot @ mu_s)
    res = transform.apply(src) - tgt
    rms = float(np.sqrt((res * res).sum() / n))
    return transform, rms


def camera_to_dict(camera: CameraView) -> dict:
    return {
        "id": camera.cam_id,
        "intrinsics": camera.intrinsics.tolist(),
        "rotation": camera.rotation.tolist(),
        "translation": camera.translation.tolist(),
        "resolution": list(camera.resolution),
    }


def camera_from_dict(data: dict) -> CameraView:
    return CameraView(
        cam_id=int(data["id"]),
        intrinsics=np.asarray(data["intrinsics"], dtype=np.float64),
        rotation=np.asarray(data["rotation"], dtype=np.float64),
        translation=np.asarray(data["translation"], dtype=np.float64),
        resolution=tuple(data["resolution"]),
    )


def rig_to_dict(rig: CameraRig) -> dict:
    return {
        "frame_rate": rig.frame_rate,
        "world_up": rig.world_up.tolist(),
        "cameras": [camera_to_dict(c) for c in rig.cameras],
    }


def rig_from_dict(data: dict) -> CameraRig:
    return CameraRig(
        cameras=tuple(camera_from_dict(c) for c in data["cameras"]),
        frame_rate=float(data.get("frame_rate", 20.0)),
        world_up=np.asarray(data.get("world_up", [0.0, 0.0, 1.0]), dtype=np.float64),
    )


def atomic_write_text(path, text: str) -> None:
    """Write a file via temp+rename so readers never see partial output."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_rig(path, rig: CameraRig) -> None:
    atomic_write_text(path, json.dumps(rig_to_dict(rig), indent=2, sort_keys=True) + "\n")


def load_rig(path) -> CameraRig:
    with open(path, "r", encoding="utf-8") as fh:
        return rig_from_dict(json.load(fh))

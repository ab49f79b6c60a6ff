"""Articulated capsule body: template, kinematics, surface, signed distance.

The body is a tree of 17 keypoints (pelvis-rooted, mirror-symmetric) whose 16
edges each carry a capsule. Pose is one 6D rotation per non-root joint plus a
6D global orientation and a world translation; a 10-vector of shape
coefficients scales bone lengths and capsule radii through per-template linear
bases.

Surface vertices live on a fixed spherical-cylinder lattice per capsule and are
posed with twist-free bone frames: starting from the global orientation, each
bone's frame is the parent frame rotated by the minimal rotation taking the
bone's rest direction to its posed direction. This keeps the surface a function
of quantities the keypoint data can actually constrain (keypoints, root
orientation, shape) and makes it equivariant under rigid motions of the body.

All heavy math comes with hand-written reverse-mode derivatives
(`fk_backward`, `frames_backward`, `vertices_backward`) used by the fitting
stages; forward conventions are documented at each function.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import atomic_write_text

SHAPE_DIM = 10
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
_TINY = 1e-12

JOINT_NAMES = (
    "pelvis",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
    "spine",
    "neck",
    "head",
    "head_top",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
)

_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)

# Rest offsets (meters) of each joint in its parent's frame; T-pose, +z up,
# body facing +x, left side on +y.
_REST_OFFSETS = {
    1: (0.0, 0.09, -0.03),
    2: (0.0, 0.0, -0.42),
    3: (0.0, 0.0, -0.41),
    4: (0.0, -0.09, -0.03),
    5: (0.0, 0.0, -0.42),
    6: (0.0, 0.0, -0.41),
    7: (0.0, 0.0, 0.22),
    8: (0.0, 0.0, 0.24),
    9: (0.0, 0.0, 0.11),
    10: (0.0, 0.0, 0.13),
    11: (0.0, 0.19, 0.01),
    12: (0.0, 0.28, 0.0),
    13: (0.0, 0.26, 0.0),
    14: (0.0, -0.19, 0.01),
    15: (0.0, -0.28, 0.0),
    16: (0.0, -0.26, 0.0),
}

# Capsule radius (meters) for the bone ending at each joint.
_BONE_RADII = {
    1: 0.07,
    2: 0.058,
    3: 0.05,
    4: 0.07,
    5: 0.058,
    6: 0.05,
    7: 0.112,
    8: 0.105,
    9: 0.05,
    10: 0.085,
    11: 0.052,
    12: 0.044,
    13: 0.036,
    14: 0.052,
    15: 0.044,
    16: 0.036,
}

# Mirrored bone pairs, as (left child joint, right child joint).
_SYMMETRIC_BONES = ((1, 4), (2, 5), (3, 6), (11, 14), (12, 15), (13, 16))


class BodyError(ValueError):
    """Invalid template or body parameters."""


def _norm_rows(v, axis=-1):
    return np.sqrt(np.sum(v * v, axis=axis))


@dataclass
class BodyTemplate:
    """Capsule-body rest geometry and shape bases.

    ``parents[j]`` is the parent joint of keypoint ``j`` (-1 for the root at
    index 0, and parents must precede children). Bone ``b`` is the edge into
    child joint ``b + 1``. The shape bases give relative length/radius change
    per unit shape coefficient: ``L_b = L0_b * (1 + length_basis[b] @ shape)``
    and likewise for radii.
    """

    parents: np.ndarray
    rest_offsets: np.ndarray
    bone_radii: np.ndarray
    length_basis: np.ndarray
    radius_basis: np.ndarray
    surface_sample_count: int = 1024
    joint_names: tuple[str, ...] | None = None
    symmetric_bones: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.intp)
        j = self.parents.shape[0]
        if j < 2:
            raise BodyError("template needs at least 2 keypoints")
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0):
            raise BodyError("keypoint 0 must be the unique root")
        if np.any(self.parents[1:] >= np.arange(1, j)):
            raise BodyError("parents must precede children (topological order)")
        self.rest_offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        self.bone_radii = np.asarray(self.bone_radii, dtype=np.float64)
        self.length_basis = np.asarray(self.length_basis, dtype=np.float64)
        self.radius_basis = np.asarray(self.radius_basis, dtype=np.float64)
        if self.rest_offsets.shape != (j, 3):
            raise BodyError(f"rest_offsets must be ({j}, 3)")
        nb = j - 1
        for name, arr, shape in (
            ("bone_radii", self.bone_radii, (nb,)),
            ("length_basis", self.length_basis, (nb, SHAPE_DIM)),
            ("radius_basis", self.radius_basis, (nb, SHAPE_DIM)),
        ):
            if arr.shape != shape:
                raise BodyError(f"{name} must have shape {shape}")
        if np.any(self.bone_radii <= 0):
            raise BodyError("capsule radii must be positive")
        # Radii must stay positive over the supported shape box [-3, 3]^10.
        worst = 3.0 * np.abs(self.radius_basis).sum(axis=1)
        if np.any(worst >= 1.0):
            raise BodyError("radius basis allows non-positive radii within |shape| <= 3")
        if self.surface_sample_count < len(self.bone_radii):
            raise BodyError("surface_sample_count smaller than the bone count")
        self.symmetric_bones = tuple(
            (int(a), int(b)) for a, b in self.symmetric_bones
        )
        self._build_derived()

    # ----- derived constants -------------------------------------------------

    def _build_derived(self):
        j = self.keypoint_count
        self.rest_lengths = _norm_rows(self.rest_offsets[1:])
        dirs = np.zeros((j - 1, 3))
        for b in range(j - 1):
            if self.rest_lengths[b] > _TINY:
                dirs[b] = self.rest_offsets[b + 1] / self.rest_lengths[b]
            else:
                dirs[b] = (0.0, 0.0, 1.0)
        self.rest_dirs = dirs
        # Parent bone of each bone (-1 means the parent joint is the root).
        self.parent_bone = np.array(
            [self.parents[b + 1] - 1 for b in range(j - 1)], dtype=np.intp
        )
        # Rest world positions (identity pose, zero shape).
        rest = np.zeros((j, 3))
        for k in range(1, j):
            rest[k] = rest[self.parents[k]] + self.rest_offsets[k]
        self.rest_keypoints = rest
        self._build_lattice()
        self._build_self_pairs()

    def _build_lattice(self):
        """Deterministic per-capsule surface samples.

        Vertex budget is split across bones by largest-remainder on rest
        surface area (cylinder + two caps), then within a bone between the
        cylindrical part and the two hemispherical caps by arc length.
        Angles follow a golden-angle sequence per bone.
        """
        nb = self.bone_count
        v = self.surface_sample_count
        r = self.bone_radii
        length = self.rest_lengths
        area = 2.0 * np.pi * r * length + 4.0 * np.pi * r * r
        quota = v * area / area.sum()
        counts = np.floor(quota).astype(int)
        rem = quota - counts
        short = v - counts.sum()
        for b in np.argsort(-rem, kind="stable")[:short]:
            counts[b] += 1
        bone_ids = []
        zfracs = []
        sdirs = []
        for b in range(nb):
            n = counts[b]
            if n == 0:
                continue
            axis = self.rest_dirs[b]
            n1 = _perp_unit(axis)
            n2 = np.cross(axis, n1)
            if length[b] > _TINY:
                n_sph = int(round(n * 2.0 * r[b] / (length[b] + 2.0 * r[b])))
            else:
                n_sph = n
            n_cap_a = n_sph // 2
            n_cap_b = n_sph - n_cap_a
            n_cyl = n - n_sph
            k = 0
            for i in range(n_cyl):
                phi = k * GOLDEN_ANGLE
                zfracs.append((i + 0.5) / n_cyl)
                sdirs.append(np.cos(phi) * n1 + np.sin(phi) * n2)
                k += 1
            for i in range(n_cap_a):
                phi = k * GOLDEN_ANGLE
                zeta = (i + 0.5) / n_cap_a
                rad = np.sqrt(max(1.0 - zeta * zeta, 0.0))
                zfracs.append(0.0)
                sdirs.append(rad * (np.cos(phi) * n1 + np.sin(phi) * n2) - zeta * axis)
                k += 1
            for i in range(n_cap_b):
                phi = k * GOLDEN_ANGLE
                zeta = (i + 0.5) / n_cap_b
                rad = np.sqrt(max(1.0 - zeta * zeta, 0.0))
                zfracs.append(1.0)
                sdirs.append(rad * (np.cos(phi) * n1 + np.sin(phi) * n2) + zeta * axis)
                k += 1
            bone_ids.extend([b] * n)
        self.vertex_bone = np.asarray(bone_ids, dtype=np.intp)
        self.vertex_zfrac = np.asarray(zfracs, dtype=np.float64)
        self.vertex_sdir = np.asarray(sdirs, dtype=np.float64)
        self.vertex_counts = counts

    def _build_self_pairs(self):
        """Capsule pairs eligible for the self-penetration term.

        Excludes pairs sharing a joint (always touching at the articulation)
        and pairs that already overlap in the rest pose at zero shape, since
        those encode body volume rather than a pose fault.
        """
        pairs = []
        segs = self.rest_keypoints
        for b1 in range(self.bone_count):
            j1 = {b1 + 1, int(self.parents[b1 + 1])}
            s1 = (segs[self.parents[b1 + 1]], segs[b1 + 1])
            for b2 in range(b1 + 1, self.bone_count):
                j2 = {b2 + 1, int(self.parents[b2 + 1])}
                if j1 & j2:
                    continue
                s2 = (segs[self.parents[b2 + 1]], segs[b2 + 1])
                gap = _segment_distance(s1[0], s1[1], s2[0], s2[1])
                if gap > self.bone_radii[b1] + self.bone_radii[b2] + 0.005:
                    pairs.append((b1, b2))
        self.self_collision_pairs = tuple(pairs)

    # ----- convenience -------------------------------------------------------

    @property
    def keypoint_count(self) -> int:
        return self.parents.shape[0]

    @property
    def bone_count(self) -> int:
        return self.keypoint_count - 1

    def bones(self):
        """List of (parent_joint, child_joint, rest_radius)."""
        return [
            (int(self.parents[b + 1]), b + 1, float(self.bone_radii[b]))
            for b in range(self.bone_count)
        ]

    def shaped_lengths(self, shape) -> np.ndarray:
        return self.rest_lengths * (1.0 + self.length_basis @ np.asarray(shape, dtype=np.float64))

    def shaped_radii(self, shape) -> np.ndarray:
        return self.bone_radii * (1.0 + self.radius_basis @ np.asarray(shape, dtype=np.float64))


def _perp_unit(axis):
    """A deterministic unit vector orthogonal to ``axis``."""
    pick = np.argmin(np.abs(axis))
    e = np.zeros(3)
    e[pick] = 1.0
    v = np.cross(axis, e)
    n = np.linalg.norm(v)
    if n < _TINY:
        return np.array([1.0, 0.0, 0.0])
    return v / n


def _segment_distance(a0, a1, b0, b1):
    """Minimum distance between two 3D segments (Ericson's method)."""
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    aa = d1 @ d1
    ee = d2 @ d2
    f = d2 @ r
    if aa < _TINY and ee < _TINY:
        return float(np.linalg.norm(r))
    if aa < _TINY:
        t = np.clip(f / ee, 0.0, 1.0)
        return float(np.linalg.norm(a0 - (b0 + t * d2)))
    c = d1 @ r
    if ee < _TINY:
        s = np.clip(-c / aa, 0.0, 1.0)
        return float(np.linalg.norm(a0 + s * d1 - b0))
    bb = d1 @ d2
    denom = aa * ee - bb * bb
    s = np.clip((bb * f - c * ee) / denom, 0.0, 1.0) if denom > _TINY else 0.0
    t = (bb * s + f) / ee
    if t < 0.0:
        t = 0.0
        s = np.clip(-c / aa, 0.0, 1.0)
    elif t > 1.0:
        t = 1.0
        s = np.clip((bb - c) / aa, 0.0, 1.0)
    return float(np.linalg.norm(a0 + s * d1 - (b0 + t * d2)))


def default_template(surface_sample_count: int = 1024) -> BodyTemplate:
    """The standard 17-keypoint mirror-symmetric template."""
    j = len(_PARENTS)
    offsets = np.zeros((j, 3))
    radii = np.zeros(j - 1)
    for child, off in _REST_OFFSETS.items():
        offsets[child] = off
    for child, r in _BONE_RADII.items():
        radii[child - 1] = r
    length_basis = np.zeros((j - 1, SHAPE_DIM))
    radius_basis = np.zeros((j - 1, SHAPE_DIM))
    arm_bones = [b - 1 for b in (12, 13, 15, 16)]
    clav_bones = [b - 1 for b in (11, 14)]
    leg_bones = [b - 1 for b in (2, 3, 5, 6)]
    torso_bones = [b - 1 for b in (7, 8)]
    pelvic_bones = [b - 1 for b in (1, 4)]
    head_bones = [b - 1 for b in (9, 10)]
    length_basis[:, 0] = 0.06  # overall stature
    radius_basis[:, 1] = 0.06  # overall girth
    for b in arm_bones:
        length_basis[b, 2] = 0.08
        radius_basis[b, 6] = 0.08
    for b in leg_bones:
        length_basis[b, 3] = 0.08
        radius_basis[b, 7] = 0.08
    for b in torso_bones:
        length_basis[b, 4] = 0.08
        radius_basis[b, 8] = 0.08
    for b in pelvic_bones:
        radius_basis[b, 8] = 0.08
    for b in head_bones:
        length_basis[b, 5] = 0.08
    for b in clav_bones:
        length_basis[b, 9] = 0.08
    return BodyTemplate(
        parents=np.asarray(_PARENTS),
        rest_offsets=offsets,
        bone_radii=radii,
        length_basis=length_basis,
        radius_basis=radius_basis,
        surface_sample_count=surface_sample_count,
        joint_names=JOINT_NAMES,
        symmetric_bones=tuple((l - 1, r - 1) for l, r in _SYMMETRIC_BONES),
    )


# ----- parameters -------------------------------------------------------------


@dataclass
class BodyParams:
    """Single-frame pose/shape parameters."""

    pose: np.ndarray  # (J-1, 6)
    shape: np.ndarray  # (10,)
    global_orient: np.ndarray  # (6,)
    global_transl: np.ndarray  # (3,)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.shape = np.asarray(self.shape, dtype=np.float64)
        self.global_orient = np.asarray(self.global_orient, dtype=np.float64)
        self.global_transl = np.asarray(self.global_transl, dtype=np.float64)


IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def identity_params(template: BodyTemplate) -> BodyParams:
    pose = np.tile(IDENTITY_6D, (template.bone_count, 1))
    return BodyParams(
        pose=pose,
        shape=np.zeros(SHAPE_DIM),
        global_orient=IDENTITY_6D.copy(),
        global_transl=np.zeros(3),
    )


@dataclass
class SubjectMotion:
    """Per-subject parameter sequence: shared shape, per-frame pose."""

    shape: np.ndarray  # (10,)
    pose: np.ndarray  # (F, J-1, 6)
    global_orient: np.ndarray  # (F, 6)
    global_transl: np.ndarray  # (F, 3)

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=np.float64)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.global_orient = np.asarray(self.global_orient, dtype=np.float64)
        self.global_transl = np.asarray(self.global_transl, dtype=np.float64)

    @property
    def frame_count(self) -> int:
        return self.pose.shape[0]

    def frame(self, i: int) -> BodyParams:
        return BodyParams(
            pose=self.pose[i],
            shape=self.shape,
            global_orient=self.global_orient[i],
            global_transl=self.global_transl[i],
        )

    @classmethod
    def from_frames(cls, frames) -> "SubjectMotion":
        return cls(
            shape=frames[0].shape,
            pose=np.stack([f.pose for f in frames]),
            global_orient=np.stack([f.global_orient for f in frames]),
            global_transl=np.stack([f.global_transl for f in frames]),
        )


@dataclass
class BodySurface:
    """Posed surface sample cloud."""

    vertices: np.ndarray  # (V, 3)
    vertex_bone: np.ndarray  # (V,)


# ----- 6D rotations -----------------------------------------------------------


def rot6d_to_matrix(r6):
    """Decode 6D rotation(s) to matrices by Gram-Schmidt.

    The first three entries give column 1 (normalized), the last three are
    orthogonalized against it for column 2, and column 3 is their cross
    product. Output shape is ``r6.shape[:-1] + (3, 3)``.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    mat, _ = _rot6d_forward(r6)
    return mat


def matrix_to_rot6d(mat):
    """Inverse-free 6D encoding: first two columns, column-major."""
    mat = np.asarray(mat, dtype=np.float64)
    return np.concatenate([mat[..., :, 0], mat[..., :, 1]], axis=-1)


def _rot6d_forward(r6):
    a = r6[..., 0:3]
    b = r6[..., 3:6]
    na = _norm_rows(a)[..., None]
    if np.any(na < _TINY):
        raise BodyError("6D rotation has a degenerate first column")
    c1 = a / na
    dot = np.sum(c1 * b, axis=-1, keepdims=True)
    u = b - dot * c1
    nu = _norm_rows(u)[..., None]
    if np.any(nu < _TINY):
        raise BodyError("6D rotation has collinear columns")
    c2 = u / nu
    c3 = np.cross(c1, c2)
    mat = np.stack([c1, c2, c3], axis=-1)
    cache = (a, na, c1, b, dot, u, nu, c2, c3)
    return mat, cache


def _normalize_backward(x, nx, y, ybar):
    """Adjoint of y = x / ||x|| given the cached norm and output."""
    proj = np.sum(y * ybar, axis=-1, keepdims=True)
    return (ybar - proj * y) / nx


def _rot6d_backward(cache, mbar):
    a, na, c1, b, dot, u, nu, c2, c3 = cache
    c1bar = mbar[..., :, 0].copy()
    c2bar = mbar[..., :, 1].copy()
    c3bar = mbar[..., :, 2]
    # c3 = c1 x c2
    c1bar += np.cross(c2, c3bar)
    c2bar += np.cross(c3bar, c1)
    # c2 = u / |u|
    ubar = _normalize_backward(u, nu, c2, c2bar)
    # u = b - (c1 . b) c1
    ub_dot = np.sum(ubar * c1, axis=-1, keepdims=True)
    bbar = ubar - ub_dot * c1
    c1bar += -dot * ubar - ub_dot * b
    # c1 = a / |a|
    abar = _normalize_backward(a, na, c1, c1bar)
    return np.concatenate([abar, bbar], axis=-1)


# ----- forward kinematics -----------------------------------------------------


class FkCache:
    """Intermediate state of a batched FK pass (needed by the adjoints)."""

    __slots__ = (
        "template", "pose", "orient", "transl", "shape", "rot_local",
        "rot_world", "keypoints", "offsets", "lengths", "radii",
        "pose_cache", "orient_cache",
    )


def fk_forward(template: BodyTemplate, pose, orient, transl, shape) -> FkCache:
    """Batched forward kinematics.

    Parameters are ``pose (F, J-1, 6)``, ``orient (F, 6)``, ``transl (F, 3)``
    and a shared ``shape (10,)``. Returns a cache whose ``keypoints`` field is
    (F, J, 3); the cache feeds :func:`fk_backward` and the surface pass.
    """
    pose = np.asarray(pose, dtype=np.float64)
    orient = np.asarray(orient, dtype=np.float64)
    transl = np.asarray(transl, dtype=np.float64)
    shape = np.asarray(shape, dtype=np.float64)
    f = pose.shape[0]
    j = template.keypoint_count
    cache = FkCache()
    cache.template = template
    cache.pose, cache.orient, cache.transl, cache.shape = pose, orient, transl, shape
    rl_pose, cache.pose_cache = _rot6d_forward(pose)
    rl_root, cache.orient_cache = _rot6d_forward(orient)
    lengths = template.shaped_lengths(shape)
    offsets = template.rest_dirs * lengths[:, None]
    cache.offsets, cache.lengths = offsets, lengths
    cache.radii = template.shaped_radii(shape)

    rot_world = np.empty((f, j, 3, 3))
    keypoints = np.empty((f, j, 3))
    rot_world[:, 0] = rl_root
    keypoints[:, 0] = transl
    rot_local = np.empty((f, j, 3, 3))
    rot_local[:, 0] = rl_root
    rot_local[:, 1:] = rl_pose
    for k in range(1, j):
        par = template.parents[k]
        keypoints[:, k] = keypoints[:, par] + np.einsum(
            "fde,e->fd", rot_world[:, par], offsets[k - 1]
        )
        rot_world[:, k] = np.einsum(
            "fde,fek->fdk", rot_world[:, par], rot_local[:, k]
        )
    cache.rot_local = rot_local
    cache.rot_world = rot_world
    cache.keypoints = keypoints
    return cache


def fk_backward(cache: FkCache, kp_bar, root_rot_bar=None):
    """Adjoint of :func:`fk_forward`.

    ``kp_bar`` is the gradient w.r.t. keypoints (F, J, 3); ``root_rot_bar``
    optionally adds a gradient w.r.t. the world root rotation (F, 3, 3).
    Returns a dict with gradients for pose, orient, transl and shape.
    """
    template = cache.template
    f, j = cache.keypoints.shape[:2]
    kp_bar = np.array(kp_bar, dtype=np.float64, copy=True)
    rw_bar = np.zeros((f, j, 3, 3))
    rl_bar = np.zeros((f, j, 3, 3))
    off_bar = np.zeros((j - 1, 3))
    for k in range(j - 1, 0, -1):
        par = template.parents[k]
        kp_bar[:, par] += kp_bar[:, k]
        rw_bar[:, par] += np.einsum("fd,e->fde", kp_bar[:, k], cache.offsets[k - 1])
        off_bar[k - 1] = np.einsum("fde,fd->e", cache.rot_world[:, par], kp_bar[:, k])
        rl_bar[:, k] = np.einsum("fed,fek->fdk", cache.rot_world[:, par], rw_bar[:, k])
        rw_bar[:, par] += np.einsum("fdk,fek->fde", rw_bar[:, k], cache.rot_local[:, k])
    if root_rot_bar is not None:
        rw_bar[:, 0] += root_rot_bar
    transl_bar = kp_bar[:, 0].copy()
    rl_bar[:, 0] = rw_bar[:, 0]
    pose_bar = _rot6d_backward(cache.pose_cache, rl_bar[:, 1:])
    orient_bar = _rot6d_backward(cache.orient_cache, rl_bar[:, 0])
    length_bar = np.einsum("bd,bd->b", off_bar, template.rest_dirs)
    shape_bar = (length_bar * template.rest_lengths) @ template.length_basis
    return {
        "pose": pose_bar,
        "orient": orient_bar,
        "transl": transl_bar,
        "shape": shape_bar,
    }


def forward_kinematics(template: BodyTemplate, params: BodyParams) -> np.ndarray:
    """World keypoints (J, 3) for one frame of parameters."""
    cache = fk_forward(
        template,
        params.pose[None],
        params.global_orient[None],
        params.global_transl[None],
        params.shape,
    )
    return cache.keypoints[0]


def motion_keypoints(template: BodyTemplate, motion: SubjectMotion) -> np.ndarray:
    """World keypoints (F, J, 3) for a whole motion sequence."""
    cache = fk_forward(
        template, motion.pose, motion.global_orient, motion.global_transl, motion.shape
    )
    return cache.keypoints


# ----- twist-free bone frames -------------------------------------------------


class FrameCache:
    __slots__ = ("frames", "parent_frames", "x", "w", "v", "c", "seg_len", "degenerate")


def _min_rotation(x, w):
    """Minimal rotation matrices taking unit vectors ``x`` to ``w`` (batched)."""
    v = np.cross(x, w)
    c = np.sum(x * w, axis=-1)
    # R = c I + [v]_x + v v^T / (1 + c)
    f = x.shape[0]
    rot = np.zeros((f, 3, 3))
    denom = 1.0 + c
    bad = denom < 1e-8
    denom = np.where(bad, 1.0, denom)
    vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
    rot[:, 0, 0] = c + vx * vx / denom
    rot[:, 0, 1] = -vz + vx * vy / denom
    rot[:, 0, 2] = vy + vx * vz / denom
    rot[:, 1, 0] = vz + vy * vx / denom
    rot[:, 1, 1] = c + vy * vy / denom
    rot[:, 1, 2] = -vx + vy * vz / denom
    rot[:, 2, 0] = -vy + vz * vx / denom
    rot[:, 2, 1] = vx + vz * vy / denom
    rot[:, 2, 2] = c + vz * vz / denom
    if np.any(bad):
        # Antipodal fallback: 180 degrees about a fixed perpendicular axis.
        idx = np.nonzero(bad)[0]
        for i in idx:
            axis = _perp_unit(x[i])
            rot[i] = 2.0 * np.outer(axis, axis) - np.eye(3)
    return rot, v, c, bad


def frames_forward(template: BodyTemplate, cache: FkCache) -> FrameCache:
    """Twist-free world frame per bone, by parallel transport from the root."""
    f = cache.keypoints.shape[0]
    nb = template.bone_count
    fc = FrameCache()
    fc.frames = np.empty((f, nb, 3, 3))
    fc.parent_frames = np.empty((f, nb, 3, 3))
    fc.x = np.empty((f, nb, 3))
    fc.w = np.empty((f, nb, 3))
    fc.v = np.empty((f, nb, 3))
    fc.c = np.empty((f, nb))
    fc.seg_len = np.empty((f, nb))
    fc.degenerate = np.zeros((f, nb), dtype=bool)
    for b in range(nb):
        pb = template.parent_bone[b]
        gp = cache.rot_world[:, 0] if pb < 0 else fc.frames[:, pb]
        fc.parent_frames[:, b] = gp
        x = np.einsum("fde,e->fd", gp, template.rest_dirs[b])
        child = b + 1
        par = template.parents[child]
        d = cache.keypoints[:, child] - cache.keypoints[:, par]
        ln = _norm_rows(d)
        zero_len = ln < _TINY
        w = np.where(zero_len[:, None], x, d / np.where(zero_len, 1.0, ln)[:, None])
        rot, v, c, bad = _min_rotation(x, w)
        fc.frames[:, b] = np.einsum("fde,fek->fdk", rot, gp)
        fc.x[:, b], fc.w[:, b], fc.v[:, b], fc.c[:, b] = x, w, v, c
        fc.seg_len[:, b] = ln
        fc.degenerate[:, b] = bad | zero_len
    return fc


def frames_backward(template: BodyTemplate, cache: FkCache, fc: FrameCache, frames_bar):
    """Adjoint of :func:`frames_forward`.

    Returns ``(kp_bar, root_rot_bar)``: gradients flowing into the keypoints
    and the world root rotation. Degenerate bones (zero length or antipodal
    flip) contribute no direction gradient.
    """
    f = cache.keypoints.shape[0]
    nb = template.bone_count
    j = template.keypoint_count
    kp_bar = np.zeros((f, j, 3))
    g_bar = np.array(frames_bar, dtype=np.float64, copy=True)
    root_bar = np.zeros((f, 3, 3))
    for b in range(nb - 1, -1, -1):
        pb = template.parent_bone[b]
        gp = fc.parent_frames[:, b]
        x, w, v, c = fc.x[:, b], fc.w[:, b], fc.v[:, b], fc.c[:, b]
        denom = 1.0 + c
        ok = (~fc.degenerate[:, b]) & (denom > 1e-8)
        gb = g_bar[:, b]
        # G = R Gp
        rot = np.einsum("fdk,fek->fde", fc.frames[:, b], gp)
        r_bar = np.einsum("fdk,fek->fde", gb, gp)
        gp_bar = np.einsum("fed,fek->fdk", rot, gb)
        # R = c I + [v]_x + v v^T / (1 + c)
        denom_s = np.where(ok, denom, 1.0)
        vrv = np.einsum("fd,fde,fe->f", v, r_bar, v)
        c_bar = np.einsum("fdd->f", r_bar) - vrv / (denom_s * denom_s)
        rv = np.einsum("fde,fe->fd", r_bar + np.swapaxes(r_bar, 1, 2), v)
        v_bar = rv / denom_s[:, None]
        v_bar[:, 0] += r_bar[:, 2, 1] - r_bar[:, 1, 2]
        v_bar[:, 1] += r_bar[:, 0, 2] - r_bar[:, 2, 0]
        v_bar[:, 2] += r_bar[:, 1, 0] - r_bar[:, 0, 1]
        # v = x cross w ; c = x . w
        x_bar = np.cross(w, v_bar) + c_bar[:, None] * w
        w_bar = np.cross(v_bar, x) + c_bar[:, None] * x
        x_bar[~ok] = 0.0
        w_bar[~ok] = 0.0
        # x = Gp rest_dir
        gp_bar += np.einsum("fd,e->fde", x_bar, template.rest_dirs[b])
        # w = d / |d|
        ln = np.where(fc.seg_len[:, b] > _TINY, fc.seg_len[:, b], 1.0)
        proj = np.sum(w * w_bar, axis=-1, keepdims=True)
        d_bar = (w_bar - proj * w) / ln[:, None]
        child = b + 1
        par = template.parents[child]
        kp_bar[:, child] += d_bar
        kp_bar[:, par] -= d_bar
        if pb < 0:
            root_bar += gp_bar
        else:
            g_bar[:, pb] += gp_bar
    return kp_bar, root_bar


# ----- surface ----------------------------------------------------------------


def vertices_forward(template: BodyTemplate, cache: FkCache, fc: FrameCache) -> np.ndarray:
    """Posed surface vertices (F, V, 3) on the capsule lattice."""
    f = cache.keypoints.shape[0]
    verts = np.empty((f, template.vertex_bone.shape[0], 3))
    start = 0
    for b in range(template.bone_count):
        n = template.vertex_counts[b]
        if n == 0:
            continue
        sl = slice(start, start + n)
        child = b + 1
        par = template.parents[child]
        z = template.vertex_zfrac[sl]
        s0 = template.vertex_sdir[sl]
        axis_pts = (
            cache.keypoints[:, par][:, None, :] * (1.0 - z)[None, :, None]
            + cache.keypoints[:, child][:, None, :] * z[None, :, None]
        )
        verts[:, sl] = axis_pts + cache.radii[b] * np.einsum(
            "fde,ne->fnd", fc.frames[:, b], s0
        )
        start += n
    return verts


def vertices_backward(template: BodyTemplate, cache: FkCache, fc: FrameCache, verts_bar):
    """Adjoint of :func:`vertices_forward`.

    Returns ``(kp_bar, frames_bar, shape_bar)``.
    """
    f = cache.keypoints.shape[0]
    j = template.keypoint_count
    kp_bar = np.zeros((f, j, 3))
    frames_bar = np.zeros((f, template.bone_count, 3, 3))
    radii_bar = np.zeros(template.bone_count)
    start = 0
    for b in range(template.bone_count):
        n = template.vertex_counts[b]
        if n == 0:
            continue
        sl = slice(start, start + n)
        child = b + 1
        par = template.parents[child]
        z = template.vertex_zfrac[sl]
        s0 = template.vertex_sdir[sl]
        vb = verts_bar[:, sl]
        kp_bar[:, par] += np.einsum("fnd,n->fd", vb, 1.0 - z)
        kp_bar[:, child] += np.einsum("fnd,n->fd", vb, z)
        rotated = np.einsum("fde,ne->fnd", fc.frames[:, b], s0)
        radii_bar[b] = np.einsum("fnd,fnd->", vb, rotated)
        frames_bar[:, b] += cache.radii[b] * np.einsum("fnd,ne->fde", vb, s0)
        start += n
    shape_bar = (radii_bar * template.bone_radii) @ template.radius_basis
    return kp_bar, frames_bar, shape_bar


def surface_vertices(template: BodyTemplate, params: BodyParams) -> BodySurface:
    """Posed surface cloud for one frame of parameters."""
    cache = fk_forward(
        template,
        params.pose[None],
        params.global_orient[None],
        params.global_transl[None],
        params.shape,
    )
    fc = frames_forward(template, cache)
    verts = vertices_forward(template, cache, fc)
    return BodySurface(vertices=verts[0], vertex_bone=template.vertex_bone.copy())


def vertex_areas(template: BodyTemplate, shape) -> np.ndarray:
    """Surface area share (m^2) carried by each lattice vertex."""
    radii = template.shaped_radii(shape)
    lengths = template.shaped_lengths(shape)
    areas = 2.0 * np.pi * radii * lengths + 4.0 * np.pi * radii * radii
    out = np.zeros(template.vertex_bone.shape[0])
    start = 0
    for b in range(template.bone_count):
        n = template.vertex_counts[b]
        if n == 0:
            continue
        out[start : start + n] = areas[b] / n
        start += n
    return out


# ----- signed distance --------------------------------------------------------


def bone_segments(template: BodyTemplate, keypoints) -> np.ndarray:
    """Capsule segments (..., B, 2, 3) from keypoints (..., J, 3)."""
    kp = np.asarray(keypoints, dtype=np.float64)
    par = template.parents[1:]
    a = kp[..., par, :]
    b = kp[..., 1:, :]
    return np.stack([a, b], axis=-2)


def signed_distance(template: BodyTemplate, params: BodyParams, query):
    """Union signed distance (m) of query point(s) to the posed body."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    kp = forward_kinematics(template, params)
    segs = bone_segments(template, kp)
    radii = template.shaped_radii(params.shape)
    sdf, _ = kernels.capsule_sdf(segs, radii, q)
    if np.asarray(query).ndim == 1:
        return float(sdf[0])
    return sdf


def penetration_depth(template: BodyTemplate, params: BodyParams, query):
    """max(-sdf, 0): zero outside the body, depth inside."""
    sdf = signed_distance(template, params, query)
    return np.maximum(-sdf, 0.0) if isinstance(sdf, np.ndarray) else max(-sdf, 0.0)


# ----- serialization ----------------------------------------------------------


def template_to_dict(template: BodyTemplate) -> dict:
    return {
        "parents": template.parents.tolist(),
        "rest_offsets": template.rest_offsets.tolist(),
        "bone_radii": template.bone_radii.tolist(),
        "length_basis": template.length_basis.tolist(),
        "radius_basis": template.radius_basis.tolist(),
        "surface_sample_count": template.surface_sample_count,
        "joint_names": list(template.joint_names) if template.joint_names else None,
        "symmetric_bones": [list(p) for p in template.symmetric_bones],
    }


def template_from_dict(data: dict) -> BodyTemplate:
    return BodyTemplate(
        parents=np.asarray(data["parents"], dtype=np.intp),
        rest_offsets=np.asarray(data["rest_offsets"], dtype=np.float64),
        bone_radii=np.asarray(data["bone_radii"], dtype=np.float64),
        length_basis=np.asarray(data["length_basis"], dtype=np.float64),
        radius_basis=np.asarray(data["radius_basis"], dtype=np.float64),
        surface_sample_count=int(data.get("surface_sample_count", 1024)),
        joint_names=tuple(data["joint_names"]) if data.get("joint_names") else None,
        symmetric_bones=tuple(tuple(p) for p in data.get("symmetric_bones", [])),
    )


def save_template(path, template: BodyTemplate) -> None:
    atomic_write_text(
        path, json.dumps(template_to_dict(template), indent=2, sort_keys=True) + "\n"
    )


def load_template(path) -> BodyTemplate:
    with open(path, "r", encoding="utf-8") as fh:
        return template_from_dict(json.load(fh))


# ----- OBJ export -------------------------------------------------------------


def export_obj(path, template: BodyTemplate, params: BodyParams,
               ring_segments: int = 16, cap_rings: int = 4) -> None:
    """Write the posed capsule body as a watertight-per-capsule OBJ mesh."""
    cache = fk_forward(
        template,
        params.pose[None],
        params.global_orient[None],
        params.global_transl[None],
        params.shape,
    )
    fc = frames_forward(template, cache)
    kp = cache.keypoints[0]
    lines = ["# capsule body export"]
    face_lines = []
    offset = 1
    for b in range(template.bone_count):
        child = b + 1
        par = template.parents[child]
        frame = fc.frames[0, b]
        axis0 = template.rest_dirs[b]
        n1 = _perp_unit(axis0)
        n2 = np.cross(axis0, n1)
        r = cache.radii[b]
        a = kp[par]
        c = kp[child]
        ring_dirs = [
            np.cos(2 * np.pi * k / ring_segments) * n1
            + np.sin(2 * np.pi * k / ring_segments) * n2
            for k in range(ring_segments)
        ]
        rows = []
        # bottom pole, cap A rings, two cylinder rings, cap B rings, top pole
        lines.append(_obj_v(a + r * frame @ (-axis0)))
        pole_a = offset
        offset += 1
        for ring in range(1, cap_rings + 1):
            zeta = np.cos(0.5 * np.pi * ring / (cap_rings + 1))
            rows.append([])
            for dirv in ring_dirs:
                s = np.sqrt(1 - zeta**2) * dirv - zeta * axis0
                lines.append(_obj_v(a + r * frame @ s))
                rows[-1].append(offset)
                offset += 1
        for base in (a, c):
            rows.append([])
            for dirv in ring_dirs:
                lines.append(_obj_v(base + r * frame @ dirv))
                rows[-1].append(offset)
                offset += 1
        for ring in range(cap_rings, 0, -1):
            zeta = np.cos(0.5 * np.pi * ring / (cap_rings + 1))
            rows.append([])
            for dirv in ring_dirs:
                s = np.sqrt(1 - zeta**2) * dirv + zeta * axis0
                lines.append(_obj_v(c + r * frame @ s))
                rows[-1].append(offset)
                offset += 1
        lines.append(_obj_v(c + r * frame @ axis0))
        pole_b = offset
        offset += 1
        first = rows[0]
        for k in range(ring_segments):
            face_lines.append(f"f {pole_a} {first[(k + 1) % ring_segments]} {first[k]}")
        for r0, r1 in zip(rows[:-1], rows[1:]):
            for k in range(ring_segments):
                k1 = (k + 1) % ring_segments
                face_lines.append(f"f {r0[k]} {r0[k1]} {r1[k1]}")
                face_lines.append(f"f {r0[k]} {r1[k1]} {r1[k]}")
        last = rows[-1]
        for k in range(ring_segments):
            face_lines.append(f"f {pole_b} {last[k]} {last[(k + 1) % ring_segments]}")
    atomic_write_text(path, "\n".join(lines + face_lines) + "\n")


def _obj_v(p) -> str:
    return f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}"

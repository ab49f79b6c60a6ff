"""DLT triangulation, RANSAC over views, and temporal refinement.

The DLT stacks two rows per camera of ``A y_hom = 0`` (pixel-scaled third
projection row minus the first/second row) and takes the right singular
vector of the smallest singular value. RANSAC draws minimal 2-view samples;
when 10 or fewer views carry the keypoint, every pair is tried exhaustively
instead, which makes the estimate deterministic regardless of seeding.

``refine_sequence`` polishes a triangulated keypoint sequence by minimizing
data + second-difference smoothness + bone-length-variance + left/right
symmetry terms with the shared monotone optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .body import BodyTemplate
from .geometry import CameraView
from .optim import minimize

EXHAUSTIVE_VIEW_LIMIT = 10


class TriangulationError(RuntimeError):
    """Triangulation could not produce a valid 3D point."""


@dataclass(frozen=True)
class TriangulationConfig:
    reproj_threshold_px: float = 10.0
    max_iterations: int = 100
    min_views: int = 2


def _projection_stack(observations):
    mats = np.stack([cam.projection for cam, _ in observations])
    pix = np.stack([np.asarray(px, dtype=np.float64) for _, px in observations])
    return mats, pix


def _dlt_rows(mats, pix):
    """Per-view DLT row pairs, shape (C, 2, 4)."""
    rows = np.empty((mats.shape[0], 2, 4))
    rows[:, 0] = pix[:, 0, None] * mats[:, 2] - mats[:, 0]
    rows[:, 1] = pix[:, 1, None] * mats[:, 2] - mats[:, 1]
    return rows


def _solve_dlt(a):
    """Smallest-right-singular-vector solutions for stacked systems.

    ``a`` is (..., rows, 4); returns (..., 3) dehomogenized points with NaN
    where the homogeneous weight vanishes.
    """
    _, _, vt = np.linalg.svd(a)
    hom = vt[..., -1, :]
    w = hom[..., 3]
    bad = np.abs(w) < 1e-12
    w_safe = np.where(bad, 1.0, w)
    pts = hom[..., :3] / w_safe[..., None]
    if np.any(bad):
        pts = np.where(bad[..., None], np.nan, pts)
    return pts


def dlt_triangulate(observations) -> np.ndarray:
    """Triangulate one point from [(camera, pixel), ...] observations."""
    if len(observations) < 2:
        raise TriangulationError("triangulation needs at least 2 views")
    mats, pix = _projection_stack(observations)
    rows = _dlt_rows(mats, pix)
    point = _solve_dlt(rows.reshape(-1, 4))
    if not np.all(np.isfinite(point)):
        raise TriangulationError("degenerate observation geometry (point at infinity)")
    return point


def _reprojection_errors(mats, pix, points):
    """Pixel errors of points (K, 3) against all views (C,); inf behind camera.

    Returns an array of shape (K, C).
    """
    hom = np.concatenate([points, np.ones((points.shape[0], 1))], axis=1)
    proj = np.einsum("cij,kj->kci", mats, hom)
    z = proj[..., 2]
    behind = z < 1e-9
    z_safe = np.where(behind, 1.0, z)
    uv = proj[..., :2] / z_safe[..., None]
    err = np.sqrt(np.sum((uv - pix[None, :, :]) ** 2, axis=-1))
    return np.where(behind, np.inf, err)


def ransac_triangulate(observations, config: TriangulationConfig = TriangulationConfig(),
                       rng=None):
    """Robust triangulation; returns ``(point, inlier_indices)``.

    Hypotheses are minimal 2-view DLTs; the winner maximizes the inlier count
    (reprojection error strictly below the threshold), with ties broken by
    total inlier error and then by enumeration order. The final point is a
    DLT over the winning inlier set.

    Raises :class:`TriangulationError` when no hypothesis reaches
    ``config.min_views`` inliers.
    """
    c = len(observations)
    if c < 2:
        raise TriangulationError("triangulation needs at least 2 views")
    mats, pix = _projection_stack(observations)
    rows = _dlt_rows(mats, pix)
    if c <= EXHAUSTIVE_VIEW_LIMIT:
        pairs = np.array(list(combinations(range(c), 2)), dtype=np.intp)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        draws = min(config.max_iterations, c * (c - 1) // 2)
        seen = set()
        pair_list = []
        for _ in range(draws):
            i, j = rng.choice(c, size=2, replace=False)
            key = (min(i, j), max(i, j))
            if key not in seen:
                seen.add(key)
                pair_list.append(key)
        pairs = np.array(pair_list, dtype=np.intp)
    systems = rows[pairs].reshape(pairs.shape[0], 4, 4)
    hyps = _solve_dlt(systems)
    ok = np.all(np.isfinite(hyps), axis=1)
    if not np.any(ok):
        raise TriangulationError("all minimal samples were degenerate")
    hyps_ok = hyps[ok]
    err = _reprojection_errors(mats, pix, hyps_ok)
    inlier = err < config.reproj_threshold_px
    counts = inlier.sum(axis=1)
    total = np.where(inlier, err, 0.0).sum(axis=1)
    order = np.lexsort((np.arange(counts.shape[0]), total, -counts))
    best = order[0]
    if counts[best] < config.min_views:
        raise TriangulationError(
            f"best hypothesis has {counts[best]} inliers, "
            f"fewer than min_views={config.min_views}"
        )
    inlier_ids = np.nonzero(inlier[best])[0]
    point = _solve_dlt(rows[inlier_ids].reshape(-1, 4))
    if not np.all(np.isfinite(point)):
        raise TriangulationError("degenerate inlier geometry")
    return point, [int(i) for i in inlier_ids]


# ----- sequences --------------------------------------------------------------


@dataclass
class Pose3DSequence:
    """Triangulated keypoints over time for all subjects.

    ``positions`` is (F, N, J, 3); ``valid`` marks keypoints with a usable
    triangulation; ``view_counts`` stores how many inlier views supported
    each keypoint (0 where invalid).
    """

    positions: np.ndarray
    valid: np.ndarray
    view_counts: np.ndarray
    frame_times: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.view_counts = np.asarray(self.view_counts, dtype=np.intp)
        self.frame_times = np.asarray(self.frame_times, dtype=np.float64)

    @property
    def frame_count(self) -> int:
        return self.positions.shape[0]

    @property
    def subject_count(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class RefineWeights:
    data: float = 1.0
    temporal: float = 10.0
    bone: float = 100.0
    symmetry: float = 100.0


def _interp_gaps(seq, valid):
    """Linear in-fill of invalid frames per keypoint coordinate."""
    out = seq.copy()
    f = seq.shape[0]
    idx = np.arange(f)
    for j in range(seq.shape[1]):
        good = valid[:, j]
        if not np.any(good):
            continue
        if np.all(good):
            continue
        for d in range(3):
            out[~good, j, d] = np.interp(idx[~good], idx[good], seq[good, j, d])
    return out


def _sequence_objective(y, obs, mask, template, weights):
    """Value + gradient of the refinement objective for one subject.

    ``y`` and ``obs`` are (F, J, 3); ``mask`` is (F, J) validity weights.
    """
    f = y.shape[0]
    w = weights
    grad = np.zeros_like(y)
    # data
    diff = (y - obs) * mask[:, :, None]
    value = w.data * np.sum(diff * diff)
    grad += 2.0 * w.data * diff
    # temporal second differences
    if f >= 3:
        d2 = y[2:] - 2.0 * y[1:-1] + y[:-2]
        value += w.temporal * np.sum(d2 * d2)
        g = 2.0 * w.temporal * d2
        grad[2:] += g
        grad[1:-1] -= 2.0 * g
        grad[:-2] += g
    # bone-length variance and symmetry
    par = template.parents[1:]
    vec = y[:, 1:] - y[:, par]  # (F, B, 3)
    ln = np.sqrt(np.sum(vec * vec, axis=-1))  # (F, B)
    ln_safe = np.where(ln > 1e-12, ln, 1.0)
    unit = vec / ln_safe[..., None]
    mean = ln.mean(axis=0)
    dev = ln - mean[None, :]
    value += w.bone * np.sum(dev * dev) / f
    dlen = 2.0 * w.bone * dev / f  # d value / d ln
    if template.symmetric_bones:
        left = np.array([p[0] for p in template.symmetric_bones])
        right = np.array([p[1] for p in template.symmetric_bones])
        sdiff = ln[:, left] - ln[:, right]
        value += w.symmetry * np.sum(sdiff * sdiff) / f
        g = 2.0 * w.symmetry * sdiff / f
        np.add.at(dlen, (slice(None), left), g)
        np.add.at(dlen, (slice(None), right), -g)
    gvec = dlen[..., None] * unit
    grad[:, 1:] += gvec
    np.subtract.at(grad, (slice(None), par), gvec)
    return value, grad


def refine_sequence(seq: Pose3DSequence, template: BodyTemplate,
                    weights: RefineWeights = RefineWeights(),
                    iterations: int = 200, return_trace: bool = False):
    """Temporally refine a triangulated sequence (per subject).

    Invalid keypoints are in-filled by linear interpolation before descent
    and carry no data term, so they land where the smoothness and skeleton
    terms put them. Returns a new sequence (and the per-subject objective
    traces when ``return_trace`` is set).
    """
    f, n = seq.frame_count, seq.subject_count
    refined = seq.positions.copy()
    traces = []
    for s in range(n):
        obs = seq.positions[:, s]
        mask = seq.valid[:, s].astype(np.float64)
        init = _interp_gaps(obs, seq.valid[:, s])
        shape = init.shape

        def fun_grad(x):
            value, grad = _sequence_objective(
                x.reshape(shape), obs, mask, template, weights
            )
            return value, grad.ravel()

        x, trace = minimize(fun_grad, init.ravel(), iterations, step=0.002,
                            tol=1e-12)
        refined[:, s] = x.reshape(shape)
        traces.append(trace)
    out = Pose3DSequence(
        positions=refined,
        valid=seq.valid.copy(),
        view_counts=seq.view_counts.copy(),
        frame_times=seq.frame_times.copy(),
    )
    if return_trace:
        return out, traces
    return out

"""Synthetic 2D detections and forecast-gated association.

``synth_detect`` projects ground-truth keypoints into every camera and applies
the corruption model: deterministic geometric occlusion (a keypoint is hidden
when the camera ray to it passes through the *other* subject's capsules),
random dropout, Gaussian pixel noise, and identity swaps between keypoints of
the two candidates that land close together in the image. All randomness comes
from per-(seed, frame, view) SeedSequence streams, so regenerating any frame
or view in isolation reproduces the same detections.

``gate_associate`` assigns detected keypoint candidates to subjects using
forecast projections with a fixed gate radius (the default is calibrated for a
3840 px wide image and scales linearly with width).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import CameraRig, CameraView, EPS_DEPTH, project_points

GATE_RADIUS_REFERENCE_PX = 50.0
GATE_REFERENCE_WIDTH = 3840.0


class ObservationError(ValueError):
    """Malformed detection input."""


@dataclass(frozen=True)
class ObservationModel:
    """Detection corruption parameters.

    ``occlusion_rate`` is an extra random dropout on top of the geometric
    occlusion test; ``swap_rate`` is the per-(frame, view) probability that
    keypoints of the two candidates swap wherever they are within
    ``proximity_px`` of each other.
    """

    pixel_noise_sigma: float = 2.0
    occlusion_rate: float = 0.05
    swap_rate: float = 0.05
    proximity_px: float = 80.0
    seed: int = 0


@dataclass
class PersonDetections:
    """One candidate's 2D keypoints in one view."""

    candidate_id: int
    keypoints: np.ndarray  # (J, 2) pixels
    confidence: np.ndarray  # (J,)
    visible: np.ndarray  # (J,) bool
    source_subject: np.ndarray | None = None  # (J,) generator identity, synthetic only

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        j = self.keypoints.shape[0]
        if self.keypoints.shape != (j, 2) or self.confidence.shape != (j,) or self.visible.shape != (j,):
            raise ObservationError("inconsistent per-keypoint array shapes")
        if self.source_subject is not None:
            self.source_subject = np.asarray(self.source_subject, dtype=np.intp)


@dataclass
class Detections2D:
    """All candidates detected in one view of one frame."""

    view_id: int
    persons: list[PersonDetections] = field(default_factory=list)


def gate_radius_px(width: int, base: float = GATE_RADIUS_REFERENCE_PX) -> float:
    """Gate radius scaled from the 3840 px reference width."""
    return base * width / GATE_REFERENCE_WIDTH


def _ray_blocked(camera_center, points, segments, radii):
    """True where the segment camera->point passes through a capsule set.

    ``points`` (J, 3); ``segments`` (B, 2, 3) / ``radii`` (B,) describe the
    occluder. A point is blocked when the minimum distance between its view
    ray segment and any occluder capsule axis is below that capsule's radius.
    """
    o = np.asarray(camera_center, dtype=np.float64)
    d1 = points - o  # (J, 3) full ray segments
    a = segments[:, 0]  # (B, 3)
    d2 = segments[:, 1] - a  # (B, 3)
    r = o - a  # (B, 3)
    aa = np.einsum("jd,jd->j", d1, d1)  # (J,)
    ee = np.einsum("bd,bd->b", d2, d2)  # (B,)
    bb = np.einsum("bd,jd->bj", d2, d1)  # (B, J)
    c = np.einsum("jd,bd->bj", d1, r)  # (B, J)
    f = np.einsum("bd,bd->b", d2, r)[:, None]  # (B, 1)
    denom = aa[None, :] * ee[:, None] - bb * bb
    denom_safe = np.where(denom > 1e-12, denom, 1.0)
    s = np.where(denom > 1e-12, (bb * f - c * ee[:, None]) / denom_safe, 0.0)
    s = np.clip(s, 0.0, 1.0)
    ee_safe = np.where(ee > 1e-12, ee, 1.0)[:, None]
    t = np.where(ee[:, None] > 1e-12, (bb * s + f) / ee_safe, 0.0)
    aa_safe = np.where(aa > 1e-12, aa, 1.0)[None, :]
    s_low = np.clip(-c / aa_safe, 0.0, 1.0)
    s_high = np.clip((bb - c) / aa_safe, 0.0, 1.0)
    s = np.where(t < 0.0, s_low, np.where(t > 1.0, s_high, s))
    t = np.clip(t, 0.0, 1.0)
    p1 = o[None, None, :] + s[:, :, None] * d1[None, :, :]
    p2 = a[:, None, :] + t[:, :, None] * d2[:, None, :]
    diff = p1 - p2
    dist = np.sqrt(np.einsum("bjd,bjd->bj", diff, diff))
    return np.any(dist < radii[:, None], axis=0)


def synth_detect(
    gt_keypoints,
    rig: CameraRig,
    model: ObservationModel,
    frame_index: int,
    bodies=None,
) -> list[Detections2D]:
    """Generate corrupted 2D detections for one frame.

    Parameters
    ----------
    gt_keypoints : (N, J, 3)
        World keypoints per subject.
    bodies : optional list of (segments, radii) per subject
        Posed capsule geometry; enables the deterministic geometric
        occlusion test (subject A hides subject B's keypoints and vice
        versa). Pass None to disable.

    Candidates are emitted in subject order (one candidate per subject, even
    if fully invisible); identity corruption happens through keypoint swaps,
    and ``source_subject`` records the generating subject per keypoint.
    """
    gt = np.asarray(gt_keypoints, dtype=np.float64)
    n, j = gt.shape[0], gt.shape[1]
    out = []
    for view_index, cam in enumerate(rig.cameras):
        rng = np.random.default_rng(
            np.random.SeedSequence([model.seed, frame_index, cam.cam_id])
        )
        occl_draw = rng.random((n, j))
        noise = rng.normal(0.0, 1.0, (n, j, 2))
        swap_draw = rng.random()
        swap_pair = rng.random((j,))

        width, height = cam.resolution
        pix = np.empty((n, j, 2))
        vis = np.empty((n, j), dtype=bool)
        for s in range(n):
            p2, depth = project_points(cam, gt[s])
            ok = depth > EPS_DEPTH
            ok &= (p2[:, 0] >= 0) & (p2[:, 0] <= width) & (p2[:, 1] >= 0) & (p2[:, 1] <= height)
            if bodies is not None:
                for other in range(n):
                    if other == s:
                        continue
                    blocked = _ray_blocked(
                        cam.center, gt[s], bodies[other][0], bodies[other][1]
                    )
                    ok &= ~blocked
            pix[s] = p2
            vis[s] = ok
        vis &= occl_draw >= model.occlusion_rate
        if model.pixel_noise_sigma > 0:
            pix = pix + model.pixel_noise_sigma * noise
            in_bounds = (
                (pix[..., 0] >= 0)
                & (pix[..., 0] <= width)
                & (pix[..., 1] >= 0)
                & (pix[..., 1] <= height)
            )
            vis &= in_bounds
        source = np.tile(np.arange(n, dtype=np.intp)[:, None], (1, j))
        if n == 2 and model.swap_rate > 0 and swap_draw < model.swap_rate:
            close = (
                vis[0]
                & vis[1]
                & (np.linalg.norm(pix[0] - pix[1], axis=1) < model.proximity_px)
            )
            do_swap = close & (swap_pair < 0.5)
            if np.any(do_swap):
                pix[:, do_swap] = pix[::-1, do_swap]
                source[:, do_swap] = source[::-1, do_swap]
        persons = []
        for s in range(n):
            conf = np.where(vis[s], 1.0, 0.0)
            persons.append(
                PersonDetections(
                    candidate_id=s,
                    keypoints=pix[s],
                    confidence=conf,
                    visible=vis[s],
                    source_subject=source[s],
                )
            )
        out.append(Detections2D(view_id=cam.cam_id, persons=persons))
    return out


@dataclass
class GateResult:
    """Per-view, per-subject keypoint assignments."""

    points: np.ndarray  # (V, N, J, 2)
    valid: np.ndarray  # (V, N, J) bool
    candidate: np.ndarray  # (V, N, J) candidate index, -1 if unassigned
    source: np.ndarray  # (V, N, J) generating subject, -1 if unknown


def _assign_keypoint(dists, gate):
    """Assign subjects (rows) to candidates (cols) under a gate.

    ``dists`` has inf where a pairing is not allowed. Returns a row->col map
    with -1 for unassigned. For the two-subject case all pairings are
    enumerated; cost ties prefer the lower subject id getting its closer
    candidate, then the lower candidate index.
    """
    n_sub, n_cand = dists.shape
    choice = np.full(n_sub, -1, dtype=np.intp)
    if n_sub == 0 or n_cand == 0:
        return choice
    if n_sub <= 2:
        best = None

        # enumerate injective row->col maps, including leaving rows out
        def maps_for(rows):
            if not rows:
                yield {}
                return
            first, rest = rows[0], rows[1:]
            for sub in maps_for(rest):
                yield sub
                for cand in range(n_cand):
                    if cand not in sub.values() and np.isfinite(dists[first, cand]):
                        out = dict(sub)
                        out[first] = cand
                        yield out

        for mapping in maps_for(list(range(n_sub))):
            size = len(mapping)
            cost = sum(dists[r, c] for r, c in mapping.items())
            # prefer more assignments, then lower cost, then subject 0's
            # distance, then lower candidate index for subject 0
            sub0 = mapping.get(0, -1)
            key = (
                -size,
                cost,
                dists[0, sub0] if sub0 >= 0 else np.inf,
                sub0 if sub0 >= 0 else n_cand,
            )
            if best is None or key < best:
                best = key
                choice = np.full(n_sub, -1, dtype=np.intp)
                for r, c in mapping.items():
                    choice[r] = c
        return choice
    # General case: pad with gate cost and solve the assignment problem.
    finite = np.where(np.isfinite(dists), dists, 1e9)
    rows, cols = linear_sum_assignment(finite)
    for r, c in zip(rows, cols):
        if np.isfinite(dists[r, c]):
            choice[r] = c
    return choice


def gate_associate(
    forecasts_px,
    forecast_valid,
    detections: list[Detections2D],
    gate_radius: float,
) -> GateResult:
    """Associate detections to subjects with a forecast gate.

    Parameters
    ----------
    forecasts_px : (V, N, J, 2)
        Projected forecast keypoints per view and subject.
    forecast_valid : (V, N, J) bool
        Whether each forecast projection is usable (in front of the camera).
    detections : list of per-view :class:`Detections2D` (same order as views).
    gate_radius : float or (N, J) array
        Maximum pixel distance between forecast and detection; candidates
        strictly beyond it leave the subject's keypoint invalid. An array
        gives each subject's keypoint its own radius (e.g. widened after
        misses).

    Keypoints are assigned independently: for each (view, keypoint), the
    visible candidate keypoints compete for the subjects' forecasts by
    total-distance minimal pairing.
    """
    forecasts_px = np.asarray(forecasts_px, dtype=np.float64)
    forecast_valid = np.asarray(forecast_valid, dtype=bool)
    v, n, j, _ = forecasts_px.shape
    if len(detections) != v:
        raise ObservationError("detections list does not match the number of views")
    radius = np.asarray(gate_radius, dtype=np.float64)
    if radius.ndim not in (0, 2) or (radius.ndim == 2 and radius.shape != (n, j)):
        raise ObservationError("gate_radius must be scalar or (N, J)")
    points = np.zeros((v, n, j, 2))
    valid = np.zeros((v, n, j), dtype=bool)
    candidate = np.full((v, n, j), -1, dtype=np.intp)
    source = np.full((v, n, j), -1, dtype=np.intp)
    for vi in range(v):
        persons = detections[vi].persons
        if not persons:
            continue
        det_pts = np.stack([p.keypoints for p in persons])  # (P, J, 2)
        det_vis = np.stack([p.visible for p in persons])  # (P, J)
        det_src = np.stack(
            [
                p.source_subject
                if p.source_subject is not None
                else np.full(j, -1, dtype=np.intp)
                for p in persons
            ]
        )
        for kp in range(j):
            cand_ids = np.nonzero(det_vis[:, kp])[0]
            sub_ids = np.nonzero(forecast_valid[vi, :, kp])[0]
            if cand_ids.size == 0 or sub_ids.size == 0:
                continue
            diff = forecasts_px[vi, sub_ids, kp][:, None, :] - det_pts[cand_ids, kp][None, :, :]
            dists = np.sqrt(np.einsum("scd,scd->sc", diff, diff))
            limit = radius[sub_ids, kp][:, None] if radius.ndim == 2 else radius
            dists = np.where(dists <= limit, dists, np.inf)
            choice = _assign_keypoint(dists, limit)
            for row, cand in enumerate(choice):
                if cand < 0:
                    continue
                s = sub_ids[row]
                c = cand_ids[cand]
                points[vi, s, kp] = det_pts[c, kp]
                valid[vi, s, kp] = True
                candidate[vi, s, kp] = c
                source[vi, s, kp] = det_src[c, kp]
    return GateResult(points=points, valid=valid, candidate=candidate, source=source)

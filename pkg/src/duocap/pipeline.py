"""End-to-end capture runs: synthesize, track, fit, evaluate, ablate.

The tracking loop mirrors a live system. Before the subjects touch, each
frame is resolved by clustering detections around the previous frame's
projected keypoints, bootstrapped at the first frame by left/right image
ordering in a reference view. Once the tracked bodies come within reach of
each other, per-keypoint constant-velocity filters take over and every frame
runs predict, project, gate, triangulate, update. Mesh fitting and the two
ablation studies (camera count, collision term) sit on top of that loop.

Scenes, configurations, and all derived results serialize to JSON so that a
run is reproducible from its artifacts alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .body import (
    BodyTemplate,
    SubjectMotion,
    bone_segments,
    default_template,
    fk_forward,
    frames_forward,
    motion_keypoints,
    template_from_dict,
    template_to_dict,
    vertices_forward,
)
from .forecast import FilterTuning, init_from_history
from .geometry import (
    CameraRig,
    EPS_DEPTH,
    atomic_write_text,
    project_points,
    rig_from_dict,
    rig_to_dict,
)
from .meshfit import FitResult, MeshFitWeights, ShapePrior, StagePlan, fit_sequence
from .metrics import (
    MetricsReport,
    collision_scores,
    detection_scores,
    sequence_joint_metrics,
    vertex_errors,
)
from .observe import (
    Detections2D,
    ObservationModel,
    PersonDetections,
    gate_associate,
    gate_radius_px,
    synth_detect,
)
from .simulate import SCENARIO_KINDS, make_rig, make_scenario
from .triangulate import (
    Pose3DSequence,
    RefineWeights,
    TriangulationConfig,
    TriangulationError,
    _interp_gaps,
    dlt_triangulate,
    ransac_triangulate,
    refine_sequence,
)


class PipelineError(RuntimeError):
    """Unrecoverable failure while running the tracking pipeline."""


class SceneError(ValueError):
    """Malformed scene or configuration payload."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of a run, from scenario synthesis to evaluation."""

    # Scenario.
    kind: str = "hug"
    seed: int = 0
    duration_s: float = 5.0
    fps: float = 20.0
    # Camera rig.
    camera_count: int = 20
    rig_radius_m: float = 4.0
    rig_height_m: float = 1.6
    image_width: int = 3840
    image_height: int = 2160
    hfov_deg: float = 90.0
    # Detection corruption.
    pixel_noise_sigma: float = 2.0
    occlusion_rate: float = 0.05
    swap_rate: float = 0.05
    swap_proximity_px: float = 80.0
    # Association and triangulation.
    gate_scale: float = 1.0
    cluster_scale: float = 4.0
    reproj_threshold_px: float = 10.0
    ransac_iterations: int = 100
    min_views: int = 2
    # Tracking loop.
    contact_switch_m: float = 0.45
    history_frames: int = 10
    reseed_interval: int = 20
    sigma_accel: float = 10.0
    sigma_meas_m: float = 0.02
    # Refinement and mesh fitting.
    refine_iterations: int = 200
    refine_weights: RefineWeights = RefineWeights(temporal=0.25)
    with_fit: bool = True
    with_collision: bool = True
    fit_weights: MeshFitWeights = MeshFitWeights()
    stage_plan: StagePlan = StagePlan()
    surface_samples: int = 1024
    # Evaluation.
    match_radius_m: float = 0.5
    voxel_m: float = 0.02

    def validate(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise SceneError(f"unknown scenario kind {self.kind!r}")
        if self.camera_count < 1:
            raise SceneError("camera_count must be at least 1")
        if self.duration_s <= 0 or self.fps <= 0:
            raise SceneError("duration_s and fps must be positive")
        if self.image_width < 2 or self.image_height < 2:
            raise SceneError("image resolution must be at least 2x2 pixels")
        for name in ("pixel_noise_sigma", "occlusion_rate", "swap_rate"):
            if getattr(self, name) < 0:
                raise SceneError(f"{name} must be non-negative")
        if self.occlusion_rate > 1 or self.swap_rate > 1:
            raise SceneError("corruption rates must lie in [0, 1]")
        if self.min_views < 2:
            raise SceneError("min_views must be at least 2")
        if self.history_frames < 2:
            raise SceneError("history_frames must be at least 2")
        if self.reseed_interval < 1:
            raise SceneError("reseed_interval must be at least 1")
        if self.surface_samples < 17:
            raise SceneError("surface_samples too small for the body model")

    @property
    def gate_radius(self) -> float:
        return self.gate_scale * gate_radius_px(self.image_width)

    def triangulation(self) -> TriangulationConfig:
        return TriangulationConfig(
            reproj_threshold_px=self.reproj_threshold_px,
            max_iterations=self.ransac_iterations,
            min_views=self.min_views,
        )

    def filter_tuning(self) -> FilterTuning:
        return FilterTuning(
            sigma_accel=self.sigma_accel, sigma_meas=self.sigma_meas_m
        )


_NESTED_CONFIG = {
    "refine_weights": RefineWeights,
    "fit_weights": MeshFitWeights,
    "stage_plan": StagePlan,
}


def config_to_dict(config: PipelineConfig) -> dict:
    out = {}
    for f in fields(PipelineConfig):
        value = getattr(config, f.name)
        if f.name in _NESTED_CONFIG:
            out[f.name] = {g.name: getattr(value, g.name) for g in fields(value)}
        else:
            out[f.name] = value
    return out


def _nested_from_dict(cls, data, name):
    if not isinstance(data, dict):
        raise SceneError(f"{name} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise SceneError(f"unknown {name} keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise SceneError("configuration must be a mapping")
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise SceneError(f"unknown configuration keys: {sorted(unknown)}")
    kwargs = dict(data)
    for name, cls in _NESTED_CONFIG.items():
        if name in kwargs:
            kwargs[name] = _nested_from_dict(cls, kwargs[name], name)
    config = PipelineConfig(**kwargs)
    config.validate()
    return config


def save_config(path, config: PipelineConfig) -> None:
    atomic_write_text(path, json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n")


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneError(f"configuration file is not valid JSON: {exc}") from exc
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# Scenes


@dataclass
class GroundTruth:
    """Generator-side state kept alongside a synthetic scene."""

    kind: str
    seed: int
    first_contact_frame: int | None
    template: BodyTemplate
    motions: list[SubjectMotion]
    keypoints: np.ndarray  # (F, N, J, 3)


@dataclass
class Scene:
    """A camera rig plus per-frame, per-view 2D detections."""

    rig: CameraRig
    frame_times: np.ndarray  # (F,)
    detections: list[list[Detections2D]]  # [frame][view], rig camera order
    ground_truth: GroundTruth | None = None

    @property
    def frame_count(self) -> int:
        return len(self.detections)

    @property
    def view_count(self) -> int:
        return len(self.rig.cameras)


def validate_scene(scene: Scene) -> None:
    times = np.asarray(scene.frame_times, dtype=np.float64)
    if times.ndim != 1 or times.shape[0] != len(scene.detections):
        raise SceneError("frame_times must have one entry per frame")
    if times.shape[0] == 0:
        raise SceneError("scene has no frames")
    if np.any(np.diff(times) <= 0):
        raise SceneError("frame timestamps must be strictly increasing")
    rig_ids = [cam.cam_id for cam in scene.rig.cameras]
    for t, views in enumerate(scene.detections):
        ids = [v.view_id for v in views]
        if ids != rig_ids:
            raise SceneError(
                f"frame {t} views {ids} do not match the rig cameras {rig_ids}"
            )
        for view in views:
            for person in view.persons:
                if person.keypoints.ndim != 2 or person.keypoints.shape[1] != 2:
                    raise SceneError(
                        f"frame {t} view {view.view_id}: keypoints must be (J, 2)"
                    )


def _motion_to_dict(motion: SubjectMotion) -> dict:
    return {
        "shape": motion.shape.tolist(),
        "pose": motion.pose.tolist(),
        "global_orient": motion.global_orient.tolist(),
        "global_transl": motion.global_transl.tolist(),
    }


def _motion_from_dict(data: dict) -> SubjectMotion:
    try:
        return SubjectMotion(
            shape=np.asarray(data["shape"], dtype=np.float64),
            pose=np.asarray(data["pose"], dtype=np.float64),
            global_orient=np.asarray(data["global_orient"], dtype=np.float64),
            global_transl=np.asarray(data["global_transl"], dtype=np.float64),
        )
    except KeyError as exc:
        raise SceneError(f"subject motion payload missing {exc}") from exc


def scene_to_dict(scene: Scene) -> dict:
    frames = []
    for t, views in enumerate(scene.detections):
        view_payload = []
        for view in views:
            persons = []
            for person in view.persons:
                kp = np.nan_to_num(person.keypoints, nan=0.0, posinf=0.0, neginf=0.0)
                rows = [
                    [
                        float(kp[j, 0]),
                        float(kp[j, 1]),
                        float(person.confidence[j]),
                        int(person.visible[j]),
                    ]
                    for j in range(kp.shape[0])
                ]
                entry = {"candidate_id": int(person.candidate_id), "keypoints": rows}
                if person.source_subject is not None:
                    entry["source_subject"] = [int(s) for s in person.source_subject]
                persons.append(entry)
            view_payload.append({"view_id": int(view.view_id), "persons": persons})
        frames.append({"t": float(scene.frame_times[t]), "views": view_payload})
    out = {"rig": rig_to_dict(scene.rig), "frames": frames}
    gt = scene.ground_truth
    if gt is not None:
        out["ground_truth"] = {
            "kind": gt.kind,
            "seed": int(gt.seed),
            "first_contact_frame": (
                None if gt.first_contact_frame is None else int(gt.first_contact_frame)
            ),
            "template": template_to_dict(gt.template),
            "subjects": [_motion_to_dict(m) for m in gt.motions],
            "keypoints": gt.keypoints.tolist(),
        }
    return out


def scene_from_dict(data: dict) -> Scene:
    if not isinstance(data, dict) or "rig" not in data or "frames" not in data:
        raise SceneError("scene payload needs 'rig' and 'frames'")
    rig = rig_from_dict(data["rig"])
    times = []
    detections = []
    for t, frame in enumerate(data["frames"]):
        if "t" not in frame or "views" not in frame:
            raise SceneError(f"frame {t} needs 't' and 'views'")
        times.append(float(frame["t"]))
        views = []
        for view in frame["views"]:
            persons = []
            for person in view.get("persons", []):
                rows = np.asarray(person["keypoints"], dtype=np.float64)
                if rows.ndim != 2 or rows.shape[1] != 4:
                    raise SceneError(
                        f"frame {t} view {view.get('view_id')}: keypoints must be "
                        "rows of [u, v, confidence, visible]"
                    )
                source = person.get("source_subject")
                persons.append(
                    PersonDetections(
                        candidate_id=int(person["candidate_id"]),
                        keypoints=rows[:, :2],
                        confidence=rows[:, 2],
                        visible=rows[:, 3] > 0.5,
                        source_subject=(
                            None
                            if source is None
                            else np.asarray(source, dtype=np.intp)
                        ),
                    )
                )
            views.append(Detections2D(view_id=int(view["view_id"]), persons=persons))
        detections.append(views)
    gt = None
    if "ground_truth" in data and data["ground_truth"] is not None:
        raw = data["ground_truth"]
        first = raw.get("first_contact_frame")
        gt = GroundTruth(
            kind=str(raw.get("kind", "")),
            seed=int(raw.get("seed", 0)),
            first_contact_frame=None if first is None else int(first),
            template=template_from_dict(raw["template"]),
            motions=[_motion_from_dict(m) for m in raw["subjects"]],
            keypoints=np.asarray(raw["keypoints"], dtype=np.float64),
        )
    scene = Scene(rig, np.asarray(times, dtype=np.float64), detections, gt)
    validate_scene(scene)
    return scene


def save_scene(path, scene: Scene) -> None:
    payload = json.dumps(scene_to_dict(scene), sort_keys=True, separators=(",", ":"))
    atomic_write_text(path, payload + "\n")


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneError(f"scene file is not valid JSON: {exc}") from exc
    return scene_from_dict(data)


def synthesize_scene(config: PipelineConfig) -> Scene:
    """Generate a scenario and corrupt its projections into a Scene."""
    config.validate()
    template = default_template(config.surface_samples)
    rig = make_rig(
        camera_count=config.camera_count,
        radius=config.rig_radius_m,
        height=config.rig_height_m,
        resolution=(config.image_width, config.image_height),
        frame_rate=config.fps,
        hfov_deg=config.hfov_deg,
    )
    scenario = make_scenario(
        config.kind, config.seed, config.duration_s, config.fps, template
    )
    model = ObservationModel(
        pixel_noise_sigma=config.pixel_noise_sigma,
        occlusion_rate=config.occlusion_rate,
        swap_rate=config.swap_rate,
        proximity_px=config.swap_proximity_px,
        seed=config.seed,
    )
    radii = [template.shaped_radii(m.shape) for m in scenario.motions]
    detections = []
    for t in range(scenario.frame_count):
        bodies = [
            (bone_segments(template, scenario.keypoints[t, s]), radii[s])
            for s in range(scenario.subject_count)
        ]
        detections.append(
            synth_detect(scenario.keypoints[t], rig, model, t, bodies=bodies)
        )
    gt = GroundTruth(
        kind=config.kind,
        seed=config.seed,
        first_contact_frame=scenario.first_contact_frame,
        template=template,
        motions=list(scenario.motions),
        keypoints=scenario.keypoints,
    )
    return Scene(rig, scenario.frame_times, detections, gt)


# ---------------------------------------------------------------------------
# Tracking


@dataclass
class TrackResult:
    """Raw triangulations, the refined sequence, and loop diagnostics."""

    raw: Pose3DSequence
    refined: Pose3DSequence
    contact_frame: int | None
    degraded_frames: list[int]
    identity_matches: int
    identity_total: int
    slot_sources: list[int]

    @property
    def identity_accuracy(self) -> float:
        if self.identity_total == 0:
            return float("nan")
        return self.identity_matches / self.identity_total


def _scene_subject_count(scene: Scene) -> int:
    best = 0
    for views in scene.detections:
        for view in views:
            best = max(best, len(view.persons))
    return best


def _usable_views(views: list[Detections2D]) -> list[int]:
    """Indices of views with at least one visible candidate keypoint."""
    out = []
    for i, view in enumerate(views):
        if any(np.any(p.visible) for p in view.persons):
            out.append(i)
    return out


def _project_forecasts(cams, points, point_valid):
    """Project (N, J, 3) forecasts into every view.

    Returns (V, N, J, 2) pixels and a (V, N, J) validity mask that combines
    ``point_valid`` with a positive-depth test.
    """
    v = len(cams)
    n, j = points.shape[0], points.shape[1]
    pix = np.zeros((v, n, j, 2))
    ok = np.zeros((v, n, j), dtype=bool)
    flat = points.reshape(-1, 3)
    finite = np.all(np.isfinite(flat), axis=1)
    safe = np.where(finite[:, None], flat, 0.0)
    for i, cam in enumerate(cams):
        p2, depth = project_points(cam, safe)
        pix[i] = p2.reshape(n, j, 2)
        ok[i] = ((depth > EPS_DEPTH) & finite).reshape(n, j) & point_valid
    return pix, ok


def _triangulate_gated(result, cams, n, j, tri_config):
    """RANSAC every (subject, keypoint) from one frame's gated detections.

    Returns positions (N, J, 3) with NaN where unresolved, validity, and
    inlier view counts.
    """
    pos = np.full((n, j, 3), np.nan)
    valid = np.zeros((n, j), dtype=bool)
    counts = np.zeros((n, j), dtype=np.intp)
    for s in range(n):
        for kp in range(j):
            views = np.nonzero(result.valid[:, s, kp])[0]
            if views.size < tri_config.min_views:
                continue
            obs = [(cams[v], result.points[v, s, kp]) for v in views]
            try:
                point, inliers = ransac_triangulate(obs, tri_config)
            except TriangulationError:
                continue
            pos[s, kp] = point
            valid[s, kp] = True
            counts[s, kp] = len(inliers)
    return pos, valid, counts


def _two_view_cost(cam_a, pix_a, cam_b, pix_b, vis, cap):
    """Mean capped reprojection error of two-view triangulations.

    Scores one candidate pairing hypothesis during bootstrap; ``vis`` masks
    the keypoints visible in both views.
    """
    idx = np.nonzero(vis)[0]
    if idx.size == 0:
        return np.inf
    total = 0.0
    for kp in idx:
        obs = [(cam_a, pix_a[kp]), (cam_b, pix_b[kp])]
        try:
            point = dlt_triangulate(obs)
        except TriangulationError:
            total += cap
            continue
        err = 0.0
        for cam, target in obs:
            p2, depth = project_points(cam, point[None, :])
            if depth[0] <= EPS_DEPTH or not np.all(np.isfinite(p2[0])):
                err = 2.0 * cap
                break
            err += float(np.linalg.norm(p2[0] - target))
        total += min(err, cap)
    return total / idx.size


def _bootstrap_assign(views, cams, usable, n):
    """Resolve detection candidates to subject slots in the first frame.

    The reference view is the usable view whose candidates are farthest
    apart horizontally; slots are ordered left to right there. Every other
    view is matched to the reference by two-view triangulation consistency.
    Returns per-view candidate index maps, -1 where a slot is unmatched.
    """
    ref = -1
    ref_sep = -1.0
    for i in usable:
        persons = views[i].persons
        with_vis = [p for p in persons if np.any(p.visible)]
        if len(with_vis) < n:
            continue
        xs = [float(p.keypoints[p.visible, 0].mean()) for p in with_vis]
        sep = max(xs) - min(xs)
        if sep > ref_sep:
            ref_sep = sep
            ref = i
    if ref < 0:
        # No view sees every subject; fall back to the first usable view.
        ref = usable[0]
    slot_map = np.full((len(views), n), -1, dtype=np.intp)
    ref_persons = views[ref].persons
    vis_ids = [c for c, p in enumerate(ref_persons) if np.any(p.visible)]
    order = sorted(
        vis_ids,
        key=lambda c: float(
            ref_persons[c].keypoints[ref_persons[c].visible, 0].mean()
        ),
    )
    for s, c in enumerate(order[:n]):
        slot_map[ref, s] = c
    cap = 200.0
    for i in usable:
        if i == ref:
            continue
        persons = views[i].persons
        cand_ids = [c for c, p in enumerate(persons) if np.any(p.visible)]
        if not cand_ids:
            continue
        cost = np.full((n, len(cand_ids)), np.inf)
        for s in range(n):
            rc = slot_map[ref, s]
            if rc < 0:
                continue
            ref_p = ref_persons[rc]
            for k, c in enumerate(cand_ids):
                p = persons[c]
                shared = ref_p.visible & p.visible
                cost[s, k] = _two_view_cost(
                    cams[ref], ref_p.keypoints, cams[i], p.keypoints, shared, cap
                )
        finite = np.where(np.isfinite(cost), cost, 1e9)
        rows, cols = linear_sum_assignment(finite)
        for s, k in zip(rows, cols):
            if np.isfinite(cost[s, k]):
                slot_map[i, s] = cand_ids[k]
    return slot_map


def _bootstrap_frame(views, cams, usable, n, j, tri_config, tally):
    """Triangulate the first usable frame from the bootstrap assignment."""
    slot_map = _bootstrap_assign(views, cams, usable, n)
    pos = np.full((n, j, 3), np.nan)
    valid = np.zeros((n, j), dtype=bool)
    counts = np.zeros((n, j), dtype=np.intp)
    for s in range(n):
        per_kp = [[] for _ in range(j)]
        for i in usable:
            c = slot_map[i, s]
            if c < 0:
                continue
            person = views[i].persons[c]
            for kp in range(j):
                if person.visible[kp]:
                    per_kp[kp].append((cams[i], person.keypoints[kp]))
                    if person.source_subject is not None:
                        src = int(person.source_subject[kp])
                        if src >= 0:
                            tally[s][src] = tally[s].get(src, 0) + 1
        for kp in range(j):
            if len(per_kp[kp]) < tri_config.min_views:
                continue
            try:
                point, inliers = ransac_triangulate(per_kp[kp], tri_config)
            except TriangulationError:
                continue
            pos[s, kp] = point
            valid[s, kp] = True
            counts[s, kp] = len(inliers)
    return pos, valid, counts


def _min_slot_distance(points, valid) -> float:
    """Smallest distance between any two subjects' valid keypoints."""
    n = points.shape[0]
    best = np.inf
    for a in range(n):
        for b in range(a + 1, n):
            if not (np.any(valid[a]) and np.any(valid[b])):
                continue
            diff = points[a][valid[a]][:, None, :] - points[b][valid[b]][None, :, :]
            d = np.sqrt(np.einsum("xyd,xyd->xy", diff, diff))
            best = min(best, float(d.min()))
    return best


def _count_sources(result, n, tally) -> None:
    for s in range(n):
        mask = result.valid[:, s, :] & (result.source[:, s, :] >= 0)
        sources, counts = np.unique(result.source[:, s, :][mask], return_counts=True)
        for src, cnt in zip(sources, counts):
            tally[s][int(src)] = tally[s].get(int(src), 0) + int(cnt)


def track_scene(scene: Scene, config: PipelineConfig,
                template: BodyTemplate | None = None) -> TrackResult:
    """Run the full association and triangulation loop over a scene."""
    config.validate()
    validate_scene(scene)
    cams = list(scene.rig.cameras)
    if not cams:
        raise PipelineError("scene has no cameras")
    n = _scene_subject_count(scene)
    if n == 0:
        raise PipelineError("scene has no detected candidates in any frame")
    j = None
    for views in scene.detections:
        for view in views:
            for person in view.persons:
                j = person.keypoints.shape[0]
                break
            if j is not None:
                break
        if j is not None:
            break
    f = scene.frame_count
    times = np.asarray(scene.frame_times, dtype=np.float64)
    dt = float(np.mean(np.diff(times))) if f > 1 else 1.0 / config.fps
    tri_config = config.triangulation()
    gate = config.gate_radius
    cluster_gate = config.cluster_scale * gate
    tuning = config.filter_tuning()

    positions = np.zeros((f, n, j, 3))
    valid = np.zeros((f, n, j), dtype=bool)
    counts = np.zeros((f, n, j), dtype=np.intp)
    degraded: list[int] = []
    tally: list[dict] = [{} for _ in range(n)]
    boot_tally: list[dict] = [{} for _ in range(n)]

    carry = np.zeros((n, j, 3))
    carry_valid = np.zeros((n, j), dtype=bool)
    bootstrapped = False
    contact_frame: int | None = None
    subjects = None
    miss_counts = np.zeros((n, j))

    for t in range(f):
        views = scene.detections[t]
        usable = _usable_views(views)
        if len(usable) < config.min_views:
            # Not enough cameras this frame: carry whatever state exists.
            degraded.append(t)
            if subjects is not None:
                forecast = np.stack([s.predict() for s in subjects])
                positions[t] = forecast
                carry = forecast
            else:
                positions[t] = carry
            continue
        if not bootstrapped:
            pos, ok, cnt = _bootstrap_frame(
                views, cams, usable, n, j, tri_config, boot_tally
            )
            bootstrapped = True
            for s in range(n):
                for src, c in boot_tally[s].items():
                    tally[s][src] = tally[s].get(src, 0) + c
            # Frames skipped before bootstrap inherit the first solution.
            backfill = np.where(ok[..., None], pos, 0.0)
            for back in range(t):
                positions[back] = backfill
        elif subjects is None:
            # Pre-contact: cluster around the previous frame's projections.
            pix, fok = _project_forecasts(cams, carry, carry_valid)
            result = gate_associate(pix, fok, views, cluster_gate)
            _count_sources(result, n, tally)
            pos, ok, cnt = _triangulate_gated(result, cams, n, j, tri_config)
        else:
            # Post-contact: predict, project, gate, triangulate, update.
            # Missed keypoints widen their own gate next frame so a coasting
            # forecast can re-acquire its detection after a bad stretch.
            forecast = np.stack([s.predict() for s in subjects])
            fvalid = np.ones((n, j), dtype=bool)
            pix, fok = _project_forecasts(cams, forecast, fvalid)
            radius = np.minimum(gate * (1.0 + miss_counts), cluster_gate)
            result = gate_associate(pix, fok, views, radius)
            _count_sources(result, n, tally)
            pos, ok, cnt = _triangulate_gated(result, cams, n, j, tri_config)
            miss_counts = np.where(ok, 0.0, miss_counts + 1.0)
            for s in range(n):
                subjects[s].update(
                    np.where(ok[s][:, None], pos[s], forecast[s]), ok[s]
                )
            pos = np.where(ok[..., None], pos, forecast)

        if subjects is None:
            pos = np.where(ok[..., None], pos, carry)
        positions[t] = pos
        valid[t] = ok
        counts[t] = cnt
        carry = pos.copy()
        carry_valid = carry_valid | ok
        if not np.any(ok):
            degraded.append(t)

        if subjects is None and n > 1 and contact_frame is None:
            if _min_slot_distance(pos, ok) < config.contact_switch_m:
                contact_frame = t + 1
                if t + 1 < 2:
                    raise PipelineError(
                        "contact before any tracking history was available"
                    )
                start = max(0, t + 1 - config.history_frames)
                subjects = []
                for s in range(n):
                    hist = _interp_gaps(positions[start:t + 1, s], valid[start:t + 1, s])
                    subjects.append(init_from_history(hist, dt, s, tuning))
        elif subjects is not None and contact_frame is not None:
            since = t + 1 - contact_frame
            if since > 0 and since % config.reseed_interval == 0 and t + 1 < f:
                start = max(0, t + 1 - config.history_frames)
                refreshed = []
                for s in range(n):
                    hist = _interp_gaps(positions[start:t + 1, s], valid[start:t + 1, s])
                    refreshed.append(init_from_history(hist, dt, s, tuning))
                subjects = refreshed

    raw = Pose3DSequence(positions, valid, counts, times)
    if template is None:
        template = default_template(config.surface_samples)
    refined = refine_sequence(
        raw, template, config.refine_weights, iterations=config.refine_iterations
    )

    # Identity accounting: the slot-to-generator map fixed at bootstrap.
    slot_sources = []
    for s in range(n):
        source_tally = boot_tally[s] or tally[s]
        if source_tally:
            slot_sources.append(max(sorted(source_tally), key=source_tally.get))
        else:
            slot_sources.append(s)
    matches = sum(tally[s].get(slot_sources[s], 0) for s in range(n))
    total = sum(sum(t.values()) for t in tally)
    return TrackResult(
        raw=raw,
        refined=refined,
        contact_frame=contact_frame,
        degraded_frames=degraded,
        identity_matches=int(matches),
        identity_total=int(total),
        slot_sources=[int(s) for s in slot_sources],
    )


# ---------------------------------------------------------------------------
# Full runs


@dataclass
class PipelineResult:
    config: PipelineConfig
    scene: Scene
    track: TrackResult
    fit: FitResult | None

    @property
    def poses(self) -> Pose3DSequence:
        return self.track.refined


def run_pipeline(scene: Scene | None, config: PipelineConfig) -> PipelineResult:
    """Track, refine, and (optionally) mesh-fit one scene.

    Pass ``scene=None`` to synthesize one from the configuration first.
    """
    config.validate()
    if scene is None:
        scene = synthesize_scene(config)
    template = default_template(config.surface_samples)
    track = track_scene(scene, config, template)
    fit = None
    if config.with_fit:
        weights = config.fit_weights
        if not config.with_collision:
            weights = replace(weights, collision=0.0)
        templates = [template] * track.refined.subject_count
        fit = fit_sequence(
            track.refined,
            templates,
            weights=weights,
            prior=ShapePrior.standard_normal(),
            plan=config.stage_plan,
        )
    return PipelineResult(config=config, scene=scene, track=track, fit=fit)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvaluationResult:
    pooled: MetricsReport
    subjects: list[MetricsReport]
    permutation: list[int]  # tracked slot -> ground-truth subject


def _match_subjects(pred, gt) -> list[int]:
    """Slot-to-subject map minimizing the mean pelvis distance."""
    n_pred, n_gt = pred.shape[1], gt.shape[1]
    cost = np.zeros((n_pred, n_gt))
    for s in range(n_pred):
        for g in range(n_gt):
            d = np.linalg.norm(pred[:, s, 0] - gt[:, g, 0], axis=1)
            cost[s, g] = float(np.nanmean(d))
    rows, cols = linear_sum_assignment(np.nan_to_num(cost, nan=1e9))
    out = [-1] * n_pred
    for r, c in zip(rows, cols):
        out[r] = int(c)
    return out


def _pool(values) -> float:
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0 or np.all(np.isnan(arr)):
        return float("nan")
    return float(np.nanmean(arr))


def evaluate_sequences(pred, gt, valid=None) -> EvaluationResult:
    """Joint metrics for (F, N, J, 3) predictions against ground truth.

    Slots are matched to ground-truth subjects by pelvis distance before
    scoring. Detection scores are computed from the per-frame root sets.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 4 or gt.ndim != 4 or pred.shape[0] != gt.shape[0]:
        raise SceneError("predictions and ground truth must both be (F, N, J, 3)")
    perm = _match_subjects(pred, gt)
    reports = []
    for s, g in enumerate(perm):
        if g < 0:
            # Tracked slot with no ground-truth partner: empty report.
            reports.append(MetricsReport())
            continue
        vmask = None if valid is None else valid[:, s]
        res = sequence_joint_metrics(pred[:, s], gt[:, g], vmask)
        reports.append(
            MetricsReport(
                mpjpe_mm=res["mpjpe_mm"],
                pa_mpjpe_mm=res["pa_mpjpe_mm"],
                n_mpjpe_mm=res["n_mpjpe_mm"],
                pck_percent=res["pck_percent"],
                auc_percent=res["auc_percent"],
                frame_traces={
                    "mpjpe_mm": res["mpjpe_mm_trace"],
                    "pa_mpjpe_mm": res["pa_mpjpe_mm_trace"],
                    "n_mpjpe_mm": res["n_mpjpe_mm_trace"],
                },
            )
        )
    pred_sets = [[pred[t, s] for s in range(pred.shape[1])] for t in range(pred.shape[0])]
    gt_sets = [[gt[t, g] for g in range(gt.shape[1])] for t in range(gt.shape[0])]
    det = detection_scores(pred_sets, gt_sets)
    pooled = MetricsReport(
        mpjpe_mm=_pool([r.mpjpe_mm for r in reports]),
        pa_mpjpe_mm=_pool([r.pa_mpjpe_mm for r in reports]),
        n_mpjpe_mm=_pool([r.n_mpjpe_mm for r in reports]),
        pck_percent=_pool([r.pck_percent for r in reports]),
        auc_percent=_pool([r.auc_percent for r in reports]),
        f1=det["f1"],
        precision=det["precision"],
        recall=det["recall"],
        frame_traces=(
            {
                "mpjpe_mm": np.nanmean(
                    np.asarray(
                        [r.frame_traces["mpjpe_mm"] for r in reports
                         if "mpjpe_mm" in r.frame_traces]
                    ),
                    axis=0,
                ).tolist()
            }
            if any("mpjpe_mm" in r.frame_traces for r in reports)
            else {}
        ),
    )
    return EvaluationResult(pooled=pooled, subjects=reports, permutation=perm)


def evaluate_result(result: PipelineResult) -> EvaluationResult:
    """Score a pipeline run against its scene's ground truth."""
    gt = result.scene.ground_truth
    if gt is None:
        raise SceneError("evaluation requires a scene with ground truth")
    config = result.config
    template = default_template(config.surface_samples)
    if result.fit is not None:
        pred = np.stack(
            [motion_keypoints(template, m) for m in result.fit.motions], axis=1
        )
        valid = None
    else:
        pred = result.track.refined.positions
        valid = None
    ev = evaluate_sequences(pred, gt.keypoints, valid)
    det_pred = []
    det_gt = []
    present = result.track.raw.valid.any(axis=2)  # (F, N)
    for t in range(pred.shape[0]):
        det_pred.append([pred[t, s] for s in range(pred.shape[1]) if present[t, s]])
        det_gt.append([gt.keypoints[t, g] for g in range(gt.keypoints.shape[1])])
    det = detection_scores(det_pred, det_gt, config.match_radius_m)
    ev.pooled.f1 = det["f1"]
    ev.pooled.precision = det["precision"]
    ev.pooled.recall = det["recall"]

    if result.fit is not None:
        same_surface = (
            gt.template.surface_sample_count == template.surface_sample_count
        )
        if same_surface:
            pve_means = []
            pa_means = []
            n_means = []
            for s, g in enumerate(ev.permutation):
                if g < 0:
                    continue
                motion = result.fit.motions[s]
                cache_p = fk_forward(
                    template, motion.pose, motion.global_orient,
                    motion.global_transl, motion.shape,
                )
                verts_p = vertices_forward(
                    template, cache_p, frames_forward(template, cache_p)
                )
                gtm = gt.motions[g]
                cache_g = fk_forward(
                    gt.template, gtm.pose, gtm.global_orient,
                    gtm.global_transl, gtm.shape,
                )
                verts_g = vertices_forward(
                    gt.template, cache_g, frames_forward(gt.template, cache_g)
                )
                rows = [vertex_errors(verts_p[t], verts_g[t]) for t in range(verts_p.shape[0])]
                pve = float(np.nanmean([r["pve_mm"] for r in rows]))
                pa = float(np.nanmean([r["pa_pve_mm"] for r in rows]))
                nv = float(np.nanmean([r["n_pve_mm"] for r in rows]))
                ev.subjects[s].pve_mm = pve
                ev.subjects[s].pa_pve_mm = pa
                ev.subjects[s].n_pve_mm = nv
                ev.subjects[s].frame_traces["pve_mm"] = [r["pve_mm"] for r in rows]
                pve_means.append(pve)
                pa_means.append(pa)
                n_means.append(nv)
            ev.pooled.pve_mm = _pool(pve_means)
            ev.pooled.pa_pve_mm = _pool(pa_means)
            ev.pooled.n_pve_mm = _pool(n_means)
        if len(result.fit.motions) == 2:
            col = collision_scores(
                template, result.fit.motions[0],
                template, result.fit.motions[1],
                voxel=config.voxel_m,
            )
            ev.pooled.mp2s_mm = col["mp2s_mm"]
            ev.pooled.miou_percent = col["miou_percent"]
            ev.pooled.mioa_m2 = col["mioa_m2"]
            ev.pooled.frame_traces["p2s_mm"] = col["p2s_mm_trace"]
            ev.pooled.frame_traces["iou_percent"] = col["iou_percent_trace"]
            ev.pooled.frame_traces["ioa_m2"] = col["ioa_m2_trace"]
    return ev


# ---------------------------------------------------------------------------
# Ablations


def ablate_cameras(config: PipelineConfig = PipelineConfig(),
                   counts=(6, 10, 16, 20), seeds=(0, 1, 2, 3, 4)) -> dict:
    """Median tracking MPJPE as a function of camera count.

    Rebuilds the rig for each count and re-runs association, triangulation,
    and refinement on freshly corrupted detections; mesh fitting is skipped
    because it does not change the triangulation comparison.
    """
    base = replace(config, with_fit=False)
    counts = [int(c) for c in counts]
    seeds = [int(s) for s in seeds]
    per_seed = []
    medians = []
    for count in counts:
        row = []
        for seed in seeds:
            cfg = replace(base, camera_count=count, seed=seed)
            result = run_pipeline(None, cfg)
            ev = evaluate_sequences(
                result.track.refined.positions,
                result.scene.ground_truth.keypoints,
            )
            row.append(float(ev.pooled.mpjpe_mm))
        per_seed.append(row)
        medians.append(float(np.median(row)))
    return {
        "counts": counts,
        "seeds": seeds,
        "mpjpe_mm": per_seed,
        "median_mpjpe_mm": medians,
    }


def ablate_collision(config: PipelineConfig = PipelineConfig(),
                     seeds=tuple(range(10))) -> dict:
    """Fit with and without the collision term on identical triangulations.

    Each seed synthesizes and tracks one scene, then runs the mesh fit twice
    from the same refined sequence: once with the configured collision
    weight, once with it zeroed. Reports the collision metrics of both fits.
    """
    seeds = [int(s) for s in seeds]
    rows = []
    for seed in seeds:
        cfg = replace(config, seed=seed, with_fit=False)
        result = run_pipeline(None, cfg)
        template = default_template(cfg.surface_samples)
        templates = [template] * result.track.refined.subject_count
        fits = {}
        for label, weights in (
            ("on", config.fit_weights),
            ("off", replace(config.fit_weights, collision=0.0)),
        ):
            fit = fit_sequence(
                result.track.refined,
                templates,
                weights=weights,
                prior=ShapePrior.standard_normal(),
                plan=config.stage_plan,
            )
            entry = {"max_penetration_m": float(fit.max_penetration)}
            if len(fit.motions) == 2:
                col = collision_scores(
                    template, fit.motions[0], template, fit.motions[1],
                    voxel=config.voxel_m,
                )
                entry.update(
                    mp2s_mm=col["mp2s_mm"],
                    miou_percent=col["miou_percent"],
                    mioa_m2=col["mioa_m2"],
                    iou_quantum_percent=col["iou_quantum_percent"],
                    ioa_quantum_m2=col["ioa_quantum_m2"],
                )
            if result.scene.ground_truth is not None:
                ev = evaluate_sequences(
                    np.stack(
                        [motion_keypoints(template, m) for m in fit.motions],
                        axis=1,
                    ),
                    result.scene.ground_truth.keypoints,
                )
                entry["mpjpe_mm"] = float(ev.pooled.mpjpe_mm)
            fits[label] = entry
        on, off = fits["on"], fits["off"]
        reduction = float("nan")
        if "mp2s_mm" in on and off.get("mp2s_mm", 0.0) > 0:
            reduction = 100.0 * (off["mp2s_mm"] - on["mp2s_mm"]) / off["mp2s_mm"]
        # increases below one voxel / one vertex of resolution are noise
        iou_eps = max(on.get("iou_quantum_percent", 0.0),
                      off.get("iou_quantum_percent", 0.0))
        ioa_eps = max(on.get("ioa_quantum_m2", 0.0), off.get("ioa_quantum_m2", 0.0))
        rows.append(
            {
                "seed": seed,
                "with_collision": on,
                "without_collision": off,
                "mp2s_reduction_percent": reduction,
                "improved": bool(
                    reduction >= 30.0
                    and on.get("miou_percent", 0.0)
                    <= off.get("miou_percent", 0.0) + iou_eps
                    and on.get("mioa_m2", 0.0) <= off.get("mioa_m2", 0.0) + ioa_eps
                ),
            }
        )
    return {
        "seeds": seeds,
        "rows": rows,
        "improved_count": int(sum(r["improved"] for r in rows)),
    }


# ---------------------------------------------------------------------------
# Result serialization


def sequence_to_dict(seq: Pose3DSequence) -> dict:
    return {
        "positions": np.nan_to_num(seq.positions).tolist(),
        "valid": seq.valid.astype(int).tolist(),
        "view_counts": seq.view_counts.tolist(),
        "frame_times": seq.frame_times.tolist(),
    }


def sequence_from_dict(data: dict) -> Pose3DSequence:
    try:
        return Pose3DSequence(
            positions=np.asarray(data["positions"], dtype=np.float64),
            valid=np.asarray(data["valid"], dtype=bool),
            view_counts=np.asarray(data["view_counts"], dtype=np.intp),
            frame_times=np.asarray(data["frame_times"], dtype=np.float64),
        )
    except KeyError as exc:
        raise SceneError(f"pose sequence payload missing {exc}") from exc


def track_to_dict(track: TrackResult) -> dict:
    return {
        "raw": sequence_to_dict(track.raw),
        "refined": sequence_to_dict(track.refined),
        "contact_frame": track.contact_frame,
        "degraded_frames": list(track.degraded_frames),
        "identity_matches": track.identity_matches,
        "identity_total": track.identity_total,
        "identity_accuracy": track.identity_accuracy,
        "slot_sources": list(track.slot_sources),
    }


def track_from_dict(data: dict) -> TrackResult:
    try:
        contact = data["contact_frame"]
        return TrackResult(
            raw=sequence_from_dict(data["raw"]),
            refined=sequence_from_dict(data["refined"]),
            contact_frame=None if contact is None else int(contact),
            degraded_frames=[int(x) for x in data["degraded_frames"]],
            identity_matches=int(data["identity_matches"]),
            identity_total=int(data["identity_total"]),
            slot_sources=[int(x) for x in data["slot_sources"]],
        )
    except KeyError as exc:
        raise SceneError(f"track payload missing {exc}") from exc


def fit_to_dict(fit: FitResult) -> dict:
    out = {
        "subjects": [_motion_to_dict(m) for m in fit.motions],
        "max_penetration_m": float(fit.max_penetration),
        "stage_c_triggered": bool(fit.stage_c_triggered),
        "contact_frames": (
            int(fit.contacts.frame_contact.sum()) if fit.contacts is not None else 0
        ),
    }
    if fit.contacts is not None:
        out["frame_contact"] = fit.contacts.frame_contact.astype(int).tolist()
        out["contact_counts"] = fit.contacts.counts.tolist()
    return out


def fit_motions_from_dict(data: dict) -> list[SubjectMotion]:
    try:
        return [_motion_from_dict(m) for m in data["subjects"]]
    except KeyError as exc:
        raise SceneError(f"fit payload missing {exc}") from exc

"""Synthetic two-person interaction scenarios and camera rigs.

Scenarios are closed-form choreographies sampled at the clip frame rate:
both subjects start 3 m apart facing each other, walk in (where the kind
calls for it) and perform a contact action. Every angle and position
schedule is a C1 function of time built from quintic smoothsteps and
sinusoids, which keeps frame-to-frame keypoint displacements well under the
0.15 m cap at 20 FPS. Randomness (shape coefficients, gait stride and phase,
amplitude jitter) comes from a single per-scenario SeedSequence.

Kinds: ``approach`` (walk up, hands to the partner's shoulders), ``hug``
(walk up, sustained wrap-around embrace), ``push`` (hands on the partner's
chest, rhythmic shoving with a drifting midpoint), ``grapple`` (close-range
cyclic arm reaches and torso twists with intermittent contact), ``circle``
(orbiting each other at a no-contact distance).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import (
    BodyTemplate,
    SubjectMotion,
    _segment_distance,
    bone_segments,
    default_template,
    fk_forward,
    matrix_to_rot6d,
    motion_keypoints,
)
from .geometry import CameraRig, CameraView

SCENARIO_KINDS = ("approach", "hug", "push", "circle", "grapple")
START_SEPARATION_M = 3.0
MAX_STEP_M = 0.15  # per-frame displacement cap at 20 FPS


class ScenarioError(ValueError):
    """Unknown scenario kind or invalid arguments."""


@dataclass
class Scenario:
    """A generated two-person clip with ground-truth motion."""

    kind: str
    seed: int
    fps: float
    duration: float
    template: BodyTemplate
    motions: list
    keypoints: np.ndarray  # (F, N, J, 3)
    frame_times: np.ndarray
    first_contact_frame: int | None

    @property
    def frame_count(self) -> int:
        return self.keypoints.shape[0]

    @property
    def subject_count(self) -> int:
        return self.keypoints.shape[1]


# ----- camera rig -------------------------------------------------------------


def make_rig(
    camera_count: int = 20,
    radius: float = 4.0,
    height: float = 1.6,
    target=(0.0, 0.0, 0.9),
    resolution=(3840, 2160),
    frame_rate: float = 20.0,
    hfov_deg: float = 90.0,
) -> CameraRig:
    """Equidistant inward-looking cameras on a circle around the target."""
    if camera_count < 2:
        raise ScenarioError("a rig needs at least 2 cameras")
    width, h = resolution
    fx = 0.5 * width / np.tan(0.5 * np.radians(hfov_deg))
    intr = np.array(
        [[fx, 0.0, width / 2.0], [0.0, fx, h / 2.0], [0.0, 0.0, 1.0]]
    )
    target = np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0])
    cams = []
    for k in range(camera_count):
        az = 2.0 * np.pi * k / camera_count
        eye = np.array([radius * np.cos(az), radius * np.sin(az), height])
        forward = target - eye
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, up)
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        cams.append(
            CameraView(
                cam_id=k,
                intrinsics=intr,
                rotation=rot,
                translation=-rot @ eye,
                resolution=(width, h),
            )
        )
    return CameraRig(cameras=tuple(cams), frame_rate=frame_rate)


# ----- math helpers -----------------------------------------------------------


def _smooth01(u):
    """Quintic smoothstep: C2, 0 below 0 and 1 above 1."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (u * (6.0 * u - 15.0) + 10.0)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def _joint_rot(yaw, roll, pitch):
    """Yaw (about +z) applied first, then roll (+x), then pitch (+y).

    With this order pitch always swings a hanging limb in the sagittal
    plane of the parent frame, which is what the gait needs.
    """
    return _ry(pitch) @ _rx(roll) @ _rz(yaw)


# joint indices in the default template
_L_HIP, _L_KNEE = 1, 2
_R_HIP, _R_KNEE = 4, 5
_SPINE, _NECK = 7, 8
_L_SHO, _L_ELB = 11, 12
_R_SHO, _R_ELB = 14, 15

_ARM_HANG = np.radians(72.0)


class _PoseAngles:
    """Per-joint (yaw, roll, pitch) angles in radians."""

    def __init__(self):
        self.angles = {}

    def set(self, joint, yaw=0.0, roll=0.0, pitch=0.0):
        self.angles[joint] = np.array([yaw, roll, pitch])

    def blend(self, other, lam, lam_map=None):
        """Mix toward ``other``; ``lam_map`` overrides lam per joint."""
        out = _PoseAngles()
        keys = set(self.angles) | set(other.angles)
        for k in keys:
            a = self.angles.get(k, np.zeros(3))
            b = other.angles.get(k, np.zeros(3))
            w = lam if lam_map is None else lam_map.get(k, lam)
            out.angles[k] = (1.0 - w) * a + w * b
        return out

    def to_pose6d(self, bone_count):
        pose = np.tile(
            matrix_to_rot6d(np.eye(3)), (bone_count, 1)
        )
        for joint, (yaw, roll, pitch) in self.angles.items():
            pose[joint - 1] = matrix_to_rot6d(_joint_rot(yaw, roll, pitch))
        return pose


def _gait_angles(phase, amp):
    """Leg/arm swing for locomotion; amp in [0, 1]."""
    pose = _PoseAngles()
    leg = 0.30 * amp
    knee = 0.40 * amp
    arm = 0.20 * amp
    sin_p = np.sin(phase)
    pose.set(_L_HIP, pitch=-leg * sin_p)
    pose.set(_R_HIP, pitch=leg * sin_p)
    pose.set(_L_KNEE, pitch=knee * 0.5 * (1.0 - np.cos(phase - 0.6)))
    pose.set(_R_KNEE, pitch=knee * 0.5 * (1.0 - np.cos(phase + np.pi - 0.6)))
    pose.set(_L_SHO, roll=-_ARM_HANG, pitch=arm * sin_p)
    pose.set(_R_SHO, roll=_ARM_HANG, pitch=-arm * sin_p)
    pose.set(_L_ELB, roll=-0.15, pitch=0.0)
    pose.set(_R_ELB, roll=0.15, pitch=0.0)
    return pose


def _stand_angles():
    pose = _PoseAngles()
    pose.set(_L_SHO, roll=-_ARM_HANG)
    pose.set(_R_SHO, roll=_ARM_HANG)
    pose.set(_L_ELB, roll=-0.15)
    pose.set(_R_ELB, roll=0.15)
    return pose


def _action_angles(kind, beat=0.0, stagger=1.0, aim=0.0):
    """Target upper-body pose for the contact action of each kind.

    ``stagger`` is +1 for one subject and -1 for the other so the two
    reaching arms take different lanes instead of meeting tip to tip.
    ``aim`` pitches both shoulders so the hands land at the partner's
    shoulder height even when statures differ.
    """
    pose = _stand_angles()
    if kind == "approach":
        # hands toward the partner's shoulders
        reach = 1.10 + 0.22 * stagger
        pose.set(_SPINE, pitch=-0.08)
        pose.set(_L_SHO, yaw=-reach, roll=-0.10, pitch=-0.05)
        pose.set(_R_SHO, yaw=reach, roll=0.10, pitch=-0.05)
        pose.set(_L_ELB, yaw=-0.35)
        pose.set(_R_ELB, yaw=0.35)
    elif kind == "hug":
        # arms wrap around the partner: left over, right under
        pose.set(_SPINE, pitch=-0.12)
        pose.set(_L_SHO, yaw=-1.30, roll=-0.05, pitch=-0.18)
        pose.set(_L_ELB, yaw=-0.80)
        pose.set(_R_SHO, yaw=1.30, roll=0.15, pitch=0.12)
        pose.set(_R_ELB, yaw=0.80)
    elif kind == "push":
        # steady lean with straight-ish arms; the shove shows up as the
        # shared drift of the pair, not as a reach change
        reach = 1.25 + 0.10 * stagger
        pose.set(_SPINE, pitch=-0.15)
        pose.set(_L_SHO, yaw=-reach, roll=-0.05)
        pose.set(_R_SHO, yaw=reach, roll=0.05)
        pose.set(_L_ELB, yaw=-1.20)
        pose.set(_R_ELB, yaw=1.20)
    elif kind == "grapple":
        reach = 1.05 + 0.15 * stagger
        pose.set(_SPINE, pitch=-0.12, yaw=0.18 * beat)
        pose.set(_L_SHO, yaw=-reach - 0.28 * beat, roll=-0.10)
        pose.set(_R_SHO, yaw=reach - 0.28 * beat, roll=0.10)
        pose.set(_L_ELB, yaw=-0.45)
        pose.set(_R_ELB, yaw=0.45)
    if kind in _CONTACT_TARGETS:
        for joint in (_L_SHO, _R_SHO):
            pose.angles[joint][2] += aim
    return pose


# ----- scenario assembly ------------------------------------------------------


def _pelvis_height(template: BodyTemplate, shape) -> float:
    """Stand height of the pelvis so the ankles clear the ground by 8 cm."""
    lengths = template.shaped_lengths(shape)
    drop = 0.0
    for child in (_L_HIP, _L_KNEE, 3):  # pelvis -> hip -> knee -> ankle
        drop += -template.rest_dirs[child - 1][2] * lengths[child - 1]
    return drop + 0.08


def _sample_shape(rng) -> np.ndarray:
    """Length-affecting coefficients only; girth stays at the template value."""
    shape = np.zeros(10)
    shape[0] = rng.uniform(-0.8, 0.8)
    for k in (2, 3, 4, 5, 9):
        shape[k] = rng.uniform(-0.4, 0.4)
    return shape


_CONTACT_TARGETS = {
    "approach": -0.008,
    "hug": -0.012,
    "push": -0.008,
    "grapple": -0.004,
}
# distance still to close while the arms ramp up, so mid-sweep hands
# pass in front of the partner instead of through them
_RAMP_CLOSE_M = 0.12
# second subject starts its arm ramp this fraction of t_ramp later,
# so the two reaches do not sweep the same corridor at the same time
_RAMP_DELAY = 0.45


def _aim_pitches(template, shapes, heights, stagger_rad=0.12):
    """Shoulder pitch corrections: track the partner's shoulder height and
    stagger the two reach heights so crossing forearms take separate lanes."""
    lengths = [template.shaped_lengths(s) for s in shapes]
    sho_z = [heights[s] + lengths[s][6] + lengths[s][7] for s in range(2)]
    aims = []
    for s in range(2):
        track = np.arctan2(sho_z[s] - sho_z[1 - s], 0.55)
        lane = -stagger_rad if s == 0 else stagger_rad
        aims.append(0.8 * track + lane)
    return aims


def _action_gap(template, shapes, heights, aims, kind, separation, beat):
    """Surface gap of the fully ramped action pose at the given separation."""
    kps, radii = [], []
    for s, side in ((0, -1.0), (1, 1.0)):
        angles = _action_angles(kind, beat, stagger=-side, aim=aims[s])
        pose = angles.to_pose6d(template.bone_count)[None]
        orient = matrix_to_rot6d(_rz(0.0 if side < 0 else np.pi))[None]
        transl = np.array([[side * separation / 2.0, 0.0, heights[s]]])
        cache = fk_forward(template, pose, orient, transl, shapes[s])
        kps.append(cache.keypoints[0])
        radii.append(template.shaped_radii(shapes[s]))
    return surface_gap(template, kps[0], radii[0], template, kps[1], radii[1])


def _calibrate_distance(template, shapes, heights, aims, kind) -> float:
    """Final separation that puts the action pose at its target contact depth.

    Bisects the exact capsule surface gap, so the depth is stable under the
    randomly sampled body shapes. Grapple calibrates against the deepest
    point of its beat sweep.
    """
    target = _CONTACT_TARGETS[kind]
    beats = (-1.0, -0.5, 0.0, 0.5, 1.0) if kind == "grapple" else (0.0,)

    def gap(d):
        return min(
            _action_gap(template, shapes, heights, aims, kind, d, b)
            for b in beats
        )

    lo, hi = 0.30, 2.00
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if gap(mid) > target:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _schedules(kind, duration, rng, d_final):
    """Per-kind closures: separation dist(t), action ramp lam(t), rhythm
    beat(t) and shared drift(t) along x, plus walk-in and ramp times.

    The returned ``lam`` settles over the whole window that covers both
    subjects' staggered arm ramps (see :func:`make_scenario`)."""
    t_walk = float(np.clip(0.55 * duration, 0.8, 2.75))
    t_ramp = float(np.clip(0.18 * duration, 0.5, 1.0))
    if kind == "grapple":
        t_walk = float(np.clip(0.50 * duration, 0.8, 2.5))
    elif kind == "circle":
        t_walk = float(np.clip(0.40 * duration, 0.8, 2.0))
    t_settle = (1.0 + _RAMP_DELAY) * t_ramp
    ramp_close = 0.0 if kind == "circle" else _RAMP_CLOSE_M
    walk_close = START_SEPARATION_M - d_final - ramp_close

    if kind == "circle":
        # no contact action; the gait keeps running while orbiting
        def lam(t):
            return 0.0

    else:

        def lam(t):
            return _smooth01((t - t_walk) / t_settle)

    def dist(t):
        return (
            START_SEPARATION_M
            - walk_close * _smooth01(t / t_walk)
            - ramp_close * lam(t)
        )

    freq = rng.uniform(0.55, 0.75)
    if kind == "grapple":
        freq *= 0.85  # slower sweep keeps wrist speed inside the step cap
    beat_phase = rng.uniform(0.0, 2.0 * np.pi)

    def beat(t):
        return np.sin(2.0 * np.pi * freq * (t - t_walk) + beat_phase) * lam(t)

    if kind == "push":
        # the pair lurches along x as one subject shoves the other
        def drift(t):
            return 0.06 * beat(t)

    else:

        def drift(t):
            return 0.0

    return dist, lam, beat, drift, t_walk, t_ramp


def make_scenario(
    kind: str,
    seed: int = 0,
    duration: float = 5.0,
    fps: float = 20.0,
    template: BodyTemplate | None = None,
) -> Scenario:
    """Generate a two-person scenario clip.

    The two subjects share the template geometry but have independently
    sampled shape coefficients. Ground-truth keypoints are cached on the
    returned object, and ``first_contact_frame`` comes from
    :func:`detect_first_contact`.
    """
    if kind not in SCENARIO_KINDS:
        raise ScenarioError(f"unknown scenario kind: {kind!r}")
    if duration <= 0 or fps <= 0:
        raise ScenarioError("duration and fps must be positive")
    template = template or default_template()
    rng = np.random.default_rng(np.random.SeedSequence([1001, seed]))
    shapes = [_sample_shape(rng) for _ in range(2)]
    strides = [rng.uniform(0.95, 1.10) for _ in range(2)]
    phases = [rng.uniform(0.0, 2.0 * np.pi) for _ in range(2)]
    heights = [_pelvis_height(template, s) for s in shapes]
    aims = _aim_pitches(template, shapes, heights)
    if kind == "circle":
        d_final = 1.60
    else:
        d_final = _calibrate_distance(template, shapes, heights, aims, kind)
    dist, lam, beat, drift, t_walk, t_ramp = _schedules(
        kind, duration, rng, d_final
    )
    frame_count = int(round(duration * fps))
    times = np.arange(frame_count) / fps
    nb = template.bone_count
    orbit_span = max(duration - t_walk, 1e-9)
    motions = []
    for s in range(2):
        side = -1.0 if s == 0 else 1.0
        pos_xy = np.zeros((frame_count, 2))
        yaws = np.zeros(frame_count)
        for i, t in enumerate(times):
            if kind == "circle":
                radius = dist(t) / 2.0
                theta = 0.6 * np.pi * _smooth01((t - t_walk) / orbit_span)
                ang = theta + (np.pi if s == 0 else 0.0)
                pos_xy[i] = (radius * np.cos(ang), radius * np.sin(ang))
                yaws[i] = ang + np.pi  # keep facing the partner
            else:
                pos_xy[i] = (side * dist(t) / 2.0 + drift(t), 0.0)
                yaws[i] = 0.0 if s == 0 else np.pi
        deltas = np.linalg.norm(np.diff(pos_xy, axis=0), axis=1)
        walked = np.concatenate([[0.0], np.cumsum(deltas)])
        speeds = deltas * fps
        speeds = np.concatenate([speeds[:1], speeds]) if frame_count > 1 else np.zeros(1)
        pose = np.zeros((frame_count, nb, 6))
        orient = np.zeros((frame_count, 6))
        transl = np.zeros((frame_count, 3))
        for i, t in enumerate(times):
            amp = float(np.clip(speeds[i] / 0.9, 0.0, 1.0))
            phase = 2.0 * np.pi * walked[i] / strides[s] + phases[s]
            gait = _gait_angles(phase, amp)
            action = _action_angles(kind, beat(t), stagger=-side, aim=aims[s])
            delay = 0.0 if s == 0 else _RAMP_DELAY * t_ramp
            lam_s = float(_smooth01((t - t_walk - delay) / t_ramp))
            if kind == "circle":
                lam_s = 0.0
            if s == 1 and kind in _CONTACT_TARGETS and 0.0 < lam_s < 1.0:
                # the delayed reach ducks under the partner's already placed
                # forearms; the bump vanishes once the ramp completes
                bump = 0.35 * np.sin(np.pi * lam_s)
                action.angles[_L_SHO][2] += bump
                action.angles[_R_SHO][2] += bump
            lam_map = None
            if kind == "push" and lam_s > 0.0:
                # bend the elbows ahead of the shoulder sweep so the arms
                # never pass through a straight reach into the partner
                fast = min(1.0, lam_s ** (1.0 / 3.0))
                lam_map = {_L_ELB: fast, _R_ELB: fast}
            mix = gait.blend(action, lam_s, lam_map)
            pose[i] = mix.to_pose6d(nb)
            orient[i] = matrix_to_rot6d(_rz(yaws[i]))
            bob = 0.01 * amp * (1.0 - np.cos(2.0 * phase)) / 2.0
            transl[i] = (pos_xy[i, 0], pos_xy[i, 1], heights[s] + bob)
        motions.append(
            SubjectMotion(
                shape=shapes[s], pose=pose, global_orient=orient, global_transl=transl
            )
        )
    keypoints = np.stack(
        [motion_keypoints(template, m) for m in motions], axis=1
    )
    scenario = Scenario(
        kind=kind,
        seed=seed,
        fps=fps,
        duration=duration,
        template=template,
        motions=motions,
        keypoints=keypoints,
        frame_times=times,
        first_contact_frame=None,
    )
    scenario.first_contact_frame = detect_first_contact(scenario)
    return scenario


def surface_gap(template_a, keypoints_a, radii_a, template_b, keypoints_b, radii_b) -> float:
    """Minimum surface-to-surface distance between two capsule bodies (m).

    Negative values measure interpenetration depth.
    """
    segs_a = bone_segments(template_a, keypoints_a)
    segs_b = bone_segments(template_b, keypoints_b)
    best = np.inf
    for i in range(segs_a.shape[0]):
        for k in range(segs_b.shape[0]):
            d = _segment_distance(
                segs_a[i, 0], segs_a[i, 1], segs_b[k, 0], segs_b[k, 1]
            )
            best = min(best, d - radii_a[i] - radii_b[k])
    return float(best)


def detect_first_contact(scenario: Scenario, eps: float = 0.01) -> int | None:
    """First frame where the two bodies' surfaces come within ``eps`` meters."""
    radii = [scenario.template.shaped_radii(m.shape) for m in scenario.motions]
    for t in range(scenario.frame_count):
        gap = surface_gap(
            scenario.template,
            scenario.keypoints[t, 0],
            radii[0],
            scenario.template,
            scenario.keypoints[t, 1],
            radii[1],
        )
        if gap <= eps:
            return t
    return None

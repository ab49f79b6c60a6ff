"""Evaluation metrics for poses, surfaces, detection and collision.

Joint metrics follow the root-relative convention: predictions are
translated so the pelvis (keypoint 0) coincides with the ground truth, and
errors are averaged over the valid non-root keypoints (the root term is
structurally zero after alignment). The PA variants realign with a full
similarity Procrustes fit; the N variants apply the closed-form optimal
scale about the alignment anchor. Vertex metrics use the same three
flavors but with no root: PVE is unaligned, N-PVE scales about the
centroid.

Correctness thresholds use strict inequalities: a keypoint exactly at the
PCK threshold does not count, a candidate exactly at the matching radius
does not match.

All distances are meters internally and reported in millimeters; PCK, AUC
and mIoU are percentages; F1 is in [0, 1]; mIoA is square meters.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .body import (
    BodyTemplate,
    SubjectMotion,
    bone_segments,
    fk_forward,
    frames_forward,
    vertex_areas,
    vertices_forward,
)
from .geometry import DegenerateInputError, atomic_write_text, procrustes_align

PCK_THRESHOLD_MM = 150.0
AUC_STEP_MM = 5.0
MATCH_RADIUS_M = 0.5
VOXEL_SIZE_M = 0.02


def joint_errors(pred, gt, valid=None) -> dict:
    """MPJPE / PA-MPJPE / N-MPJPE (mm) for one frame of keypoints.

    ``pred`` and ``gt`` are (J, 3) with the root at index 0; ``valid`` masks
    ground-truth keypoints to include. Returns NaN entries when fewer than 1
    (or 3, for the PA variant) non-root keypoints are valid.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    j = pred.shape[0]
    if valid is None:
        valid = np.ones(j, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    keep = valid.copy()
    keep[0] = False
    out = {"mpjpe_mm": math.nan, "pa_mpjpe_mm": math.nan, "n_mpjpe_mm": math.nan,
           "distances_mm": np.full(j, math.nan)}
    if keep.sum() < 1:
        return out
    aligned = pred - (pred[0] - gt[0])
    d = np.linalg.norm(aligned - gt, axis=1) * 1000.0
    out["distances_mm"] = np.where(valid, d, math.nan)
    out["mpjpe_mm"] = float(d[keep].mean())
    rel_p = aligned[keep] - gt[0]
    rel_g = gt[keep] - gt[0]
    denom = float((rel_p * rel_p).sum())
    scale = float((rel_p * rel_g).sum()) / denom if denom > 1e-18 else 1.0
    nd = np.linalg.norm(scale * rel_p - rel_g, axis=1) * 1000.0
    out["n_mpjpe_mm"] = float(nd.mean())
    if keep.sum() >= 3:
        try:
            tf, _ = procrustes_align(pred[keep], gt[keep], with_scale=True)
            pa = np.linalg.norm(tf.apply(pred[keep]) - gt[keep], axis=1) * 1000.0
            out["pa_mpjpe_mm"] = float(pa.mean())
        except DegenerateInputError:
            pass
    return out


def vertex_errors(pred, gt) -> dict:
    """PVE / PA-PVE / N-PVE (mm) for one frame of surface vertices."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    d = np.linalg.norm(pred - gt, axis=1) * 1000.0
    out = {"pve_mm": float(d.mean()), "pa_pve_mm": math.nan, "n_pve_mm": math.nan}
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    rel_p = pred - mu_p
    rel_g = gt - mu_g
    denom = float((rel_p * rel_p).sum())
    scale = float((rel_p * rel_g).sum()) / denom if denom > 1e-18 else 1.0
    nd = np.linalg.norm(scale * rel_p - rel_g, axis=1) * 1000.0
    out["n_pve_mm"] = float(nd.mean())
    try:
        tf, _ = procrustes_align(pred, gt, with_scale=True)
        pa = np.linalg.norm(tf.apply(pred) - gt, axis=1) * 1000.0
        out["pa_pve_mm"] = float(pa.mean())
    except DegenerateInputError:
        pass
    return out


def pck_and_auc(distances_mm, threshold_mm: float = PCK_THRESHOLD_MM,
                step_mm: float = AUC_STEP_MM) -> tuple[float, float]:
    """3DPCK (strict < threshold) and its AUC over 0..threshold.

    ``distances_mm`` is a flat array of root-aligned keypoint errors; NaN
    entries are ignored.
    """
    d = np.asarray(distances_mm, dtype=np.float64).ravel()
    d = d[np.isfinite(d)]
    if d.size == 0:
        return math.nan, math.nan
    pck = float((d < threshold_mm).mean() * 100.0)
    thresholds = np.arange(0.0, threshold_mm + 0.5 * step_mm, step_mm)
    curve = [(d < t).mean() * 100.0 for t in thresholds]
    return pck, float(np.mean(curve))


def detection_scores(pred_sets, gt_sets, match_radius: float = MATCH_RADIUS_M) -> dict:
    """Greedy root-distance matching over frames; precision/recall/F1.

    ``pred_sets`` and ``gt_sets`` are per-frame lists of (J, 3) keypoint
    arrays (one entry per detected/present person). Pairs match greedily by
    ascending root distance, strictly below ``match_radius`` meters.
    """
    tp = fp = fn = 0
    for preds, gts in zip(pred_sets, gt_sets):
        pairs = []
        for i, p in enumerate(preds):
            for k, g in enumerate(gts):
                dist = float(np.linalg.norm(np.asarray(p)[0] - np.asarray(g)[0]))
                if dist < match_radius:
                    pairs.append((dist, i, k))
        pairs.sort(key=lambda x: (x[0], x[1], x[2]))
        used_p: set = set()
        used_g: set = set()
        for dist, i, k in pairs:
            if i in used_p or k in used_g:
                continue
            used_p.add(i)
            used_g.add(k)
        tp += len(used_p)
        fp += len(preds) - len(used_p)
        fn += len(gts) - len(used_g)
    precision = tp / (tp + fp) if tp + fp else math.nan
    recall = tp / (tp + fn) if tp + fn else math.nan
    if not math.isnan(precision) and not math.isnan(recall) and precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0 if tp + fp + fn > 0 else math.nan
    return {"precision": precision, "recall": recall, "f1": f1,
            "tp": tp, "fp": fp, "fn": fn}


def collision_scores(template_a: BodyTemplate, motion_a: SubjectMotion,
                     template_b: BodyTemplate, motion_b: SubjectMotion,
                     voxel: float = VOXEL_SIZE_M) -> dict:
    """mP2S (mm), mIoU (%), mIoA (m^2) between two posed bodies.

    Per frame: mP2S is the deepest penetration of either surface into the
    other body; IoU voxelizes both occupancies on a shared ``voxel`` grid
    (a voxel is occupied when the union SDF at its center is <= 0); IoA is
    the surface area carried by vertices inside the other body (both
    directions summed). The reported values are maxima over frames, with
    per-frame traces included.
    """
    caches = [
        fk_forward(t, m.pose, m.global_orient, m.global_transl, m.shape)
        for t, m in ((template_a, motion_a), (template_b, motion_b))
    ]
    templates = [template_a, template_b]
    fcs = [frames_forward(templates[i], caches[i]) for i in range(2)]
    verts = [vertices_forward(templates[i], caches[i], fcs[i]) for i in range(2)]
    areas = [vertex_areas(templates[i], [motion_a, motion_b][i].shape) for i in range(2)]
    f = caches[0].keypoints.shape[0]
    p2s = np.zeros(f)
    iou = np.zeros(f)
    ioa = np.zeros(f)
    unions = np.zeros(f, dtype=np.intp)
    for t in range(f):
        segs = [bone_segments(templates[i], caches[i].keypoints[t]) for i in range(2)]
        radii = [caches[i].radii for i in range(2)]
        depth = 0.0
        area_sum = 0.0
        inside_any = False
        for s, q in ((0, 1), (1, 0)):
            sdf, _ = kernels.capsule_sdf(segs[s], radii[s], verts[q][t])
            depth = max(depth, float(np.maximum(-sdf, 0.0).max()))
            inside = sdf <= 0.0
            if np.any(inside):
                inside_any = True
                area_sum += float(areas[q][inside].sum())
        p2s[t] = depth
        ioa[t] = area_sum
        if not inside_any:
            iou[t] = 0.0
            continue
        lo = np.minimum(segs[0].min(axis=(0, 1)), segs[1].min(axis=(0, 1)))
        hi = np.maximum(segs[0].max(axis=(0, 1)), segs[1].max(axis=(0, 1)))
        margin = max(float(radii[0].max()), float(radii[1].max())) + voxel
        lo = np.floor((lo - margin) / voxel) * voxel
        hi = hi + margin
        axes = [np.arange(lo[d], hi[d] + voxel, voxel) + 0.5 * voxel for d in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        centers = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        occ_a = kernels.points_inside(segs[0], radii[0], centers)
        occ_b = kernels.points_inside(segs[1], radii[1], centers)
        inter = np.count_nonzero(occ_a & occ_b)
        union = np.count_nonzero(occ_a | occ_b)
        unions[t] = union
        iou[t] = 100.0 * inter / union if union else 0.0
    # resolution of the reported maxima: one voxel flip for IoU, one vertex
    # flip for IoA; useful when comparing near-identical fits
    peak = int(np.argmax(iou))
    iou_quantum = 100.0 / unions[peak] if unions[peak] else 0.0
    ioa_quantum = max(float(areas[0].max()), float(areas[1].max()))
    return {
        "mp2s_mm": float(p2s.max() * 1000.0),
        "miou_percent": float(iou.max()),
        "mioa_m2": float(ioa.max()),
        "p2s_mm_trace": (p2s * 1000.0).tolist(),
        "iou_percent_trace": iou.tolist(),
        "ioa_m2_trace": ioa.tolist(),
        "iou_quantum_percent": float(iou_quantum),
        "ioa_quantum_m2": float(ioa_quantum),
    }


@dataclass
class MetricsReport:
    """Aggregated evaluation results with per-frame traces."""

    mpjpe_mm: float = math.nan
    pa_mpjpe_mm: float = math.nan
    n_mpjpe_mm: float = math.nan
    pck_percent: float = math.nan
    auc_percent: float = math.nan
    pve_mm: float = math.nan
    pa_pve_mm: float = math.nan
    n_pve_mm: float = math.nan
    f1: float = math.nan
    precision: float = math.nan
    recall: float = math.nan
    mp2s_mm: float = math.nan
    miou_percent: float = math.nan
    mioa_m2: float = math.nan
    frame_traces: dict = field(default_factory=dict)

    SCALAR_FIELDS = (
        "mpjpe_mm", "pa_mpjpe_mm", "n_mpjpe_mm", "pck_percent", "auc_percent",
        "pve_mm", "pa_pve_mm", "n_pve_mm", "f1", "precision", "recall",
        "mp2s_mm", "miou_percent", "mioa_m2",
    )

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in self.SCALAR_FIELDS}

    def to_json(self) -> str:
        payload = dict(self.scalars())
        payload["frame_traces"] = {
            k: list(v) for k, v in sorted(self.frame_traces.items())
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.SCALAR_FIELDS)
        writer.writerow([repr(getattr(self, k)) for k in self.SCALAR_FIELDS])
        return buf.getvalue()

    def save(self, json_path=None, csv_path=None) -> None:
        if json_path is not None:
            atomic_write_text(json_path, self.to_json() + "\n")
        if csv_path is not None:
            atomic_write_text(csv_path, self.to_csv())


def sequence_joint_metrics(pred, gt, valid=None) -> dict:
    """Frame-averaged joint metrics for one subject sequence.

    ``pred``/``gt`` are (F, J, 3); ``valid`` is (F, J). Returns means plus
    per-frame traces; frames with no valid non-root keypoint are skipped.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    f, j = pred.shape[0], pred.shape[1]
    if valid is None:
        valid = np.ones((f, j), dtype=bool)
    mpjpe, pa, nv = [], [], []
    dists = []
    for t in range(f):
        res = joint_errors(pred[t], gt[t], valid[t])
        mpjpe.append(res["mpjpe_mm"])
        pa.append(res["pa_mpjpe_mm"])
        nv.append(res["n_mpjpe_mm"])
        keep = valid[t].copy()
        keep[0] = False
        dists.append(res["distances_mm"][keep])
    flat = np.concatenate(dists) if dists else np.array([])
    pck, auc = pck_and_auc(flat)
    return {
        "mpjpe_mm": float(np.nanmean(mpjpe)) if len(mpjpe) else math.nan,
        "pa_mpjpe_mm": float(np.nanmean(pa)) if len(pa) else math.nan,
        "n_mpjpe_mm": float(np.nanmean(nv)) if len(nv) else math.nan,
        "pck_percent": pck,
        "auc_percent": auc,
        "mpjpe_mm_trace": mpjpe,
        "pa_mpjpe_mm_trace": pa,
        "n_mpjpe_mm_trace": nv,
    }

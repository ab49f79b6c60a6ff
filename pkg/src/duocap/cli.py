"""Command-line front end: simulate, track, fit, evaluate, ablate, export.

Every subcommand reads an optional JSON config (``--config``), then applies
field overrides given as flags (scalar config fields get one flag each) and
``--set path=value`` assignments for nested entries. Outputs land in the
``--out`` directory as JSON/CSV/OBJ files written atomically.

Exit codes: 0 success, 2 invalid input, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from pathlib import Path

from .body import default_template, export_obj
from .geometry import atomic_write_text
from .meshfit import (
    FitResult,
    MeshFitError,
    extract_contacts,
    fit_sequence,
    penetration_series,
)
from .pipeline import (
    PipelineConfig,
    PipelineError,
    PipelineResult,
    SceneError,
    ablate_cameras,
    ablate_collision,
    config_from_dict,
    config_to_dict,
    evaluate_result,
    fit_motions_from_dict,
    fit_to_dict,
    load_config,
    load_scene,
    run_pipeline,
    save_config,
    save_scene,
    synthesize_scene,
    track_from_dict,
    track_scene,
    track_to_dict,
)

_REPLACE = dataclasses.replace


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise SceneError(f"not a boolean: {text!r}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per scalar config field, e.g. ``--camera-count``."""
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(PipelineConfig):
        if not isinstance(f.default, (bool, int, float, str)):
            continue
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            group.add_argument(flag, dest=f"cfg_{f.name}", default=None,
                               metavar="BOOL", help=f"default {f.default}")
        else:
            group.add_argument(flag, dest=f"cfg_{f.name}", default=None,
                               type=type(f.default), metavar=f.name.upper(),
                               help=f"default {f.default}")
    group.add_argument("--set", dest="cfg_set", action="append", default=[],
                       metavar="PATH=VALUE",
                       help="nested override, e.g. refine_weights.temporal=0.5")


def _resolve_config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    updates = {}
    for f in dataclasses.fields(PipelineConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is None:
            continue
        updates[f.name] = _parse_bool(raw) if isinstance(f.default, bool) else raw
    if updates:
        config = _REPLACE(config, **updates)
    if args.cfg_set:
        data = config_to_dict(config)
        for item in args.cfg_set:
            if "=" not in item:
                raise SceneError(f"--set expects path=value, got {item!r}")
            path, value = item.split("=", 1)
            keys = path.strip().split(".")
            node = data
            for key in keys[:-1]:
                if key not in node or not isinstance(node[key], dict):
                    raise SceneError(f"unknown config path: {path}")
                node = node[key]
            if keys[-1] not in node:
                raise SceneError(f"unknown config path: {path}")
            try:
                node[keys[-1]] = json.loads(value)
            except json.JSONDecodeError:
                node[keys[-1]] = value
        config = config_from_dict(data)
    config.validate()
    return config


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise SceneError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SceneError(f"malformed JSON in {path}: {exc}") from exc


def cmd_simulate(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    scene = synthesize_scene(config)
    save_scene(out / "scene.json", scene)
    save_config(out / "config.json", config)
    print(f"wrote {out / 'scene.json'} ({scene.frame_count} frames, "
          f"{len(scene.rig.cameras)} cameras)")


def cmd_track(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    scene = load_scene(args.scene)
    template = default_template(config.surface_samples)
    track = track_scene(scene, config, template)
    _write_json(out / "track.json", track_to_dict(track))
    print(f"wrote {out / 'track.json'} (contact frame {track.contact_frame}, "
          f"{len(track.degraded_frames)} degraded)")


def cmd_fit(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    track = track_from_dict(_load_json(args.track))
    template = default_template(config.surface_samples)
    weights = config.fit_weights
    if not config.with_collision:
        weights = _REPLACE(weights, collision=0.0)
    fit = fit_sequence(
        track.refined,
        [template] * track.refined.subject_count,
        weights=weights,
        plan=config.stage_plan,
    )
    _write_json(out / "fit.json", fit_to_dict(fit))
    print(f"wrote {out / 'fit.json'} (max penetration "
          f"{fit.max_penetration * 1000:.1f} mm)")


def cmd_evaluate(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    scene = load_scene(args.scene)
    track = track_from_dict(_load_json(args.track))
    fit = None
    if args.fit:
        motions = fit_motions_from_dict(_load_json(args.fit))
        template = default_template(config.surface_samples)
        templates = [template] * len(motions)
        pen = penetration_series(templates, motions)
        fit = FitResult(
            motions=motions,
            traces={},
            stage_c_triggered=False,
            max_penetration=float(pen.max()) if pen.size else 0.0,
            contacts=extract_contacts(templates, motions),
            breakdown=None,
        )
    result = PipelineResult(config=config, scene=scene, track=track, fit=fit)
    ev = evaluate_result(result)
    payload = {
        "pooled": json.loads(ev.pooled.to_json()),
        "subjects": [json.loads(r.to_json()) for r in ev.subjects],
        "permutation": ev.permutation,
    }
    _write_json(out / "report.json", payload)
    header = ["subject"] + list(ev.pooled.SCALAR_FIELDS)
    rows = [["pooled"] + [ev.pooled.scalars()[k] for k in ev.pooled.SCALAR_FIELDS]]
    for i, rep in enumerate(ev.subjects):
        rows.append([f"subject{i}"] + [rep.scalars()[k] for k in rep.SCALAR_FIELDS])
    _write_csv(out / "metrics.csv", header, rows)
    print(f"wrote {out / 'report.json'} (MPJPE {ev.pooled.mpjpe_mm:.2f} mm)")


def cmd_ablate(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    if args.what == "cameras":
        counts = [int(c) for c in args.counts.split(",")]
        seeds = [int(s) for s in args.seeds.split(",")]
        table = ablate_cameras(config, counts=counts, seeds=seeds)
        _write_json(out / "ablate_cameras.json", table)
        rows = [
            [c] + table["mpjpe_mm"][i] + [table["median_mpjpe_mm"][i]]
            for i, c in enumerate(table["counts"])
        ]
        header = (["cameras"] + [f"seed{s}" for s in table["seeds"]]
                  + ["median_mpjpe_mm"])
        _write_csv(out / "ablate_cameras.csv", header, rows)
        print(f"wrote {out / 'ablate_cameras.json'} "
              f"(medians {table['median_mpjpe_mm']})")
    else:
        seeds = [int(s) for s in args.seeds.split(",")]
        table = ablate_collision(config, seeds=seeds)
        _write_json(out / "ablate_collision.json", table)
        header = ["seed", "mp2s_off_mm", "mp2s_on_mm", "reduction_percent",
                  "miou_off", "miou_on", "mioa_off_m2", "mioa_on_m2", "improved"]
        rows = []
        for r in table["rows"]:
            on, off = r["with_collision"], r["without_collision"]
            rows.append([
                r["seed"], off.get("mp2s_mm"), on.get("mp2s_mm"),
                r["mp2s_reduction_percent"], off.get("miou_percent"),
                on.get("miou_percent"), off.get("mioa_m2"), on.get("mioa_m2"),
                int(r["improved"]),
            ])
        _write_csv(out / "ablate_collision.csv", header, rows)
        print(f"wrote {out / 'ablate_collision.json'} "
              f"({table['improved_count']}/{len(seeds)} improved)")


def cmd_export_obj(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    payload = _load_json(args.fit)
    motions = fit_motions_from_dict(payload)
    template = default_template(config.surface_samples)
    stride = max(1, int(args.every))
    count = 0
    for s, motion in enumerate(motions):
        for t in range(0, motion.frame_count, stride):
            name = f"subject{s}_frame{t:04d}.obj"
            export_obj(out / name, template, motion.frame(t))
            count += 1
    sidecar = {k: payload[k] for k in
               ("max_penetration_m", "stage_c_triggered", "contact_frames",
                "frame_contact") if k in payload}
    _write_json(out / "contacts.json", sidecar)
    print(f"wrote {count} OBJ files to {out}")


def cmd_run(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    scene = load_scene(args.scene) if args.scene else None
    result = run_pipeline(scene, config)
    save_scene(out / "scene.json", result.scene)
    _write_json(out / "track.json", track_to_dict(result.track))
    if result.fit is not None:
        _write_json(out / "fit.json", fit_to_dict(result.fit))
    if result.scene.ground_truth is not None:
        ev = evaluate_result(result)
        payload = {
            "pooled": json.loads(ev.pooled.to_json()),
            "subjects": [json.loads(r.to_json()) for r in ev.subjects],
            "permutation": ev.permutation,
        }
        _write_json(out / "report.json", payload)
        print(f"pipeline done, MPJPE {ev.pooled.mpjpe_mm:.2f} mm -> {out}")
    else:
        print(f"pipeline done -> {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duocap",
        description="Two-person multi-view motion capture on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        _add_config_flags(p)

    p = sub.add_parser("simulate", help="synthesize a scene file")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="associate and triangulate a scene")
    p.add_argument("scene", help="scene JSON produced by simulate")
    common(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("fit", help="fit capsule bodies to tracked poses")
    p.add_argument("track", help="track JSON produced by track")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="score tracking/fits against ground truth")
    p.add_argument("scene", help="scene JSON with ground truth")
    p.add_argument("track", help="track JSON")
    p.add_argument("--fit", help="optional fit JSON")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="simulate (or load), track, fit, evaluate")
    p.add_argument("--scene", help="optional existing scene JSON")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="camera-count or collision ablation")
    p.add_argument("what", choices=("cameras", "collision"))
    p.add_argument("--counts", default="6,10,16,20",
                   help="camera counts (cameras ablation)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-obj", help="write per-frame OBJ meshes for a fit")
    p.add_argument("fit", help="fit JSON produced by fit")
    p.add_argument("--every", default=1, help="export every Nth frame")
    common(p)
    p.set_defaults(func=cmd_export_obj)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seeds", "sentinel") is None:
        args.seeds = "0,1,2,3,4" if args.what == "cameras" else "0,1,2,3,4,5,6,7,8,9"
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, MeshFitError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

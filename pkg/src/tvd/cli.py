"""Command-line front end: ``tvd track | analyze | synth | plate | report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import cv2
import yaml

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .ingest import IngestError, load_detection_stream
from .pipeline import (
    RULES,
    MissingDependencyError,
    SceneInput,
    analyze_scene,
    check_dependencies,
    load_scene,
    parse_rules,
    track_stream,
)
from .plate import AtlasError, GeometryError, Quad, TemplateClassifier, load_atlas, read_plate
from .report import ENDPOINT_ENV, SinkConfig, load_notices, read_state, retry_pending, utc_now
from .synth import ScenarioError, build_table1_corpus, generate_scene, load_spec, write_corpus, write_scene
from .tracker import format_snapshot

log = logging.getLogger("tvd")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MISSING = 3
EXIT_INTERNAL = 4


class InputError(Exception):
    pass


def _run_dir(cfg: RunConfig, explicit: Optional[str]) -> Path:
    if explicit:
        d = Path(explicit)
    else:
        base = Path(cfg.output_root) / f"{time.strftime('%Y%m%dT%H%M%S')}_seed{cfg.seed}"
        d, n = base, 1
        while d.exists():
            n += 1
            d = base.with_name(f"{base.name}_{n}")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_manifest(run_dir: Path, cfg: RunConfig, argv: Sequence[str], command: str) -> None:
    manifest = {
        "tool": "tvd",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict(),
    }
    (run_dir / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True), encoding="utf-8")


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"workers={args.workers}")
    if getattr(args, "fps", None) is not None:
        overrides.append(f"fps={args.fps}")
    return load_config(args.config, overrides)


# -- track --------------------------------------------------------------------------


def cmd_track(args) -> int:
    cfg = _config(args)
    src = Path(args.detections)
    if not src.exists():
        raise InputError(f"detections file {src} not found")
    scene = load_scene(src, cfg)
    stream = load_detection_stream(scene.detections, scene.fps, scene.frame_dims)
    snapshots, records = track_stream(stream, cfg)
    if args.output:
        out = Path(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        run_dir = out.parent
    else:
        run_dir = _run_dir(cfg, None)
        out = run_dir / "tracks.tsv"
    out.write_text("".join(format_snapshot(s) + "\n" for s in snapshots), encoding="utf-8")
    _write_manifest(run_dir, cfg, args.argv, "track")
    print(f"{len(records)} confirmed tracks, {len(snapshots)} rows -> {out}")
    return EXIT_OK


# -- analyze ------------------------------------------------------------------------


def _analyze_one(job) -> tuple[str, dict, list[str]]:
    scene, cfg, rules, run_dir, created_at = job
    out_dir = run_dir / scene.scene_id
    result = analyze_scene(scene, cfg, rules, out_dir=out_dir, outbox=_outbox(cfg, run_dir), created_at=created_at)
    return scene.scene_id, result.counts(), [n.notice_id for n in result.notices]


def _outbox(cfg: RunConfig, run_dir: Path) -> Path:
    return Path(cfg.report.outbox) if cfg.report.outbox else run_dir / "outbox"


def _scenes(args, cfg: RunConfig) -> list[SceneInput]:
    inputs = [Path(p) for p in args.inputs]
    if args.corpus:
        root = Path(args.corpus)
        if not root.is_dir():
            raise InputError(f"corpus directory {root} not found")
        inputs += sorted(p for p in root.iterdir() if (p / "detections.tsv").exists())
    if not inputs:
        raise InputError("give at least one scene directory, detections file or --corpus")
    scenes = []
    for p in inputs:
        if not p.exists():
            raise InputError(f"{p} not found")
        s = load_scene(p, cfg)
        if args.frames:
            s.frames_dir = Path(args.frames)
            if not s.frames_dir.is_dir():
                raise InputError(f"frames directory {s.frames_dir} not found")
        if args.quads:
            s.quads = Path(args.quads)
        scenes.append(s)
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise InputError("scene ids must be unique within one run")
    return scenes


def cmd_analyze(args) -> int:
    cfg = _config(args)
    rules = parse_rules(args.rules.split(",") if args.rules else cfg.rules)
    scenes = _scenes(args, cfg)
    for s in scenes:
        check_dependencies(s, rules)
    run_dir = _run_dir(cfg, args.out)
    _write_manifest(run_dir, cfg, args.argv, "analyze")
    created_at = args.created_at or utc_now()
    jobs = [(s, cfg, rules, run_dir, created_at) for s in scenes]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_analyze_one, jobs))
    else:
        results = [_analyze_one(j) for j in jobs]
    totals = {RULES[r].value: 0 for r in rules}
    summary = {}
    for scene_id, counts, notices in results:
        summary[scene_id] = {"events": {k: counts[k] for k in totals}, "notices": notices}
        for k in totals:
            totals[k] += counts[k]
    (run_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    for k, v in totals.items():
        print(f"{k}\t{v}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


# -- synth --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    render = not args.no_frames
    if args.table1:
        specs = build_table1_corpus(cfg.seed)
        out = _run_dir(cfg, args.out)
        write_corpus(specs, out, render)
        print(f"wrote {len(specs)} scenes to {out}")
        return EXIT_OK
    if not args.spec:
        raise InputError("give a scenario file or --table1")
    specs = []
    for p in args.spec:
        if not Path(p).exists():
            raise InputError(f"scenario file {p} not found")
        specs.append(load_spec(p))
    out = _run_dir(cfg, args.out)
    for s in specs:
        write_scene(generate_scene(s), out / s.name, render)
    print(f"wrote {len(specs)} scenes to {out}")
    return EXIT_OK


# -- plate --------------------------------------------------------------------------


def cmd_plate(args) -> int:
    cfg = _config(args)
    path = Path(args.image)
    if not path.exists():
        raise InputError(f"image {path} not found")
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise InputError(f"cannot decode image {path}")
    img = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    try:
        coords = [float(v) for v in args.quad.replace(" ", "").split(",")]
    except ValueError as exc:
        raise InputError(f"bad --quad: {exc}") from exc
    q = Quad.from_flat(coords)
    atlas_dir = args.atlas or cfg.plate.atlas_dir
    classifier = TemplateClassifier(load_atlas(atlas_dir) if atlas_dir else None)
    readout, rect = read_plate(img, q, (cfg.plate.out_width, cfg.plate.out_height), cfg.segment, classifier)
    if args.save_rectified:
        cv2.imwrite(args.save_rectified, cv2.cvtColor(rect, cv2.COLOR_RGB2BGR))
    print(readout.text)
    print(" ".join(f"{s:.3f}" for s in readout.scores))
    return EXIT_OK


# -- report -------------------------------------------------------------------------


def cmd_report(args) -> int:
    cfg = _config(args)
    outbox = Path(args.outbox)
    if not outbox.is_dir():
        raise InputError(f"outbox {outbox} not found")
    sink = SinkConfig(
        outbox=outbox,
        endpoint=args.endpoint or cfg.report.endpoint,
        timeout_s=cfg.report.timeout_s,
        max_retries=cfg.report.max_retries,
        backoff_base_s=cfg.report.backoff_base_s,
        backoff_factor=cfg.report.backoff_factor,
    )
    if args.retry:
        for r in retry_pending(sink, now=float("inf") if args.now else None):
            print(f"retry {r.notice_id}\t{r.status}\tattempts={r.attempts}\t{r.detail}")
    for n in load_notices(outbox):
        state = read_state(outbox, n.notice_id) or {}
        print(
            f"{n.notice_id}\t{n.scene_id}\t{n.kind}\ttrack={n.track_id}\t"
            f"frames={n.frame_range[0]}-{n.frame_range[1]}\tplate={n.plate_text or '-'}\t"
            f"{state.get('status', 'stored')}"
        )
    return EXIT_OK


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tvd", description="Traffic violation detection from detection streams.")
    parser.add_argument("--version", action="version", version=f"tvd {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override a config value, e.g. violations.stop_eps=0.2"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", parents=[common], help="track a detection stream")
    p.add_argument("detections", help="detections file or scene directory")
    p.add_argument("-o", "--output", help="tracks output file (default: <run dir>/tracks.tsv)")
    p.add_argument("--fps", type=float)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("analyze", parents=[common], help="detect violations and emit notices")
    p.add_argument("inputs", nargs="*", help="scene directories or detections files")
    p.add_argument("--corpus", help="directory whose subdirectories are scenes")
    p.add_argument("--rules", help=f"comma list of {','.join(RULES)} or all (default from config)")
    p.add_argument("--frames", help="frame image directory (single-input runs)")
    p.add_argument("--quads", help="plate quad annotation file (single-input runs)")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--fps", type=float)
    p.add_argument("--out", help="run directory (default: <output_root>/<timestamp>_seed<seed>)")
    p.add_argument("--created-at", help="timestamp written into notices (default: now)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic scenes")
    p.add_argument("spec", nargs="*", help="scenario YAML files")
    p.add_argument("--table1", action="store_true", help="generate the 14 + 14 scene evaluation corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-frames", action="store_true", help="skip frame rendering")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plate", parents=[common], help="read a license plate from an image")
    p.add_argument("image")
    p.add_argument("--quad", required=True, help="x1,y1,x2,y2,x3,y3,x4,y4 (TL, TR, BR, BL)")
    p.add_argument("--atlas", help="template atlas directory")
    p.add_argument("--save-rectified", help="write the rectified plate here")
    p.set_defaults(func=cmd_plate)

    p = sub.add_parser("report", parents=[common], help="list notices in an outbox, optionally retry delivery")
    p.add_argument("outbox")
    p.add_argument("--retry", action="store_true", help="retry queued deliveries whose backoff elapsed")
    p.add_argument("--now", action="store_true", help="with --retry: ignore backoff timers")
    p.add_argument("--endpoint", help=f"delivery URL (env {ENDPOINT_ENV} takes precedence)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    args.argv = argv
    try:
        return args.func(args)
    except MissingDependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (InputError, ConfigError, IngestError, ScenarioError, GeometryError, AtlasError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

"""Scene analysis: detections and frames in, tracks, events and notices out."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig
from .ingest import BBox, ClassLabel, FrameStream, crop, load_detection_stream, load_frame
from .light import LightColor, LightConfig, LightObservation, classify_light_frame, classify_light_temporal, orientation
from .plate import GeometryError, PlateReadout, Quad, TemplateClassifier, load_atlas, parse_quad_lines, read_plate
from .report import Notice, SinkConfig, emit_notice, notices_for_events
from .tracker import TrackRecord, format_snapshot, frame_clock, run_tracker
from .violations import (
    RuleConfig,
    ViolationEvent,
    ViolationKind,
    detect_breakdown_lane,
    detect_crosswalk_parking,
    detect_following_distance,
    detect_illegal_parking,
    detect_pedestrian_crossing,
    detect_red_light,
    format_event,
)

log = logging.getLogger(__name__)

RULES = {
    "red-light": ViolationKind.RED_LIGHT,
    "breakdown": ViolationKind.BREAKDOWN_LANE,
    "following": ViolationKind.FOLLOWING_DISTANCE,
    "pedestrian": ViolationKind.PEDESTRIAN_CROSSING,
    "parking": ViolationKind.ILLEGAL_PARKING,
    "crosswalk-parking": ViolationKind.CROSSWALK_PARKING,
}
# rules that cannot run without frame images
FRAME_RULES = ("red-light",)
SIGN_LABELS = (ClassLabel.NO_STOPPING_SIGN, ClassLabel.CROSSWALK_SIGN)


class MissingDependencyError(RuntimeError):
    pass


def parse_rules(names: Iterable[str]) -> list[str]:
    out: list[str] = []
    for raw in names:
        for name in str(raw).split(","):
            name = name.strip().lower().replace("_", "-")
            if not name:
                continue
            if name == "all":
                return list(RULES)
            if name not in RULES:
                raise ConfigError(f"unknown rule {name!r}; choose from {', '.join(RULES)} or all")
            if name not in out:
                out.append(name)
    return [r for r in RULES if r in out]


def apply_rules(
    records: Sequence[TrackRecord],
    light_states: Mapping[int, LightColor],
    timestamps: Mapping[int, float],
    frame_width: float,
    cfg: RuleConfig = RuleConfig(),
    rules: Sequence[str] = tuple(RULES),
    stream_start: Optional[int] = None,
) -> list[ViolationEvent]:
    signs = [r for r in records if r.label in SIGN_LABELS]
    events: list[ViolationEvent] = []
    if "red-light" in rules:
        events += detect_red_light(records, light_states, timestamps, cfg)
    if "breakdown" in rules:
        events += detect_breakdown_lane(records, frame_width, timestamps, cfg)
    if "following" in rules:
        events += detect_following_distance(records, frame_width, timestamps, cfg, stream_start)
    if "pedestrian" in rules:
        events += detect_pedestrian_crossing(records, signs, timestamps, cfg)
    if "parking" in rules:
        events += detect_illegal_parking(records, signs, frame_width, cfg)
    if "crosswalk-parking" in rules:
        events += detect_crosswalk_parking(records, signs, frame_width, cfg)
    order = {k: i for i, k in enumerate(ViolationKind)}
    return sorted(events, key=lambda e: (order[e.kind], e.track_id, e.frame_range))


# -- traffic lights --------------------------------------------------------------


def light_observations(
    light: TrackRecord, frames_dir: Path, cfg: LightConfig = LightConfig(), cache: Optional[dict] = None
) -> list[LightObservation]:
    obs = []
    for f, b in light.measurements or light.history:
        img = cache.get(f) if cache is not None and f in cache else load_frame(frames_dir, f)
        if cache is not None:
            cache[f] = img
        if img is None:
            continue
        piece = crop(img, b)
        o = orientation(b)
        try:
            obs.append(classify_light_frame(piece, o, f, cfg))
        except ValueError:
            obs.append(LightObservation(f, LightColor.UNKNOWN, (0, 0, 0)))
    return obs


def scene_light_states(
    lights: Sequence[TrackRecord], frames_dir: Path, cfg: LightConfig = LightConfig()
) -> dict[int, LightColor]:
    """Voted light state per frame from the longest-observed light.

    The vote is taken over the trailing window and held across frames where
    the light was not detected, until its track ends.
    """
    best: dict[int, LightColor] = {}
    best_len = -1
    cache: dict = {}
    for light in sorted(lights, key=lambda t: t.track_id):
        obs = light_observations(light, frames_dir, cfg, cache)
        valid = sum(o.color is not LightColor.UNKNOWN for o in obs)
        if not obs or valid <= best_len:
            continue
        votes = {}
        for i, o in enumerate(obs):
            votes[o.frame_index] = classify_light_temporal(obs[max(0, i + 1 - cfg.window) : i + 1], cfg)
        filled = {}
        current = LightColor.UNKNOWN
        for f in range(obs[0].frame_index, obs[-1].frame_index + 1):
            current = votes.get(f, current)
            filled[f] = current
        best, best_len = filled, valid
    return best


# -- plates ------------------------------------------------------------------------


def quads_by_track(
    quads: Sequence[tuple[int, int, Quad]], records: Sequence[TrackRecord]
) -> dict[int, list[tuple[int, Quad]]]:
    """Attach each quad to the track whose box at that frame contains its centroid.

    The track id column of the quad file is not trusted: ids from other
    tools rarely agree with ours.
    """
    boxes = {r.track_id: dict(r.measurements or r.history) for r in records if r.label.is_vehicle}
    out: dict[int, list[tuple[int, Quad]]] = {}
    for f, _, q in quads:
        cx, cy = q.centroid
        hits = [
            (b.area, tid)
            for tid, bx in boxes.items()
            if (b := bx.get(f)) is not None and b.x <= cx <= b.x2 and b.y <= cy <= b.y2
        ]
        if hits:
            _, tid = min(hits)
            out.setdefault(tid, []).append((f, q))
    return out


def read_track_plates(
    track_quads: Sequence[tuple[int, Quad]],
    frame_range: tuple[int, int],
    frames_dir: Path,
    cfg: RunConfig,
    classifier,
) -> tuple[dict[int, PlateReadout], dict[int, np.ndarray]]:
    lo, hi = frame_range
    cands = [(f, q) for f, q in track_quads if lo <= f <= hi]
    cands.sort(key=lambda fq: (-fq[1].area, fq[0]))
    readouts, images = {}, {}
    dims = (cfg.plate.out_width, cfg.plate.out_height)
    for f, q in cands[: cfg.plate.samples]:
        img = load_frame(frames_dir, f)
        if img is None:
            continue
        try:
            readout, rect = read_plate(img, q, dims, cfg.segment, classifier)
        except GeometryError as exc:
            log.warning("frame %d: %s", f, exc)
            continue
        readouts[f] = readout
        images[f] = rect
    return readouts, images


# -- scenes ------------------------------------------------------------------------


@dataclass
class SceneInput:
    scene_id: str
    detections: Path
    fps: float
    frame_dims: tuple[int, int]
    frames_dir: Optional[Path] = None
    quads: Optional[Path] = None


@dataclass
class SceneResult:
    scene_id: str
    events: list[ViolationEvent]
    notices: list[Notice] = field(default_factory=list)
    records: list[TrackRecord] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        out = {k.value: 0 for k in ViolationKind}
        for e in self.events:
            out[e.kind.value] += 1
        return out


def load_scene(directory: str | Path, cfg: RunConfig) -> SceneInput:
    """A scene directory holds detections.tsv and optionally frames/, quads.tsv, scene.json."""
    d = Path(directory)
    det = d / "detections.tsv" if d.is_dir() else d
    if not det.exists():
        raise FileNotFoundError(f"no detections file at {det}")
    base = det.parent
    meta = {}
    if (base / "scene.json").exists():
        meta = json.loads((base / "scene.json").read_text(encoding="utf-8"))
    frames = base / "frames"
    quads = base / "quads.tsv"
    return SceneInput(
        scene_id=str(meta.get("scene_id", base.name)),
        detections=det,
        fps=float(meta.get("fps", cfg.fps)),
        frame_dims=tuple(meta.get("frame_dims", (cfg.frame_width, cfg.frame_height))),
        frames_dir=frames if frames.is_dir() else None,
        quads=quads if quads.exists() else None,
    )


def check_dependencies(scene: SceneInput, rules: Sequence[str]) -> None:
    if scene.frames_dir is None:
        for r in rules:
            if r in FRAME_RULES:
                raise MissingDependencyError(f"rule {r} needs frame images but scene {scene.scene_id} has none")


def track_stream(stream: FrameStream, cfg: RunConfig):
    return run_tracker(stream, cfg.tracker_config)


def analyze_scene(
    scene: SceneInput,
    cfg: RunConfig,
    rules: Sequence[str],
    out_dir: Optional[Path] = None,
    outbox: Optional[Path] = None,
    created_at: Optional[str] = None,
    classifier=None,
) -> SceneResult:
    check_dependencies(scene, rules)
    stream = load_detection_stream(scene.detections, scene.fps, scene.frame_dims)
    snapshots, records = track_stream(stream, cfg)
    clock = frame_clock(stream)
    stream_start = stream.frames[0][0] if stream.frames else None

    light_states: dict[int, LightColor] = {}
    if "red-light" in rules and scene.frames_dir is not None:
        lights = [r for r in records if r.label is ClassLabel.TRAFFIC_LIGHT]
        light_states = scene_light_states(lights, scene.frames_dir, cfg.light)

    events = apply_rules(records, light_states, clock, scene.frame_dims[0], cfg.violations, rules, stream_start)

    result = SceneResult(scene.scene_id, events, records=records)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "tracks.tsv").write_text("".join(format_snapshot(s) + "\n" for s in snapshots), encoding="utf-8")
        (out_dir / "events.tsv").write_text("".join(format_event(e) + "\n" for e in events), encoding="utf-8")

    if outbox is not None and events:
        readouts: dict[int, dict[int, PlateReadout]] = {}
        plate_images: dict[tuple[int, int], np.ndarray] = {}
        if scene.quads is not None and scene.frames_dir is not None:
            if classifier is None:
                atlas = load_atlas(cfg.plate.atlas_dir) if cfg.plate.atlas_dir else None
                classifier = TemplateClassifier(atlas)
            with open(scene.quads, encoding="utf-8") as fh:
                by_track = quads_by_track(parse_quad_lines(fh), records)
            for ev in events:
                if ev.track_id not in by_track or ev.track_id in readouts:
                    continue
                r, imgs = read_track_plates(by_track[ev.track_id], ev.frame_range, scene.frames_dir, cfg, classifier)
                readouts[ev.track_id] = r
                plate_images.update({(ev.track_id, f): im for f, im in imgs.items()})
        tracks = {r.track_id: r for r in records}
        result.notices = notices_for_events(
            events, readouts, plate_images, tracks, scene.scene_id, scene.frames_dir, outbox, created_at
        )
        sink = SinkConfig(
            outbox=outbox,
            endpoint=cfg.report.endpoint,
            timeout_s=cfg.report.timeout_s,
            max_retries=cfg.report.max_retries,
            backoff_base_s=cfg.report.backoff_base_s,
            backoff_factor=cfg.report.backoff_factor,
        )
        for n in result.notices:
            emit_notice(n, sink)
    return result


def track_records_from_boxes(
    boxes: Mapping[int, Mapping[int, BBox]], labels: Mapping[int, ClassLabel]
) -> list[TrackRecord]:
    """Noiseless records straight from per-actor boxes (used for oracle checks)."""
    out = []
    for aid in sorted(boxes):
        hist = tuple(sorted(boxes[aid].items()))
        if hist:
            out.append(TrackRecord(aid, labels[aid], hist, hist))
    return out

"""Rule engines for the six violation kinds, run over finished track records.

All detectors are pure functions of track records, per-frame timestamps,
light states and a :class:`RuleConfig`.  The speed proxy throughout is the
relative bounding-box area rate (1/s): negative when an object recedes,
positive when it approaches the camera.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .ingest import BBox, ClassLabel
from .light import LightColor
from .tracker import TrackRecord


class ViolationKind(Enum):
    RED_LIGHT = "red_light"
    BREAKDOWN_LANE = "breakdown_lane"
    FOLLOWING_DISTANCE = "following_distance"
    PEDESTRIAN_CROSSING = "pedestrian_crossing"
    ILLEGAL_PARKING = "illegal_parking"
    CROSSWALK_PARKING = "crosswalk_parking"


class UndefinedSpeedError(ValueError):
    pass


@dataclass(frozen=True)
class RuleConfig:
    # speed proxy
    speed_window: int = 10
    speed_warmup: int = 5
    # red light
    shrink_frac: float = 0.20
    k_pass: int = 10
    # breakdown lane
    avg_mult: float = 2.0
    slow_traffic_cap: float = 0.05
    min_scene_vehicles: int = 3
    breakdown_min_frames: int = 5
    # following distance
    edge_margin: float = 0.05
    follow_seconds: float = 3.0
    appear_grace: int = 5
    oncoming_rate: float = 0.5
    # pedestrian crossing
    proximity_r: float = 3.0
    wait_frames: int = 10
    stop_eps: float = 0.15
    stop_frames: int = 10
    band_pad: float = 1.0
    # parking
    static_corr: float = 0.9
    park_frames: int = 20
    crosswalk_r: float = 4.0
    ego_motion_px: float = 20.0


@dataclass(frozen=True)
class SpeedEstimate:
    track_id: int
    frame_index: int
    area_rate: float


@dataclass(frozen=True)
class ViolationEvent:
    kind: ViolationKind
    track_id: int
    frame_range: tuple[int, int]
    evidence: tuple[int, ...]
    score: float

    def __post_init__(self):
        start, end = self.frame_range
        if start > end:
            raise ValueError(f"bad frame range {self.frame_range}")
        if any(not start <= f <= end for f in self.evidence):
            raise ValueError("evidence frames must lie inside frame_range")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


Timestamps = Mapping[int, float]


def _seconds(ts: Timestamps, f: int, fps: float = 10.0) -> float:
    return ts[f] / 1000.0 if f in ts else f / fps


def _rates(points: Sequence[tuple[int, BBox]], ts: Timestamps) -> list[float]:
    out = []
    for (f0, b0), (f1, b1) in zip(points, points[1:]):
        dt = _seconds(ts, f1) - _seconds(ts, f0)
        if dt <= 0:
            dt = 1e-3
        out.append((b1.area - b0.area) / b0.area / dt)
    return out


def _ema(values: Sequence[float], k: int) -> float:
    alpha = 2.0 / (k + 1.0)
    acc = values[0]
    for v in values[1:]:
        acc = alpha * v + (1.0 - alpha) * acc
    return acc


def estimate_speed(track: TrackRecord, at: int, timestamps: Timestamps, window: int = 10) -> SpeedEstimate:
    """EMA of per-step relative area change over the last ``window`` steps up to ``at``."""
    pts = [(f, b) for f, b in track.history if f <= at]
    if len(pts) < 2:
        raise UndefinedSpeedError(f"track {track.track_id} has fewer than 2 points at frame {at}")
    pts = pts[-(window + 1) :]
    return SpeedEstimate(track.track_id, pts[-1][0], _ema(_rates(pts, timestamps), window))


def speed_series(track: TrackRecord, timestamps: Timestamps, cfg: RuleConfig = RuleConfig()) -> dict[int, float]:
    """Area rate at each history frame once ``cfg.speed_warmup`` points have been seen."""
    hist = track.history
    rates = _rates(hist, timestamps)
    out = {}
    for i in range(max(1, cfg.speed_warmup - 1), len(hist)):
        lo = max(0, i - cfg.speed_window)
        out[hist[i][0]] = _ema(rates[lo:i], cfg.speed_window)
    return out


def _evidence(track: TrackRecord, start: int, end: int) -> tuple[int, ...]:
    frames = [f for f in track.frames if start <= f <= end]
    if not frames:
        return ()
    picks = sorted({frames[0], frames[len(frames) // 2], frames[-1]})
    return tuple(picks)


def _event(kind: ViolationKind, track: TrackRecord, start: int, end: int, score: float) -> ViolationEvent:
    return ViolationEvent(
        kind, track.track_id, (start, end), _evidence(track, start, end), float(min(1.0, max(0.0, score)))
    )


def _vehicles(tracks: Iterable[TrackRecord]) -> list[TrackRecord]:
    return [t for t in tracks if t.label.is_vehicle]


def _runs(frames: Sequence[int], max_gap: int = 1) -> list[list[int]]:
    """Split sorted frame indices into runs whose internal gaps are <= max_gap."""
    runs: list[list[int]] = []
    for f in frames:
        if runs and f - runs[-1][-1] <= max_gap:
            runs[-1].append(f)
        else:
            runs.append([f])
    return runs


def box_gap(a: BBox, b: BBox) -> float:
    """Euclidean gap between two boxes (0 when they overlap)."""
    dx = max(0.0, max(a.x, b.x) - min(a.x2, b.x2))
    dy = max(0.0, max(a.y, b.y) - min(a.y2, b.y2))
    return math.hypot(dx, dy)


# -- red light ---------------------------------------------------------------


def detect_red_light(
    tracks: Sequence[TrackRecord],
    light_states: Mapping[int, LightColor],
    timestamps: Timestamps,
    cfg: RuleConfig = RuleConfig(),
) -> list[ViolationEvent]:
    """Vehicles whose box shrinks by ``shrink_frac`` over ``k_pass`` frames under a red light."""
    events = []
    for t in _vehicles(tracks):
        boxes = t.boxes()
        windows = []
        best = 0.0
        for f0, b0 in t.history:
            f1 = f0 + cfg.k_pass
            b1 = boxes.get(f1)
            if b1 is None:
                continue
            if any(light_states.get(f) is not LightColor.RED for f in range(f0, f1 + 1)):
                continue
            shrink = 1.0 - b1.area / b0.area
            if shrink >= cfg.shrink_frac:
                windows.append((f0, f1))
                best = max(best, shrink)
        if windows:
            start = windows[0][0]
            end = max(w[1] for w in windows)
            events.append(_event(ViolationKind.RED_LIGHT, t, start, end, best / (2 * cfg.shrink_frac)))
    return events


# -- breakdown lane ----------------------------------------------------------


def detect_breakdown_lane(
    tracks: Sequence[TrackRecord],
    frame_width: float,
    timestamps: Timestamps,
    cfg: RuleConfig = RuleConfig(),
) -> list[ViolationEvent]:
    """Vehicles in the middle/right thirds moving far faster than slow surrounding traffic."""
    vehicles = _vehicles(tracks)
    speeds = {t.track_id: speed_series(t, timestamps, cfg) for t in vehicles}
    boxes = {t.track_id: t.boxes() for t in vehicles}
    frames = sorted({f for s in speeds.values() for f in s})
    band_w = frame_width / 3.0
    flagged: dict[int, list[int]] = {}
    ratio: dict[int, float] = {}
    for f in frames:
        present = [(tid, s[f]) for tid, s in speeds.items() if f in s]
        if len(present) < cfg.min_scene_vehicles:
            continue
        mean = float(np.mean([abs(r) for _, r in present]))
        if mean >= cfg.slow_traffic_cap:
            continue
        for tid, r in present:
            band = min(2, int(boxes[tid][f].cx // band_w))
            if band >= 1 and abs(r) > cfg.avg_mult * mean and abs(r) >= cfg.slow_traffic_cap:
                flagged.setdefault(tid, []).append(f)
                ratio[tid] = max(ratio.get(tid, 0.0), abs(r) / max(mean, 1e-9))
    events = []
    by_id = {t.track_id: t for t in vehicles}
    for tid in sorted(flagged):
        t = by_id[tid]
        order = {f: i for i, f in enumerate(t.frames)}
        runs: list[list[int]] = []
        for f in flagged[tid]:
            if runs and order[f] == order[runs[-1][-1]] + 1:
                runs[-1].append(f)
            else:
                runs.append([f])
        long_runs = [r for r in runs if len(r) >= cfg.breakdown_min_frames]
        if long_runs:
            score = 1.0 - cfg.avg_mult / ratio[tid]
            events.append(_event(ViolationKind.BREAKDOWN_LANE, t, long_runs[0][0], long_runs[-1][-1], score))
    return events


# -- following distance -------------------------------------------------------


def _center_track(t: TrackRecord) -> Sequence[tuple[int, BBox]]:
    return t.measurements if t.measurements else t.history


def detect_following_distance(
    tracks: Sequence[TrackRecord],
    frame_width: float,
    timestamps: Timestamps,
    cfg: RuleConfig = RuleConfig(),
    stream_start: Optional[int] = None,
) -> list[ViolationEvent]:
    """Edge entrants reaching the lead vehicle's position in under ``follow_seconds``."""
    vehicles = _vehicles(tracks)
    if not vehicles:
        return []
    if stream_start is None:
        stream_start = min(timestamps) if timestamps else min(t.first_frame for t in vehicles)
    margin = cfg.edge_margin * frame_width
    speeds = {t.track_id: speed_series(t, timestamps, cfg) for t in vehicles}
    events = []
    for t in vehicles:
        pts = _center_track(t)
        f0, b0 = pts[0]
        if f0 <= stream_start + cfg.appear_grace:
            continue
        if b0.cx <= margin:
            side = -1  # entered on the left, moves right
        elif b0.cx >= frame_width - margin:
            side = 1
        else:
            continue
        ref_x = None
        for other in vehicles:
            if other.track_id == t.track_id:
                continue
            ob = _box_near(other, f0)
            if ob is None:
                continue
            if side == 1 and ob.cx >= b0.cx or side == -1 and ob.cx <= b0.cx:
                continue
            rate = _value_near(speeds[other.track_id], f0)
            if rate is not None and rate > cfg.oncoming_rate:
                continue
            if ref_x is None or abs(ob.cx - b0.cx) < abs(ref_x - b0.cx):
                ref_x = ob.cx
        if ref_x is None:
            continue
        t0 = _seconds(timestamps, f0)
        for (fa, ba), (fb, bb) in zip(pts, pts[1:]):
            da = (ba.cx - ref_x) * side
            db = (bb.cx - ref_x) * side
            if da > 0 and db <= 0:
                ta, tb = _seconds(timestamps, fa), _seconds(timestamps, fb)
                t_cross = ta + (tb - ta) * da / (da - db)
                elapsed = t_cross - t0
                if elapsed < cfg.follow_seconds:
                    events.append(
                        _event(ViolationKind.FOLLOWING_DISTANCE, t, f0, fb, 1.0 - elapsed / cfg.follow_seconds)
                    )
                break
    return events


def _box_near(t: TrackRecord, f: int, tol: int = 2) -> Optional[BBox]:
    best = None
    for fi, b in t.history:
        d = abs(fi - f)
        if d <= tol and (best is None or d < best[0]):
            best = (d, b)
    return None if best is None else best[1]


def _value_near(series: Mapping[int, float], f: int, tol: int = 2) -> Optional[float]:
    for d in range(tol + 1):
        for g in (f - d, f + d):
            if g in series:
                return series[g]
    return None


# -- pedestrian crossing -------------------------------------------------------


def _sign_box_at(sign: TrackRecord, boxes: Mapping[int, BBox], f: int, hold: int = 3) -> Optional[BBox]:
    for d in range(hold + 1):
        if f - d in boxes:
            return boxes[f - d]
    return None


def detect_pedestrian_crossing(
    tracks: Sequence[TrackRecord],
    sign_tracks: Sequence[TrackRecord],
    timestamps: Timestamps,
    cfg: RuleConfig = RuleConfig(),
) -> list[ViolationEvent]:
    """Vehicles passing a crosswalk sign without stopping while a pedestrian waits there."""
    signs = [s for s in sign_tracks if s.label is ClassLabel.CROSSWALK_SIGN]
    people = [t for t in tracks if t.label is ClassLabel.PERSON]
    if not signs or not people:
        return []
    events: dict[int, ViolationEvent] = {}
    for sign in signs:
        sboxes = sign.boxes()
        near_frames: list[int] = []
        for p in people:
            frames = []
            for f, pb in p.history:
                sb = _sign_box_at(sign, sboxes, f)
                if sb is not None and box_gap(pb, sb) <= cfg.proximity_r * sb.w:
                    frames.append(f)
            if len(frames) >= cfg.wait_frames:
                near_frames.extend(frames)
        if not near_frames:
            continue
        near = sorted(set(near_frames))
        for v in _vehicles(tracks):
            if v.track_id in events:
                continue
            inside, sides = [], []
            for f, vb in v.history:
                sb = _sign_box_at(sign, sboxes, f)
                if sb is None:
                    continue
                lo = sb.x - cfg.band_pad * sb.w
                hi = sb.x2 + cfg.band_pad * sb.w
                if lo <= vb.cx <= hi:
                    inside.append(f)
                else:
                    sides.append((f, -1 if vb.cx < lo else 1))
            if not inside:
                continue
            start, end = inside[0], inside[-1]
            before = [s for f, s in sides if f < start]
            after = [s for f, s in sides if f > end]
            # must enter from one side and leave on the other
            if not before or not after or before[-1] == after[0]:
                continue
            if not any(start - cfg.wait_frames <= f <= end for f in near):
                continue
            speed = speed_series(v, timestamps, cfg)
            run, stopped = 0, False
            for f in inside:
                r = speed.get(f)
                run = run + 1 if r is not None and abs(r) <= cfg.stop_eps else 0
                if run >= cfg.stop_frames:
                    stopped = True
                    break
            if stopped:
                continue
            in_rates = [abs(speed[f]) for f in inside if f in speed]
            score = 1.0 - cfg.stop_eps / max(min(in_rates), cfg.stop_eps) if in_rates else 0.5
            events[v.track_id] = _event(ViolationKind.PEDESTRIAN_CROSSING, v, start, end, score)
    return [events[k] for k in sorted(events)]


# -- parking -------------------------------------------------------------------


def _ego_motion(sign: TrackRecord, min_px: float) -> bool:
    (_, a), (_, b) = sign.history[0], sign.history[-1]
    return math.hypot(b.cx - a.cx, b.cy - a.cy) >= min_px


def static_world_consistency(vehicle: TrackRecord, sign: TrackRecord, frame_width: Optional[float] = None):
    """Cosine similarity of per-frame horizontal displacement of ``vehicle`` and ``sign``.

    Only frames where both boxes are known on consecutive frames count.
    When ``frame_width`` is given, only steps with the vehicle in the same
    vertical half of the frame as the sign are kept.  Returns
    ``(similarity, steps, frames)``.
    """
    vb, sb = vehicle.boxes(), sign.boxes()
    sign_right = None
    if frame_width is not None:
        sign_right = float(np.median([b.cx for _, b in sign.history])) >= frame_width / 2.0
    dv, ds, frames = [], [], []
    for f in sorted(set(vb) & set(sb)):
        if f - 1 not in vb or f - 1 not in sb:
            continue
        if sign_right is not None and (vb[f].cx >= frame_width / 2.0) != sign_right:
            continue
        dv.append(vb[f].cx - vb[f - 1].cx)
        ds.append(sb[f].cx - sb[f - 1].cx)
        frames.append(f)
    if not frames:
        return 0.0, 0, frames
    v, s = np.asarray(dv), np.asarray(ds)
    denom = float(np.linalg.norm(v) * np.linalg.norm(s))
    sim = float(v @ s / denom) if denom > 0 else 0.0
    return sim, len(frames), frames


def _parking(
    kind: ViolationKind,
    sign_label: ClassLabel,
    tracks: Sequence[TrackRecord],
    sign_tracks: Sequence[TrackRecord],
    frame_width: float,
    cfg: RuleConfig,
    max_gap_widths: Optional[float],
) -> list[ViolationEvent]:
    signs = [s for s in sign_tracks if s.label is sign_label and len(s.history) > 1]
    signs = [s for s in signs if _ego_motion(s, cfg.ego_motion_px)]
    events: dict[int, ViolationEvent] = {}
    for sign in signs:
        for v in _vehicles(tracks):
            if v.track_id in events:
                continue
            sim, steps, frames = static_world_consistency(v, sign, frame_width)
            if steps < cfg.park_frames or sim < cfg.static_corr:
                continue
            # an image-static vehicle's filtered track drifts coherently; demand real displacement
            vb = v.boxes()
            if abs(vb[frames[-1]].cx - vb[frames[0] - 1].cx) < cfg.ego_motion_px:
                continue
            if max_gap_widths is not None:
                vboxes, sboxes = v.boxes(), sign.boxes()
                gaps = [box_gap(vboxes[f], sboxes[f]) / sboxes[f].w for f in frames]
                if float(np.median(gaps)) > max_gap_widths:
                    continue
            score = (sim - cfg.static_corr) / (1.0 - cfg.static_corr) if cfg.static_corr < 1 else 1.0
            events[v.track_id] = _event(kind, v, frames[0], frames[-1], 0.5 + 0.5 * score)
    return [events[k] for k in sorted(events)]


def detect_illegal_parking(
    tracks: Sequence[TrackRecord],
    sign_tracks: Sequence[TrackRecord],
    frame_width: float,
    cfg: RuleConfig = RuleConfig(),
) -> list[ViolationEvent]:
    """Vehicles on the no-stopping sign's half of the frame that move with the static world."""
    return _parking(
        ViolationKind.ILLEGAL_PARKING, ClassLabel.NO_STOPPING_SIGN, tracks, sign_tracks, frame_width, cfg, None
    )


def detect_crosswalk_parking(
    tracks: Sequence[TrackRecord],
    sign_tracks: Sequence[TrackRecord],
    frame_width: float,
    cfg: RuleConfig = RuleConfig(),
) -> list[ViolationEvent]:
    """Static-world-consistent vehicles within ``crosswalk_r`` sign widths of a crosswalk sign."""
    return _parking(
        ViolationKind.CROSSWALK_PARKING,
        ClassLabel.CROSSWALK_SIGN,
        tracks,
        sign_tracks,
        frame_width,
        cfg,
        cfg.crosswalk_r,
    )


def format_event(ev: ViolationEvent) -> str:
    return f"{ev.kind.value}\t{ev.track_id}\t{ev.frame_range[0]}\t{ev.frame_range[1]}\t{ev.score:.4f}"


def parse_event_lines(lines: Iterable[str]) -> list[tuple[str, int, int, int, float]]:
    out = []
    for raw in lines:
        line = raw.strip("\r\n")
        if not line or line.startswith("#"):
            continue
        kind, tid, start, end, score = line.split("\t")
        out.append((kind, int(tid), int(start), int(end), float(score)))
    return out

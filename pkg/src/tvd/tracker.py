"""SORT-style tracking-by-detection: Kalman prediction plus Hungarian association."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .assignment import SENTINEL, Assignment, hungarian
from .ingest import BBox, ClassLabel, Detection, FrameStream, IngestError, iou
from .kalman import KalmanConfig, KalmanState, kalman_init, kalman_predict, kalman_update


class TrackStatus(Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DELETED = "deleted"


AppearanceCost = Callable[["Track", Detection], float]


@dataclass(frozen=True)
class TrackerConfig:
    iou_gate: float = 0.3
    confirm_hits: int = 3
    max_age: int = 30
    # consecutive misses a tentative track survives (a dropped detection at birth)
    tentative_max_misses: int = 1
    # cost = w * (1 - iou) + (1 - w) * appearance; 1.0 means IoU only
    appearance_weight: float = 1.0
    sentinel: float = SENTINEL
    kalman: KalmanConfig = field(default_factory=KalmanConfig)


@dataclass
class Track:
    id: int
    label: ClassLabel
    state: KalmanState
    status: TrackStatus = TrackStatus.TENTATIVE
    hits: int = 1
    misses: int = 0
    history: list[tuple[int, BBox]] = field(default_factory=list)
    measurements: list[tuple[int, BBox]] = field(default_factory=list)
    ever_confirmed: bool = False

    @property
    def predicted_bbox(self) -> BBox:
        return self.state.bbox


@dataclass(frozen=True)
class TrackSnapshot:
    track_id: int
    label: ClassLabel
    frame_index: int
    bbox: BBox
    status: TrackStatus


@dataclass(frozen=True)
class TrackRecord:
    """Full trajectory of one track, the input unit of the rule engines.

    ``history`` holds filtered boxes and ``measurements`` the matched
    detector boxes, both keyed by frame index in increasing order.
    """

    track_id: int
    label: ClassLabel
    history: tuple[tuple[int, BBox], ...]
    measurements: tuple[tuple[int, BBox], ...] = ()

    @property
    def frames(self) -> list[int]:
        return [f for f, _ in self.history]

    @property
    def first_frame(self) -> int:
        return self.history[0][0]

    @property
    def last_frame(self) -> int:
        return self.history[-1][0]

    def box_at(self, frame_index: int) -> Optional[BBox]:
        for f, b in self.history:
            if f == frame_index:
                return b
        return None

    def boxes(self) -> dict[int, BBox]:
        return dict(self.history)


def associate(
    tracks: Sequence[Track],
    detections: Sequence[Detection],
    iou_gate: float = 0.3,
    appearance_weight: float = 1.0,
    appearance_cost: Optional[AppearanceCost] = None,
    sentinel: float = SENTINEL,
) -> Assignment:
    """Gate-and-assign detections to tracks, solving each class label separately."""
    matches: list[tuple[int, int]] = []
    labels = sorted({t.label for t in tracks} | {d.label for d in detections}, key=lambda l: l.value)
    for label in labels:
        ti = [i for i, t in enumerate(tracks) if t.label is label]
        di = [j for j, d in enumerate(detections) if d.label is label]
        if not ti or not di:
            continue
        cost = np.full((len(ti), len(di)), sentinel)
        for a, i in enumerate(ti):
            pred = tracks[i].predicted_bbox
            for b, j in enumerate(di):
                overlap = iou(pred, detections[j].bbox)
                if overlap < iou_gate:
                    continue
                c = appearance_weight * (1.0 - overlap)
                if appearance_weight < 1.0 and appearance_cost is not None:
                    c += (1.0 - appearance_weight) * appearance_cost(tracks[i], detections[j])
                cost[a, b] = c
        result = hungarian(cost, sentinel=sentinel)
        matches.extend((ti[a], di[b]) for a, b in result.matches)
    matches.sort()
    mt = {i for i, _ in matches}
    md = {j for _, j in matches}
    return Assignment(
        matches=matches,
        unmatched_tracks=[i for i in range(len(tracks)) if i not in mt],
        unmatched_detections=[j for j in range(len(detections)) if j not in md],
    )


class Tracker:
    """Multi-object tracker; feed frames in increasing frame_index order.

    Tentative tracks are dropped on their first miss; confirmed tracks are
    dropped once ``misses > max_age``.  Track ids are never reused.
    """

    def __init__(
        self, config: TrackerConfig = TrackerConfig(), appearance_cost: Optional[AppearanceCost] = None
    ):
        self.config = config
        self.appearance_cost = appearance_cost
        self.tracks: list[Track] = []
        self.retired: list[Track] = []
        self.next_id = 1
        self.last_frame: Optional[int] = None

    def step(self, frame_index: int, detections: Sequence[Detection], dt: float) -> list[TrackSnapshot]:
        if self.last_frame is not None and frame_index <= self.last_frame:
            raise IngestError(f"frame {frame_index} arrived after frame {self.last_frame}")
        self.last_frame = frame_index
        cfg = self.config

        for t in self.tracks:
            t.state = kalman_predict(t.state, dt, cfg.kalman)

        result = associate(
            self.tracks,
            detections,
            iou_gate=cfg.iou_gate,
            appearance_weight=cfg.appearance_weight,
            appearance_cost=self.appearance_cost,
            sentinel=cfg.sentinel,
        )
        for i, j in result.matches:
            t, det = self.tracks[i], detections[j]
            t.state = kalman_update(t.state, det.bbox, cfg.kalman)
            t.hits += 1
            t.misses = 0
            t.history.append((frame_index, t.state.bbox))
            t.measurements.append((frame_index, det.bbox))
            if t.status is TrackStatus.TENTATIVE and t.hits >= cfg.confirm_hits:
                t.status = TrackStatus.CONFIRMED
                t.ever_confirmed = True
        for i in result.unmatched_tracks:
            t = self.tracks[i]
            t.misses += 1
            limit = cfg.tentative_max_misses if t.status is TrackStatus.TENTATIVE else cfg.max_age
            if t.misses > limit:
                t.status = TrackStatus.DELETED
        for j in result.unmatched_detections:
            det = detections[j]
            t = Track(
                id=self.next_id,
                label=det.label,
                state=kalman_init(det.bbox, cfg.kalman),
                status=TrackStatus.CONFIRMED if cfg.confirm_hits <= 1 else TrackStatus.TENTATIVE,
            )
            t.ever_confirmed = t.status is TrackStatus.CONFIRMED
            t.history.append((frame_index, det.bbox))
            t.measurements.append((frame_index, det.bbox))
            self.next_id += 1
            self.tracks.append(t)

        alive = []
        for t in self.tracks:
            (self.retired if t.status is TrackStatus.DELETED else alive).append(t)
        self.tracks = alive

        return [
            TrackSnapshot(t.id, t.label, frame_index, t.history[-1][1], t.status)
            for t in self.tracks
            if t.status is TrackStatus.CONFIRMED and t.misses == 0
        ]

    def records(self) -> list[TrackRecord]:
        """Trajectories of every track that ever reached Confirmed, ordered by id."""
        out = [
            TrackRecord(t.id, t.label, tuple(t.history), tuple(t.measurements))
            for t in self.retired + self.tracks
            if t.ever_confirmed
        ]
        return sorted(out, key=lambda r: r.track_id)


def run_tracker(
    stream: FrameStream,
    config: TrackerConfig = TrackerConfig(),
    labels: Optional[Iterable[ClassLabel]] = None,
) -> tuple[list[TrackSnapshot], list[TrackRecord]]:
    """Track a whole stream; returns per-frame confirmed snapshots and final records."""
    keep = set(labels) if labels is not None else None
    tracker = Tracker(config)
    snapshots: list[TrackSnapshot] = []
    if not stream.frames:
        return snapshots, []
    by_frame = dict(stream.frames)
    clock = frame_clock(stream)
    first, last = stream.frames[0][0], stream.frames[-1][0]
    for frame_index in range(first, last + 1):
        dets = by_frame.get(frame_index, [])
        if frame_index == first:
            dt = 1.0 / stream.fps
        else:
            dt = max((clock[frame_index] - clock[frame_index - 1]) / 1000.0, 1e-3)
        if keep is not None:
            dets = [d for d in dets if d.label in keep]
        snapshots.extend(tracker.step(frame_index, dets, dt))
    return snapshots, tracker.records()


def frame_clock(stream: FrameStream) -> dict[int, float]:
    """Timestamp (ms) for every frame index between the first and last frame.

    Frames without detections are interpolated from the neighbouring known
    timestamps (or extrapolated with ``fps`` at the ends).
    """
    known = stream.timestamps()
    if not known:
        return {}
    idx = sorted(known)
    out: dict[int, float] = {}
    for a, b in zip(idx, idx[1:]):
        ta, tb = known[a], known[b]
        for f in range(a, b):
            out[f] = ta + (tb - ta) * (f - a) / (b - a)
    out[idx[-1]] = float(known[idx[-1]])
    return out


def format_snapshot(s: TrackSnapshot) -> str:
    b = s.bbox
    return (
        f"{s.frame_index}\t{s.track_id}\t{s.label.value}\t"
        f"{b.x:.3f}\t{b.y:.3f}\t{b.w:.3f}\t{b.h:.3f}\t{s.status.value}"
    )


def parse_track_lines(lines: Iterable[str]) -> list[TrackSnapshot]:
    out = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip("\r\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 8:
            raise ValueError(f"line {lineno}: expected 8 fields, got {len(parts)}")
        out.append(
            TrackSnapshot(
                track_id=int(parts[1]),
                label=ClassLabel.parse(parts[2]),
                frame_index=int(parts[0]),
                bbox=BBox(*(float(p) for p in parts[3:7])),
                status=TrackStatus(parts[7]),
            )
        )
    return out

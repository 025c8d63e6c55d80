"""Detection data model and detection-stream / frame-image loading."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import cv2
import numpy as np


class IngestError(ValueError):
    """Base class for malformed detection input."""


class ParseError(IngestError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


class VocabularyError(ParseError):
    pass


class OrderingError(IngestError):
    pass


class DegenerateBoxError(IngestError):
    pass


class ClassLabel(Enum):
    CAR = "car"
    MOTORCYCLE = "motorcycle"
    BUS = "bus"
    TRUCK = "truck"
    PERSON = "person"
    TRAFFIC_LIGHT = "traffic_light"
    NO_STOPPING_SIGN = "no_stopping_sign"
    CROSSWALK_SIGN = "crosswalk_sign"

    @classmethod
    def parse(cls, token: str) -> "ClassLabel":
        try:
            return cls(token)
        except ValueError:
            raise ValueError(f"unknown class label {token!r}") from None

    @property
    def is_vehicle(self) -> bool:
        return self in VEHICLE_LABELS


VEHICLE_LABELS = frozenset(
    {ClassLabel.CAR, ClassLabel.MOTORCYCLE, ClassLabel.BUS, ClassLabel.TRUCK}
)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous pixel coordinates (top-left origin)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.x, self.y, self.w, self.h):
            if not math.isfinite(v):
                raise DegenerateBoxError(f"non-finite box coordinate in {self}")
        if self.w <= 0 or self.h <= 0:
            raise DegenerateBoxError(f"box must have positive size, got w={self.w} h={self.h}")

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls(x1, y1, x2 - x1, y2 - y1)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class Detection:
    frame_index: int
    timestamp_ms: int
    label: ClassLabel
    bbox: BBox
    confidence: float

    def __post_init__(self):
        if self.frame_index < 0:
            raise IngestError(f"negative frame_index {self.frame_index}")
        if self.timestamp_ms < 0:
            raise IngestError(f"negative timestamp {self.timestamp_ms}")
        if not 0.0 <= self.confidence <= 1.0:
            raise IngestError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class FrameStream:
    fps: float
    frame_dims: tuple[int, int]
    frames: list[tuple[int, list[Detection]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def detections(self) -> Iterable[Detection]:
        for _, dets in self.frames:
            yield from dets

    def timestamps(self) -> dict[int, int]:
        """Frame index -> timestamp in ms, for frames that carry detections."""
        return {idx: dets[0].timestamp_ms for idx, dets in self.frames if dets}


def validate_bbox(b: BBox, frame_dims: tuple[int, int]) -> BBox:
    """Clamp ``b`` to the frame rectangle; reject boxes left with no area."""
    width, height = frame_dims
    if width <= 0 or height <= 0:
        raise ValueError(f"frame dims must be positive, got {frame_dims}")
    x1 = min(max(b.x, 0.0), float(width))
    y1 = min(max(b.y, 0.0), float(height))
    x2 = min(max(b.x2, 0.0), float(width))
    y2 = min(max(b.y2, 0.0), float(height))
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise DegenerateBoxError(f"box {b.as_tuple()} has no area inside {width}x{height}")
    if (x1, y1, x2, y2) == (b.x, b.y, b.x2, b.y2):
        return b
    return BBox.from_xyxy(x1, y1, x2, y2)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


_N_FIELDS = 8


def _parse_number(token: str, lineno: int, name: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(lineno, f"{name} is not a number: {token!r}") from None
    if not math.isfinite(value):
        raise ParseError(lineno, f"{name} is not finite: {token!r}")
    return value


def parse_detection_stream(
    lines: str | Iterable[str], fps: float, frame_dims: tuple[int, int]
) -> FrameStream:
    """Parse tab-separated detection records into a frame-grouped stream.

    Record layout: ``frame_index timestamp_ms label x y w h confidence``.
    Blank lines and lines starting with ``#`` are skipped.  An empty
    timestamp field (or ``-``) is filled from ``fps``.
    """
    if fps <= 0:
        raise ValueError("fps must be positive")
    if isinstance(lines, str):
        lines = lines.splitlines()

    grouped: dict[int, list[Detection]] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != _N_FIELDS:
            raise ParseError(lineno, f"expected {_N_FIELDS} tab-separated fields, got {len(parts)}")
        try:
            frame_index = int(parts[0])
        except ValueError:
            raise ParseError(lineno, f"frame_index is not an integer: {parts[0]!r}") from None
        if frame_index < 0:
            raise ParseError(lineno, "frame_index must be >= 0")
        ts_token = parts[1].strip()
        if ts_token in ("", "-"):
            timestamp_ms = int(round(frame_index * 1000.0 / fps))
        else:
            try:
                timestamp_ms = int(ts_token)
            except ValueError:
                raise ParseError(lineno, f"timestamp_ms is not an integer: {ts_token!r}") from None
            if timestamp_ms < 0:
                raise ParseError(lineno, "timestamp_ms must be >= 0")
        try:
            label = ClassLabel.parse(parts[2])
        except ValueError as exc:
            raise VocabularyError(lineno, str(exc)) from None
        x, y, w, h = (_parse_number(t, lineno, n) for t, n in zip(parts[3:7], "xywh"))
        conf = _parse_number(parts[7], lineno, "confidence")
        if not 0.0 <= conf <= 1.0:
            raise ParseError(lineno, f"confidence {conf} outside [0, 1]")
        try:
            box = validate_bbox(BBox(x, y, w, h), frame_dims)
        except DegenerateBoxError as exc:
            raise ParseError(lineno, str(exc)) from None
        det = Detection(frame_index, timestamp_ms, label, box, conf)
        grouped.setdefault(frame_index, []).append(det)

    frames = sorted(grouped.items())
    prev_max: Optional[int] = None
    prev_idx: Optional[int] = None
    for idx, dets in frames:
        ts = [d.timestamp_ms for d in dets]
        if prev_max is not None and min(ts) < prev_max:
            raise OrderingError(
                f"timestamp decreases between frame {prev_idx} and frame {idx}"
            )
        prev_max, prev_idx = max(ts), idx
    return FrameStream(fps=fps, frame_dims=tuple(frame_dims), frames=frames)


def format_detection(d: Detection) -> str:
    b = d.bbox
    return "\t".join(
        [
            str(d.frame_index),
            str(d.timestamp_ms),
            d.label.value,
            repr(float(b.x)),
            repr(float(b.y)),
            repr(float(b.w)),
            repr(float(b.h)),
            repr(float(d.confidence)),
        ]
    )


def serialize_detection_stream(stream: FrameStream) -> str:
    return "".join(format_detection(d) + "\n" for d in stream.detections())


def load_detection_stream(path: str | Path, fps: float, frame_dims: tuple[int, int]) -> FrameStream:
    with open(path, encoding="utf-8") as fh:
        return parse_detection_stream(fh, fps, frame_dims)


FRAME_NAME = "frame_{:06d}.png"


def frame_path(frames_dir: str | Path, frame_index: int) -> Path:
    return Path(frames_dir) / FRAME_NAME.format(frame_index)


def load_frame(frames_dir: str | Path, frame_index: int) -> Optional[np.ndarray]:
    """Return the RGB image for ``frame_index`` or None if it is missing."""
    img = cv2.imread(str(frame_path(frames_dir, frame_index)), cv2.IMREAD_COLOR)
    if img is None:
        return None
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def save_frame(frames_dir: str | Path, frame_index: int, rgb: np.ndarray) -> Path:
    path = frame_path(frames_dir, frame_index)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR), [cv2.IMWRITE_PNG_COMPRESSION, 1]):
        raise OSError(f"could not write {path}")
    return path


def crop(image: np.ndarray, b: BBox) -> np.ndarray:
    """Integer-pixel crop of ``b`` from an HxWxC image (clamped to the image)."""
    height, width = image.shape[:2]
    x1 = int(max(0, math.floor(b.x)))
    y1 = int(max(0, math.floor(b.y)))
    x2 = int(min(width, math.ceil(b.x2)))
    y2 = int(min(height, math.ceil(b.y2)))
    return image[y1:y2, x1:x2]

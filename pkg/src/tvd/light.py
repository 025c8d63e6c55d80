"""Traffic-light colour from an RGB crop: split into thirds, normalise, threshold, vote."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .ingest import BBox


class Orientation(Enum):
    VERTICAL = "vertical"
    HORIZONTAL = "horizontal"


class LightColor(Enum):
    RED = "red"
    YELLOW = "yellow"
    GREEN = "green"
    UNKNOWN = "unknown"


class DegenerateCropError(ValueError):
    pass


# lamp order along the split axis: top-to-bottom or left-to-right
LAMP_ORDER = (LightColor.RED, LightColor.YELLOW, LightColor.GREEN)
# RGB channel treated as dominant for each lamp
DOMINANT_CHANNEL = {LightColor.RED: 0, LightColor.YELLOW: 0, LightColor.GREEN: 1}

BINARY_THRESHOLD = 40


@dataclass(frozen=True)
class LightConfig:
    threshold: int = BINARY_THRESHOLD
    min_lit_fraction: float = 0.05
    window: int = 10
    min_valid: int = 6


@dataclass(frozen=True)
class LightObservation:
    frame_index: int
    color: LightColor
    white_counts: tuple[int, int, int]


def orientation(b: BBox) -> Orientation:
    return Orientation.VERTICAL if b.h >= b.w else Orientation.HORIZONTAL


def split_light(crop: np.ndarray, o: Orientation) -> list[np.ndarray]:
    """Three contiguous pieces along the lamp axis; the last piece takes the remainder."""
    axis = 0 if o is Orientation.VERTICAL else 1
    n = crop.shape[axis]
    if n < 3 or crop.shape[1 - axis] < 1:
        raise DegenerateCropError(f"crop of shape {crop.shape[:2]} too small to split {o.value}ly")
    step = n // 3
    cuts = [0, step, 2 * step, n]
    if axis == 0:
        return [crop[cuts[i] : cuts[i + 1]] for i in range(3)]
    return [crop[:, cuts[i] : cuts[i + 1]] for i in range(3)]


def normalize_split(piece: np.ndarray, dominant: int) -> np.ndarray:
    """Grayscale image in which pixels dominated by ``dominant`` stay bright.

    Non-dominant channels are replaced by their ratio to the dominant
    channel (guarded at 1, clamped to [0, 1]); the dominant channel keeps
    its intensity.  The grayscale value is the channel mean.
    """
    px = piece.astype(np.float64)
    dom = np.maximum(px[..., dominant], 1.0)
    out = np.empty_like(px)
    for c in range(3):
        if c == dominant:
            out[..., c] = px[..., c]
        else:
            out[..., c] = np.minimum(px[..., c] / dom, 1.0)
    return out.mean(axis=-1)


def classify_light_frame(
    crop: np.ndarray, o: Orientation, frame_index: int = 0, cfg: LightConfig = LightConfig()
) -> LightObservation:
    pieces = split_light(crop, o)
    counts = []
    fractions = []
    for piece, lamp in zip(pieces, LAMP_ORDER):
        gray = normalize_split(piece[..., :3], DOMINANT_CHANNEL[lamp])
        white = int(np.count_nonzero(gray > cfg.threshold))
        counts.append(white)
        fractions.append(white / float(gray.size))
    best = max(counts)
    winners = [i for i, c in enumerate(counts) if c == best]
    if len(winners) != 1 or fractions[winners[0]] < cfg.min_lit_fraction:
        color = LightColor.UNKNOWN
    else:
        color = LAMP_ORDER[winners[0]]
    return LightObservation(frame_index, color, tuple(counts))


def classify_light_temporal(history: Sequence[LightObservation | LightColor], cfg: LightConfig = LightConfig()) -> LightColor:
    """Plurality colour over the last ``cfg.window`` observations.

    Unknown when fewer than ``cfg.min_valid`` observations carry a colour or
    when the top two colours tie.
    """
    colors = [h.color if isinstance(h, LightObservation) else h for h in history][-cfg.window :]
    valid = [c for c in colors if c is not LightColor.UNKNOWN]
    if len(valid) < cfg.min_valid:
        return LightColor.UNKNOWN
    ranked = Counter(valid).most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return LightColor.UNKNOWN
    return ranked[0][0]


def voted_states(observations: Sequence[LightObservation], cfg: LightConfig = LightConfig()) -> dict[int, LightColor]:
    """Sliding-window vote at every observed frame (trailing window)."""
    out = {}
    for i, obs in enumerate(observations):
        out[obs.frame_index] = classify_light_temporal(observations[max(0, i + 1 - cfg.window) : i + 1], cfg)
    return out

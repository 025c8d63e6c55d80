"""Small builders shared by the test modules."""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import cv2
import numpy as np

from tvd.ingest import BBox, ClassLabel, Detection, FrameStream, iou
from tvd.light import LightColor, Orientation
from tvd.plate import ALPHABET, homography
from tvd.synth import ActorSpec, NoiseSpec, ScenarioSpec, generate_scene
from tvd.tracker import TrackRecord, TrackerConfig, run_tracker

# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def det(f: int, label: ClassLabel, x: float, y: float, w: float, h: float, fps: float = 10.0) -> Detection:
    return Detection(f, int(round(f * 1000 / fps)), label, BBox(x, y, w, h), 0.9)


def stream_of(frames: Mapping[int, Sequence[Detection]], fps: float = 10.0, dims=(960, 540)) -> FrameStream:
    return FrameStream(fps, dims, sorted((f, list(d)) for f, d in frames.items()))


def record(track_id: int, label: ClassLabel, boxes: Mapping[int, BBox]) -> TrackRecord:
    hist = tuple(sorted(boxes.items()))
    return TrackRecord(track_id, label, hist, hist)


def clock(n: int, fps: float = 10.0) -> dict[int, float]:
    return {f: f * 1000.0 / fps for f in range(n)}


def centered(cx: float, cy: float, w: float, h: float) -> BBox:
    return BBox.from_center(cx, cy, w, h)


def parallel_scene(seed: int, noise: NoiseSpec = NoiseSpec(), frames: int = 100, gap: float = 120.0) -> ScenarioSpec:
    """Two cars on parallel, non-crossing straight paths."""
    actors = [
        ActorSpec(1, ClassLabel.CAR, [(0, 150.0, 250.0, 80.0, 60.0), (frames - 1, 750.0, 270.0, 80.0, 60.0)]),
        ActorSpec(
            2, ClassLabel.CAR, [(0, 150.0, 250.0 + gap, 80.0, 60.0), (frames - 1, 750.0, 270.0 + gap, 80.0, 60.0)]
        ),
    ]
    return ScenarioSpec(f"parallel_{seed}", seed, actors, duration_frames=frames, noise=noise, render=False)


def id_switches(spec: ScenarioSpec, config: TrackerConfig = TrackerConfig()) -> tuple[int, bool]:
    """(switch count, every actor tracked to the last frame) for one generated scene.

    Each confirmed snapshot is attributed to the ground-truth actor it
    overlaps most; a switch is a change of track id along one actor's
    sequence of attributed snapshots.
    """
    scene = generate_scene(spec)
    snapshots, _ = run_tracker(scene.stream, config)
    truth = scene.ground_truth.boxes
    ids: dict[int, list[int]] = {a: [] for a in truth}
    for s in snapshots:
        best = max(truth, key=lambda a: iou(truth[a].get(s.frame_index, BBox(-9, -9, 1, 1)), s.bbox))
        if iou(truth[best].get(s.frame_index, BBox(-9, -9, 1, 1)), s.bbox) >= 0.3:
            ids[best].append(s.track_id)
    switches = sum(sum(1 for a, b in zip(seq, seq[1:]) if a != b) for seq in ids.values())
    last = spec.duration_frames - 1
    tracked_to_end = all(
        any(s.frame_index >= last - 2 and s.track_id == seq[-1] for s in snapshots) for seq in ids.values() if seq
    ) and all(ids.values())
    return switches, tracked_to_end


# -- traffic light crops

LIT = {LightColor.RED: (255, 30, 20), LightColor.YELLOW: (255, 200, 0), LightColor.GREEN: (30, 255, 120)}
LAMP_ORDER = (LightColor.RED, LightColor.YELLOW, LightColor.GREEN)


def light_crop(o: Orientation, lit: Optional[int], brightness: float = 1.0, lamp: int = 14, rng=None) -> np.ndarray:
    """Housing with three round lamps; ``lit`` in (0, 1, 2) or None for all dark."""
    cell = lamp + 8
    hh, ww = (3 * cell, cell) if o is Orientation.VERTICAL else (cell, 3 * cell)
    img = np.full((hh, ww, 3), 35, np.float64)
    yy, xx = np.mgrid[0:hh, 0:ww]
    for i in range(3):
        cy, cx = ((i + 0.5) * cell, cell / 2) if o is Orientation.VERTICAL else (cell / 2, (i + 0.5) * cell)
        disk = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= (lamp / 2) ** 2
        img[disk] = LIT[LAMP_ORDER[i]] if i == lit else (48, 48, 48)
    if rng is not None:
        img += rng.normal(0, 2.0, img.shape)
    return np.clip(img * brightness, 0, 255).astype(np.uint8)


# -- plates

# homographies tested by the round trip stay below this condition number once both
# plate and quad are normalised to the unit square
ROUND_TRIP_COND_CAP = 3.0


def _shift(d):
    t = np.eye(3)
    t[0, 2] = t[1, 2] = d
    return t


def normalised_cond(h, w, hh, pts):
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    q = np.array([[1 / span[0], 0, -lo[0] / span[0]], [0, 1 / span[1], -lo[1] / span[1]], [0, 0, 1]])
    hn = q @ h @ np.diag([w, hh, 1.0])
    return float(np.linalg.cond(hn / hn[2, 2]))


def warp_into_canvas(plate, dst):
    """Forward-warp ``plate`` so its corners land on ``dst`` using OpenCV (independent of our sampler)."""
    hh, w = plate.shape[:2]
    src = np.array([[0, 0], [w, 0], [w, hh], [0, hh]], float)
    h = homography(src, dst)
    # OpenCV puts pixel centres on integers; ours sit at +0.5
    m = _shift(-0.5) @ h @ _shift(0.5)
    size = (int(dst[:, 0].max()) + 20, int(dst[:, 1].max()) + 20)
    canvas = cv2.warpPerspective(plate, m, size, flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    return canvas, h


def random_text(rng, lo=5, hi=8):
    return "".join(rng.choice(list(ALPHABET), int(rng.integers(lo, hi + 1))))

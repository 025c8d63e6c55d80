"""Deterministic synthetic scenes: detection streams, rendered frames, plate quads, ground truth.

A scene is a set of scripted actors.  Each actor follows waypoints
``(frame, cx, cy, w, h)``: centres interpolate linearly, sizes
geometrically.  Detections are the visible (frame-clamped) boxes plus
Gaussian jitter and random dropout, all drawn from one Philox generator
seeded by the scenario.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Optional, Sequence

import cv2
import numpy as np
import yaml

from .ingest import (
    BBox,
    ClassLabel,
    DegenerateBoxError,
    Detection,
    FrameStream,
    save_frame,
    serialize_detection_stream,
    validate_bbox,
)
from .light import LightColor
from .plate import Quad, format_quad, render_plate
from .tracker import TrackRecord
from .violations import RuleConfig, ViolationEvent, ViolationKind

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    def __init__(self, fld: str, msg: str):
        super().__init__(f"{fld}: {msg}")
        self.field = fld


@dataclass(frozen=True)
class NoiseSpec:
    center_px: float = 1.0
    size_frac: float = 0.02
    dropout: float = 0.02


NOISELESS = NoiseSpec(0.0, 0.0, 0.0)


@dataclass
class ActorSpec:
    id: int
    label: ClassLabel
    waypoints: list[tuple[int, float, float, float, float]]
    plate: Optional[str] = None
    plate_skew: float = 0.0
    color: Optional[tuple[int, int, int]] = None
    light_script: list[tuple[int, LightColor]] = field(default_factory=list)

    @property
    def first_frame(self) -> int:
        return self.waypoints[0][0]

    @property
    def last_frame(self) -> int:
        return self.waypoints[-1][0]

    def box_at(self, f: int) -> Optional[BBox]:
        """Unclamped scripted box at frame ``f`` (None outside the script)."""
        wps = self.waypoints
        if f < wps[0][0] or f > wps[-1][0]:
            return None
        for a, b in zip(wps, wps[1:] or wps):
            if a[0] <= f <= b[0]:
                t = 0.0 if b[0] == a[0] else (f - a[0]) / (b[0] - a[0])
                cx = a[1] + t * (b[1] - a[1])
                cy = a[2] + t * (b[2] - a[2])
                w = a[3] * (b[3] / a[3]) ** t
                h = a[4] * (b[4] / a[4]) ** t
                return BBox.from_center(cx, cy, w, h)
        return None

    def light_at(self, f: int) -> LightColor:
        color = LightColor.UNKNOWN
        for start, c in self.light_script:
            if start <= f:
                color = c
        return color


@dataclass(frozen=True)
class PlantedViolation:
    kind: ViolationKind
    actor: int
    frame_range: tuple[int, int]


@dataclass
class ScenarioSpec:
    name: str
    seed: int
    actors: list[ActorSpec]
    fps: float = 10.0
    frame_dims: tuple[int, int] = (960, 540)
    duration_frames: int = 100
    noise: NoiseSpec = NoiseSpec()
    planted_violations: list[PlantedViolation] = field(default_factory=list)
    min_visible: float = 0.25
    render: bool = True
    description: str = ""

    def actor(self, actor_id: int) -> ActorSpec:
        for a in self.actors:
            if a.id == actor_id:
                return a
        raise KeyError(actor_id)


# -- spec validation and YAML I/O --------------------------------------------------


def validate_spec(spec: ScenarioSpec) -> None:
    if not isinstance(spec.seed, int) or not 0 <= spec.seed < 2**64:
        raise ScenarioError("seed", "must be an integer in [0, 2^64)")
    if spec.fps <= 0:
        raise ScenarioError("fps", "must be positive")
    if len(spec.frame_dims) != 2 or min(spec.frame_dims) <= 0:
        raise ScenarioError("frame_dims", "must be two positive integers")
    if spec.duration_frames <= 0:
        raise ScenarioError("duration_frames", "must be positive")
    n = spec.noise
    if n.center_px < 0 or n.size_frac < 0 or not 0 <= n.dropout < 1:
        raise ScenarioError("noise", "needs center_px >= 0, size_frac >= 0, 0 <= dropout < 1")
    if not 0 < spec.min_visible <= 1:
        raise ScenarioError("min_visible", "must lie in (0, 1]")
    seen = set()
    for i, a in enumerate(spec.actors):
        where = f"actors[{i}]"
        if a.id in seen:
            raise ScenarioError(f"{where}.id", f"duplicate actor id {a.id}")
        seen.add(a.id)
        if not a.waypoints:
            raise ScenarioError(f"{where}.waypoints", "at least one waypoint required")
        prev = None
        for j, wp in enumerate(a.waypoints):
            if len(wp) != 5:
                raise ScenarioError(f"{where}.waypoints[{j}]", "expected [frame, cx, cy, w, h]")
            f, cx, cy, w, h = wp
            if not all(math.isfinite(v) for v in (cx, cy, w, h)) or w <= 0 or h <= 0:
                raise ScenarioError(f"{where}.waypoints[{j}]", "needs finite centre and positive size")
            if prev is not None and f <= prev:
                raise ScenarioError(f"{where}.waypoints[{j}]", "frames must increase")
            if not 0 <= f < spec.duration_frames:
                raise ScenarioError(f"{where}.waypoints[{j}]", "frame outside the scene")
            prev = f
        if a.plate is not None and not all(c.isascii() and c.isalnum() and not c.islower() for c in a.plate):
            raise ScenarioError(f"{where}.plate", "plate text must be A-Z / 0-9")
        if a.light_script and a.label is not ClassLabel.TRAFFIC_LIGHT:
            raise ScenarioError(f"{where}.light_script", "only traffic lights carry a light script")
    for i, pv in enumerate(spec.planted_violations):
        if pv.actor not in seen:
            raise ScenarioError(f"planted_violations[{i}].actor", f"unknown actor {pv.actor}")
        if pv.frame_range[0] > pv.frame_range[1]:
            raise ScenarioError(f"planted_violations[{i}].frame_range", "start after end")


def spec_to_dict(spec: ScenarioSpec) -> dict:
    return {
        "name": spec.name,
        "seed": spec.seed,
        "fps": spec.fps,
        "frame_dims": list(spec.frame_dims),
        "duration_frames": spec.duration_frames,
        "min_visible": spec.min_visible,
        "render": spec.render,
        "description": spec.description,
        "noise": dataclasses.asdict(spec.noise),
        "actors": [
            {
                "id": a.id,
                "label": a.label.value,
                "waypoints": [[int(w[0])] + [round(float(v), 4) for v in w[1:]] for w in a.waypoints],
                **({"plate": a.plate, "plate_skew": a.plate_skew} if a.plate else {}),
                **({"color": list(a.color)} if a.color else {}),
                **({"light_script": [[f, c.value] for f, c in a.light_script]} if a.light_script else {}),
            }
            for a in spec.actors
        ],
        "planted_violations": [
            {"kind": p.kind.value, "actor": p.actor, "frame_range": list(p.frame_range)}
            for p in spec.planted_violations
        ],
    }


def _req(d: Mapping, key: str, where: str):
    if key not in d:
        raise ScenarioError(f"{where}{key}", "missing")
    return d[key]


def spec_from_dict(d: Mapping[str, Any]) -> ScenarioSpec:
    if not isinstance(d, Mapping):
        raise ScenarioError("<root>", "scenario must be a mapping")
    actors = []
    for i, a in enumerate(_req(d, "actors", "") or []):
        where = f"actors[{i}]."
        try:
            label = ClassLabel.parse(str(_req(a, "label", where)))
        except ValueError as exc:
            raise ScenarioError(f"{where}label", str(exc)) from exc
        try:
            wps = [(int(w[0]), *(float(v) for v in w[1:])) for w in _req(a, "waypoints", where)]
            script = [(int(f), LightColor(str(c).lower())) for f, c in a.get("light_script", [])]
        except (TypeError, ValueError, IndexError) as exc:
            raise ScenarioError(f"{where}waypoints", f"malformed: {exc}") from exc
        actors.append(
            ActorSpec(
                id=int(_req(a, "id", where)),
                label=label,
                waypoints=wps,
                plate=a.get("plate"),
                plate_skew=float(a.get("plate_skew", 0.0)),
                color=tuple(a["color"]) if a.get("color") else None,
                light_script=script,
            )
        )
    planted = []
    for i, p in enumerate(d.get("planted_violations", []) or []):
        where = f"planted_violations[{i}]."
        try:
            kind = ViolationKind(str(_req(p, "kind", where)))
        except ValueError as exc:
            raise ScenarioError(f"{where}kind", str(exc)) from exc
        fr = _req(p, "frame_range", where)
        planted.append(PlantedViolation(kind, int(_req(p, "actor", where)), (int(fr[0]), int(fr[1]))))
    noise = d.get("noise", {}) or {}
    unknown = set(noise) - {f.name for f in dataclasses.fields(NoiseSpec)}
    if unknown:
        raise ScenarioError("noise", f"unknown keys {sorted(unknown)}")
    try:
        spec = ScenarioSpec(
            name=str(_req(d, "name", "")),
            seed=int(_req(d, "seed", "")),
            actors=actors,
            fps=float(d.get("fps", 10.0)),
            frame_dims=tuple(int(v) for v in d.get("frame_dims", (960, 540))),
            duration_frames=int(d.get("duration_frames", 100)),
            noise=NoiseSpec(**{k: float(v) for k, v in noise.items()}),
            planted_violations=planted,
            min_visible=float(d.get("min_visible", 0.25)),
            render=bool(d.get("render", True)),
            description=str(d.get("description", "")),
        )
    except ScenarioError:
        raise
    except (TypeError, ValueError) as exc:
        raise ScenarioError("<root>", str(exc)) from exc
    validate_spec(spec)
    return spec


def load_spec(path: str | Path) -> ScenarioSpec:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ScenarioError("<file>", f"not valid YAML: {exc}") from exc
    return spec_from_dict(data)


def dump_spec(spec: ScenarioSpec) -> str:
    return yaml.safe_dump(spec_to_dict(spec), sort_keys=False)


# -- generation ---------------------------------------------------------------------


@dataclass
class GroundTruth:
    expected: list[PlantedViolation]
    plates: dict[int, str]
    labels: dict[int, ClassLabel]
    boxes: dict[int, dict[int, BBox]]
    light_states: dict[int, LightColor]

    def to_dict(self) -> dict:
        return {
            "expected": [
                {"kind": p.kind.value, "actor": p.actor, "frame_range": list(p.frame_range)} for p in self.expected
            ],
            "plates": {str(k): v for k, v in sorted(self.plates.items())},
            "actors": {
                str(aid): {
                    "label": self.labels[aid].value,
                    "boxes": {str(f): [round(v, 3) for v in b.as_tuple()] for f, b in sorted(bx.items())},
                }
                for aid, bx in sorted(self.boxes.items())
            },
            "light_states": {str(f): c.value for f, c in sorted(self.light_states.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroundTruth":
        labels, boxes = {}, {}
        for aid, a in d["actors"].items():
            labels[int(aid)] = ClassLabel(a["label"])
            boxes[int(aid)] = {int(f): BBox(*b) for f, b in a["boxes"].items()}
        return cls(
            expected=[
                PlantedViolation(ViolationKind(e["kind"]), int(e["actor"]), tuple(e["frame_range"]))
                for e in d["expected"]
            ],
            plates={int(k): v for k, v in d.get("plates", {}).items()},
            labels=labels,
            boxes=boxes,
            light_states={int(f): LightColor(c) for f, c in d.get("light_states", {}).items()},
        )


def seeded_generator(seed: int) -> np.random.Generator:
    """Counter-based generator; the only randomness source of a scene."""
    return np.random.Generator(np.random.Philox(seed))


def visible_box(b: BBox, dims: tuple[int, int], min_visible: float) -> Optional[BBox]:
    try:
        v = validate_bbox(b, dims)
    except DegenerateBoxError:
        return None
    return v if v.area >= min_visible * b.area else None


def plate_quad(b: BBox, skew: float, aspect: float) -> Quad:
    """Plate corners on the rear of vehicle box ``b`` (keystoned by ``skew``)."""
    pw = 0.42 * b.w
    ph = pw * aspect
    cx, cy = b.cx, b.y + 0.74 * b.h
    x0, x1, y0, y1 = cx - pw / 2, cx + pw / 2, cy - ph / 2, cy + ph / 2
    k = skew * ph
    return Quad(((x0, y0 + k), (x1, y0 - k), (x1, y1 + k), (x0, y1 - k)))


@dataclass
class Scene:
    spec: ScenarioSpec
    stream: FrameStream
    quads: list[tuple[int, int, Quad]]
    ground_truth: GroundTruth

    def render_frame(self, f: int) -> np.ndarray:
        return _Renderer(self.spec).frame(f)

    def frames(self) -> Iterator[tuple[int, np.ndarray]]:
        r = _Renderer(self.spec)
        for f in range(self.spec.duration_frames):
            yield f, r.frame(f)


def generate_scene(spec: ScenarioSpec) -> Scene:
    validate_spec(spec)
    rng = seeded_generator(spec.seed)
    dims = spec.frame_dims
    actors = sorted(spec.actors, key=lambda a: a.id)
    noise = spec.noise
    frames: list[tuple[int, list[Detection]]] = []
    true_boxes: dict[int, dict[int, BBox]] = {a.id: {} for a in actors}
    quads: list[tuple[int, int, Quad]] = []
    aspects = {a.id: _plate_aspect(a.plate) for a in actors if a.plate}
    for f in range(spec.duration_frames):
        ts = int(round(f * 1000.0 / spec.fps))
        dets = []
        for a in actors:
            b = a.box_at(f)
            v = visible_box(b, dims, spec.min_visible) if b is not None else None
            if v is None:
                continue
            true_boxes[a.id][f] = v
            # fixed draw count per visible actor keeps the sequence stable
            u = rng.random()
            z = rng.standard_normal(4)
            if a.plate:
                q = plate_quad(b, a.plate_skew, aspects[a.id])
                pts = q.array
                if pts.min() >= 0 and pts[:, 0].max() <= dims[0] and pts[:, 1].max() <= dims[1]:
                    quads.append((f, a.id, q))
            if u < noise.dropout:
                continue
            w = max(1.0, v.w * (1.0 + noise.size_frac * z[2]))
            h = max(1.0, v.h * (1.0 + noise.size_frac * z[3]))
            cx = v.cx + noise.center_px * z[0]
            cy = v.cy + noise.center_px * z[1]
            try:
                nb = validate_bbox(BBox.from_center(cx, cy, w, h), dims)
            except DegenerateBoxError:
                continue
            nb = BBox(*(round(x, 3) for x in nb.as_tuple()))
            dets.append(Detection(f, ts, a.label, nb, 0.9))
        if dets:
            frames.append((f, dets))
    lights = [a for a in actors if a.label is ClassLabel.TRAFFIC_LIGHT and a.light_script]
    light_states = {}
    if lights:
        main = lights[0]
        light_states = {f: main.light_at(f) for f in true_boxes[main.id]}
    gt = GroundTruth(
        expected=list(spec.planted_violations),
        plates={a.id: a.plate for a in actors if a.plate},
        labels={a.id: a.label for a in actors},
        boxes={k: v for k, v in true_boxes.items() if v},
        light_states=light_states,
    )
    return Scene(spec, FrameStream(spec.fps, dims, frames), quads, gt)


def write_scene(scene: Scene, out_dir: str | Path, render: Optional[bool] = None) -> Path:
    """Write detections.tsv, quads.tsv, ground_truth.json, scene.json, scenario.yaml and frames/."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    spec = scene.spec
    (d / "detections.tsv").write_text(serialize_detection_stream(scene.stream), encoding="utf-8")
    (d / "quads.tsv").write_text("".join(format_quad(f, a, q) + "\n" for f, a, q in scene.quads), encoding="utf-8")
    (d / "ground_truth.json").write_text(
        json.dumps(scene.ground_truth.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    meta = {
        "scene_id": spec.name,
        "fps": spec.fps,
        "frame_dims": list(spec.frame_dims),
        "duration_frames": spec.duration_frames,
        "seed": spec.seed,
        "control": not spec.planted_violations,
        "description": spec.description,
    }
    (d / "scene.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    (d / "scenario.yaml").write_text(dump_spec(spec), encoding="utf-8")
    if spec.render if render is None else render:
        frames_dir = d / "frames"
        for f, img in scene.frames():
            save_frame(frames_dir, f, img)
    return d


# -- rendering ----------------------------------------------------------------------

HORIZON = 220
SKY = (172, 192, 214)
ROAD = (92, 92, 96)
LAMP_COLORS = {LightColor.RED: (255, 40, 30), LightColor.YELLOW: (255, 190, 0), LightColor.GREEN: (40, 230, 110)}
LAMP_OFF = (48, 48, 48)
HOUSING = (35, 35, 35)
BACKPLATE = (22, 22, 22)
PALETTE = [
    (200, 40, 40),
    (40, 90, 190),
    (225, 225, 225),
    (40, 140, 70),
    (230, 170, 40),
    (120, 60, 150),
    (60, 60, 66),
    (170, 110, 60),
]


def _plate_aspect(text: Optional[str]) -> float:
    if not text:
        return 0.25
    img = render_plate(text).image
    return img.shape[0] / img.shape[1]


def _background(dims: tuple[int, int]) -> np.ndarray:
    w, h = dims
    img = np.empty((h, w, 3), dtype=np.uint8)
    hz = min(HORIZON, h)
    img[:hz] = SKY
    img[hz:] = ROAD
    vp = (w // 2, hz)
    for x_end in (-w // 2, w // 6, 5 * w // 6, 3 * w // 2):
        cv2.line(img, vp, (x_end, h), (200, 200, 190), 3, cv2.LINE_AA)
    return img


def _rect(img, x0, y0, x1, y1, color):
    cv2.rectangle(img, (int(round(x0)), int(round(y0))), (int(round(x1)) - 1, int(round(y1)) - 1), color, -1)


def _paste_quad(img: np.ndarray, src: np.ndarray, q: Quad) -> None:
    pts = q.array
    height, width = img.shape[:2]
    x0, y0 = max(0, int(math.floor(pts[:, 0].min()))), max(0, int(math.floor(pts[:, 1].min())))
    x1, y1 = min(width, int(math.ceil(pts[:, 0].max()))), min(height, int(math.ceil(pts[:, 1].max())))
    if x1 - x0 < 2 or y1 - y0 < 2:
        return
    sh, sw = src.shape[:2]
    src_pts = np.float32([[0, 0], [sw, 0], [sw, sh], [0, sh]])
    m = cv2.getPerspectiveTransform(src_pts, np.float32(pts - [x0, y0]))
    # corner coordinates are pixel edges; shift to opencv's pixel-centre convention
    half = np.array([[1, 0, 0.5], [0, 1, 0.5], [0, 0, 1]])
    m = np.linalg.inv(half) @ m @ half
    size = (x1 - x0, y1 - y0)
    warped = cv2.warpPerspective(src, m, size, flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
    mask = cv2.warpPerspective(np.full((sh, sw), 255, np.uint8), m, size, flags=cv2.INTER_LINEAR)
    alpha = mask.astype(np.float32)[..., None] / 255.0
    region = img[y0:y1, x0:x1].astype(np.float32)
    img[y0:y1, x0:x1] = np.clip(region * (1 - alpha) + warped.astype(np.float32) * alpha + 0.5, 0, 255).astype(
        np.uint8
    )


class _Renderer:
    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.bg = _background(spec.frame_dims)
        self.plates = {a.id: render_plate(a.plate).image for a in spec.actors if a.plate}

    def frame(self, f: int) -> np.ndarray:
        img = self.bg.copy()
        items = []
        for a in self.spec.actors:
            b = a.box_at(f)
            if b is not None and visible_box(b, self.spec.frame_dims, self.spec.min_visible) is not None:
                items.append((b.area, a.id, a, b))
        for _, _, a, b in sorted(items, key=lambda t: (t[0], t[1])):
            self._draw(img, a, b, f)
        return img

    def _draw(self, img: np.ndarray, a: ActorSpec, b: BBox, f: int) -> None:
        color = a.color or PALETTE[a.id % len(PALETTE)]
        if a.label.is_vehicle:
            self._vehicle(img, a, b, color)
        elif a.label is ClassLabel.PERSON:
            c = (int(b.cx), int(b.y + 0.12 * b.h))
            cv2.circle(img, c, max(1, int(0.12 * b.h)), (220, 180, 150), -1, cv2.LINE_AA)
            _rect(img, b.x + 0.1 * b.w, b.y + 0.24 * b.h, b.x2 - 0.1 * b.w, b.y + 0.62 * b.h, color)
            _rect(img, b.x + 0.2 * b.w, b.y + 0.62 * b.h, b.x2 - 0.2 * b.w, b.y2, (40, 40, 70))
        elif a.label is ClassLabel.TRAFFIC_LIGHT:
            self._light(img, a, b, f)
        elif a.label is ClassLabel.NO_STOPPING_SIGN:
            c = (int(round(b.cx)), int(round(b.cy)))
            r = int(round(min(b.w, b.h) / 2))
            cv2.circle(img, c, r, (200, 30, 30), -1, cv2.LINE_AA)
            cv2.circle(img, c, max(1, int(r * 0.78)), (30, 60, 170), -1, cv2.LINE_AA)
            t = max(1, r // 6)
            d = int(r * 0.55)
            cv2.line(img, (c[0] - d, c[1] - d), (c[0] + d, c[1] + d), (200, 30, 30), t, cv2.LINE_AA)
            cv2.line(img, (c[0] - d, c[1] + d), (c[0] + d, c[1] - d), (200, 30, 30), t, cv2.LINE_AA)
        elif a.label is ClassLabel.CROSSWALK_SIGN:
            _rect(img, b.x, b.y, b.x2, b.y2, (30, 80, 190))
            tri = np.array(
                [[b.cx, b.y + 0.15 * b.h], [b.x + 0.12 * b.w, b.y2 - 0.15 * b.h], [b.x2 - 0.12 * b.w, b.y2 - 0.15 * b.h]]
            )
            cv2.fillPoly(img, [np.int32(np.round(tri))], (240, 240, 240), cv2.LINE_AA)
            cv2.circle(img, (int(b.cx), int(b.cy + 0.05 * b.h)), max(1, int(0.08 * b.w)), (20, 20, 20), -1)

    def _vehicle(self, img, a: ActorSpec, b: BBox, color) -> None:
        dark = tuple(int(c * 0.6) for c in color)
        _rect(img, b.x + 0.12 * b.w, b.y, b.x2 - 0.12 * b.w, b.y + 0.4 * b.h, dark)
        _rect(img, b.x + 0.18 * b.w, b.y + 0.06 * b.h, b.x2 - 0.18 * b.w, b.y + 0.34 * b.h, (70, 85, 100))
        _rect(img, b.x, b.y + 0.38 * b.h, b.x2, b.y + 0.9 * b.h, color)
        _rect(img, b.x + 0.04 * b.w, b.y + 0.9 * b.h, b.x + 0.22 * b.w, b.y2, (25, 25, 25))
        _rect(img, b.x2 - 0.22 * b.w, b.y + 0.9 * b.h, b.x2 - 0.04 * b.w, b.y2, (25, 25, 25))
        _rect(img, b.x + 0.03 * b.w, b.y + 0.45 * b.h, b.x + 0.15 * b.w, b.y + 0.55 * b.h, (180, 20, 20))
        _rect(img, b.x2 - 0.15 * b.w, b.y + 0.45 * b.h, b.x2 - 0.03 * b.w, b.y + 0.55 * b.h, (180, 20, 20))
        if a.plate:
            _paste_quad(img, self.plates[a.id], plate_quad(b, a.plate_skew, _plate_aspect(a.plate)))

    def _light(self, img, a: ActorSpec, b: BBox, f: int) -> None:
        pad = max(2.0, 0.15 * min(b.w, b.h))
        _rect(img, b.x - pad, b.y - pad, b.x2 + pad, b.y2 + pad, BACKPLATE)
        _rect(img, b.x, b.y, b.x2, b.y2, HOUSING)
        lit = a.light_at(f)
        vertical = b.h >= b.w
        step = (b.h if vertical else b.w) / 3.0
        radius = max(1, int(0.36 * min(step, b.w if vertical else b.h)))
        for i, lamp in enumerate((LightColor.RED, LightColor.YELLOW, LightColor.GREEN)):
            if vertical:
                c = (int(round(b.cx)), int(round(b.y + (i + 0.5) * step)))
            else:
                c = (int(round(b.x + (i + 0.5) * step)), int(round(b.cy)))
            cv2.circle(img, c, radius, LAMP_COLORS[lamp] if lamp is lit else LAMP_OFF, -1, cv2.LINE_AA)


# -- geometry helpers for scripting -----------------------------------------------


@dataclass(frozen=True)
class Pinhole:
    """Forward-looking camera: lateral X (m, right positive), depth Z (m)."""

    f: float = 800.0
    cx: float = 480.0
    horizon: float = float(HORIZON)
    cam_height: float = 1.3

    def box(self, x: float, z: float, width: float, height: float, elevation: float = 0.0):
        """(cx, cy, w, h) of an upright object standing ``elevation`` m above the road."""
        w = self.f * width / z
        h = self.f * height / z
        bottom = self.horizon + self.f * (self.cam_height - elevation) / z
        return (self.cx + self.f * x / z, bottom - h / 2.0, w, h)


SIZES = {
    ClassLabel.CAR: (1.8, 1.5),
    ClassLabel.TRUCK: (2.5, 3.2),
    ClassLabel.BUS: (2.5, 3.0),
    ClassLabel.MOTORCYCLE: (0.8, 1.4),
    ClassLabel.PERSON: (0.5, 1.7),
    ClassLabel.NO_STOPPING_SIGN: (0.6, 0.6),
    ClassLabel.CROSSWALK_SIGN: (0.6, 0.6),
}
SIGN_ELEVATION = 2.0


def world_waypoints(
    cam: Pinhole,
    label: ClassLabel,
    x: float,
    z_of_frame,
    frames: Sequence[int],
    elevation: float = 0.0,
    x_of_frame=None,
    z_min: float = 2.0,
) -> list[tuple[int, float, float, float, float]]:
    """Per-frame waypoints for an object at lateral ``x`` and depth ``z_of_frame(f)``."""
    width, height = SIZES[label]
    out = []
    for f in frames:
        z = z_of_frame(f)
        if z < z_min:
            break
        xf = x_of_frame(f) if x_of_frame is not None else x
        out.append((f, *cam.box(xf, z, width, height, elevation)))
    return out


# -- oracle checks ------------------------------------------------------------------


def gt_records(gt: GroundTruth) -> list[TrackRecord]:
    out = []
    for aid in sorted(gt.boxes):
        hist = tuple(sorted(gt.boxes[aid].items()))
        out.append(TrackRecord(aid, gt.labels[aid], hist, hist))
    return out


def scaled_rules(cfg: RuleConfig, margin: float) -> RuleConfig:
    """Thresholds made stricter for violations by ``margin`` (negative loosens)."""
    up, down = 1.0 + margin, 1.0 - margin
    return dataclasses.replace(
        cfg,
        shrink_frac=cfg.shrink_frac * up,
        avg_mult=cfg.avg_mult * up,
        slow_traffic_cap=cfg.slow_traffic_cap * down,
        edge_margin=cfg.edge_margin * down,
        follow_seconds=cfg.follow_seconds * down,
        proximity_r=cfg.proximity_r * down,
        wait_frames=int(math.ceil(cfg.wait_frames * up)),
        stop_eps=cfg.stop_eps * up,
        stop_frames=max(1, int(math.floor(cfg.stop_frames * down))),
        static_corr=1.0 - (1.0 - cfg.static_corr) * down,
        park_frames=int(math.ceil(cfg.park_frames * up)),
        crosswalk_r=cfg.crosswalk_r * down,
    )


def self_check(scene: Scene, cfg: RuleConfig = RuleConfig(), margin: float = 0.2) -> list[str]:
    """Run every rule on noiseless ground-truth tracks.

    Planted violations must fire with thresholds tightened by ``margin``;
    nothing unplanted may fire with thresholds loosened by ``margin``.
    Returns a list of problems (empty when the scene is sound).
    """
    from .pipeline import apply_rules

    gt = scene.ground_truth
    records = gt_records(gt)
    ts = {f: f * 1000.0 / scene.spec.fps for f in range(scene.spec.duration_frames)}
    width = scene.spec.frame_dims[0]
    planted = {(p.kind, p.actor) for p in gt.expected}
    problems = []
    tight = apply_rules(records, gt.light_states, ts, width, scaled_rules(cfg, margin), stream_start=0)
    found = {(e.kind, e.track_id) for e in tight}
    for kind, actor in sorted(planted - found, key=lambda k: (k[0].value, k[1])):
        problems.append(f"{scene.spec.name}: planted {kind.value} by actor {actor} misses the tightened rule")
    loose = apply_rules(records, gt.light_states, ts, width, scaled_rules(cfg, -margin), stream_start=0)
    for e in loose:
        if (e.kind, e.track_id) not in planted:
            problems.append(f"{scene.spec.name}: unplanted {e.kind.value} by actor {e.track_id} under loosened rule")
    return problems


def match_actor(record: TrackRecord, gt: GroundTruth, min_iou: float = 0.3) -> Optional[int]:
    """Ground-truth actor that a track follows (best mean IoU over shared frames)."""
    from .ingest import iou

    best, best_score = None, min_iou
    for aid, boxes in gt.boxes.items():
        if gt.labels[aid] is not record.label:
            continue
        scores = [iou(b, boxes[f]) for f, b in record.history if f in boxes]
        if len(scores) < 3:
            continue
        s = float(np.mean(scores))
        if s > best_score:
            best, best_score = aid, s
    return best


@dataclass
class SceneScore:
    scene: str
    detected: list[tuple[str, int]]
    missed: list[tuple[str, int]]
    false_alarms: list[tuple[str, int]]


def score_scene(
    name: str, events: Sequence[ViolationEvent], records: Sequence[TrackRecord], gt: GroundTruth
) -> SceneScore:
    by_id = {r.track_id: r for r in records}
    planted = {(p.kind.value, p.actor) for p in gt.expected}
    found = set()
    false = []
    for e in events:
        rec = by_id.get(e.track_id)
        actor = match_actor(rec, gt) if rec is not None else None
        key = (e.kind.value, actor if actor is not None else -e.track_id)
        if key in planted:
            found.add(key)
        else:
            false.append(key)
    return SceneScore(name, sorted(found), sorted(planted - found), sorted(false))


# -- the evaluation corpus --------------------------------------------------------------

TABLE1 = {
    ViolationKind.RED_LIGHT: (4, 4),
    ViolationKind.BREAKDOWN_LANE: (3, 6),
    ViolationKind.PEDESTRIAN_CROSSING: (1, 1),
    ViolationKind.ILLEGAL_PARKING: (2, 6),
    ViolationKind.FOLLOWING_DISTANCE: (2, 2),
    ViolationKind.CROSSWALK_PARKING: (2, 4),
}

CAM = Pinhole()
FPS = 10.0


def _plate_text(rng: np.random.Generator) -> str:
    letters = "ABCDEFGHJKLMNPRSTUVWXYZ"
    digits = "0123456789"
    parts = [
        "".join(rng.choice(list(digits), 2)),
        "".join(rng.choice(list(letters), int(rng.integers(2, 4)))),
        "".join(rng.choice(list(digits), int(rng.integers(2, 4)))),
    ]
    return "".join(parts)


class _Builder:
    def __init__(self, name: str, seed: int, duration: int, rng: np.random.Generator, description: str = ""):
        self.spec = ScenarioSpec(name=name, seed=seed, actors=[], duration_frames=duration, description=description)
        self.rng = rng
        self.next_id = 1

    @property
    def frames(self) -> range:
        return range(self.spec.duration_frames)

    def add(self, label: ClassLabel, waypoints, plate: bool = False, **kw) -> int:
        aid = self.next_id
        self.next_id += 1
        text = _plate_text(self.rng) if plate else None
        skew = float(self.rng.uniform(-0.08, 0.08)) if plate else 0.0
        self.spec.actors.append(
            ActorSpec(aid, label, [tuple(float(v) if i else int(v) for i, v in enumerate(w)) for w in waypoints],
                      plate=text, plate_skew=skew, **kw)
        )
        return aid

    def static(self, label, x, z, frames=None, elevation=0.0, **kw) -> int:
        frames = frames if frames is not None else self.frames
        return self.add(label, world_waypoints(CAM, label, x, lambda f: z, frames, elevation), **kw)

    def moving(self, label, x, z_of_frame, frames=None, elevation=0.0, x_of_frame=None, **kw) -> int:
        frames = frames if frames is not None else self.frames
        return self.add(label, world_waypoints(CAM, label, x, z_of_frame, frames, elevation, x_of_frame), **kw)

    def light(self, x, z, script, horizontal=False) -> int:
        w, h = (0.95, 0.35) if horizontal else (0.35, 0.95)
        cx, cy, bw, bh = CAM.box(x, z, w, h, 3.2)
        last = self.spec.duration_frames - 1
        return self.add(
            ClassLabel.TRAFFIC_LIGHT, [(0, cx, cy, bw, bh), (last, cx, cy, bw, bh)], light_script=script
        )

    def plant(self, kind: ViolationKind, actor: int) -> None:
        frames = [w[0] for w in self.spec.actor(actor).waypoints]
        self.spec.planted_violations.append(PlantedViolation(kind, actor, (frames[0], frames[-1])))


def _ego(z0: float, speed: float):
    """Depth of a static world point for an ego moving at ``speed`` m/s."""
    return lambda f: z0 - speed * f / FPS


def _ramp(z0: float, z1: float, f0: int, f1: int, hold_before: bool = True):
    def z(f):
        if f <= f0:
            return z0
        if f >= f1:
            return z1
        t = (f - f0) / (f1 - f0)
        # smooth start: eased acceleration away from the stop line
        return z0 + (z1 - z0) * t * t
    return z


# red light: ego waits at the stop line, the offender pulls away on red


def _red_scene(b: _Builder, variant: int, light_script, offender: bool, moves: bool = True, leave_at: int = 70):
    horizontal = variant % 2 == 1
    lane = (0.0, -1.6, 1.4, 0.3)[variant % 4]
    b.light(2.6 + 0.3 * (variant % 2), 13.0, light_script, horizontal=horizontal)
    label = ClassLabel.TRUCK if variant == 2 else ClassLabel.CAR
    z = _ramp(5.0, 32.0, 15 + 2 * variant, leave_at) if moves else (lambda f: 5.0)
    frames = range(0, leave_at + 1) if moves else b.frames
    vid = b.moving(label, lane, z, frames=frames, plate=True)
    if variant in (1, 3):
        # a law-abiding neighbour waiting at the line
        b.static(ClassLabel.CAR, lane - 3.4 if lane > -1 else lane + 3.4, 7.0)
    if offender:
        b.plant(ViolationKind.RED_LIGHT, vid)


RED = [(0, LightColor.RED)]
GREEN = [(0, LightColor.GREEN)]


# breakdown lane: congestion on the left, offenders rolling past on the right

_JAM = [(-3.5, 8.0, ClassLabel.CAR), (-3.5, 13.0, ClassLabel.TRUCK), (-6.0, 11.0, ClassLabel.CAR),
        (-6.0, 17.0, ClassLabel.BUS), (-6.0, 25.0, ClassLabel.CAR), (0.0, 12.0, ClassLabel.CAR),
        (3.5, 22.0, ClassLabel.CAR)]


def _jam(b: _Builder, drift: float = 0.0, layout=_JAM) -> None:
    for i, (x, z, label) in enumerate(layout):
        b.moving(label, x, _ego(z, -drift * (1 if i % 2 else -1)))


def _breakdown_scene(b: _Builder, variant: int) -> None:
    _jam(b)
    labels = [(ClassLabel.CAR, ClassLabel.MOTORCYCLE), (ClassLabel.CAR, ClassLabel.CAR),
              (ClassLabel.TRUCK, ClassLabel.CAR)][variant]
    dv = 0.8 + 0.1 * variant
    for k, (start, end) in enumerate(((0, 45), (52, 97))):
        x = 3.6 if labels[k] is not ClassLabel.MOTORCYCLE else 3.3
        vid = b.moving(labels[k], x, lambda f, s=start: 7.5 + dv * (f - s) / FPS, frames=range(start, end + 1),
                       plate=True)
        b.plant(ViolationKind.BREAKDOWN_LANE, vid)


# following distance: a lead car ahead, an entrant cuts in from the right edge

LEAD_CX = 480.0


def merge_scene_actors(b: _Builder, arrival_s: Optional[float], start: int = 20, hold_x: float = 700.0) -> int:
    """Lead car at the centre; an entrant whose first visible box reaches the lead's x after ``arrival_s``.

    ``arrival_s=None`` scripts an entrant that stops short at ``hold_x``.
    """
    lead = CAM.box(0.0, 12.0, *SIZES[ClassLabel.CAR])
    b.add(ClassLabel.CAR, [(0, *lead), (b.spec.duration_frames - 1, *lead)])
    w, h = 150.0, 125.0
    cy = 320.0
    width = b.spec.frame_dims[0]
    # first frame: exactly the minimum visible sliver at the right edge
    cx0 = width + w / 2 - b.spec.min_visible * w - 0.5
    last = b.spec.duration_frames - 1
    if arrival_s is None:
        wps = [(start, cx0, cy, w, h), (start + 20, hold_x, cy, w, h), (last, hold_x, cy, w, h)]
    else:
        frames_to_ref = arrival_s * FPS
        v = (cx0 - lead[0]) / frames_to_ref
        end_cx = max(w / 2, cx0 - v * (last - start))
        end_f = start + int(round((cx0 - end_cx) / v))
        wps = [(start, cx0, cy, w, h), (min(end_f, last), cx0 - v * (min(end_f, last) - start), cy, w, h)]
    return b.add(ClassLabel.CAR, wps, plate=True)


# pedestrian crossing: ego waits before a crosswalk, a car drives through it


def _crossing_scene(b: _Builder, pedestrian: bool, halt: bool) -> Optional[int]:
    b.static(ClassLabel.CROSSWALK_SIGN, 4.0, 12.0, elevation=SIGN_ELEVATION)
    if pedestrian:
        b.moving(ClassLabel.PERSON, 3.4, lambda f: 12.5, x_of_frame=lambda f: 3.4 + 0.05 * math.sin(f / 7.0))
    if halt:
        # creep up, brake to a halt inside the sign band, wait, then leave
        def z(f):
            if f <= 20:
                return 4.0 + 0.15 * f
            if f <= 30:
                return 7.0 + 1.0 * (1 - (1 - (f - 20) / 10.0) ** 2)
            if f <= 65:
                return 8.0
            return 8.0 + 0.05 * (f - 65) ** 2
        frames = range(0, 90)
    else:
        z = lambda f: 4.0 + 0.6 * (f - 20)
        frames = range(20, 56)
    return b.moving(ClassLabel.CAR, 2.5, z, frames=frames, plate=True)


# parking under ego motion

EGO_SPEED = 4.0


def _parked(b: _Builder, x: float, z0: float, label=ClassLabel.CAR, plate: bool = True) -> int:
    return b.moving(label, x, _ego(z0, EGO_SPEED), plate=plate)


def _sign(b: _Builder, label: ClassLabel, x: float, z0: float) -> int:
    return b.moving(label, x, _ego(z0, EGO_SPEED), elevation=SIGN_ELEVATION)


def build_table1_corpus(seed: int = 7) -> list[ScenarioSpec]:
    """14 violation scenes (23 planted violations) followed by 14 control scenes."""
    rng = seeded_generator(seed)
    scenes: list[ScenarioSpec] = []

    def builder(name: str, duration: int = 100, description: str = "") -> _Builder:
        index = len(scenes)
        scene_seed = int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])
        return _Builder(name, scene_seed, duration, rng, description)

    for v in range(4):
        b = builder(f"v{len(scenes) + 1:02d}_red_light", 90, "vehicle pulls away against a red light")
        _red_scene(b, v, RED, offender=True)
        scenes.append(b.spec)
    for v in range(3):
        b = builder(f"v{len(scenes) + 1:02d}_breakdown_lane", 100, "vehicles pass a jam on the right")
        _breakdown_scene(b, v)
        scenes.append(b.spec)
    b = builder(f"v{len(scenes) + 1:02d}_pedestrian_crossing", 80, "car drives through while a pedestrian waits")
    vid = _crossing_scene(b, pedestrian=True, halt=False)
    b.plant(ViolationKind.PEDESTRIAN_CROSSING, vid)
    scenes.append(b.spec)
    for v in range(2):
        b = builder(f"v{len(scenes) + 1:02d}_illegal_parking", 80, "cars parked beside a no-stopping sign")
        _sign(b, ClassLabel.NO_STOPPING_SIGN, 5.0, 24.0 + 2 * v)
        for z0, label in ((18.0, ClassLabel.CAR), (22.0 + v, ClassLabel.TRUCK if v else ClassLabel.CAR),
                          (27.0, ClassLabel.CAR)):
            b.plant(ViolationKind.ILLEGAL_PARKING, _parked(b, 3.6, z0, label))
        scenes.append(b.spec)
    for arrival in (2.0, 1.5):
        b = builder(f"v{len(scenes) + 1:02d}_following_distance", 80, f"entrant cuts in, arrives after {arrival} s")
        b.plant(ViolationKind.FOLLOWING_DISTANCE, merge_scene_actors(b, arrival))
        scenes.append(b.spec)
    for v in range(2):
        b = builder(f"v{len(scenes) + 1:02d}_crosswalk_parking", 80, "cars parked at a crosswalk sign")
        _sign(b, ClassLabel.CROSSWALK_SIGN, 4.6, 20.0 + 2 * v)
        for z0 in (16.0 + 2 * v, 23.0 + 2 * v):
            b.plant(ViolationKind.CROSSWALK_PARKING, _parked(b, 3.4, z0))
        scenes.append(b.spec)

    # controls
    b = builder("c01_green_pull_away", 90, "same pull-away on green")
    _red_scene(b, 0, GREEN, offender=False)
    scenes.append(b.spec)
    b = builder("c02_red_waiting", 90, "vehicle waits at red")
    _red_scene(b, 1, RED, offender=False, moves=False)
    scenes.append(b.spec)
    b = builder("c03_red_after_leaving", 90, "vehicle leaves on green, light turns red later")
    _red_scene(b, 2, [(0, LightColor.GREEN), (60, LightColor.YELLOW), (70, LightColor.RED)], offender=False,
               leave_at=56)
    scenes.append(b.spec)
    b = builder("c04_jam_uniform", 100, "everyone crawls at the same pace")
    _jam(b, drift=0.03, layout=_JAM + [(3.5, 9.0, ClassLabel.CAR)])
    scenes.append(b.spec)
    b = builder("c05_fast_left_lane", 100, "fast vehicle in the leftmost third")
    layout = [(x, z, lab) for x, z, lab in _JAM if not (x == -3.5 and z == 8.0)]
    _jam(b, layout=layout)
    b.moving(ClassLabel.CAR, -3.5, lambda f: 8.0 + 0.9 * f / FPS, frames=range(0, 60))
    scenes.append(b.spec)
    b = builder("c06_slow_merge", 100, "entrant takes four seconds to reach the lead position")
    merge_scene_actors(b, 4.0)
    scenes.append(b.spec)
    b = builder("c07_merge_stops_short", 80, "entrant never reaches the lead position")
    merge_scene_actors(b, None)
    scenes.append(b.spec)
    b = builder("c08_crossing_no_pedestrian", 80, "car drives through an empty crossing")
    _crossing_scene(b, pedestrian=False, halt=False)
    scenes.append(b.spec)
    b = builder("c09_crossing_halts", 90, "car stops for the pedestrian, then proceeds")
    _crossing_scene(b, pedestrian=True, halt=True)
    scenes.append(b.spec)
    b = builder("c10_no_stopping_oncoming", 80, "vehicle on the sign side moving against the world")
    _sign(b, ClassLabel.NO_STOPPING_SIGN, 5.0, 24.0)
    b.moving(ClassLabel.CAR, 3.0, lambda f: 16.0 - 0.1 * f, x_of_frame=lambda f: 3.0 - 0.06 * f, frames=range(0, 50))
    scenes.append(b.spec)
    b = builder("c11_parked_no_sign", 80, "parked cars with ego motion but no sign")
    for z0 in (14.0, 19.0, 25.0):
        _parked(b, 3.6, z0, plate=False)
    scenes.append(b.spec)
    b = builder("c12_crosswalk_far_car", 80, "parked car far from the crosswalk sign")
    _sign(b, ClassLabel.CROSSWALK_SIGN, 4.6, 12.0)
    _parked(b, 3.4, 40.0, plate=False)
    scenes.append(b.spec)
    b = builder("c13_crosswalk_moving_car", 80, "car keeping pace with the ego vehicle near the sign")
    _sign(b, ClassLabel.CROSSWALK_SIGN, 4.6, 20.0)
    b.static(ClassLabel.CAR, 2.2, 11.0)
    scenes.append(b.spec)
    b = builder("c14_free_flow", 100, "ordinary traffic, no lights or signs")
    b.moving(ClassLabel.CAR, 0.0, lambda f: 10.0 + 0.25 * f)
    b.moving(ClassLabel.CAR, -3.5, lambda f: 30.0 - 0.2 * f, frames=range(0, 90))
    b.moving(ClassLabel.BUS, 3.5, lambda f: 14.0 + 0.15 * f)
    scenes.append(b.spec)
    for s in scenes:
        validate_spec(s)
    return scenes


def write_corpus(specs: Sequence[ScenarioSpec], out_dir: str | Path, render: bool = True) -> list[Path]:
    root = Path(out_dir)
    return [write_scene(generate_scene(s), root / s.name, render) for s in specs]

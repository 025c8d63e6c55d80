"""License-plate rectification, character segmentation and recognition."""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import cv2
import numpy as np

ALPHABET = string.ascii_uppercase + string.digits
CROP_SIZE = 80


class GeometryError(ValueError):
    pass


class AtlasError(ValueError):
    pass


@dataclass(frozen=True)
class Quad:
    """Plate corners in source pixels: top-left, top-right, bottom-right, bottom-left."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.shape != (4, 2) or not np.all(np.isfinite(pts)):
            raise GeometryError("quad needs four finite (x, y) corners")
        # consecutive edge cross products must all be positive (convex, clockwise on screen)
        for i in range(4):
            a, b, c = pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]
            cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
            if cross <= 0:
                raise GeometryError(f"quad {self.points} is degenerate, concave or self-intersecting")

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "Quad":
        if len(values) != 8:
            raise GeometryError("quad needs 8 coordinates")
        v = [float(x) for x in values]
        return cls(tuple((v[i], v[i + 1]) for i in range(0, 8, 2)))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    @property
    def area(self) -> float:
        p = self.array
        x, y = p[:, 0], p[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    @property
    def centroid(self) -> tuple[float, float]:
        c = self.array.mean(axis=0)
        return float(c[0]), float(c[1])


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective map taking the four ``src`` points onto ``dst`` (h33 = 1)."""
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i] = u
        rhs[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("points do not determine a homography") from exc
    return np.append(h, 1.0).reshape(3, 3)


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``image`` at continuous coordinates (pixel centres at +0.5), edge-replicated."""
    img = image.astype(np.float64)
    if img.ndim == 2:
        img = img[..., None]
    height, width = img.shape[:2]
    px = np.clip(xs - 0.5, 0.0, width - 1.0)
    py = np.clip(ys - 0.5, 0.0, height - 1.0)
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return out if image.ndim == 3 else out[..., 0]


def rectify_plate(image: np.ndarray, q: Quad, out_dims: tuple[int, int] = (240, 60)) -> np.ndarray:
    """Perspective-warp the quad onto an ``out_dims`` (width, height) rectangle."""
    out_w, out_h = out_dims
    if out_w <= 0 or out_h <= 0:
        raise GeometryError("output dims must be positive")
    height, width = image.shape[:2]
    pts = q.array
    if pts[:, 0].min() < -1 or pts[:, 1].min() < -1 or pts[:, 0].max() > width + 1 or pts[:, 1].max() > height + 1:
        raise GeometryError("quad lies outside the image")
    rect = np.array([[0, 0], [out_w, 0], [out_w, out_h], [0, out_h]], dtype=float)
    h = homography(rect, pts)
    u, v = np.meshgrid(np.arange(out_w) + 0.5, np.arange(out_h) + 0.5)
    den = h[2, 0] * u + h[2, 1] * v + h[2, 2]
    xs = (h[0, 0] * u + h[0, 1] * v + h[0, 2]) / den
    ys = (h[1, 0] * u + h[1, 1] * v + h[1, 2]) / den
    out = bilinear_sample(image, xs, ys)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# -- segmentation ---------------------------------------------------------------


@dataclass(frozen=True)
class SegmentConfig:
    sigma: float = 1.0
    open_kernel: int = 2
    h_lo: float = 0.35
    h_hi: float = 0.95
    a_lo: float = 0.15
    a_hi: float = 1.2


@dataclass(frozen=True)
class CharCrop:
    image: np.ndarray  # 80x80 uint8, glyph 255 on background 0
    index: int
    box: tuple[int, int, int, int] = (0, 0, 0, 0)  # x, y, w, h in the plate crop

    def __post_init__(self):
        if self.image.shape != (CROP_SIZE, CROP_SIZE):
            raise ValueError(f"char crop must be {CROP_SIZE}x{CROP_SIZE}, got {self.image.shape}")


@dataclass(frozen=True)
class PlateReadout:
    text: str
    scores: tuple[float, ...] = ()

    @property
    def confidence(self) -> float:
        return min(self.scores) if self.scores else 0.0


def _to_square_crop(mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    side = max(h, w)
    canvas = np.zeros((side, side), dtype=np.uint8)
    y0, x0 = (side - h) // 2, (side - w) // 2
    canvas[y0 : y0 + h, x0 : x0 + w] = mask
    resized = cv2.resize(canvas, (CROP_SIZE, CROP_SIZE), interpolation=cv2.INTER_AREA)
    return np.where(resized >= 128, 255, 0).astype(np.uint8)


def binarize_plate(plate: np.ndarray, cfg: SegmentConfig = SegmentConfig()) -> np.ndarray:
    """Foreground (glyph) mask as uint8 {0, 255}; polarity set by the border majority."""
    gray = plate if plate.ndim == 2 else cv2.cvtColor(plate, cv2.COLOR_RGB2GRAY)
    if cfg.sigma > 0:
        gray = cv2.GaussianBlur(gray, (0, 0), cfg.sigma)
    if int(gray.max()) == int(gray.min()):
        return np.zeros_like(gray)
    _, binary = cv2.threshold(gray, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    border = np.concatenate([binary[0], binary[-1], binary[:, 0], binary[:, -1]])
    if np.count_nonzero(border) * 2 > border.size:
        binary = 255 - binary
    if cfg.open_kernel > 1:
        kernel = np.ones((cfg.open_kernel, cfg.open_kernel), np.uint8)
        binary = cv2.morphologyEx(binary, cv2.MORPH_OPEN, kernel)
    return binary


def segment_characters(plate: np.ndarray, cfg: SegmentConfig = SegmentConfig()) -> list[CharCrop]:
    """Character crops ordered left to right; an empty list when nothing qualifies."""
    if plate.size == 0:
        raise ValueError("empty plate crop")
    binary = binarize_plate(plate, cfg)
    plate_h = binary.shape[0]
    n, labels, stats, _ = cv2.connectedComponentsWithStats((binary > 0).astype(np.uint8), connectivity=8)
    found = []
    for k in range(1, n):
        x, y, w, h, _ = (int(v) for v in stats[k])
        if not cfg.h_lo * plate_h <= h <= cfg.h_hi * plate_h:
            continue
        if not cfg.a_lo <= w / h <= cfg.a_hi:
            continue
        found.append((x, y, w, h, k))
    found.sort(key=lambda c: (c[0], c[1]))
    crops = []
    for i, (x, y, w, h, k) in enumerate(found):
        mask = np.where(labels[y : y + h, x : x + w] == k, 255, 0).astype(np.uint8)
        crops.append(CharCrop(_to_square_crop(mask), i, (x, y, w, h)))
    return crops


# -- recognition ----------------------------------------------------------------

Classifier = Callable[[CharCrop], tuple[str, float]]


def template_classify(crop: CharCrop | np.ndarray, atlas: Mapping[str, np.ndarray]) -> tuple[str, float]:
    """Best-agreeing template: score is the fraction of pixels that agree."""
    if not atlas:
        raise AtlasError("template atlas is empty")
    img = crop.image if isinstance(crop, CharCrop) else np.asarray(crop)
    if img.shape != (CROP_SIZE, CROP_SIZE):
        raise ValueError(f"crop must be {CROP_SIZE}x{CROP_SIZE}")
    fg = img > 127
    best_char, best_score = "", -1.0
    for char in sorted(atlas):
        score = float(np.mean(fg == (atlas[char] > 127)))
        if score > best_score:
            best_char, best_score = char, score
    return best_char, best_score


class TemplateClassifier:
    def __init__(self, atlas: Optional[Mapping[str, np.ndarray]] = None):
        self.atlas = dict(atlas) if atlas is not None else font_atlas()
        if not self.atlas:
            raise AtlasError("template atlas is empty")

    def __call__(self, crop: CharCrop) -> tuple[str, float]:
        return template_classify(crop, self.atlas)


def recognize_characters(
    crops: Sequence[CharCrop], classifier: Optional[Classifier] = None, min_score: float = 0.7
) -> PlateReadout:
    """Classify crops independently; failures and low scores become '?' with score 0."""
    classifier = classifier or TemplateClassifier()
    chars, scores = [], []
    for crop in crops:
        try:
            char, score = classifier(crop)
        except (ValueError, ArithmeticError):
            char, score = "?", 0.0
        if score < min_score or char not in ALPHABET:
            char, score = "?", 0.0
        chars.append(char)
        scores.append(float(score))
    return PlateReadout("".join(chars), tuple(scores))


def read_plate(
    image: np.ndarray,
    q: Quad,
    out_dims: tuple[int, int] = (240, 60),
    cfg: SegmentConfig = SegmentConfig(),
    classifier: Optional[Classifier] = None,
) -> tuple[PlateReadout, np.ndarray]:
    rect = rectify_plate(image, q, out_dims)
    return recognize_characters(segment_characters(rect, cfg), classifier), rect


# -- rendering and the font atlas ------------------------------------------------

FONT = cv2.FONT_HERSHEY_SIMPLEX
PLATE_BG = (235, 235, 225)
PLATE_FG = (20, 20, 30)


@dataclass
class PlateRender:
    image: np.ndarray
    text: str
    glyph_boxes: list[tuple[int, int, int, int]] = field(default_factory=list)


def _font_params(char_height: int) -> tuple[float, int]:
    (_, base_h), _ = cv2.getTextSize("0", FONT, 1.0, 1)
    scale = char_height / float(base_h)
    thickness = max(2, int(round(char_height / 9.0)))
    return scale, thickness


def render_plate(
    text: str, char_height: int = 36, pad: int = 10, gap: int = 6, glyph_heights: Optional[Sequence[int]] = None
) -> PlateRender:
    """Dark glyphs on a light plate; returns the image and each glyph's ink box."""
    scale, thick = _font_params(char_height)
    sizes = []
    for i, ch in enumerate(text):
        gh = glyph_heights[i] if glyph_heights else char_height
        s, t = _font_params(gh) if gh != char_height else (scale, thick)
        (w, _), _ = cv2.getTextSize(ch, FONT, s, t)
        sizes.append((s, t, w))
    width = pad * 2 + sum(w for _, _, w in sizes) + gap * max(0, len(text) - 1) + 2 * thick
    height = char_height + 2 * pad + 2 * thick
    img = np.full((height, width, 3), PLATE_BG, dtype=np.uint8)
    boxes = []
    x = pad + thick
    baseline = pad + thick + char_height
    for ch, (s, t, w) in zip(text, sizes):
        layer = np.zeros((height, width), dtype=np.uint8)
        cv2.putText(layer, ch, (x, baseline), FONT, s, 255, t, cv2.LINE_AA)
        ys, xs = np.nonzero(layer > 127)
        if len(xs):
            boxes.append((int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)))
        alpha = layer.astype(np.float64)[..., None] / 255.0
        img = (img * (1 - alpha) + np.asarray(PLATE_FG) * alpha).astype(np.uint8)
        x += w + gap
    return PlateRender(img, text, boxes)


@lru_cache(maxsize=4)
def _cached_atlas(char_height: int) -> tuple[tuple[str, bytes], ...]:
    out = []
    for ch in ALPHABET:
        r = render_plate(ch, char_height=char_height)
        binary = binarize_plate(r.image)
        n, labels, stats, _ = cv2.connectedComponentsWithStats((binary > 0).astype(np.uint8), connectivity=8)
        if n < 2:
            raise AtlasError(f"could not render glyph {ch!r}")
        k = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
        x, y, w, h = (int(v) for v in stats[k, :4])
        mask = np.where(labels[y : y + h, x : x + w] == k, 255, 0).astype(np.uint8)
        out.append((ch, _to_square_crop(mask).tobytes()))
    return tuple(out)


def font_atlas(char_height: int = 36) -> dict[str, np.ndarray]:
    """One 80x80 binary template per alphabet character, from the plate font."""
    return {
        ch: np.frombuffer(buf, dtype=np.uint8).reshape(CROP_SIZE, CROP_SIZE).copy()
        for ch, buf in _cached_atlas(char_height)
    }


def save_atlas(atlas: Mapping[str, np.ndarray], directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for ch, img in atlas.items():
        cv2.imwrite(str(d / f"{ch}.png"), img)


def load_atlas(directory: str | Path) -> dict[str, np.ndarray]:
    d = Path(directory)
    atlas = {}
    for path in sorted(d.glob("*.png")):
        img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
        if img is None or img.shape != (CROP_SIZE, CROP_SIZE):
            raise AtlasError(f"{path} is not an {CROP_SIZE}x{CROP_SIZE} image")
        atlas[path.stem] = np.where(img > 127, 255, 0).astype(np.uint8)
    if not atlas:
        raise AtlasError(f"no templates in {d}")
    return atlas


def parse_quad_lines(lines) -> list[tuple[int, int, Quad]]:
    """Quad annotations: ``frame_index track_id x1 y1 x2 y2 x3 y3 x4 y4`` (tab-separated)."""
    out = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip("\r\n")
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", "\t").split("\t")
        if len(parts) != 10:
            raise ValueError(f"line {lineno}: expected 10 fields, got {len(parts)}")
        out.append((int(parts[0]), int(parts[1]), Quad.from_flat(parts[2:])))
    return out


def format_quad(frame_index: int, track_id: int, q: Quad) -> str:
    coords = "\t".join(f"{v:.2f}" for p in q.points for v in p)
    return f"{frame_index}\t{track_id}\t{coords}"

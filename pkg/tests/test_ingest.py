import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvd.ingest import (
    BBox,
    ClassLabel,
    DegenerateBoxError,
    Detection,
    FrameStream,
    OrderingError,
    ParseError,
    VocabularyError,
    iou,
    load_frame,
    parse_detection_stream,
    save_frame,
    serialize_detection_stream,
    validate_bbox,
)

DIMS = (100, 100)


def line(f, ts, label, x, y, w, h, conf=0.9):
    return "\t".join(str(v) for v in (f, ts, label, x, y, w, h, conf))


def test_empty_input_gives_empty_stream():
    s = parse_detection_stream("", 10, DIMS)
    assert len(s) == 0 and s.frames == []


def test_grouping_by_frame_preserves_order():
    text = "\n".join(
        [line(0, 0, "car", 1, 1, 5, 5), line(0, 0, "person", 10, 10, 5, 5), line(1, 100, "car", 2, 1, 5, 5)]
    )
    s = parse_detection_stream(text, 10, DIMS)
    assert [f for f, _ in s.frames] == [0, 1]
    assert [d.label for d in s.frames[0][1]] == [ClassLabel.CAR, ClassLabel.PERSON]


def test_unknown_label_is_vocabulary_error():
    with pytest.raises(VocabularyError) as exc:
        parse_detection_stream(line(0, 0, "bicycle", 1, 1, 5, 5), 10, DIMS)
    assert exc.value.lineno == 1


def test_malformed_line_names_line_number():
    text = line(0, 0, "car", 1, 1, 5, 5) + "\n# comment\n0\t0\tcar\t1\t1\t5"
    with pytest.raises(ParseError) as exc:
        parse_detection_stream(text, 10, DIMS)
    assert exc.value.lineno == 3
    assert "line 3" in str(exc.value)


def test_non_monotone_timestamps_rejected():
    text = "\n".join([line(0, 200, "car", 1, 1, 5, 5), line(1, 100, "car", 1, 1, 5, 5)])
    with pytest.raises(OrderingError):
        parse_detection_stream(text, 10, DIMS)


def test_missing_timestamp_filled_from_fps():
    s = parse_detection_stream(line(3, "-", "car", 1, 1, 5, 5), 10, DIMS)
    assert s.frames[0][1][0].timestamp_ms == 300


def test_comments_and_blank_lines_skipped():
    text = "# header\n\n" + line(0, 0, "truck", 1, 1, 5, 5) + "\n"
    assert len(parse_detection_stream(text, 10, DIMS)) == 1


def test_duplicates_are_kept():
    text = "\n".join([line(0, 0, "car", 1, 1, 5, 5)] * 2)
    assert len(parse_detection_stream(text, 10, DIMS).frames[0][1]) == 2


@pytest.mark.parametrize(
    "box,expected",
    [((10, 10, 20, 20), (10, 10, 20, 20)), ((90, 90, 20, 20), (90, 90, 10, 10))],
)
def test_validate_bbox_clamps(box, expected):
    assert validate_bbox(BBox(*box), DIMS).as_tuple() == pytest.approx(expected)


def test_validate_bbox_outside_is_degenerate():
    with pytest.raises(DegenerateBoxError):
        validate_bbox(BBox(120, 10, 5, 5), DIMS)


def test_bbox_rejects_non_positive_size():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 5)
    with pytest.raises(ValueError):
        BBox(float("nan"), 0, 1, 5)


def test_iou_examples():
    a = BBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(5, 5, 2, 2)) == 0.0
    # intersection 2, union 6
    assert iou(a, BBox(1, 0, 2, 2)) == pytest.approx(1 / 3)


def iou_oracle(a, b):
    """Pixel-count overlap on an integer grid scaled by 4 (boxes on quarter-pixel corners)."""
    grid = np.zeros((2, 400, 400), bool)
    for k, bx in enumerate((a, b)):
        x0, y0, x1, y1 = (int(round(v * 4)) for v in (bx.x, bx.y, bx.x2, bx.y2))
        grid[k, y0:y1, x0:x1] = True
    inter = np.logical_and(grid[0], grid[1]).sum()
    union = np.logical_or(grid[0], grid[1]).sum()
    return inter / union


quarter = st.integers(0, 240).map(lambda v: v / 4)
size = st.integers(1, 150).map(lambda v: v / 4)
boxes = st.builds(BBox, quarter, quarter, size, size)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a))
    assert iou(a, a) == pytest.approx(1.0)
    assert v == pytest.approx(iou_oracle(a, b), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 150), st.floats(-50, 150), st.floats(0.5, 80), st.floats(0.5, 80))
def test_validate_bbox_idempotent(x, y, w, h):
    try:
        once = validate_bbox(BBox(x, y, w, h), DIMS)
    except DegenerateBoxError:
        return
    assert validate_bbox(once, DIMS) == once


labels = st.sampled_from(list(ClassLabel))
coords = st.floats(0, 80, allow_nan=False).map(lambda v: round(v, 3))
dets = st.tuples(labels, coords, coords, st.floats(1, 20).map(lambda v: round(v, 3)), st.floats(0, 1))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(dets, min_size=1, max_size=4), max_size=6))
def test_parse_serialize_round_trip(frames_spec):
    frames = []
    for i, ds in enumerate(frames_spec):
        f = 2 * i
        frames.append((f, [Detection(f, 100 * f, lab, BBox(x, y, w, w), c) for lab, x, y, w, c in ds]))
    stream = FrameStream(10.0, DIMS, frames)
    back = parse_detection_stream(serialize_detection_stream(stream), 10.0, DIMS)
    assert back == stream


def test_frame_images_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (12, 16, 3), dtype=np.uint8)
    path = save_frame(tmp_path / "frames", 7, img)
    assert path.name == "frame_000007.png"
    assert np.array_equal(load_frame(tmp_path / "frames", 7), img)
    assert load_frame(tmp_path / "frames", 8) is None

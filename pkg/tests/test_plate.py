import numpy as np
import pytest
from helpers import ROUND_TRIP_COND_CAP, normalised_cond, random_text, warp_into_canvas

from tvd.plate import (
    ALPHABET,
    CROP_SIZE,
    AtlasError,
    CharCrop,
    GeometryError,
    Quad,
    TemplateClassifier,
    font_atlas,
    format_quad,
    homography,
    load_atlas,
    parse_quad_lines,
    read_plate,
    recognize_characters,
    rectify_plate,
    render_plate,
    save_atlas,
    segment_characters,
    template_classify,
)

def test_quad_rejects_self_intersecting():
    with pytest.raises(GeometryError):
        Quad(((0, 0), (10, 10), (10, 0), (0, 10)))
    with pytest.raises(GeometryError):
        Quad(((0, 0), (10, 0), (20, 0), (0, 10)))


def test_quad_area_and_lines_round_trip():
    q = Quad(((1, 2), (11, 2), (11, 7), (1, 7)))
    assert q.area == pytest.approx(50)
    assert q.centroid == (6.0, 4.5)
    (f, t, back), = parse_quad_lines([format_quad(3, 9, q)])
    assert (f, t) == (3, 9) and back == q


def test_axis_aligned_rectify_equals_crop():
    img = np.random.default_rng(1).integers(0, 256, (80, 120, 3), dtype=np.uint8)
    q = Quad(((20, 10), (100, 10), (100, 40), (20, 40)))
    out = rectify_plate(img, q, (80, 30))
    assert np.abs(out.astype(int) - img[10:40, 20:100].astype(int)).max() <= 1


def test_rectify_degenerate_and_outside():
    img = np.zeros((50, 50, 3), np.uint8)
    with pytest.raises(GeometryError):
        rectify_plate(img, Quad.from_flat([0, 0, 10, 10, 10, 0, 0, 10]))
    with pytest.raises(GeometryError):
        rectify_plate(img, Quad(((40, 40), (90, 40), (90, 60), (40, 60))))


def test_round_trip_error_small():
    rng = np.random.default_rng(5)
    for _ in range(25):
        plate = render_plate(random_text(rng)).image
        hh, w = plate.shape[:2]
        scale = rng.uniform(1.0, 1.5)
        base = np.array([[0, 0], [w, 0], [w, hh], [0, hh]], float) * scale + [0.2 * w * scale + 10, 0.2 * hh * scale + 10]
        dst = base + rng.uniform(-0.12, 0.12, (4, 2)) * [w * scale, hh * scale]
        canvas, h = warp_into_canvas(plate, dst)
        assert normalised_cond(h, w, hh, dst) < ROUND_TRIP_COND_CAP
        back = rectify_plate(canvas, Quad(tuple(map(tuple, dst))), (w, hh))
        assert np.abs(back.astype(float) - plate).mean() < 5


def test_segment_known_glyph_boxes():
    r = render_plate("ABC123")
    crops = segment_characters(r.image)
    assert len(crops) == 6
    for crop, glyph in zip(crops, r.glyph_boxes):
        x, y, w, h = crop.box
        gx, gy, gw, gh = glyph
        assert abs(x - gx) <= 2 and abs(x + w - gx - gw) <= 2
    assert [c.index for c in crops] == list(range(6))


def test_blank_plate_has_no_crops():
    assert segment_characters(np.full((60, 240, 3), 230, np.uint8)) == []


def test_tiny_glyph_filtered():
    r = render_plate("ABC123", glyph_heights=[36, 36, 2, 36, 36, 36])
    crops = segment_characters(r.image)
    assert len(crops) == 5
    assert recognize_characters(crops).text == "AB123"


def test_crops_are_binary_80x80():
    rng = np.random.default_rng(2)
    for _ in range(10):
        for c in segment_characters(render_plate(random_text(rng)).image):
            assert c.image.shape == (CROP_SIZE, CROP_SIZE)
            assert set(np.unique(c.image)) <= {0, 255}


def test_recognize_clean_render():
    assert recognize_characters(segment_characters(render_plate("34AB123").image)).text == "34AB123"


def test_recognize_empty_and_corrupted():
    assert recognize_characters([]).text == ""
    crops = segment_characters(render_plate("34AB123").image)
    noise = np.where(np.random.default_rng(0).random((80, 80)) < 0.5, 255, 0).astype(np.uint8)
    crops[2] = CharCrop(noise, 2)
    out = recognize_characters(crops)
    assert out.text == "34?B123" and out.scores[2] == 0.0 and out.confidence == 0.0


def test_recognize_classifier_failure_becomes_unknown():
    def broken(crop):
        raise ValueError("boom")

    out = recognize_characters(segment_characters(render_plate("AB").image), broken)
    assert out.text == "??" and out.scores == (0.0, 0.0)


def test_template_exact_and_inverted():
    atlas = font_atlas()
    assert template_classify(atlas["A"], atlas) == ("A", 1.0)
    assert template_classify(255 - atlas["A"], {"A": atlas["A"]}) == ("A", 0.0)


def test_template_noisy_b():
    atlas = font_atlas()
    img = atlas["B"].copy()
    idx = np.random.default_rng(4).choice(img.size, int(0.05 * img.size), replace=False)
    img.flat[idx] = 255 - img.flat[idx]
    char, score = template_classify(img, atlas)
    # agreement with B is exactly 1 - 0.05; any other template agrees less
    assert char == "B" and score == pytest.approx(0.95)


def test_template_errors(tmp_path):
    with pytest.raises(AtlasError):
        template_classify(np.zeros((80, 80)), {})
    with pytest.raises(AtlasError):
        load_atlas(tmp_path)
    with pytest.raises(ValueError):
        template_classify(np.zeros((10, 10)), font_atlas())


def test_atlas_save_load(tmp_path):
    atlas = font_atlas()
    assert sorted(atlas) == sorted(ALPHABET)
    save_atlas(atlas, tmp_path)
    back = load_atlas(tmp_path)
    assert all(np.array_equal(back[c], atlas[c]) for c in ALPHABET)
    clf = TemplateClassifier(back)
    assert recognize_characters(segment_characters(render_plate("XY42").image), clf).text == "XY42"


def test_read_plate_in_frame():
    plate = render_plate("7KR205").image
    hh, w = plate.shape[:2]
    dst = np.array([[300, 200], [300 + 0.6 * w, 206], [300 + 0.6 * w, 200 + 0.6 * hh + 2], [300, 200 + 0.6 * hh]])
    canvas, _ = warp_into_canvas(plate, dst)
    frame = np.full((400, 600, 3), 90, np.uint8)
    frame[: canvas.shape[0], : canvas.shape[1]] = canvas
    readout, rect = read_plate(frame, Quad(tuple(map(tuple, dst))), (240, 60))
    assert rect.shape == (60, 240, 3)
    assert readout.text == "7KR205"

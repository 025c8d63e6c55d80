import math

import pytest
from helpers import centered, clock, record
from hypothesis import given, settings
from hypothesis import strategies as st

from tvd.ingest import BBox, ClassLabel
from tvd.light import LightColor
from tvd.pipeline import RULES, apply_rules
from tvd.synth import build_table1_corpus, generate_scene, gt_records
from tvd.violations import (
    RuleConfig,
    UndefinedSpeedError,
    ViolationKind,
    detect_breakdown_lane,
    detect_crosswalk_parking,
    detect_following_distance,
    detect_illegal_parking,
    detect_pedestrian_crossing,
    detect_red_light,
    estimate_speed,
    format_event,
    parse_event_lines,
)

CAR = ClassLabel.CAR
W = 960
TS = clock(200)


def rate_track(tid, frames, cx, cy, w0, h0, rate, fps=10.0, label=CAR, dx=0.0):
    """Box whose area changes by exactly ``rate`` (relative, per second) at every step."""
    boxes, area, aspect = {}, w0 * h0, w0 / h0
    x = cx
    for i, f in enumerate(frames):
        if i:
            area *= 1.0 + rate / fps
            x += dx
        w = math.sqrt(area * aspect)
        boxes[f] = centered(x, cy, w, area / w)
    return record(tid, label, boxes)


# -- speed ----------------------------------------------------------------------


def test_speed_static_is_zero():
    t = record(1, CAR, {f: BBox(10, 10, 30, 20) for f in range(10)})
    assert estimate_speed(t, 9, TS).area_rate == 0.0


def test_speed_doubling_area_in_one_second():
    t = record(1, CAR, {0: BBox(0, 0, 10, 10), 10: BBox(0, 0, 20, 10)})
    # (2A - A) / A / 1 s
    assert estimate_speed(t, 10, TS).area_rate == pytest.approx(1.0)


def test_speed_needs_two_points():
    with pytest.raises(UndefinedSpeedError):
        estimate_speed(record(1, CAR, {0: BBox(0, 0, 10, 10)}), 0, TS)


def test_speed_sign_convention():
    grow = rate_track(1, range(12), 100, 100, 40, 30, 0.5)
    shrink = rate_track(2, range(12), 100, 100, 40, 30, -0.5)
    assert estimate_speed(grow, 11, TS).area_rate == pytest.approx(0.5)
    assert estimate_speed(shrink, 11, TS).area_rate == pytest.approx(-0.5)


# -- red light ------------------------------------------------------------------


def red_scene(shrink=0.30):
    boxes = {}
    for f in range(61):
        k = min(max(f - 20, 0), 10) / 10.0
        scale = (1.0 - shrink) ** k
        boxes[f] = centered(480, 350, 100 * math.sqrt(scale), 80 * math.sqrt(scale))
    return record(1, CAR, boxes)


def states(color, n=61):
    return {f: color for f in range(n)}


def test_red_light_pass_detected():
    ev = detect_red_light([red_scene()], states(LightColor.RED), TS)
    assert len(ev) == 1 and ev[0].kind is ViolationKind.RED_LIGHT
    assert ev[0].frame_range[0] <= 20 and ev[0].frame_range[1] >= 30


def test_red_light_needs_red():
    assert detect_red_light([red_scene()], states(LightColor.GREEN), TS) == []


def test_red_light_stationary_vehicle():
    t = record(1, CAR, {f: BBox(400, 300, 100, 80) for f in range(61)})
    assert detect_red_light([t], states(LightColor.RED), TS) == []


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 0.6), st.floats(0.05, 0.5), st.floats(0.0, 0.3))
def test_raising_shrink_frac_never_adds_events(shrink, frac, extra):
    t = [red_scene(shrink)]
    lo = detect_red_light(t, states(LightColor.RED), TS, RuleConfig(shrink_frac=frac))
    hi = detect_red_light(t, states(LightColor.RED), TS, RuleConfig(shrink_frac=frac + extra))
    assert len(hi) <= len(lo)


# -- breakdown lane -------------------------------------------------------------


def jam(offender_cx=800.0, offender_rate=-0.10):
    tracks = [rate_track(i + 1, range(40), 60 + 50 * i, 300, 40, 30, 0.01) for i in range(5)]
    tracks.append(rate_track(6, range(40), offender_cx, 320, 80, 60, offender_rate))
    return tracks


def test_breakdown_outlier_in_right_band():
    # offender moves 10x faster than the jam; scene mean (offender included) stays under the cap
    ev = detect_breakdown_lane(jam(), W, TS)
    assert [(e.kind, e.track_id) for e in ev] == [(ViolationKind.BREAKDOWN_LANE, 6)]


def test_breakdown_equal_speeds():
    tracks = [rate_track(i + 1, range(40), 60 + 150 * i, 300, 40, 30, 0.01) for i in range(6)]
    assert detect_breakdown_lane(tracks, W, TS) == []


def test_breakdown_fast_vehicle_in_left_band():
    assert detect_breakdown_lane(jam(offender_cx=200.0), W, TS) == []


def test_breakdown_needs_slow_traffic():
    tracks = [rate_track(i + 1, range(40), 60 + 50 * i, 300, 40, 30, 0.2) for i in range(5)]
    tracks.append(rate_track(6, range(40), 800, 320, 80, 60, -1.0))
    assert detect_breakdown_lane(tracks, W, TS) == []


def test_breakdown_needs_three_vehicles():
    assert detect_breakdown_lane(jam()[4:], W, TS) == []


# -- following distance ---------------------------------------------------------


def merge(arrival_s, start=20, fps=10.0, entry_cx=940.0, lead_cx=480.0, frames=100):
    lead = record(1, CAR, {f: centered(lead_cx, 320, 120, 90) for f in range(frames)})
    n = arrival_s * fps
    entrant = {}
    for f in range(start, frames):
        cx = entry_cx + (lead_cx - entry_cx) * (f - start) / n
        cx = max(cx, lead_cx - 50) if entry_cx > lead_cx else min(cx, lead_cx + 50)
        entrant[f] = centered(cx, 330, 150, 110)
    return [lead, record(2, CAR, entrant)]


def test_following_merge_under_three_seconds():
    ev = detect_following_distance(merge(2.0), W, TS)
    assert [(e.kind, e.track_id) for e in ev] == [(ViolationKind.FOLLOWING_DISTANCE, 2)]


def test_following_slow_merge():
    assert detect_following_distance(merge(4.0), W, TS) == []


def test_following_never_arrives():
    lead = record(1, CAR, {f: centered(480, 320, 120, 90) for f in range(100)})
    entrant = record(2, CAR, {f: centered(940 - 2 * (f - 20), 330, 150, 110) for f in range(20, 100)})
    assert detect_following_distance([lead, entrant], W, TS) == []


def test_following_boundary_is_strict():
    assert detect_following_distance(merge(2.9), W, TS)
    assert detect_following_distance(merge(3.0), W, TS) == []
    assert detect_following_distance(merge(3.1), W, TS) == []


def test_following_left_entry():
    tracks = merge(2.0, entry_cx=20.0)
    assert len(detect_following_distance(tracks, W, TS)) == 1


def test_following_ignores_vehicles_present_from_start():
    assert detect_following_distance(merge(2.0, start=0), W, TS) == []


# -- pedestrian crossing --------------------------------------------------------


SIGN_X = 470.0


def crossing(halt=False, rate=-0.5, pedestrian=True):
    sign = record(10, ClassLabel.CROSSWALK_SIGN, {f: BBox(SIGN_X, 150, 20, 20) for f in range(80)})
    tracks = []
    if pedestrian:
        tracks.append(record(11, ClassLabel.PERSON, {f: BBox(SIGN_X + 30, 160, 14, 40) for f in range(80)}))
    boxes, area, x = {}, 160.0 * 120.0, 200.0
    for f in range(80):
        inside = SIGN_X - 20 <= x <= SIGN_X + 40
        stopped = halt and inside and 30 <= f < 45
        if f and not stopped:
            area *= 1.0 + rate / 10.0
            x += 10.0
        w = math.sqrt(area * 4 / 3)
        boxes[f] = centered(x, 350, w, area / w)
    tracks.append(record(1, CAR, boxes))
    return tracks, [sign]


def test_pedestrian_waiting_vehicle_passes():
    tracks, signs = crossing()
    ev = detect_pedestrian_crossing(tracks, signs, TS)
    assert [(e.kind, e.track_id) for e in ev] == [(ViolationKind.PEDESTRIAN_CROSSING, 1)]


def test_pedestrian_absent():
    tracks, signs = crossing(pedestrian=False)
    assert detect_pedestrian_crossing(tracks, signs, TS) == []


def test_pedestrian_vehicle_halts():
    tracks, signs = crossing(halt=True)
    car = tracks[-1]
    halted = [f for f, b in car.history if SIGN_X - 20 <= b.cx <= SIGN_X + 40]
    assert len(halted) >= 15
    assert detect_pedestrian_crossing(tracks, signs, TS) == []


@settings(max_examples=60, deadline=None)
@given(st.floats(-1.0, -0.01), st.floats(0.001, 0.5), st.floats(0.0, 0.5), st.booleans())
def test_raising_stop_eps_never_removes_events(rate, eps, extra, halt):
    tracks, signs = crossing(halt=halt, rate=rate)
    lo = detect_pedestrian_crossing(tracks, signs, TS, RuleConfig(stop_eps=eps))
    hi = detect_pedestrian_crossing(tracks, signs, TS, RuleConfig(stop_eps=eps + extra))
    # a larger stop_eps classifies more slow motion as stopping, which can only remove events
    assert len(hi) <= len(lo)


# -- parking --------------------------------------------------------------------


def lockstep(
    n=30, sign_x=700.0, veh_x=620.0, veh_dx=None, sign_w=20.0, label=ClassLabel.NO_STOPPING_SIGN, step=3.0
):
    sign, veh = {}, {}
    for i in range(n):
        d = step * i + 0.2 * (i % 3)
        sign[i] = BBox(sign_x + d, 280, sign_w, sign_w)
        vd = d if veh_dx is None else veh_dx * i
        veh[i] = BBox(veh_x + vd, 300, 80, 60)
    return record(1, CAR, veh), record(10, label, sign)


def test_parking_lockstep_with_sign():
    v, s = lockstep()
    ev = detect_illegal_parking([v], [s], W)
    assert [(e.kind, e.track_id) for e in ev] == [(ViolationKind.ILLEGAL_PARKING, 1)]


def test_parking_needs_sign():
    v, _ = lockstep()
    assert detect_illegal_parking([v], [], W) == []


def test_parking_oncoming_vehicle():
    v, s = lockstep(veh_dx=-4.0)
    assert detect_illegal_parking([v], [s], W) == []


def test_parking_other_half_ignored():
    v, s = lockstep(veh_x=100.0)
    assert detect_illegal_parking([v], [s], W) == []


def test_parking_needs_ego_motion():
    v = record(1, CAR, {i: BBox(620, 300, 80, 60) for i in range(30)})
    s = record(10, ClassLabel.NO_STOPPING_SIGN, {i: BBox(700, 150, 20, 20) for i in range(30)})
    assert detect_illegal_parking([v], [s], W) == []


def test_parking_too_short():
    v, s = lockstep(n=15)
    assert detect_illegal_parking([v], [s], W) == []


def test_crosswalk_parking_near_sign():
    v, s = lockstep(label=ClassLabel.CROSSWALK_SIGN, sign_x=720.0, veh_x=620.0)
    ev = detect_crosswalk_parking([v], [s], W)
    assert [(e.kind, e.track_id) for e in ev] == [(ViolationKind.CROSSWALK_PARKING, 1)]
    assert detect_illegal_parking([v], [s], W) == []


def test_crosswalk_parking_far_from_sign():
    cfg = RuleConfig()
    sign_w = 10.0
    gap = 10 * cfg.crosswalk_r * sign_w
    # sign left edge 400 px right of the vehicle's right edge, both drifting left together
    v, s = lockstep(label=ClassLabel.CROSSWALK_SIGN, sign_x=560.0 + gap, veh_x=480.0, sign_w=sign_w, step=-1.0)
    assert v.history[0][1].cx >= W / 2
    assert detect_crosswalk_parking([v], [s], W, cfg) == []


def test_crosswalk_parking_moving_vehicle():
    v, s = lockstep(label=ClassLabel.CROSSWALK_SIGN, sign_x=720.0, veh_x=620.0, veh_dx=-2.0)
    assert detect_crosswalk_parking([v], [s], W) == []


# -- whole-corpus properties on ground-truth tracks -----------------------------


@pytest.fixture(scope="module")
def gt_corpus():
    out = []
    for spec in build_table1_corpus(7):
        scene = generate_scene(spec)
        gt = scene.ground_truth
        ts = {f: f * 1000.0 / spec.fps for f in range(spec.duration_frames)}
        out.append((spec, gt, gt_records(gt), ts))
    return out


def test_rules_are_independent(gt_corpus):
    for spec, gt, records, ts in gt_corpus:
        planted = {p.kind for p in gt.expected}
        for rule, kind in RULES.items():
            ev = apply_rules(records, gt.light_states, ts, spec.frame_dims[0], RuleConfig(), [rule], 0)
            if kind not in planted:
                assert ev == [], (spec.name, rule)
            else:
                assert {e.track_id for e in ev} == {p.actor for p in gt.expected if p.kind is kind}, spec.name


def test_events_well_formed_and_deterministic(gt_corpus):
    for spec, gt, records, ts in gt_corpus:
        a = apply_rules(records, gt.light_states, ts, spec.frame_dims[0], RuleConfig(), list(RULES), 0)
        b = apply_rules(records, gt.light_states, ts, spec.frame_dims[0], RuleConfig(), list(RULES), 0)
        assert [format_event(e) for e in a] == [format_event(e) for e in b]
        keys = [(e.kind, e.track_id) for e in a]
        assert len(keys) == len(set(keys))
        by_id = {r.track_id: r for r in records}
        for e in a:
            lo, hi = e.frame_range
            assert lo <= hi and 0.0 <= e.score <= 1.0
            boxes = by_id[e.track_id].boxes()
            assert e.evidence and all(lo <= f <= hi and f in boxes for f in e.evidence)


def test_event_lines_round_trip():
    ev = detect_red_light([red_scene()], states(LightColor.RED), TS)
    parsed = parse_event_lines([format_event(e) for e in ev])
    assert parsed[0][:4] == ("red_light", 1, ev[0].frame_range[0], ev[0].frame_range[1])

import hashlib
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import yaml

from tvd.ingest import ClassLabel, parse_detection_stream, serialize_detection_stream
from tvd.synth import (
    NOISELESS,
    TABLE1,
    ActorSpec,
    NoiseSpec,
    ScenarioError,
    ScenarioSpec,
    build_table1_corpus,
    dump_spec,
    generate_scene,
    load_spec,
    seeded_generator,
    self_check,
    spec_from_dict,
    spec_to_dict,
    write_scene,
)


def three_cars(duration=50, noise=NOISELESS, seed=3):
    actors = [
        ActorSpec(i + 1, ClassLabel.CAR, [(0, 200.0 + 200 * i, 300.0, 80.0, 60.0), (duration - 1, 260.0 + 200 * i, 300.0, 80.0, 60.0)])
        for i in range(3)
    ]
    return ScenarioSpec("three", seed, actors, duration_frames=duration, noise=noise, render=False)


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_noiseless_count():
    scene = generate_scene(three_cars(50))
    assert sum(len(d) for _, d in scene.stream.frames) == 150


def test_dropout_matches_seeded_sequence():
    spec = three_cars(334, NoiseSpec(0.0, 0.0, 0.1), seed=11)
    scene = generate_scene(spec)
    # replay the generator: each visible actor draws one uniform then four normals
    rng = seeded_generator(11)
    kept = 0
    for _ in range(334 * 3):
        u = rng.random()
        rng.standard_normal(4)
        kept += u >= 0.1
    got = sum(len(d) for _, d in scene.stream.frames)
    assert got == kept
    assert 0.05 < 1 - got / 1002 < 0.15


def test_same_seed_same_bytes(tmp_path):
    spec = three_cars(12, NoiseSpec())
    spec.render = True
    a = write_scene(generate_scene(spec), tmp_path / "a")
    b = write_scene(generate_scene(spec), tmp_path / "b")
    assert tree_digest(a) == tree_digest(b)
    assert len(list((a / "frames").iterdir())) == 12


def test_different_seed_differs():
    a = serialize_detection_stream(generate_scene(three_cars(20, NoiseSpec(), seed=1)).stream)
    b = serialize_detection_stream(generate_scene(three_cars(20, NoiseSpec(), seed=2)).stream)
    assert a != b


def test_stream_passes_ingest_validation():
    stream = generate_scene(three_cars(30, NoiseSpec())).stream
    back = parse_detection_stream(serialize_detection_stream(stream), stream.fps, stream.frame_dims)
    assert serialize_detection_stream(back) == serialize_detection_stream(stream)


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda d: d.update(seed=-1), "seed"),
        (lambda d: d.update(fps=0), "fps"),
        (lambda d: d.update(duration_frames=0), "duration_frames"),
        (lambda d: d["noise"].update(dropout=1.5), "noise"),
        (lambda d: d["actors"][1].update(id=1), "actors[1].id"),
        (lambda d: d["actors"][0].update(label="bicycle"), "actors[0].label"),
        (lambda d: d["actors"][0]["waypoints"][1].__setitem__(3, -5.0), "actors[0].waypoints[1]"),
        (lambda d: d["actors"][0].update(plate="ab-1"), "actors[0].plate"),
        (lambda d: d.update(planted_violations=[{"kind": "red_light", "actor": 99, "frame_range": [0, 1]}]),
         "planted_violations[0].actor"),
        (lambda d: d.pop("name"), "name"),
    ],
)
def test_invalid_spec_names_field(mutate, field):
    d = spec_to_dict(three_cars())
    mutate(d)
    with pytest.raises(ScenarioError) as exc:
        spec_from_dict(d)
    assert exc.value.field == field


def test_yaml_round_trip(tmp_path):
    spec = build_table1_corpus(7)[0]
    path = tmp_path / "s.yaml"
    path.write_text(dump_spec(spec))
    back = load_spec(path)
    assert spec_to_dict(back) == spec_to_dict(spec)
    assert yaml.safe_load(dump_spec(back)) == spec_to_dict(spec)


def test_malformed_yaml(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text("name: [unclosed")
    with pytest.raises(ScenarioError):
        load_spec(path)


@pytest.fixture(scope="module")
def corpus():
    return build_table1_corpus(7)


def test_corpus_composition(corpus):
    violating = [s for s in corpus if s.planted_violations]
    controls = [s for s in corpus if not s.planted_violations]
    assert len(violating) == 14 and len(controls) == 14
    planted = [p for s in corpus for p in s.planted_violations]
    assert len(planted) == 23
    kinds = Counter(p.kind for p in planted)
    scenes = Counter({k: sum(any(p.kind is k for p in s.planted_violations) for s in corpus) for k in TABLE1})
    for kind, (n_scenes, n_violations) in TABLE1.items():
        assert (scenes[kind], kinds[kind]) == (n_scenes, n_violations), kind
    assert len({s.name for s in corpus}) == 28


def test_corpus_deterministic_per_seed():
    assert [dump_spec(s) for s in build_table1_corpus(3)] == [dump_spec(s) for s in build_table1_corpus(3)]
    assert [dump_spec(s) for s in build_table1_corpus(3)] != [dump_spec(s) for s in build_table1_corpus(4)]


def test_corpus_self_check(corpus):
    problems = [p for s in corpus for p in self_check(generate_scene(s))]
    assert problems == []


def test_plated_actors_have_quads(corpus):
    scene = generate_scene(corpus[0])
    plated = {a.id for a in corpus[0].actors if a.plate}
    assert plated and plated <= {a for _, a, _ in scene.quads}
    assert all(np.isfinite(q.array).all() for _, _, q in scene.quads)

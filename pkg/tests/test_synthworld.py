import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from elfua.data import GazeLabel, load_manifest
from elfua.synthworld import (
    MAX_BIAS,
    SynthPersonSpec,
    SynthWorldConfig,
    eye_centers,
    generate_world,
    pupil_offset,
    render_face,
    sample_person,
)


def _spec(bias=(0.0, 0.0), pid="p"):
    return SynthPersonSpec(pid, bias, 1.5, 14.0, 0.6, 0.0)


def _pupil_center(img, cx, cy, r=4):
    dark = 1.0 - img[..., 0]
    ys, xs = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    mask = (np.hypot(xs - cx, ys - cy) <= r) & (dark > 0.5)
    w = dark * mask
    return float((w * xs).sum() / w.sum()), float((w * ys).sum() / w.sum())


def test_zero_gaze_centers_pupils():
    spec = _spec()
    img = render_face(spec, GazeLabel(0.0, 0.0), 64)
    for cx, cy in eye_centers(spec, 64):
        px, py = _pupil_center(img, cx, cy)
        assert abs(px - cx) < 0.5 and abs(py - cy) < 0.5


def test_yaw_mirrors_offset():
    dx, dy = pupil_offset(_spec(), GazeLabel(0.3, 0.2))
    mx, my = pupil_offset(_spec(), GazeLabel(-0.3, 0.2))
    assert dx == pytest.approx(-mx) and dy == pytest.approx(my) and dx > 0


def test_bias_shifts_pupils_by_projected_delta():
    g = GazeLabel(0.1, -0.05)
    a, b = _spec((0.0, 0.0)), _spec((0.2, -0.1))
    reach = 5.0 - 1.5
    expected = (reach * math.cos(-0.15) * math.sin(0.3) - reach * math.cos(-0.05) * math.sin(0.1),
                -reach * math.sin(-0.15) + reach * math.sin(-0.05))
    got = np.subtract(pupil_offset(b, g), pupil_offset(a, g))
    np.testing.assert_allclose(got, expected, atol=1e-12)
    img_a, img_b = render_face(a, g, 64), render_face(b, g, 64)
    (cx, cy) = eye_centers(a, 64)[0]
    pa = _pupil_center(img_a, cx + 2 * pupil_offset(a, g)[0], cy + 2 * pupil_offset(a, g)[1])
    pb = _pupil_center(img_b, cx + 2 * pupil_offset(b, g)[0], cy + 2 * pupil_offset(b, g)[1])
    np.testing.assert_allclose(np.subtract(pb, pa), 2 * got, atol=0.35)


def test_spec_ranges():
    with pytest.raises(ValueError):
        _spec((0.4, 0.0))
    with pytest.raises(ValueError):
        SynthPersonSpec("p", (0, 0), 3.0, 14.0, 0.6, 0.0)
    with pytest.raises(ValueError):
        SynthWorldConfig(n_train_persons=0)


@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0, 0.35), shift=st.floats(0, 1))
def test_sampled_persons_valid(seed, scale, shift):
    spec = sample_person("p", scale, np.random.default_rng(seed), shift)
    assert all(abs(b) <= min(scale, MAX_BIAS) for b in spec.gaze_bias)


def test_world_layout_and_labels(tmp_path):
    cfg = SynthWorldConfig(n_train_persons=5, n_test_persons=2, samples_per_person=20,
                           n_source_persons=3, source_samples_per_person=4, seed=1)
    src, train, test = generate_world(cfg, tmp_path)
    rows = [json.loads(l) for l in train.read_text().splitlines()]
    assert len(rows) == 100 and len({r["person_id"] for r in rows}) == 5
    assert all("yaw" not in r for r in rows)
    persons = load_manifest(train, "person-specific", image_size=32)
    assert len(persons) == 5
    labeled = load_manifest(test, "person-specific", image_size=32, oracle_mode=True)
    assert all(abs(s.label.yaw) <= 0.5 and abs(s.label.pitch) <= 0.5
               for v in labeled.persons.values() for s in v)
    source = load_manifest(src, "source", image_size=32)
    assert len(source) == 12
    world = json.loads((tmp_path / "world.json").read_text())
    assert all(p["gaze_bias"] == [0.0, 0.0] for p in world["persons"]["source"])


def test_labels_hold_true_gaze(tmp_path):
    cfg = SynthWorldConfig(n_train_persons=1, n_test_persons=1, samples_per_person=3,
                           n_source_persons=1, source_samples_per_person=1, seed=4)
    generate_world(cfg, tmp_path)
    world = json.loads((tmp_path / "world.json").read_text())
    spec = SynthPersonSpec(**{**world["persons"]["test"][0], "gaze_bias": tuple(world["persons"]["test"][0]["gaze_bias"])})
    row = json.loads((tmp_path / "persons_test.jsonl").read_text().splitlines()[0])
    from elfua.seeding import derive_seed
    expected = render_face(spec, GazeLabel(row["yaw"], row["pitch"]), 32, derive_seed(4, "noise", "test", 0, 0))
    got = load_manifest(tmp_path / "persons_test.jsonl", "person-specific", image_size=32,
                        oracle_mode=True, min_per_person=1).persons[spec.person_id][0].image
    np.testing.assert_allclose(got, np.round(expected * 255) / 255, atol=1e-6)


def test_same_seed_same_bytes(tmp_path):
    cfg = SynthWorldConfig(n_train_persons=2, n_test_persons=1, samples_per_person=3,
                           n_source_persons=2, source_samples_per_person=2, seed=9)
    generate_world(cfg, tmp_path / "a")
    generate_world(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_zero_bias_world(tmp_path):
    cfg = SynthWorldConfig(n_train_persons=3, n_test_persons=3, samples_per_person=2,
                           n_source_persons=1, source_samples_per_person=1, bias_scale=0.0)
    generate_world(cfg, tmp_path)
    world = json.loads((tmp_path / "world.json").read_text())
    assert all(p["gaze_bias"] == [0.0, 0.0] for group in world["persons"].values() for p in group)


def test_bias_drives_per_person_error_spread(tmp_path):
    from elfua.adaptation import evaluate_protocol
    from elfua.config import TrainConfig, tiny_model_config
    from elfua.meta import train_supervised

    spreads = {}
    predictor = None
    for scale in (0.0, 0.3):
        cfg = SynthWorldConfig(n_train_persons=1, n_test_persons=12, samples_per_person=12,
                               n_source_persons=40, source_samples_per_person=10, bias_scale=scale, seed=2)
        generate_world(cfg, tmp_path / str(scale))
        if predictor is None:  # the source split does not depend on bias_scale
            source = load_manifest(tmp_path / str(scale) / "source.jsonl", "source", image_size=32)
            tcfg = TrainConfig(total_outer_steps=150, beta=3e-3, n_tasks=4, source_batch=32, seed=2)
            predictor = train_supervised(source, tcfg, tiny_model_config())
        test = load_manifest(tmp_path / str(scale) / "persons_test.jsonl", "person-specific",
                             image_size=32, oracle_mode=True)
        rep = evaluate_protocol(predictor, test, tcfg, "no-adapt", support_size=1)
        spreads[scale] = float(np.std([r.error_post_deg for r in rep.records]))
    assert spreads[0.0] < spreads[0.3]

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hazelab import haze
from hazelab.tensor_io import read_tensor


def test_transmission_examples():
    assert haze.transmission_from_depth(np.zeros((2, 2)), 0.35).tolist() == [[1.0, 1.0], [1.0, 1.0]]
    t = haze.transmission_from_depth(np.array([[2.0]]), 0.35)[0, 0]
    assert abs(t - math.exp(-0.7)) < 1e-15
    assert abs(t - 0.49659) < 1e-5
    t = haze.transmission_from_depth(np.array([[1.0, 2.0]]), 0.35)
    assert t[0, 0] > t[0, 1]


def test_transmission_rejects_bad_input():
    with pytest.raises(ValueError):
        haze.transmission_from_depth(np.array([[-0.1]]))
    with pytest.raises(ValueError):
        haze.transmission_from_depth(np.array([[1.0]]), beta=0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(0.01, 2), st.floats(0.01, 2))
def test_transmission_positive_and_monotone(d1, d2, b1, b2):
    t = lambda d, b: haze.transmission_from_depth(np.array([[d]]), b)[0, 0]
    assert t(d1, b1) > 0
    lo, hi = sorted((d1, d2))
    assert t(lo, b1) >= t(hi, b1)
    blo, bhi = sorted((b1, b2))
    assert t(d1, blo) >= t(d1, bhi)


def test_synthesize_examples():
    J = np.full((2, 2, 3), 0.8)
    assert np.allclose(haze.synthesize(J, np.ones((2, 2)), 1.0), J)
    assert np.allclose(haze.synthesize(J, np.full((2, 2), 0.5), 1.0), 0.9)
    A = np.random.default_rng(0).uniform(0.3, 1.5, (2, 2, 3))
    np.testing.assert_allclose(haze.synthesize(J, np.zeros((2, 2)), A), A)
    with pytest.raises(ValueError):
        haze.synthesize(J, np.ones((3, 2)), 1.0)


def test_synthesize_not_clipped():
    I = haze.synthesize(np.full((1, 1, 3), 0.9), np.full((1, 1), 0.2), np.full((1, 1, 3), 1.8))
    assert I.max() > 1.0


def test_synthesize_convex_combination():
    rng = np.random.default_rng(1)
    J = rng.uniform(0, 1, (16, 16, 3))
    A = rng.uniform(0.24, 1.8, (16, 16, 3))
    t = rng.uniform(0, 1, (16, 16))
    I = haze.synthesize(J, t, A)
    assert np.all(I >= np.minimum(J, A) - 1e-12)
    assert np.all(I <= np.maximum(J, A) + 1e-12)


def test_dehaze_scalar_examples():
    I = np.full((1, 1, 3), 0.9)
    t = np.full((1, 1), 0.5)
    np.testing.assert_allclose(haze.dehaze_scalar(I, t, 1.0), 0.8)
    A = np.array([0.7, 0.9, 1.1])
    np.testing.assert_allclose(haze.dehaze_scalar(np.broadcast_to(A, (3, 3, 3)), np.full((3, 3), 0.3), A), np.broadcast_to(A, (3, 3, 3)))
    J = np.random.default_rng(2).uniform(0, 1, (4, 4, 3))
    t = np.random.default_rng(3).uniform(0.1, 1, (4, 4))
    np.testing.assert_allclose(haze.dehaze_scalar(haze.synthesize(J, t, A), t, A), J, atol=1e-12)


def test_dehaze_floors_transmission(caplog):
    I = np.full((1, 2, 3), 0.5)
    t = np.array([[0.0, 0.5]])
    J = haze.dehaze_scalar(I, t, 1.0)
    assert np.all(np.isfinite(J))
    np.testing.assert_allclose(J[0, 0], (0.5 - 1.0) / 0.05 + 1.0)
    assert "clamped" in caplog.text


def test_dehaze_map_examples():
    rng = np.random.default_rng(4)
    J = rng.uniform(0, 1, (8, 8, 3))
    A = rng.uniform(0.24, 1.8, (8, 8, 3))
    t = rng.uniform(0.05, 1, (8, 8))
    np.testing.assert_allclose(haze.dehaze_map(haze.synthesize(J, t, A), t, A), J, atol=1e-12)
    np.testing.assert_allclose(haze.dehaze_map(A, t, A), A, atol=1e-15)
    Ac = np.array([0.5, 1.0, 1.4])
    I = haze.synthesize(J, t, Ac)
    assert np.array_equal(haze.dehaze_map(I, t, np.broadcast_to(Ac, I.shape).copy()), haze.dehaze_scalar(I, t, Ac))


def test_dehaze_map_matches_rearranged_form():
    # J = ((t - 1) / t) A + I / t
    rng = np.random.default_rng(5)
    I = rng.uniform(0, 1.5, (6, 6, 3))
    A = rng.uniform(0.24, 1.8, (6, 6, 3))
    t = rng.uniform(0.05, 1, (6, 6))[:, :, None]
    np.testing.assert_allclose(haze.dehaze_map(I, t[:, :, 0], A), (t - 1) / t * A + I / t, rtol=1e-12)


def test_roundtrip_float32():
    rng = np.random.default_rng(6)
    J = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
    A = haze.sample_light_map(1, 64, 64).astype(np.float32)
    t = rng.uniform(0.05, 1, (64, 64)).astype(np.float32)
    back = haze.dehaze_map(haze.synthesize(J, t, A), t, A)
    assert back.dtype == np.float32
    assert np.abs(back - J).max() < 1e-5


def test_sample_light_map_contract():
    a = haze.sample_light_map(42, 32, 24)
    b = haze.sample_light_map(42, 32, 24)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (32, 24, 3)
    assert a.min() >= 0.24 and a.max() <= 1.8
    assert not np.array_equal(a, haze.sample_light_map(43, 32, 24))


def test_sample_light_map_bounds_over_many_seeds():
    for seed in range(200):
        a = haze.sample_light_map(seed, 8, 8)
        base_lo, base_hi = a.min() / 1.2, a.max() / 0.8
        assert a.min() >= 0.3 * 0.8 and a.max() <= 1.5 * 1.2
        assert base_lo <= 1.5 and base_hi >= 0.3


def test_sample_light_map_zero_perturbation():
    a = haze.sample_light_map(7, 5, 5, haze.HazeParams(perturbation_fraction=0.0))
    assert np.all(a == a[0, 0, 0])
    assert 0.3 <= a[0, 0, 0] <= 1.5


def test_hazeparams_validation():
    with pytest.raises(ValueError):
        haze.HazeParams(beta=0)
    with pytest.raises(ValueError):
        haze.HazeParams(base_light_range=(1.5, 0.3))
    with pytest.raises(ValueError):
        haze.HazeParams(perturbation_fraction=1.0)


def test_synthesize_scene_roundtrip_and_determinism():
    rng = haze.scene_rng(0, 1)
    clean, depth = haze.random_scene(rng, 32, 32)
    a = haze.synthesize_scene(clean, depth, seed=5, index=2)
    b = haze.synthesize_scene(clean, depth, seed=5, index=2)
    for k in ("hazy", "t", "A"):
        assert a[k].tobytes() == b[k].tobytes()
    np.testing.assert_allclose(haze.dehaze_map(a["hazy"], a["t"], a["A"]), clean, atol=1e-5)
    with pytest.raises(ValueError):
        haze.synthesize_scene(clean, depth[:-1], seed=5)


def test_build_dataset_layout(tmp_path):
    summary = haze.build_dataset(tmp_path, haze.toy_pairs(5, 16, seed=1), seed=9, test_fraction=0.4)
    assert len(summary["splits"]["test"]) == 2
    scene = tmp_path / "scenes" / "toy0000"
    for name in ("clean.png", "depth.fwbt", "hazy.fwbt", "hazy.png", "t.fwbt", "A.fwbt", "manifest.json"):
        assert (scene / name).is_file()
    manifest = json.loads((scene / "manifest.json").read_text())
    assert manifest["beta"] == 0.35
    assert manifest["base_light_range"] == [0.3, 1.5]
    assert manifest["seed"] == 9
    assert read_tensor(scene / "hazy.fwbt").shape == (16, 16, 3)
    assert read_tensor(scene / "t.fwbt").shape == (16, 16)


def test_build_dataset_byte_identical(tmp_path):
    for name in ("a", "b"):
        haze.build_dataset(tmp_path / name, haze.toy_pairs(3, 16, seed=2), seed=4)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_split_tags():
    tags = haze.split_tags(1449, 449 / 1449, seed=0)
    assert tags.count("test") == 449 and tags.count("train") == 1000
    assert tags == haze.split_tags(1449, 449 / 1449, seed=0)

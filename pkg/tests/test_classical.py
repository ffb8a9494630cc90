import numpy as np
import pytest

from hazelab import classical, haze
from hazelab.classical import DcpParams
from hazelab.colorspace import ciede2000, psnr, rgb_to_lab
from oracles import dark_channel_bruteforce


def test_dark_channel_constant():
    img = np.full((9, 9, 3), 0.37)
    np.testing.assert_array_equal(classical.dark_channel(img, 5), np.full((9, 9), 0.37))


def test_dark_channel_bounded_by_channel_min():
    img = np.random.default_rng(0).uniform(0, 1, (12, 10, 3))
    assert np.all(classical.dark_channel(img, 3) <= img.min(axis=2))


def test_dark_channel_matches_enumeration():
    rng = np.random.default_rng(1)
    img = rng.uniform(0.2, 1, (7, 9, 3))
    img[3, 4, 1] = 0.0
    for patch in (1, 3, 5):
        got = classical.dark_channel(img, patch)
        np.testing.assert_array_equal(got, np.array(dark_channel_bruteforce(img.tolist(), patch)))
    got = classical.dark_channel(img, 3)
    zero = np.zeros((7, 9), bool)
    zero[2:5, 3:6] = True
    np.testing.assert_array_equal(got == 0, zero)


def test_dark_channel_even_patch_rejected():
    with pytest.raises(ValueError):
        classical.dark_channel(np.zeros((4, 4, 3)), 4)


def test_dark_channel_properties():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (20, 20, 3))
    prev = classical.dark_channel(img, 1)
    for patch in (3, 5, 7, 9):
        cur = classical.dark_channel(img, patch)
        assert np.all(cur <= prev)
        prev = cur
    for c in (0.5, 2.0, 3.7):
        np.testing.assert_allclose(classical.dark_channel(c * img, 5), c * classical.dark_channel(img, 5), rtol=1e-14)


def test_airlight_examples():
    c = np.array([0.2, 0.5, 0.7])
    assert classical.estimate_airlight_scalar(np.broadcast_to(c, (30, 30, 3))).tolist() == c.tolist()
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 0.5, (40, 40, 3))
    img[5:25, 10:30] = 1.0
    np.testing.assert_array_equal(classical.estimate_airlight_scalar(img, DcpParams(patch=3, airlight_fraction=0.01)), [1, 1, 1])


def test_airlight_tie_break_lowest_index():
    img = np.full((10, 10, 3), 0.1)
    img[1:4, 6:9] = (0.9, 0.8, 0.7)
    img[5:8, 0:3] = (0.7, 0.9, 0.8)  # same channel sum and dark channel, later in raster order
    A = classical.estimate_airlight_scalar(img, DcpParams(patch=3, airlight_fraction=0.05))
    np.testing.assert_array_equal(A, [0.9, 0.8, 0.7])


def test_dcp_params_validation():
    for kwargs in ({"patch": 4}, {"patch": 1}, {"omega": 0}, {"t0": 1.0}, {"airlight_fraction": 0.1}):
        with pytest.raises(ValueError):
            DcpParams(**kwargs)


def test_dcp_transmission_examples():
    A = np.array([0.8, 0.9, 1.0])
    p = DcpParams()
    t = classical.dcp_transmission(np.broadcast_to(A, (16, 16, 3)), A, p)
    np.testing.assert_allclose(t, 0.1)
    np.testing.assert_array_equal(classical.dcp_transmission(np.zeros((16, 16, 3)), A, p), 1.0)
    rng = np.random.default_rng(4)
    t = classical.dcp_transmission(rng.uniform(0, 1.5, (16, 16, 3)), A, p)
    assert t.min() >= 0.1 and t.max() <= 1.0
    with pytest.raises(ValueError):
        classical.dcp_transmission(np.zeros((4, 4, 3)), [0.0, 1.0, 1.0], p)


def _scene(index, perturbation=0.2, size=48):
    clean, depth = haze.random_scene(haze.scene_rng(100, index), size, size)
    res = haze.synthesize_scene(clean, depth, haze.HazeParams(perturbation_fraction=perturbation), seed=100, index=index)
    return clean, res


def test_dcp_dehaze_improves_homogeneous_scene():
    clean, res = _scene(0, perturbation=0.0)
    out = classical.dcp_dehaze(res["hazy"])
    assert out["t"].min() >= 0.1
    assert psnr(np.clip(out["J"], 0, 1), clean) > psnr(np.clip(res["hazy"], 0, 1), clean)
    again = classical.dcp_dehaze(res["hazy"])
    assert all(np.array_equal(out[k], again[k]) for k in ("J", "t", "A"))


def test_retrofit_constant_map_is_scalar_inversion():
    clean, res = _scene(1)
    out = classical.dcp_dehaze(res["hazy"])
    const = np.broadcast_to(out["A"], res["hazy"].shape).copy()
    assert np.array_equal(classical.retrofit_dehaze(res["hazy"], out["t"], const), out["J"])
    assert np.array_equal(classical.retrofit_dehaze(res["hazy"], out["t"], const), haze.dehaze_scalar(res["hazy"], out["t"], out["A"]))


def test_retrofit_ground_truth_recovers_clean():
    clean, res = _scene(2)
    np.testing.assert_allclose(classical.retrofit_dehaze(res["hazy"], res["t"], res["A"]), clean, atol=1e-5)
    with pytest.raises(ValueError):
        classical.retrofit_dehaze(res["hazy"], res["t"], res["A"][:-1])


def test_retrofit_beats_mean_light_on_nonhomogeneous_scene():
    clean, res = _scene(3)
    lab_clean = rgb_to_lab(clean)
    t = classical.dcp_dehaze(res["hazy"])["t"]
    mapped = classical.retrofit_dehaze(res["hazy"], t, res["A"])
    scalar = haze.dehaze_scalar(res["hazy"], t, res["A"].mean(axis=(0, 1)))
    c_map = ciede2000(rgb_to_lab(np.clip(mapped, 0, 1)), lab_clean)[0]
    c_scalar = ciede2000(rgb_to_lab(np.clip(scalar, 0, 1)), lab_clean)[0]
    assert c_map < c_scalar

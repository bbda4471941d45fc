import math
import os
from pathlib import Path

import numpy as np
import pytest

import fovea_stacking as fs

DATA = Path(os.environ.get("FOVEA_DATA_DIR", Path(__file__).resolve().parents[2] / "data"))


@pytest.fixture(scope="module")
def system():
    return fs.OpticalSystem(fs.SystemConfig.load(DATA / "systems" / "default_system.json"))


def test_osa_indexing_round_trip():
    for j in range(15):
        n, m = fs.osa_to_nm(j)
        assert fs.osa_index(n, m) == j
    assert fs.term_count(4) == 15
    with pytest.raises(ValueError):
        fs.osa_index(2, 1)


def test_expansion_eval_and_fit():
    e = fs.Expansion(4, 5.0)
    e[4] = 1.0
    assert e.eval(1.0, 0.0) == pytest.approx(math.sqrt(3.0))
    with pytest.raises(ValueError):
        e.eval(1.5, 0.0)
    rng = np.random.default_rng(0)
    r = 5.0 * np.sqrt(rng.uniform(0, 1, 400))
    t = rng.uniform(-np.pi, np.pi, 400)
    x, y = r * np.cos(t), r * np.sin(t)
    opd = [e.eval_xy(a, b) for a, b in zip(x, y)]
    fitted, rms = fs.fit(list(x), list(y), opd, 4, 5.0)
    assert rms < 1e-9
    assert fitted[4] == pytest.approx(1.0)


def test_system_geometry(system):
    assert system.effective_focal_length_mm == pytest.approx(50.0, rel=1e-3)
    assert system.object_distance_mm == pytest.approx(652.0)


def test_single_point_correction(system):
    p = fs.field_point(system, 0.9, 0.0, system.object_distance_mm)
    flat = fs.Expansion(4, 5.0)
    before = fs.rms_spot(system, flat, p)
    plate, after = fs.optimize_single(system, [p], max_iterations=200)
    assert after < before
    assert fs.rms_spot(system, plate, p) == pytest.approx(after, rel=1e-9)


def test_fusion_on_arrays():
    img = fs.natural_texture(48, 48, 1)
    assert img.shape == (48, 48, 3)
    fused, index = fs.fuse_sharpness([img, img], blur_radius=2.0)
    assert np.allclose(fused, img)
    assert index.shape == (48, 48)
    assert fs.psnr(img, img) == pytest.approx(99.0)
    assert fs.ssim(img, img) == pytest.approx(1.0)


def test_device_and_grid_control():
    dev = fs.SyntheticDevice()
    w = dev.apply(np.zeros(fs.ELECTRODES))
    assert np.allclose(w, 0.0)
    with pytest.raises(ValueError):
        dev.apply(np.full(fs.ELECTRODES, fs.VMAX + 1.0))
    anchors = [[0.0], [1.0], [2.0], [3.0]]
    value, clamped = fs.grid_control(anchors, 2, 2, 0.5, 0.5)
    assert value[0] == pytest.approx(1.5)
    assert not clamped

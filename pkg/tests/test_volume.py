import numpy as np
import pytest

import _oracles
from lvmesh.volume import (
    ImageVolume,
    LabelVolume,
    VolumeError,
    read_mhd,
    resample_z,
    sample_trilinear,
    sample_trilinear_with_gradient,
    write_mhd,
)


def test_mhd_roundtrip_bitexact_u8(tmp_path):
    rng = np.random.default_rng(0)
    vol = ImageVolume(rng.integers(0, 256, (5, 6, 7)).astype(np.uint8),
                      (0.9, 1.1, 2.0), (1.0, -2.0, 3.0))
    path = str(tmp_path / "vol.mhd")
    write_mhd(vol, path)
    back = read_mhd(path)
    assert np.array_equal(back.data, vol.data)
    assert back.spacing == vol.spacing
    assert back.origin == vol.origin


def test_mhd_roundtrip_bitexact_f32_channels(tmp_path):
    rng = np.random.default_rng(1)
    vol = ImageVolume(rng.standard_normal((4, 5, 6, 3)).astype(np.float32), (1, 1, 2))
    path = str(tmp_path / "field.mhd")
    write_mhd(vol, path)
    back = read_mhd(path)
    assert back.channels == 3
    assert np.array_equal(back.data, vol.data)


def test_mhd_roundtrip_labels(tmp_path):
    vol = LabelVolume(np.arange(24).reshape(2, 3, 4) % 4, (1, 1, 1))
    path = str(tmp_path / "lbl.mhd")
    write_mhd(vol, path)
    back = read_mhd(path, labels=True)
    assert isinstance(back, LabelVolume)
    assert np.array_equal(back.data, vol.data)


def test_mhd_raw_is_little_endian_x_fastest(tmp_path):
    data = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    path = str(tmp_path / "o.mhd")
    write_mhd(ImageVolume(data, (1, 1, 1)), path)
    raw = (tmp_path / "o.raw").read_bytes()
    # x varies fastest, z slowest: payload equals C-order (z, y, x) flatten
    assert raw == bytes(range(8))


def test_mhd_missing_key_raises(tmp_path):
    path = tmp_path / "bad.mhd"
    path.write_text("ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\n")
    with pytest.raises(VolumeError):
        read_mhd(str(path))


def test_mhd_payload_size_mismatch(tmp_path):
    vol = ImageVolume(np.zeros((2, 2, 2), dtype=np.uint8), (1, 1, 1))
    path = str(tmp_path / "v.mhd")
    write_mhd(vol, path)
    (tmp_path / "v.raw").write_bytes(b"\x00" * 7)
    with pytest.raises(VolumeError):
        read_mhd(path)


def test_trilinear_reproduces_trilinear_function():
    # a function linear in each axis is reproduced exactly inside the grid
    spacing, origin = (0.7, 1.3, 2.1), (-1.0, 2.0, 0.5)
    nz, ny, nx = 5, 6, 7
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    x = origin[0] + xx * spacing[0]
    y = origin[1] + yy * spacing[1]
    z = origin[2] + zz * spacing[2]
    data = 2.0 + 0.5 * x - 1.5 * y + 0.25 * z + 0.1 * x * y * z
    vol = ImageVolume(data, spacing, origin)
    rng = np.random.default_rng(3)
    lo = np.array(origin)
    hi = lo + (np.array([nx, ny, nz]) - 1) * np.array(spacing)
    pts = rng.uniform(lo, hi, size=(50, 3))
    got = sample_trilinear(vol, pts)
    ref = [_oracles.trilinear(vol.data, spacing, origin, p) for p in pts]
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_trilinear_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    vol = ImageVolume(rng.standard_normal((6, 6, 6)), (0.8, 1.0, 1.2))
    pts = rng.uniform(0.5, 4.0, size=(30, 3))
    _, grad = sample_trilinear_with_gradient(vol, pts)
    h = 1e-6
    for k in range(3):
        dp = np.zeros(3)
        dp[k] = h
        fd = (sample_trilinear(vol, pts + dp) - sample_trilinear(vol, pts - dp)) / (2 * h)
        np.testing.assert_allclose(grad[:, k], fd, rtol=1e-5, atol=1e-6)


def test_trilinear_clamps_outside_with_zero_gradient():
    vol = ImageVolume(np.arange(27, dtype=float).reshape(3, 3, 3), (1, 1, 1))
    far = np.array([[100.0, 100.0, 100.0], [-50.0, 0.0, 0.0]])
    vals, grad = sample_trilinear_with_gradient(vol, far)
    assert vals[0] == 26.0  # corner value
    assert np.all(grad == 0.0)


def test_resample_z_identity():
    rng = np.random.default_rng(5)
    vol = ImageVolume(rng.standard_normal((8, 4, 4)).astype(np.float32), (1, 1, 2.0))
    out = resample_z(vol, 2.0)
    np.testing.assert_allclose(out.data, vol.data, rtol=1e-6)


def test_resample_z_linear_ramp():
    # intensities linear in z stay linear after refinement
    data = np.tile(np.arange(5, dtype=float)[:, None, None], (1, 3, 3))
    vol = ImageVolume(data, (1.0, 1.0, 2.0))
    out = resample_z(vol, 1.0)
    assert out.data.shape[0] == 10
    expect = np.arange(10) * 0.5
    expect[-1] = 4.0  # clamped at the last slice
    np.testing.assert_allclose(out.data[:, 1, 1], expect, rtol=1e-6)


def test_resample_z_labels_nearest():
    data = np.zeros((4, 2, 2), dtype=np.int32)
    data[2:] = 3
    out = resample_z(LabelVolume(data, (1, 1, 3.0)), 1.0)
    assert isinstance(out, LabelVolume)
    assert set(np.unique(out.data)) <= {0, 3}
    assert out.data.shape[0] == 12


def test_same_grid():
    a = ImageVolume(np.zeros((2, 2, 2)), (1, 1, 1))
    b = ImageVolume(np.zeros((2, 2, 2)), (1, 1, 1.5))
    assert a.same_grid(a)
    assert not a.same_grid(b)


def test_voxel_centers_physical_coordinates():
    vol = ImageVolume(np.zeros((2, 3, 4)), (0.5, 1.0, 2.0), (10.0, 20.0, 30.0))
    c = vol.voxel_centers()
    assert c.shape == (2, 3, 4, 3)
    np.testing.assert_allclose(c[0, 0, 0], [10.0, 20.0, 30.0])
    np.testing.assert_allclose(c[1, 2, 3], [10.0 + 3 * 0.5, 20.0 + 2 * 1.0, 30.0 + 2.0])

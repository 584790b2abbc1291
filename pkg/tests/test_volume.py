import numpy as np
import pytest

from patchreg.errors import BadMagicError, TruncatedFileError, UnsupportedVersionError
from patchreg.volume import (
    Volume,
    downsample,
    gaussian_kernel_1d,
    gaussian_smooth,
    gradient_magnitude,
    normalize_intensity,
    read_volume,
    trilinear_sample,
    write_volume,
)


def random_volume(rng, dims=(6, 7, 8), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return Volume(rng.random(dims).astype(np.float32), spacing, origin)


class TestVolumeType:
    def test_dims_and_positions(self):
        vol = Volume(np.zeros((2, 3, 4), dtype=np.float32), (1.0, 2.0, 3.0), (10.0, 0.0, -5.0))
        assert vol.dims == (2, 3, 4)
        pos = vol.voxel_positions().reshape(2, 3, 4, 3)
        assert np.allclose(pos[1, 2, 3], [10.0 + 1.0, 0.0 + 4.0, -5.0 + 9.0])

    def test_rejects_bad_geometry(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2, 2), dtype=np.float32), spacing=(1.0, 0.0, 1.0))
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2), dtype=np.float32))

    def test_voxels_immutable(self):
        vol = Volume(np.zeros((2, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            vol.voxels[0, 0, 0] = 1.0


class TestTrilinearSample:
    def test_exact_at_voxel_center(self):
        rng = np.random.default_rng(0)
        vol = random_volume(rng, spacing=(0.7, 1.3, 2.0), origin=(3.0, -1.0, 2.5))
        p = np.asarray(vol.origin) + np.array([2, 3, 4]) * np.asarray(vol.spacing)
        assert trilinear_sample(vol, p) == pytest.approx(float(vol.voxels[2, 3, 4]), abs=0)

    def test_midpoint_between_adjacent_voxels(self):
        arr = np.zeros((2, 1, 1), dtype=np.float32)
        arr[1, 0, 0] = 1.0
        vol = Volume(arr)
        assert trilinear_sample(vol, (0.5, 0.0, 0.0)) == pytest.approx(0.5)

    def test_outside_returns_background(self):
        rng = np.random.default_rng(1)
        vol = random_volume(rng)
        assert trilinear_sample(vol, (-10.0, 0.0, 0.0)) == 0.0
        assert trilinear_sample(vol, (0.0, 0.0, 100.0)) == 0.0

    def test_continuity(self):
        rng = np.random.default_rng(2)
        vol = random_volume(rng, dims=(8, 8, 8))
        span = float(vol.voxels.max() - vol.voxels.min())
        pts = rng.uniform(0.5, 6.5, size=(200, 3))
        for p in pts:
            q = p + rng.uniform(-1e-6, 1e-6, 3)
            dv = abs(trilinear_sample(vol, p) - trilinear_sample(vol, q))
            assert dv <= 1e-4 * span


class TestGaussianSmooth:
    def test_constant_volume_fixed_point(self):
        vol = Volume(np.full((5, 5, 5), 0.7, dtype=np.float32))
        for sigma in (0.5, 1.0, 2.3):
            out = gaussian_smooth(vol, sigma)
            assert np.allclose(out.voxels, 0.7, atol=1e-7)

    def test_sigma_zero_identity(self):
        rng = np.random.default_rng(3)
        vol = random_volume(rng)
        out = gaussian_smooth(vol, 0.0)
        assert np.array_equal(out.voxels, vol.voxels)

    def test_negative_sigma_rejected(self):
        vol = Volume(np.zeros((3, 3, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            gaussian_smooth(vol, -0.1)

    def test_impulse_center_value(self):
        # Oracle: evaluate the truncated normalized kernel directly.
        sigma = 1.0
        radius = int(np.ceil(3 * sigma))
        x = np.arange(-radius, radius + 1, dtype=float)
        w = np.exp(-(x ** 2) / (2 * sigma ** 2))
        w /= w.sum()
        expected = w[radius] ** 3

        arr = np.zeros((9, 9, 9), dtype=np.float32)
        arr[4, 4, 4] = 1.0
        out = gaussian_smooth(Volume(arr), sigma)
        assert float(out.voxels[4, 4, 4]) == pytest.approx(expected, rel=1e-6)

    def test_kernel_matches_helper(self):
        k = gaussian_kernel_1d(1.0)
        assert len(k) == 7
        assert k.sum() == pytest.approx(1.0, abs=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(4)
        v1 = random_volume(rng)
        v2 = random_volume(rng)
        a, b = 0.6, -1.7
        combo = Volume(a * v1.voxels + b * v2.voxels, v1.spacing, v1.origin)
        lhs = gaussian_smooth(combo, 1.3).voxels
        rhs = a * gaussian_smooth(v1, 1.3).voxels + b * gaussian_smooth(v2, 1.3).voxels
        scale = np.abs(rhs).max()
        assert np.allclose(lhs, rhs, atol=1e-6 * max(scale, 1.0))

    def test_range_never_expands(self):
        rng = np.random.default_rng(5)
        vol = random_volume(rng, dims=(10, 10, 10))
        out = gaussian_smooth(vol, 1.7)
        assert out.voxels.min() >= vol.voxels.min() - 1e-9
        assert out.voxels.max() <= vol.voxels.max() + 1e-9


class TestDownsample:
    def test_identity_factor(self):
        rng = np.random.default_rng(6)
        vol = random_volume(rng)
        out = downsample(vol, 1)
        assert np.array_equal(out.voxels, vol.voxels)
        assert out.spacing == vol.spacing

    def test_constant_volume(self):
        vol = Volume(np.full((9, 9, 9), 0.4, dtype=np.float32), (1.0, 1.0, 1.0))
        out = downsample(vol, 2)
        assert out.dims == (5, 5, 5)
        assert out.spacing == (2.0, 2.0, 2.0)
        assert np.allclose(out.voxels, 0.4, atol=1e-7)

    def test_ceil_dims(self):
        vol = Volume(np.zeros((17, 17, 17), dtype=np.float32))
        assert downsample(vol, 4).dims == (5, 5, 5)

    def test_factor_below_one_rejected(self):
        vol = Volume(np.zeros((4, 4, 4), dtype=np.float32))
        with pytest.raises(ValueError):
            downsample(vol, 0)

    def test_downsample_after_identity_bit_exact(self):
        rng = np.random.default_rng(7)
        vol = random_volume(rng, dims=(11, 9, 13))
        once = downsample(vol, 3)
        twice = downsample(downsample(vol, 1), 3)
        assert np.array_equal(once.voxels, twice.voxels)


class TestNormalizeIntensity:
    def test_endpoints(self):
        vol = Volume(np.array([[[2.0, 4.0]]], dtype=np.float32))
        out = normalize_intensity(vol)
        assert np.array_equal(out.voxels, np.array([[[0.0, 1.0]]], dtype=np.float32))

    def test_constant_maps_to_zero(self):
        vol = Volume(np.full((3, 3, 3), 5.5, dtype=np.float32))
        assert np.array_equal(normalize_intensity(vol).voxels, np.zeros((3, 3, 3)))

    def test_unit_range_unchanged(self):
        rng = np.random.default_rng(8)
        arr = rng.random((4, 4, 4)).astype(np.float32)
        arr.reshape(-1)[0] = 0.0
        arr.reshape(-1)[1] = 1.0
        vol = Volume(arr)
        assert np.array_equal(normalize_intensity(vol).voxels, vol.voxels)


class TestGradientMagnitude:
    def test_constant_volume_zero(self):
        vol = Volume(np.full((4, 4, 4), 0.3, dtype=np.float32))
        assert np.allclose(gradient_magnitude(vol).voxels, 0.0)

    def test_linear_ramp(self):
        nx = 6
        xs = np.arange(nx) * 0.5  # spacing 0.5 mm
        arr = np.broadcast_to(3.0 * xs[:, None, None], (nx, 5, 5)).astype(np.float32)
        vol = Volume(arr, spacing=(0.5, 1.0, 1.0))
        out = gradient_magnitude(vol)
        assert float(out.voxels[3, 2, 2]) == pytest.approx(3.0, rel=1e-6)

    def test_small_dims_rejected(self):
        with pytest.raises(ValueError):
            gradient_magnitude(Volume(np.zeros((2, 4, 4), dtype=np.float32)))

    def test_matches_triple_loop_reference(self):
        rng = np.random.default_rng(9)
        vol = random_volume(rng, dims=(5, 6, 4), spacing=(0.8, 1.1, 1.4))
        arr = vol.voxels.astype(np.float64)
        ref = np.zeros_like(arr)
        nx, ny, nz = vol.dims
        sp = vol.spacing
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    g = []
                    for axis, n in ((0, nx), (1, ny), (2, nz)):
                        idx = [i, j, k]
                        if idx[axis] == 0:
                            lo = arr[tuple(idx)]
                            idx[axis] += 1
                            g.append((arr[tuple(idx)] - lo) / sp[axis])
                        elif idx[axis] == n - 1:
                            hi = arr[tuple(idx)]
                            idx[axis] -= 1
                            g.append((hi - arr[tuple(idx)]) / sp[axis])
                        else:
                            idx_hi = list((i, j, k))
                            idx_lo = list((i, j, k))
                            idx_hi[axis] += 1
                            idx_lo[axis] -= 1
                            g.append((arr[tuple(idx_hi)] - arr[tuple(idx_lo)]) / (2 * sp[axis]))
                    ref[i, j, k] = np.sqrt(sum(x * x for x in g))
        out = gradient_magnitude(vol)
        assert np.allclose(out.voxels, ref.astype(np.float32), atol=1e-6)


class TestVolumeIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        vol = random_volume(rng, dims=(3, 4, 5), spacing=(0.5, 1.0, 2.0), origin=(-1.0, 2.0, 3.0))
        path = tmp_path / "vol.v3d"
        write_volume(path, vol)
        back = read_volume(path)
        assert back.dims == vol.dims
        assert back.spacing == vol.spacing
        assert back.origin == vol.origin
        assert np.array_equal(back.voxels, vol.voxels)

    def test_header_is_64_bytes(self, tmp_path):
        vol = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
        path = tmp_path / "vol.v3d"
        write_volume(path, vol)
        data = path.read_bytes()
        assert len(data) == 64 + 4 * 8
        # x-fastest voxel order after the header
        first = np.frombuffer(data, "<f4", count=1, offset=64)[0]
        assert first == vol.voxels[0, 0, 0]
        second = np.frombuffer(data, "<f4", count=1, offset=68)[0]
        assert second == vol.voxels[1, 0, 0]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.v3d"
        path.write_bytes(b"XXXX" + bytes(60))
        with pytest.raises(BadMagicError):
            read_volume(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v2.v3d"
        path.write_bytes(b"V3D2" + bytes(60))
        with pytest.raises(UnsupportedVersionError):
            read_volume(path)

    def test_truncated(self, tmp_path):
        rng = np.random.default_rng(11)
        vol = random_volume(rng)
        path = tmp_path / "t.v3d"
        write_volume(path, vol)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(TruncatedFileError):
            read_volume(path)

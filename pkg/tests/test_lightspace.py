import numpy as np
import pytest

from ps2kit.errors import DomainError
from ps2kit.geometry import SphericalLight, spherical_to_dir
from ps2kit.lightspace import (
    DEFAULT_LIGHTSPACE,
    FRONTAL_BIN,
    LightBin,
    LightSpace,
    bin_of,
    center_of,
    one_hot_targets,
)

AZ_CENTERS = [18, 54, 90, 126, 162]
EL_CENTERS = [-72, -36, 0, 36, 72]


def _near_boundary(angle, eps=1e-9):
    r = angle % 36.0
    return min(r, 36.0 - r) < eps


class TestCenters:
    def test_tabulated_values(self):
        np.testing.assert_allclose(DEFAULT_LIGHTSPACE.azimuth_centers, AZ_CENTERS)
        np.testing.assert_allclose(DEFAULT_LIGHTSPACE.elevation_centers, EL_CENTERS)
        assert DEFAULT_LIGHTSPACE.num_bins == 25
        assert DEFAULT_LIGHTSPACE.width == 36.0

    def test_center_of(self):
        assert center_of(LightBin(2, 2)) == SphericalLight(0.0, 90.0)
        assert center_of(LightBin(0, 0)) == SphericalLight(-72.0, 18.0)

    def test_all_centers_round_trip(self):
        bins = DEFAULT_LIGHTSPACE.all_bins()
        assert len(bins) == 25
        for b in bins:
            assert bin_of(center_of(b)) == b
            assert DEFAULT_LIGHTSPACE.bin_of_direction(DEFAULT_LIGHTSPACE.center_direction(b)) == b

    def test_frontal_bin(self):
        assert FRONTAL_BIN == LightBin(el_idx=2, az_idx=2)
        assert FRONTAL_BIN.flat() == 12
        np.testing.assert_allclose(DEFAULT_LIGHTSPACE.center_direction(FRONTAL_BIN), [0, 0, 1], atol=1e-12)

    def test_invalid_bin(self):
        with pytest.raises(DomainError):
            center_of(LightBin(5, 0))


class TestBinOf:
    def test_examples(self):
        assert bin_of(SphericalLight(0, 90)) == LightBin(el_idx=2, az_idx=2)
        assert bin_of(SphericalLight(-90, 0)) == LightBin(0, 0)

    def test_boundaries_go_up_except_the_top(self):
        assert bin_of(SphericalLight(0, 36)).az_idx == 1
        assert bin_of(SphericalLight(0, 180)).az_idx == 4
        assert bin_of(SphericalLight(-54, 90)).el_idx == 1
        assert bin_of(SphericalLight(90, 90)).el_idx == 4

    def test_agrees_with_nearest_center(self):
        rng = np.random.default_rng(0)
        el = rng.uniform(-90, 90, 10000)
        az = rng.uniform(0, 180, 10000)
        for t, p in zip(el, az):
            if _near_boundary(t + 90) or _near_boundary(p):
                continue
            b = bin_of(SphericalLight(t, p))
            assert b.el_idx == int(np.argmin(np.abs(np.array(EL_CENTERS) - t)))
            assert b.az_idx == int(np.argmin(np.abs(np.array(AZ_CENTERS) - p)))

    def test_max_deviation_is_half_a_bin(self):
        grid = np.arange(0.0, 180.0 + 1e-9, 0.5)
        worst = 0.0
        for t in grid - 90.0:
            for p in grid[::4]:
                c = center_of(bin_of(SphericalLight(t, p)))
                worst = max(worst, abs(c.elevation - t), abs(c.azimuth - p))
        for p in grid:
            c = center_of(bin_of(SphericalLight(0.0, p)))
            worst = max(worst, abs(c.azimuth - p))
        assert worst <= 18.0

    def test_direction_input(self):
        v = spherical_to_dir(SphericalLight(40.0, 130.0))
        assert DEFAULT_LIGHTSPACE.bin_of_direction(v) == LightBin(3, 3)


class TestTargets:
    def test_middle(self):
        el, az = one_hot_targets(LightBin(2, 2))
        np.testing.assert_array_equal(el, [0, 0, 1, 0, 0])
        np.testing.assert_array_equal(az, [0, 0, 1, 0, 0])

    def test_corner(self):
        el, az = one_hot_targets(LightBin(el_idx=0, az_idx=4))
        np.testing.assert_array_equal(el, [1, 0, 0, 0, 0])
        np.testing.assert_array_equal(az, [0, 0, 0, 0, 1])

    def test_one_hot_sums(self):
        for b in DEFAULT_LIGHTSPACE.all_bins():
            el, az = one_hot_targets(b)
            assert el.sum() == 1 and az.sum() == 1


class TestFlatIndex:
    def test_round_trip(self):
        for i in range(25):
            b = LightBin.from_flat(i)
            assert b.flat() == i
            assert b == DEFAULT_LIGHTSPACE.all_bins()[i]

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            LightBin.from_flat(25)


def test_coarser_light_space():
    space = LightSpace(3)
    assert space.width == 60.0
    np.testing.assert_allclose(space.azimuth_centers, [30, 90, 150])
    assert space.frontal_bin == LightBin(1, 1)

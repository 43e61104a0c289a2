import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mafuq.errors import ParameterError, ShapeError
from mafuq.phantom import inscribed_sphere
from mafuq.volume import (RigidRotation, Volume3, absdiff, flat_index, rotate_resample, unflat_index,
                          voxelwise_mean_var)

from conftest import ROUND_TRIP_REL_TOL


def rel_l2_in_sphere(a, b):
    m = inscribed_sphere(b.dims) & a.valid
    return np.linalg.norm((a.data - b.data)[m]) / np.linalg.norm(b.data[m])


class TestVolume3:
    def test_layout_is_x_fastest(self):
        dims = (3, 4, 5)
        v = Volume3.from_flat(np.arange(60, dtype=np.float32), dims)
        assert v.data[1, 0, 0] == 1
        assert v.data[0, 1, 0] == 3
        assert v.data[0, 0, 1] == 12
        np.testing.assert_array_equal(v.flat(), np.arange(60))

    @given(st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)), st.data())
    def test_index_round_trip(self, dims, data):
        x = data.draw(st.integers(0, dims[0] - 1))
        y = data.draw(st.integers(0, dims[1] - 1))
        z = data.draw(st.integers(0, dims[2] - 1))
        assert unflat_index(flat_index(x, y, z, dims), dims) == (x, y, z)

    def test_flat_length_must_match(self):
        with pytest.raises(ShapeError):
            Volume3.from_flat(np.zeros(10), (2, 2, 2))

    def test_rejects_nonfinite_valid_voxel(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(ParameterError):
            Volume3(data)
        valid = np.ones((2, 2, 2), bool)
        valid[0, 0, 0] = False
        Volume3(data, validity=valid)  # NaN allowed where invalid

    @pytest.mark.parametrize("spacing", [(0, 1, 1), (1, -1, 1), (1, 1, float("inf"))])
    def test_rejects_bad_spacing(self, spacing):
        with pytest.raises(ParameterError):
            Volume3(np.zeros((2, 2, 2)), spacing)

    def test_is_read_only(self):
        v = Volume3(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1


class TestRotateResample:
    def test_zero_angle_is_bit_identical(self, rng):
        v = Volume3(rng.normal(size=(7, 8, 9)).astype(np.float32))
        for axis in "xyz":
            r = rotate_resample(v, RigidRotation(axis, 0.0))
            assert r.fully_valid
            np.testing.assert_array_equal(r.data, v.data)

    @pytest.mark.parametrize("axis", "xyz")
    def test_constant_preserved_exactly(self, axis):
        c = np.float32(3.7)
        v = Volume3.constant(c, (20, 21, 22))
        r = rotate_resample(v, RigidRotation(axis, 45.0))
        assert r.valid.sum() > 0.5 * r.valid.size
        assert np.all(r.data[r.valid] == c)
        assert np.all(r.data[~r.valid] == 0)

    @pytest.mark.parametrize("axis", "xyz")
    def test_round_trip_on_phantom(self, phantom, axis):
        r = rotate_resample(rotate_resample(phantom, RigidRotation(axis, 45.0)), RigidRotation(axis, -45.0))
        assert rel_l2_in_sphere(r, phantom) < ROUND_TRIP_REL_TOL
        # nearly all of the inscribed sphere survives the round trip
        s = inscribed_sphere(phantom.dims)
        assert (s & r.valid).sum() > 0.99 * s.sum()

    def test_quarter_turn_permutes_axes(self, rng):
        # a +90 degree turn about z maps (x, y) -> (-y, x) about the centre
        data = rng.normal(size=(9, 9, 4)).astype(np.float32)
        r = rotate_resample(Volume3(data), RigidRotation("z", 90.0))
        assert r.fully_valid
        expected = np.rot90(data, k=1, axes=(0, 1))
        np.testing.assert_allclose(r.data, expected, atol=1e-5)

    def test_corners_fall_outside(self):
        v = Volume3.constant(1.0, (16, 16, 16))
        r = rotate_resample(v, RigidRotation("z", 45.0))
        assert not r.valid[0, 0, 8]
        assert r.valid[8, 8, 8]

    def test_invalid_source_propagates_only_through_positive_weights(self):
        data = np.ones((9, 9, 9), np.float32)
        valid = np.ones((9, 9, 9), bool)
        valid[4, 4, 4] = False
        r = rotate_resample(Volume3(data, validity=valid), RigidRotation("z", 90.0))
        # exact integer sampling: only the image of the bad voxel is touched
        assert (~r.valid).sum() == 1
        assert not r.valid[4, 4, 4]

    @pytest.mark.parametrize("angle", [float("nan"), float("inf"), 181.0])
    def test_bad_angle(self, angle):
        with pytest.raises(ParameterError):
            RigidRotation("x", angle)


class TestVoxelwiseMeanVar:
    def test_identical_samples(self, rng):
        v = Volume3(rng.normal(size=(4, 5, 6)).astype(np.float32))
        mean, var, count = voxelwise_mean_var([v] * 9)
        np.testing.assert_array_equal(mean.data, v.data.astype(np.float64))
        assert np.all(var.data == 0)
        assert np.all(count.data == 9)

    def test_identical_float64_samples_are_exact(self, rng):
        v = Volume3(rng.normal(size=(6, 6, 6)) * 1e3)
        mean, var, _ = voxelwise_mean_var([v] * 7)
        np.testing.assert_array_equal(mean.data, v.data)
        assert np.all(var.data == 0)

    def test_hand_computed_population_variance(self):
        vs = [Volume3.constant(x, (2, 2, 2)) for x in (1.0, 2.0, 3.0)]
        mean, var, _ = voxelwise_mean_var(vs)
        assert np.all(mean.data == 2.0)
        np.testing.assert_allclose(var.data, 2.0 / 3.0, rtol=0, atol=1e-12)

    def test_min_count_rule(self):
        a = Volume3.constant(4.0, (2, 2, 2))
        valid = np.ones((2, 2, 2), bool)
        valid[1, 1, 1] = False
        b = Volume3(np.full((2, 2, 2), 8.0), validity=valid)
        mean, var, count = voxelwise_mean_var([a, b], min_count=2)
        assert mean.data[1, 1, 1] == 4.0
        assert var.data[1, 1, 1] == 0.0
        assert not mean.valid[1, 1, 1] and not var.valid[1, 1, 1]
        assert count.data[1, 1, 1] == 1
        assert mean.data[0, 0, 0] == 6.0 and var.data[0, 0, 0] == 4.0

    def test_no_contribution_is_invalid_zero(self):
        valid = np.zeros((2, 2, 2), bool)
        v = Volume3(np.ones((2, 2, 2)), validity=valid)
        mean, var, count = voxelwise_mean_var([v, v], min_count=1)
        assert not mean.valid.any()
        assert np.all(mean.data == 0) and np.all(count.data == 0)

    def test_errors(self):
        with pytest.raises(ParameterError):
            voxelwise_mean_var([])
        with pytest.raises(ShapeError):
            voxelwise_mean_var([Volume3(np.zeros((2, 2, 2))), Volume3(np.zeros((2, 2, 3)))])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False, width=32), min_size=1, max_size=9), st.randoms())
    def test_nonnegative_and_permutation_invariant(self, values, rnd):
        vs = [Volume3(np.full((2, 1, 1), x, np.float32)) for x in values]
        mean, var, _ = voxelwise_mean_var(vs, min_count=1)
        shuffled = list(vs)
        rnd.shuffle(shuffled)
        mean2, var2, _ = voxelwise_mean_var(shuffled, min_count=1)
        assert np.all(var.data >= 0)
        np.testing.assert_array_equal(mean.data, mean2.data)
        np.testing.assert_array_equal(var.data, var2.data)
        if len(set(values)) == 1:
            assert np.all(var.data == 0)

    def test_random_permutations_bit_exact(self, rng):
        vs = [Volume3(rng.normal(size=(6, 6, 6)).astype(np.float32) * 10.0 ** rng.integers(-3, 4)) for _ in range(9)]
        ref = voxelwise_mean_var(vs)
        for _ in range(5):
            perm = [vs[i] for i in rng.permutation(9)]
            out = voxelwise_mean_var(perm)
            for a, b in zip(ref, out):
                np.testing.assert_array_equal(a.data, b.data)


class TestAbsdiff:
    def test_self_is_zero(self, rng):
        v = Volume3(rng.normal(size=(3, 4, 5)))
        assert np.all(absdiff(v, v).data == 0)

    def test_constants(self):
        d = absdiff(Volume3.constant(3, (2, 2, 2)), Volume3.constant(5, (2, 2, 2)))
        assert np.all(d.data == 2)

    def test_matches_voxel_loop(self, rng):
        a = Volume3(rng.normal(size=(4, 5, 6)).astype(np.float32))
        b = Volume3(rng.normal(size=(4, 5, 6)).astype(np.float32))
        d = absdiff(a, b)
        for x, y, z in itertools.product(range(4), range(5), range(6)):
            assert d.data[x, y, z] == abs(float(a.data[x, y, z]) - float(b.data[x, y, z]))

    def test_validity_is_conjunction(self):
        va = np.ones((2, 2, 2), bool)
        va[0, 0, 0] = False
        vb = np.ones((2, 2, 2), bool)
        vb[1, 1, 1] = False
        d = absdiff(Volume3(np.ones((2, 2, 2)), validity=va), Volume3(np.ones((2, 2, 2)), validity=vb))
        assert d.valid.sum() == 6

    def test_dims_mismatch(self):
        with pytest.raises(ShapeError):
            absdiff(Volume3(np.zeros((2, 2, 2))), Volume3(np.zeros((2, 2, 1))))

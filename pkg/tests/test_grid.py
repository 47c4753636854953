import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gaussian_kernel, naive_compose, naive_gradient, naive_sample, naive_smooth_1d, naive_warp
from heatreg import (
    InputError,
    VectorField,
    Volume,
    compose,
    gaussian_smooth,
    gradient,
    min_jacobian_det,
    sample_linear,
    warp,
)


class TestVolume:
    def test_rejects_nan(self):
        with pytest.raises(InputError):
            Volume([1.0, np.nan])

    def test_rejects_bad_spacing(self):
        with pytest.raises(InputError):
            Volume([1.0, 2.0], spacing=(0.0,))
        with pytest.raises(InputError):
            Volume([1.0, 2.0], spacing=(1.0, 1.0))

    def test_voxel_volume(self):
        v = Volume(np.zeros((2, 3)), spacing=(0.5, 2.0))
        assert v.voxel_volume == 1.0

    def test_field_component_count(self):
        with pytest.raises(InputError):
            VectorField(np.zeros((3, 4, 4)))  # 3 components on a 2D grid


class TestSampleLinear:
    def test_midpoint(self):
        assert sample_linear(Volume([0.0, 2.0]), 0.5) == 1.0

    def test_reproduces_nodes(self, rng):
        vol = Volume(rng.random((4, 5, 3)))
        for idx in [(0, 0, 0), (3, 4, 2), (1, 2, 1)]:
            assert sample_linear(vol, idx) == vol.data[idx]

    def test_clamps_to_edge(self):
        assert sample_linear(Volume([0.0, 2.0]), 5.0) == 2.0
        assert sample_linear(Volume([0.0, 2.0]), -3.0) == 0.0

    def test_matches_naive(self, rng):
        vol = Volume(rng.random((5, 6)))
        for _ in range(50):
            p = rng.uniform(-1, 7, size=2)
            assert sample_linear(vol, p) == pytest.approx(naive_sample(vol.data, p), abs=1e-13)

    def test_within_range(self, rng):
        vol = Volume(rng.random((6, 6)))
        lo, hi = vol.data.min(), vol.data.max()
        for _ in range(100):
            p = rng.uniform(-3, 9, size=2)
            assert lo - 1e-12 <= sample_linear(vol, p) <= hi + 1e-12


class TestWarp:
    def test_zero_disp_bit_identical(self, rng):
        vol = Volume(rng.random((4, 4)))
        out = warp(vol, VectorField.zeros((4, 4)))
        assert np.array_equal(out.data, vol.data)

    def test_ramp_shift(self):
        vol = Volume(np.arange(8.0))
        disp = VectorField(-np.ones((1, 8)))
        np.testing.assert_allclose(warp(vol, disp).data, [0, 0, 1, 2, 3, 4, 5, 6])

    def test_matches_naive(self, rng):
        vol = Volume(rng.random((6, 5)))
        disp = VectorField(rng.uniform(-2, 2, size=(2, 6, 5)))
        np.testing.assert_allclose(warp(vol, disp).data, naive_warp(vol.data, disp.data), atol=1e-12)

    def test_dim_mismatch(self, rng):
        with pytest.raises(InputError):
            warp(Volume(np.zeros((4, 4))), VectorField.zeros((4, 5)))


class TestGradient:
    def test_constant_is_zero(self):
        g = gradient(Volume(np.full((4, 4), 2.5)))
        assert not g.data.any()

    def test_linear_ramp_exact(self):
        vol = Volume(3.0 * np.arange(6.0))
        np.testing.assert_array_equal(gradient(vol).data[0], np.full(6, 3.0))

    def test_matches_naive(self, rng):
        vol = Volume(rng.random((5, 5)), spacing=(0.5, 2.0))
        np.testing.assert_allclose(gradient(vol).data, naive_gradient(vol.data, vol.spacing), atol=1e-12)

    def test_rejects_thin_axis(self):
        with pytest.raises(InputError):
            gradient(Volume(np.zeros((1, 5))))


class TestGaussianSmooth:
    def test_sigma_zero_identity(self, rng):
        vol = Volume(rng.random((5, 5)))
        assert gaussian_smooth(vol, 0.0) is vol

    def test_constant_preserved(self):
        vol = Volume(np.full((9, 9), 0.7))
        out = gaussian_smooth(vol, 1.5)
        np.testing.assert_allclose(out.data, 0.7, rtol=1e-12)

    def test_impulse_matches_kernel(self):
        data = np.zeros(9)
        data[4] = 1.0
        out = gaussian_smooth(Volume(data), 1.0)
        np.testing.assert_allclose(out.data[1:8], gaussian_kernel(1.0), rtol=1e-12)

    def test_matches_naive_1d(self, rng):
        data = rng.random(11)
        out = gaussian_smooth(Volume(data), 1.3)
        np.testing.assert_allclose(out.data, naive_smooth_1d(data, 1.3), atol=1e-12)

    def test_mean_preserved_interior_content(self, rng):
        data = np.zeros((17, 17))
        data[6:11, 6:11] = rng.random((5, 5))
        out = gaussian_smooth(Volume(data), 1.0)
        assert out.data.mean() == pytest.approx(data.mean(), rel=1e-6)

    def test_negative_sigma_rejected(self):
        with pytest.raises(InputError):
            gaussian_smooth(Volume(np.zeros(5)), -1.0)

    def test_field_components_independent(self, rng):
        f = VectorField(rng.random((2, 8, 8)))
        out = gaussian_smooth(f, 1.0)
        for c in range(2):
            np.testing.assert_allclose(
                out.data[c], gaussian_smooth(Volume(f.data[c]), 1.0).data
            )


class TestCompose:
    def test_identity_element(self, rng):
        v = VectorField(rng.uniform(-1, 1, size=(2, 6, 6)))
        zero = VectorField.zeros((6, 6))
        np.testing.assert_array_equal(compose(zero, v).data, v.data)
        np.testing.assert_array_equal(compose(v, zero).data, v.data)

    def test_translations_add_in_interior(self):
        a = VectorField(np.stack([np.full((8, 8), 0.5), np.full((8, 8), -0.25)]))
        b = VectorField(np.stack([np.full((8, 8), 0.75), np.full((8, 8), 0.5)]))
        out = compose(a, b)
        np.testing.assert_allclose(out.data[0][2:-2, 2:-2], 1.25, atol=1e-12)
        np.testing.assert_allclose(out.data[1][2:-2, 2:-2], 0.25, atol=1e-12)

    def test_matches_naive_3d(self, rng):
        a = VectorField(rng.uniform(-1, 1, size=(3, 8, 8, 8)))
        b = VectorField(rng.uniform(-1, 1, size=(3, 8, 8, 8)))
        np.testing.assert_allclose(compose(a, b).data, naive_compose(a.data, b.data), atol=1e-12)

    def test_associative_within_interp_error(self):
        # smooth fields, max |u| <= 2, 16^3 grid; the band near the boundary
        # where x+u can clamp is excluded (clamping is not associative)
        dims = (16, 16, 16)
        fields = []
        for seed in range(3):
            raw = np.random.default_rng(seed).standard_normal((3, *dims))
            f = gaussian_smooth(VectorField(raw), 3.0)
            scale = 2.0 / max(f.magnitude().max(), 1e-12)
            fields.append(f.with_data(f.data * scale))
        u, v, w = fields
        left = compose(compose(u, v), w)
        right = compose(u, compose(v, w))
        interior = (slice(None),) + (slice(3, -3),) * 3
        assert np.abs(left.data[interior] - right.data[interior]).max() < 0.05


class TestMinJacobianDet:
    def test_zero_field(self):
        assert min_jacobian_det(VectorField.zeros((6, 6))) == pytest.approx(1.0)

    def test_translation(self):
        f = VectorField(np.stack([np.full((6, 6), 1.5), np.full((6, 6), -2.0)]))
        assert min_jacobian_det(f) == pytest.approx(1.0)

    def test_linear_contraction_1d(self):
        f = VectorField((-0.5 * np.arange(8.0))[None])
        assert min_jacobian_det(f) == pytest.approx(0.5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=16), st.floats(-20, 40))
def test_sample_convex_hull_property(values, point):
    vol = Volume(np.asarray(values))
    out = sample_linear(vol, [point])
    assert min(values) - 1e-9 <= out <= max(values) + 1e-9

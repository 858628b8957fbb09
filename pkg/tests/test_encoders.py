"""Branch encoders: pillars, gating, warping, deformable convolution."""

import numpy as np
import pytest

from bevlab import audit
from bevlab.encoders import (
    deformable_conv,
    init_camera_encoder,
    init_deformable,
    init_lidar_encoder,
    init_temporal,
    lidar_to_bev,
    pillar_features,
    self_gate,
    temporal_enhance,
    warp_bev,
)
from bevlab.errors import ConfigurationError
from bevlab.geometry import RigidTransform
from bevlab.gradcheck import gradient_check
from bevlab.params import ParamStore
from bevlab.tensor import Tensor, conv2d, tsum
from bevlab.world import Grid

from conftest import randomize_params, rng_seeds

GRID = Grid(16, 12.8)


class TestPillars:
    def test_single_point_single_cell(self):
        pts = np.array([[0.2, 0.2]])
        pf = pillar_features(pts, GRID)
        assert pf[1].sum() == 1.0
        assert (pf[1] > 0).sum() == 1
        np.testing.assert_array_equal(pf[0], pf[1] > 0)

    def test_empty_points(self):
        pf = pillar_features(np.zeros((0, 2)), GRID)
        np.testing.assert_array_equal(pf, 0.0)

    def test_density_counts_linearly(self):
        """Two points in one cell vs one point: density ratio exactly 2."""
        one = pillar_features(np.array([[0.1, 0.1]]), GRID)
        two = pillar_features(np.array([[0.1, 0.1], [0.15, 0.12]]), GRID)
        cell = np.unravel_index(np.argmax(one[1]), one[1].shape)
        assert two[1][cell] == 2 * one[1][cell]

    def test_outside_points_dropped(self):
        pf = pillar_features(np.array([[100.0, 0.0], [0.0, -50.0]]), GRID)
        np.testing.assert_array_equal(pf, 0.0)

    def test_lidar_encoder_runs_and_differentiates(self):
        params = ParamStore()
        init_lidar_encoder(params, np.random.default_rng(0), 4)
        randomize_params(params, np.random.default_rng(10))
        pts = np.random.default_rng(1).uniform(-6, 6, size=(30, 2))
        report = gradient_check(
            lambda p: tsum(lidar_to_bev(pts, p, GRID)), params, tol=1e-4
        )
        assert report.passed


class TestSelfGate:
    def test_zero_maps_to_zero(self):
        out = self_gate(Tensor(np.zeros((2, 3, 3))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_scalar_value(self):
        out = self_gate(Tensor(np.array([[[2.0]]])))
        assert out.data[0, 0, 0] == pytest.approx(2.0 / (1.0 + np.exp(-2.0)))
        assert out.data[0, 0, 0] == pytest.approx(1.7616, abs=1e-4)

    def test_saturates_to_identity(self):
        x = Tensor(np.array([[[50.0]]]))
        assert self_gate(x).data[0, 0, 0] == pytest.approx(50.0)

    def test_never_amplifies_nonnegative_input(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 5, size=(3, 8, 8))
        out = self_gate(Tensor(x))
        assert np.all(out.data <= x + 1e-15)


class TestWarp:
    def test_identity(self):
        fm = Tensor(np.random.default_rng(0).normal(size=(3, 16, 16)))
        out = warp_bev(fm, RigidTransform.identity(), GRID)
        np.testing.assert_allclose(out.data, fm.data, atol=1e-12)

    def test_integer_shift_with_zero_fill(self):
        # cell size 1.0 keeps the shifted sample coordinates exactly integral
        grid = Grid(16, 16.0)
        fm = Tensor(np.random.default_rng(1).normal(size=(2, 16, 16)))
        # sampling location = x + one cell: content appears shifted left
        t = RigidTransform(np.eye(2), np.array([grid.cell, 0.0]))
        out = warp_bev(fm, t, grid)
        np.testing.assert_array_equal(out.data[:, :, :-1], fm.data[:, :, 1:])
        np.testing.assert_array_equal(out.data[:, :, -1], 0.0)

    def test_integer_shift_fractional_cell_size(self):
        """Same shift on a non-representable cell size, within rounding."""
        fm = Tensor(np.random.default_rng(1).normal(size=(2, 16, 16)))
        t = RigidTransform(np.eye(2), np.array([GRID.cell, 0.0]))
        out = warp_bev(fm, t, GRID)
        np.testing.assert_allclose(out.data[:, :, :-1], fm.data[:, :, 1:], atol=1e-12)
        np.testing.assert_allclose(out.data[:, :, -1], 0.0, atol=1e-12)

    def test_round_trip_recovers_interior(self):
        fm = Tensor(np.random.default_rng(2).normal(size=(2, 16, 16)))
        t = RigidTransform(np.eye(2), np.array([2 * GRID.cell, -GRID.cell]))
        back = warp_bev(warp_bev(fm, t, GRID), t.inverse(), GRID)
        interior = (slice(None), slice(2, -2), slice(2, -2))
        np.testing.assert_allclose(back.data[interior], fm.data[interior], atol=1e-6)

    def test_mass_preserved_for_interior_support(self):
        """Pure translation keeps total mass within 2% when support stays interior."""
        fm = np.zeros((1, 16, 16))
        fm[0, 5:9, 5:9] = np.random.default_rng(3).uniform(0.5, 1.0, size=(4, 4))
        t = RigidTransform(np.eye(2), np.array([0.37 * GRID.cell, -0.61 * GRID.cell]))
        out = warp_bev(Tensor(fm), t, GRID)
        assert out.data.sum() == pytest.approx(fm.sum(), rel=0.02)


class TestDeformable:
    def _params(self, cin=3, cout=4, seed=0):
        p = ParamStore()
        init_deformable(p, np.random.default_rng(seed), "d", cin, cout)
        return p

    def test_zero_offsets_bit_exact_with_conv2d(self):
        p = self._params()
        x = Tensor(np.random.default_rng(4).normal(size=(3, 12, 12)))
        a = deformable_conv(x, p, "d")
        b = conv2d(x, p["d.main.w"], p["d.main.b"], padding=1)
        assert np.array_equal(a.data, b.data)

    def test_constant_offset_equals_shifted_conv(self):
        """Bias (+1, 0) on every tap equals convolving the shifted input."""
        p = self._params()
        bias = p["d.offset.b"].data
        bias[0::2] = 1.0  # dy = +1 on all taps
        x_data = np.random.default_rng(5).normal(size=(3, 12, 12))
        shifted = np.zeros_like(x_data)
        shifted[:, :-1, :] = x_data[:, 1:, :]  # row r of shifted = row r+1 of x
        out = deformable_conv(Tensor(x_data), p, "d")
        ref = conv2d(Tensor(shifted), p["d.main.w"], p["d.main.b"], padding=1)
        interior = (slice(None), slice(1, -2), slice(1, -1))
        np.testing.assert_allclose(out.data[interior], ref.data[interior], atol=1e-10)

    def test_gradcheck_through_offsets(self):
        """Finite differences cover the offset path at tol 1e-4."""
        for seed in rng_seeds(3):
            p = self._params(cin=2, cout=2, seed=seed)
            rng = np.random.default_rng(seed + 1)
            p["d.offset.w"].data = rng.normal(0, 0.05, size=p["d.offset.w"].data.shape)
            p["d.offset.b"].data = rng.normal(0, 0.3, size=p["d.offset.b"].data.shape)
            x = rng.normal(size=(2, 6, 6))
            report = gradient_check(
                lambda ps: tsum(deformable_conv(Tensor(x), ps, "d")), p, tol=1e-4
            )
            assert report.passed, report


class TestTemporal:
    def _setup(self, channels=3, history=2):
        p = ParamStore()
        init_temporal(p, np.random.default_rng(0), channels, history)
        return p

    def test_empty_history_pads_zero_channels(self):
        p = self._setup()
        cur = Tensor(np.random.default_rng(1).normal(size=(3, 16, 16)))
        out = temporal_enhance(cur, [], p, GRID, n_max=2)
        assert out.data.shape == (3, 16, 16)
        # equivalent to convolving [current, zeros, zeros]
        from bevlab.tensor import concat

        stacked = concat([cur, Tensor(np.zeros((6, 16, 16)))], axis=0)
        ref = deformable_conv(stacked, p, "temporal")
        np.testing.assert_array_equal(out.data, ref.data)

    def test_identity_history_concats_identical_maps(self):
        p = self._setup()
        cur = Tensor(np.random.default_rng(2).normal(size=(3, 16, 16)))
        hist = [(cur, RigidTransform.identity()), (cur, RigidTransform.identity())]
        out = temporal_enhance(cur, hist, p, GRID, n_max=2)
        from bevlab.tensor import concat

        stacked = concat([cur, cur, cur], axis=0)
        ref = deformable_conv(stacked, p, "temporal")
        np.testing.assert_allclose(out.data, ref.data, atol=1e-12)

    def test_warped_history_matches_warp_oracle(self):
        p = self._setup()
        rng = np.random.default_rng(3)
        cur = Tensor(rng.normal(size=(3, 16, 16)))
        prev = Tensor(rng.normal(size=(3, 16, 16)))
        t = RigidTransform(np.eye(2), np.array([GRID.cell, 0.0]))
        audit.reset()
        with audit.auditing():
            out = temporal_enhance(cur, [(prev, t)], p, GRID, n_max=2)
        assert audit.counters().get("warp_bev", 0) == 1
        from bevlab.tensor import concat

        warped = warp_bev(prev, t, GRID)
        stacked = concat([cur, warped, Tensor(np.zeros((3, 16, 16)))], axis=0)
        np.testing.assert_allclose(
            out.data, deformable_conv(stacked, p, "temporal").data, atol=1e-12
        )

    def test_shape_mismatch_rejected(self):
        p = self._setup()
        cur = Tensor(np.zeros((3, 16, 16)))
        bad = Tensor(np.zeros((2, 16, 16)))
        with pytest.raises(ConfigurationError):
            temporal_enhance(cur, [(bad, RigidTransform.identity())], p, GRID, 2)

    def test_too_much_history_rejected(self):
        p = self._setup()
        cur = Tensor(np.zeros((3, 16, 16)))
        h = [(cur, RigidTransform.identity())] * 3
        with pytest.raises(ConfigurationError):
            temporal_enhance(cur, h, p, GRID, n_max=2)


class TestCameraEncoder:
    def test_gradients_flow(self):
        p = ParamStore()
        init_camera_encoder(p, np.random.default_rng(0), 3, 4)
        cam = np.random.default_rng(1).uniform(size=(3, 8, 8))
        from bevlab.encoders import camera_encode

        report = gradient_check(lambda ps: tsum(camera_encode(cam, ps)), p, tol=1e-4)
        assert report.passed

"""Statistics alignment, the frozen feature pyramid, and loss masking."""

import numpy as np
import pytest

from bevlab.encoders import init_lidar_encoder, lidar_to_bev, self_gate
from bevlab.errors import ConfigurationError
from bevlab.fusion import AlignmentFeatureNet, alignment_loss, fuse, init_fusion, moment_align
from bevlab.gradcheck import gradient_check
from bevlab.params import ParamStore
from bevlab.tensor import Tensor, mul, tsum
from bevlab.world import Grid

from conftest import randomize_params


def _stats(arr):
    return arr.mean(axis=(1, 2)), arr.std(axis=(1, 2))


class TestMomentAlign:
    def test_self_alignment_is_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 8, 8)))
        out = moment_align(x, x)
        np.testing.assert_allclose(out.data, x.data, atol=1e-9)

    def test_closed_form_example(self):
        cam = Tensor(np.array([[[1.0, 3.0], [1.0, 3.0]]]))
        lid = Tensor(np.array([[[0.0, 10.0], [0.0, 10.0]]]))
        out = moment_align(cam, lid)
        np.testing.assert_allclose(out.data, lid.data, atol=1e-4)

    def test_constant_camera_collapses_to_lidar_mean(self):
        cam = Tensor(np.full((3, 8, 8), 2.5))
        lid = Tensor(np.random.default_rng(1).normal(1.0, 2.0, size=(3, 8, 8)))
        out = moment_align(cam, lid)
        mu = lid.data.mean(axis=(1, 2))
        for c in range(3):
            np.testing.assert_allclose(out.data[c], mu[c], atol=1e-12)

    def test_moment_match_tolerances_on_random_pairs(self):
        """mean within 1e-9, std within 1e-6, over 100 random pairs."""
        rng = np.random.default_rng(7)
        worst_mu, worst_sd = 0.0, 0.0
        for _ in range(100):
            cam = Tensor(rng.normal(rng.uniform(-3, 3), rng.uniform(0.05, 4.0), size=(4, 8, 8)))
            lid = Tensor(rng.normal(rng.uniform(-3, 3), rng.uniform(0.05, 4.0), size=(4, 8, 8)))
            out = moment_align(cam, lid)
            mu_o, sd_o = _stats(out.data)
            mu_l, sd_l = _stats(lid.data)
            worst_mu = max(worst_mu, np.abs(mu_o - mu_l).max())
            worst_sd = max(worst_sd, np.abs(sd_o - sd_l).max())
        assert worst_mu <= 1e-9, worst_mu
        assert worst_sd <= 1e-6, worst_sd

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            moment_align(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 4, 4))))

    def test_differentiable_both_inputs(self):
        rng = np.random.default_rng(3)
        p = ParamStore()
        p.add("cam", rng.normal(size=(2, 4, 4)))
        p.add("lid", rng.normal(size=(2, 4, 4)))
        report = gradient_check(
            lambda ps: tsum(mul(moment_align(ps["cam"], ps["lid"]), 0.7)), p
        )
        assert report.passed, report


class TestAlignmentFeatureNet:
    def test_frozen_and_seed_deterministic(self):
        a, b = AlignmentFeatureNet(4, seed=9), AlignmentFeatureNet(4, seed=9)
        x = Tensor(np.random.default_rng(0).normal(size=(4, 16, 16)))
        np.testing.assert_array_equal(a.final(x).data, b.final(x).data)
        other = AlignmentFeatureNet(4, seed=10)
        assert not np.array_equal(a.final(x).data, other.final(x).data)

    def test_stages_halve_spatial_size(self):
        net = AlignmentFeatureNet(3)
        x = Tensor(np.random.default_rng(1).normal(size=(3, 32, 32)))
        sizes = [s.data.shape for s in net.stages(x)]
        assert sizes == [(8, 16, 16), (16, 8, 8), (32, 4, 4), (64, 2, 2)]

    def test_rejects_bad_input(self):
        net = AlignmentFeatureNet(3)
        with pytest.raises(ConfigurationError):
            net.stages(Tensor(np.zeros((3, 24, 24))))
        with pytest.raises(ConfigurationError):
            net.stages(Tensor(np.zeros((2, 32, 32))))


class TestAlignmentLoss:
    net = AlignmentFeatureNet(3, seed=5)

    def test_zero_when_everything_matches(self):
        x = Tensor(np.random.default_rng(2).normal(size=(3, 16, 16)))
        loss = alignment_loss(x, x, x, self.net)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a = Tensor(rng.normal(size=(3, 16, 16)))
            b = Tensor(rng.normal(size=(3, 16, 16)))
            c = Tensor(rng.normal(size=(3, 16, 16)))
            assert alignment_loss(a, b, c, self.net).item() >= 0.0

    def test_scaling_fuse_changes_stats_only(self):
        """With b_out = b_lidar, only the stage-statistic terms react."""
        rng = np.random.default_rng(4)
        lid = Tensor(rng.normal(size=(3, 16, 16)))
        base = alignment_loss(lid, lid, lid, self.net)
        assert base.item() == pytest.approx(0.0, abs=1e-9)
        scaled = alignment_loss(lid, mul(lid, 2.0), lid, self.net)
        # final term compares b_out vs b_lidar and must stay zero; the
        # difference therefore equals the stage statistic discrepancy
        fuse_stages = self.net.stages(mul(lid, 2.0))
        lid_stages = self.net.stages(lid)
        want = 0.0
        for fs, ls in zip(fuse_stages, lid_stages):
            mu_f, sd_f = _stats(fs.data)
            mu_l, sd_l = _stats(ls.data)
            want += np.sqrt((np.abs(mu_f - mu_l) ** 2).sum())
            want += np.sqrt((np.abs(sd_f - sd_l) ** 2).sum())
        assert scaled.item() == pytest.approx(want, rel=1e-9)

    def test_gradient_masking_exact(self):
        """Alignment loss alone leaves LiDAR-encoder grads exactly zero."""
        grid = Grid(16, 12.8)
        rng = np.random.default_rng(5)
        params = ParamStore()
        init_lidar_encoder(params, rng, 3)
        init_fusion(params, rng, 3)
        randomize_params(params, rng)
        pts = rng.uniform(-5, 5, size=(40, 2))
        cam = Tensor(rng.normal(size=(3, 16, 16)), requires_grad=True)

        params.zero_grads()
        b_lidar = self_gate(lidar_to_bev(pts, params, grid))
        lid_d = b_lidar.detach()
        b_out = moment_align(cam, lid_d)
        b_fuse = fuse(b_out, lid_d, params)
        loss = mul(alignment_loss(b_out, b_fuse, lid_d, self.net), 0.1)
        loss.backward()

        for name in params.names():
            if name.startswith("lidar."):
                assert params[name].grad is None, f"{name} received gradient"
        fusion_grads = [
            np.abs(params[n].grad).max()
            for n in params.names()
            if n.startswith("fuse") and params[n].grad is not None
        ]
        assert fusion_grads and max(fusion_grads) > 0
        assert cam.grad is not None and np.abs(cam.grad).max() > 0


class TestFuse:
    def test_deterministic_and_differentiable(self):
        rng = np.random.default_rng(6)
        params = ParamStore()
        init_fusion(params, rng, 2)
        randomize_params(params, rng, scale=0.1)
        a = Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
        out1 = fuse(a, b, params)
        out2 = fuse(a, b, params)
        np.testing.assert_array_equal(out1.data, out2.data)
        tsum(out1).backward()
        assert np.abs(a.grad).max() > 0 and np.abs(b.grad).max() > 0

    def test_shape_mismatch_rejected(self):
        params = ParamStore()
        init_fusion(params, np.random.default_rng(0), 2)
        with pytest.raises(ConfigurationError):
            fuse(Tensor(np.zeros((2, 8, 8))), Tensor(np.zeros((2, 4, 4))), params)

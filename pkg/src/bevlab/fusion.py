"""Statistics-aligned camera/LiDAR fusion and its alignment loss.

``moment_align`` re-standardizes the camera BEV map so each channel takes
on the LiDAR map's per-channel spatial mean and standard deviation (the
instance-normalization convention).  The fused map is produced by a short
deformable-conv stack over the channel concat of the aligned camera map
and the LiDAR map.

``alignment_loss`` compares per-channel feature statistics of the fused
and LiDAR maps through a small frozen random conv pyramid (four stages of
conv/relu/pool), plus a final-feature distance between the aligned camera
map and the LiDAR map.  The LiDAR map is detached here: by construction
this loss can never move LiDAR-encoder parameters, so callers that also
feed a fused map into it must build that map from a detached LiDAR input
(the pipeline does).
"""

from __future__ import annotations

import numpy as np

from . import audit
from .errors import ConfigurationError
from .params import ParamStore
from .tensor import (
    Tensor,
    add,
    concat,
    conv2d,
    div,
    l2_norm,
    max_pool2,
    maximum,
    mul,
    relu,
    spatial_mean,
    spatial_var,
    sqrt,
    sub,
)
from .encoders import deformable_conv, he_conv, init_deformable

_VAR_PAD = 1e-30  # keeps sqrt differentiable at exactly zero variance


def _spatial_std(fm: Tensor) -> Tensor:
    return sqrt(add(spatial_var(fm), _VAR_PAD))


def moment_align(b_cam: Tensor, b_lidar: Tensor, eps: float = 1e-5) -> Tensor:
    """Give the camera map the LiDAR map's per-channel mean and std.

    The camera std is floored at ``eps`` rather than shifted by it, so
    non-degenerate channels are matched exactly (to rounding) while a
    constant camera channel still maps cleanly to the LiDAR mean.
    """
    audit.record("moment_align")
    if b_cam.data.shape != b_lidar.data.shape:
        raise ConfigurationError("moment_align requires identical shapes")
    if eps <= 0:
        raise ConfigurationError("moment_align requires eps > 0")
    mu_c = spatial_mean(b_cam)
    mu_l = spatial_mean(b_lidar)
    std_c = maximum(_spatial_std(b_cam), Tensor(np.full(mu_c.data.shape, eps)))
    std_l = _spatial_std(b_lidar)
    return add(mul(std_l, div(sub(b_cam, mu_c), std_c)), mu_l)


class AlignmentFeatureNet:
    """Four frozen conv/relu/pool stages plus a final conv/relu stage.

    Weights are drawn once from a seeded Gaussian and never trained; each
    pooled stage halves the spatial size, so inputs must be divisible by
    16.  Random fixed features preserve the statistic discrepancies the
    alignment loss needs at this scale.
    """

    STAGE_CHANNELS = (8, 16, 32, 64)

    def __init__(self, in_channels: int, seed: int = 7):
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self._weights = []
        cin = in_channels
        for cout in self.STAGE_CHANNELS:
            w = he_conv(rng, cout, cin, 3)
            b = rng.normal(0.0, 0.05, size=cout)
            self._weights.append((Tensor(w), Tensor(b)))
            cin = cout
        w = he_conv(rng, 64, cin, 3)
        b = rng.normal(0.0, 0.05, size=64)
        self._final = (Tensor(w), Tensor(b))

    def stages(self, fm: Tensor) -> list[Tensor]:
        """Outputs of the four pooled stages f_1..f_4."""
        if fm.data.shape[0] != self.in_channels:
            raise ConfigurationError("feature-net channel mismatch")
        if fm.data.shape[1] % 16 or fm.data.shape[2] % 16:
            raise ConfigurationError("feature-net input dims must be divisible by 16")
        outs = []
        x = fm
        for w, b in self._weights:
            x = max_pool2(relu(conv2d(x, w, b, padding=1)))
            outs.append(x)
        return outs

    def final(self, fm: Tensor, stages: list[Tensor] | None = None) -> Tensor:
        """Final-stage features (full pyramid then one more conv/relu)."""
        x = stages[-1] if stages else self.stages(fm)[-1]
        w, b = self._final
        return relu(conv2d(x, w, b, padding=1))


def init_fusion(params: ParamStore, rng, channels: int):
    init_deformable(params, rng, "fuse1", 2 * channels, channels)
    init_deformable(params, rng, "fuse2", channels, channels)


def fuse(b_out: Tensor, b_lidar: Tensor, params: ParamStore) -> Tensor:
    """Deformable-conv stack over the channel concat of the two maps."""
    audit.record("fuse")
    if b_out.data.shape != b_lidar.data.shape:
        raise ConfigurationError("fuse requires identical shapes")
    x = concat([b_out, b_lidar], axis=0)
    x = relu(deformable_conv(x, params, "fuse1"))
    return deformable_conv(x, params, "fuse2")


def alignment_loss(
    b_out: Tensor, b_fuse: Tensor, b_lidar: Tensor, net: AlignmentFeatureNet
) -> Tensor:
    """Stage-statistic and final-feature discrepancy; zero iff all match.

    Per stage i the per-channel mean and std vectors of the fused and the
    LiDAR features are compared in Euclidean norm; the final term is the
    Euclidean distance between final-stage features of the aligned camera
    map and the LiDAR map.  The LiDAR argument is detached, keeping every
    LiDAR-encoder parameter out of this loss's gradient.
    """
    audit.record("alignment_loss")
    lidar = b_lidar.detach()
    fuse_stages = net.stages(b_fuse)
    lidar_stages = net.stages(lidar)
    total = None
    for fs, ls in zip(fuse_stages, lidar_stages):
        mu_term = l2_norm(sub(spatial_mean(fs), spatial_mean(ls)))
        sd_term = l2_norm(sub(_spatial_std(fs), _spatial_std(ls)))
        term = add(mu_term, sd_term)
        total = term if total is None else add(total, term)
    final_term = l2_norm(sub(net.final(b_out), net.final(lidar, lidar_stages)))
    return add(total, final_term)

"""Branch encoders producing the LiDAR and camera BEV feature maps.

The LiDAR path rasterizes points into two pillar channels (occupancy and
per-cell count) and runs a two-layer conv stack whose parameters are the
only ones the alignment loss must never touch.  The camera path encodes
per-frame occupancy maps, warps recent history into the current frame and
fuses it with a deformable convolution.
"""

from __future__ import annotations

import numpy as np

from . import audit
from .errors import ConfigurationError
from .geometry import RigidTransform
from .params import ParamStore
from .tensor import (
    Tensor,
    add,
    bilinear_sample,
    concat,
    conv2d,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    transpose,
)
from .world import Grid


def pillar_features(points: np.ndarray, grid: Grid) -> np.ndarray:
    """(2, H, W) array of occupancy and raw point count per cell.

    Points outside the world extent are dropped; an empty point set yields
    all-zero channels.
    """
    h = grid.size
    out = np.zeros((2, h, h))
    if len(points) == 0:
        return out
    rc = grid.to_cells(points)
    rows = np.round(rc[:, 0]).astype(np.int64)
    cols = np.round(rc[:, 1]).astype(np.int64)
    keep = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < h)
    rows, cols = rows[keep], cols[keep]
    counts = np.bincount(rows * h + cols, minlength=h * h).reshape(h, h)
    out[0] = counts > 0
    out[1] = counts
    return out


def he_conv(rng, cout, cin, k):
    """He-normal conv weight (OIHW) for relu stacks."""
    std = np.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k))


def init_lidar_encoder(params: ParamStore, rng, channels: int):
    params.add("lidar.conv1.w", he_conv(rng, channels, 2, 3))
    params.add("lidar.conv1.b", np.zeros(channels))
    params.add("lidar.conv2.w", he_conv(rng, channels, channels, 3))
    params.add("lidar.conv2.b", np.zeros(channels))


def lidar_to_bev(points: np.ndarray, params: ParamStore, grid: Grid) -> Tensor:
    """Pillarize points and lift to a learned C-channel BEV map."""
    pillars = Tensor(pillar_features(points, grid))
    x = relu(conv2d(pillars, params["lidar.conv1.w"], params["lidar.conv1.b"], padding=1))
    x = conv2d(x, params["lidar.conv2.w"], params["lidar.conv2.b"], padding=1)
    return relu(x)


def lidar_encoder_names(params: ParamStore) -> list[str]:
    return [n for n in params.names() if n.startswith("lidar.")]


def self_gate(fm: Tensor) -> Tensor:
    """sigmoid(x) * x, applied elementwise (a soft self-selection gate)."""
    audit.record("self_gate")
    return mul(sigmoid(fm), fm)


def init_camera_encoder(params: ParamStore, rng, in_channels: int, channels: int):
    params.add("cam.conv1.w", he_conv(rng, channels, in_channels, 3))
    params.add("cam.conv1.b", np.zeros(channels))
    params.add("cam.conv2.w", he_conv(rng, channels, channels, 3))
    params.add("cam.conv2.b", np.zeros(channels))


def camera_encode(cam_map: np.ndarray, params: ParamStore) -> Tensor:
    x = relu(conv2d(Tensor(cam_map), params["cam.conv1.w"], params["cam.conv1.b"], padding=1))
    return relu(conv2d(x, params["cam.conv2.w"], params["cam.conv2.b"], padding=1))


def warp_bev(prev: Tensor, transform: RigidTransform, grid: Grid) -> Tensor:
    """Resample a previous-frame map into the current frame.

    ``transform`` maps current-frame metric coordinates into the previous
    frame; every output cell samples the previous map there (border-zero).
    """
    audit.record("warp_bev")
    xs, ys = grid.cell_centers()
    src = transform.apply(np.stack([xs.ravel(), ys.ravel()], axis=-1))
    rc = grid.to_cells(src)
    coords = np.stack(
        [rc[:, 0].reshape(xs.shape), rc[:, 1].reshape(xs.shape)], axis=0
    )
    return bilinear_sample(prev, Tensor(coords))


def init_deformable(params: ParamStore, rng, prefix: str, cin: int, cout: int, k: int = 3):
    """Offset-predicting conv (zero-initialized) plus the main kernel."""
    params.add(f"{prefix}.offset.w", np.zeros((2 * k * k, cin, k, k)))
    params.add(f"{prefix}.offset.b", np.zeros(2 * k * k))
    params.add(f"{prefix}.main.w", he_conv(rng, cout, cin, k))
    params.add(f"{prefix}.main.b", np.zeros(cout))


def _deform_base_grid(h: int, w: int, k: int) -> np.ndarray:
    """(2, k*k, h, w) lattice of per-tap sampling rows/cols."""
    pad = k // 2
    rows = np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (h, w))
    cols = np.broadcast_to(np.arange(w, dtype=np.float64)[None, :], (h, w))
    base = np.empty((2, k * k, h, w))
    for i in range(k):
        for j in range(k):
            base[0, i * k + j] = rows + (i - pad)
            base[1, i * k + j] = cols + (j - pad)
    return base


def deformable_conv(x: Tensor, params: ParamStore, prefix: str, k: int = 3) -> Tensor:
    """Convolution whose taps sample at learned fractional offsets.

    A companion conv predicts a (dy, dx) offset per tap and cell; all taps
    are gathered with one bilinear sample into the same (channel, tap)
    column layout conv2d's im2col builds, followed by the same single
    matmul.  With all-zero offset parameters the gathered columns equal
    the im2col columns exactly, so the op reproduces an ordinary
    same-padded conv2d bit for bit.
    """
    w_off = params[f"{prefix}.offset.w"]
    b_off = params[f"{prefix}.offset.b"]
    w_main = params[f"{prefix}.main.w"]
    b_main = params[f"{prefix}.main.b"]
    cin, h, wd = x.data.shape
    cout = w_main.data.shape[0]
    if w_main.data.shape[1] != cin:
        raise ConfigurationError("deformable_conv channel mismatch")
    kk = k * k
    offsets = conv2d(x, w_off, b_off, padding=k // 2)  # (2*k*k, h, w)
    off = transpose(reshape(offsets, (kk, 2, h, wd)), (1, 0, 2, 3))
    coords = add(Tensor(_deform_base_grid(h, wd, k)), off)
    col = bilinear_sample(x, coords)  # (cin, k*k, h, w)
    out2 = matmul(
        reshape(w_main, (cout, cin * kk)), reshape(col, (cin * kk, h * wd))
    )
    out2 = add(out2, reshape(b_main, (cout, 1)))
    return reshape(out2, (cout, h, wd))


def init_temporal(params: ParamStore, rng, channels: int, history: int):
    init_deformable(params, rng, "temporal", channels * (history + 1), channels)


def temporal_enhance(
    current: Tensor,
    history: list[tuple[Tensor, RigidTransform]],
    params: ParamStore,
    grid: Grid,
    n_max: int,
) -> Tensor:
    """Warp history into the current frame, concat, deformable-convolve.

    Missing history slots are zero maps, so the channel layout is fixed at
    (n_max + 1) * C regardless of how much history a sample carries.
    """
    audit.record("temporal_enhance")
    if len(history) > n_max:
        raise ConfigurationError(f"history longer than n_max={n_max}")
    c, h, w = current.data.shape
    maps = [current]
    for prev, transform in history:
        if prev.data.shape != current.data.shape:
            raise ConfigurationError("history maps must match current shape")
        maps.append(warp_bev(prev, transform, grid))
    while len(maps) < n_max + 1:
        maps.append(Tensor(np.zeros((c, h, w))))
    stacked = concat(maps, axis=0)
    return deformable_conv(stacked, params, "temporal")

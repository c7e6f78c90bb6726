"""
grouping.py

Fast point-neighbor search on the range image: a k x k window slides over the
image and every placement gathers one group of N = k^2 projected points.
With k = stride = 4 and no padding the groups tile the image exactly, so each
point belongs to one group and P * N == W * H.

Enumeration order is fixed: groups row-major over window origins, slots
row-major over the (dilated) k x k lattice. The spatial 1 x N convolution in
the projection module relies on this order.
"""

import math
from dataclasses import dataclass

import numpy as np

from .console import setup_logger
from .errors import ConfigError
from .projection import C1_CHANNELS, export_grid

# --- CONFIGURATION ---
C2_CHANNELS = ("x", "x_r", "y", "y_r", "z", "z_r", "depth", "depth_r",
               "remission", "remission_r", "d_euc")

logger = setup_logger(__name__)


@dataclass(frozen=True)
class PointGroups:
    data: np.ndarray        # (P, N, C) with C = 5 (C1) or 11 (C2)
    origin: np.ndarray      # (P, N, 2) source pixel (u, v)
    present: np.ndarray     # (P, N) bool
    grid_shape: tuple       # (rows, cols) of window placements, rows * cols == P

    @property
    def num_groups(self):
        return self.data.shape[0]

    @property
    def group_size(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return C2_CHANNELS if self.data.shape[2] == len(C2_CHANNELS) else C1_CHANNELS


def _window_starts(size, cfg):
    extent = cfg.extent
    if cfg.padding == "none":
        if size < extent:
            raise ConfigError(f"window extent {extent} exceeds image size {size}")
        count = (size - extent) // cfg.stride + 1
        before = 0
    else:
        count = math.ceil(size / cfg.stride)
        before = max((count - 1) * cfg.stride + extent - size, 0) // 2
    return np.arange(count, dtype=np.int64) * cfg.stride - before


def window_indices(height, width, cfg):
    """Flat pixel index per (group, slot), -1 where the slot falls off-image.

    Returns (index (P, N), rows (P, N), cols (P, N), grid_shape).
    """
    row_starts = _window_starts(height, cfg)
    col_starts = _window_starts(width, cfg)
    offsets = np.arange(cfg.k, dtype=np.int64) * cfg.dilation
    rows = row_starts[:, None, None, None] + offsets[None, None, :, None]
    cols = col_starts[None, :, None, None] + offsets[None, None, None, :]
    rows, cols = np.broadcast_arrays(rows, cols)
    if cfg.wrap_columns:
        cols = cols % width
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    index = np.where(inside, rows * width + cols, -1)
    grid_shape = (len(row_starts), len(col_starts))
    num_groups = grid_shape[0] * grid_shape[1]
    shape = (num_groups, cfg.k * cfg.k)
    return index.reshape(shape), rows.reshape(shape), cols.reshape(shape), grid_shape


def make_groups(img, cfg):
    """Slide the window over a RangeImage; absent slots carry zero features."""
    cfg.validate(img.width, img.height)
    index, rows, cols, grid_shape = window_indices(img.height, img.width, cfg)
    flat_valid = img.valid.reshape(-1)
    flat_features = img.features.reshape(-1, img.features.shape[-1])
    safe = np.where(index >= 0, index, 0)
    present = (index >= 0) & flat_valid[safe]
    data = np.where(present[..., None], flat_features[safe], 0.0)
    logger.debug("built %d groups of %d points (grid %s)", data.shape[0], data.shape[1], grid_shape)
    return PointGroups(data=data, origin=np.stack([cols, rows], axis=-1),
                       present=present, grid_shape=grid_shape)


def augment_features(groups):
    """C1 -> C2: add values relative to the group mean and distance to the mean point.

    Means use present slots only; an all-absent group stays all-zero.
    """
    data = groups.data
    present = groups.present[..., None]
    counts = np.maximum(groups.present.sum(axis=1), 1)[:, None, None]
    mean = (data * present).sum(axis=1, keepdims=True) / counts
    relative = np.where(present, data - mean, 0.0)
    d_euc = np.sqrt((relative[..., 0:3] ** 2).sum(axis=-1))

    out = np.zeros(data.shape[:2] + (len(C2_CHANNELS),), dtype=np.float64)
    out[..., 0:10:2] = data
    out[..., 1:10:2] = relative
    out[..., 10] = d_euc
    return PointGroups(data=out, origin=groups.origin, present=groups.present, grid_shape=groups.grid_shape)


def export_groups(groups, path):
    return export_grid(groups.data, path, groups.channels)

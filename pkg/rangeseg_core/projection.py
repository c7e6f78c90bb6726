"""
projection.py

Spherical projection of a scan into a W x H range image:

    u = floor(1/2 * (1 - atan2(y, x) / pi) * W)
    v = floor((1 - (asin(z / r) + f_down) / f) * H),   f = f_up + f_down

both clamped onto the image. Row 0 is the top edge of the field (f_up
above the horizon), so a 3/25 degree sensor puts the horizon at row
H * 3/28. Every pixel keeps the nearest point that lands
on it (ties -> lowest point index) and stores its C1 features
[x, y, z, depth, remission]. Arrays are indexed [v, u] (row, column).
"""

import os
from dataclasses import dataclass

import numpy as np

from .console import setup_logger
from .errors import DegeneratePointError, FormatError

# --- CONFIGURATION ---
C1_CHANNELS = ("x", "y", "z", "depth", "remission")
DEPTH_CHANNEL = 3
DUMP_DTYPE = np.dtype("<f4")

logger = setup_logger(__name__)


@dataclass(frozen=True)
class RangeImage:
    features: np.ndarray        # (H, W, 5) float64, zero where invalid
    valid: np.ndarray           # (H, W) bool
    representative: np.ndarray  # (H, W) int64 point index, -1 = none
    point_to_pixel: np.ndarray  # (M, 2) int64 (u, v)
    point_depth: np.ndarray     # (M,) float64

    @property
    def height(self):
        return self.features.shape[0]

    @property
    def width(self):
        return self.features.shape[1]

    @property
    def depth(self):
        return self.features[..., DEPTH_CHANNEL]

    @property
    def num_points(self):
        return len(self.point_to_pixel)


def project_points(xyz, cfg):
    """Vectorized pixel coordinates (u, v) for an (M, 3) array."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    degenerate = r == 0
    if degenerate.any():
        index = int(np.flatnonzero(degenerate)[0])
        raise DegeneratePointError(f"point {index} has zero depth and cannot be projected", index=index)
    u = np.floor(0.5 * (1.0 - np.arctan2(y, x) / np.pi) * cfg.width)
    v = np.floor((1.0 - (np.arcsin(np.clip(z / r, -1.0, 1.0)) + cfg.fov_down) / cfg.fov) * cfg.height)
    u = np.clip(u, 0, cfg.width - 1).astype(np.int64)
    v = np.clip(v, 0, cfg.height - 1).astype(np.int64)
    return u, v


def project_point(point, cfg):
    """(u, v) of a single point given as (x, y, z[, remission])."""
    u, v = project_points(np.asarray(point, dtype=np.float64)[:3], cfg)
    return int(u[0]), int(v[0])


def build_range_image(cloud, cfg):
    """Project a PointCloud; the nearest point wins each pixel."""
    points = cloud.points.astype(np.float64)
    u, v = project_points(points[:, :3], cfg)
    depth = np.linalg.norm(points[:, :3], axis=1)
    height, width = cfg.height, cfg.width

    flat = v * width + u
    order = np.lexsort((np.arange(len(points)), depth))
    pixels, first = np.unique(flat[order], return_index=True)
    winners = order[first]

    representative = np.full(height * width, -1, dtype=np.int64)
    representative[pixels] = winners
    features = np.zeros((height * width, len(C1_CHANNELS)), dtype=np.float64)
    features[pixels, 0:3] = points[winners, 0:3]
    features[pixels, DEPTH_CHANNEL] = depth[winners]
    features[pixels, 4] = points[winners, 3]

    logger.debug("projected %d points onto %d of %d pixels", len(points), len(pixels), height * width)
    return RangeImage(
        features=features.reshape(height, width, len(C1_CHANNELS)),
        valid=(representative >= 0).reshape(height, width),
        representative=representative.reshape(height, width),
        point_to_pixel=np.stack([u, v], axis=1),
        point_depth=depth,
    )


def reproject_labels(img, pixel_labels, num_points=None):
    """Give every point (occluded ones included) the label of its pixel."""
    from .scan_io import LabelSet

    pixel_labels = np.asarray(pixel_labels)
    if pixel_labels.shape != (img.height, img.width):
        raise FormatError(f"pixel labels {pixel_labels.shape} do not cover the {img.height}x{img.width} image")
    if num_points is not None and num_points != img.num_points:
        raise FormatError(f"range image holds {img.num_points} points, asked for {num_points}")
    u, v = img.point_to_pixel[:, 0], img.point_to_pixel[:, 1]
    return LabelSet(pixel_labels[v, u])


def label_image(img, labels, ignore_id):
    """Per-pixel targets: the representative point's label, ignore_id elsewhere."""
    values = labels.labels if hasattr(labels, "labels") else np.asarray(labels)
    out = np.full((img.height, img.width), ignore_id, dtype=np.int64)
    out[img.valid] = values[img.representative[img.valid]]
    return out


def export_grid(array, path, channels):
    """Flat little-endian float32 dump of an (..., C) array plus a text sidecar."""
    array = np.asarray(array)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    array.astype(DUMP_DTYPE).tofile(path)
    with open(path + ".txt", "w", encoding="utf-8") as f:
        f.write("shape: " + " ".join(str(s) for s in array.shape) + "\n")
        f.write("channels: " + ",".join(channels) + "\n")
        f.write("dtype: float32 little-endian, row-major\n")
    return path


def export_range_image(img, path):
    return export_grid(img.features, path, C1_CHANNELS)


def load_grid_dump(path):
    """Read back a dump written by export_grid -> (array, channel names)."""
    header = {}
    with open(path + ".txt", "r", encoding="utf-8") as f:
        for line in f:
            key, _, value = line.partition(":")
            header[key.strip()] = value.strip()
    shape = tuple(int(s) for s in header["shape"].split())
    data = np.fromfile(path, dtype=DUMP_DTYPE)
    if data.size != int(np.prod(shape)):
        raise FormatError(f"dump holds {data.size} values, header says {shape}", path=path)
    return data.reshape(shape), header["channels"].split(",")

"""
scan_io.py

Bit-exact reading and writing of LIDAR scans and per-point label files in the
KITTI / SemanticKITTI layout:

    <dataset>/velodyne/000000.bin    little-endian float32 x, y, z, remission
    <dataset>/labels/000000.label    little-endian uint32, low 16 bits = class

Instance ids (upper 16 label bits) are dropped on read and written as zero.
"""

import glob
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .console import setup_logger
from .errors import EmptyInputError, FormatError

# --- CONFIGURATION ---
SCAN_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
POINT_BYTES = 4 * SCAN_DTYPE.itemsize
CLASS_MASK = 0xFFFF
SCAN_DIR = "velodyne"
LABEL_DIR = "labels"

logger = setup_logger(__name__)


@dataclass
class PointCloud:
    """Raw scan, one row per point: (x, y, z, remission). Order is file order."""
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise FormatError(f"point array must be (M, 4), got {self.points.shape}")
        if len(self.points) == 0:
            raise EmptyInputError("no points")

    @property
    def count(self):
        return len(self.points)

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def remission(self):
        return self.points[:, 3]

    def __len__(self):
        return self.count

    def subset(self, index):
        return PointCloud(self.points[index])


@dataclass
class LabelSet:
    """Per-point class ids, index-aligned to a PointCloud."""
    labels: np.ndarray
    num_classes: Optional[int] = None
    ignore_id: Optional[int] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return isinstance(other, LabelSet) and np.array_equal(self.labels, other.labels)

    def subset(self, index):
        return LabelSet(self.labels[index], self.num_classes, self.ignore_id)

    def check(self, count=None):
        """Raise if misaligned with `count` points or out of class range."""
        if count is not None and len(self.labels) != count:
            raise FormatError(f"label count {len(self.labels)} does not match {count} points")
        if self.num_classes is not None:
            bad = (self.labels >= self.num_classes) & (self.labels != self.ignore_id)
            if bad.any():
                index = int(np.flatnonzero(bad)[0])
                raise FormatError(f"label {int(self.labels[index])} at index {index} is not < {self.num_classes}",
                                  index=index)
        return self


def read_scan(path):
    """Decode a .bin scan. Rejects truncated files and non-finite values."""
    file_size = os.path.getsize(path)
    if file_size == 0:
        raise EmptyInputError("no points", path=path)
    if file_size % POINT_BYTES:
        raise FormatError(f"truncated scan: {file_size} bytes is not a multiple of {POINT_BYTES}", path=path)
    points = np.fromfile(path, dtype=SCAN_DTYPE).reshape(-1, 4)
    finite = np.isfinite(points).all(axis=1)
    if not finite.all():
        index = int(np.flatnonzero(~finite)[0])
        raise FormatError(f"non-finite value at point {index}", path=path, index=index)
    logger.debug("read %d points from %s", len(points), path)
    return PointCloud(points)


def write_scan(cloud, path):
    _ensure_parent(path)
    try:
        cloud.points.astype(SCAN_DTYPE, copy=False).tofile(path)
    except OSError as e:
        raise OSError(e.errno, f"cannot write scan: {e.strerror}", path) from e
    return path


def read_labels(path, count, num_classes=None, ignore_id=None):
    """Decode a .label file holding exactly `count` words."""
    file_size = os.path.getsize(path)
    expected = count * LABEL_DTYPE.itemsize
    if file_size != expected:
        raise FormatError(
            f"expected {count} labels ({expected} bytes), found {file_size / LABEL_DTYPE.itemsize:g} "
            f"({file_size} bytes)", path=path)
    words = np.fromfile(path, dtype=LABEL_DTYPE)
    return LabelSet(words & CLASS_MASK, num_classes=num_classes, ignore_id=ignore_id)


def read_label_file(path, num_classes=None, ignore_id=None):
    """Decode a .label file on its own, taking the count from the file size."""
    file_size = os.path.getsize(path)
    if file_size % LABEL_DTYPE.itemsize:
        raise FormatError(f"truncated label file: {file_size} bytes", path=path)
    return read_labels(path, file_size // LABEL_DTYPE.itemsize, num_classes, ignore_id)


def write_predictions(labels, path):
    """One uint32 per point, instance bits zero; read_labels inverts it."""
    values = labels.labels if isinstance(labels, LabelSet) else np.asarray(labels)
    if values.size == 0:
        raise EmptyInputError("refusing to write an empty label set", path=path)
    if values.min() < 0 or values.max() > CLASS_MASK:
        raise FormatError("class ids must fit in 16 bits", path=path)
    _ensure_parent(path)
    try:
        values.astype(LABEL_DTYPE).tofile(path)
    except OSError as e:
        raise OSError(e.errno, f"cannot write predictions: {e.strerror}", path) from e
    return path


# Ground-truth label files share the prediction format.
write_labels = write_predictions


def scan_id(path):
    return os.path.splitext(os.path.basename(path))[0]


def list_scan_pairs(dataset_dir, require_labels=False):
    """Sorted (scan_path, label_path or None) pairs under a dataset directory."""
    scan_dir = os.path.join(dataset_dir, SCAN_DIR)
    if not os.path.isdir(scan_dir):
        scan_dir = dataset_dir
    scans = sorted(glob.glob(os.path.join(scan_dir, "*.bin")))
    if not scans:
        raise EmptyInputError("no .bin scans found", path=dataset_dir)
    pairs = []
    for scan in scans:
        label = os.path.join(dataset_dir, LABEL_DIR, scan_id(scan) + ".label")
        if not os.path.isfile(label):
            if require_labels:
                raise FormatError("missing label file for scan", path=label)
            label = None
        pairs.append((scan, label))
    return pairs


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)

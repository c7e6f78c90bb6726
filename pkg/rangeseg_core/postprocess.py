"""
postprocess.py

Depth-aware KNN refinement of per-point labels. Pixel predictions only
describe each pixel's representative point; occluded points sharing that
pixel inherit its label after re-projection. Refinement instead looks at
the window around each point's pixel, keeps the K candidates whose depth is
closest to the point's own, and takes their majority class.

Ordering rules (so results are exact and reproducible):
  candidates are visited column offset first, then row offset, both
  ascending; the K nearest are taken with a stable sort on |depth delta|;
  class ties go to the tied class of the closest selected candidate.
"""

import numpy as np

from .console import setup_logger
from .projection import reproject_labels
from .scan_io import LabelSet

logger = setup_logger(__name__)


def window_offsets(window):
    """(du, dv) pairs ordered by du then dv, both ascending."""
    half = window // 2
    steps = np.arange(-half, half + 1)
    du, dv = np.meshgrid(steps, steps, indexing="ij")
    return du.reshape(-1), dv.reshape(-1)


def candidate_distances(img, cfg):
    """-> (distance (M, S) with inf for unusable slots, candidate pixel labels index (M, S))."""
    du, dv = window_offsets(cfg.window)
    u = img.point_to_pixel[:, 0:1] + du[None, :]
    v = img.point_to_pixel[:, 1:2] + dv[None, :]
    if cfg.circular:
        u = u % img.width
    inside = (u >= 0) & (u < img.width) & (v >= 0) & (v < img.height)
    flat = np.where(inside, v * img.width + u, 0)
    usable = inside & img.valid.reshape(-1)[flat]
    depth = img.depth.reshape(-1)[flat]
    distance = np.where(usable, np.abs(img.point_depth[:, None] - depth), np.inf)
    if cfg.cutoff is not None:
        distance = np.where(distance <= cfg.cutoff, distance, np.inf)
    return distance, flat


def knn_refine(img, pixel_labels, cfg):
    """Refined per-point LabelSet from (H, W) pixel predictions."""
    pixel_labels = np.asarray(pixel_labels, dtype=np.int64)
    fallback = reproject_labels(img, pixel_labels).labels
    distance, flat = candidate_distances(img, cfg)

    order = np.argsort(distance, axis=1, kind="stable")[:, :cfg.k]
    picked_distance = np.take_along_axis(distance, order, axis=1)
    picked_labels = pixel_labels.reshape(-1)[np.take_along_axis(flat, order, axis=1)]
    usable = np.isfinite(picked_distance)

    if cfg.weighting == "gaussian":
        safe = np.where(usable, picked_distance, 0.0)
        weights = np.exp(-0.5 * (safe / cfg.sigma) ** 2) * usable
    else:
        weights = usable.astype(np.float64)

    num_points = len(fallback)
    num_classes = int(pixel_labels.max()) + 1 if pixel_labels.size else 1
    votes = np.zeros((num_points, num_classes))
    rows = np.repeat(np.arange(num_points), picked_labels.shape[1])
    np.add.at(votes, (rows, picked_labels.reshape(-1)), weights.reshape(-1))

    best = votes.max(axis=1, keepdims=True)
    tied = (votes == best)[np.arange(num_points)[:, None], picked_labels] & usable
    first = np.argmax(tied, axis=1)
    refined = picked_labels[np.arange(num_points), first]
    refined = np.where(usable.any(axis=1), refined, fallback)

    changed = int((refined != fallback).sum())
    logger.debug("knn refinement changed %d of %d point labels", changed, num_points)
    return LabelSet(refined)

"""
training.py

Median-frequency class weights, scan augmentation, sample preparation and
the SGD training loop.

A run directory receives:
    metrics.csv              epoch, lr, train_loss, val_mIoU
    checkpoint_last.ckpt     after every epoch
    checkpoint_best.ckpt     best validation mIoU so far
"""

import math
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from tqdm import tqdm

from .checkpoint import save_checkpoint
from .console import setup_logger
from .errors import EmptyInputError, FormatError, TrainingDivergedError
from .evaluation import ConfusionMatrix, miou
from .grouping import augment_features, make_groups
from .inference import infer_scan
from .network import group_tensor, image_tensor
from .nn import SGD
from .projection import build_range_image, label_image
from .scan_io import LabelSet, PointCloud, read_label_file, read_labels, read_scan
from .tensor import weighted_cross_entropy

# --- CONFIGURATION ---
METRICS_FILE = "metrics.csv"
LAST_CHECKPOINT = "checkpoint_last.ckpt"
BEST_CHECKPOINT = "checkpoint_best.ckpt"
METRIC_COLUMNS = ["epoch", "lr", "train_loss", "val_mIoU"]

logger = setup_logger(__name__)


@dataclass
class LossSpec:
    counts: np.ndarray          # labeled points per class
    frequencies: np.ndarray     # f_c, sums to 1
    median: float               # f_t over classes with f_c > 0
    power_i: float
    weights: np.ndarray         # (f_t / f_c) ** i, 0 for absent classes
    ignore_id: int

    @property
    def num_classes(self):
        return len(self.weights)


def _label_values(item, ignore_id):
    if isinstance(item, LabelSet):
        return item.labels
    if isinstance(item, (str, os.PathLike)):
        return read_label_file(item, ignore_id=ignore_id).labels
    return np.asarray(item, dtype=np.int64).reshape(-1)


def weights_from_counts(counts, power_i, ignore_id=255):
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise EmptyInputError("no labeled points to derive class weights from")
    present = counts > 0
    median_count = float(np.median(counts[present]))
    weights = np.zeros_like(counts)
    # f_t / f_c == median count / count; ratios of counts stay exact
    weights[present] = (median_count / counts[present]) ** power_i
    return LossSpec(counts=counts.astype(np.int64), frequencies=counts / total, median=median_count / total,
                    power_i=power_i, weights=weights, ignore_id=ignore_id)


def compute_class_weights(label_sources, num_classes, power_i=0.25, ignore_id=255):
    """Global point counts over label files / LabelSets -> LossSpec."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for item in label_sources:
        values = _label_values(item, ignore_id)
        values = values[values != ignore_id]
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise FormatError(f"label outside [0, {num_classes}) that is not ignore_id={ignore_id}")
        counts += np.bincount(values, minlength=num_classes)
    spec = weights_from_counts(counts, power_i, ignore_id)
    logger.info("class weights %s", np.round(spec.weights, 4).tolist(), extra={"tag": "WEIGHTS"})
    return spec


def rotate_z(xyz, angle):
    c, s = math.cos(angle), math.sin(angle)
    rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return xyz @ rotation.T


def augment_scan(cloud, labels, cfg, rng):
    """Random z-rotation, global shift, x/z sign flips and point dropout."""
    if not cfg.enabled:
        return cloud, labels
    points = cloud.points.astype(np.float64)
    angle = rng.normal(0.0, math.radians(cfg.rotation_std_deg)) if cfg.rotation_std_deg > 0 else 0.0
    shift = np.array([rng.normal(0.0, s) if s > 0 else 0.0 for s in cfg.shift_std])
    xyz = rotate_z(points[:, :3], angle) + shift
    if cfg.flip_x and rng.random() < cfg.flip_prob:
        xyz[:, 0] = -xyz[:, 0]
    if cfg.flip_z and rng.random() < cfg.flip_prob:
        xyz[:, 2] = -xyz[:, 2]
    points[:, :3] = xyz

    fraction = rng.uniform(cfg.drop_min, cfg.drop_max) if cfg.drop_max > 0 else 0.0
    dropped = int(round(fraction * len(points)))
    keep = np.arange(len(points))
    if dropped:
        keep = np.sort(rng.choice(len(points), size=len(points) - dropped, replace=False))
    return PointCloud(points[keep]), labels.subset(keep)


@dataclass
class Sample:
    groups: object              # PointGroups, 11 channels
    image: object               # RangeImage
    targets: np.ndarray         # (H, W) class ids, ignore_id at empty pixels


def prepare_sample(cloud, labels, run_cfg, rng=None, augment=True):
    if augment and rng is not None:
        cloud, labels = augment_scan(cloud, labels, run_cfg.augmentation, rng)
    img = build_range_image(cloud, run_cfg.projection)
    groups = augment_features(make_groups(img, run_cfg.grouping))
    return Sample(groups, img, label_image(img, labels, run_cfg.loss.ignore_id))


def collate(samples, model_cfg, dtype="float64"):
    """-> (groups tensor, image tensor, targets (B, H, W), grid shape)."""
    grid_shape = samples[0].groups.grid_shape
    return (group_tensor([s.groups for s in samples], model_cfg, dtype),
            image_tensor([s.image for s in samples], dtype),
            np.stack([s.targets for s in samples]),
            grid_shape)


def learning_rate(lr0, decay, epoch):
    return lr0 * decay ** epoch


def load_dataset(pairs, num_classes=None, ignore_id=None):
    """Read (scan, label) path pairs into memory."""
    dataset = []
    for scan_path, label_path in pairs:
        cloud = read_scan(scan_path)
        if label_path is None:
            raise FormatError("training scan has no label file", path=scan_path)
        labels = read_labels(label_path, cloud.count, num_classes, ignore_id).check(cloud.count)
        dataset.append((cloud, labels))
    return dataset


def evaluate_model(model, dataset, run_cfg, knn=False):
    """Point-level mIoU of the model over in-memory (cloud, labels) pairs."""
    cm = ConfusionMatrix(run_cfg.model.num_classes, run_cfg.loss.ignore_id)
    for cloud, labels in dataset:
        cm.accumulate(labels, infer_scan(model, cloud, run_cfg, knn=knn))
    return miou(cm)[1], cm


def train(dataset, model, loss_spec, run_cfg, out_dir, val_dataset=None):
    """SGD over in-memory (cloud, labels) pairs; returns the metrics DataFrame."""
    if not dataset:
        raise EmptyInputError("training dataset is empty")
    tcfg = run_cfg.train
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(tcfg.seed)
    optimizer = SGD(model.parameters(), tcfg.lr, tcfg.momentum, tcfg.weight_decay)
    batch_size = run_cfg.batch_size
    metadata = {"config": run_cfg.to_dict(), "class_weights": loss_spec.weights.tolist()}
    metrics_path = os.path.join(out_dir, METRICS_FILE)
    rows, best = [], -math.inf

    for epoch in range(tcfg.epochs):
        lr = learning_rate(tcfg.lr, tcfg.lr_decay, epoch)
        order = rng.permutation(len(dataset))
        batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
        model.train()
        losses = []
        progress = tqdm(batches, desc=f"epoch {epoch}", leave=False, disable=not tcfg.progress)
        for batch_index, batch in enumerate(progress):
            samples = [prepare_sample(*dataset[i], run_cfg, rng, augment=run_cfg.augmentation.enabled)
                       for i in batch]
            groups, image, targets, grid_shape = collate(samples, model.cfg, tcfg.dtype)
            loss = weighted_cross_entropy(model(groups, image, grid_shape), targets,
                                          loss_spec.weights, loss_spec.ignore_id)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, batch_index, value)
            loss.backward()
            optimizer.step(lr)
            losses.append(value)
            progress.set_postfix(loss=f"{value:.4f}")

        val_miou = float("nan")
        if val_dataset:
            val_miou, _ = evaluate_model(model, val_dataset, run_cfg)
        train_loss = float(np.mean(losses))
        rows.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_mIoU": val_miou})
        pd.DataFrame(rows, columns=METRIC_COLUMNS).to_csv(metrics_path, index=False)

        save_checkpoint(model, os.path.join(out_dir, LAST_CHECKPOINT), epoch, metadata)
        score = val_miou if val_dataset else -train_loss
        if score > best:
            best = score
            save_checkpoint(model, os.path.join(out_dir, BEST_CHECKPOINT), epoch, metadata)
        logger.info("epoch %d lr=%.6g loss=%.4f val_mIoU=%.4f", epoch, lr, train_loss, val_miou,
                    extra={"tag": "EPOCH"})

    return pd.DataFrame(rows, columns=METRIC_COLUMNS)

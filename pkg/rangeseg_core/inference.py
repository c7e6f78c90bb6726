"""
inference.py

Scan-level prediction: project, group, run the network, re-project pixel
labels to every point and optionally refine them with KNN. Used by the
`infer` and `bench` subcommands and by validation during training.
"""

import os
from concurrent.futures import ThreadPoolExecutor

from .checkpoint import load_checkpoint, read_checkpoint
from .config import build_run_config
from .console import setup_logger
from .grouping import augment_features, make_groups
from .network import build_model, predict
from .postprocess import knn_refine
from .projection import build_range_image, reproject_labels
from .scan_io import read_scan, scan_id, write_predictions

logger = setup_logger(__name__)


def infer_scan(model, cloud, cfg, knn=False):
    """PointCloud -> LabelSet with one predicted class per point."""
    img = build_range_image(cloud, cfg.projection)
    groups = augment_features(make_groups(img, cfg.grouping))
    pixel_labels, _ = predict(model, groups, img)
    if knn:
        return knn_refine(img, pixel_labels, cfg.knn)
    return reproject_labels(img, pixel_labels, cloud.count)


def pipeline_stages(model, cfg, knn=True):
    """Named stages for the bench; each takes and returns a state dict."""

    def project(cloud):
        return {"img": build_range_image(cloud, cfg.projection)}

    def group(state):
        state["groups"] = augment_features(make_groups(state["img"], cfg.grouping))
        return state

    def forward(state):
        state["pixel_labels"], _ = predict(model, state["groups"], state["img"])
        return state

    def reproject(state):
        state["labels"] = reproject_labels(state["img"], state["pixel_labels"])
        return state

    def refine(state):
        state["labels"] = knn_refine(state["img"], state["pixel_labels"], cfg.knn)
        return state

    stages = [("project", project), ("group", group)]
    if model is not None:
        stages += [("forward", forward), ("reproject", reproject)]
        if knn:
            stages.append(("knn", refine))
    return stages


def load_model(checkpoint_path, dtype="float64"):
    """Rebuild the network stored in a checkpoint -> (model, RunConfig, epoch)."""
    _, _, metadata = read_checkpoint(checkpoint_path)
    run_cfg = build_run_config([metadata.get("config", {})])
    model = build_model(run_cfg.model, dtype=dtype)
    epoch, _ = load_checkpoint(model, checkpoint_path)
    model.eval()
    return model, run_cfg, epoch


def infer_dataset(model, scan_paths, cfg, out_dir, knn=False, workers=1):
    """Write <out_dir>/<scan id>.label for every scan; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    model.eval()

    def run(path):
        labels = infer_scan(model, read_scan(path), cfg, knn=knn)
        return write_predictions(labels, os.path.join(out_dir, scan_id(path) + ".label"))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            written = list(pool.map(run, scan_paths))
    else:
        written = [run(path) for path in scan_paths]
    logger.info("%d prediction files in %s", len(written), out_dir, extra={"tag": "SAVED"})
    return written

"""
network.py

Full segmentation network (learned projection + backbone), the helpers
that turn PointGroups / RangeImages into batched input tensors, and the
closed-form parameter count used to check presets.
"""

import numpy as np

from .backbone import BRANCH_DEPTH, IMAGE_CHANNELS, Backbone
from .console import setup_logger
from .errors import ShapeError
from .nn import Module, count_parameters
from .projection_module import ProjectionModule
from .tensor import Tensor

# --- CONFIGURATION ---
# Absolute-valued channels of the 11-channel group features.
C1_FROM_C2 = (0, 2, 4, 6, 8)

logger = setup_logger(__name__)


class RangeSegNet(Module):
    def __init__(self, cfg, rng=None):
        super().__init__()
        self.cfg = cfg
        self.projection = ProjectionModule(cfg, rng)
        self.backbone = Backbone(cfg, rng)

    def forward(self, groups, image, grid_shape):
        """groups (B, C, P, N), image (B, 5, H, W) -> logits (B, Nc, H, W)."""
        return self.backbone(self.projection(groups, grid_shape), image)


def build_model(cfg, seed=0, dtype="float64"):
    cfg.validate()
    rng = np.random.default_rng(seed)
    model = RangeSegNet(cfg, rng).astype(dtype)
    logger.debug("built %s model with %d parameters", cfg.preset, count_parameters(model))
    return model


def group_tensor(groups, cfg, dtype="float64"):
    """Stack PointGroups into (B, C, P, N), dropping relative channels if disabled."""
    arrays = []
    for g in groups:
        data = g.data
        if data.shape[2] != cfg.in_channels:
            if cfg.in_channels == len(C1_FROM_C2) and data.shape[2] == 11:
                data = data[..., C1_FROM_C2]
            else:
                raise ShapeError(f"groups carry {data.shape[2]} channels, model expects {cfg.in_channels}")
        arrays.append(data.transpose(2, 0, 1))
    return Tensor(np.stack(arrays).astype(dtype))


def image_tensor(images, dtype="float64"):
    """Stack RangeImages into (B, 5, H, W)."""
    return Tensor(np.stack([img.features.transpose(2, 0, 1) for img in images]).astype(dtype))


def predict(model, groups, image):
    """Eval-mode forward on one scan -> (pixel labels (H, W), logits (Nc, H, W))."""
    model.eval()
    dtype = model.parameters()[0].dtype
    logits = model(group_tensor([groups], model.cfg, dtype), image_tensor([image], dtype), groups.grid_shape)
    scores = logits.data[0]
    return np.argmax(scores, axis=0), scores


def _separable(cin, cout):
    return 10 * cin + cin * cout + 3 * cout


def _conv_bn(cin, cout, taps=1):
    return cin * cout * taps + 3 * cout


def expected_parameter_count(cfg):
    """Closed-form count matching build_model(cfg); independent of the layer code."""
    width, branch = cfg.c6, cfg.c6 // 4
    cin = cfg.in_channels
    projection = 0
    if cfg.use_local:
        projection += (_conv_bn(cin, cfg.c3) + _conv_bn(cfg.c3, cfg.c4)
                       + _conv_bn(cfg.c4, cfg.c4) + _conv_bn(cfg.c4, cfg.c5))
    if cfg.use_context:
        projection += len(cfg.context_dilations) * _conv_bn(cfg.c4, cfg.c4)
    if cfg.use_spatial:
        projection += _conv_bn(cin, cfg.c5, cfg.group_points)
    if cfg.use_attention:
        projection += cfg.c7 * cfg.c7 + cfg.c7
    projection += _conv_bn(cfg.c7, width)

    backbone = (1 + cfg.l1) * _separable(width, width)
    backbone += cfg.l2 * (width * width + 23 * width)
    backbone += _separable(2 * width, width) + (cfg.l3 - 1) * _separable(width, width)
    backbone += _separable(IMAGE_CHANNELS, branch) + (BRANCH_DEPTH - 1) * _separable(branch, branch)
    backbone += branch * width + width
    merged = 2 * width if cfg.branch_merge == "concat" else width
    if cfg.l4:
        backbone += _separable(merged, width) + (cfg.l4 - 1) * _separable(width, width)
    classifier_in = width if cfg.l4 else merged
    backbone += 9 * classifier_in * cfg.num_classes + cfg.num_classes
    return projection + backbone

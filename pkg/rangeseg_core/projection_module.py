"""
projection_module.py

Learned projection: turns point groups (B, C, P, N) into a 2D feature map
(B, C6, H/4, W/4). Three extractors feed the fusion step:

  local    four shared 1x1 conv layers per point, max over the N slots
  context  2nd-layer features max-pooled per group, regrouped on the grid
           with 3x3 windows at dilations 1, 2, 3, one shared layer per branch
  spatial  a single 1 x N convolution over each group's ordered slots

Fusion concatenates them (C7 channels), applies channel attention
(global average pool -> 1x1 conv -> sigmoid -> multiply) and a 1x1
bottleneck down to C6.
"""

from . import tensor as T
from .config import GroupingConfig
from .errors import ConfigError, ShapeError
from .grouping import window_indices
from .nn import Conv2d, ConvBNAct, Module, ModuleList


class ProjectionModule(Module):
    def __init__(self, cfg, rng=None):
        super().__init__()
        self.cfg = cfg
        norm = dict(slope=cfg.leaky_slope, eps=cfg.bn_eps, momentum=cfg.bn_momentum, rng=rng)
        cin = cfg.in_channels
        if cfg.use_local:
            widths = (cin, cfg.c3, cfg.c4, cfg.c4, cfg.c5)
            self.local = ModuleList(ConvBNAct(widths[i], widths[i + 1], 1, **norm) for i in range(4))
        if cfg.use_context:
            self.context = ModuleList(ConvBNAct(cfg.c4, cfg.c4, 1, **norm) for _ in cfg.context_dilations)
        if cfg.use_spatial:
            self.spatial = ConvBNAct(cin, cfg.c5, (1, cfg.group_points), **norm)
        if cfg.use_attention:
            self.attention = Conv2d(cfg.c7, cfg.c7, 1, rng=rng, slope=cfg.leaky_slope)
        self.bottleneck = ConvBNAct(cfg.c7, cfg.c6, 1, **norm)
        self._context_index = {}

    def local_extractor(self, x):
        """-> (feat2 (B, C4, P, N), feat4 (B, C5, P, N))."""
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"local extractor expects {self.cfg.in_channels} channels, got input {x.shape}")
        feat2 = None
        for i, layer in enumerate(self.local):
            x = layer(x)
            if i == 1:
                feat2 = x
        return feat2, x

    def context_index(self, grid_shape, dilation):
        key = (grid_shape, dilation)
        if key not in self._context_index:
            window = GroupingConfig(k=3, stride=1, dilation=dilation, padding="zero",
                                    wrap_columns=self.cfg.circular)
            index, _, _, shape = window_indices(grid_shape[0], grid_shape[1], window)
            if shape != tuple(grid_shape):
                raise ConfigError(f"context window over grid {grid_shape} changed its size to {shape}")
            self._context_index[key] = index
        return self._context_index[key]

    def context_extractor(self, feat2, grid_shape):
        """(B, C4, P, N) -> (B, 3*C4, P)."""
        if feat2.shape[2] != grid_shape[0] * grid_shape[1]:
            raise ConfigError(f"{feat2.shape[2]} groups do not form a {grid_shape[0]}x{grid_shape[1]} grid")
        descriptors, _ = T.maxpool_axis(feat2, 3)
        branches = []
        for dilation, layer in zip(self.cfg.context_dilations, self.context):
            gathered = T.gather_slots(descriptors, self.context_index(tuple(grid_shape), dilation))
            pooled, _ = T.maxpool_axis(layer(gathered), 3)
            branches.append(pooled)
        return T.concat(branches, axis=1)

    def spatial_extractor(self, x):
        """(B, C, P, N) -> (B, C5, P)."""
        if x.shape[3] != self.cfg.group_points:
            raise ShapeError(f"spatial kernel spans {self.cfg.group_points} slots, input has {x.shape}")
        out = self.spatial(x)
        return T.reshape(out, out.shape[:3])

    def fuse(self, parts, grid_shape):
        """Concatenate (B, Ci, P) parts, reshape onto the grid, attend, bottleneck."""
        num_groups = parts[0].shape[2]
        if any(p.shape[2] != num_groups for p in parts):
            raise ShapeError(f"fusion inputs disagree on P: {[p.shape for p in parts]}")
        fused = T.concat(parts, axis=1)
        batch, channels = fused.shape[:2]
        fused = T.reshape(fused, (batch, channels, grid_shape[0], grid_shape[1]))
        if self.cfg.use_attention:
            pooled = T.mean(fused, axis=(2, 3), keepdims=True)
            weights = T.sigmoid(self.attention(pooled))
            fused = T.mul(fused, weights)
        return self.bottleneck(fused)

    def forward(self, x, grid_shape):
        if x.ndim != 4:
            raise ShapeError(f"projection module expects (B, C, P, N) groups, got {x.shape}")
        if x.shape[2] != grid_shape[0] * grid_shape[1]:
            raise ConfigError(f"{x.shape[2]} groups do not form a {grid_shape[0]}x{grid_shape[1]} grid")
        parts = []
        if self.cfg.use_local:
            feat2, feat4 = self.local_extractor(x)
            local_max, _ = T.maxpool_axis(feat4, 3)
            parts.append(local_max)
            if self.cfg.use_context:
                parts.append(self.context_extractor(feat2, grid_shape))
        if self.cfg.use_spatial:
            parts.append(self.spatial_extractor(x))
        return self.fuse(parts, grid_shape)

"""
backbone.py

Encoder/decoder turning the learned (H/4, W/4, C6) representation into
full-resolution logits.

  encoder   stride-2 separable conv to 1/8, L1 separable convs,
            L2 multi-dilation separable convs (rates cycle 1, 2, 4, 8)
  decoder   upsample x2, concat the 1/4 representation, L3 separable convs,
            upsample x2, merge the fine-grained branch, L4 separable convs,
            upsample x2, 3x3 classifier conv
  branch    separable convs on the raw 5-channel range image down to 1/2
            resolution with C6/4 channels, 1x1 projection to C6

Every channel count in the trunk stays at C6.
"""

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Conv2d, Module, ModuleList, MultiDilationSeparableConv, SeparableConv

# --- CONFIGURATION ---
IMAGE_CHANNELS = 5
BRANCH_DEPTH = 3


class Backbone(Module):
    def __init__(self, cfg, rng=None):
        super().__init__()
        self.cfg = cfg
        width = cfg.c6
        kw = dict(circular=cfg.circular, slope=cfg.leaky_slope, eps=cfg.bn_eps,
                  momentum=cfg.bn_momentum, rng=rng)
        schedule = cfg.dilation_schedule

        self.downsample = SeparableConv(width, width, stride=2, **kw)
        self.encoder = ModuleList(SeparableConv(width, width, **kw) for _ in range(cfg.l1))
        self.dilated = ModuleList(MultiDilationSeparableConv(width, schedule[i % len(schedule)], **kw)
                                  for i in range(cfg.l2))
        self.decoder_quarter = ModuleList(
            SeparableConv(2 * width if i == 0 else width, width, **kw) for i in range(cfg.l3))

        branch_width = width // 4
        self.branch = ModuleList(
            SeparableConv(IMAGE_CHANNELS if i == 0 else branch_width, branch_width,
                          stride=2 if i == 0 else 1, **kw)
            for i in range(BRANCH_DEPTH))
        self.branch_projection = Conv2d(branch_width, width, 1, rng=rng, slope=cfg.leaky_slope)

        merged = 2 * width if cfg.branch_merge == "concat" else width
        self.decoder_half = ModuleList(
            SeparableConv(merged if i == 0 else width, width, **kw) for i in range(cfg.l4))
        self.classifier = Conv2d(width if cfg.l4 else merged, cfg.num_classes, 3, padding="same",
                                 circular=cfg.circular, rng=rng, slope=cfg.leaky_slope)

    def upsample(self, x):
        return T.bilinear_upsample(x, 2, circular=self.cfg.circular)

    def forward(self, rep, image):
        """rep (B, C6, H/4, W/4), image (B, 5, H, W) -> logits (B, Nc, H, W)."""
        height, width = image.shape[2], image.shape[3]
        if height % 8 or width % 8:
            raise ConfigError(f"range image {width}x{height} must be divisible by 8")
        if rep.shape[2:] != (height // 4, width // 4) or rep.shape[1] != self.cfg.c6:
            raise ShapeError(f"representation {rep.shape} does not match image {image.shape}")

        x = self.downsample(rep)
        for layer in self.encoder:
            x = layer(x)
        for layer in self.dilated:
            x = layer(x)

        x = T.concat([self.upsample(x), rep], axis=1)
        for layer in self.decoder_quarter:
            x = layer(x)

        x = self.upsample(x)
        fine = image
        for layer in self.branch:
            fine = layer(fine)
        fine = self.branch_projection(fine)
        x = T.concat([x, fine], axis=1) if self.cfg.branch_merge == "concat" else T.add(x, fine)
        for layer in self.decoder_half:
            x = layer(x)

        return self.classifier(self.upsample(x))

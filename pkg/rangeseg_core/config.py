"""
config.py

Configuration dataclasses for every pipeline stage plus the layered loader
used by the CLI:

    dataclass defaults < dataset manifest < YAML config file < flags

The resolved configuration is always written next to the run outputs so a
run can be reproduced from its directory alone.
"""

import copy
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Tuple

import yaml

from .errors import ConfigError

# --- CONFIGURATION ---
# Projection-module widths (C3..C6) and backbone layer counts (L1..L4).
PRESETS = {
    "full": {"c3": 24, "c4": 48, "c5": 96, "c6": 192, "l1": 50, "l2": 30, "l3": 4, "l4": 2},
    "small": {"c3": 16, "c4": 32, "c5": 64, "c6": 128, "l1": 24, "l2": 20, "l3": 2, "l4": 1},
    "tiny": {"c3": 12, "c4": 24, "c5": 48, "c6": 96, "l1": 14, "l2": 10, "l3": 2, "l4": 1},
}
PRESET_BATCH_SIZE = {"full": 3, "small": 6, "tiny": 8}
MANIFEST_NAME = "dataset.yaml"
# Parameter counts reported for the three presets on the 19-class benchmark.
PRESET_REFERENCE_PARAMS = {"full": 3_970_000, "small": 1_130_000, "tiny": 440_000}

# Ablation switches, in the order the projection module grows.
ABLATIONS = {
    "spatial": {"use_spatial": True, "use_local": False, "use_attention": False,
                "use_context": False, "use_relative": False},
    "local": {"use_spatial": True, "use_local": True, "use_attention": False,
              "use_context": False, "use_relative": False},
    "attention": {"use_spatial": True, "use_local": True, "use_attention": True,
                  "use_context": False, "use_relative": False},
    "context": {"use_spatial": True, "use_local": True, "use_attention": True,
                "use_context": True, "use_relative": False},
    "full": {"use_spatial": True, "use_local": True, "use_attention": True,
             "use_context": True, "use_relative": True},
}


@dataclass
class ProjectionConfig:
    """Range-image geometry. Angles are radians; f_up/f_down have no default."""
    width: int = 2048
    height: int = 64
    fov_up: Optional[float] = None
    fov_down: Optional[float] = None

    @property
    def fov(self):
        return self.fov_up + self.fov_down

    @classmethod
    def from_degrees(cls, width, height, fov_up_deg, fov_down_deg):
        return cls(width=width, height=height,
                   fov_up=math.radians(fov_up_deg), fov_down=math.radians(fov_down_deg))

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        if self.fov_up is None or self.fov_down is None:
            raise ConfigError("sensor field of view is required (--fov-up-deg / --fov-down-deg)")
        if not self.fov > 0:
            raise ConfigError(f"vertical field of view must be positive, got {self.fov}")
        return self


@dataclass
class GroupingConfig:
    k: int = 4
    stride: int = 4
    dilation: int = 1
    padding: str = "none"           # none | zero
    wrap_columns: bool = False      # circular horizontal padding

    @property
    def points_per_group(self):
        return self.k * self.k

    @property
    def extent(self):
        return self.dilation * (self.k - 1) + 1

    def validate(self, width=None, height=None):
        if self.k < 1 or self.stride < 1 or self.dilation < 1:
            raise ConfigError(f"grouping needs k, stride, dilation >= 1 (got {self.k}, {self.stride}, {self.dilation})")
        if self.padding not in ("none", "zero"):
            raise ConfigError(f"unknown grouping padding '{self.padding}'")
        if self.padding == "none" and width is not None:
            for name, size in (("width", width), ("height", height)):
                if size % self.stride or size < self.extent or (size - self.extent) % self.stride:
                    raise ConfigError(
                        f"image {name} {size} does not fit whole {self.k}x{self.k} windows "
                        f"(dilation {self.dilation}, stride {self.stride}) without padding")
        return self


@dataclass
class ModelConfig:
    preset: str = "full"
    c3: int = 24
    c4: int = 48
    c5: int = 96
    c6: int = 192
    l1: int = 50
    l2: int = 30
    l3: int = 4
    l4: int = 2
    num_classes: int = 19
    group_points: int = 16
    leaky_slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    use_local: bool = True
    use_spatial: bool = True
    use_attention: bool = True
    use_context: bool = True
    use_relative: bool = True
    circular: bool = False
    branch_merge: str = "add"       # add | concat
    context_dilations: Tuple[int, ...] = (1, 2, 3)
    dilation_schedule: Tuple[int, ...] = (1, 2, 4, 8)

    @classmethod
    def from_preset(cls, name="full", **overrides):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset '{name}' (choose from {', '.join(PRESETS)})")
        values = dict(PRESETS[name], preset=name)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def truncated(cls, num_classes=3, width=4, **overrides):
        """Shallow, narrow model for gradient checks and fast tests."""
        values = dict(preset="truncated", c3=width, c4=width, c5=width, c6=width,
                      l1=1, l2=1, l3=1, l4=0, num_classes=num_classes)
        values.update(overrides)
        return cls(**values)

    @property
    def in_channels(self):
        return 11 if self.use_relative else 5

    @property
    def c7(self):
        """Fused channel count: local-max + three context branches + spatial."""
        width = 0
        if self.use_local:
            width += self.c5
        if self.use_context:
            width += len(self.context_dilations) * self.c4
        if self.use_spatial:
            width += self.c5
        return width

    def validate(self):
        for name in ("c3", "c4", "c5", "c6", "num_classes", "group_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model {name} must be >= 1")
        if self.l1 < 0 or self.l2 < 0 or self.l4 < 0 or self.l3 < 1:
            raise ConfigError("backbone needs l3 >= 1 and l1, l2, l4 >= 0")
        if not (self.use_local or self.use_spatial):
            raise ConfigError("projection module needs the local or the spatial extractor")
        if self.use_context and not self.use_local:
            raise ConfigError("context extractor taps the local extractor; enable use_local")
        if self.branch_merge not in ("add", "concat"):
            raise ConfigError(f"unknown branch merge '{self.branch_merge}'")
        if self.c6 % 4:
            raise ConfigError(f"c6 must be divisible by 4 (fine-grained branch width), got {self.c6}")
        return self


@dataclass
class LossConfig:
    power_i: float = 0.25
    ignore_id: int = 255


@dataclass
class AugmentationConfig:
    enabled: bool = True
    rotation_std_deg: float = 40.0
    shift_std: Tuple[float, float, float] = (0.35, 0.35, 0.01)
    flip_x: bool = True
    flip_z: bool = True
    flip_prob: float = 0.5
    drop_min: float = 0.0
    drop_max: float = 0.10

    def validate(self):
        if self.rotation_std_deg < 0 or min(self.shift_std) < 0:
            raise ConfigError("augmentation standard deviations must be >= 0")
        if not (0.0 <= self.drop_min <= self.drop_max < 1.0):
            raise ConfigError(f"drop bounds must satisfy 0 <= min <= max < 1, got [{self.drop_min}, {self.drop_max}]")
        return self


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: Optional[int] = None   # None -> preset default
    lr: float = 4e-3
    lr_decay: float = 0.99
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    dtype: str = "float32"
    val_scans: int = 20
    progress: bool = True

    def validate(self):
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ConfigError(f"lr decay must be in (0, 1], got {self.lr_decay}")
        if self.epochs < 0 or (self.batch_size is not None and self.batch_size < 1):
            raise ConfigError("epochs must be >= 0 and batch size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype '{self.dtype}'")
        return self


@dataclass
class KNNConfig:
    window: int = 7
    k: int = 7
    weighting: str = "uniform"      # uniform | gaussian
    sigma: float = 1.0
    cutoff: Optional[float] = None
    circular: bool = False

    def validate(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"KNN window must be odd and >= 1, got {self.window}")
        if not (1 <= self.k <= self.window * self.window):
            raise ConfigError(f"KNN K must be in [1, {self.window * self.window}], got {self.k}")
        if self.weighting not in ("uniform", "gaussian"):
            raise ConfigError(f"unknown KNN weighting '{self.weighting}'")
        if self.sigma <= 0:
            raise ConfigError("KNN sigma must be positive")
        return self


@dataclass
class RunConfig:
    subcommand: str = ""
    data: Optional[str] = None
    val_data: Optional[str] = None
    out: str = "runs/latest"
    seed: int = 0
    workers: int = 1
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    knn: KNNConfig = field(default_factory=KNNConfig)

    @property
    def batch_size(self):
        if self.train.batch_size is not None:
            return self.train.batch_size
        return PRESET_BATCH_SIZE.get(self.model.preset, 1)

    def validate(self, needs_projection=True):
        """Cross-field checks run before any work starts."""
        if needs_projection:
            self.projection.validate()
            width, height = self.projection.width, self.projection.height
            if width % 8 or height % 8:
                raise ConfigError(f"image size {width}x{height} must be divisible by 8")
            self.grouping.validate(width, height)
            if width % self.grouping.stride or height % self.grouping.stride:
                raise ConfigError(f"image size {width}x{height} must be divisible by the grouping stride {self.grouping.stride}")
            if self.grouping.stride != 4 or self.grouping.padding != "none":
                raise ConfigError("the projection module expects non-overlapping groups at 1/4 resolution (stride 4, no padding)")
        if self.model.group_points != self.grouping.points_per_group:
            raise ConfigError(f"model expects {self.model.group_points} points per group, grouping yields {self.grouping.points_per_group}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.model.validate()
        self.augmentation.validate()
        self.train.validate()
        self.knn.validate()
        return self

    def to_dict(self):
        return _plain(asdict(self))


SECTIONS = {
    "projection": ProjectionConfig,
    "grouping": GroupingConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "augmentation": AugmentationConfig,
    "train": TrainConfig,
    "knn": KNNConfig,
}


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def deep_merge(base, update):
    """Recursive dict merge; None values in `update` never override."""
    merged = copy.deepcopy(base)
    for key, value in (update or {}).items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _build_section(cls, values):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    kwargs = {name: tuple(value) if isinstance(value, list) else value
              for name, value in values.items()}
    return cls(**kwargs)


def _build_model(values):
    values = dict(values)
    preset = values.pop("preset", "full")
    widths = PRESETS.get(preset)
    if widths is None:
        # custom widths (e.g. a saved truncated model) must spell out every size
        if not all(key in values for key in PRESETS["full"]):
            raise ConfigError(f"unknown preset '{preset}' (choose from {', '.join(PRESETS)})")
        widths = {}
    ablation = values.pop("ablation", None)
    if ablation is not None:
        if ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation '{ablation}' (choose from {', '.join(ABLATIONS)})")
        values = dict(ABLATIONS[ablation], **values)
    merged = dict(widths, preset=preset)
    merged.update(values)
    return _build_section(ModelConfig, merged)


def build_run_config(layers):
    """Merge a list of nested dicts (lowest precedence first) into a RunConfig."""
    merged = {}
    for layer in layers:
        merged = deep_merge(merged, layer)
    top = {k: v for k, v in merged.items() if k not in SECTIONS}
    known = {f.name for f in fields(RunConfig)} - set(SECTIONS)
    unknown = set(top) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    sections = {}
    for name, cls in SECTIONS.items():
        values = merged.get(name) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"config section '{name}' must be a mapping")
        sections[name] = _build_model(values) if name == "model" else _build_section(cls, values)
    return RunConfig(**top, **sections)


def load_yaml(path):
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return data


def read_manifest(dataset_dir):
    """dataset.yaml next to the scans, or {} when the dataset has none."""
    path = os.path.join(dataset_dir, MANIFEST_NAME)
    return load_yaml(path) if os.path.isfile(path) else {}


def manifest_layer(manifest):
    """Config sections a dataset manifest may set."""
    return {name: dict(values) for name, values in manifest.items() if name in SECTIONS}


def save_yaml(data, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(_plain(data), f, sort_keys=False)
    return path

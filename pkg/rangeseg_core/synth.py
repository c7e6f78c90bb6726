"""
synth.py

Deterministic ray-cast scene generator for desk-scale training and tests.

One beam is cast per range-image cell, through the cell centre, so a scan
projected with the matching ProjectionConfig lands each point back on the
cell that produced it. A scene holds a ground plane at z = -sensor_height,
axis-aligned boxes ("vehicle"), vertical cylinders ("pole") and thin boxes
("wall"); every beam keeps its nearest hit.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from .config import MANIFEST_NAME, ProjectionConfig, save_yaml
from .console import setup_logger
from .errors import ConfigError, EmptyInputError
from .scan_io import LABEL_DIR, SCAN_DIR, LabelSet, PointCloud, write_labels, write_scan

# --- CONFIGURATION ---
CLASS_NAMES = ("ground", "vehicle", "pole", "wall")
GROUND, VEHICLE, POLE, WALL = range(len(CLASS_NAMES))
REMISSION = np.array([0.25, 0.65, 0.45, 0.85])
IGNORE_ID = 255

logger = setup_logger(__name__)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 512
    height: int = 64
    fov_up_deg: float = 3.0
    fov_down_deg: float = 25.0
    sensor_height: float = 1.73
    max_range: float = 80.0
    vehicles: Tuple[int, int] = (2, 6)
    vehicle_size: Tuple[Tuple[float, float], ...] = ((3.5, 4.8), (1.6, 2.0), (1.4, 1.8))
    poles: Tuple[int, int] = (2, 6)
    pole_radius: Tuple[float, float] = (0.1, 0.25)
    pole_height: Tuple[float, float] = (3.0, 6.0)
    walls: Tuple[int, int] = (1, 3)
    wall_length: Tuple[float, float] = (8.0, 20.0)
    wall_height: Tuple[float, float] = (2.0, 4.0)
    wall_thickness: float = 0.3
    placement_radius: Tuple[float, float] = (5.0, 30.0)
    noise_std: float = 0.0
    remission_std: float = 0.02
    seed: int = 0

    @property
    def projection(self):
        return ProjectionConfig.from_degrees(self.width, self.height, self.fov_up_deg, self.fov_down_deg)

    def validate(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"beam grid must be positive, got {self.width}x{self.height}")
        if self.fov_up_deg + self.fov_down_deg <= 0:
            raise ConfigError("vertical field of view must be positive")
        if self.sensor_height <= 0 or self.max_range <= 0:
            raise ConfigError("sensor height and max range must be positive")
        if self.noise_std < 0 or self.remission_std < 0:
            raise ConfigError("noise standard deviations must be >= 0")
        return self


def beam_directions(spec):
    """(H*W, 3) unit vectors, row-major over (ring v, azimuth step u)."""
    cfg = spec.projection
    u = np.arange(spec.width) + 0.5
    v = np.arange(spec.height) + 0.5
    azimuth = np.pi * (1.0 - 2.0 * u / spec.width)
    pitch = (1.0 - v / spec.height) * cfg.fov - cfg.fov_down
    pitch, azimuth = np.meshgrid(pitch, azimuth, indexing="ij")
    cos_p = np.cos(pitch)
    return np.stack([cos_p * np.cos(azimuth), cos_p * np.sin(azimuth), np.sin(pitch)], axis=-1).reshape(-1, 3)


def hit_ground(dirs, sensor_height):
    t = np.full(len(dirs), np.inf)
    down = dirs[:, 2] < 0
    t[down] = -sensor_height / dirs[down, 2]
    return t


def hit_box(dirs, low, high):
    """Slab test for an axis-aligned box; the ray starts at the origin outside the box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = low[None, :] * inv
        t2 = high[None, :] * inv
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (t_far >= t_near) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def hit_cylinder(dirs, center, radius, z_low, z_high):
    """Outer surface of a vertical cylinder between z_low and z_high."""
    a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
    b = -2.0 * (dirs[:, 0] * center[0] + dirs[:, 1] * center[1])
    c = center[0] ** 2 + center[1] ** 2 - radius ** 2
    disc = b * b - 4.0 * a * c
    ok = (disc >= 0) & (a > 0)
    t = np.full(len(dirs), np.inf)
    t[ok] = (-b[ok] - np.sqrt(disc[ok])) / (2.0 * a[ok])
    z = t * dirs[:, 2]
    t[~((t > 0) & (z >= z_low) & (z <= z_high))] = np.inf
    return t


def _place(rng, spec, clearance):
    radius = rng.uniform(*spec.placement_radius) + clearance
    angle = rng.uniform(-math.pi, math.pi)
    return radius * math.cos(angle), radius * math.sin(angle)


def sample_objects(spec, rng):
    """-> list of (class id, kind, geometry) drawn from the scene's ranges."""
    ground_z = -spec.sensor_height
    objects = []
    for _ in range(rng.integers(spec.vehicles[0], spec.vehicles[1] + 1)):
        length, width, height = (rng.uniform(*r) for r in spec.vehicle_size)
        cx, cy = _place(rng, spec, length)
        half = np.array([length, width]) / 2 if rng.random() < 0.5 else np.array([width, length]) / 2
        low = np.array([cx - half[0], cy - half[1], ground_z])
        objects.append((VEHICLE, "box", (low, low + np.array([2 * half[0], 2 * half[1], height]))))
    for _ in range(rng.integers(spec.poles[0], spec.poles[1] + 1)):
        radius = rng.uniform(*spec.pole_radius)
        height = rng.uniform(*spec.pole_height)
        objects.append((POLE, "cylinder", (np.array(_place(rng, spec, radius)), radius, ground_z, ground_z + height)))
    for _ in range(rng.integers(spec.walls[0], spec.walls[1] + 1)):
        length = rng.uniform(*spec.wall_length)
        height = rng.uniform(*spec.wall_height)
        cx, cy = _place(rng, spec, length / 2)
        extent = (length, spec.wall_thickness) if rng.random() < 0.5 else (spec.wall_thickness, length)
        low = np.array([cx - extent[0] / 2, cy - extent[1] / 2, ground_z])
        objects.append((WALL, "box", (low, low + np.array([extent[0], extent[1], height]))))
    return objects


def generate(spec):
    """Ray-cast one scan -> (PointCloud, LabelSet)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dirs = beam_directions(spec)
    best = hit_ground(dirs, spec.sensor_height)
    label = np.full(len(dirs), GROUND, dtype=np.int64)
    for class_id, kind, geometry in sample_objects(spec, rng):
        t = hit_box(dirs, *geometry) if kind == "box" else hit_cylinder(dirs, *geometry)
        closer = t < best
        best[closer] = t[closer]
        label[closer] = class_id

    hit = best <= spec.max_range
    if not hit.any():
        raise EmptyInputError("no beam hit any surface")
    t = best[hit]
    if spec.noise_std > 0:
        t = t + rng.normal(0.0, spec.noise_std, size=t.shape)
    xyz = dirs[hit] * t[:, None]
    label = label[hit]
    remission = REMISSION[label]
    if spec.remission_std > 0:
        remission = np.clip(remission + rng.normal(0.0, spec.remission_std, size=remission.shape), 0.0, 1.0)
    points = np.concatenate([xyz, remission[:, None]], axis=1)
    return PointCloud(points), LabelSet(label, num_classes=len(CLASS_NAMES), ignore_id=IGNORE_ID)


def scan_seeds(seed, count):
    """Independent per-scan seeds derived from one dataset seed."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(count)]


def write_manifest(out_dir, spec):
    cfg = spec.projection
    manifest = {
        "dataset": {"generator": "synth", "class_names": list(CLASS_NAMES), "seed": spec.seed},
        "projection": {"width": cfg.width, "height": cfg.height, "fov_up": cfg.fov_up, "fov_down": cfg.fov_down},
        "model": {"num_classes": len(CLASS_NAMES)},
        "loss": {"ignore_id": IGNORE_ID},
    }
    return save_yaml(manifest, os.path.join(out_dir, MANIFEST_NAME))


def generate_dataset(n, spec, out_dir, workers=1):
    """Write n scan/label pairs in the velodyne/ + labels/ layout -> sorted pairs."""
    if n < 1:
        raise ConfigError(f"number of scans must be >= 1, got {n}")
    spec.validate()

    def build(item):
        index, seed = item
        cloud, labels = generate(replace(spec, seed=seed))
        name = f"{index:06d}"
        scan = write_scan(cloud, os.path.join(out_dir, SCAN_DIR, name + ".bin"))
        label = write_labels(labels, os.path.join(out_dir, LABEL_DIR, name + ".label"))
        return scan, label

    jobs = list(enumerate(scan_seeds(spec.seed, n)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(build, jobs))
    else:
        pairs = [build(job) for job in jobs]
    write_manifest(out_dir, spec)
    logger.info("%d synthetic scans in %s", n, out_dir, extra={"tag": "SYNTH"})
    return pairs

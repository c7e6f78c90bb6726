"""Shared fixtures for the test modules."""

import math
import os
import sys
import tempfile

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rangeseg_core.config import GroupingConfig, ModelConfig, ProjectionConfig  # noqa: E402
from rangeseg_core.scan_io import PointCloud  # noqa: E402

SLOW = os.environ.get("RANGESEG_SLOW") == "1"


def quarter_pi_config(width=2048, height=64):
    return ProjectionConfig(width=width, height=height, fov_up=math.pi / 4, fov_down=math.pi / 4)


def random_cloud(count, rng, radius=(2.0, 30.0), z_range=(-2.0, 1.0)):
    """Points spread around the sensor, never at the origin."""
    azimuth = rng.uniform(-math.pi, math.pi, count)
    distance = rng.uniform(*radius, count)
    z = rng.uniform(*z_range, count)
    points = np.stack([distance * np.cos(azimuth), distance * np.sin(azimuth), z,
                       rng.uniform(0.0, 1.0, count)], axis=1)
    return PointCloud(points)


def small_model_config(**overrides):
    """Narrow model that still exercises every block."""
    values = dict(num_classes=3, width=4)
    values.update(overrides)
    return ModelConfig.truncated(**values)


def grid_groups(rng, batch, channels, grid_shape, slots=16):
    return rng.normal(size=(batch, channels, grid_shape[0] * grid_shape[1], slots))


class TempDirMixin:
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()


DEFAULT_GROUPING = GroupingConfig()

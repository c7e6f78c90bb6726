import os
import unittest
from dataclasses import replace

import numpy as np

from helpers import TempDirMixin
from rangeseg_core.config import build_run_config, manifest_layer, read_manifest
from rangeseg_core.errors import ConfigError
from rangeseg_core.projection import build_range_image
from rangeseg_core.scan_io import list_scan_pairs, read_label_file, read_scan
from rangeseg_core.synth import (CLASS_NAMES, GROUND, IGNORE_ID, SceneSpec, beam_directions, generate,
                                 generate_dataset, hit_box, hit_cylinder, hit_ground, scan_seeds)
from rangeseg_core.training import compute_class_weights

SMALL = SceneSpec(width=128, height=16)


class TestRayCasting(unittest.TestCase):
    def test_beams_are_unit_vectors(self):
        dirs = beam_directions(SMALL)
        self.assertEqual(dirs.shape, (128 * 16, 3))
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0)

    def test_ground_hits_only_downward_beams(self):
        dirs = np.array([[1.0, 0.0, -0.5], [1.0, 0.0, 0.2]])
        t = hit_ground(dirs, 2.0)
        self.assertEqual(t[0], 4.0)
        self.assertTrue(np.isinf(t[1]))

    def test_box(self):
        dirs = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        t = hit_box(dirs, np.array([5.0, -1.0, -1.0]), np.array([7.0, 1.0, 1.0]))
        self.assertEqual(t[0], 5.0)
        self.assertTrue(np.all(np.isinf(t[1:])))

    def test_cylinder(self):
        dirs = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.5], [0.0, 1.0, 0.0]])
        t = hit_cylinder(dirs, np.array([10.0, 0.0]), 1.0, -2.0, 2.0)
        self.assertAlmostEqual(t[0], 9.0)
        self.assertTrue(np.isinf(t[1]))
        self.assertTrue(np.isinf(t[2]))


class TestGenerate(unittest.TestCase):
    def test_empty_scene_is_all_ground(self):
        spec = replace(SMALL, vehicles=(0, 0), poles=(0, 0), walls=(0, 0), remission_std=0.0)
        cloud, labels = generate(spec)
        self.assertTrue(np.all(labels.labels == GROUND))
        np.testing.assert_allclose(cloud.points[:, 2], -spec.sensor_height, atol=1e-4)
        np.testing.assert_allclose(cloud.remission, 0.25, atol=1e-6)
        self.assertTrue(np.all(np.linalg.norm(cloud.xyz, axis=1) <= spec.max_range + 1e-3))

    def test_objects_occlude_ground(self):
        cloud, labels = generate(replace(SMALL, seed=4))
        classes = set(np.unique(labels.labels).tolist())
        self.assertIn(GROUND, classes)
        self.assertGreater(len(classes), 1)
        above = cloud.points[labels.labels != GROUND, 2]
        self.assertTrue(np.all(above >= -SMALL.sensor_height - 1e-3))

    def test_each_point_lands_in_its_own_cell(self):
        cloud, _ = generate(replace(SMALL, seed=2))
        img = build_range_image(cloud, SMALL.projection)
        self.assertGreaterEqual(int(img.valid.sum()) / cloud.count, 0.99)

    def test_deterministic(self):
        a = generate(replace(SMALL, seed=9))
        b = generate(replace(SMALL, seed=9))
        c = generate(replace(SMALL, seed=10))
        self.assertEqual(a[0].points.tobytes(), b[0].points.tobytes())
        self.assertEqual(a[1], b[1])
        self.assertNotEqual(a[0].points.tobytes(), c[0].points.tobytes())

    def test_noise_moves_points(self):
        clean, _ = generate(replace(SMALL, seed=1))
        noisy, _ = generate(replace(SMALL, seed=1, noise_std=0.05))
        self.assertEqual(clean.count, noisy.count)
        self.assertFalse(np.array_equal(clean.xyz, noisy.xyz))

    def test_invalid_scene(self):
        with self.assertRaises(ConfigError):
            generate(replace(SMALL, noise_std=-1.0))

    def test_scan_seeds(self):
        seeds = scan_seeds(0, 5)
        self.assertEqual(seeds, scan_seeds(0, 5))
        self.assertEqual(len(set(seeds)), 5)


class TestDataset(TempDirMixin, unittest.TestCase):
    def test_layout_and_manifest(self):
        pairs = generate_dataset(3, SMALL, self.tmp)
        self.assertEqual([os.path.basename(s) for s, _ in pairs], ["000000.bin", "000001.bin", "000002.bin"])
        self.assertEqual(list_scan_pairs(self.tmp, require_labels=True), pairs)
        for scan, label in pairs:
            self.assertEqual(read_scan(scan).count, len(read_label_file(label)))
        manifest = read_manifest(self.tmp)
        self.assertEqual(manifest["dataset"]["class_names"], list(CLASS_NAMES))
        cfg = build_run_config([manifest_layer(manifest)])
        self.assertEqual((cfg.projection.width, cfg.projection.height), (128, 16))
        self.assertAlmostEqual(cfg.projection.fov, SMALL.projection.fov)
        self.assertEqual(cfg.model.num_classes, 4)
        self.assertEqual(cfg.loss.ignore_id, IGNORE_ID)

    def test_workers_do_not_change_output(self):
        serial = generate_dataset(2, SMALL, os.path.join(self.tmp, "serial"))
        threaded = generate_dataset(2, SMALL, os.path.join(self.tmp, "threaded"), workers=2)
        for (a, _), (b, _) in zip(serial, threaded):
            self.assertEqual(read_scan(a).points.tobytes(), read_scan(b).points.tobytes())

    def test_class_weights_match_counts(self):
        pairs = generate_dataset(2, SMALL, self.tmp)
        expected = np.zeros(4, dtype=np.int64)
        for _, label in pairs:
            expected += np.bincount(read_label_file(label).labels, minlength=4)
        spec = compute_class_weights([label for _, label in pairs], 4)
        np.testing.assert_array_equal(spec.counts, expected)

    def test_needs_at_least_one_scan(self):
        with self.assertRaises(ConfigError):
            generate_dataset(0, SMALL, self.tmp)


if __name__ == '__main__':
    unittest.main()

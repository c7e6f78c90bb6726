import unittest

import numpy as np

from helpers import grid_groups, small_model_config
from rangeseg_core import tensor as T
from rangeseg_core.errors import ConfigError, ShapeError
from rangeseg_core.projection_module import ProjectionModule
from rangeseg_core.tensor import Tensor, grad_check


def scalar_readout(out, seed):
    weights = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return T.tsum(T.mul(out, weights))


class TestProjectionModule(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.grid = (2, 4)

    def build(self, **overrides):
        return ProjectionModule(small_model_config(**overrides), np.random.default_rng(1))

    def test_output_shape(self):
        cfg = small_model_config(c6=8)
        module = ProjectionModule(cfg, np.random.default_rng(1))
        x = Tensor(grid_groups(self.rng, 2, 11, self.grid))
        out = module(x, self.grid)
        self.assertEqual(out.shape, (2, 8, 2, 4))
        self.assertEqual(cfg.c7, 4 + 3 * 4 + 4)

    def test_extractor_shapes(self):
        module = self.build()
        x = Tensor(grid_groups(self.rng, 2, 11, self.grid))
        feat2, feat4 = module.local_extractor(x)
        self.assertEqual(feat2.shape, (2, 4, 8, 16))
        self.assertEqual(feat4.shape, (2, 4, 8, 16))
        self.assertEqual(module.context_extractor(feat2, self.grid).shape, (2, 12, 8))
        self.assertEqual(module.spatial_extractor(x).shape, (2, 4, 8))

    def test_local_branch_ignores_slot_order(self):
        module = self.build(use_spatial=False).eval()
        data = grid_groups(self.rng, 1, 11, self.grid)
        perm = self.rng.permutation(16)
        a = module(Tensor(data), self.grid).data
        b = module(Tensor(data[..., perm]), self.grid).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_emptied_slots_never_raise_local_response(self):
        module = self.build().eval()
        data = grid_groups(self.rng, 1, 11, self.grid)
        emptied = data.copy()
        emptied[..., self.rng.uniform(size=(8, 16)) < 0.4] = 0.0
        emptied[:, :, 3] = 0.0
        _, before = module.local_extractor(Tensor(data))
        _, after = module.local_extractor(Tensor(emptied))
        _, empty_slot = module.local_extractor(Tensor(np.zeros((1, 11, 1, 1))))
        np.testing.assert_array_equal(empty_slot.data, 0.0)
        kept = np.any(emptied != 0.0, axis=1)[:, None]
        np.testing.assert_allclose(np.where(kept, after.data, 0.0), np.where(kept, before.data, 0.0), atol=1e-12)
        # pre-max responses: present slots unchanged, emptied slots sit at the empty-slot response
        bound = np.maximum(before.data.max(axis=3), empty_slot.data.reshape(1, -1, 1))
        self.assertTrue(np.all(after.data.max(axis=3) <= bound + 1e-12))
        np.testing.assert_array_equal(after.data.max(axis=3)[:, :, 3], 0.0)

    def test_emptied_groups_give_finite_output(self):
        module = self.build().eval()
        for fraction in (0.0, 0.5, 0.9, 1.0):
            data = grid_groups(self.rng, 1, 11, self.grid)
            data[..., self.rng.uniform(size=(8, 16)) < fraction] = 0.0
            data[:, :, :2] = 0.0
            self.assertTrue(np.all(np.isfinite(module(Tensor(data), self.grid).data)), fraction)

    def test_spatial_branch_sees_slot_order(self):
        module = self.build(use_local=False, use_context=False).eval()
        data = grid_groups(self.rng, 1, 11, self.grid)
        a = module(Tensor(data), self.grid).data
        b = module(Tensor(data[..., ::-1].copy()), self.grid).data
        self.assertFalse(np.allclose(a, b))

    def test_zero_attention_halves_features(self):
        module = self.build().eval()
        module.attention.weight.data[...] = 0.0
        module.attention.bias.data[...] = 0.0
        x = Tensor(grid_groups(self.rng, 1, 11, self.grid))
        feat2, feat4 = module.local_extractor(x)
        parts = [T.maxpool_axis(feat4, 3)[0], module.context_extractor(feat2, self.grid), module.spatial_extractor(x)]
        fused = T.reshape(T.concat(parts, axis=1), (1, module.cfg.c7) + self.grid)
        expected = module.bottleneck(T.scale(fused, 0.5)).data
        np.testing.assert_allclose(module(x, self.grid).data, expected, atol=1e-12)

    def test_context_windows_wrap_when_circular(self):
        plain = self.build().context_index(self.grid, 1)
        wrapped = self.build(circular=True).context_index(self.grid, 1)
        self.assertTrue(np.any(plain < 0))
        self.assertTrue(np.all(wrapped[:, [3, 4, 5]] >= 0))

    def test_without_relative_channels(self):
        module = self.build(use_relative=False)
        out = module(Tensor(grid_groups(self.rng, 2, 5, self.grid)), self.grid)
        self.assertEqual(out.shape, (2, 4, 2, 4))
        with self.assertRaises(ShapeError):
            module(Tensor(grid_groups(self.rng, 2, 11, self.grid)), self.grid)

    def test_grid_mismatch(self):
        with self.assertRaises(ConfigError):
            self.build()(Tensor(grid_groups(self.rng, 1, 11, self.grid)), (3, 3))

    def test_gradients_match_finite_differences(self):
        module = self.build(leaky_slope=1.0)
        x = Tensor(grid_groups(self.rng, 2, 11, (2, 2)), requires_grad=True)
        tensors = [x, module.spatial.conv.weight, module.attention.weight, module.bottleneck.bn.gamma,
                   module.context[1].conv.weight, module.local[0].conv.weight]
        self.assertLess(grad_check(lambda: scalar_readout(module(x, (2, 2)), 2), tensors), 1e-4)

    def test_every_weight_receives_gradient(self):
        module = self.build()
        x = Tensor(grid_groups(self.rng, 2, 11, self.grid))
        scalar_readout(module(x, self.grid), 3).backward()
        for name, p in module.named_parameters():
            self.assertIsNotNone(p.grad, name)
            self.assertTrue(np.all(np.isfinite(p.grad)), name)
            if name.endswith("weight") or name.endswith("gamma"):
                self.assertTrue(np.any(p.grad != 0), name)


if __name__ == '__main__':
    unittest.main()

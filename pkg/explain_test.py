# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Tests for explain."""

import os

from absl.testing import absltest
import numpy as np
import torch

import backbones
import explain
import gradcheck
from common import ContractError, DataFormatError, LayerLookupError, Mode
from tensor_core import Tensor4


def trained_net(seed=0):
    net = backbones.build(backbones.plain_spec('triplet'), seed=seed)
    backbones.forward(net, sample(8, seed=seed + 1), Mode.TRAIN)
    return net


def sample(n=1, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return Tensor4(torch.rand(n, 3, 16, 16, generator=generator, dtype=torch.float64))


def last_block_activation(net, x):
    captured = {}
    handle = net.stages[-1][-1].register_forward_hook(lambda m, i, o: captured.update(y=o))
    net.eval()
    logits = net(x)
    handle.remove()
    return captured['y'].data, logits.data


class GradcamTest(absltest.TestCase):

    def test_matches_linear_head(self):
        net = trained_net()
        x = sample(seed=5)
        y, _ = last_block_activation(net, x)
        heatmap = explain.gradcam(net, x, class_index=1)
        self.assertEqual(heatmap.source_layer, 'stages.1.0')
        _, _, h, w = y.shape
        weights = net.head.weight[1, :, 0, 0].reshape(1, -1, 1, 1) / (h * w)
        cam = torch.clamp_min((weights * y).sum(dim=1)[0], 0.0)
        if float(cam.max()) > 0:
            cam = cam / cam.max()
        np.testing.assert_allclose(heatmap.values, cam.numpy(), rtol=1e-10, atol=1e-12)

    def test_default_class_is_top1(self):
        net = trained_net()
        x = sample(seed=6)
        _, logits = last_block_activation(net, x)
        heatmap = explain.gradcam(net, x)
        self.assertEqual(heatmap.class_index, int(torch.argmax(logits.reshape(-1))))

    def test_range_and_shapes(self):
        net = trained_net(seed=2)
        heatmap = explain.gradcam(net, sample(seed=7), class_index=0)
        self.assertEqual(heatmap.values.shape, (8, 8))
        self.assertEqual(heatmap.upsampled.shape, (16, 16))
        for values in (heatmap.values, heatmap.upsampled):
            self.assertGreaterEqual(values.min(), 0.0)
            self.assertLessEqual(values.max(), 1.0)
        if heatmap.values.max() > 0:
            self.assertEqual(heatmap.values.max(), 1.0)

    def test_zero_head_gives_zero_map(self):
        net = trained_net()
        with torch.no_grad():
            net.head.weight.zero_()
        heatmap = explain.gradcam(net, sample(seed=8), class_index=0)
        np.testing.assert_array_equal(heatmap.values, np.zeros((8, 8)))
        np.testing.assert_array_equal(heatmap.image(), np.zeros((16, 16)))

    def test_invariant_to_head_scale(self):
        net = trained_net()
        x = sample(seed=9)
        before = explain.gradcam(net, x, class_index=1).values
        with torch.no_grad():
            net.head.weight.mul_(4.0)
        after = explain.gradcam(net, x, class_index=1).values
        np.testing.assert_allclose(after, before, rtol=1e-10, atol=1e-12)

    def test_inner_layer(self):
        net = trained_net()
        heatmap = explain.gradcam(net, sample(), class_index=0, layer_name='stages.0.0', upsample=False)
        self.assertEqual(heatmap.values.shape, (16, 16))
        self.assertIsNone(heatmap.upsampled)

    def test_unknown_layer(self):
        net = trained_net()
        for name in ('stages.9.0', '', 'stages'):
            with self.assertRaises(LayerLookupError):
                explain.gradcam(net, sample(), layer_name=name)

    def test_contract(self):
        net = trained_net()
        with self.assertRaises(ContractError):
            explain.gradcam(net, sample(2))
        with self.assertRaises(ContractError):
            explain.gradcam(net, sample(), class_index=2)

    def test_channel_weights_match_finite_differences(self):
        net = trained_net()
        x = sample(seed=10)
        heatmap = explain.gradcam(net, x, class_index=1, layer_name='stages.0.0', upsample=False)
        block = net.stages[0][0]
        step = 1e-5

        def score(channel, delta):
            def shift(module, inputs, output):
                del module, inputs
                data = output.data.clone()
                data[:, channel] += delta
                return Tensor4(data)

            handle = block.register_forward_hook(shift)
            try:
                return float(net(x).data[0, 1, 0, 0])
            finally:
                handle.remove()

        channels = block.conv.out_channels
        h, w = heatmap.values.shape
        numerical = torch.tensor([(score(c, step) - score(c, -step)) / (2.0 * step * h * w)
                                  for c in range(channels)], dtype=torch.float64)
        analytic = torch.from_numpy(heatmap.channel_weights)
        self.assertEqual(analytic.shape, (channels,))
        self.assertGreater(float(analytic.abs().max()), 0.0)
        self.assertLess(gradcheck.relative_error(analytic, numerical), 1e-3)

    def test_gate_conv_layer(self):
        net = trained_net()
        heatmap = explain.gradcam(net, sample(), class_index=0, layer_name='stages.1.0.attention.gate_hw.conv',
                                  upsample=False)
        self.assertEqual(heatmap.values.shape, (8, 8))
        self.assertLen(heatmap.channel_weights, 1)

    def test_layer_run_twice(self):
        net = backbones.build(backbones.plain_spec({'type': 'cbam', 'r': 2, 'k': 3}), seed=0)
        with self.assertRaisesRegex(LayerLookupError, '2 times'):
            explain.gradcam(net, sample(), layer_name='stages.0.0.attention.mlp')


class ImageFileTest(absltest.TestCase):

    def setUp(self):
        super().setUp()
        self.dir = self.create_tempdir().full_path

    def test_pgm_bytes(self):
        heatmap = explain.Heatmap(np.array([[0.0, 1.0], [0.5, 0.25]]), 'x', 0)
        path = explain.emit_image(heatmap, os.path.join(self.dir, 'map.pgm'))
        with open(path, 'rb') as f:
            data = f.read()
        self.assertEqual(data, b'P5 2 2 255\n' + bytes([0, 255, 128, 64]))
        np.testing.assert_array_equal(explain.read_pgm(path), [[0, 255], [128, 64]])

    def test_upsampled_map_is_emitted(self):
        heatmap = explain.Heatmap(np.ones((2, 2)), 'x', 0, upsampled=np.zeros((4, 3)))
        path = explain.emit_image(heatmap, os.path.join(self.dir, 'map.pgm'))
        self.assertEqual(explain.read_pgm(path).shape, (4, 3))

    def test_ppm_overlay(self):
        heatmap = explain.Heatmap(np.array([[1.0, 0.0]]), 'x', 0)
        gray = np.array([[0.0, 1.0]])
        path = explain.emit_image(heatmap, os.path.join(self.dir, 'map.ppm'), overlay_with=gray)
        pixels = explain.read_ppm(path)
        self.assertEqual(pixels.shape, (1, 2, 3))
        np.testing.assert_array_equal(pixels[0, 0], [128, 0, 0])
        np.testing.assert_array_equal(pixels[0, 1], [128, 128, 128])

    def test_overlay_shape_mismatch(self):
        heatmap = explain.Heatmap(np.zeros((2, 2)), 'x', 0)
        with self.assertRaises(ContractError):
            explain.emit_image(heatmap, os.path.join(self.dir, 'map.ppm'), overlay_with=np.zeros((3, 3)))

    def test_comment_in_header(self):
        path = os.path.join(self.dir, 'map.pgm')
        with open(path, 'wb') as f:
            f.write(b'P5\n# made by hand\n1 2\n255\n' + bytes([7, 9]))
        np.testing.assert_array_equal(explain.read_pgm(path), [[7], [9]])

    def test_bad_files(self):
        path = os.path.join(self.dir, 'bad.pgm')
        for data in (b'P6 1 1 255\n\x00\x00\x00', b'P5 2 2 255\n\x00', b'P5 1 1 65535\n\x00\x00', b'P5 1',
                     b'P5 # no newline'):
            with open(path, 'wb') as f:
                f.write(data)
            with self.assertRaises(DataFormatError):
                explain.read_pgm(path)


if __name__ == '__main__':
    absltest.main()

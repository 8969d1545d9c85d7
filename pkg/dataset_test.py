# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Tests for dataset."""

import os

from absl.testing import absltest
import numpy as np
import torch

import dataset
from common import ConfigurationError, DataFormatError


def cifar_record(label, planes=(0, 0, 0)):
    return bytes([label]) + b''.join(bytes([value]) * 1024 for value in planes)


class Cifar10Test(absltest.TestCase):

    def setUp(self):
        super().setUp()
        self.dir = self.create_tempdir()

    def write(self, name, data):
        return self.dir.create_file(name, content=data, mode='wb').full_path

    def test_two_records(self):
        path = self.write('data_batch_1.bin', cifar_record(3, (10, 20, 30)) + cifar_record(7, (255, 255, 255)))
        handle = dataset.load_cifar10(path)
        self.assertLen(handle, 2)
        self.assertEqual(handle.image_shape, (3, 32, 32))
        np.testing.assert_array_equal(handle.labels.numpy(), [3, 7])
        np.testing.assert_array_equal(handle.images[0, :, 0, 0].numpy(), np.array([10, 20, 30]) / 255.0)
        self.assertTrue(bool(torch.all(handle.images[1] == 1.0)))
        self.assertEqual(handle.images.dtype, torch.float64)

    def test_planar_row_major(self):
        pixels = bytearray(3072)
        pixels[1024 + 32 * 2 + 5] = 51
        path = self.write('one.bin', bytes([0]) + bytes(pixels))
        image = dataset.load_cifar10(path).images[0]
        self.assertEqual(float(image[1, 2, 5]), 0.2)
        self.assertEqual(float(image.sum()), 0.2)

    def test_empty_file(self):
        handle = dataset.load_cifar10(self.write('empty.bin', b''))
        self.assertLen(handle, 0)

    def test_truncated_record(self):
        path = self.write('short.bin', cifar_record(1) + cifar_record(2)[:100])
        with self.assertRaisesRegex(DataFormatError, 'offset 3073'):
            dataset.load_cifar10(path)

    def test_label_out_of_range(self):
        path = self.write('bad.bin', cifar_record(1) + cifar_record(10))
        with self.assertRaisesRegex(DataFormatError, 'offset 3073'):
            dataset.load_cifar10(path)

    def test_directory(self):
        self.write('data_batch_1.bin', cifar_record(1))
        self.write('data_batch_2.bin', cifar_record(2) + cifar_record(3))
        self.write('test_batch.bin', cifar_record(9))
        train, test = dataset.load_cifar10_dir(self.dir.full_path)
        np.testing.assert_array_equal(train.labels.numpy(), [1, 2, 3])
        np.testing.assert_array_equal(test.labels.numpy(), [9])

    def test_directory_without_test_batch(self):
        self.write('data_batch_1.bin', cifar_record(4))
        _, test = dataset.load_cifar10_dir(self.dir.full_path)
        self.assertIsNone(test)

    def test_directory_without_batches(self):
        with self.assertRaises(ConfigurationError):
            dataset.load_cifar10_dir(self.dir.full_path)

    def test_normalize(self):
        handle = dataset.load_cifar10(self.write('one.bin', cifar_record(0, (255, 0, 0))))
        normalized = handle.normalize(handle.images)
        expected = (1.0 - dataset.CIFAR10_MEAN[0]) / dataset.CIFAR10_STD[0]
        self.assertAlmostEqual(float(normalized[0, 0, 0, 0]), expected, places=12)


class SyntheticTest(absltest.TestCase):

    def test_reproducible(self):
        a = dataset.gen_synthetic(3, 30, seed=5)
        b = dataset.gen_synthetic(3, 30, seed=5)
        self.assertTrue(torch.equal(a.images, b.images))
        self.assertTrue(torch.equal(a.labels, b.labels))
        c = dataset.gen_synthetic(3, 30, seed=6)
        self.assertFalse(torch.equal(a.images, c.images))

    def test_balanced(self):
        handle = dataset.gen_synthetic(4, 40, seed=0)
        np.testing.assert_array_equal(np.bincount(handle.labels.numpy()), [10, 10, 10, 10])

    def test_noise_free_images_are_patterns(self):
        handle = dataset.gen_synthetic(2, 6, seed=1, noise=0.0)
        self.assertTrue(torch.equal(handle.images[0], handle.images[2]))
        self.assertTrue(torch.equal(handle.images[1], handle.images[5]))
        self.assertFalse(torch.equal(handle.images[0], handle.images[1]))

    def test_noise_seed_keeps_patterns(self):
        train = dataset.gen_synthetic(2, 4, seed=1, noise=0.0, noise_seed=2)
        held_out = dataset.gen_synthetic(2, 4, seed=1, noise=0.0, noise_seed=3)
        self.assertTrue(torch.equal(train.images, held_out.images))
        noisy_a = dataset.gen_synthetic(2, 4, seed=1, noise=0.1, noise_seed=2)
        noisy_b = dataset.gen_synthetic(2, 4, seed=1, noise=0.1, noise_seed=3)
        self.assertFalse(torch.equal(noisy_a.images, noisy_b.images))

    def test_range_and_shape(self):
        handle = dataset.gen_synthetic(2, 8, seed=0, noise=2.0)
        self.assertEqual(handle.image_shape, dataset.SYNTHETIC_IMAGE_SHAPE)
        self.assertGreaterEqual(float(handle.images.min()), 0.0)
        self.assertLessEqual(float(handle.images.max()), 1.0)

    def test_rejects(self):
        with self.assertRaises(ConfigurationError):
            dataset.gen_synthetic(0, 4, seed=0)
        with self.assertRaises(ConfigurationError):
            dataset.gen_synthetic(2, 4, seed=0, noise=-1.0)

    def test_bad_labels(self):
        with self.assertRaises(DataFormatError):
            dataset.DatasetHandle(torch.zeros(2, 3, 4, 4), torch.tensor([0, 2]), 2)


class BatchesTest(absltest.TestCase):

    def test_covers_every_sample_once(self):
        handle = dataset.gen_synthetic(2, 10, seed=0)
        labels = torch.cat([labels for _, labels in dataset.batches(handle, 4, seed=1, epoch=2)])
        self.assertEqual(sorted(labels.tolist()), sorted(handle.labels.tolist()))
        sizes = [len(labels) for _, labels in dataset.batches(handle, 4)]
        self.assertEqual(sizes, [4, 4, 2])

    def test_order_depends_on_epoch(self):
        handle = dataset.gen_synthetic(5, 50, seed=0)
        order = lambda epoch: torch.cat([l for _, l in dataset.batches(handle, 50, seed=3, epoch=epoch)])
        self.assertTrue(torch.equal(order(1), order(1)))
        self.assertFalse(torch.equal(order(1), order(2)))

    def test_unshuffled(self):
        handle = dataset.gen_synthetic(3, 6, seed=0)
        images, labels = next(dataset.batches(handle, 6, shuffle=False))
        self.assertTrue(torch.equal(labels, handle.labels))
        self.assertTrue(torch.equal(images, handle.images))

    def test_flip(self):
        handle = dataset.gen_synthetic(2, 64, seed=0)
        flipped, _ = next(dataset.batches(handle, 64, shuffle=False, flip=True))
        mirrored = torch.flip(handle.images, dims=(3,))
        for i in range(64):
            self.assertTrue(torch.equal(flipped[i], handle.images[i]) or torch.equal(flipped[i], mirrored[i]))
        self.assertFalse(torch.equal(flipped, handle.images))


if __name__ == '__main__':
    absltest.main()

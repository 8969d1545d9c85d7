# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Utility functions for reading the datasets."""

import dataclasses
import logging
import pathlib
from typing import Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from common import ConfigurationError, DataFormatError

CIFAR10_RECORD_BYTES = 3073
CIFAR10_IMAGE_SHAPE = (3, 32, 32)
CIFAR10_CLASSES = 10
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

SYNTHETIC_IMAGE_SHAPE = (3, 16, 16)


@dataclasses.dataclass
class DatasetHandle:
    """Images in [0, 1] with integer labels; normalization is applied per batch."""
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    mean: Tuple[float, ...] = (0.0, 0.0, 0.0)
    std: Tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError('%d images but %d labels' % (self.images.shape[0], self.labels.shape[0]))
        if len(self.labels) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise DataFormatError('labels must lie in [0, %d)' % self.num_classes)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def normalize(self, images):
        mean = torch.tensor(self.mean, dtype=images.dtype).reshape(1, -1, 1, 1)
        std = torch.tensor(self.std, dtype=images.dtype).reshape(1, -1, 1, 1)
        return (images - mean) / std


def load_cifar10(path, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> DatasetHandle:
    """Reads one CIFAR-10 binary batch file (label byte + 3072 planar RGB bytes)."""
    raw = np.frombuffer(pathlib.Path(path).read_bytes(), dtype=np.uint8)
    whole = len(raw) // CIFAR10_RECORD_BYTES
    if len(raw) % CIFAR10_RECORD_BYTES:
        raise DataFormatError('%s: truncated record at byte offset %d (%d trailing bytes)'
                              % (path, whole * CIFAR10_RECORD_BYTES, len(raw) - whole * CIFAR10_RECORD_BYTES))
    records = raw.reshape(whole, CIFAR10_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR10_CLASSES)
    if bad.size:
        raise DataFormatError('%s: label %d at byte offset %d is not a CIFAR-10 class'
                              % (path, labels[bad[0]], bad[0] * CIFAR10_RECORD_BYTES))
    images = records[:, 1:].reshape((whole,) + CIFAR10_IMAGE_SHAPE).astype(np.float64) / 255.0
    logging.info('Loaded %d CIFAR-10 records from %s', whole, path)
    return DatasetHandle(torch.from_numpy(images), torch.from_numpy(labels), CIFAR10_CLASSES,
                         tuple(mean), tuple(std))


def load_cifar10_dir(path, mean=CIFAR10_MEAN, std=CIFAR10_STD):
    """Training batches (data_batch_*.bin) and, when present, test_batch.bin."""
    path = pathlib.Path(path)
    if path.is_file():
        return load_cifar10(path, mean, std), None
    files = sorted(path.glob('data_batch_*.bin'))
    if not files:
        raise ConfigurationError('no data_batch_*.bin files under %s' % path)
    parts = [load_cifar10(f, mean, std) for f in files]
    train = DatasetHandle(torch.cat([p.images for p in parts]), torch.cat([p.labels for p in parts]),
                          CIFAR10_CLASSES, tuple(mean), tuple(std))
    test_file = path / 'test_batch.bin'
    test = load_cifar10(test_file, mean, std) if test_file.exists() else None
    return train, test


def gen_synthetic(classes, n, seed, noise=0.1, image_shape=SYNTHETIC_IMAGE_SHAPE, noise_seed=None) -> DatasetHandle:
    """Class-conditional blobs: a fixed random pattern per class plus seeded noise.

    Class patterns depend on `seed` only; `noise_seed` (default `seed`) drives
    the noise, so splits sharing `seed` share their classes. Labels cycle
    through the classes, so the split is exact when classes | n.
    """
    if classes < 1 or n < 0 or noise < 0:
        raise ConfigurationError('synthetic data needs classes >= 1, n >= 0, noise >= 0')
    generator = torch.Generator().manual_seed(int(seed))
    patterns = torch.rand((classes,) + tuple(image_shape), generator=generator, dtype=torch.float64)
    labels = torch.arange(n, dtype=torch.long) % classes
    images = patterns[labels]
    if noise > 0:
        noise_generator = torch.Generator().manual_seed(int(seed if noise_seed is None else noise_seed))
        images = images + noise * torch.randn(images.shape, generator=noise_generator, dtype=torch.float64)
    return DatasetHandle(torch.clamp(images, 0.0, 1.0), labels, classes)


class ImageDataset(Dataset):

    def __init__(self, handle: DatasetHandle):
        self.handle = handle

    def __len__(self):
        return len(self.handle)

    def __getitem__(self, index):
        return self.handle.images[index], self.handle.labels[index]


def epoch_seed(seed, epoch):
    return int(seed) * 1_000_003 + int(epoch)


def make_loader(handle: DatasetHandle, batch_size, seed=0, epoch=0, shuffle=True):
    generator = torch.Generator().manual_seed(epoch_seed(seed, epoch))
    return DataLoader(ImageDataset(handle), batch_size=batch_size, shuffle=shuffle,
                      num_workers=0, generator=generator)


def batches(handle: DatasetHandle, batch_size, seed=0, epoch=0, shuffle=True, flip=False):
    """Yields normalized (images, labels); flips are drawn from a per-epoch generator."""
    flip_generator = torch.Generator().manual_seed(epoch_seed(seed, epoch) + 1)
    for images, labels in make_loader(handle, batch_size, seed, epoch, shuffle):
        images = handle.normalize(images)
        if flip:
            mask = torch.rand(images.shape[0], generator=flip_generator) < 0.5
            images = torch.where(mask.reshape(-1, 1, 1, 1), torch.flip(images, dims=(3,)), images)
        yield images, labels

# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Flat binary parameter files.

A file is one JSON manifest line followed by the concatenated little-endian
float64 values of every entry, in manifest order:

    {"entries": [["conv.weight", [1, 2, 7, 7]], ...], "meta": {...}}\n
    <raw bytes>
"""

import collections
import json
import logging
import pathlib

import numpy as np
import torch

from common import ConfigurationError, DataFormatError
from tensor_core import DTYPE

_LE_FLOAT64 = np.dtype('<f8')


def write_registry(path, entries, meta=None):
    """Writes an ordered name -> tensor mapping."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {'entries': [[name, list(value.shape)] for name, value in entries.items()],
                'meta': meta or {}}
    with open(path, 'wb') as f:
        f.write(json.dumps(manifest).encode('utf-8') + b'\n')
        for value in entries.values():
            f.write(value.detach().cpu().numpy().astype(_LE_FLOAT64, copy=False).tobytes())


def read_registry(path):
    """Returns (OrderedDict name -> float64 tensor, meta)."""
    with open(path, 'rb') as f:
        header = f.readline()
        payload = f.read()
    try:
        manifest = json.loads(header.decode('utf-8'))
        listing = manifest['entries']
    except (ValueError, KeyError, TypeError) as e:
        raise DataFormatError('%s: unreadable manifest line (%s)' % (path, e)) from None
    values = np.frombuffer(payload, dtype=_LE_FLOAT64) if len(payload) % 8 == 0 else None
    expected = sum(int(np.prod(shape)) for _, shape in listing)
    if values is None or values.size != expected:
        raise DataFormatError('%s: payload holds %d bytes, manifest needs %d' % (path, len(payload), expected * 8))
    entries = collections.OrderedDict()
    offset = 0
    for name, shape in listing:
        size = int(np.prod(shape))
        entries[name] = torch.from_numpy(values[offset:offset + size].astype(np.float64)).reshape(shape)
        offset += size
    return entries, manifest.get('meta', {})


def save_parameters(module, path, meta=None, extra=None):
    """Saves parameters and running statistics in state_dict order."""
    entries = collections.OrderedDict(module.state_dict())
    if extra:
        entries.update(extra)
    write_registry(path, entries, meta)
    logging.info('Saved %d tensors to %s', len(entries), path)


def load_parameters(module, path):
    """Loads a file written by save_parameters; returns (meta, extra entries)."""
    entries, meta = read_registry(path)
    state = module.state_dict()
    missing = [name for name in state if name not in entries]
    if missing:
        raise ConfigurationError('%s lacks entries for: %s' % (path, ', '.join(missing)))
    for name, value in state.items():
        if tuple(value.shape) != tuple(entries[name].shape):
            raise ConfigurationError('%s: %s has shape %r, module expects %r'
                                     % (path, name, tuple(entries[name].shape), tuple(value.shape)))
    module.load_state_dict({name: entries[name].to(DTYPE) for name in state})
    extra = collections.OrderedDict((name, value) for name, value in entries.items() if name not in state)
    return meta, extra

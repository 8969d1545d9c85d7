# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Grad-CAM heatmaps and their PGM/PPM emission."""

import dataclasses
import logging
import pathlib
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from common import ContractError, DataFormatError, LayerLookupError
from tensor_core import Tape, Tensor4, backward, select


@dataclasses.dataclass
class Heatmap:
    values: np.ndarray
    source_layer: str
    class_index: int
    upsampled: Optional[np.ndarray] = None
    # spatial mean of d(logit)/d(activation), one entry per channel
    channel_weights: Optional[np.ndarray] = None

    def image(self):
        return self.values if self.upsampled is None else self.upsampled


def gradcam(net, x: Tensor4, class_index=None, layer_name=None, upsample=True) -> Heatmap:
    """Class activation map of one input at a named layer (eval-mode forward).

    The target class defaults to the top-1 prediction and the layer to the
    output of the last block.
    """
    if x.shape[0] != 1:
        raise ContractError('gradcam takes a single input, got batch of %d' % x.shape[0])
    layer_name = net.last_block_name if layer_name is None else layer_name
    modules = dict(net.named_modules())
    if layer_name not in modules or not layer_name:
        raise LayerLookupError('no layer named %r' % layer_name)

    captured = {}

    def capture(module, inputs, output):
        del module, inputs
        captured['calls'] = captured.get('calls', 0) + 1
        captured['activation'] = output

    net.eval()
    handle = modules[layer_name].register_forward_hook(capture)
    try:
        with Tape():
            logits = net(x)
            num_classes = logits.shape[1]
            if class_index is None:
                class_index = int(torch.argmax(logits.data.reshape(-1)))
            if not 0 <= class_index < num_classes:
                raise ContractError('class index %r outside [0, %d)' % (class_index, num_classes))
            score = select(logits, (0, class_index, 0, 0))
            grads = backward(score)
    finally:
        handle.remove()

    if not captured:
        raise LayerLookupError('layer %r is never invoked as a module in the forward pass' % layer_name)
    if captured['calls'] > 1:
        raise LayerLookupError('layer %r runs %d times per forward pass' % (layer_name, captured['calls']))
    activation = captured['activation']
    if not isinstance(activation, Tensor4):
        raise LayerLookupError('layer %r does not produce a 4-D activation' % layer_name)
    grad = grads.get(activation.node_id)
    if grad is None:
        grad = torch.zeros_like(activation.data)

    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = torch.clamp_min((weights * activation.data).sum(dim=1)[0], 0.0)
    peak = float(cam.max())
    if peak > 0.0:
        cam = cam / peak
    upsampled = None
    if upsample:
        size = x.shape[2:]
        upsampled = F.interpolate(cam[None, None], size=size, mode='bilinear', align_corners=False)[0, 0]
        upsampled = torch.clamp(upsampled, 0.0, 1.0).numpy()
    logging.info('Grad-CAM at %s for class %d (peak %.4g)', layer_name, class_index, peak)
    return Heatmap(cam.numpy(), layer_name, class_index, upsampled, weights.reshape(-1).numpy())


def to_bytes(values):
    """Scales [0, 1] values to 0..255, rounding half up."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def emit_image(h: Heatmap, path, overlay_with=None):
    """Writes the map as binary PGM, or blended over a grayscale image as PPM."""
    path = pathlib.Path(path)
    values = h.image()
    height, width = values.shape
    if overlay_with is None:
        payload = to_bytes(values).tobytes()
        header = 'P5 %d %d 255\n' % (width, height)
    else:
        gray = np.asarray(overlay_with, dtype=np.float64)
        if gray.shape != values.shape:
            raise ContractError('overlay image %r does not match heatmap %r' % (gray.shape, values.shape))
        base = 0.5 * gray
        rgb = np.stack([base + 0.5 * values, base, base], axis=-1)
        payload = to_bytes(rgb).tobytes()
        header = 'P6 %d %d 255\n' % (width, height)
    with open(path, 'wb') as f:
        f.write(header.encode('ascii') + payload)
    return path


def _read_netpbm(path, magic):
    data = pathlib.Path(path).read_bytes()
    tokens = []
    position = 0
    while len(tokens) < 4:
        while position < len(data) and data[position:position + 1].isspace():
            position += 1
        if data[position:position + 1] == b'#':
            end = data.find(b'\n', position)
            if end < 0:
                raise DataFormatError('%s: unterminated header comment' % path)
            position = end + 1
            continue
        start = position
        while position < len(data) and not data[position:position + 1].isspace():
            position += 1
        if start == position:
            raise DataFormatError('%s: truncated header' % path)
        tokens.append(data[start:position])
    if tokens[0] != magic or tokens[3] != b'255':
        raise DataFormatError('%s: expected %s with maxval 255' % (path, magic.decode()))
    width, height = int(tokens[1]), int(tokens[2])
    body = data[position + 1:]
    channels = 3 if magic == b'P6' else 1
    if len(body) != width * height * channels:
        raise DataFormatError('%s: expected %d pixel bytes, found %d' % (path, width * height * channels, len(body)))
    pixels = np.frombuffer(body, dtype=np.uint8)
    return pixels.reshape((height, width, channels) if channels == 3 else (height, width))


def read_pgm(path):
    return _read_netpbm(path, b'P5')


def read_ppm(path):
    return _read_netpbm(path, b'P6')

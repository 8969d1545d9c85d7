# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Core layers: convolution, batch norm, pooling, activations and losses."""

import math

import torch
from torch import nn
import torch.nn.functional as F

from common import ConfigurationError, ContractError, DegenerateBatchError, DimensionError
from tensor_core import DTYPE, Function, Tensor4, add, parameter


def default_generator(seed=0):
    return torch.Generator().manual_seed(seed)


def init_uniform(shape, bound, generator=None, device=None):
    """Seeded uniform draw in [-bound, bound]; shape-only on the meta device."""
    if device is not None and torch.device(device).type == 'meta':
        return torch.empty(shape, dtype=DTYPE, device='meta')
    generator = default_generator() if generator is None else generator
    return (torch.rand(shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound


def _fixed(data):
    return nn.Parameter(data, requires_grad=False)


def first_argmax(t, dim):
    """Index of the first maximum along `dim`, ties resolved in index order."""
    maxima = t.amax(dim=dim, keepdim=True)
    size = t.shape[dim]
    view = [1] * t.dim()
    view[dim] = size
    rank = torch.arange(size, 0, -1, device=t.device).reshape(view)
    return torch.where(t == maxima, rank, torch.zeros_like(rank)).argmax(dim=dim)


def _channel_mean(x):
    # left-to-right accumulation, divided once
    total = x[:, 0:1]
    for c in range(1, x.shape[1]):
        total = total + x[:, c:c + 1]
    return total / x.shape[1]


class Conv2dFunction(Function):
    name = 'conv2d'

    @staticmethod
    def forward(ctx, x, weight, stride, padding):
        n, _, h, w = x.shape
        c_out, _, k, _ = weight.shape
        h_out = (h + 2 * padding - k) // stride + 1
        w_out = (w + 2 * padding - k) // stride + 1
        cols = F.unfold(x, k, padding=padding, stride=stride)
        ctx.save_for_backward(weight, cols)
        ctx.geometry = (h, w, k, stride, padding)
        return torch.matmul(weight.reshape(c_out, -1), cols).reshape(n, c_out, h_out, w_out)

    @staticmethod
    def backward(ctx, grad):
        weight, cols = ctx.saved_tensors
        h, w, k, stride, padding = ctx.geometry
        n, c_out = grad.shape[:2]
        grad_rows = grad.reshape(n, c_out, -1)
        grad_weight = torch.matmul(grad_rows, cols.transpose(1, 2)).sum(dim=0).reshape(weight.shape)
        grad_cols = torch.matmul(weight.reshape(c_out, -1).t(), grad_rows)
        grad_x = F.fold(grad_cols, (h, w), k, padding=padding, stride=stride)
        return grad_x, grad_weight


class BatchNormTrainFunction(Function):
    name = 'batchnorm2d_train'

    @staticmethod
    def forward(ctx, x, gamma, beta, mean, var, eps):
        inv_std = 1.0 / torch.sqrt(var + eps)
        x_hat = (x - mean) * inv_std
        ctx.save_for_backward(x_hat, gamma, inv_std)
        return gamma * x_hat + beta

    @staticmethod
    def backward(ctx, grad):
        x_hat, gamma, inv_std = ctx.saved_tensors
        dims = (0, 2, 3)
        count = grad.shape[0] * grad.shape[2] * grad.shape[3]
        grad_gamma = (grad * x_hat).sum(dim=dims, keepdim=True)
        grad_beta = grad.sum(dim=dims, keepdim=True)
        grad_x_hat = grad * gamma
        grad_x = inv_std / count * (count * grad_x_hat
                                    - grad_x_hat.sum(dim=dims, keepdim=True)
                                    - x_hat * (grad_x_hat * x_hat).sum(dim=dims, keepdim=True))
        return grad_x, grad_gamma, grad_beta


class BatchNormEvalFunction(Function):
    name = 'batchnorm2d_eval'

    @staticmethod
    def forward(ctx, x, gamma, beta, running_mean, running_var, eps):
        inv_std = 1.0 / torch.sqrt(running_var + eps)
        x_hat = (x - running_mean) * inv_std
        ctx.save_for_backward(x_hat, gamma, inv_std)
        return gamma * x_hat + beta

    @staticmethod
    def backward(ctx, grad):
        x_hat, gamma, inv_std = ctx.saved_tensors
        dims = (0, 2, 3)
        return (grad * gamma * inv_std,
                (grad * x_hat).sum(dim=dims, keepdim=True),
                grad.sum(dim=dims, keepdim=True))


class GapFunction(Function):
    name = 'gap'

    @staticmethod
    def forward(ctx, x):
        ctx.shape = x.shape
        return x.mean(dim=(2, 3), keepdim=True)

    @staticmethod
    def backward(ctx, grad):
        _, _, h, w = ctx.shape
        return (grad / (h * w)).expand(ctx.shape).clone(),


class GmpFunction(Function):
    name = 'gmp'

    @staticmethod
    def forward(ctx, x):
        n, c = x.shape[:2]
        flat = x.reshape(n, c, -1)
        index = first_argmax(flat, 2).unsqueeze(-1)
        ctx.shape = x.shape
        ctx.index = index
        return flat.gather(2, index).reshape(n, c, 1, 1)

    @staticmethod
    def backward(ctx, grad):
        n, c = ctx.shape[:2]
        out = torch.zeros(n, c, ctx.shape[2] * ctx.shape[3], dtype=grad.dtype)
        out.scatter_(2, ctx.index, grad.reshape(n, c, 1))
        return out.reshape(ctx.shape),


class ZPoolFunction(Function):
    """Max and mean over the channel axis, stacked as two channels."""
    name = 'zpool'

    @staticmethod
    def forward(ctx, x):
        index = first_argmax(x, 1).unsqueeze(1)
        ctx.shape = x.shape
        ctx.index = index
        return torch.cat([x.gather(1, index), _channel_mean(x)], dim=1)

    @staticmethod
    def backward(ctx, grad):
        out = (grad[:, 1:2] / ctx.shape[1]).expand(ctx.shape).clone()
        out.scatter_add_(1, ctx.index, grad[:, 0:1])
        return out,


class SigmoidFunction(Function):
    name = 'sigmoid'

    @staticmethod
    def forward(ctx, x):
        y = torch.sigmoid(x)
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, grad):
        y, = ctx.saved_tensors
        return grad * y * (1.0 - y),


class ReluFunction(Function):
    name = 'relu'

    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx.save_for_backward(mask)
        return torch.where(mask, x, torch.zeros_like(x))

    @staticmethod
    def backward(ctx, grad):
        mask, = ctx.saved_tensors
        return torch.where(mask, grad, torch.zeros_like(grad)),


class LinearFunction(Function):
    """(N, C, 1, 1) vectors times a (1, 1, R, C) matrix, giving (N, R, 1, 1)."""
    name = 'linear'

    @staticmethod
    def forward(ctx, v, weight):
        n, c = v.shape[:2]
        rows = weight.shape[2]
        ctx.save_for_backward(v, weight)
        return torch.matmul(v.reshape(n, c), weight.reshape(rows, c).t()).reshape(n, rows, 1, 1)

    @staticmethod
    def backward(ctx, grad):
        v, weight = ctx.saved_tensors
        n, c = v.shape[:2]
        rows = weight.shape[2]
        grad_rows = grad.reshape(n, rows)
        grad_v = torch.matmul(grad_rows, weight.reshape(rows, c)).reshape(v.shape)
        grad_weight = torch.matmul(grad_rows.t(), v.reshape(n, c)).reshape(weight.shape)
        return grad_v, grad_weight


class MaxPool2dFunction(Function):
    name = 'maxpool2d'

    @staticmethod
    def forward(ctx, x, kernel_size, stride, padding):
        n, c, h, w = x.shape
        h_out = (h + 2 * padding - kernel_size) // stride + 1
        w_out = (w + 2 * padding - kernel_size) // stride + 1
        padded = F.pad(x, (padding,) * 4, value=-math.inf)
        cols = F.unfold(padded, kernel_size, stride=stride).reshape(n, c, kernel_size * kernel_size, -1)
        index = first_argmax(cols, 2).unsqueeze(2)
        ctx.index = index
        ctx.geometry = (x.shape, kernel_size, stride, padding, cols.shape)
        return cols.gather(2, index).reshape(n, c, h_out, w_out)

    @staticmethod
    def backward(ctx, grad):
        (n, c, h, w), k, stride, padding, cols_shape = ctx.geometry
        grad_cols = torch.zeros(cols_shape, dtype=grad.dtype)
        grad_cols.scatter_(2, ctx.index, grad.reshape(n, c, 1, -1))
        grad_padded = F.fold(grad_cols.reshape(n, c * k * k, -1), (h + 2 * padding, w + 2 * padding),
                             k, stride=stride)
        return grad_padded[:, :, padding:padding + h, padding:padding + w].contiguous(),


class CrossEntropyFunction(Function):
    name = 'cross_entropy'

    @staticmethod
    def forward(ctx, logits, labels):
        n, k = logits.shape[:2]
        z = logits.reshape(n, k)
        lse = torch.logsumexp(z, dim=1, keepdim=True)
        picked = z.gather(1, labels.reshape(n, 1))
        ctx.probs = torch.exp(z - lse)
        ctx.labels = labels
        ctx.shape = logits.shape
        return (lse - picked).mean().reshape(1, 1, 1, 1)

    @staticmethod
    def backward(ctx, grad):
        n = ctx.shape[0]
        delta = ctx.probs.clone()
        delta[torch.arange(n), ctx.labels] -= 1.0
        return (delta * (grad.reshape(()) / n)).reshape(ctx.shape),


class PadShortcutFunction(Function):
    """Strided subsampling plus zero channel padding (parameter-free shortcut)."""
    name = 'pad_shortcut'

    @staticmethod
    def forward(ctx, x, out_channels, stride):
        sub = x[:, :, ::stride, ::stride]
        extra = out_channels - x.shape[1]
        front = extra // 2
        ctx.geometry = (x.shape, stride, front)
        return F.pad(sub, (0, 0, 0, 0, front, extra - front))

    @staticmethod
    def backward(ctx, grad):
        shape, stride, front = ctx.geometry
        out = torch.zeros(shape, dtype=grad.dtype)
        out[:, :, ::stride, ::stride] = grad[:, front:front + shape[1]]
        return out,


class Conv2d(nn.Module):
    """k x k cross-correlation, zero padded; `padding=None` preserves shape."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=None, bias=False,
                 generator=None, device=None):
        super().__init__()
        if min(in_channels, out_channels, kernel_size, stride) < 1:
            raise ConfigurationError('conv sizes must be positive: in=%r out=%r k=%r stride=%r'
                                     % (in_channels, out_channels, kernel_size, stride))
        if padding is None:
            if kernel_size % 2 == 0:
                raise ConfigurationError('shape-preserving padding needs an odd kernel, got %d' % kernel_size)
            padding = (kernel_size - 1) // 2
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        bound = math.sqrt(1.0 / (in_channels * kernel_size * kernel_size))
        self.weight = _fixed(init_uniform((out_channels, in_channels, kernel_size, kernel_size),
                                          bound, generator, device))
        if bias:
            self.bias = _fixed(init_uniform((out_channels,), bound, generator, device))
        else:
            self.register_parameter('bias', None)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise DimensionError('conv expects %d input channels, got %d' % (self.in_channels, c))
        if h + 2 * self.padding < self.kernel_size or w + 2 * self.padding < self.kernel_size:
            raise DimensionError('input %dx%d too small for kernel %d' % (h, w, self.kernel_size))
        h_out = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        w_out = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        return self.out_channels, h_out, w_out

    def forward(self, x):
        return conv2d(x, self)

    def extra_repr(self):
        return '%d, %d, kernel_size=%d, stride=%d, padding=%d, bias=%s' % (
            self.in_channels, self.out_channels, self.kernel_size, self.stride, self.padding,
            self.bias is not None)


class BatchNorm2d(nn.Module):

    def __init__(self, num_features, eps=1e-5, momentum=0.1, device=None):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ConfigurationError('batch norm momentum must be in (0, 1), got %r' % momentum)
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = _fixed(torch.ones(num_features, dtype=DTYPE, device=device))
        self.beta = _fixed(torch.zeros(num_features, dtype=DTYPE, device=device))
        self.register_buffer('running_mean', torch.zeros(num_features, dtype=DTYPE, device=device))
        self.register_buffer('running_var', torch.ones(num_features, dtype=DTYPE, device=device))

    def forward(self, x):
        return batchnorm2d(x, self)

    def extra_repr(self):
        return '%d, eps=%g, momentum=%g' % (self.num_features, self.eps, self.momentum)


class Mlp2(nn.Module):
    """Bias-free C -> C/r -> C perceptron with a ReLU in between."""

    def __init__(self, channels, reduction, generator=None, device=None):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigurationError('reduction ratio %r must divide channel count %r' % (reduction, channels))
        hidden = channels // reduction
        self.channels = channels
        self.reduction = reduction
        self.w0 = _fixed(init_uniform((hidden, channels), math.sqrt(1.0 / channels), generator, device))
        self.w1 = _fixed(init_uniform((channels, hidden), math.sqrt(1.0 / hidden), generator, device))

    def forward(self, v):
        return mlp2(v, self)


class MaxPool2d(nn.Module):

    def __init__(self, kernel_size=3, stride=2, padding=1):
        super().__init__()
        if padding * 2 >= kernel_size + 1:
            raise ConfigurationError('max pool padding %d too large for kernel %d' % (padding, kernel_size))
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding

    def output_shape(self, shape):
        c, h, w = shape
        return (c, (h + 2 * self.padding - self.kernel_size) // self.stride + 1,
                (w + 2 * self.padding - self.kernel_size) // self.stride + 1)

    def forward(self, x):
        return maxpool2d(x, self.kernel_size, self.stride, self.padding)


class PadShortcut(nn.Module):

    def __init__(self, in_channels, out_channels, stride):
        super().__init__()
        if out_channels < in_channels:
            raise ConfigurationError('zero-pad shortcut cannot shrink %d channels to %d' % (in_channels, out_channels))
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride

    def output_shape(self, shape):
        c, h, w = shape
        return self.out_channels, (h - 1) // self.stride + 1, (w - 1) // self.stride + 1

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise DimensionError('shortcut expects %d channels, got %d' % (self.in_channels, x.shape[1]))
        return PadShortcutFunction.apply(x, self.out_channels, self.stride)


def conv2d(x: Tensor4, s: Conv2d) -> Tensor4:
    s.output_shape(x.shape[1:])
    y = Conv2dFunction.apply(x, parameter(s.weight), s.stride, s.padding)
    if s.bias is not None:
        y = add(y, parameter(s.bias, (1, s.out_channels, 1, 1)))
    return y


def batch_moments(x):
    """Per-channel biased mean and variance over (N, H, W), kept as (1, C, 1, 1)."""
    mean = x.mean(dim=(0, 2, 3), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(0, 2, 3), keepdim=True)
    return mean, var


def batchnorm2d(x: Tensor4, s: BatchNorm2d) -> Tensor4:
    """Batch statistics in train mode (updating running stats), running stats in eval."""
    n, c, h, w = x.shape
    if c != s.num_features:
        raise DimensionError('batch norm expects %d channels, got %d' % (s.num_features, c))
    shape = (1, c, 1, 1)
    gamma = parameter(s.gamma, shape)
    beta = parameter(s.beta, shape)
    if not s.training:
        return BatchNormEvalFunction.apply(x, gamma, beta, s.running_mean.view(shape),
                                           s.running_var.view(shape), s.eps)

    count = n * h * w
    if count == 1:
        raise DegenerateBatchError('batch norm in train mode needs more than one value per channel')
    mean, var = batch_moments(x.data)
    y = BatchNormTrainFunction.apply(x, gamma, beta, mean, var, s.eps)
    s.running_mean.mul_(1.0 - s.momentum).add_(s.momentum * mean.reshape(c))
    s.running_var.mul_(1.0 - s.momentum).add_(s.momentum * var.reshape(c) * (count / (count - 1)))
    return y


def gap(x: Tensor4) -> Tensor4:
    return GapFunction.apply(x)


def gmp(x: Tensor4) -> Tensor4:
    return GmpFunction.apply(x)


def zpool(x: Tensor4) -> Tensor4:
    return ZPoolFunction.apply(x)


def sigmoid(x: Tensor4) -> Tensor4:
    return SigmoidFunction.apply(x)


def relu(x: Tensor4) -> Tensor4:
    return ReluFunction.apply(x)


def linear(v: Tensor4, weight: Tensor4) -> Tensor4:
    if v.shape[2:] != (1, 1) or weight.shape[:2] != (1, 1) or weight.shape[3] != v.shape[1]:
        raise DimensionError('cannot apply %r matrix to %r vectors' % (weight.shape[2:], v.shape))
    return LinearFunction.apply(v, weight)


def mlp2(v: Tensor4, s: Mlp2) -> Tensor4:
    if v.shape[1] != s.channels:
        raise DimensionError('MLP expects %d channels, got %d' % (s.channels, v.shape[1]))
    hidden = relu(linear(v, parameter(s.w0, (1, 1) + tuple(s.w0.shape))))
    return linear(hidden, parameter(s.w1, (1, 1) + tuple(s.w1.shape)))


def maxpool2d(x: Tensor4, kernel_size=3, stride=2, padding=1) -> Tensor4:
    return MaxPool2dFunction.apply(x, kernel_size, stride, padding)


def cross_entropy(logits: Tensor4, labels) -> Tensor4:
    """Mean softmax cross-entropy of (N, K, 1, 1) logits against integer labels."""
    n, k = logits.shape[:2]
    if logits.shape[2:] != (1, 1):
        raise DimensionError('logits must have shape (N, K, 1, 1), got %r' % (logits.shape,))
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.numel() != n:
        raise ContractError('%d labels for a batch of %d' % (labels.numel(), n))
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ContractError('labels must lie in [0, %d)' % k)
    return CrossEntropyFunction.apply(logits, labels)

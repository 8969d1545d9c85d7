# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Finite-difference checks of every backward rule, module and network.

Each case builds inputs and a forward function; the scalar checked is the
forward output projected onto fixed random weights, so no gradient is
trivially zero. Analytic gradients come from the tape, numerical ones from
central differences perturbing each element in place.
"""

import collections
import dataclasses
import logging
from typing import Callable, List, Optional

import torch
from torch import nn

import attention
import backbones
import nn_ops
import tensor_core
from common import RotationVariant, VerificationError
from tensor_core import DTYPE, Tape, Tensor4

SCOPES = ('ops', 'attention', 'end2end')

GradCheckResult = collections.namedtuple(
    'GradCheckResult', ['scope', 'name', 'instances', 'max_rel_error', 'tolerance', 'passed'])


@dataclasses.dataclass(frozen=True)
class ScopeSettings:
    step: float
    tolerance: float


SETTINGS = {
    'ops': ScopeSettings(step=1e-5, tolerance=1e-4),
    'attention': ScopeSettings(step=1e-6, tolerance=1e-4),
    'end2end': ScopeSettings(step=1e-7, tolerance=1e-3),
}


@dataclasses.dataclass
class Case:
    """Arrays to differentiate and a forward over Tensor4 wrappers of `inputs`."""
    inputs: List[torch.Tensor]
    forward: Callable[[List[Tensor4]], Tensor4]
    module: Optional[nn.Module] = None


def separated(shape, generator, low=-1.0, high=1.0):
    """Distinct values at least 0.8 grid steps apart, none near zero or ties."""
    n = 1
    for d in shape:
        n *= d
    spacing = (high - low) / n
    order = torch.randperm(n, generator=generator).to(DTYPE)
    jitter = (torch.rand(n, generator=generator, dtype=DTYPE) - 0.5) * 0.2
    values = (order - n // 2 + 0.3 + jitter) * spacing
    return values.reshape(shape)


def uniform(shape, generator, low=-1.0, high=1.0):
    return torch.rand(shape, generator=generator, dtype=DTYPE) * (high - low) + low


def _randomize(module, generator):
    """Random weights and non-trivial batch norm affine/statistics."""
    for name, param in module.named_parameters():
        if name.endswith('gamma'):
            param.data.copy_(uniform(param.shape, generator, 0.5, 1.5))
        else:
            param.data.copy_(uniform(param.shape, generator, -0.5, 0.5))
    for name, buf in module.named_buffers():
        if name.endswith('running_var'):
            buf.copy_(uniform(buf.shape, generator, 0.5, 2.0))
        else:
            buf.copy_(uniform(buf.shape, generator, -0.3, 0.3))
    return module


def _unary(fn, shape):
    def build(generator):
        return Case([separated(shape, generator)], lambda t: fn(t[0]))
    return build


def _layer(make_module, shape, train=True):
    def build(generator):
        module = _randomize(make_module(generator), generator)
        module.train(train)
        return Case([separated(shape, generator)], lambda t: module(t[0]), module)
    return build


def _binary(fn, a_shape, b_shape):
    def build(generator):
        return Case([separated(a_shape, generator), separated(b_shape, generator)], lambda t: fn(t[0], t[1]))
    return build


def _cross_entropy(generator):
    labels = torch.randint(0, 4, (3,), generator=generator)
    return Case([separated((3, 4, 1, 1), generator)], lambda t: nn_ops.cross_entropy(t[0], labels))


OP_CASES = {
    'add': _binary(tensor_core.add, (2, 3, 4, 4), (1, 3, 1, 4)),
    'sub': _binary(tensor_core.sub, (2, 3, 4, 4), (2, 3, 4, 4)),
    'neg': _unary(tensor_core.neg, (2, 3, 2, 2)),
    'concat': _binary(lambda a, b: tensor_core.concat([a, b]), (2, 2, 3, 3), (2, 3, 3, 3)),
    'mul': _binary(tensor_core.mul, (2, 4, 3, 3), (1, 1, 3, 3)),
    'scale': _unary(lambda x: tensor_core.scale(x, 0.7), (2, 3, 3, 3)),
    'permute': _unary(lambda x: tensor_core.permute(x, (3, 1, 2)), (2, 3, 4, 5)),
    'flip': _unary(lambda x: tensor_core.flip(x, 2), (2, 3, 4, 5)),
    'sum': _unary(tensor_core.sum_all, (2, 3, 3, 3)),
    'select': _unary(lambda x: tensor_core.select(x, (1, 2, 0, 1)), (2, 3, 3, 3)),
    'conv2d': _layer(lambda g: nn_ops.Conv2d(3, 4, 3, stride=2, bias=True, generator=g), (2, 3, 5, 5)),
    'batchnorm2d_train': _layer(lambda g: nn_ops.BatchNorm2d(3), (2, 3, 4, 4)),
    'batchnorm2d_eval': _layer(lambda g: nn_ops.BatchNorm2d(3), (2, 3, 4, 4), train=False),
    'gap': _unary(nn_ops.gap, (2, 4, 5, 5)),
    'gmp': _unary(nn_ops.gmp, (2, 4, 5, 5)),
    'zpool': _unary(nn_ops.zpool, (2, 4, 5, 5)),
    'sigmoid': _unary(nn_ops.sigmoid, (2, 4, 3, 3)),
    'relu': _unary(nn_ops.relu, (2, 4, 3, 3)),
    'linear': _binary(nn_ops.linear, (2, 4, 1, 1), (1, 1, 3, 4)),
    'maxpool2d': _unary(nn_ops.maxpool2d, (2, 2, 5, 5)),
    'cross_entropy': _cross_entropy,
    'pad_shortcut': _unary(lambda x: nn_ops.PadShortcutFunction.apply(x, 4, 2), (2, 2, 4, 4)),
}


def _triplet(**overrides):
    config = attention.TripletAttentionConfig(k=3, **overrides)
    return lambda g: attention.TripletAttention(config, generator=g)


MODULE_SHAPE = (2, 4, 5, 5)

ATTENTION_CASES = {
    'gate': _layer(lambda g: attention.AttentionGate(3, generator=g), MODULE_SHAPE),
    'triplet': _layer(_triplet(), MODULE_SHAPE),
    'triplet_channel_off': _layer(_triplet(branch_channel_enabled=False), MODULE_SHAPE),
    'triplet_spatial_off': _layer(_triplet(branch_spatial_enabled=False), MODULE_SHAPE),
    'triplet_flip': _layer(_triplet(rotation_variant=RotationVariant.TRANSPOSE_WITH_FLIP), MODULE_SHAPE),
    'triplet_eval': _layer(_triplet(), MODULE_SHAPE, train=False),
    'cbam': _layer(lambda g: attention.Cbam(4, 2, 3, generator=g), MODULE_SHAPE),
    'se': _layer(lambda g: attention.SqueezeExcitation(4, 2, generator=g), MODULE_SHAPE),
}


def toy_spec():
    return backbones.ArchSpec('resnet-basic', [(4, 1, 1), (8, 1, 2)],
                              {'type': 'triplet', 'k': 3}, 3, (3, 6, 6))


def _toy_network(generator):
    seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=generator))
    net = backbones.build(toy_spec(), seed=seed)
    net.train()
    labels = torch.randint(0, 3, (2,), generator=generator)
    return Case([separated((2, 3, 6, 6), generator)], lambda t: nn_ops.cross_entropy(net(t[0]), labels), net)


END2END_CASES = {
    'resnet_basic_triplet': _toy_network,
}

CASES = {'ops': OP_CASES, 'attention': ATTENTION_CASES, 'end2end': END2END_CASES}


def _projected(case, projection_generator):
    """Wraps the case forward into a scalar root."""
    cache = {}

    def scalar(tensors):
        out = case.forward(tensors)
        if out.shape == (1, 1, 1, 1):
            return out
        if 'weights' not in cache:
            cache['weights'] = Tensor4(uniform(out.shape, projection_generator))
        return tensor_core.sum_all(tensor_core.mul(out, cache['weights']))
    return scalar


def analytic_gradients(case, scalar):
    leaves = [Tensor4(array, requires_grad=True) for array in case.inputs]
    with Tape() as tape:
        root = scalar(leaves)
        tensor_core.backward(root, leaves)
    grads = [leaf.grad.reshape(-1) for leaf in leaves]
    if case.module is not None:
        tape.write_parameter_grads(case.module)
        grads += [param.grad.reshape(-1) for param in case.module.parameters()]
    return torch.cat(grads)


def numerical_gradients(case, scalar, step):
    arrays = list(case.inputs)
    if case.module is not None:
        arrays += [param.data for param in case.module.parameters()]

    def value():
        return scalar([Tensor4(array) for array in case.inputs]).item()

    grads = []
    for array in arrays:
        flat = array.view(-1)
        grad = torch.zeros(flat.numel(), dtype=DTYPE)
        for i in range(flat.numel()):
            original = float(flat[i])
            flat[i] = original + step
            plus = value()
            flat[i] = original - step
            minus = value()
            flat[i] = original
            grad[i] = (plus - minus) / (2.0 * step)
        grads.append(grad)
    return torch.cat(grads)


def relative_error(analytic, numerical):
    scale = max(float(analytic.abs().max()), float(numerical.abs().max()), 1e-10)
    return float((analytic - numerical).abs().max()) / scale


def check_case(build, settings, seed):
    generator = torch.Generator().manual_seed(seed)
    case = build(generator)
    scalar = _projected(case, torch.Generator().manual_seed(seed + 7919))
    analytic = analytic_gradients(case, scalar)
    numerical = numerical_gradients(case, scalar, settings.step)
    return relative_error(analytic, numerical)


def run_scope(scope, instances=20, seed=0, names=None) -> List[GradCheckResult]:
    """Checks every case of a scope; the ops scope covers the whole op registry."""
    settings = SETTINGS[scope]
    cases = CASES[scope]
    if scope == 'ops':
        names = sorted(tensor_core.Function.registry) if names is None else names
    else:
        names = sorted(cases) if names is None else names
    results = []
    for name in names:
        build = cases.get(name)
        if build is None:
            logging.warning('No gradient case for %s', name)
            results.append(GradCheckResult(scope, name, 0, float('inf'), settings.tolerance, False))
            continue
        worst = max(check_case(build, settings, seed * 10_000 + i) for i in range(instances))
        passed = worst < settings.tolerance
        logging.info('%-10s %-22s max rel error %.3e %s', scope, name, worst, 'ok' if passed else 'FAILED')
        results.append(GradCheckResult(scope, name, instances, worst, settings.tolerance, passed))
    return results


def run(scopes=SCOPES, instances=20, seed=0) -> List[GradCheckResult]:
    results = []
    for scope in scopes:
        results.extend(run_scope(scope, instances, seed))
    return results


def report_text(results):
    lines = ['%-10s %-22s %9s %14s %10s %s' % ('scope', 'name', 'instances', 'max_rel_error', 'tolerance',
                                               'status')]
    for r in results:
        lines.append('%-10s %-22s %9d %14.3e %10.0e %s' % (r.scope, r.name, r.instances, r.max_rel_error,
                                                          r.tolerance, 'pass' if r.passed else 'FAIL'))
    return '\n'.join(lines) + '\n'


def verify(results):
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationError('gradient check failed for: %s' % ', '.join(failed))

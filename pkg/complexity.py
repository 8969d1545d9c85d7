# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Parameter and multiply-accumulate accounting for attention backbones."""

import dataclasses
import json
from typing import Dict, List

import numpy as np

from attention import AttentionGate, Cbam, ROTATED_BRANCHES, SqueezeExcitation, TripletAttention
from backbones import BasicBlock, Bottleneck, Network, PlainBlock, Projection
from common import ConfigurationError, Mechanism, parse_enum
from nn_ops import BatchNorm2d, Conv2d, MaxPool2d, Mlp2, PadShortcut

RESNET50_BLOCK_CHANNELS = (256,) * 3 + (512,) * 4 + (1024,) * 6 + (2048,) * 3
# BAM sits at the three stage transitions
BAM_PLACEMENT_CHANNELS = (256, 512, 1024)

DEFAULT_KERNEL = {
    Mechanism.SE: 7,
    Mechanism.CBAM: 7,
    Mechanism.BAM: 3,
    Mechanism.GC: 7,
    Mechanism.TRIPLET: 7,
}

# batch norm affine values carried by one module
MODULE_BATCHNORM_PARAMS = {
    Mechanism.CBAM: 2,
    Mechanism.TRIPLET: 6,
}

# published ResNet-50 overheads, in parameters
REFERENCE_OVERHEAD = {
    Mechanism.SE: 2_514_000,
    Mechanism.CBAM: 2_532_000,
    Mechanism.BAM: 358_000,
    Mechanism.GC: 2_548_000,
    Mechanism.TRIPLET: 4_800,
}

FLOP_CONVENTION = ('1 MAC = 1 FLOP; macs counts conv and linear multiply-accumulates per sample, '
                   'elementwise_ops counts one op per element read by pooling, normalization, '
                   'activation, gating and residual additions')


def formula_params(mechanism, channels, r=16, k=None) -> int:
    """Closed-form learnable parameter count of one attention module."""
    mechanism = parse_enum(Mechanism, mechanism, 'mechanism')
    k = DEFAULT_KERNEL[mechanism] if k is None else k
    if k < 1 or k % 2 == 0:
        raise ConfigurationError('kernel size must be odd and positive, got %r' % (k,))
    if mechanism == Mechanism.TRIPLET:
        return 6 * k * k
    if r < 1 or channels % r:
        raise ConfigurationError('reduction ratio %r must divide channel count %r' % (r, channels))
    c = channels
    if mechanism == Mechanism.SE:
        return 2 * c * c // r
    if mechanism == Mechanism.CBAM:
        return 2 * c * c // r + 2 * k * k
    if mechanism == Mechanism.BAM:
        return (c // r) * (3 * c + 2 * k * k * (c // r) + 1)
    return 2 * c * c // r + c


def triplet_params(k, gates=3):
    return 2 * k * k * gates


def resnet50_overhead(mechanism, r=16, k=None, include_batchnorm=False) -> int:
    """Parameters one mechanism adds to ResNet-50 (16 bottlenecks, or 3 BAM sites)."""
    mechanism = parse_enum(Mechanism, mechanism, 'mechanism')
    placements = BAM_PLACEMENT_CHANNELS if mechanism == Mechanism.BAM else RESNET50_BLOCK_CHANNELS
    total = sum(formula_params(mechanism, c, r, k) for c in placements)
    if include_batchnorm:
        total += MODULE_BATCHNORM_PARAMS.get(mechanism, 0) * len(placements)
    return total


def overhead_table(r=16):
    """ResNet-50 overhead per mechanism next to the published figure."""
    rows = []
    for mechanism in Mechanism:
        conv_only = resnet50_overhead(mechanism, r)
        with_bn = resnet50_overhead(mechanism, r, include_batchnorm=True)
        reference = REFERENCE_OVERHEAD[mechanism]
        rows.append({
            'mechanism': mechanism.value,
            'k': DEFAULT_KERNEL[mechanism],
            'overhead_conv_only': conv_only,
            'overhead_with_bn': with_bn,
            'reference': reference,
            'delta_pct': 100.0 * (with_bn - reference) / reference,
        })
    return rows


@dataclasses.dataclass
class OpCount:
    macs: int = 0
    elementwise: int = 0

    def __add__(self, other):
        return OpCount(self.macs + other.macs, self.elementwise + other.elementwise)


def _numel(shape):
    return int(np.prod(shape))


def _conv_ops(conv: Conv2d, shape):
    out = conv.output_shape(shape)
    macs = conv.in_channels * conv.kernel_size * conv.kernel_size * _numel(out)
    bias = _numel(out) if conv.bias is not None else 0
    return OpCount(macs, bias), out


def _gate_ops(gate: AttentionGate, shape):
    """Gate on a (C0, D1, D2) tensor, excluding the multiply that applies it."""
    _, d1, d2 = shape
    ops, _ = _conv_ops(gate.conv, (2, d1, d2))
    # z-pool reads every element twice (max and mean), then batch norm and sigmoid
    return ops + OpCount(0, 2 * _numel(shape) + 2 * d1 * d2)


def _mlp_ops(mlp: Mlp2):
    hidden = mlp.channels // mlp.reduction
    return OpCount(2 * mlp.channels * hidden, hidden)


def attention_ops(module, shape) -> OpCount:
    c, h, w = shape
    size = c * h * w
    if isinstance(module, TripletAttention):
        ops = OpCount()
        branches = 0
        for attr, perm, _ in ROTATED_BRANCHES:
            gate = getattr(module, attr)
            if gate is not None:
                permuted = tuple(shape[axis - 1] for axis in perm)
                ops = ops + _gate_ops(gate, permuted) + OpCount(0, size)
                branches += 1
        if module.gate_hw is not None:
            ops = ops + _gate_ops(module.gate_hw, shape) + OpCount(0, size)
            branches += 1
        return ops + OpCount(0, branches * size)
    if isinstance(module, Cbam):
        mlp = _mlp_ops(module.mlp)
        channel = mlp + mlp + OpCount(0, 2 * size + 2 * c)
        return channel + OpCount(0, size) + _gate_ops(module.spatial, shape) + OpCount(0, size)
    if isinstance(module, SqueezeExcitation):
        return _mlp_ops(module.mlp) + OpCount(0, size + c + size)
    raise ConfigurationError('no operation count for %s' % type(module).__name__)


def _block_ops(block, shape, name, attention_rows):
    ops = OpCount()
    if isinstance(block, PlainBlock):
        convs = [(block.conv, block.bn)]
    elif isinstance(block, BasicBlock):
        convs = [(block.conv1, block.bn1), (block.conv2, block.bn2)]
    elif isinstance(block, Bottleneck):
        convs = [(block.conv1, block.bn1), (block.conv2, block.bn2), (block.conv3, block.bn3)]
    else:
        raise ConfigurationError('no operation count for %s' % type(block).__name__)

    out = shape
    for index, (conv, _) in enumerate(convs):
        conv_ops, out = _conv_ops(conv, out)
        ops = ops + conv_ops + OpCount(0, _numel(out))
        if index < len(convs) - 1:
            ops = ops + OpCount(0, _numel(out))
    if block.attention is not None:
        module_ops = attention_ops(block.attention, out)
        attention_rows[name + '.attention'] = (out, module_ops)
        ops = ops + module_ops
    if not isinstance(block, PlainBlock):
        if isinstance(block.shortcut, Projection):
            shortcut_ops, _ = _conv_ops(block.shortcut.conv, shape)
            ops = ops + shortcut_ops + OpCount(0, _numel(out))
        elif isinstance(block.shortcut, PadShortcut):
            ops = ops + OpCount(0, _numel(block.shortcut.output_shape(shape)))
        ops = ops + OpCount(0, _numel(out))
    return ops + OpCount(0, _numel(out)), out


def profile(net: Network, input_shape=None):
    """Returns (network OpCount, {attention name: (input shape, OpCount)})."""
    shape = tuple(net.spec.input_shape if input_shape is None else input_shape)
    attention_rows = {}
    ops, shape = _conv_ops(net.stem_conv, shape)
    ops = ops + OpCount(0, 2 * _numel(shape))
    if net.stem_pool is not None:
        pool: MaxPool2d = net.stem_pool
        shape = pool.output_shape(shape)
        ops = ops + OpCount(0, _numel(shape) * pool.kernel_size * pool.kernel_size)
    for name, block in net.named_blocks():
        block_ops, shape = _block_ops(block, shape, name, attention_rows)
        ops = ops + block_ops
    ops = ops + OpCount(0, _numel(shape))
    head_ops, _ = _conv_ops(net.head, (shape[0], 1, 1))
    return ops + head_ops, attention_rows


def estimate_macs(net: Network, input_shape=None) -> int:
    return profile(net, input_shape)[0].macs


def attention_params(module):
    """(conv-only, with batch norm) learnable parameter counts of a module."""
    conv_only = 0
    with_bn = 0
    for sub in module.modules():
        own = sum(p.numel() for p in sub.parameters(recurse=False))
        with_bn += own
        if isinstance(sub, (Conv2d, Mlp2)):
            conv_only += own
        elif not isinstance(sub, BatchNorm2d) and own:
            raise ConfigurationError('unexpected parameters in %s' % type(sub).__name__)
    return conv_only, with_bn


def module_formula(module, channels):
    if isinstance(module, TripletAttention):
        return triplet_params(module.config.k, module.config.gate_count)
    if isinstance(module, Cbam):
        return formula_params(Mechanism.CBAM, channels, module.mlp.reduction, module.spatial.kernel_size)
    if isinstance(module, SqueezeExcitation):
        return formula_params(Mechanism.SE, channels, module.mlp.reduction)
    raise ConfigurationError('no formula for %s' % type(module).__name__)


def _mechanism_name(module):
    if isinstance(module, TripletAttention):
        return 'triplet'
    return 'cbam' if isinstance(module, Cbam) else 'se'


@dataclasses.dataclass(frozen=True)
class ModuleRow:
    name: str
    mechanism: str
    channels: int
    formula_params: int
    exact_params_conv_only: int
    exact_params_with_bn: int
    macs: int
    elementwise_ops: int


_COLUMNS = ('formula_params', 'exact_params_conv_only', 'exact_params_with_bn', 'macs', 'elementwise_ops')


@dataclasses.dataclass
class ComplexityReport:
    rows: List[ModuleRow]
    assumptions: Dict
    network: Dict

    @property
    def totals(self):
        return {column: sum(getattr(row, column) for row in self.rows) for column in _COLUMNS}

    def to_dict(self):
        return {
            'rows': [dataclasses.asdict(row) for row in self.rows],
            'totals': self.totals,
            'network': self.network,
            'assumptions': self.assumptions,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        header = ('module', 'mechanism', 'C') + _COLUMNS
        body = [(row.name, row.mechanism, str(row.channels)) + tuple(str(getattr(row, c)) for c in _COLUMNS)
                for row in self.rows]
        body.append(('total', '', '') + tuple(str(self.totals[c]) for c in _COLUMNS))
        widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
        lines = ['  '.join(cell.ljust(widths[i]) if i < 2 else cell.rjust(widths[i])
                           for i, cell in enumerate(line)) for line in [header] + body]
        lines.append('')
        for key in sorted(self.network):
            lines.append('%s: %s' % (key, self.network[key]))
        for key in sorted(self.assumptions):
            lines.append('assumption %s: %s' % (key, self.assumptions[key]))
        return '\n'.join(lines) + '\n'


def exact_count(net: Network, input_shape=None) -> ComplexityReport:
    """Walks the registry; one row per attention module."""
    shape = tuple(net.spec.input_shape if input_shape is None else input_shape)
    ops, attention_shapes = profile(net, shape)
    rows = []
    for name, module in net.attention_modules():
        module_shape, module_ops = attention_shapes[name]
        conv_only, with_bn = attention_params(module)
        rows.append(ModuleRow(name=name,
                              mechanism=_mechanism_name(module),
                              channels=module_shape[0],
                              formula_params=module_formula(module, module_shape[0]),
                              exact_params_conv_only=conv_only,
                              exact_params_with_bn=with_bn,
                              macs=module_ops.macs,
                              elementwise_ops=module_ops.elementwise))
    attention = net.spec.attention
    assumptions = {
        'r': attention.r,
        'k': attention.k,
        'flop_convention': FLOP_CONVENTION,
        'conv_only': 'conv kernels and MLP matrices',
        'with_bn': 'conv_only plus batch norm affine (gamma, beta)',
        'bam_placements': list(BAM_PLACEMENT_CHANNELS),
    }
    network = {
        'input_shape': list(shape),
        'total_params': sum(p.numel() for p in net.parameters()),
        'total_macs': ops.macs,
        'total_elementwise_ops': ops.elementwise,
    }
    return ComplexityReport(rows, assumptions, network)


def overhead_text(rows):
    lines = ['%-10s %4s %18s %16s %12s %8s' % ('mechanism', 'k', 'overhead_conv_only', 'overhead_with_bn',
                                               'reference', 'delta%')]
    for row in rows:
        lines.append('%-10s %4d %18d %16d %12d %+8.2f' % (row['mechanism'], row['k'], row['overhead_conv_only'],
                                                          row['overhead_with_bn'], row['reference'],
                                                          row['delta_pct']))
    return '\n'.join(lines) + '\n'

# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Rank-4 tensors with deterministic reverse-mode differentiation.

Every differentiable operation is a `Function` subclass with explicit
`forward(ctx, ...)` and `backward(ctx, grad)` rules. Applying a function while
a `Tape` is active and at least one input is tracked appends a record to the
tape; `backward` replays the records in strict reverse order.

Array storage is float64 torch tensors. torch's own autograd is never engaged:
none of the arrays handled here require torch gradients.
"""

import collections
import contextvars
import dataclasses
import itertools
import numbers
import weakref
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from common import ContractError, DimensionError

DTYPE = torch.float64

_ACTIVE_TAPE = contextvars.ContextVar('active_tape', default=None)

Record = collections.namedtuple('Record', ['op', 'ctx', 'input_ids', 'input_shapes', 'output_id'])


# fill specifications for tensor_new
@dataclasses.dataclass(frozen=True)
class Zeros:
    pass


@dataclasses.dataclass(frozen=True)
class Constant:
    value: float


@dataclasses.dataclass(frozen=True)
class SeededUniform:
    low: float
    high: float
    seed: int


@dataclasses.dataclass(frozen=True)
class Values:
    values: Sequence[float]


def _check_shape(shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise DimensionError('expected a 4-tuple (N, C, H, W), got %r' % (shape,))
    if any(d < 1 for d in shape):
        raise DimensionError('all shape entries must be >= 1, got %r' % (shape,))
    return shape


class Tensor4:
    """Dense (N, C, H, W) float64 tensor, optionally tracked by a tape."""

    __slots__ = ('data', 'grad', 'requires_grad', 'node_id', 'name', '_tape', '__weakref__')

    def __init__(self, data, requires_grad=False, name=None):
        if not isinstance(data, torch.Tensor):
            data = torch.from_numpy(np.array(data, dtype=np.float64))
        _check_shape(data.shape)
        if data.dtype != DTYPE:
            data = data.to(DTYPE)
        if not data.is_contiguous():
            data = data.contiguous()
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self.name = name
        self._tape = None

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.data.shape)

    def numel(self):
        return self.data.numel()

    def numpy(self):
        return self.data.detach().cpu().numpy().copy()

    def item(self):
        if self.numel() != 1:
            raise ContractError('item() needs a single-element tensor, got shape %r' % (self.shape,))
        return float(self.data.reshape(-1)[0])

    def on_tape(self, tape):
        return self._tape is tape and self.node_id is not None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        label = '' if self.name is None else ' name=%r' % self.name
        return 'Tensor4(shape=%r, requires_grad=%s%s)' % (self.shape, self.requires_grad, label)


def tensor_new(shape, fill=Zeros(), requires_grad=False, name=None) -> Tensor4:
    """Creates a tensor with an exact, reproducible fill."""
    shape = _check_shape(shape)
    if isinstance(fill, Zeros):
        data = torch.zeros(shape, dtype=DTYPE)
    elif isinstance(fill, Constant):
        data = torch.full(shape, float(fill.value), dtype=DTYPE)
    elif isinstance(fill, SeededUniform):
        generator = torch.Generator().manual_seed(int(fill.seed))
        data = torch.rand(shape, generator=generator, dtype=DTYPE) * (fill.high - fill.low) + fill.low
    elif isinstance(fill, Values):
        values = np.asarray(fill.values, dtype=np.float64).reshape(-1)
        if values.size != int(np.prod(shape)):
            raise DimensionError('%d values cannot fill shape %r' % (values.size, shape))
        data = torch.from_numpy(values.copy()).reshape(shape)
    else:
        raise ContractError('unknown fill specification %r' % (fill,))
    return Tensor4(data, requires_grad=requires_grad, name=name)


class Context:
    """Scratch space handed from a forward rule to its backward rule."""

    def save_for_backward(self, *tensors):
        self.saved_tensors = tensors


class Tape:
    """Ordered record of operations; active within a `with` block."""

    def __init__(self):
        self.records = []
        self._ids = itertools.count()
        self._tensors = {}
        self._parameter_leaves = {}
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self):
        return len(self.records)

    def _assign(self, tensor):
        tensor.node_id = next(self._ids)
        tensor._tape = self
        self._tensors[tensor.node_id] = weakref.ref(tensor)
        return tensor.node_id

    def track(self, tensor):
        """Returns the node id of a tracked input, or None for constants."""
        if tensor.on_tape(self):
            return tensor.node_id
        if tensor.requires_grad:
            return self._assign(tensor)
        return None

    def record(self, op, ctx, inputs, input_ids, output):
        self._assign(output)
        output.requires_grad = True
        self.records.append(Record(op, ctx, tuple(input_ids), tuple(t.shape for t in inputs), output.node_id))

    def parameter_leaf(self, param, shape):
        entry = self._parameter_leaves.get(id(param))
        if entry is None:
            leaf = Tensor4(param.detach().view(shape), requires_grad=True)
            self._parameter_leaves[id(param)] = (param, leaf)
            return leaf
        return entry[1]

    def write_parameter_grads(self, module):
        """Copies leaf gradients into `param.grad`; untouched parameters get zeros."""
        for param in module.parameters():
            entry = self._parameter_leaves.get(id(param))
            if entry is None or entry[1].grad is None:
                param.grad = torch.zeros_like(param)
            else:
                param.grad = entry[1].grad.reshape(param.shape).clone()

    def tensor(self, node_id) -> Optional[Tensor4]:
        ref = self._tensors.get(node_id)
        return None if ref is None else ref()


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def parameter(param, shape=None) -> Tensor4:
    """Views a torch parameter as a Tensor4, tracked when a tape is active.

    Repeated uses of one parameter under the same tape share a single leaf so
    gradients from every use accumulate.
    """
    shape = tuple(param.shape) if shape is None else tuple(shape)
    tape = _ACTIVE_TAPE.get()
    if tape is None or param.device.type == 'meta':
        return Tensor4(param.detach().view(shape))
    return tape.parameter_leaf(param, shape)


class Function:
    """Base class of differentiable operations.

    Subclasses set `name` and implement static `forward(ctx, *args)` returning
    a torch tensor and `backward(ctx, grad)` returning one gradient (or None)
    per Tensor4 argument, in argument order.
    """

    registry: Dict[str, type] = {}
    name = None

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.name is None:
            raise TypeError('%s must define a name' % cls.__name__)
        Function.registry[cls.name] = cls

    @staticmethod
    def forward(ctx, *args):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *args):
        tensors = [a for a in args if isinstance(a, Tensor4)]
        ctx = Context()
        raw = [a.data if isinstance(a, Tensor4) else a for a in args]
        output = Tensor4(cls.forward(ctx, *raw))
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            input_ids = [tape.track(t) for t in tensors]
            if any(node_id is not None for node_id in input_ids):
                tape.record(cls, ctx, tensors, input_ids, output)
        return output


def backward(root: Tensor4, inputs: Sequence[Tensor4] = ()) -> Dict[int, torch.Tensor]:
    """Differentiates a scalar root and returns node id -> gradient.

    Gradients are accumulated into `.grad` of every tracked tensor still alive.
    Tensors listed in `inputs` that the root does not depend on receive zeros.
    """
    if root.shape != (1, 1, 1, 1):
        raise ContractError('backward root must have shape (1, 1, 1, 1), got %r' % (root.shape,))
    tape = root._tape
    if tape is None or root.node_id is None:
        raise ContractError('backward root is not on a tape')

    grads = {root.node_id: torch.ones(root.shape, dtype=DTYPE)}
    for record in reversed(tape.records):
        grad_out = grads.get(record.output_id)
        if grad_out is None:
            continue
        input_grads = record.op.backward(record.ctx, grad_out)
        if not isinstance(input_grads, tuple):
            input_grads = (input_grads,)
        if len(input_grads) != len(record.input_ids):
            raise ContractError('backward rule of %s returned %d gradients for %d inputs'
                                % (record.op.name, len(input_grads), len(record.input_ids)))
        for node_id, shape, grad in zip(record.input_ids, record.input_shapes, input_grads):
            if node_id is None or grad is None:
                continue
            if tuple(grad.shape) != shape:
                raise ContractError('backward rule of %s produced gradient of shape %r for input %r'
                                    % (record.op.name, tuple(grad.shape), shape))
            grads[node_id] = grad if node_id not in grads else grads[node_id] + grad

    for node_id, grad in grads.items():
        tensor = tape.tensor(node_id)
        if tensor is not None and tensor.requires_grad:
            tensor.grad = grad.clone() if tensor.grad is None else tensor.grad + grad
    for tensor in inputs:
        if tensor.grad is None:
            tensor.grad = torch.zeros_like(tensor.data)
    return grads


def _unbroadcast(grad, shape):
    axes = tuple(axis for axis in range(4) if shape[axis] == 1 and grad.shape[axis] != 1)
    if axes:
        grad = grad.sum(dim=axes, keepdim=True)
    return grad


def _check_broadcast(a_shape, b_shape):
    for axis, (da, db) in enumerate(zip(a_shape, b_shape)):
        if db != da and db != 1:
            raise DimensionError('shape %r does not broadcast to %r (axis %d)' % (b_shape, a_shape, axis))


def _constant_like(value):
    return Tensor4(torch.full((1, 1, 1, 1), float(value), dtype=DTYPE))


class Add(Function):
    name = 'add'

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a.shape, b.shape)
        ctx.b_shape = b.shape
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return grad, _unbroadcast(grad, ctx.b_shape)


class Sub(Function):
    name = 'sub'

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a.shape, b.shape)
        ctx.b_shape = b.shape
        return a - b

    @staticmethod
    def backward(ctx, grad):
        return grad, -_unbroadcast(grad, ctx.b_shape)


class Neg(Function):
    name = 'neg'

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return -grad,


class Concat(Function):
    """Concatenation along the channel axis."""
    name = 'concat'

    @staticmethod
    def forward(ctx, *parts):
        heads = {(p.shape[0], p.shape[2], p.shape[3]) for p in parts}
        if len(heads) != 1:
            raise DimensionError('concat needs equal (N, H, W), got %r' % ([tuple(p.shape) for p in parts],))
        ctx.sizes = [p.shape[1] for p in parts]
        return torch.cat(parts, dim=1)

    @staticmethod
    def backward(ctx, grad):
        return tuple(g.contiguous() for g in torch.split(grad, ctx.sizes, dim=1))


class Mul(Function):
    name = 'mul'

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a.shape, b.shape)
        ctx.save_for_backward(a, b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved_tensors
        return grad * b, _unbroadcast(grad * a, b.shape)


class Scale(Function):
    name = 'scale'

    @staticmethod
    def forward(ctx, a, factor):
        ctx.factor = float(factor)
        return a * ctx.factor

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.factor,


class Permute(Function):
    name = 'permute'

    @staticmethod
    def forward(ctx, x, perm):
        ctx.dims = (0,) + tuple(perm)
        return x.permute(ctx.dims).contiguous()

    @staticmethod
    def backward(ctx, grad):
        inverse = [0] * 4
        for position, axis in enumerate(ctx.dims):
            inverse[axis] = position
        return grad.permute(inverse).contiguous(),


class Flip(Function):
    name = 'flip'

    @staticmethod
    def forward(ctx, x, axis):
        ctx.axis = axis
        return torch.flip(x, dims=(axis,))

    @staticmethod
    def backward(ctx, grad):
        return torch.flip(grad, dims=(ctx.axis,)),


class Sum(Function):
    name = 'sum'

    @staticmethod
    def forward(ctx, x):
        ctx.shape = x.shape
        return x.sum().reshape(1, 1, 1, 1)

    @staticmethod
    def backward(ctx, grad):
        return grad.expand(ctx.shape).clone(),


class Select(Function):
    name = 'select'

    @staticmethod
    def forward(ctx, x, index):
        ctx.shape = x.shape
        ctx.index = index
        return x[index].reshape(1, 1, 1, 1).clone()

    @staticmethod
    def backward(ctx, grad):
        out = torch.zeros(ctx.shape, dtype=DTYPE)
        out[ctx.index] = grad.reshape(())
        return out,


def add(a: Tensor4, b) -> Tensor4:
    """a + b, where b is a tensor broadcastable to a or a scalar."""
    if isinstance(b, numbers.Real):
        b = _constant_like(b)
    return Add.apply(a, b)


def mul(a: Tensor4, b) -> Tensor4:
    """a ⊙ b, where b is a tensor broadcastable to a or a scalar."""
    if isinstance(b, numbers.Real):
        return Scale.apply(a, b)
    return Mul.apply(a, b)


def sub(a: Tensor4, b) -> Tensor4:
    if isinstance(b, numbers.Real):
        b = _constant_like(b)
    return Sub.apply(a, b)


def neg(a: Tensor4) -> Tensor4:
    return Neg.apply(a)


def concat(parts: Sequence[Tensor4]) -> Tensor4:
    if not parts:
        raise ContractError('concat needs at least one tensor')
    return Concat.apply(*parts)


def broadcast_mul(a: Tensor4, b: Tensor4) -> Tensor4:
    return Mul.apply(a, b)


def scale(a: Tensor4, factor: float) -> Tensor4:
    return Scale.apply(a, factor)


def validate_permutation(perm):
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != [1, 2, 3]:
        raise ContractError('permutation must reorder axes (1, 2, 3), got %r' % (perm,))
    return perm


def inverse_permutation(perm):
    perm = validate_permutation(perm)
    inverse = [0, 0, 0]
    for position, axis in enumerate(perm):
        inverse[axis - 1] = position + 1
    return tuple(inverse)


def permute(x: Tensor4, perm) -> Tensor4:
    """Reorders the non-batch axes; output axis i+1 is input axis perm[i]."""
    return Permute.apply(x, validate_permutation(perm))


def flip(x: Tensor4, axis: int) -> Tensor4:
    if axis not in (1, 2, 3):
        raise ContractError('flip axis must be 1, 2 or 3, got %r' % (axis,))
    return Flip.apply(x, axis)


def sum_all(x: Tensor4) -> Tensor4:
    return Sum.apply(x)


def select(x: Tensor4, index) -> Tensor4:
    """Picks one element into a (1, 1, 1, 1) tensor."""
    index = tuple(int(i) for i in index)
    if len(index) != 4 or any(not 0 <= i < d for i, d in zip(index, x.shape)):
        raise ContractError('index %r out of range for shape %r' % (index, x.shape))
    return Select.apply(x, index)

"""
A small reverse-mode autodiff engine over numpy float64 arrays.

Operations run eagerly. Inside a `Tape` context every primitive whose
inputs need gradients appends one record; `backward` replays the records
in reverse. Without an active tape nothing is recorded, which is the
inference path used while coding.

Reductions go through numpy's own loops (einsum rather than BLAS for
matmul) so results do not depend on how many threads are running.
"""

import json
import logging
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .utilities import FormatError, IntegrityError, content_hash

LOG = logging.getLogger(__name__)

ARCHIVE_MAGIC = b"HAPCKPT\x00"
ARCHIVE_VERSION = 1
HASH_SIZE = 32

_local = threading.local()


##
# Tensor and tape
##


class Tensor:
    """
    A float64 array, optionally tracked for gradients.
    """

    # ndarray operators defer to the reflected Tensor methods.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    def __repr__(self):
        label = " {}".format(self.name) if self.name else ""
        return "<Tensor{} shape={} requires_grad={}>".format(
            label, self.shape, self.requires_grad
        )

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """
    Ordered record of primitive applications, used as a context manager.

    Tapes are per thread: entering one makes it the active tape of the
    current thread only.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out, inputs, backward_fn):
        self.records.append((out, inputs, backward_fn))


def active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data, inputs, backward_fn):
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def unbroadcast(grad, shape):
    """
    Sum a broadcast gradient back down to `shape`.
    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError("{}: shapes {} and {} do not broadcast".format(op, a.shape, b.shape))


##
# Primitives
##


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def matmul(a, b):
    """
    (..., n, k) @ (..., k, m); leading axes broadcast.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError("matmul: shapes {} and {} do not align".format(a.shape, b.shape))

    def backward(g):
        grad_a = np.einsum("...nm,...km->...nk", g, b.data)
        grad_b = np.einsum("...nk,...nm->...km", a.data, g)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return _result(np.einsum("...nk,...km->...nm", a.data, b.data), (a, b), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a):
    a = as_tensor(a)
    sigmoid = np.exp(-np.logaddexp(0.0, -a.data))
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * sigmoid,))


def log1mexp(a):
    """
    log(1 - exp(-a)) for a > 0, accurate at both ends.
    """
    a = as_tensor(a)
    x = a.data
    out = np.where(x < np.log(2.0), np.log(-np.expm1(-x)), np.log1p(-np.exp(-x)))
    return _result(out, (a,), lambda g: (g / np.expm1(x),))


def _axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ValueError("axis {} out of range for {} dimensions".format(axis, ndim))
    return axis % ndim


def softmax(a, axis=-1):
    a = as_tensor(a)
    axis = _axis(axis, a.ndim)
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is not None:
        axis = _axis(axis, a.ndim)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[_axis(axis, a.ndim)]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def gather(a, indices, axis=0):
    """
    Select entries of `a` along `axis` (numpy `take` semantics).
    """
    a = as_tensor(a)
    axis = _axis(axis, a.ndim)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
        raise ValueError("gather: index out of range for axis of size {}".format(a.shape[axis]))

    def backward(g):
        grad = np.zeros(a.shape)
        np.add.at(grad, (slice(None),) * axis + (indices,), g)
        return (grad,)

    return _result(np.take(a.data, indices, axis=axis), (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    axis = _axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ValueError("concat: {}".format(e))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), backward)


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ValueError("broadcast_to: cannot broadcast {} to {}".format(a.shape, shape))
    return _result(out, (a,), lambda g: (unbroadcast(g, a.shape),))


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError("reshape: cannot reshape {} to {}".format(a.shape, shape))
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


##
# Backward pass
##


def backward(tape, loss):
    """
    Populate `.grad` on every tensor the loss depends on.

    Gradients accumulate into existing `.grad` arrays, so several losses can
    be back-propagated before an optimizer step.
    """
    if loss.shape != ():
        raise ValueError("backward needs a scalar loss, got shape {}".format(loss.shape))

    grads = {id(loss): np.ones(())}
    touched = {id(loss): loss}
    for out, inputs, backward_fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for tensor, grad in zip(inputs, backward_fn(g)):
            if not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
                touched[key] = tensor
        touched[id(out)] = out
        out.grad = g if out.grad is None else out.grad + g

    # Whatever is left has no producing record: leaves.
    for key, g in grads.items():
        tensor = touched[key]
        tensor.grad = g if tensor.grad is None else tensor.grad + g


##
# Optimizer
##


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: list = field(default_factory=list)
    second: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        state.first = [np.zeros(p.shape) for p in params]
        state.second = [np.zeros(p.shape) for p in params]
        return state


def adam_step(params, grads, state):
    """
    One bias-corrected Adam update, in place on `params`.

    A missing gradient counts as zero.
    """
    if len(params) != len(state.first) or len(grads) != len(params):
        raise ValueError("Adam state does not match the parameter list.")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for param, grad, m, v in zip(params, grads, state.first, state.second):
        if grad is None:
            grad = np.zeros(param.shape)
        if grad.shape != param.shape:
            raise ValueError(
                "Gradient shape {} does not match parameter {}".format(grad.shape, param.shape)
            )
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = param.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


##
# Archive
##


def save_archive(tensors, config):
    """
    Serialise named arrays plus a JSON config.

    Layout: magic, u32 version, u32 manifest length, manifest, the arrays as
    little-endian float64 in manifest order, SHA-256 of everything between
    magic+version and the hash.
    """
    entries = []
    chunks = []
    for name, value in tensors.items():
        array = np.asarray(value, dtype=np.float64)
        entries.append({"name": name, "shape": list(array.shape)})
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())

    manifest = json.dumps({"config": config, "entries": entries}, sort_keys=True).encode(
        "utf-8"
    )
    body = struct.pack("<I", len(manifest)) + manifest + b"".join(chunks)
    return ARCHIVE_MAGIC + struct.pack("<I", ARCHIVE_VERSION) + body + content_hash(body)


def archive_hash(data):
    """
    The content hash stored at the end of an archive.
    """
    if len(data) < len(ARCHIVE_MAGIC) + 4 + HASH_SIZE:
        raise FormatError("Checkpoint archive is truncated.")
    return bytes(data[-HASH_SIZE:])


def load_archive(data):
    """
    Inverse of save_archive; returns (dict of arrays, config).
    """
    data = bytes(data)
    header = len(ARCHIVE_MAGIC) + 4
    if len(data) < header + 4 + HASH_SIZE or not data.startswith(ARCHIVE_MAGIC):
        raise FormatError("Not a checkpoint archive.")
    (version,) = struct.unpack_from("<I", data, len(ARCHIVE_MAGIC))
    if version != ARCHIVE_VERSION:
        raise FormatError(
            "Checkpoint format version {} is not supported (expected {}).".format(
                version, ARCHIVE_VERSION
            )
        )

    body = data[header:-HASH_SIZE]
    if content_hash(body) != data[-HASH_SIZE:]:
        raise IntegrityError("Checkpoint content hash mismatch.")

    (length,) = struct.unpack_from("<I", body, 0)
    try:
        manifest = json.loads(body[4 : 4 + length].decode("utf-8"))
        entries = manifest["entries"]
        config = manifest["config"]
    except (ValueError, KeyError, TypeError):
        raise FormatError("Checkpoint manifest is malformed.")

    tensors = {}
    offset = 4 + length
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(body):
            raise FormatError("Checkpoint entry '{}' is truncated.".format(entry["name"]))
        tensors[entry["name"]] = np.frombuffer(body[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(body):
        raise FormatError("Checkpoint has trailing bytes after its last entry.")
    return tensors, config

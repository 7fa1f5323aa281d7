# rchc/autodiff.py

"""Dense float64 tensors with reverse-mode differentiation.

Only the primitives the adaptation losses and layers need are provided:
matmul, add, scalar and elementwise multiply, relu, exp, log, softmax, mean,
sum, concatenation along the feature axis, batch normalization and the
weight-normalized linear map. Each primitive records its parents and a
backward closure on the output tensor; `ComputeGraph` orders those records
for a single reverse sweep.
"""

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericInputError

# log() clamps its argument here so one-hot entropies stay finite
LOG_CLAMP = 1e-12

_grad_enabled = contextvars.ContextVar("rchc_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording in the current context."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """A float64 array, optionally tracked for gradients."""

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._op = _op

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

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        ComputeGraph.from_root(self).backward()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scalar_mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(other, scalar_mul(self, -1.0))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by scalars")
        return scalar_mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _wrap(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents, op, backward):
    tracked = _grad_enabled.get() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=tracked, _parents=parents if tracked else (), _op=op)
    if tracked:
        out._backward = backward
    return out


def _accumulate(node, grad):
    if node.requires_grad:
        node.grad += grad


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand_reduced(grad, shape, axis, keepdims):
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


# --- Primitives ---

def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def scalar_mul(a, c):
    a = _wrap(a)
    c = float(c)

    def backward(grad):
        _accumulate(a, grad * c)

    return _result(a.data * c, (a,), "scalar_mul", backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(grad):
        _accumulate(a, grad @ b.data.T)
        _accumulate(b, a.data.T @ grad)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def relu(a):
    a = _wrap(a)
    mask = a.data > 0

    def backward(grad):
        _accumulate(a, grad * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), "relu", backward)


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)

    def backward(grad):
        _accumulate(a, grad * out)

    return _result(out, (a,), "exp", backward)


def log(a):
    a = _wrap(a)
    clamped = np.maximum(a.data, LOG_CLAMP)

    def backward(grad):
        _accumulate(a, np.where(a.data > LOG_CLAMP, grad / clamped, 0.0))

    return _result(np.log(clamped), (a,), "log", backward)


def softmax(logits):
    """Row-wise softmax over a [batch, K] tensor, max-subtracted."""
    logits = _wrap(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ContractError(f"softmax expects [batch, K>=2], got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericInputError("softmax received non-finite logits")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)

    def backward(grad):
        _accumulate(logits, probs * (grad - (grad * probs).sum(axis=1, keepdims=True)))

    return _result(probs, (logits,), "softmax", backward)


def sum(a, axis=None, keepdims=False):
    a = _wrap(a)

    def backward(grad):
        _accumulate(a, _expand_reduced(grad, a.shape, axis, keepdims))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if a.size == 0:
        raise ContractError("mean of an empty tensor")
    count = a.size if axis is None else a.shape[axis]

    def backward(grad):
        _accumulate(a, _expand_reduced(grad, a.shape, axis, keepdims) / count)

    return _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean", backward)


def concat(tensors, axis=1):
    """Concatenate along the feature axis."""
    tensors = tuple(_wrap(t) for t in tensors)
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ContractError(f"concat needs equal batch sizes, got {sorted(rows)}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(grad):
        for t, piece in zip(tensors, np.split(grad, bounds, axis=axis)):
            _accumulate(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward)


def batch_norm(x, gamma, beta, mean=None, var=None, eps=1e-5):
    """Per-feature normalization of a [batch, d] tensor.

    With `mean`/`var` given (evaluation mode) they are treated as constants;
    otherwise biased batch statistics are used and differentiated through.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"batch_norm expects a non-empty [batch, d] tensor, got {x.shape}")
    use_batch = mean is None
    if use_batch:
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std
    n = x.shape[0]

    def backward(grad):
        _accumulate(beta, grad.sum(axis=0))
        _accumulate(gamma, (grad * x_hat).sum(axis=0))
        if not x.requires_grad:
            return
        d_hat = grad * gamma.data
        if use_batch:
            dx = inv_std / n * (n * d_hat - d_hat.sum(axis=0) - x_hat * (d_hat * x_hat).sum(axis=0))
        else:
            dx = d_hat * inv_std
        _accumulate(x, dx)

    return _result(gamma.data * x_hat + beta.data, (x, gamma, beta), "batch_norm", backward)


def weight_norm_linear(x, direction, magnitude, bias):
    """x @ W.T + bias with W[k] = magnitude[k] * direction[k] / ||direction[k]||."""
    x, direction, magnitude, bias = (_wrap(t) for t in (x, direction, magnitude, bias))
    if x.ndim != 2 or direction.ndim != 2 or x.shape[1] != direction.shape[1]:
        raise ContractError(f"weight-normalized linear shape mismatch: {x.shape} vs direction {direction.shape}")
    norms = np.linalg.norm(direction.data, axis=1)
    if np.any(norms == 0.0):
        raise ContractError("weight-normalized direction has a zero row")
    scale = magnitude.data / norms
    weight = scale[:, None] * direction.data

    def backward(grad):
        _accumulate(x, grad @ weight)
        _accumulate(bias, grad.sum(axis=0))
        d_weight = grad.T @ x.data
        projected = (d_weight * direction.data).sum(axis=1)
        _accumulate(magnitude, projected / norms)
        _accumulate(direction, scale[:, None] * (d_weight - (projected / norms**2)[:, None] * direction.data))

    return _result(x.data @ weight.T + bias.data, (x, direction, magnitude, bias), "weight_norm_linear", backward)


# --- Graph ---

@dataclass
class ComputeGraph:
    """Nodes reachable from a root, in topological order (parents first)."""

    root: Tensor
    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(root=root, nodes=order)

    def leaves(self):
        return [n for n in self.nodes if not n._parents and n.requires_grad]

    def backward(self):
        if self.root.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.root.shape}")
        if not self.root.requires_grad:
            raise ContractError("loss does not depend on any tracked tensor")
        for node in self.nodes:
            if node.requires_grad:
                node.grad = np.zeros_like(node.data)
        self.root.grad = np.ones_like(self.root.data)
        for node in reversed(self.nodes):
            if node._backward is not None:
                node._backward(node.grad)


# --- Optimizer ---

def sgd_step(params, grads, velocities, lr, momentum=0.0, weight_decay=0.0):
    """One SGD update over aligned arrays.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

    Returns (new_params, new_velocities); inputs are not modified.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if not len(params) == len(grads) == len(velocities):
        raise ContractError("params, grads and velocities must have equal length")
    new_params, new_velocities = [], []
    for index, (param, grad, velocity) in enumerate(zip(params, grads, velocities)):
        param, grad, velocity = (np.asarray(a, dtype=np.float64) for a in (param, grad, velocity))
        if param.shape != grad.shape or param.shape != velocity.shape:
            raise ContractError(
                f"parameter {index}: shape {param.shape} vs grad {grad.shape} vs velocity {velocity.shape}"
            )
        velocity = momentum * velocity + grad + weight_decay * param
        new_params.append(param - lr * velocity)
        new_velocities.append(velocity)
    return new_params, new_velocities


@dataclass
class ParamGroup:
    name: str
    params: list
    lr: float


class SGD:
    """Momentum SGD over named parameter groups; untracked tensors are skipped."""

    def __init__(self, groups, momentum=0.9, weight_decay=1e-3):
        self.groups = list(groups)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {id(p): np.zeros_like(p.data) for g in self.groups for p in g.params}

    def zero_grad(self):
        for group in self.groups:
            for p in group.params:
                p.grad = None

    def step(self):
        for group in self.groups:
            active = [p for p in group.params if p.requires_grad and p.grad is not None]
            if not active:
                continue
            new_params, new_velocities = sgd_step(
                [p.data for p in active],
                [p.grad for p in active],
                [self._velocity[id(p)] for p in active],
                group.lr,
                self.momentum,
                self.weight_decay,
            )
            for p, data, velocity in zip(active, new_params, new_velocities):
                p.data = data
                self._velocity[id(p)] = velocity

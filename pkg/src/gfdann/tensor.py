"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the GF-DANN graph needs are provided. Every op builds a
node holding its inputs and a closure mapping the upstream gradient to one
gradient per input; ``Tensor.backward`` walks the graph once in reverse
topological order.
"""

from __future__ import annotations

import warnings
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import DimensionError, InvalidBatchError, NumericFloorWarning, ParameterError

__all__ = [
    "Tensor",
    "as_tensor",
    "depthwise_conv3x3",
    "pointwise_conv1x1",
    "batch_norm",
    "batch_norm_relu_cm",
    "grad_reverse",
    "fully_connected",
    "softmax",
    "relu",
    "log",
    "pick",
    "concat",
    "flatten",
    "flatten_cm",
    "permute",
    "depthwise_conv3x3_cm",
    "pointwise_conv1x1_cm",
    "tensor_sum",
    "tensor_mean",
    "gradient_check",
    "LOG_FLOOR",
]

LOG_FLOOR = 1e-12

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; their ``grad``
    accumulates across ``backward`` calls until ``zero_grad`` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            # inference graphs keep no references to their inputs
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _raise_not_scalar(self.shape)
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- graph traversal -------------------------------------------------

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Back-propagate from this node.

        Without ``grad`` the node must hold a single value (seeded with 1).
        """
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                _raise_not_scalar(self.shape)
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"upstream gradient shape {grad.shape} != output shape {self.shape}")

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(self._topological_order()):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor._from_op(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __pow__(self, exponent: float) -> "Tensor":
        exponent = float(exponent)
        x = self

        def backward(g):
            if exponent == 0.0:
                return (np.zeros_like(x.data),)
            return (g * exponent * np.power(x.data, exponent - 1.0),)

        return Tensor._from_op(np.power(x.data, exponent), (x,), backward, "pow")


def _raise_not_scalar(shape):
    raise DimensionError(f"expected a single-element tensor, got shape {shape}")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- reductions and reshaping ---------------------------------------------


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._from_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tensor_mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return Tensor._from_op(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    shape = x.shape
    return Tensor._from_op(
        x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),), "flatten"
    )


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[i, index[i]]`` for every row."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"pick needs [N,C] input and [N] indices, got {x.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise DimensionError(f"index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return Tensor._from_op(x.data[rows, index], (x,), backward, "pick")


# -- nonlinearities --------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return Tensor._from_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with values below ``floor`` clamped (and a warning)."""
    clamped = x.data < floor
    if clamped.any():
        warnings.warn(
            f"{int(clamped.sum())} value(s) clamped to {floor:g} before log", NumericFloorWarning, stacklevel=2
        )
    safe = np.where(clamped, floor, x.data)
    return Tensor._from_op(np.log(safe), (x,), lambda g: (np.where(clamped, 0.0, g / safe),), "log")


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis of an [N, C] tensor."""
    if x.ndim != 2:
        raise DimensionError(f"softmax expects [N, C], got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(s, (x,), backward, "softmax")


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-lam`` backward."""
    if lam < 0:
        raise ParameterError(f"reversal strength must be non-negative, got {lam}")
    scale = -float(lam)
    return Tensor._from_op(x.data, (x,), lambda g: (scale * g,), "grad_reverse")


# -- parameterised layers --------------------------------------------------


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [N, Din] and weight [Dout, Din]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = parents + (bias,)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._from_op(out, parents, backward, "fully_connected")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
        "permute",
    )


def depthwise_conv3x3_cm(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Depthwise 3x3 convolution on channel-major input [C, K, T, N]."""
    if x.ndim != 4:
        raise DimensionError(f"expected [C, K, T, N], got {x.shape}")
    c = x.shape[0]
    if weight.shape != (c, 3, 3):
        raise DimensionError(f"depthwise weight {weight.shape} does not match {c} input channels")
    if bias is not None and bias.shape != (c,):
        raise DimensionError(f"depthwise bias {bias.shape} does not match {c} channels")
    xd = np.ascontiguousarray(x.data)
    out = _kernels.dwconv3x3_forward(xd, weight.data)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out += bias.data[:, None, None, None]
        parents = parents + (bias,)

    def backward(g):
        gx, gw = _kernels.dwconv3x3_backward(np.ascontiguousarray(g), xd, weight.data)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(c, -1).sum(axis=1))
        return grads

    return Tensor._from_op(out, parents, backward, "depthwise_conv3x3")


def pointwise_conv1x1_cm(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution on channel-major input [C, K, T, N]: one GEMM."""
    if x.ndim != 4:
        raise DimensionError(f"expected [C, K, T, N], got {x.shape}")
    cin = x.shape[0]
    if weight.ndim != 2 or weight.shape[1] != cin:
        raise DimensionError(f"pointwise weight {weight.shape} does not match {cin} input channels")
    cout = weight.shape[0]
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"pointwise bias {bias.shape} does not match {cout} output channels")
    x2 = x.data.reshape(cin, -1)
    out = weight.data @ x2
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out += bias.data[:, None]
        parents = parents + (bias,)

    def backward(g):
        g2 = g.reshape(cout, -1)
        grads = [(weight.data.T @ g2).reshape(x.shape), g2 @ x2.T]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return Tensor._from_op(out.reshape((cout,) + x.shape[1:]), parents, backward, "pointwise_conv1x1")


def flatten_cm(x: Tensor) -> Tensor:
    """[C, K, T, N] -> [N, C*K*T], matching ``flatten`` of the [N, C, K, T] view."""
    shape = x.shape
    n = shape[-1]
    return Tensor._from_op(
        np.ascontiguousarray(x.data.reshape(-1, n).T),
        (x,),
        lambda g: (np.ascontiguousarray(g.T).reshape(shape),),
        "flatten",
    )


_TO_CM = (1, 2, 3, 0)
_FROM_CM = (3, 0, 1, 2)


def depthwise_conv3x3(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel 3x3 cross-correlation, stride 1, zero padding 1.

    ``x`` is [N, C, K, T]; ``weight`` is [C, 3, 3]; output keeps the input shape.
    """
    if x.ndim != 4:
        raise DimensionError(f"depthwise_conv3x3 expects [N, C, K, T], got {x.shape}")
    return permute(depthwise_conv3x3_cm(permute(x, _TO_CM), weight, bias), _FROM_CM)


def pointwise_conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Channel-mixing 1x1 convolution: ``out[n,:,k,t] = W @ x[n,:,k,t] + b``."""
    if x.ndim != 4:
        raise DimensionError(f"pointwise_conv1x1 expects [N, C, K, T], got {x.shape}")
    return permute(pointwise_conv1x1_cm(permute(x, _TO_CM), weight, bias), _FROM_CM)


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    channel_axis: int = 1,
) -> Tensor:
    """Per-channel batch normalisation over every axis except ``channel_axis``.

    Works on [N, C], [N, C, K, T] and (with ``channel_axis=0``) channel-major
    [C, K, T, N] input. In training mode the running statistics arrays are
    updated in place (unbiased variance, PyTorch convention).
    """
    if x.ndim not in (2, 4) or not 0 <= channel_axis < x.ndim:
        raise DimensionError(f"batch_norm cannot normalise shape {x.shape} on axis {channel_axis}")
    c = x.shape[channel_axis]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batch_norm parameters do not match {c} channels")
    batch_axis = x.ndim - 1 if channel_axis == 0 else 0
    if training and x.shape[batch_axis] < 2:
        raise InvalidBatchError("batch_norm in training mode needs at least 2 samples")

    # all statistics are computed on a [C, everything-else] view
    moved = np.moveaxis(x.data, channel_axis, 0)
    moved_shape = moved.shape
    x2 = moved.reshape(c, -1)
    count = x2.shape[1]
    gamma = scale.data[:, None]

    def restore(a2: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(np.moveaxis(a2.reshape(moved_shape), 0, channel_axis))

    if training:
        mean = x2.mean(axis=1, keepdims=True)
        xhat = x2 - mean
        var = np.einsum("ij,ij->i", xhat, xhat)[:, None] / count
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat *= inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean[:, 0]
        running_var *= 1.0 - momentum
        running_var += momentum * var[:, 0] * (count / (count - 1))
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)[:, None]
        xhat = (x2 - running_mean[:, None]) * inv_std
    out = xhat * gamma
    out += shift.data[:, None]

    def backward(g):
        g2 = np.moveaxis(g, channel_axis, 0).reshape(c, -1)
        g_sum = g2.sum(axis=1)
        gx_sum = np.einsum("ij,ij->i", g2, xhat)
        if training:
            dx = xhat * (-gx_sum / count)[:, None]
            dx += g2
            dx -= (g_sum / count)[:, None]
            dx *= gamma * inv_std
        else:
            dx = g2 * (gamma * inv_std)
        return restore(dx), gx_sum, g_sum

    return Tensor._from_op(restore(out), (x, scale, shift), backward, "batch_norm")


def batch_norm_relu_cm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """``relu(batch_norm(x))`` fused, for channel-major input [C, ..., N].

    Same values and gradients as composing :func:`batch_norm` (with
    ``channel_axis=0``) and :func:`relu`, with far fewer passes over memory.
    """
    c = x.shape[0]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batch_norm parameters do not match {c} channels")
    if training and x.shape[-1] < 2:
        raise InvalidBatchError("batch_norm in training mode needs at least 2 samples")
    x2 = x.data.reshape(c, -1)
    count = x2.shape[1]
    out, mean, var, inv_std = _kernels.bn_relu_forward(
        x2, scale.data, shift.data, eps, training, running_mean, running_var
    )
    if training:
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))

    def backward(g):
        dx, dgamma, dbeta = _kernels.bn_relu_backward(
            np.ascontiguousarray(g).reshape(c, -1), x2, out, scale.data, mean, inv_std, training
        )
        return dx.reshape(x.shape), dgamma, dbeta

    return Tensor._from_op(out.reshape(x.shape), (x, scale, shift), backward, "batch_norm_relu")


# -- finite-difference validation -------------------------------------------


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    *,
    reference_fn: Optional[Callable[[], float]] = None,
    signs: Optional[Sequence[float]] = None,
    max_entries: Optional[int] = None,
    seed: int = 0,
    mode: str = "entry",
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the graph on every call and return a scalar.
    The numeric side differentiates ``reference_fn`` when given (defaults to
    the value of ``loss_fn``); ``signs`` multiplies each parameter's numeric
    gradient, which lets a graph containing gradient reversal be checked
    against the objective it realises. ``max_entries`` samples that many
    coordinates per parameter instead of all of them.

    ``mode="entry"`` returns the worst per-coordinate error
    ``|a - n| / (|a| + |n|)``. ``mode="joint"`` returns
    ``||a - n|| / (||a|| + ||n||)`` over all checked coordinates of all
    ``params``, which stays meaningful when single coordinates have
    gradients at the round-off level of the difference quotient.
    """
    if mode not in ("entry", "joint"):
        raise ParameterError(f"mode must be 'entry' or 'joint', got {mode!r}")
    if not 1e-7 <= eps <= 1e-4:
        raise ParameterError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    params = list(params)
    if signs is None:
        signs = [1.0] * len(params)
    if len(signs) != len(params):
        raise ParameterError("signs must have one entry per parameter")

    for p in params:
        p.zero_grad()
    out = loss_fn()
    if out.data.size != 1:
        _raise_not_scalar(out.shape)
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    def evaluate() -> float:
        if reference_fn is not None:
            return float(reference_fn())
        return float(loss_fn().data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    all_a, all_n = [], []
    for p, grad, sign in zip(params, analytic, signs):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(coords.size)
        for j, idx in enumerate(coords):
            original = flat[idx]
            flat[idx] = original + eps
            up = evaluate()
            flat[idx] = original - eps
            down = evaluate()
            flat[idx] = original
            numeric[j] = sign * (up - down) / (2.0 * eps)
        a = grad.reshape(-1)[coords]
        if mode == "entry":
            err = np.max(np.abs(a - numeric) / (np.abs(a) + np.abs(numeric) + 1e-12), initial=0.0)
            worst = max(worst, float(err))
        else:
            all_a.append(a)
            all_n.append(numeric)
    if mode == "joint":
        a, numeric = np.concatenate(all_a), np.concatenate(all_n)
        worst = float(np.linalg.norm(a - numeric) / (np.linalg.norm(a) + np.linalg.norm(numeric) + 1e-12))
    return worst

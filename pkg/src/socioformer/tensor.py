"""Dense float64 tensors with reverse-mode automatic differentiation.

The models built on top of this are desk-scale, so the library favors
checkable numerics over raw speed: everything is 64-bit, every operation
validates its output for non-finite values, and gradients are recorded on
an explicit tape that is replayed in reverse by :func:`backward`.

Masked logits use a finite sentinel (:data:`NEG_INF`, the most negative
representable double) instead of a true infinity so that intermediate
arithmetic never produces NaN; :func:`softmax_last` maps the sentinel to an
exact zero weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = float(-np.finfo(np.float64).max)

# Logits at or below this are considered masked (softmax weight exactly 0).
_MASK_THRESHOLD = NEG_INF / 2


class TensorError(Exception):
    """Base class for all tensor-library failures."""


class ShapeError(TensorError):
    """Operand shapes are incompatible with the operation."""


class NumericalError(TensorError):
    """An operation produced NaN/Inf, or numeric preconditions failed."""


class DomainError(TensorError):
    """An input lies outside the mathematical domain of the operation."""


class DegenerateSliceError(NumericalError):
    """A softmax slice was entirely masked (no unmasked key to attend)."""


class NondeterministicFunctionError(TensorError):
    """A function under gradient checking returned differing values."""


_F64_MAX = float(np.finfo(np.float64).max)


def _check_finite(data: np.ndarray, op: str) -> None:
    # NaN propagates through max (mx != mx); +/-inf hit the range test.
    # Two allocation-free reductions instead of isfinite().all().
    if data.size == 0:
        return
    mx = data.max()
    mn = data.min()
    if mx != mx or mn != mn or mx > _F64_MAX or mn < -_F64_MAX:
        raise NumericalError(f"non-finite values produced by '{op}'")


class Tensor:
    """A dense n-dimensional array of float64 with an optional gradient.

    ``data`` is always C-contiguous (row-major) float64. ``grad`` is either
    None or an ndarray of identical shape; it is populated by
    :func:`backward` and accumulates across repeated calls until reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def reset_grad(self) -> None:
        self.grad = None

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn", "op")

    def __init__(self, inputs, output, backward_fn, op):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of operations for one forward pass.

    Operations append themselves while the tape is active (inside a
    ``with Tape() as tape:`` block), in execution order, which is a valid
    topological order. With no active tape, operations run forward-only.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_result(inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn, op: str) -> Tensor:
    _check_finite(out_data, op)
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(out_data)
    out.requires_grad = needs_grad
    out.grad = None
    out.name = None
    if needs_grad:
        tape.nodes.append(_Node(inputs, out, backward_fn, op))
    return out


def custom_op(inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable[[np.ndarray], tuple], op: str = "custom") -> Tensor:
    """Record an operation with a caller-supplied backward rule.

    ``backward_fn`` receives the output gradient and must return one
    gradient array (or None) per input, in order.
    """
    return _make_result(tuple(inputs), np.asarray(out_data, dtype=np.float64), backward_fn, op)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from ``loss``.

    Walks the tape in reverse; repeated calls without resetting gradients
    accumulate.
    """
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss")
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = flowing.get(id(node.output))
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in flowing:
                flowing[key] = flowing[key] + gi
            else:
                flowing[key] = np.asarray(gi, dtype=np.float64)
                holders[key] = inp
    for key, t in holders.items():
        g = np.asarray(flowing[key], dtype=np.float64).reshape(t.shape)
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a: Tensor, b: Tensor, forward, bw_a, bw_b, op: str) -> Tensor:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            out = forward(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward_fn(g):
        ga = _unbroadcast(bw_a(g), a.shape) if a.requires_grad else None
        gb = _unbroadcast(bw_b(g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make_result((a, b), out, backward_fn, op)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda g: g, lambda g: g, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        return _binary(a, b, np.divide, lambda g: g / b.data,
                       lambda g: -g * a.data / (b.data * b.data), "div")


def shift(a: Tensor, c: float) -> Tensor:
    return _make_result((a,), a.data + c, lambda g: (g,), "shift")


def scale(a: Tensor, c: float) -> Tensor:
    return _make_result((a,), a.data * c, lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make_result((a,), out, lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive inputs")
    return _make_result((a,), np.log(a.data), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make_result((a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,), "relu")


def square(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = a.data * a.data
    return _make_result((a,), out, lambda g: (2.0 * g * a.data,), "square")


def clamp_max(a: Tensor, cap: float) -> Tensor:
    below = a.data < cap
    return _make_result((a,), np.minimum(a.data, cap), lambda g: (g * below,), "clamp_max")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    above = a.data > floor
    return _make_result((a,), np.maximum(a.data, floor), lambda g: (g * above,), "clamp_min")


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make_result((a,), out, backward_fn, "sum")


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _make_result((a,), out, backward_fn, "mean")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors; backward follows the standard
    rules ``a.grad += g @ b.T`` and ``b.grad += a.T @ g``."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make_result((a, b), out, backward_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose is defined for rank-2 tensors")
    return _make_result((a,), a.data.T, lambda g: (g.T,), "transpose")


def concat_last(*tensors: Tensor) -> Tensor:
    """Concatenate along the last dimension; all other dims must agree."""
    if len(tensors) < 2:
        raise ShapeError("concat_last needs at least two tensors")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead or t.ndim != tensors[0].ndim:
            raise ShapeError(f"concat_last leading dims differ: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=-1)
    widths = [t.shape[-1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def backward_fn(g):
        pieces = np.split(g, splits, axis=-1)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return _make_result(tuple(tensors), out, backward_fn, "concat_last")


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-2 tensors along axis 0."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat_rows needs at least one tensor")
    cols = tensors[0].shape[-1]
    for t in tensors:
        if t.ndim != 2 or t.shape[-1] != cols:
            raise ShapeError("concat_rows requires rank-2 tensors with equal column counts")
    if len(tensors) == 1:
        t = tensors[0]
        return _make_result((t,), t.data, lambda g: (g,), "concat_rows")
    out = np.concatenate([t.data for t in tensors], axis=0)
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def backward_fn(g):
        pieces = np.split(g, splits, axis=0)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return _make_result(tensors, out, backward_fn, "concat_rows")


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a rank-2 tensor; backward scatter-adds."""
    if a.ndim != 2:
        raise ShapeError("gather_rows requires a rank-2 tensor")
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make_result((a,), out, backward_fn, "gather_rows")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Select a contiguous column range of a rank-2 tensor."""
    if a.ndim != 2:
        raise ShapeError("slice_cols requires a rank-2 tensor")
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"column range [{start}, {stop}) invalid for shape {a.shape}")

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _make_result((a,), a.data[:, start:stop], backward_fn, "slice_cols")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _make_result((a,), out, lambda g: (g.reshape(a.shape),), "reshape")


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is 1 by ``value``; gradient is zero
    through filled positions. ``mask`` entries must be 0 or 1."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if not np.all((m == 0) | (m == 1)):
        raise DomainError("masked_fill mask entries must be 0 or 1")
    try:
        mb = np.broadcast_to(m.astype(bool), x.shape)
    except ValueError as exc:
        raise ShapeError(f"mask shape {m.shape} not broadcastable to {x.shape}") from exc
    out = np.where(mb, value, x.data)
    keep = ~mb

    def backward_fn(g):
        return (g * keep,)

    return _make_result((x,), out, backward_fn, "masked_fill")


def softmax_last(x: Tensor) -> Tensor:
    """Numerically stabilized softmax along the last dimension.

    Entries at the mask sentinel map to exactly 0. A slice whose entries
    are all masked raises :class:`DegenerateSliceError`.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax_last requires a non-empty last dimension")
    xmax = x.data.max(axis=-1, keepdims=True)
    if np.any(xmax <= _MASK_THRESHOLD):
        raise DegenerateSliceError("softmax slice is fully masked")
    e = np.exp(x.data - xmax)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make_result((x,), out, backward_fn, "softmax_last")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to mean 0 / variance 1, then apply an
    affine map. ``eps`` is added to the variance before the square root."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def backward_fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make_result((x, gain, bias), out, backward_fn, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator given."""
    if rate == 0.0 or rng is None:
        return x
    if not 0.0 <= rate < 1.0:
        raise DomainError("dropout rate must lie in [0, 1)")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make_result((x,), x.data * keep, lambda g: (g * keep,), "dropout")


def kl_diag_gaussians(mu_q: Tensor, sigma_q: Tensor, mu_p: Tensor, sigma_p: Tensor) -> Tensor:
    """KL(N(mu_q, diag sigma_q^2) || N(mu_p, diag sigma_p^2)) as a scalar.

    Composed from primitive ops, so it is differentiable in all four
    arguments. Mathematically nonnegative; floating-point round-off can
    produce values a few ulp below zero.
    """
    for s in (sigma_q, sigma_p):
        if np.any(s.data <= 0):
            raise DomainError("kl_diag_gaussians requires strictly positive sigmas")
    d = mu_q.size
    log_ratio = reduce_sum(log(sigma_p)) - reduce_sum(log(sigma_q))
    diff = sub(mu_q, mu_p)
    quad = reduce_sum(div(add(square(sigma_q), square(diff)),
                          scale(square(sigma_p), 2.0)))
    return shift(add(log_ratio, quad), -0.5 * d)


def logabsdet(a: Tensor) -> Tensor:
    """log |det a| for a square rank-2 tensor (LU-based)."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("logabsdet requires a square matrix")
    sign, ld = np.linalg.slogdet(a.data)
    if sign == 0:
        raise DomainError("logabsdet of a singular matrix")

    def backward_fn(g):
        scalar = float(np.asarray(g).reshape(()))
        return (scalar * np.linalg.inv(a.data).T,)

    return _make_result((a,), np.asarray(ld), backward_fn, "logabsdet")


def sum_sq(a: Tensor) -> Tensor:
    """Scalar sum of squared entries."""
    return reduce_sum(square(a))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients against central differences."""

    max_rel_error: float
    tol: float
    coords_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_rel_error:.3e} "
                f"(tol {self.tol:.1e}, {self.coords_checked} coordinates)")


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def finite_diff_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                             tol: float = 1e-4, step: float = 1e-5,
                             max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Check analytic gradients of ``loss_fn`` w.r.t. ``params``.

    ``loss_fn`` must be deterministic (verified by evaluating twice) and
    scalar-valued. When the total coordinate count exceeds ``max_coords``,
    a seeded uniform subset is checked instead of every coordinate.
    """
    v1 = loss_fn()
    v2 = loss_fn()
    if v1.data.size != 1:
        raise ShapeError("gradient check requires a scalar-valued function")
    if v1.data.tobytes() != v2.data.tobytes():
        raise NondeterministicFunctionError(
            "function under gradient check is not deterministic")

    for p in params:
        p.grad = None
    with Tape() as tape:
        out = loss_fn()
    backward(out, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    coords = [(pi, ci) for pi, p in enumerate(params) for ci in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(chosen)]

    max_err = 0.0
    for pi, ci in coords:
        flat = params[pi].data.reshape(-1)
        orig = flat[ci]
        flat[ci] = orig + step
        f_plus = loss_fn().item()
        flat[ci] = orig - step
        f_minus = loss_fn().item()
        flat[ci] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = _rel_error(float(analytic[pi].reshape(-1)[ci]), numeric)
        if err > max_err:
            max_err = err
    return GradCheckReport(max_rel_error=max_err, tol=tol, coords_checked=len(coords))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      tol: float = 1e-4, step: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Check the analytic gradient of scalar-valued ``f`` at ``x``."""
    if not x.requires_grad:
        raise DomainError("finite_diff_check requires x.requires_grad")
    return finite_diff_check_params(lambda: f(x), [x], tol=tol, step=step,
                                    max_coords=max_coords, seed=seed)


# ---------------------------------------------------------------------------
# parameters and optimization
# ---------------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...],
                 name: str | None = None) -> Tensor:
    """Trainable tensor initialized uniformly in [-sqrt(1/fan_in), +sqrt(1/fan_in)]."""
    bound = math.sqrt(1.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape: tuple[int, ...], name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones_param(shape: tuple[int, ...], name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> tuple[float, bool]:
    """Scale gradients in place so their global norm is at most ``max_norm``.

    Returns the pre-clip norm and whether clipping was applied.
    """
    norm = global_grad_norm(params)
    if norm > max_norm > 0.0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
        return norm, True
    return norm, False


class Adam:
    """Adam optimizer (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self._t += 1
        b1t = 1.0 - self.beta1 ** self._t
        b2t = 1.0 - self.beta2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data -= self.lr * update

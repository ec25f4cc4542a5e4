"""Float32 tensors with taped reverse-mode differentiation.

Every operation runs eagerly on numpy arrays. When a tape is active and at
least one input requires gradients, the op appends one node (output tensor
plus a backward closure over the parents) to that tape. `Tape.backward`
replays the nodes in reverse creation order, which is a valid topological
order because an op's inputs always exist before its output.

All data is float32 and row-major. Gradients accumulate in float32 as well.
Any op whose output contains NaN or Inf raises NumericError immediately so a
diverging step dies loudly instead of poisoning later state.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _special

DTYPE = np.float32

COSINE_NORM_EPS = 1e-8
TARGET_SUM_TOL = 1e-5


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared; the current step must be abandoned."""


class ContractError(ValueError):
    """An input violates a documented precondition."""


class DegenerateInputError(ValueError):
    """An input is well formed but numerically unusable (e.g. zero norm)."""


class SequencingError(RuntimeError):
    """An operation ran before the state it depends on was initialized."""


class FormatError(ValueError):
    """A binary file does not match its declared layout."""


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out: "Tensor", backward: Callable[[np.ndarray], None]):
        self.out = out
        self.backward = backward


class Tape:
    """Ordered list of recorded ops; reverse order is topological."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def backward(self, root: "Tensor", seed: np.ndarray | None = None) -> None:
        """Accumulate d(root)/d(leaf) into .grad of every leaf that fed root.

        `root` must be a scalar unless an explicit seed gradient is given.
        Intermediate grads are consumed during the sweep, so a later backward
        over the same tape (e.g. for a second objective) starts clean and
        only leaf tensors keep accumulated gradients.
        """
        if seed is None:
            if root.data.size != 1:
                raise ShapeError("backward without seed needs a scalar root")
            seed = np.ones_like(root.data)
        if root.grad is None:
            root.grad = seed.astype(DTYPE)
        else:
            root.grad = root.grad + seed.astype(DTYPE)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.out.grad = None
            node.backward(g)


_TAPES: list[Tape] = []


@contextlib.contextmanager
def tape():
    """Activate a fresh tape for the duration of the context."""
    t = Tape()
    _TAPES.append(t)
    try:
        yield t
    finally:
        _TAPES.pop()


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(DTYPE, copy=True)
        else:
            self.grad = self.grad + g.astype(DTYPE, copy=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _finish(op: str, data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap op output, check finiteness, and record on the active tape."""
    data = np.asarray(data, dtype=DTYPE)
    if data.ndim > 0 and not data.flags["C_CONTIGUOUS"]:
        data = np.ascontiguousarray(data)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    t = _TAPES[-1] if _TAPES else None
    if t is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        t.nodes.append(_Node(out, backward))
    else:
        out.requires_grad = False
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over leading axes so it matches a trailing-broadcast operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and (b.ndim == 0 or a.shape[a.ndim - b.ndim:] == b.shape):
        return
    raise ShapeError(f"{op}: shape {b.shape} does not trail-broadcast onto {a.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=DTYPE)
        out_data = a.data + const
        if out_data.shape != a.shape:
            raise ShapeError(f"add: constant of shape {const.shape} grows {a.shape}")

        def bwd(g, a=a):
            a.accumulate(g)

        return _finish("add", out_data, (a,), bwd)
    _check_trailing(a, b, "add")

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(_reduce_to(g, b.shape))

    return _finish("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=DTYPE)
        out_data = a.data - const
        if out_data.shape != a.shape:
            raise ShapeError(f"sub: constant of shape {const.shape} grows {a.shape}")

        def bwd(g, a=a):
            a.accumulate(g)

        return _finish("sub", out_data, (a,), bwd)
    _check_trailing(a, b, "sub")

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-_reduce_to(g, b.shape))

    return _finish("sub", a.data - b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g, a=a):
        a.accumulate(-g)

    return _finish("neg", -a.data, (a,), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product. `b` may be a Tensor (same or trailing shape) or a
    constant broadcastable to a's shape; constants never receive gradient."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=DTYPE)
        if np.broadcast_shapes(a.shape, const.shape) != a.shape:
            raise ShapeError(f"mul: constant of shape {const.shape} grows {a.shape}")

        def bwd(g, a=a, const=const):
            a.accumulate(g * const)

        return _finish("mul", a.data * const, (a,), bwd)
    _check_trailing(a, b, "mul")

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(_reduce_to(g * a.data, b.shape))

    return _finish("mul", a.data * b.data, (a, b), bwd)


# ---------------------------------------------------------------------------
# matrix products and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate(_reduce_to(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate(gb)

    return _finish("matmul", np.matmul(a.data, b.data), (a, b), bwd)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g, a=a, inv=inv):
        a.accumulate(np.ascontiguousarray(np.transpose(g, inv)))

    return _finish("permute", np.transpose(a.data, axes), (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bwd(g, a=a):
        a.accumulate(g.reshape(a.shape))

    return _finish("reshape", a.data.reshape(shape), (a,), bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g, a=a, idx=idx):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[idx] = g
        a.accumulate(full)

    return _finish("slice", a.data[idx], (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, tensors=tensors, offsets=offsets, axis=axis):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(np.ascontiguousarray(g[tuple(idx)]))

    return _finish("concat", np.concatenate([t.data for t in tensors], axis=axis),
                   tensors, bwd)


def expand0(a: Tensor, count: int) -> Tensor:
    """Repeat a leading axis of extent 1 `count` times."""
    if a.shape[0] != 1:
        raise ShapeError(f"expand0 needs leading extent 1, got {a.shape}")

    def bwd(g, a=a):
        a.accumulate(g.sum(axis=0, keepdims=True))

    return _finish("expand0", np.repeat(a.data, count, axis=0), (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)

    def bwd(g, a=a, axes=axes, keepdims=keepdims):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        a.accumulate(np.broadcast_to(g, a.shape).astype(DTYPE))

    return _finish("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    scale = DTYPE(1.0 / count)

    def bwd(g, a=a, axes=axes, keepdims=keepdims, scale=scale):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        a.accumulate(np.broadcast_to(g * scale, a.shape).astype(DTYPE))

    return _finish("mean", a.data.mean(axis=axes, keepdims=keepdims, dtype=DTYPE),
                   (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")

    def bwd(g, a=a):
        a.accumulate(g / a.data)

    return _finish("log", np.log(a.data), (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g, a=a, out_data=out_data):
        a.accumulate(g * out_data)

    return _finish("exp", out_data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative value")
    out_data = np.sqrt(a.data)

    def bwd(g, a=a, out_data=out_data):
        a.accumulate(g / (2.0 * np.maximum(out_data, 1e-12)))

    return _finish("sqrt", out_data, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    x = a.data.astype(np.float64)
    cdf = 0.5 * (1.0 + _special.erf(x / np.sqrt(2.0)))
    out_data = x * cdf

    def bwd(g, a=a, x=x, cdf=cdf):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        a.accumulate((g * (cdf + x * pdf)).astype(DTYPE))

    return _finish("gelu", out_data, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    out_data = np.logaddexp(0.0, a.data.astype(np.float64))

    def bwd(g, a=a):
        a.accumulate((g * _special.expit(a.data.astype(np.float64))).astype(DTYPE))

    return _finish("softplus", out_data, (a,), bwd)


def lgamma(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("lgamma of non-positive value")

    def bwd(g, a=a):
        a.accumulate((g * _special.digamma(a.data.astype(np.float64))).astype(DTYPE))

    return _finish("lgamma", _special.gammaln(a.data.astype(np.float64)), (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, a=a, out_data=out_data, axis=axis):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a.accumulate(out_data * (g - inner))

    return _finish("softmax", out_data, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g, a=a, out_data=out_data, axis=axis):
        a.accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _finish("log_softmax", out_data, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ShapeError("layer_norm gain/bias must match the last axis")
    mu = a.data.mean(axis=-1, keepdims=True, dtype=DTYPE)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=DTYPE)
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g, a=a, gain=gain, bias=bias, xhat=xhat, inv=inv):
        if bias.requires_grad:
            bias.accumulate(_reduce_to(g, bias.shape))
        if gain.requires_grad:
            gain.accumulate(_reduce_to(g * xhat, gain.shape))
        if a.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True, dtype=DTYPE)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True, dtype=DTYPE)
            a.accumulate((gy - m1 - xhat * m2) * inv)

    return _finish("layer_norm", out_data, (a, gain, bias), bwd)


def normalize_rows(a: Tensor, eps: float = COSINE_NORM_EPS) -> Tensor:
    """Scale each last-axis row to unit L2 norm."""
    norm = np.sqrt((a.data.astype(np.float64) ** 2).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateInputError("normalize_rows: zero-norm row")
    norm = norm.astype(DTYPE)
    out_data = a.data / norm

    def bwd(g, a=a, out_data=out_data, norm=norm):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        a.accumulate((g - out_data * inner) / norm)

    return _finish("normalize_rows", out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# objectives


def _check_target_rows(t: np.ndarray, op: str) -> None:
    if np.any(t < 0):
        raise ContractError(f"{op}: target has negative entries")
    sums = t.sum(axis=-1, dtype=np.float64)
    if np.any(np.abs(sums - 1.0) > TARGET_SUM_TOL):
        raise ContractError(f"{op}: target rows must sum to 1 within {TARGET_SUM_TOL}")


def cross_entropy(logits: Tensor, target) -> Tensor:
    """CE between softmax(logits) and a fixed probability vector; scalar out."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if logits.ndim != 1 or t.shape != logits.shape:
        raise ShapeError("cross_entropy expects matching rank-1 operands")
    _check_target_rows(t, "cross_entropy")
    z = logits.data - logits.data.max()
    ls = z - np.log(np.exp(z).sum())
    out_data = -(t * ls).sum(dtype=DTYPE)

    def bwd(g, logits=logits, t=t, ls=ls):
        logits.accumulate(g * (np.exp(ls) - t))

    return _finish("cross_entropy", out_data, (logits,), bwd)


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-row CE of (B, K) logits against fixed (B, K) probability rows."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=DTYPE)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeError("cross_entropy_rows expects matching (B, K) operands")
    _check_target_rows(t, "cross_entropy_rows")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_data = -(t * ls).sum(axis=-1, dtype=DTYPE)

    def bwd(g, logits=logits, t=t, ls=ls):
        logits.accumulate(g[:, None] * (np.exp(ls) - t))

    return _finish("cross_entropy_rows", out_data, (logits,), bwd)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between two vectors, in [-1, 1]."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeError("cosine_similarity expects two vectors of equal length")
    nu = float(np.sqrt((u.data.astype(np.float64) ** 2).sum()))
    nv = float(np.sqrt((v.data.astype(np.float64) ** 2).sum()))
    if nu <= COSINE_NORM_EPS or nv <= COSINE_NORM_EPS:
        raise DegenerateInputError("cosine_similarity: zero-norm input")
    dot = float(u.data.astype(np.float64) @ v.data.astype(np.float64))
    c = dot / (nu * nv)
    out_data = np.clip(c, -1.0, 1.0)

    def bwd(g, u=u, v=v, nu=nu, nv=nv, c=c):
        gs = float(g)
        if u.requires_grad:
            u.accumulate((gs * (v.data / (nu * nv) - c * u.data / (nu * nu))).astype(DTYPE))
        if v.requires_grad:
            v.accumulate((gs * (u.data / (nu * nv) - c * v.data / (nv * nv))).astype(DTYPE))

    return _finish("cosine_similarity", out_data, (u, v), bwd)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable[[np.ndarray], float], theta: np.ndarray,
                     h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, float64 quotients.

    Slow by construction; this is the independent route the analytic
    gradients are checked against, so it must not share code with the tape.
    """
    theta = np.asarray(theta, dtype=DTYPE)
    grad = np.zeros(theta.shape, dtype=np.float64)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + DTYPE(h)
        hi = float(flat[i])  # the spacing actually representable in float32
        fp = float(f(theta))
        flat[i] = orig - DTYPE(h)
        lo = float(flat[i])
        fm = float(f(theta))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("finite_diff_grad: non-finite function value")
        gflat[i] = (fp - fm) / (hi - lo)
    return grad


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs deviation, scaled by the numeric gradient's magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), 1e-4)
    return float(np.max(np.abs(analytic - numeric))) / scale


def clear_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None

"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: an operation whose inputs include a tracked
tensor records its parents and a backward closure on the output. Calling
``backward()`` on a scalar walks the graph once in reverse topological
order and accumulates gradients into every tracked leaf. Untracked
inputs (``requires_grad=False``) never receive a gradient and never
cause a graph to be recorded, so forward passes through frozen models
run at plain numpy speed.

Broadcasting is deliberately narrow: two operands combine elementwise
only if their shapes are equal, one of them is a scalar, or one shape is
a trailing suffix of the other (the usual bias / row-vector case).
Anything else requires an explicit reshape.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import GraphError, NumericError, ParameterError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# When enabled, every op output is scanned for NaN/Inf and raises
# NumericError. Off by default; training guards the loss instead.
_finite_checks = False


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf detection. Returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def _suffix_broadcastable(small: tuple, big: tuple) -> bool:
    n = len(small)
    return n <= len(big) and (n == 0 or big[len(big) - n:] == small)


def _check_elementwise(a: "Tensor", b: "Tensor") -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    if _suffix_broadcastable(sa, sb) or _suffix_broadcastable(sb, sa):
        return
    raise ShapeError(f"cannot combine shapes {sa} and {sb} elementwise")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce an output gradient back to an operand's shape."""
    if grad.shape == shape:
        return grad
    if shape == () or int(np.prod(shape)) == 1:
        return np.sum(grad).reshape(shape)
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


class Tensor:
    """A contiguous float64 array plus optional gradient tracking.

    ``data`` is always float64; ``grad`` is lazily allocated with the
    same shape the first time a gradient reaches this tensor.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None
        self._backward_done = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(*shape) -> "Tensor":
        return Tensor(np.zeros(shape))

    def detach(self) -> "Tensor":
        """A graph-free view of the same values."""
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    # -- introspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- graph plumbing ---------------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node.

        Without an explicit seed gradient the node must be scalar. A
        second sweep from the same node is rejected: closures may hold
        stale intermediate gradients, so rerunning would silently
        double-count.
        """
        if self._backward_done:
            raise GraphError("backward() already ran on this graph")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ShapeError("seed gradient shape mismatch")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)
        self._backward_done = True

    # -- elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            out = _result(self.data + other, (self,), "add")
            if out._parents:
                out._bwd = lambda g: self._accumulate(g) if self.requires_grad else None
            return out
        _check_elementwise(self, other)
        out = _result(self.data + other.data, (self, other), "add")
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.data.shape))
            out._bwd = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _result(-self.data, (self,), "neg")
        if out._parents:
            out._bwd = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self + (-other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            out = _result(self.data * other, (self,), "mul")
            if out._parents:
                out._bwd = lambda g: self._accumulate(g * other)
            return out
        _check_elementwise(self, other)
        out = _result(self.data * other.data, (self, other), "mul")
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.data.shape))
            out._bwd = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ShapeError("division is only defined by a python scalar")
        if other == 0:
            raise ParameterError("division by zero")
        return self * (1.0 / other)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ParameterError("exponent must be a python scalar")
        out = _result(self.data ** p, (self,), "pow")
        if out._parents:
            out._bwd = lambda g: self._accumulate(g * p * self.data ** (p - 1))
        return out

    def exp(self):
        out = _result(np.exp(self.data), (self,), "exp")
        if out._parents:
            out._bwd = lambda g: self._accumulate(g * out.data)
        return out

    def log(self):
        out = _result(np.log(self.data), (self,), "log")
        if out._parents:
            out._bwd = lambda g: self._accumulate(g / self.data)
        return out

    def gelu(self):
        """Exact GELU, 0.5*x*(1+erf(x/sqrt(2)))."""
        e = erf(self.data * _INV_SQRT2)
        out = _result(0.5 * self.data * (1.0 + e), (self,), "gelu")
        if out._parents:
            def bwd(g):
                pdf = np.exp(-0.5 * self.data * self.data) * _INV_SQRT2PI
                self._accumulate(g * (0.5 * (1.0 + e) + self.data * pdf))
            out._bwd = bwd
        return out

    # -- matmul / reshaping ------------------------------------------------------

    def __matmul__(self, other):
        a, b = self.data, other.data
        if a.ndim == 2 and b.ndim == 2:
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        elif a.ndim == 3 and b.ndim == 3:
            if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
                raise ShapeError(f"batched matmul shape mismatch: {a.shape} @ {b.shape}")
        else:
            raise ShapeError("matmul supports 2D @ 2D or batched 3D @ 3D")
        out = _result(a @ b, (self, other), "matmul")
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g @ np.swapaxes(b, -1, -2))
                if other.requires_grad:
                    other._accumulate(np.swapaxes(a, -1, -2) @ g)
            out._bwd = bwd
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _result(self.data.reshape(shape), (self,), "reshape")
        if out._parents:
            out._bwd = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inverse = tuple(np.argsort(axes))
        out = _result(self.data.transpose(axes), (self,), "transpose")
        if out._parents:
            out._bwd = lambda g: self._accumulate(g.transpose(inverse))
        return out

    @property
    def T(self):
        return self.transpose()

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out._parents:
            def bwd(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
            out._bwd = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / count

    # -- structured ops --------------------------------------------------------------

    def gather_rows(self, index) -> "Tensor":
        """Select rows along axis 0; duplicates allowed."""
        index = _as_index(index, self.data.shape[0], "gather_rows")
        out = _result(self.data[index], (self,), "gather_rows")
        if out._parents:
            def bwd(g):
                buf = np.zeros_like(self.data)
                np.add.at(buf, index, g)
                self._accumulate(buf)
            out._bwd = bwd
        return out

    def scatter_rows(self, index, total_rows: int) -> "Tensor":
        """Place rows at ``index`` inside ``total_rows`` zero rows."""
        index = _as_index(index, total_rows, "scatter_rows")
        if len(np.unique(index)) != len(index):
            raise ParameterError("scatter_rows index must be unique")
        if len(index) != self.data.shape[0]:
            raise ShapeError("scatter_rows index count must match row count")
        buf = np.zeros((total_rows,) + self.data.shape[1:], dtype=np.float64)
        buf[index] = self.data
        out = _result(buf, (self,), "scatter_rows")
        if out._parents:
            out._bwd = lambda g: self._accumulate(g[index])
        return out

    def softmax(self, axis: int = -1, tau: float = 1.0) -> "Tensor":
        """Temperature softmax along one axis, stabilised by max-subtraction."""
        if tau <= 0:
            raise ParameterError(f"softmax temperature must be positive, got {tau}")
        z = (self.data - self.data.max(axis=axis, keepdims=True)) / tau
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        out = _result(y, (self,), "softmax")
        if out._parents:
            def bwd(g):
                inner = (g * y).sum(axis=axis, keepdims=True)
                self._accumulate((g - inner) * y / tau)
            out._bwd = bwd
        return out

    def layer_norm(self, eps: float = 1e-6) -> "Tensor":
        """Normalise the last axis to zero mean, unit variance (biased, pre-affine)."""
        mu = self.data.mean(axis=-1, keepdims=True)
        var = self.data.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (self.data - mu) * inv_std
        out = _result(xhat, (self,), "layer_norm")
        if out._parents:
            def bwd(g):
                gm = g.mean(axis=-1, keepdims=True)
                gx = (g * xhat).mean(axis=-1, keepdims=True)
                self._accumulate(inv_std * (g - gm - xhat * gx))
            out._bwd = bwd
        return out


def _result(data: np.ndarray, parents: tuple, op: str) -> Tensor:
    data = np.ascontiguousarray(data, dtype=np.float64)
    if _finite_checks and not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    out = Tensor(data)
    if tracked:
        out.requires_grad = True
        out._parents = tracked
    return out


def _as_index(index, limit: int, op: str) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= limit):
        raise ShapeError(f"{op} index out of range for {limit} rows")
    return index


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along an existing axis."""
    tensors = list(tensors)
    if not tensors:
        raise ParameterError("concat needs at least one tensor")
    out = _result(np.concatenate([t.data for t in tensors], axis=axis),
                  tuple(tensors), "concat")
    if out._parents:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad or t._parents:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(sl)])
        out._bwd = bwd
    return out


def grad_check(f, params, eps: float = 1e-5, n_samples: int = 64, rng=None) -> float:
    """Compare analytic gradients of a scalar-valued ``f`` with central differences.

    ``params`` is a dict or list of leaf tensors that ``f`` closes over.
    Returns the max over sampled coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ParameterError(f"grad_check eps must lie in [1e-7, 1e-4], got {eps}")
    if isinstance(params, dict):
        params = list(params.values())
    rng = rng if rng is not None else np.random.default_rng(0)

    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is not finite")
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if len(coords) > n_samples:
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(picks)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        saved = flat[j]
        flat[j] = saved + eps
        hi = f().item()
        flat[j] = saved - eps
        lo = f().item()
        flat[j] = saved
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError("grad_check: perturbed loss is not finite")
        numeric = (hi - lo) / (2.0 * eps)
        ana = analytic[i].reshape(-1)[j]
        err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
        worst = max(worst, err)
    return worst

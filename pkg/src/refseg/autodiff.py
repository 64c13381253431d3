"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous row-major numpy buffers (float32 for training,
float64 for gradient verification). Each differentiable operation records
its inputs and a local backward rule on the output tensor; `backward`
walks the recorded graph once, in reverse topological order, and returns
a gradient per requested leaf. The walk is purely functional: it never
mutates tensors, so running it twice over the same graph is bitwise
reproducible.

`finite_diff_check` is the independent oracle: central finite differences
evaluated coordinate by coordinate against the analytic gradients.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    DegenerateRowError,
    DimensionError,
    EvaluationError,
)

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_op_tally = 0
_kink_probe: list | None = None


def op_tally() -> int:
    """Total number of tensor operations evaluated in this process."""
    return _op_tally


@contextlib.contextmanager
def track_kink_margin():
    """Record the smallest |input| seen by any relu inside the block.

    Central finite differences are only trustworthy when no relu input
    sits within ~h of its kink; callers probe this margin to pick a
    generic evaluation point before running a check.
    """
    global _kink_probe
    prev = _kink_probe
    _kink_probe = [float("inf")]
    try:
        yield _kink_probe
    finally:
        _kink_probe = prev


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording backward rules."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array, optionally tracked for differentiation."""

    __slots__ = ("_data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp = None

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value):
        # always a contiguous float ndarray, never a numpy scalar
        # (ufuncs on 0-d arrays hand back immutable scalars)
        arr = np.asarray(value)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self._data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; scalars are lifted to untracked constants
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten2d(self):
        """Collapse all leading axes, keeping the channel axis last."""
        return reshape(self, (-1, self.shape[-1]))

    def transpose(self, axes=None):
        return transpose(self, axes)

    def relu(self):
        return relu(self)


def param(data, dtype=np.float32) -> Tensor:
    """A learnable leaf tensor."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    """Wrap an op result, recording the backward rule when needed."""
    global _op_tally
    _op_tally += 1
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor
    return _node(out, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    # gradient at exactly zero is defined as zero
    if _kink_probe is not None:
        margin = float(np.abs(x.data).min())
        if margin < _kink_probe[0]:
            _kink_probe[0] = margin
    out = np.maximum(x.data, 0.0)
    return _node(out, (x,), lambda g: (g * (x.data > 0),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) in a form stable for large |x|."""
    out = np.logaddexp(0.0, x.data)

    def vjp(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return (g * sig,)

    return _node(out, (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g / (2.0 * out),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _node(out, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else x.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=False),)

    return _node(out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    out = np.reshape(x.data, shape)
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    if axes is None:
        inverse = None
    else:
        inverse = np.argsort(axes)
    return _node(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = tuple(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return _node(out, parts, vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the leading axis."""
    out = np.ascontiguousarray(x.data[start:stop])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _node(out, (x,), vjp)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup (embedding); gradients scatter-add into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node(out, (table,), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias) over the trailing axis; leading axes pass through."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear expects input width {weight.shape[0]}, got {x.shape}"
        )
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))

    if bias is None:
        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ weight.data.T).reshape(x.shape), x2.T @ g2

        return _node(out, (x, weight), vjp)

    def vjp_b(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ weight.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return _node(out, (x, weight, bias), vjp_b)


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-stochastic softmax over the last axis.

    `mask` marks entries to keep (True); masked entries come out exactly
    zero and receive zero gradient. Raises on rows with nothing to keep.
    """
    data = x.data
    if mask is None:
        shifted = data - data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row is fully masked")
        neg = np.where(mask, data, -np.inf)
        shifted = np.where(mask, data - neg.max(axis=-1, keepdims=True), 0.0)
        e = np.exp(shifted) * mask
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (x,), vjp)


def normalize_lastdim(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance rows over the last axis (no affine part)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv
    n = x.shape[-1]

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# spatial primitives (channels-last layout)
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [H,W,Cin] with [kh,kw,Cin,Cout]."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [H,W,C] x [kh,kw,Cin,Cout], got {x.shape} x {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[2] != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    h, w = x.shape[0], x.shape[1]
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}")
    if padding:
        xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    else:
        xp = x.data
    out = np.zeros((ho * wo, cout), dtype=x.data.dtype)
    patches = []
    for di in range(kh):
        for dj in range(kw):
            patch = xp[di:di + stride * ho:stride, dj:dj + stride * wo:stride, :].reshape(ho * wo, cin)
            patches.append(patch)
            out += patch @ kernel.data[di, dj]
    if bias is not None:
        out += bias.data
    out = out.reshape(ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(ho * wo, cout)
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for n, (di, dj) in enumerate((i, j) for i in range(kh) for j in range(kw)):
            gk[di, dj] = patches[n].T @ g2
            gxp[di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += (g2 @ kernel.data[di, dj].T).reshape(ho, wo, cin)
        gx = gxp[padding:padding + h, padding:padding + w, :] if padding else gxp
        grads = (np.ascontiguousarray(gx), gk)
        if bias is not None:
            return grads + (g2.sum(axis=0),)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, vjp)


def avgpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling over [H,W,C]."""
    h, w = x.shape[0], x.shape[1]
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2x2 needs even extents, got {x.shape}")
    out = x.data.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))

    def vjp(g):
        gx = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
        return (gx.astype(x.dtype, copy=False),)

    return _node(out, (x,), vjp)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling over [H,W,C]."""
    out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    h, w = x.shape[0], x.shape[1]

    def vjp(g):
        return (g.reshape(h, 2, w, 2, -1).sum(axis=(1, 3)),)

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------

def backward(loss: Tensor, wrt) -> dict:
    """Gradients of a scalar loss for each tensor in `wrt`.

    Leaves that the loss does not reach get zero gradients. The result
    maps each requested tensor to an untracked gradient tensor.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt)

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            have = grads.get(id(parent))
            grads[id(parent)] = pg if have is None else have + pg

    out = {}
    for leaf in wrt:
        g = grads.get(id(leaf))
        out[leaf] = Tensor(g if g is not None else np.zeros_like(leaf.data))
    return out


@dataclass
class ParamCheck:
    """Finite-difference verdict for one parameter tensor."""
    name: str
    max_rel_err: float
    index: tuple
    passed: bool


@dataclass
class GradReport:
    """Per-parameter comparison of analytic and numeric gradients."""
    tolerance: float
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def worst(self) -> ParamCheck | None:
        return max(self.checks, key=lambda c: c.max_rel_err, default=None)

    def summary(self) -> str:
        lines = [
            f"{'PASS' if c.passed else 'FAIL'}  {c.name:40s} max_rel_err={c.max_rel_err:.3e} at {c.index}"
            for c in self.checks
        ]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (max {self.max_rel_err:.3e}, tol {self.tolerance:.1e})")
        return "\n".join(lines)


def _eval_scalar(f) -> float:
    value = f()
    value = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise EvaluationError(f"objective returned a non-finite value: {value}")
    return value


def finite_diff_check(f, params, h: float = 1e-5, tol: float = 1e-6) -> GradReport:
    """Compare analytic gradients of f() against central differences.

    `params` is a sequence of (name, Tensor) leaves that f reads through
    closure. Relative error per coordinate uses the denominator
    max(|analytic|, |numeric|, 1e-8). Perturbed evaluations run without
    recording, and the parameter buffers are restored exactly.
    """
    params = list(params)
    loss = f()
    if not isinstance(loss, Tensor):
        raise ContractError("objective must return a Tensor")
    _eval_scalar(lambda: loss)
    grads = backward(loss, [p for _, p in params])

    report = GradReport(tolerance=tol)
    with no_grad():
        for name, p in params:
            analytic = grads[p].data
            worst = 0.0
            worst_idx = ()
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = _eval_scalar(f)
                flat[i] = keep - h
                down = _eval_scalar(f)
                flat[i] = keep
                numeric = (up - down) / (2.0 * h)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if err > worst:
                    worst = err
                    worst_idx = np.unravel_index(i, p.shape) if p.ndim else ()
            report.checks.append(ParamCheck(name, worst, tuple(int(j) for j in worst_idx), worst < tol))
    return report

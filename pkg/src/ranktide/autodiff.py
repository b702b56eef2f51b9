"""Dense float64 tensors with reverse-mode differentiation over a fixed op set.

Every differentiable operation is an explicit function in this module: there is
no general broadcasting and no implicit type promotion. Ops record themselves
on the innermost active :class:`Tape`; with no tape active they run as plain
numpy forward computations (evaluation mode). Tensors are rank 1..4, grads are
accumulated additively, and ``relu'(0) == 0`` by convention.

Thread discipline: a tape and the values it references are single-writer and
must stay on one logical thread from construction through ``backward``.
Read-only forward evaluation of frozen parameters is safe to run in parallel
across samples; parameter updates require exclusive access.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Shape = tuple[int, ...]

_MAX_RANK = 4


class AutodiffError(ValueError):
    """Shape mismatch, bad axis, or non-finite data fed to an op."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise AutodiffError(msg)


class Value:
    """A tensor node: float64 data, optional grad of identical shape.

    ``data`` is row-major, rank 1..4, all extents >= 1. ``grad`` is lazily
    created by the backward pass and accumulated additively.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, _validate: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if _validate:
            _check(1 <= arr.ndim <= _MAX_RANK, f"rank must be 1..{_MAX_RANK}, got {arr.ndim}")
            _check(all(d >= 1 for d in arr.shape), f"extents must be >= 1, got {arr.shape}")
            _check(bool(np.isfinite(arr).all()), "non-finite entries in Value data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Shape:
        return self.data.shape

    def item(self) -> float:
        _check(self.data.size == 1, "item() requires a single-element Value")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Value":
        return Value(self.data.copy(), _validate=False)

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the explicit op set
    def __add__(self, other: "Value") -> "Value":
        return add(self, other)

    def __sub__(self, other: "Value") -> "Value":
        return sub(self, other)

    def __mul__(self, other) -> "Value":
        if isinstance(other, Value):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Value":
        return scale(self, -1.0)

    def __matmul__(self, other: "Value") -> "Value":
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Value":
        return vsum(self, axis)

    def mean(self, axis: int | None = None) -> "Value":
        return vmean(self, axis)

    def reshape(self, shape: Shape) -> "Value":
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out: Value, backward: Callable[[np.ndarray], None]):
        self.out = out
        self.backward = backward


class Tape:
    """Append-ordered record of ops; append order is a topological order.

    Construction is confined to one thread. ``backward`` walks the nodes once
    in reverse, so each op contributes its input gradients exactly once per
    call; values used on several paths receive the sum of all path gradients.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def backward(self, root: Value) -> None:
        _check(root.data.size == 1, "backward() root must be scalar")
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is not None:
                node.backward(g)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accum(v: Value, g: np.ndarray) -> None:
    if v.grad is None:
        v.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        v.grad += g


def _make(data: np.ndarray, inputs: Sequence[Value], backward: Callable[[np.ndarray], None]) -> Value:
    req = any(v.requires_grad for v in inputs)
    out = Value(data, requires_grad=req, _validate=False)
    tape = _active_tape()
    if tape is not None and req:
        tape.nodes.append(_Node(out, backward))
    return out


# ---------------------------------------------------------------------------
# elementwise and scalar ops

def add(a: Value, b: Value) -> Value:
    _check(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Value, b: Value) -> Value:
    _check(a.shape == b.shape, f"sub: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Value, b: Value) -> Value:
    _check(a.shape == b.shape, f"mul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Value, c: float) -> Value:
    def backward(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _make(a.data * c, (a,), backward)


def scale_by(a: Value, s: Value) -> Value:
    """Tensor times a single-element Value."""
    _check(s.data.size == 1, "scale_by: scalar operand must have one element")

    def backward(g):
        if a.requires_grad:
            _accum(a, g * s.data.reshape(-1)[0])
        if s.requires_grad:
            _accum(s, np.array([np.sum(g * a.data)]))

    return _make(a.data * s.data.reshape(-1)[0], (a, s), backward)


def div_by(a: Value, s: Value) -> Value:
    """Tensor divided by a single-element Value (must be nonzero)."""
    _check(s.data.size == 1, "div_by: scalar operand must have one element")
    sv = s.data.reshape(-1)[0]
    _check(sv != 0.0, "div_by: division by zero")

    def backward(g):
        if a.requires_grad:
            _accum(a, g / sv)
        if s.requires_grad:
            _accum(s, np.array([-np.sum(g * a.data) / (sv * sv)]))

    return _make(a.data / sv, (a, s), backward)


def relu(a: Value) -> Value:
    mask = a.data > 0  # subgradient at 0 is 0

    def backward(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def sigmoid(a: Value) -> Value:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0  # split form avoids overflow in exp for large |x|
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), backward)


def sqrt(a: Value) -> Value:
    """Elementwise square root; input entries must be strictly positive."""
    _check(bool((a.data > 0).all()), "sqrt: input must be strictly positive")
    y = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * 0.5 / y)

    return _make(y, (a,), backward)


# ---------------------------------------------------------------------------
# reductions

def vsum(a: Value, axis: int | None = None) -> Value:
    if axis is None or a.data.ndim == 1:
        if axis is not None:
            _check(axis in (0, -1), f"sum: bad axis {axis} for shape {a.shape}")

        def backward(g):
            if a.requires_grad:
                _accum(a, np.full_like(a.data, g.reshape(-1)[0]))

        return _make(np.array([a.data.sum()]), (a,), backward)

    _check(-a.data.ndim <= axis < a.data.ndim, f"sum: bad axis {axis} for shape {a.shape}")
    ax = axis % a.data.ndim

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(np.expand_dims(g, ax), a.shape))

    return _make(a.data.sum(axis=ax), (a,), backward)


def vmean(a: Value, axis: int | None = None) -> Value:
    n = a.data.size if axis is None else a.shape[axis % a.data.ndim]
    return scale(vsum(a, axis), 1.0 / n)


def vmax(a: Value) -> Value:
    """Max of a rank-1 tensor; subgradient goes to the first argmax."""
    _check(a.data.ndim == 1, "vmax: rank-1 input required")
    idx = int(np.argmax(a.data))

    def backward(g):
        if a.requires_grad:
            z = np.zeros_like(a.data)
            z[idx] = g[0]
            _accum(a, z)

    return _make(a.data[idx : idx + 1].copy(), (a,), backward)


def vmin(a: Value) -> Value:
    """Min of a rank-1 tensor; subgradient goes to the first argmin."""
    _check(a.data.ndim == 1, "vmin: rank-1 input required")
    idx = int(np.argmin(a.data))

    def backward(g):
        if a.requires_grad:
            z = np.zeros_like(a.data)
            z[idx] = g[0]
            _accum(a, z)

    return _make(a.data[idx : idx + 1].copy(), (a,), backward)


def global_avg_pool(a: Value) -> Value:
    """[C,H,W] -> [C]: mean over the spatial positions of each channel."""
    _check(a.data.ndim == 3, f"global_avg_pool: rank-3 input required, got {a.shape}")
    c, h, w = a.shape
    inv = 1.0 / (h * w)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g[:, None, None], a.shape) * inv)

    return _make(a.data.mean(axis=(1, 2)), (a,), backward)


def avg_pool2x2(a: Value) -> Value:
    """[C,H,W] -> [C,H/2,W/2] average over non-overlapping 2x2 windows."""
    _check(a.data.ndim == 3, f"avg_pool2x2: rank-3 input required, got {a.shape}")
    c, h, w = a.shape
    _check(h % 2 == 0 and w % 2 == 0, f"avg_pool2x2: even extents required, got {h}x{w}")
    y = a.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g):
        if a.requires_grad:
            gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
            _accum(a, gx)

    return _make(y, (a,), backward)


# ---------------------------------------------------------------------------
# structural ops

def reshape(a: Value, shape: Shape) -> Value:
    new = tuple(shape)
    _check(int(np.prod(new)) == a.data.size, f"reshape: {a.shape} -> {new} size mismatch")

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(new), (a,), backward)


def transpose(a: Value) -> Value:
    _check(a.data.ndim == 2, "transpose: rank-2 input required")

    def backward(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), backward)


def stack_scalars(vals: Sequence[Value]) -> Value:
    """Concatenate n single-element Values into a rank-1 tensor of length n."""
    _check(len(vals) >= 1, "stack_scalars: empty input")
    for v in vals:
        _check(v.data.size == 1, "stack_scalars: every input must have one element")
    vals = tuple(vals)

    def backward(g):
        for i, v in enumerate(vals):
            if v.requires_grad:
                _accum(v, g[i : i + 1])

    return _make(np.array([v.data.reshape(-1)[0] for v in vals]), vals, backward)


def pick(a: Value, idx: int) -> Value:
    """Select one entry of a rank-1 tensor as a single-element Value."""
    _check(a.data.ndim == 1, "pick: rank-1 input required")
    _check(0 <= idx < a.shape[0], f"pick: index {idx} out of range for length {a.shape[0]}")

    def backward(g):
        if a.requires_grad:
            z = np.zeros_like(a.data)
            z[idx] = g[0]
            _accum(a, z)

    return _make(a.data[idx : idx + 1].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Value, b: Value) -> Value:
    _check(a.data.ndim == 2 and b.data.ndim == 2, "matmul: rank-2 inputs required")
    _check(a.shape[1] == b.shape[0], f"matmul: inner dims disagree {a.shape} x {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def dot(a: Value, b: Value) -> Value:
    """Inner product of two rank-1 tensors -> single-element Value."""
    _check(a.data.ndim == 1 and b.data.ndim == 1 and a.shape == b.shape,
           f"dot: matching rank-1 shapes required, got {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g[0] * b.data)
        if b.requires_grad:
            _accum(b, g[0] * a.data)

    return _make(np.array([float(a.data @ b.data)]), (a, b), backward)


def linear(x: Value, w: Value, b: Value) -> Value:
    """Affine map of a rank-1 input: w[K,C] @ x[C] + b[K]."""
    _check(x.data.ndim == 1 and w.data.ndim == 2 and b.data.ndim == 1, "linear: bad ranks")
    _check(w.shape[1] == x.shape[0] and w.shape[0] == b.shape[0],
           f"linear: shapes disagree w={w.shape} x={x.shape} b={b.shape}")

    def backward(g):
        if w.requires_grad:
            _accum(w, np.outer(g, x.data))
        if x.requires_grad:
            _accum(x, w.data.T @ g)
        if b.requires_grad:
            _accum(b, g)

    return _make(w.data @ x.data + b.data, (x, w, b), backward)


def l2norm(a: Value) -> Value:
    """Euclidean norm of a rank-1 tensor; subgradient at 0 is 0."""
    _check(a.data.ndim == 1, "l2norm: rank-1 input required")
    n = float(np.sqrt(a.data @ a.data))

    def backward(g):
        if a.requires_grad and n > 0.0:
            _accum(a, (g[0] / n) * a.data)

    return _make(np.array([n]), (a,), backward)


# ---------------------------------------------------------------------------
# softmax family

def softmax(a: Value, axis: int = -1) -> Value:
    _check(-a.data.ndim <= axis < a.data.ndim, f"softmax: bad axis {axis} for shape {a.shape}")
    ax = axis % a.data.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)  # max-subtraction for stability
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        if a.requires_grad:
            _accum(a, (g - (g * y).sum(axis=ax, keepdims=True)) * y)

    return _make(y, (a,), backward)


def logsumexp(a: Value) -> Value:
    """log(sum(exp(x))) of a rank-1 tensor, max-shifted for stability."""
    _check(a.data.ndim == 1, "logsumexp: rank-1 input required")
    m = a.data.max()
    e = np.exp(a.data - m)
    s = e.sum()
    soft = e / s

    def backward(g):
        if a.requires_grad:
            _accum(a, g[0] * soft)

    return _make(np.array([m + np.log(s)]), (a,), backward)


# ---------------------------------------------------------------------------
# convolution (cross-correlation convention, no kernel flip)

def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (c, k, k, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride), writeable=False
    )
    return np.ascontiguousarray(win.reshape(c * k * k, ho * wo)), ho, wo


def _col2im(dcols: np.ndarray, xshape: Shape, k: int, stride: int, pad: int, ho: int, wo: int):
    c, h, w = xshape
    dxp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    dwin = dcols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[:, i, j]
    return dxp[:, pad : pad + h, pad : pad + w] if pad else dxp


def conv2d(x: Value, w: Value, stride: int = 1, pad: int = 0) -> Value:
    """Cross-correlate x[C_in,H,W] with w[C_out,C_in,k,k] -> [C_out,H',W']."""
    _check(x.data.ndim == 3 and w.data.ndim == 4, "conv2d: need rank-3 input and rank-4 kernel")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    _check(cin == cin_w, f"conv2d: channel mismatch {cin} vs {cin_w}")
    _check(kh == kw, "conv2d: square kernels only")
    k = kh
    _check((h + 2 * pad - k) % stride == 0 and (wd + 2 * pad - k) % stride == 0,
           f"conv2d: non-integral output extent for {h}x{wd}, k={k}, stride={stride}, pad={pad}")
    cols, ho, wo = _im2col(x.data, k, stride, pad)
    wmat = w.data.reshape(cout, cin * k * k)
    y = (wmat @ cols).reshape(cout, ho, wo)

    def backward(g):
        gmat = g.reshape(cout, ho * wo)
        if w.requires_grad:
            _accum(w, (gmat @ cols.T).reshape(w.shape))
        if x.requires_grad:
            dcols = wmat.T @ gmat
            _accum(x, _col2im(dcols, x.shape, k, stride, pad, ho, wo))

    return _make(y, (x, w), backward)


def add_channel_bias(x: Value, b: Value) -> Value:
    """Add a per-channel bias b[C] to a feature map x[C,H,W]."""
    _check(x.data.ndim == 3 and b.data.ndim == 1 and x.shape[0] == b.shape[0],
           f"add_channel_bias: shapes disagree x={x.shape} b={b.shape}")

    def backward(g):
        if x.requires_grad:
            _accum(x, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=(1, 2)))

    return _make(x.data + b.data[:, None, None], (x, b), backward)


# ---------------------------------------------------------------------------
# finite-difference gradient checking

class GradCheckReport:
    """Per-input max relative error of analytic vs central-difference grads."""

    def __init__(self, errors: list[float], tol: float):
        self.errors = errors
        self.tol = tol
        self.max_error = max(errors) if errors else 0.0
        self.passed = self.max_error <= tol

    def __repr__(self) -> str:
        return f"GradCheckReport(max_error={self.max_error:.3e}, passed={self.passed})"


def grad_check(f: Callable[..., Value], inputs: Sequence[Value], eps: float = 1e-5,
               tol: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` with central differences.

    ``f`` is re-evaluated at perturbed inputs in evaluation mode (no tape), so
    the numeric side is independent of the backward implementation it checks.
    Relative error uses max(1, |analytic|, |numeric|) as denominator.
    """
    for v in inputs:
        v.zero_grad()
        v.requires_grad = True
    with Tape() as tape:
        out = f(*inputs)
        _check(out.data.size == 1, "grad_check: f must be scalar-valued")
        tape.backward(out)

    errors = []
    for v in inputs:
        analytic = v.grad if v.grad is not None else np.zeros_like(v.data)
        numeric = np.zeros_like(v.data)
        flat = v.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*inputs).item()
            flat[i] = orig - eps
            fm = f(*inputs).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)
        if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
            raise AutodiffError("grad_check: non-finite values encountered")
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        errors.append(float(np.max(np.abs(analytic - numeric) / denom)))
    return GradCheckReport(errors, tol)

"""Dense-tensor engine with reverse-mode differentiation.

Supplies exactly the operations the activity-detection network needs:
matrix products, the activations, masked softmax, 1D convolution, a fused
graph-attention coefficient op, and the reductions the losses use. All
storage is 64-bit IEEE-754. Accumulation orders are fixed (matmul and
conv1d accumulate in naive loop order), so identical inputs produce
bit-identical outputs and the brute-force loop oracles match exactly.

Tapes are single-threaded: ops executed inside a ``with Tape():`` block are
recorded in execution order (which is a topological order), and
``Tape.backward`` replays them once in reverse. Distinct tapes may live on
distinct threads; the active tape is thread-local.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class EngineError(Exception):
    """Base class for engine failures."""


class ShapeError(EngineError):
    """Operand dimensions do not compose."""


class DomainError(EngineError):
    """Input outside an operation's documented domain."""


class NumericError(EngineError):
    """Non-finite value where a finite one is required."""


class Tensor:
    """Dense 64-bit float array with an optional gradient buffer.

    ``data`` is row-major and immutable by convention after construction;
    ``grad`` is owned by whichever tape accumulates into it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def param(data) -> Tensor:
    """A learnable leaf tensor."""
    return Tensor(data, requires_grad=True)


def const(data) -> Tensor:
    """A non-learnable tensor (inputs, targets, masks)."""
    return Tensor(data, requires_grad=False)


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of executed operations.

    Execution order is topological by construction (an op's inputs exist
    before the op runs), so the backward pass is a single reverse sweep
    that visits each record exactly once. Gradient accumulation order is
    therefore fixed, which keeps repeated runs bit-identical.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        self._outer = _active_tape()
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = self._outer
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tensor reachable from ``loss``.

        Gradients accumulate additively across fan-out. Raises if the loss
        is not a scalar.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.ones_like(loss.data))
        for out, fn in reversed(self._records):
            if out.grad is None:
                continue
            fn(out.grad)


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _maybe_record(out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, backward_fn)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# raw kernels (fixed accumulation order, shared by forward and oracle-free
# backward paths)
# ---------------------------------------------------------------------------

def _matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Accumulate rank-1 terms in k order: bitwise-equal to the naive
    # triple loop, unlike BLAS (which may fuse or reorder).
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows for |x| up to ~1e308.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _stable_softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C = A·B for 2-D operands; dA = dC·Bᵀ, dB = Aᵀ·dC."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not compose")
    out = Tensor(_matmul_data(a.data, b.data), requires_grad=_needs_grad(a, b))

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_matmul_data(g, b.data.T))
        if b.requires_grad:
            b.accumulate_grad(_matmul_data(a.data.T, g))

    _maybe_record(out, _backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc
    out = Tensor(data, requires_grad=_needs_grad(a, b))

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    _maybe_record(out, _backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    out = Tensor(data, requires_grad=_needs_grad(a, b))

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    _maybe_record(out, _backward)
    return out


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data, requires_grad=x.requires_grad)
    _maybe_record(out, lambda g: x.accumulate_grad(-g))
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = Tensor(x.data * c, requires_grad=x.requires_grad)
    _maybe_record(out, lambda g: x.accumulate_grad(g * c))
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d scalar tensor."""
    out = Tensor(np.asarray(x.data.sum()), requires_grad=x.requires_grad)
    _maybe_record(out, lambda g: x.accumulate_grad(np.full_like(x.data, float(g))))
    return out


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """y = x for x ≥ 0 else slope·x; slope must lie in (0, 1)."""
    if not (0.0 < slope < 1.0):
        raise DomainError(f"leaky_relu slope must be in (0, 1), got {slope}")
    if np.isnan(x.data).any():
        raise DomainError("leaky_relu: NaN input")
    factor = np.where(x.data >= 0, 1.0, slope)
    out = Tensor(x.data * factor, requires_grad=x.requires_grad)
    _maybe_record(out, lambda g: x.accumulate_grad(g * factor))
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, overflow-safe for any finite input."""
    y = _stable_sigmoid(x.data)
    out = Tensor(y, requires_grad=x.requires_grad)
    _maybe_record(out, lambda g: x.accumulate_grad(g * y * (1.0 - y)))
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + eˣ) via the log-sum-exp trick; gradient is sigmoid(x)."""
    out = Tensor(_stable_softplus(x.data), requires_grad=x.requires_grad)
    _maybe_record(out, lambda g: x.accumulate_grad(g * _stable_sigmoid(x.data)))
    return out


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise DomainError("log: non-positive input")
    out = Tensor(np.log(x.data), requires_grad=x.requires_grad)
    _maybe_record(out, lambda g: x.accumulate_grad(g / x.data))
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through un-clipped entries only."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = Tensor(np.clip(x.data, lo, hi), requires_grad=x.requires_grad)
    _maybe_record(out, lambda g: x.accumulate_grad(g * inside))
    return out


def masked_softmax(scores: Tensor, mask: Sequence[bool]) -> Tensor:
    """Softmax over masked-in entries of a vector; masked-out entries are
    exactly 0 and the masked-in entries sum to 1."""
    if scores.ndim != 1:
        raise ShapeError(f"masked_softmax expects a vector, got shape {scores.shape}")
    m = np.asarray(mask, dtype=bool)
    if m.shape != scores.shape:
        raise ShapeError(f"masked_softmax: mask shape {m.shape} != scores shape {scores.shape}")
    if not m.any():
        raise DomainError("masked_softmax: all-false mask")
    s = scores.data
    shifted = np.exp(s - s[m].max())
    shifted[~m] = 0.0
    y = shifted / shifted.sum()
    out = Tensor(y, requires_grad=scores.requires_grad)

    def _backward(g: np.ndarray) -> None:
        # y is 0 off-mask, so the softmax Jacobian formula zeroes those too.
        scores.accumulate_grad(y * (g - float((g * y).sum())))

    _maybe_record(out, _backward)
    return out


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C_in×L signal with C_out×C_in×K kernels.

    Zero padding; L_out = floor((L + 2·padding − K) / stride) + 1.
    Accumulates over (channel, tap) pairs in fixed loop order, so the
    output is bitwise-equal to the nested-loop formula.
    """
    if x.ndim != 2:
        raise ShapeError(f"conv1d input must be C_in×L, got shape {x.shape}")
    if kernels.ndim != 3:
        raise ShapeError(f"conv1d kernels must be C_out×C_in×K, got shape {kernels.shape}")
    c_in, length = x.shape
    c_out, kc_in, k = kernels.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d: input has {c_in} channels, kernels expect {kc_in}")
    if stride < 1:
        raise DomainError(f"conv1d stride must be ≥ 1, got {stride}")
    if padding < 0:
        raise DomainError(f"conv1d padding must be ≥ 0, got {padding}")
    if length + 2 * padding < k:
        raise ShapeError(
            f"conv1d: kernel length {k} exceeds padded input length {length + 2 * padding}"
        )
    l_out = (length + 2 * padding - k) // stride + 1
    xp = np.zeros((c_in, length + 2 * padding))
    xp[:, padding : padding + length] = x.data

    data = np.zeros((c_out, l_out))
    for ci in range(c_in):
        for t in range(k):
            patch = xp[ci, t : t + (l_out - 1) * stride + 1 : stride]
            data += kernels.data[:, ci, t : t + 1] * patch[np.newaxis, :]
    out = Tensor(data, requires_grad=_needs_grad(x, kernels))

    def _backward(g: np.ndarray) -> None:
        if kernels.requires_grad:
            gk = np.zeros_like(kernels.data)
            for ci in range(c_in):
                for t in range(k):
                    patch = xp[ci, t : t + (l_out - 1) * stride + 1 : stride]
                    gk[:, ci, t] = g @ patch
            kernels.accumulate_grad(gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for ci in range(c_in):
                for t in range(k):
                    gxp[ci, t : t + (l_out - 1) * stride + 1 : stride] += (
                        kernels.data[:, ci, t] @ g
                    )
            x.accumulate_grad(gxp[:, padding : padding + length])

    _maybe_record(out, _backward)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    out = Tensor(x.data.T.copy(), requires_grad=x.requires_grad)
    _maybe_record(out, lambda g: x.accumulate_grad(g.T))
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)
    _maybe_record(out, lambda g: x.accumulate_grad(g.reshape(x.shape)))
    return out


def pad_rows(rows: Sequence[Tensor], total: int) -> Tensor:
    """Stack 1×D (or length-D) tensors as the first rows of a total×D
    zero matrix."""
    if len(rows) > total:
        raise ShapeError(f"pad_rows: {len(rows)} rows exceed capacity {total}")
    if not rows:
        raise ShapeError("pad_rows: need at least one row to infer width")
    width = rows[0].data.reshape(-1).shape[0]
    data = np.zeros((total, width))
    for i, r in enumerate(rows):
        flat = r.data.reshape(-1)
        if flat.shape[0] != width:
            raise ShapeError(f"pad_rows: row {i} has width {flat.shape[0]}, expected {width}")
        data[i] = flat
    out = Tensor(data, requires_grad=any(r.requires_grad for r in rows))

    def _backward(g: np.ndarray) -> None:
        for i, r in enumerate(rows):
            if r.requires_grad:
                r.accumulate_grad(g[i].reshape(r.shape))

    _maybe_record(out, _backward)
    return out


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices with equal row counts along columns."""
    if not tensors:
        raise ShapeError("concat_cols: empty input")
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.ndim != 2 or t.shape[0] != rows:
            raise ShapeError("concat_cols: row counts differ")
    data = np.concatenate([t.data for t in tensors], axis=1)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in tensors))

    def _backward(g: np.ndarray) -> None:
        offset = 0
        for t in tensors:
            w = t.shape[1]
            if t.requires_grad:
                t.accumulate_grad(g[:, offset : offset + w])
            offset += w

    _maybe_record(out, _backward)
    return out


def mean_tensors(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of same-shaped tensors (multi-head averaging)."""
    if not tensors:
        raise ShapeError("mean_tensors: empty input")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"mean_tensors: shape {t.shape} != {shape}")
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    n = len(tensors)
    out = Tensor(acc / n, requires_grad=any(t.requires_grad for t in tensors))

    def _backward(g: np.ndarray) -> None:
        share = g / n
        for t in tensors:
            if t.requires_grad:
                t.accumulate_grad(share)

    _maybe_record(out, _backward)
    return out


def gat_attention(z: Tensor, attn: Tensor, mask: np.ndarray, slope: float) -> Tensor:
    """One head's attention coefficients over transformed node features.

    Raw score e_ij = LeakyReLU(aᵀ[z_i ‖ z_j]) for neighbor j of node i
    (mask[i, j] true), normalized per row by masked softmax. Fused into a
    single tape record for the per-snippet hot path.
    """
    if z.ndim != 2:
        raise ShapeError(f"gat_attention: node features must be a matrix, got {z.shape}")
    n, d = z.shape
    if attn.data.reshape(-1).shape[0] != 2 * d:
        raise ShapeError(
            f"gat_attention: attention vector length {attn.data.size} != 2·{d}"
        )
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise ShapeError(f"gat_attention: mask shape {mask.shape} != ({n}, {n})")
    if not mask.any(axis=1).all():
        raise DomainError("gat_attention: a node has an empty neighborhood")
    if not (0.0 < slope < 1.0):
        raise DomainError(f"gat_attention slope must be in (0, 1), got {slope}")

    a = attn.data.reshape(-1)
    a_self, a_nbr = a[:d], a[d:]
    u = z.data @ a_self  # score contribution of the center node i
    v = z.data @ a_nbr  # score contribution of the neighbor j
    raw = u[:, np.newaxis] + v[np.newaxis, :]
    act = np.where(raw >= 0, raw, slope * raw)
    shifted = act - np.where(mask, act, -np.inf).max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    ex[~mask] = 0.0
    alpha = ex / ex.sum(axis=1, keepdims=True)
    out = Tensor(alpha, requires_grad=_needs_grad(z, attn))

    def _backward(g: np.ndarray) -> None:
        g_act = alpha * (g - (g * alpha).sum(axis=1, keepdims=True))
        g_raw = g_act * np.where(raw >= 0, 1.0, slope)
        gu = g_raw.sum(axis=1)
        gv = g_raw.sum(axis=0)
        if z.requires_grad:
            z.accumulate_grad(np.outer(gu, a_self) + np.outer(gv, a_nbr))
        if attn.requires_grad:
            ga = np.concatenate([z.data.T @ gu, z.data.T @ gv])
            attn.accumulate_grad(ga.reshape(attn.shape))

    _maybe_record(out, _backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic closure over ``params`` that returns a
    scalar tensor. The error for each entry is
    |analytic − numeric| / max(1, |analytic|, |numeric|).
    """
    if not (1e-8 < eps < 1e-3):
        raise DomainError(f"grad_check eps must be in (1e-8, 1e-3), got {eps}")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: non-finite function output")
    tape.backward(out)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for idx in range(flat.shape[0]):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = f().item()
            flat[idx] = orig - eps
            lo = f().item()
            flat[idx] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("grad_check: non-finite function output during probing")
            num = (hi - lo) / (2.0 * eps)
            a = ana_flat[idx]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            if err > worst:
                worst = err
    return worst

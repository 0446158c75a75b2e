"""Reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor wraps a row-major float64 array of rank <= 3 and remembers the
operation that produced it. ``backward()`` walks the recorded graph once in
reverse topological order and accumulates ``grad`` arrays on every tensor
reachable from the loss that requires gradients. Everything is deterministic:
identical inputs produce bit-identical outputs, and masked attention weights
are exactly zero at masked positions.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np


class Tensor:
    """Array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ValueError(f"rank {arr.ndim} tensor not supported (max rank 3)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate through the trace."""
        if self.data.shape != ():
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        order = trace(self)
        self._accumulate(np.ones(()))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; constants enter the graph as requires_grad=False tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def trace(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below ``root`` (parents before children)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def add(a: Tensor, b) -> Tensor:
    """Elementwise a + b; b may be a scalar or a (d,) row vector against (n, d)."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        data = a.data + float(b)

        def bw(g):
            a._accumulate(g)

        return _make(data, (a,), bw)
    b = _as_tensor(b)
    if a.shape == b.shape:
        data = a.data + b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

        return _make(data, (a, b), bw)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        data = a.data + b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g.sum(axis=0))

        return _make(data, (a, b), bw)
    raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise a * b; b may be a python scalar."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        data = a.data * c

        def bw(g):
            a._accumulate(g * c)

        return _make(data, (a,), bw)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (n, k) and b (k, m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    """Transpose of a rank-2 tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects rank 2, got shape {a.shape}")
    data = a.data.T.copy()

    def bw(g):
        a._accumulate(g.T)

    return _make(data, (a,), bw)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())

    def bw(g):
        a._accumulate(np.full_like(a.data, float(g)))

    return _make(data, (a,), bw)


def tmean(a: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ValueError("mean of an empty tensor")
    return mul(tsum(a), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    keep = a.data > 0.0
    data = np.where(keep, a.data, 0.0)

    def bw(g):
        a._accumulate(g * keep)

    return _make(data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    """Natural log; inputs must be strictly positive (clip first)."""
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive inputs")
    data = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through where lo <= x <= hi."""
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        a._accumulate(g * inside)

    return _make(data, (a,), bw)


def smooth_l1(a: Tensor) -> Tensor:
    """Elementwise smooth L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    a = _as_tensor(a)
    absx = np.abs(a.data)
    quad = absx < 1.0
    data = np.where(quad, 0.5 * a.data * a.data, absx - 0.5)

    def bw(g):
        a._accumulate(g * np.where(quad, a.data, np.sign(a.data)))

    return _make(data, (a,), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties route the gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"minimum shape mismatch: {a.shape} vs {b.shape}")
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * take_a)
        if b.requires_grad:
            b._accumulate(g * ~take_a)

    return _make(data, (a, b), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise maximum; ties route the gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"maximum shape mismatch: {a.shape} vs {b.shape}")
    take_a = a.data >= b.data
    data = np.where(take_a, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * take_a)
        if b.requires_grad:
            b._accumulate(g * ~take_a)

    return _make(data, (a, b), bw)


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows of a rank-2 tensor; repeated indices accumulate gradient."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"gather_rows expects rank 2, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for shape {a.shape}")
    data = a.data[idx]

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        a._accumulate(acc)

    return _make(data, (a,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-2 tensors along axis 0."""
    parts = [_as_tensor(p) for p in parts]
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ValueError(f"concat_rows width mismatch: {[p.shape for p in parts]}")
    data = np.concatenate([p.data for p in parts], axis=0)
    counts = [p.shape[0] for p in parts]

    def bw(g):
        at = 0
        for p, n in zip(parts, counts):
            if p.requires_grad:
                p._accumulate(g[at : at + n])
            at += n

    return _make(data, tuple(parts), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-2 tensors along axis 1."""
    parts = [_as_tensor(p) for p in parts]
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise ValueError(f"concat_cols height mismatch: {[p.shape for p in parts]}")
    data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]

    def bw(g):
        at = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._accumulate(g[:, at : at + w])
            at += w

    return _make(data, tuple(parts), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of a rank-2 tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise ValueError(f"slice_rows [{start}:{stop}] invalid for shape {a.shape}")
    data = a.data[start:stop].copy()

    def bw(g):
        acc = np.zeros_like(a.data)
        acc[start:stop] = g
        a._accumulate(acc)

    return _make(data, (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a rank-2 tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ValueError(f"slice_cols [{start}:{stop}] invalid for shape {a.shape}")
    data = a.data[:, start:stop].copy()

    def bw(g):
        acc = np.zeros_like(a.data)
        acc[:, start:stop] = g
        a._accumulate(acc)

    return _make(data, (a,), bw)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax over positions where mask is True; masked weights are exactly 0.

    scores is (q, k), mask a boolean (q, k). Each unmasked row maximum is
    subtracted before exponentiation. A row with no True entry is degenerate.
    """
    scores = _as_tensor(scores)
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise ValueError(f"mask must be boolean, got dtype {mask.dtype}")
    if scores.data.ndim != 2 or mask.shape != scores.shape:
        raise ValueError(f"masked_softmax shape mismatch: {scores.shape} vs {mask.shape}")
    rows_ok = mask.any(axis=1)
    if not rows_ok.all():
        bad = int(np.flatnonzero(~rows_ok)[0])
        raise ValueError(f"masked_softmax: row {bad} has no unmasked entry")
    neg = np.where(mask, scores.data, -np.inf)
    m = neg.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(scores.data - m), 0.0)
    data = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=1, keepdims=True)
        scores._accumulate(data * (g - dot))

    return _make(data, (scores,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of x (n, d) with learned gain and bias (d,)."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 2:
        raise ValueError(f"layer_norm expects rank 2, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    if eps <= 0.0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            h = g * gain.data
            x._accumulate(
                inv
                * (
                    h
                    - h.mean(axis=1, keepdims=True)
                    - xhat * (h * xhat).mean(axis=1, keepdims=True)
                )
            )

    return _make(data, (x, gain, bias), bw)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of the scalar f() against central differences.

    Returns the max over checked coordinates of
    |g_analytic - g_fd| / max(1e-8, |g_analytic| + |g_fd|).
    When ``samples`` is given, that many coordinates are drawn with ``rng``;
    otherwise every coordinate of every parameter is checked.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ValueError("finite_diff_check: non-finite loss")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    coords: list[tuple[int, int]] = []
    if samples is None:
        for pi, p in enumerate(params):
            coords.extend((pi, off) for off in range(p.data.size))
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        sizes = np.array([p.data.size for p in params])
        if sizes.sum() == 0:
            raise ValueError("finite_diff_check: no parameters to sample")
        for _ in range(samples):
            pi = int(rng.integers(len(params)))
            coords.append((pi, int(rng.integers(sizes[pi]))))

    worst = 0.0
    for pi, off in coords:
        p = params[pi]
        saved = p.data
        bumped = saved.copy()
        bumped.flat[off] += step
        p.data = bumped
        f_plus = f().item()
        bumped = saved.copy()
        bumped.flat[off] -= step
        p.data = bumped
        f_minus = f().item()
        p.data = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError("finite_diff_check: non-finite loss under perturbation")
        g_fd = (f_plus - f_minus) / (2.0 * step)
        g_an = float(analytic[pi].flat[off])
        rel = abs(g_an - g_fd) / max(1e-8, abs(g_an) + abs(g_fd))
        worst = max(worst, rel)
    return worst

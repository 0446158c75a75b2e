"""Windowed attention over a joint visual-text token sequence.

The joint sequence holds T visual tokens followed by L text tokens, indexed
0-based. A visual query at position i < T may attend to the visual window
{max(0, i-r) .. min(T-1, i+r)} plus every text token; text queries attend
everywhere. Full attention is the r >= T-1 special case and shares the same
masked code path, so the two agree bit for bit when the window covers the
whole video.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, concat_cols, masked_softmax, matmul, mul, transpose


@dataclass
class JointSequence:
    """Concatenated visual and text embeddings, visual block first."""

    x: Tensor
    visual_len: int
    text_len: int

    def __post_init__(self):
        if self.visual_len < 1 or self.text_len < 1:
            raise ValueError(
                f"need at least one visual and one text token, got {self.visual_len}/{self.text_len}"
            )
        if self.x.data.ndim != 2 or self.x.shape[0] != self.visual_len + self.text_len:
            raise ValueError(
                f"sequence of shape {self.x.shape} does not hold {self.visual_len}+{self.text_len} rows"
            )


@dataclass
class AttentionParams:
    """Per-head projections (D x D/heads each) and output projection (D x D)."""

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor

    def __post_init__(self):
        h = len(self.w_q)
        if h < 1 or len(self.w_k) != h or len(self.w_v) != h:
            raise ValueError("w_q, w_k, w_v must hold one matrix per head")
        d, dh = self.w_q[0].shape
        if d != h * dh:
            raise ValueError(f"head width {dh} times {h} heads does not give model width {d}")
        for w in (*self.w_q, *self.w_k, *self.w_v):
            if w.shape != (d, dh):
                raise ValueError(f"projection shape {w.shape} does not match {(d, dh)}")
        if self.w_o.shape != (d, d):
            raise ValueError(f"output projection shape {self.w_o.shape} does not match {(d, d)}")

    @property
    def d_model(self) -> int:
        return self.w_q[0].shape[0]

    @property
    def heads(self) -> int:
        return len(self.w_q)

    def tensors(self) -> list[Tensor]:
        return [*self.w_q, *self.w_k, *self.w_v, self.w_o]


def init_attention_params(d_model: int, heads: int, rng: np.random.Generator) -> AttentionParams:
    """Uniform(-1/sqrt(D), 1/sqrt(D)) projections, trainable."""
    if d_model % heads != 0:
        raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
    dh = d_model // heads
    bound = 1.0 / np.sqrt(d_model)

    def mat(rows, cols):
        return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)

    return AttentionParams(
        w_q=[mat(d_model, dh) for _ in range(heads)],
        w_k=[mat(d_model, dh) for _ in range(heads)],
        w_v=[mat(d_model, dh) for _ in range(heads)],
        w_o=mat(d_model, d_model),
    )


def neighbor_key_set(i: int, radius: int, visual_len: int, text_len: int) -> list[int]:
    """Key indices visible to visual query i: clamped window plus the text block."""
    _check_lengths(visual_len, text_len, radius)
    if not 0 <= i < visual_len:
        raise IndexError(f"visual index {i} out of range [0, {visual_len})")
    lo = max(0, i - radius)
    hi = min(visual_len - 1, i + radius)
    return list(range(lo, hi + 1)) + list(range(visual_len, visual_len + text_len))


def build_mask(visual_len: int, text_len: int, radius: int) -> np.ndarray:
    """Boolean (T+L, T+L) visibility mask; text query rows are all True."""
    _check_lengths(visual_len, text_len, radius)
    s = visual_len + text_len
    mask = np.zeros((s, s), dtype=bool)
    mask[visual_len:, :] = True
    mask[:visual_len, visual_len:] = True
    idx = np.arange(visual_len)
    mask[:visual_len, :visual_len] = np.abs(idx[:, None] - idx[None, :]) <= radius
    return mask


def _check_lengths(visual_len: int, text_len: int, radius: int) -> None:
    if visual_len < 1 or text_len < 1:
        raise ValueError(f"need T >= 1 and L >= 1, got {visual_len}/{text_len}")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")


def _masked_attention(x: Tensor, params: AttentionParams, mask: np.ndarray) -> Tensor:
    dh = params.d_model // params.heads
    scale = 1.0 / np.sqrt(dh)
    heads = []
    for w_q, w_k, w_v in zip(params.w_q, params.w_k, params.w_v):
        q = matmul(x, w_q)
        k = matmul(x, w_k)
        v = matmul(x, w_v)
        weights = masked_softmax(mul(matmul(q, transpose(k)), scale), mask)
        heads.append(matmul(weights, v))
    return matmul(concat_cols(heads), params.w_o)


def full_attention(seq: JointSequence, params: AttentionParams) -> Tensor:
    """Multi-head attention where every token attends to every token."""
    mask = np.ones((seq.visual_len + seq.text_len,) * 2, dtype=bool)
    return _masked_attention(seq.x, params, mask)


def neighboring_attention(seq: JointSequence, params: AttentionParams, radius: int) -> Tensor:
    """Multi-head attention under the window-plus-text visibility mask."""
    return _masked_attention(seq.x, params, build_mask(seq.visual_len, seq.text_len, radius))


def attention_op_count(visual_len: int, text_len: int, radius: int | None = None) -> int:
    """Exact query-key pair count: (T+L)^2 for full, window-clamped for NA."""
    if radius is None:
        _check_lengths(visual_len, text_len, 0)
        return (visual_len + text_len) ** 2
    _check_lengths(visual_len, text_len, radius)
    i = np.arange(visual_len)
    widths = np.minimum(visual_len - 1, i + radius) - np.maximum(0, i - radius) + 1
    visual_pairs = int(widths.sum()) + visual_len * text_len
    text_pairs = text_len * (visual_len + text_len)
    return visual_pairs + text_pairs


# Plain-numpy forward passes for the cost benchmark. Same arithmetic as the
# differentiable path (per-head projections, max-subtracted softmax over the
# visible key set) but without graph bookkeeping, and the windowed variant
# only touches keys inside the window, so its runtime tracks the op count.


def full_forward_numpy(x: np.ndarray, params: AttentionParams) -> np.ndarray:
    dh = params.d_model // params.heads
    scale = 1.0 / np.sqrt(dh)
    outs = []
    for w_q, w_k, w_v in zip(params.w_q, params.w_k, params.w_v):
        q = x @ w_q.data
        k = x @ w_k.data
        v = x @ w_v.data
        s = (q @ k.T) * scale
        s -= s.max(axis=1, keepdims=True)
        e = np.exp(s)
        outs.append((e / e.sum(axis=1, keepdims=True)) @ v)
    return np.concatenate(outs, axis=1) @ params.w_o.data


def na_forward_numpy(
    x: np.ndarray, params: AttentionParams, visual_len: int, radius: int
) -> np.ndarray:
    t = visual_len
    dh = params.d_model // params.heads
    scale = 1.0 / np.sqrt(dh)
    # gathered window indices, clamped; clamp duplicates are masked out
    raw = np.arange(t)[:, None] + np.arange(-radius, radius + 1)[None, :]
    valid = (raw >= 0) & (raw < t)
    idx = np.clip(raw, 0, t - 1)
    outs = []
    for w_q, w_k, w_v in zip(params.w_q, params.w_k, params.w_v):
        q = x @ w_q.data
        k = x @ w_k.data
        v = x @ w_v.data
        s_win = np.einsum("td,twd->tw", q[:t], k[idx]) * scale
        s_txt = (q[:t] @ k[t:].T) * scale
        m = np.maximum(
            np.where(valid, s_win, -np.inf).max(axis=1), s_txt.max(axis=1)
        )[:, None]
        e_win = np.where(valid, np.exp(s_win - m), 0.0)
        e_txt = np.exp(s_txt - m)
        z = e_win.sum(axis=1) + e_txt.sum(axis=1)
        vis = (np.einsum("tw,twd->td", e_win, v[idx]) + e_txt @ v[t:]) / z[:, None]
        s_full = (q[t:] @ k.T) * scale
        s_full -= s_full.max(axis=1, keepdims=True)
        e_full = np.exp(s_full)
        txt = (e_full / e_full.sum(axis=1, keepdims=True)) @ v
        outs.append(np.concatenate([vis, txt], axis=0))
    return np.concatenate(outs, axis=1) @ params.w_o.data

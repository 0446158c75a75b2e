"""Two-stage boundary detection over the fused per-layer visual features.

Stage 1 scores one anchor per (frame, scale) pair through a pair of MLP heads
shared by every layer; each layer only predicts the scales it owns. Stage 2
picks the top-N spans, samples three fused feature rows per span (start,
middle, end), and refines score and boundaries from that 6D descriptor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from collections.abc import Sequence

import numpy as np

from .errors import ParseError
from .model import GroundingModel, LayerOutput, MLPParams, RadiusSchedule, mlp_forward
from .numerics import (
    Tensor,
    add,
    clip,
    concat_cols,
    concat_rows,
    gather_rows,
    maximum,
    minimum,
    sigmoid,
    slice_cols,
)


@dataclass
class Anchor:
    """Fixed candidate span: center frame t, half-width ``scale``."""

    t: int
    scale: int
    scale_index: int
    layer: int
    span: tuple[float, float]
    clipped: tuple[float, float]


def round_half_up(x: float) -> int:
    """0.5 always rounds away from zero toward +inf (no banker's rounding)."""
    return int(math.floor(x + 0.5))


def iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Continuous IoU of two canonical [start, end] spans; 0 on zero union."""
    if a[0] > a[1] or b[0] > b[1]:
        raise ValueError(f"spans must satisfy start <= end, got {a} and {b}")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def generate_anchors(
    video_len: int, scales: Sequence[int], schedule: RadiusSchedule
) -> list[Anchor]:
    """One anchor per (frame, scale), frame-major then ascending scale."""
    if video_len < 1:
        raise ValueError(f"need video_len >= 1, got {video_len}")
    scales = [int(s) for s in scales]
    if any(a >= b for a, b in zip(scales, scales[1:])):
        raise ValueError(f"anchor scales must be strictly increasing, got {scales}")
    owners = {s: schedule.owning_layer(s) for s in scales}
    anchors = []
    for t in range(video_len):
        for h, s in enumerate(scales):
            raw = (float(t - s), float(t + s))
            clipped = (max(0.0, raw[0]), min(float(video_len - 1), raw[1]))
            anchors.append(Anchor(t, s, h, owners[s], raw, clipped))
    return anchors


@dataclass
class PredictionUnit:
    """Stage-1 outputs for one owned (layer, scale): graph nodes per frame."""

    layer: int
    slot: int
    scale: int
    scale_index: int
    scores: Tensor  # (T, 1) in (0, 1)
    spans: Tensor  # (T, 2) clipped regressed spans


@dataclass
class Stage1Output:
    anchors: list[Anchor]
    units: list[PredictionUnit]  # ascending scale_index
    video_len: int
    n_scales: int

    def scores_flat(self) -> np.ndarray:
        """Anchor-ordered scores (H*T,), index = t * H + scale_index."""
        out = np.empty(self.n_scales * self.video_len)
        for u in self.units:
            out[u.scale_index :: self.n_scales] = u.scores.data[:, 0]
        return out

    def spans_flat(self) -> np.ndarray:
        """Anchor-ordered regressed spans (H*T, 2)."""
        out = np.empty((self.n_scales * self.video_len, 2))
        for u in self.units:
            out[u.scale_index :: self.n_scales] = u.spans.data
        return out


def stage1_heads(
    layer_outputs: Sequence[LayerOutput],
    schedule: RadiusSchedule,
    cls_head: MLPParams,
    reg_head: MLPParams,
    scales: Sequence[int],
) -> Stage1Output:
    """Score and regress every anchor from the fused features of its layer."""
    video_len = layer_outputs[0].v_hat.shape[0]
    anchors = generate_anchors(video_len, scales, schedule)
    scale_index = {s: h for h, s in enumerate(scales)}
    units = []
    for j, out in enumerate(layer_outputs):
        owned = schedule.owned_scales(j)
        if not owned:
            continue
        scores = sigmoid(mlp_forward(out.v_hat, cls_head))
        offsets = mlp_forward(out.v_hat, reg_head)
        for scale in owned:
            slot = schedule.per_layer_scales[j].index(scale)
            base = np.stack(
                [np.arange(video_len) - scale, np.arange(video_len) + scale], axis=1
            ).astype(np.float64)
            spans = clip(
                add(slice_cols(offsets, 2 * slot, 2 * slot + 2), Tensor(base)),
                0.0,
                float(video_len - 1),
            )
            units.append(
                PredictionUnit(
                    layer=j,
                    slot=slot,
                    scale=scale,
                    scale_index=scale_index[scale],
                    scores=slice_cols(scores, slot, slot + 1),
                    spans=spans,
                )
            )
    units.sort(key=lambda u: u.scale_index)
    return Stage1Output(anchors, units, video_len, len(scales))


@dataclass
class Candidate:
    """A span entering stage 2, either selected from stage 1 or injected."""

    start: float
    end: float
    score: float
    t: int | None  # source frame row inside the unit tensors
    unit: PredictionUnit | None
    scale_index: int | None

    @property
    def injected(self) -> bool:
        return self.unit is None

    @property
    def length(self) -> float:
        return self.end - self.start


def select_top_n(stage1: Stage1Output, n: int) -> list[Candidate]:
    """Top min(n, H*T) anchors by score; ties by earlier start, smaller scale."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    scores = stage1.scores_flat()
    spans = stage1.spans_flat()
    h = stage1.n_scales
    scale_idx = np.arange(len(scores)) % h
    order = np.lexsort((scale_idx, spans[:, 0], -scores))
    picked = []
    for flat in order[: min(n, len(scores))]:
        flat = int(flat)
        t, hi = divmod(flat, h)
        unit = stage1.units[hi]  # units are ordered by scale_index
        picked.append(
            Candidate(
                start=float(spans[flat, 0]),
                end=float(spans[flat, 1]),
                score=float(scores[flat]),
                t=t,
                unit=unit,
                scale_index=hi,
            )
        )
    return picked


def nearest_layer(schedule: RadiusSchedule, length: float) -> int:
    """Layer whose max owned scale is nearest the span length; deeper wins ties."""
    maxes = [max(s) for s in schedule.per_layer_scales]
    best = 0
    best_gap = abs(maxes[0] - length)
    for j in range(1, len(maxes)):
        gap = abs(maxes[j] - length)
        if gap <= best_gap:
            best, best_gap = j, gap
    return best


def roi_sample(
    candidates: Sequence[Candidate],
    layer_outputs: Sequence[LayerOutput],
    schedule: RadiusSchedule,
) -> Tensor:
    """Sample start/middle/end fused rows per candidate into a (N', 6D) block."""
    if not candidates:
        raise ValueError("no candidates to sample")
    video_len = layer_outputs[0].v_hat.shape[0]
    rows = []
    for c in candidates:
        layer = nearest_layer(schedule, c.length) if c.unit is None else c.unit.layer
        positions = [
            min(video_len - 1, max(0, round_half_up(p)))
            for p in (c.start, 0.5 * (c.start + c.end), c.end)
        ]
        parts = [gather_rows(layer_outputs[layer].v_hat, [p]) for p in positions]
        rows.append(concat_cols(parts))
    return concat_rows(rows)


@dataclass
class Stage2Output:
    candidates: list[Candidate]
    scores: Tensor  # (N', 1)
    spans: Tensor  # (N', 2) clipped, canonical

    def proposals(self) -> list["Proposal"]:
        """Refined spans ranked by refined score, best first."""
        items = [
            Proposal(float(self.spans.data[i, 0]), float(self.spans.data[i, 1]),
                     float(self.scores.data[i, 0]))
            for i in range(len(self.candidates))
        ]
        items.sort(key=lambda p: (-p.score, p.start, p.end))
        return items


def stage2_refine(
    candidates: Sequence[Candidate],
    rois: Tensor,
    cls_head: MLPParams,
    reg_head: MLPParams,
    video_len: int,
) -> Stage2Output:
    """Refine each candidate span and rescore it from its ROI descriptor."""
    scores = sigmoid(mlp_forward(rois, cls_head))
    offsets = mlp_forward(rois, reg_head)
    bases = []
    for c in candidates:
        if c.unit is None:
            bases.append(Tensor(np.array([[c.start, c.end]])))
        else:
            bases.append(gather_rows(c.unit.spans, [c.t]))
    refined = clip(add(concat_rows(bases), offsets), 0.0, float(video_len - 1))
    lo = slice_cols(refined, 0, 1)
    hi = slice_cols(refined, 1, 2)
    spans = concat_cols([minimum(lo, hi), maximum(lo, hi)])
    return Stage2Output(list(candidates), scores, spans)


@dataclass
class Proposal:
    start: float
    end: float
    score: float


def zoom_in_detect(
    model: GroundingModel, features: np.ndarray, token_ids: Sequence[int], top_n: int
) -> list[Proposal]:
    """Full inference pipeline: encode, score anchors, zoom in, rank."""
    layer_outputs = model.forward(features, token_ids)
    stage1 = stage1_heads(
        layer_outputs, model.schedule, model.head1_cls, model.head1_reg,
        model.config.anchor_scales,
    )
    candidates = select_top_n(stage1, top_n)
    rois = roi_sample(candidates, layer_outputs, model.schedule)
    video_len = layer_outputs[0].v_hat.shape[0]
    stage2 = stage2_refine(candidates, rois, model.head2_cls, model.head2_reg, video_len)
    return stage2.proposals()


def write_predictions(path: str, records: Sequence[tuple[str, Sequence[Proposal]]]) -> None:
    """One JSON object per line: query_id plus [start, end, score] rows."""
    with open(path, "w", encoding="utf-8") as fh:
        for query_id, proposals in records:
            obj = {
                "query_id": query_id,
                "proposals": [[p.start, p.end, p.score] for p in proposals],
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def read_predictions(path: str) -> dict[str, list[Proposal]]:
    """Read a prediction dump; proposals must arrive sorted by score."""
    out: dict[str, list[Proposal]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                query_id = obj["query_id"]
                props = [Proposal(float(s), float(e), float(sc)) for s, e, sc in obj["proposals"]]
            except (ValueError, KeyError, TypeError) as e:
                raise ParseError(f"bad prediction record: {e}", lineno) from e
            if any(a.score < b.score for a, b in zip(props, props[1:])):
                raise ParseError("proposals not sorted by descending score", lineno)
            if query_id in out:
                raise ParseError(f"duplicate query_id {query_id!r}", lineno)
            out[query_id] = props
    return out

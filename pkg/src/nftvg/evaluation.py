"""Recall metrics, SNR-bucketed breakdowns, and the attention cost benchmark.

A query counts as recalled at (n, m) when any of its n best proposals has
IoU strictly greater than m with the single ground-truth span. Queries with
no predictions count as misses and are surfaced in the report rather than
raised. The benchmark times plain forward passes of the full and windowed
attention paths and pairs each timing with the exact query-key pair count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from collections.abc import Mapping, Sequence

import numpy as np

from .attention import (
    attention_op_count,
    full_forward_numpy,
    init_attention_params,
    na_forward_numpy,
)
from .data import Annotation, compute_snr
from .detection import Proposal, iou


def _hit(proposals: Sequence[Proposal], gt: tuple[float, float], n: int, m: float) -> bool:
    return any(iou((p.start, p.end), gt) > m for p in proposals[:n])


def recall_at(
    predictions: Mapping[str, Sequence[Proposal]],
    annotations: Sequence[Annotation],
    n: int,
    m: float,
) -> float:
    """Percentage of queries whose top-n proposals contain an IoU > m hit."""
    if not annotations:
        raise ValueError("recall_at over an empty query set")
    if n < 1 or not 0.0 <= m < 1.0:
        raise ValueError(f"need n >= 1 and 0 <= m < 1, got n={n}, m={m}")
    hits = 0
    for ann in annotations:
        props = predictions.get(ann.query_id, [])
        if props and _hit(props, (ann.t_s, ann.t_e), n, m):
            hits += 1
    return 100.0 * hits / len(annotations)


def missing_queries(
    predictions: Mapping[str, Sequence[Proposal]], annotations: Sequence[Annotation]
) -> list[str]:
    """Query ids with no predictions at all; they score as misses."""
    return [a.query_id for a in annotations if not predictions.get(a.query_id)]


def snr_buckets(
    predictions: Mapping[str, Sequence[Proposal]],
    annotations: Sequence[Annotation],
    edges: Sequence[float],
    n_values: Sequence[int],
    m_values: Sequence[float],
) -> list[dict]:
    """Recall grid per SNR bucket; buckets are [lo, hi), the last closed."""
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(a >= b for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bucket edges must be strictly increasing, got {edges}")
    rows = []
    for lo, hi in zip(edges, edges[1:]):
        last = hi == edges[-1]
        members = [
            a for a in annotations
            if lo <= compute_snr(a) < hi or (last and compute_snr(a) == hi)
        ]
        recall = {}
        for n in n_values:
            for m in m_values:
                key = f"R@{n},IoU@{m:g}"
                recall[key] = recall_at(predictions, members, n, m) if members else 0.0
        rows.append({"lo": lo, "hi": hi, "count": len(members), "recall": recall})
    return rows


def make_report(
    predictions: Mapping[str, Sequence[Proposal]],
    annotations: Sequence[Annotation],
    n_values: Sequence[int] = (1, 5),
    m_values: Sequence[float] = (0.5, 0.7),
    bucket_edges: Sequence[float] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
) -> dict:
    """Full evaluation report as a JSON-ready dict."""
    recall = {
        f"R@{n},IoU@{m:g}": recall_at(predictions, annotations, n, m)
        for n in n_values
        for m in m_values
    }
    return {
        "recall": recall,
        "snr_buckets": snr_buckets(predictions, annotations, bucket_edges, n_values, m_values),
        "query_count": len(annotations),
        "missing_predictions": len(missing_queries(predictions, annotations)),
    }


@dataclass
class BenchRow:
    config: str
    op_count: int
    wall_ms_median: float
    wall_ms_stddev: float


def _time_forward(fn, repeats: int) -> tuple[float, float]:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    if repeats > 1:
        times = times[max(1, repeats // 10):]  # warmup excluded
    arr = np.asarray(times)
    return float(np.median(arr)), float(arr.std())

def bench_report(
    t_values: Sequence[int],
    text_len: int,
    radii: Sequence[int],
    repeats: int,
    d_model: int = 64,
    heads: int = 4,
    seed: int = 0,
) -> list[BenchRow]:
    """Wall time and exact op count for full attention and each radius."""
    if repeats < 1:
        raise ValueError(f"need repeats >= 1, got {repeats}")
    rng = np.random.default_rng(seed)
    params = init_attention_params(d_model, heads, rng)
    rows = []
    for t in t_values:
        x = rng.normal(size=(t + text_len, d_model))
        med, std = _time_forward(lambda: full_forward_numpy(x, params), repeats)
        rows.append(BenchRow(f"T{t}_L{text_len}_full", attention_op_count(t, text_len), med, std))
        for r in radii:
            med, std = _time_forward(
                lambda: na_forward_numpy(x, params, t, r), repeats
            )
            rows.append(
                BenchRow(f"T{t}_L{text_len}_r{r}", attention_op_count(t, text_len, r), med, std)
            )
    return rows


BENCH_HEADER = "config,op_count,wall_ms_median,wall_ms_stddev"


def write_bench_csv(path: str, rows: Sequence[BenchRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(BENCH_HEADER + "\n")
        for row in rows:
            fh.write(f"{row.config},{row.op_count},{row.wall_ms_median!r},{row.wall_ms_stddev!r}\n")

"""End-to-end training of both detection stages with a shared Adam loop.

Stage-1 anchors get soft IoU targets against the ground-truth span; the
binary cross entropy runs over all H*T anchors and the smooth L1 regression
only over anchors whose IoU clears the positive threshold. Stage 2 sees the
top-N spans plus N_pos jittered copies of the ground truth (training only)
and is weighed into the total loss by lambda. Regression always works on
spans divided by the video length so the loss weights transfer across T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from collections.abc import Callable, Sequence

import numpy as np

from .detection import (
    Anchor,
    Candidate,
    Stage1Output,
    iou,
    roi_sample,
    select_top_n,
    stage1_heads,
    stage2_refine,
)
from .model import GroundingModel
from .numerics import Tensor, add, clip, concat_rows, gather_rows, log, mul, smooth_l1, tsum

PROB_FLOOR = 1e-7


class TrainingDiverged(RuntimeError):
    """Raised when the total loss stops being finite."""

    def __init__(self, step: int, components: dict[str, float]):
        detail = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step
        self.components = components


@dataclass
class TrainConfig:
    steps: int = 1200
    batch_size: int = 4
    lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    top_n: int = 16
    n_pos: int = 4
    mu: float = 1e-3
    lam: float = 0.1
    iou_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.top_n < 1 or self.n_pos < 0:
            raise ValueError("steps, batch_size, top_n must be >= 1 and n_pos >= 0")
        if not 0.0 <= self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold must lie in [0, 1), got {self.iou_threshold}")


@dataclass
class Sample:
    """One training example: frame features, query tokens, gt span in frames."""

    features: np.ndarray
    token_ids: list[int]
    span: tuple[float, float]


@dataclass
class LabelAssignment:
    labels: np.ndarray  # (K,) soft IoU targets
    positives: list[int]  # indices with label strictly above threshold
    degenerate: bool  # gt span had zero length


def assign_labels(
    anchors: Sequence[Anchor], gt: tuple[float, float], threshold: float
) -> LabelAssignment:
    """Soft labels: IoU(clipped anchor span, gt); positive iff IoU > threshold."""
    if gt[0] > gt[1]:
        raise ValueError(f"gt span must satisfy start <= end, got {gt}")
    degenerate = gt[1] - gt[0] <= 0.0
    labels = np.array([iou(a.clipped, gt) for a in anchors])
    positives = [i for i in range(len(anchors)) if labels[i] > threshold]
    return LabelAssignment(labels, positives, degenerate)


def span_labels(
    spans: Sequence[tuple[float, float]], gt: tuple[float, float], threshold: float
) -> LabelAssignment:
    """Like assign_labels but for free spans; non-canonical spans are swapped."""
    if gt[0] > gt[1]:
        raise ValueError(f"gt span must satisfy start <= end, got {gt}")
    canon = [(min(s, e), max(s, e)) for s, e in spans]
    labels = np.array([iou(c, gt) for c in canon])
    positives = [i for i in range(len(spans)) if labels[i] > threshold]
    return LabelAssignment(labels, positives, gt[1] - gt[0] <= 0.0)


def classification_loss(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy with probabilities clamped away from {0, 1}."""
    k = probs.data.size
    if k == 0:
        raise ValueError("classification_loss over an empty score set")
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != probs.data.shape:
        raise ValueError(f"targets shape {t.shape} does not match scores {probs.data.shape}")
    p = clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    one_minus_p = add(mul(p, -1.0), 1.0)
    per = add(mul(log(p), Tensor(t)), mul(log(one_minus_p), Tensor(1.0 - t)))
    return mul(tsum(per), -1.0 / k)


def regression_loss(pred_spans: Tensor, gt: tuple[float, float], video_len: int) -> Tensor:
    """Smooth L1 over positive spans, both endpoints normalized by T."""
    n = pred_spans.data.shape[0] if pred_spans.data.ndim == 2 else 0
    if n == 0:
        return Tensor(0.0)
    gt_row = Tensor(-np.asarray(gt, dtype=np.float64))
    diff = mul(add(pred_spans, gt_row), 1.0 / video_len)
    return mul(tsum(smooth_l1(diff)), 1.0 / n)


def stage_loss(cls_term: Tensor, reg_term: Tensor, mu: float) -> Tensor:
    return add(cls_term, mul(reg_term, mu))


def total_loss(stage1: Tensor, stage2: Tensor, lam: float) -> Tensor:
    return add(stage1, mul(stage2, lam))


def inject_positives(
    gt: tuple[float, float], n_pos: int, rng: np.random.Generator, video_len: int
) -> list[Candidate]:
    """Jittered gt copies (each endpoint moved at most 10% of gt length)."""
    length = gt[1] - gt[0]
    out = []
    for _ in range(n_pos):
        u_s, u_e = rng.uniform(-0.1 * length, 0.1 * length, size=2)
        s = min(max(gt[0] + u_s, 0.0), float(video_len - 1))
        e = min(max(gt[1] + u_e, 0.0), float(video_len - 1))
        if s > e:
            s, e = e, s
        out.append(Candidate(start=s, end=e, score=0.0, t=None, unit=None, scale_index=None))
    return out


def _stage1_losses(
    stage1: Stage1Output, gt: tuple[float, float], cfg: TrainConfig
) -> tuple[Tensor, Tensor, LabelAssignment]:
    assignment = assign_labels(stage1.anchors, gt, cfg.iou_threshold)
    h = stage1.n_scales
    # unit tensors are frame-ordered per scale; pull matching label slices
    scores_cat = concat_rows([u.scores for u in stage1.units])
    labels_cat = np.concatenate(
        [assignment.labels[u.scale_index :: h] for u in stage1.units]
    ).reshape(-1, 1)
    l_cls = classification_loss(scores_cat, labels_cat)

    by_unit: dict[int, list[int]] = {}
    for flat in assignment.positives:
        t, hi = divmod(flat, h)
        by_unit.setdefault(hi, []).append(t)
    parts = [gather_rows(stage1.units[hi].spans, rows) for hi, rows in sorted(by_unit.items())]
    if parts:
        pred = concat_rows(parts) if len(parts) > 1 else parts[0]
        l_reg = regression_loss(pred, gt, stage1.video_len)
    else:
        l_reg = Tensor(0.0)
    return l_cls, l_reg, assignment


@dataclass
class Stage2Plan:
    """Frozen discrete choices of one training step: which spans enter stage 2
    and what their targets are. Labels and selection are data, not functions
    of the parameters, so gradient probes can replay the same plan."""

    picks: list[tuple[int, int]]  # (scale_index, frame) of selected anchors
    injected: list[tuple[float, float]]
    labels: np.ndarray  # (N',) soft targets for the candidate list
    positives: list[int]


def _realize_candidates(stage1: Stage1Output, plan: Stage2Plan) -> list[Candidate]:
    out = []
    for hi, t in plan.picks:
        unit = stage1.units[hi]
        out.append(
            Candidate(
                start=float(unit.spans.data[t, 0]),
                end=float(unit.spans.data[t, 1]),
                score=float(unit.scores.data[t, 0]),
                t=t,
                unit=unit,
                scale_index=hi,
            )
        )
    for s, e in plan.injected:
        out.append(Candidate(start=s, end=e, score=0.0, t=None, unit=None, scale_index=None))
    return out


def sample_loss(
    model: GroundingModel,
    sample: Sample,
    cfg: TrainConfig,
    rng: np.random.Generator | None,
    plan: Stage2Plan | None = None,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Both stage losses for one sample; rng drives positive injection.

    Passing rng=None skips injection (inference-style stage 2). A plan from
    an earlier call replays that call's selection and targets.
    """
    layer_outputs = model.forward(sample.features, sample.token_ids)
    stage1 = stage1_heads(
        layer_outputs, model.schedule, model.head1_cls, model.head1_reg,
        model.config.anchor_scales,
    )
    l_cls1, l_reg1, _ = _stage1_losses(stage1, sample.span, cfg)

    video_len = stage1.video_len
    if plan is None:
        candidates = select_top_n(stage1, cfg.top_n)
        if rng is not None and cfg.n_pos > 0:
            candidates = candidates + inject_positives(sample.span, cfg.n_pos, rng, video_len)
        assignment2 = span_labels(
            [(c.start, c.end) for c in candidates], sample.span, cfg.iou_threshold
        )
        labels2 = assignment2.labels
        positives2 = assignment2.positives
    else:
        candidates = _realize_candidates(stage1, plan)
        labels2 = plan.labels
        positives2 = plan.positives
    rois = roi_sample(candidates, layer_outputs, model.schedule)
    stage2 = stage2_refine(candidates, rois, model.head2_cls, model.head2_reg, video_len)

    l_cls2 = classification_loss(stage2.scores, labels2.reshape(-1, 1))
    if positives2:
        l_reg2 = regression_loss(
            gather_rows(stage2.spans, positives2), sample.span, video_len
        )
    else:
        l_reg2 = Tensor(0.0)

    l1 = stage_loss(l_cls1, l_reg1, cfg.mu)
    l2 = stage_loss(l_cls2, l_reg2, cfg.mu)
    total = total_loss(l1, l2, cfg.lam)
    return total, {"l_cls1": l_cls1, "l_reg1": l_reg1, "l_cls2": l_cls2, "l_reg2": l_reg2}


def make_stage2_plan(
    model: GroundingModel, sample: Sample, cfg: TrainConfig, rng: np.random.Generator | None
) -> Stage2Plan:
    """Run one forward and freeze its stage-2 selection and targets."""
    layer_outputs = model.forward(sample.features, sample.token_ids)
    stage1 = stage1_heads(
        layer_outputs, model.schedule, model.head1_cls, model.head1_reg,
        model.config.anchor_scales,
    )
    candidates = select_top_n(stage1, cfg.top_n)
    if rng is not None and cfg.n_pos > 0:
        candidates = candidates + inject_positives(sample.span, cfg.n_pos, rng, stage1.video_len)
    assignment = span_labels(
        [(c.start, c.end) for c in candidates], sample.span, cfg.iou_threshold
    )
    return Stage2Plan(
        picks=[(c.scale_index, c.t) for c in candidates if c.unit is not None],
        injected=[(c.start, c.end) for c in candidates if c.unit is None],
        labels=assignment.labels,
        positives=assignment.positives,
    )


class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps)
            p.data = p.data - update


@dataclass
class StepStats:
    step: int
    l_cls1: float
    l_reg1: float
    l_cls2: float
    l_reg2: float
    total: float


def train_loop(
    model: GroundingModel,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    callback: Callable[[StepStats], None] | None = None,
) -> list[StepStats]:
    """Shuffled mini-batch Adam; aborts with diagnostics on non-finite loss."""
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(list(model.params.values()), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history: list[StepStats] = []
    order: list[int] = []
    for step in range(1, cfg.steps + 1):
        batch = []
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(samples)))
            batch.append(samples[order.pop(0)])
        model.zero_grad()
        totals = []
        sums = {"l_cls1": 0.0, "l_reg1": 0.0, "l_cls2": 0.0, "l_reg2": 0.0}
        for s in batch:
            total, comps = sample_loss(model, s, cfg, rng)
            totals.append(total)
            for k in sums:
                sums[k] += comps[k].item()
        batch_total = totals[0]
        for t in totals[1:]:
            batch_total = add(batch_total, t)
        batch_total = mul(batch_total, 1.0 / len(totals))
        stats = StepStats(
            step=step,
            l_cls1=sums["l_cls1"] / len(batch),
            l_reg1=sums["l_reg1"] / len(batch),
            l_cls2=sums["l_cls2"] / len(batch),
            l_reg2=sums["l_reg2"] / len(batch),
            total=batch_total.item(),
        )
        if not math.isfinite(stats.total):
            raise TrainingDiverged(step, {
                "l_cls1": stats.l_cls1, "l_reg1": stats.l_reg1,
                "l_cls2": stats.l_cls2, "l_reg2": stats.l_reg2, "total": stats.total,
            })
        batch_total.backward()
        opt.step()
        history.append(stats)
        if callback is not None:
            callback(stats)
    return history


LOSS_LOG_HEADER = "step,l_cls1,l_reg1,l_cls2,l_reg2,total"


def write_loss_log(path: str, history: Sequence[StepStats]) -> None:
    """CSV of per-step averaged loss components."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOSS_LOG_HEADER + "\n")
        for s in history:
            fh.write(
                f"{s.step},{s.l_cls1!r},{s.l_reg1!r},{s.l_cls2!r},{s.l_reg2!r},{s.total!r}\n"
            )

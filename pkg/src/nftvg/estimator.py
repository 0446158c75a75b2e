"""Scikit-learn style front end over the grounding network.

X is a sequence of (features, token_ids) pairs, y a sequence of (t_s, t_e)
spans in frame coordinates. fit trains the two-stage detector end to end,
predict returns the best span per query, predict_proposals the full ranked
lists, and score the fraction of queries recalled at rank 1 with IoU > 0.5.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .detection import iou, zoom_in_detect
from .model import GroundingModel, ModelConfig
from .training import Sample, TrainConfig, train_loop
from .validation import check_features, check_span, check_token_ids


class TemporalGrounder(BaseEstimator):
    """Localizes one span per (video features, token query) pair."""

    def __init__(
        self,
        d_model: int = 64,
        heads: int = 4,
        enc_layers: int = 2,
        cross_layers: int = 4,
        anchor_scales: tuple[int, ...] = (4, 8, 16, 32),
        window_radii: tuple[int, ...] | None = None,
        schedule_type: str = "decrease",
        vocab_size: int = 64,
        feature_dim: int = 32,
        max_video_len: int = 128,
        max_text_len: int = 32,
        steps: int = 1200,
        batch_size: int = 4,
        lr: float = 1.5e-4,
        top_n: int = 16,
        n_pos: int = 4,
        mu: float = 1e-3,
        lam: float = 0.1,
        iou_threshold: float = 0.5,
        seed: int = 0,
    ):
        self.d_model = d_model
        self.heads = heads
        self.enc_layers = enc_layers
        self.cross_layers = cross_layers
        self.anchor_scales = anchor_scales
        self.window_radii = window_radii
        self.schedule_type = schedule_type
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.max_video_len = max_video_len
        self.max_text_len = max_text_len
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.top_n = top_n
        self.n_pos = n_pos
        self.mu = mu
        self.lam = lam
        self.iou_threshold = iou_threshold
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            heads=self.heads,
            enc_layers=self.enc_layers,
            cross_layers=self.cross_layers,
            anchor_scales=tuple(self.anchor_scales),
            window_radii=None if self.window_radii is None else tuple(self.window_radii),
            schedule_type=self.schedule_type,
            vocab_size=self.vocab_size,
            feature_dim=self.feature_dim,
            max_video_len=self.max_video_len,
            max_text_len=self.max_text_len,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            top_n=self.top_n,
            n_pos=self.n_pos,
            mu=self.mu,
            lam=self.lam,
            iou_threshold=self.iou_threshold,
            seed=self.seed,
        )

    def _check_pairs(self, X) -> list[tuple[np.ndarray, list[int]]]:
        pairs = []
        for features, token_ids in X:
            feats = check_features(features, self.feature_dim)
            if feats.shape[0] > self.max_video_len:
                raise ValueError(
                    f"video length {feats.shape[0]} exceeds capacity {self.max_video_len}"
                )
            pairs.append((feats, check_token_ids(token_ids, self.vocab_size)))
        return pairs

    def fit(self, X, y) -> "TemporalGrounder":
        """Train on (features, token_ids) pairs and their gt spans."""
        pairs = self._check_pairs(X)
        if len(pairs) != len(y):
            raise ValueError(f"X has {len(pairs)} samples but y has {len(y)}")
        samples = [
            Sample(feats, ids, check_span(span, feats.shape[0]))
            for (feats, ids), span in zip(pairs, y)
        ]
        self.model_ = GroundingModel(self._model_config(), seed=self.seed)
        self.schedule_ = self.model_.schedule
        self.loss_history_ = train_loop(self.model_, samples, self._train_config())
        self.n_features_in_ = self.feature_dim
        return self

    def predict_proposals(self, X) -> list[list]:
        """Ranked refined proposals per query."""
        if not hasattr(self, "model_"):
            raise ValueError("fit must run before predict")
        return [
            zoom_in_detect(self.model_, feats, ids, self.top_n)
            for feats, ids in self._check_pairs(X)
        ]

    def predict(self, X) -> np.ndarray:
        """Best span per query as a (n_queries, 2) array."""
        return np.array(
            [[p[0].start, p[0].end] for p in self.predict_proposals(X)]
        )

    def score(self, X, y) -> float:
        """Fraction of queries whose top proposal has IoU > 0.5 with gt."""
        best = self.predict(X)
        hits = sum(
            iou((float(b[0]), float(b[1])), (float(s[0]), float(s[1]))) > 0.5
            for b, s in zip(best, y)
        )
        return hits / len(y) if len(y) else 0.0

"""Input checks shared by the estimator and the command-line entry points."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np


def check_features(features, feature_dim: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 (T, F) array."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"features must be a (T >= 1, F >= 1) array, got shape {arr.shape}")
    if feature_dim is not None and arr.shape[1] != feature_dim:
        raise ValueError(f"features have width {arr.shape[1]}, expected {feature_dim}")
    if not np.isfinite(arr).all():
        raise ValueError("features contain non-finite values")
    return arr


def check_token_ids(token_ids, vocab_size: int | None = None) -> list[int]:
    """Coerce to a non-empty list of in-vocabulary ids."""
    ids = [int(t) for t in token_ids]
    if not ids:
        raise ValueError("token_ids must be non-empty")
    for t in ids:
        if t < 0 or (vocab_size is not None and t >= vocab_size):
            raise ValueError(f"token id {t} outside vocabulary of size {vocab_size}")
    return ids


def check_span(span: Sequence[float], video_len: int) -> tuple[float, float]:
    """Validate a (t_s, t_e) pair against 0 <= t_s < t_e <= T - 1."""
    if len(span) != 2:
        raise ValueError(f"span must be (t_s, t_e), got {span!r}")
    t_s, t_e = float(span[0]), float(span[1])
    if not 0.0 <= t_s < t_e <= video_len - 1:
        raise ValueError(f"span ({t_s}, {t_e}) violates 0 <= t_s < t_e <= {video_len - 1}")
    return t_s, t_e

"""Input validation shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .ingest import BEAT_LENGTH


def check_beats(X, length: int | None = BEAT_LENGTH, allow_empty: bool = True) -> np.ndarray:
    """Return ``X`` as a finite float64 (n_beats, length) array."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=0 if allow_empty else 1,
                    ensure_all_finite=True)
    if length is not None and X.shape[1] != length:
        raise ValueError(f"expected beats of length {length}, got {X.shape[1]}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=object)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y

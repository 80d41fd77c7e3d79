"""
Similarity and order-statistic utilities.
"""

from typing import Sequence, Union

import numpy as np

COSINE_EPS = 1e-8

# numpy's default "linear" method: rank r = (n - 1) * p / 100, interpolate
# between the neighbouring order statistics.
PERCENTILE_METHOD = "linear"


def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray, eps: float = COSINE_EPS) -> np.ndarray:
    """S_ij = <a_i, b_j> / (|a_i| |b_j| + eps)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"cosine_similarity_matrix expects 2-D inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1] or a.shape[1] < 1:
        raise ValueError(f"Feature dims must match and be >= 1, got {a.shape[1]} and {b.shape[1]}")
    a64 = a.astype(np.float64, copy=False)
    b64 = b.astype(np.float64, copy=False)
    norms = np.linalg.norm(a64, axis=1)[:, None] * np.linalg.norm(b64, axis=1)[None, :]
    return (a64 @ b64.T) / (norms + eps)


def percentile(values: Union[Sequence[float], np.ndarray], p, axis=None):
    """Linear-interpolation percentile; p (scalar or array) in [0, 100]."""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        raise ValueError("percentile of an empty input is undefined")
    points = np.asarray(p, dtype=np.float64)
    if np.any(np.isnan(points)) or np.any(points < 0.0) or np.any(points > 100.0):
        raise ValueError(f"percentile p must be in [0, 100], got {p}")
    return np.percentile(array, points, axis=axis, method=PERCENTILE_METHOD)

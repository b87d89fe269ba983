"""Sliding-window dynamic functional connectivity graphs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .signal import RoiTimeSeries

VAR_EPS = 1e-8


@dataclass
class DynamicGraph:
    """Binary adjacency ``A(t)`` and window summaries ``u(t)`` for ``t = 1..T_G``.

    Arrays are indexed from 0: ``adjacency[t - 1]`` is ``A(t)``.
    """

    adjacency: np.ndarray  # (T_G, N, N) float64 in {0, 1}
    window_summary: np.ndarray  # (T_G, N)
    meta: dict = field(default_factory=dict)

    @property
    def n_windows(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[1]


def n_windows(t_max: int, window: int, stride: int) -> int:
    return (t_max - window) // stride


def window_bounds(t_max: int, window: int, stride: int) -> list[tuple[int, int]]:
    """Half-open ``[start, end)`` sample ranges; window ``t`` starts at ``(t - 1) * stride``.

    The count follows ``floor((T_max - window) / stride)``, so trailing
    samples past the last full stride are dropped.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if window < 2:
        raise ConfigError(f"window length must be >= 2, got {window}")
    if window > t_max:
        raise DataError(f"window length {window} exceeds T_max = {t_max}")
    t_g = n_windows(t_max, window, stride)
    if t_g < 1:
        raise DataError(f"scan too short: T_max={t_max}, window={window}, stride={stride} gives T_G=0")
    return [(k * stride, k * stride + window) for k in range(t_g)]


def pearson_fc(window: np.ndarray) -> np.ndarray:
    """Pearson correlation between the rows of an ``N x window`` block.

    Rows with zero variance get ``VAR_EPS`` added to their variance, which
    sends their correlations to 0; the diagonal is pinned to 1.
    """
    window = np.asarray(window, dtype=np.float64)
    centered = window - window.mean(axis=-1, keepdims=True)
    cov = centered @ np.swapaxes(centered, -1, -2) / window.shape[-1]
    var = np.diagonal(cov, axis1=-2, axis2=-1).copy()
    var = np.where(var > 0.0, var, var + VAR_EPS)
    sd = np.sqrt(var)
    r = cov / (sd[..., :, None] * sd[..., None, :])
    r = np.clip(r, -1.0, 1.0)
    idx = np.arange(r.shape[-1])
    r[..., idx, idx] = 1.0
    return r


def threshold_count(density: float, n: int) -> int:
    return max(1, math.ceil(density * n * n - 1e-9))


def threshold_adjacency(r: np.ndarray, density: float = 0.3) -> np.ndarray:
    """Keep entries at or above the ``ceil(density * N^2)``-th largest value.

    Ties at the cut value are all kept, so the result can be denser than
    nominal; for symmetric ``r`` the output is symmetric. Works on stacks
    ``(..., N, N)`` with one cut per matrix.
    """
    if not 0.0 < density <= 1.0:
        raise ConfigError(f"density must lie in (0, 1], got {density}")
    r = np.asarray(r, dtype=np.float64)
    n = r.shape[-1]
    k = threshold_count(density, n)
    flat = r.reshape(r.shape[:-2] + (n * n,))
    cut = -np.partition(-flat, k - 1, axis=-1)[..., k - 1]
    return (r >= cut[..., None, None]).astype(np.float64)


def zscore_rows(data: np.ndarray) -> np.ndarray:
    mu = data.mean(axis=-1, keepdims=True)
    sd = data.std(axis=-1, keepdims=True)
    return np.where(sd > 0.0, (data - mu) / np.where(sd > 0.0, sd, 1.0), 0.0)


def build_dynamic_graph(
    ts: RoiTimeSeries, window: int = 50, stride: int = 16, density: float = 0.3
) -> DynamicGraph:
    """Windowed Pearson FC, thresholded to binary ``A(t)``, plus ``u(t)``.

    ``u(t)`` is the per-ROI mean of the scan-wise z-scored signal inside
    window ``t``; it is the GRU input sequence.
    """
    data = ts.data if isinstance(ts, RoiTimeSeries) else np.asarray(ts, dtype=np.float64)
    n, t_max = data.shape
    bounds = window_bounds(t_max, window, stride)
    z = zscore_rows(data)
    starts = np.array([b[0] for b in bounds])
    idx = starts[:, None] + np.arange(window)[None, :]
    windows = np.transpose(z[:, idx], (1, 0, 2))  # (T_G, N, window)
    fc = pearson_fc(windows)
    adj = threshold_adjacency(fc, density)
    summary = windows.mean(axis=-1)
    meta = {"N": n, "T_G": len(bounds), "window": window, "stride": stride, "density": density}
    return DynamicGraph(adj, summary, meta)

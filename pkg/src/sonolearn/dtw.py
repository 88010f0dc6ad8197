"""Dynamic time warping between amplitude envelopes, plus the repeat-noise
normalization used to report aural similarity.

The raw DTW distance between two multichannel envelopes uses the classic
O(nm) dynamic program with a per-frame cross-channel Euclidean point cost
and no path-length normalization. Raw distances are then centered and
scaled by the statistics of distances between sounds produced by repeats
of the same action, so a score of 0 means "as close as a repeat".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Envelope

SIGMA_FLOOR = 1e-9


@dataclass
class DtwResult:
    distance: float
    path_len: int


@dataclass
class NormalizationStats:
    mu: float
    sigma: float
    n_pairs: int


def _envelope_matrix(env) -> np.ndarray:
    """Accept Envelope or raw array; return (channels, frames) float64."""
    values = env.values if isinstance(env, Envelope) else np.asarray(env, dtype=np.float64)
    if values.ndim == 1:
        values = values[None, :]
    return np.asarray(values, dtype=np.float64)


def dtw_distance(a, b) -> DtwResult:
    """Accumulated cost of the best monotone alignment of two envelopes.

    Point cost is the Euclidean distance between the per-frame cross-channel
    vectors. Returns the total path cost D(n, m) and the length of one
    optimal path.
    """
    a = _envelope_matrix(a)
    b = _envelope_matrix(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"channel mismatch: {a.shape[0]} vs {b.shape[0]}")
    n, m = a.shape[1], b.shape[1]
    if n == 0 or m == 0:
        raise ValueError("empty envelope")

    # cost[i, j] = ||a[:, i] - b[:, j]||
    diff = a.T[:, None, :] - b.T[None, :, :]
    cost = np.sqrt((diff * diff).sum(axis=2))

    inf = np.inf
    prev = [inf] * (m + 1)
    prev_steps = [0] * (m + 1)
    prev[1] = cost[0, 0]
    prev_steps[1] = 1
    row = cost[0]
    for j in range(2, m + 1):
        prev[j] = prev[j - 1] + row[j - 1]
        prev_steps[j] = j
    for i in range(1, n):
        cur = [inf] * (m + 1)
        cur_steps = [0] * (m + 1)
        row = cost[i]
        for j in range(1, m + 1):
            c = row[j - 1]
            diag, up, left = prev[j - 1], prev[j], cur[j - 1]
            if diag <= up and diag <= left:
                cur[j] = c + diag
                cur_steps[j] = prev_steps[j - 1] + 1
            elif up <= left:
                cur[j] = c + up
                cur_steps[j] = prev_steps[j] + 1
            else:
                cur[j] = c + left
                cur_steps[j] = cur_steps[j - 1] + 1
        prev, prev_steps = cur, cur_steps
    return DtwResult(distance=float(prev[m]), path_len=int(prev_steps[m]))


def dtw_distance_bruteforce(a, b) -> float:
    """Reference oracle: exhaustive minimum over all monotone alignment paths.

    Exponential; only usable for very short envelopes (lengths <= ~8).
    """
    a = _envelope_matrix(a)
    b = _envelope_matrix(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"channel mismatch: {a.shape[0]} vs {b.shape[0]}")
    n, m = a.shape[1], b.shape[1]
    if n == 0 or m == 0:
        raise ValueError("empty envelope")

    def cost(i, j):
        return float(np.linalg.norm(a[:, i] - b[:, j]))

    best = [np.inf]

    def walk(i, j, acc):
        if acc >= best[0]:
            return
        if i == n - 1 and j == m - 1:
            best[0] = acc
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc + cost(i + 1, j + 1))
        if i + 1 < n:
            walk(i + 1, j, acc + cost(i + 1, j))
        if j + 1 < m:
            walk(i, j + 1, acc + cost(i, j + 1))

    walk(0, 0, cost(0, 0))
    return best[0]


def fit_normalization(repeat_distances) -> NormalizationStats:
    """Mean and population std of same-action repeat distances."""
    d = np.asarray(list(repeat_distances), dtype=np.float64)
    if d.size < 2:
        raise ValueError(f"need at least 2 repeat distances, got {d.size}")
    if np.any(d < 0):
        raise ValueError("repeat distances must be nonnegative")
    return NormalizationStats(
        mu=float(d.mean()),
        sigma=float(max(d.std(), SIGMA_FLOOR)),
        n_pairs=int(d.size),
    )


def normalized_score(x: float, stats: NormalizationStats) -> float:
    """(x - mu) / sigma; negative means closer than typical repeat noise."""
    return (float(x) - stats.mu) / stats.sigma

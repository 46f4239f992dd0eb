"""Difficulty measurers, normalization, ranking and dual-criterion fusion.

Convention: higher score = harder instance. All sorts break ties by
ascending instance index.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from .data import RawSeries, WindowInstance
from .optim import make_rng

log = logging.getLogger(__name__)

MAX_PAIRS = 2_000_000


@dataclass
class ScoreVector:
    strategy: str
    raw: np.ndarray
    normalized: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.raw)

    def order(self) -> np.ndarray:
        """Easy-to-hard instance order: ascending score, then index."""
        return stable_order(self.raw)


@dataclass(frozen=True)
class DensityConfig:
    estimator: str = "knn"  # "knn" or "kde"
    radius_percentile: float = 50.0
    bandwidth: float | None = None  # explicit KDE bandwidth; Scott's rule when None
    bandwidth_scale: float = 1.0  # multiplier on Scott's rule
    seed: int = 0  # pair sampling for very large N

    def __post_init__(self):
        if self.estimator not in ("knn", "kde"):
            raise ValueError(f"unknown density estimator {self.estimator!r}")
        if not 0 < self.radius_percentile < 100:
            raise ValueError("radius_percentile must lie in (0, 100)")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.bandwidth_scale <= 0:
            raise ValueError("bandwidth_scale must be positive")


def stable_order(values) -> np.ndarray:
    return np.lexsort((np.arange(len(values)), np.asarray(values)))


# ---------------------------------------------------------------------------
# single criteria


def score_random(n: int, seed: int) -> ScoreVector:
    if n < 1:
        raise ValueError("n must be >= 1")
    return ScoreVector("random", make_rng(seed).random(n), provenance={"seed": seed})


def score_loss(losses) -> ScoreVector:
    losses = np.asarray(losses, dtype=np.float64)
    if np.any(losses < 0):
        raise ValueError("per-instance losses must be non-negative")
    return ScoreVector("loss", losses.copy())


def _embeddings(emb) -> np.ndarray:
    e = getattr(emb, "embeddings", emb)
    e = np.asarray(e, dtype=np.float64)
    if e.ndim == 1:
        e = e[:, None]
    if e.shape[0] < 2:
        raise ValueError(f"density needs at least 2 embeddings, got {e.shape[0]}")
    return e


def _pair_distances(e: np.ndarray, seed: int) -> np.ndarray:
    n = len(e)
    if n * (n - 1) // 2 <= MAX_PAIRS:
        iu = np.triu_indices(n, k=1)
        return np.sqrt(np.sum((e[iu[0]] - e[iu[1]]) ** 2, axis=1))
    rng = make_rng(seed)
    i = rng.integers(0, n, size=MAX_PAIRS)
    j = rng.integers(0, n - 1, size=MAX_PAIRS)
    j = np.where(j >= i, j + 1, j)
    return np.sqrt(np.sum((e[i] - e[j]) ** 2, axis=1))


def knn_radius(embeddings, cfg: DensityConfig = DensityConfig()) -> float:
    e = _embeddings(embeddings)
    return float(np.percentile(_pair_distances(e, cfg.seed), cfg.radius_percentile))


def knn_counts(embeddings, radius: float) -> np.ndarray:
    """Neighbours within ``radius`` (inclusive), excluding the point itself."""
    e = _embeddings(embeddings)
    counts = np.empty(len(e), dtype=np.int64)
    # row blocks keep memory at O(block * N)
    for lo in range(0, len(e), 512):
        blk = e[lo:lo + 512]
        dist = np.sqrt(np.sum((blk[:, None, :] - e[None, :, :]) ** 2, axis=2))
        counts[lo:lo + 512] = np.sum(dist <= radius, axis=1) - 1
    return counts


def score_knn_density(embeddings, cfg: DensityConfig = DensityConfig()) -> ScoreVector:
    """Difficulty ``-rho`` where rho counts neighbours inside a percentile radius."""
    e = _embeddings(embeddings)
    r = knn_radius(e, cfg)
    if r == 0.0 and np.all(e == e[0]):
        warnings.warn("all embeddings identical; every density equals N-1", RuntimeWarning, stacklevel=2)
    rho = knn_counts(e, r)
    return ScoreVector("knn", -rho.astype(np.float64),
                       provenance={"radius": r, "percentile": cfg.radius_percentile, "density": rho})


def scott_bandwidth(e: np.ndarray) -> float:
    n, d = e.shape
    sigma = float(np.mean(np.std(e, axis=0, ddof=1)))
    return sigma * n ** (-1.0 / (d + 4))


def kde_log_density(embeddings, h: float) -> np.ndarray:
    """Log of the Gaussian KDE at each embedded point, self-term included."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    e = _embeddings(embeddings)
    n, d = e.shape
    log_norm = -0.5 * d * np.log(2.0 * np.pi * h * h) - np.log(n)
    out = np.empty(n)
    for lo in range(0, n, 512):
        blk = e[lo:lo + 512]
        d2 = np.sum((blk[:, None, :] - e[None, :, :]) ** 2, axis=2)
        out[lo:lo + 512] = logsumexp(-d2 / (2.0 * h * h), axis=1) + log_norm
    return out


def score_kde(embeddings, cfg: DensityConfig = DensityConfig(estimator="kde")) -> ScoreVector:
    """Difficulty ``-p_hat``; ordering follows ``-log p_hat`` exactly.

    The raw score stores ``-log p_hat`` (a strictly increasing transform of
    ``-p_hat``), so densities far below float range still order correctly.
    ``provenance['density']`` holds ``p_hat`` itself.
    """
    e = _embeddings(embeddings)
    if cfg.bandwidth is not None:
        h = cfg.bandwidth
    else:
        h = scott_bandwidth(e) * cfg.bandwidth_scale
        if not h > 0:
            warnings.warn("zero-variance embeddings; falling back to bandwidth 1.0", RuntimeWarning, stacklevel=2)
            h = 1.0
    logp = kde_log_density(e, h)
    return ScoreVector("kde", -logp, provenance={"bandwidth": h, "log_density": logp, "density": np.exp(logp)})


def score_density(embeddings, cfg: DensityConfig) -> ScoreVector:
    return score_knn_density(embeddings, cfg) if cfg.estimator == "knn" else score_kde(embeddings, cfg)


# ---------------------------------------------------------------------------
# STL residual baseline


def moving_average_trend(x: np.ndarray, period: int) -> np.ndarray:
    """Centered moving average of width ``period`` (2 x period when even).

    Edge positions without a full window take the nearest valid value.
    """
    if period % 2:
        w = np.full(period, 1.0 / period)
    else:
        w = np.full(period + 1, 1.0 / period)
        w[0] = w[-1] = 0.5 / period
    half = len(w) // 2
    valid = np.convolve(x, w, mode="valid")
    trend = np.empty_like(x)
    trend[half:half + len(valid)] = valid
    trend[:half] = valid[0]
    trend[half + len(valid):] = valid[-1]
    return trend


def stl_decompose(x: np.ndarray, period: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Moving-average trend/seasonal/residual split of a 1-D series."""
    x = np.asarray(x, dtype=np.float64)
    if period < 2:
        raise ValueError("seasonal period must be >= 2")
    if len(x) < 2 * period:
        raise ValueError(f"series length {len(x)} < 2 x period {2 * period}")
    trend = moving_average_trend(x, period)
    detrended = x - trend
    phase = np.arange(len(x)) % period
    means = np.array([detrended[phase == k].mean() for k in range(period)])
    means -= means.mean()
    seasonal = means[phase]
    return trend, seasonal, x - trend - seasonal


def score_stl(series: RawSeries, instances: Sequence[WindowInstance], target_channels=None) -> ScoreVector:
    """Residual magnitude over each instance's input window, summed over targets."""
    p = series.seasonal_period
    if target_channels is None:
        tgt = series.target_idx
    else:
        tgt = [series.channels.index(c) if isinstance(c, str) else int(c) for c in target_channels]
    resid = np.stack([stl_decompose(series.values[:, c], p)[2] for c in tgt], axis=1)
    scores = np.empty(len(instances))
    for n, w in enumerate(instances):
        row = int(np.searchsorted(series.timestamps, w.origin))
        L = w.x.shape[0]
        if row + L > series.T or series.timestamps[row] != w.origin:
            raise ValueError(f"instance {w.index} (origin {w.origin}) is not covered by the series")
        seg = resid[row:row + L]
        scores[n] = float(np.sum(np.sqrt(np.sum(seg * seg, axis=0))))
    return ScoreVector("stl", scores, provenance={"period": p})


# ---------------------------------------------------------------------------
# normalization and ranks


def minmax_normalize(scores) -> ScoreVector:
    sv = scores if isinstance(scores, ScoreVector) else ScoreVector("", np.asarray(scores, dtype=np.float64))
    raw = np.asarray(sv.raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    norm = np.zeros_like(raw) if hi == lo else (raw - lo) / (hi - lo)
    return ScoreVector(sv.strategy, raw, np.clip(norm, 0.0, 1.0), dict(sv.provenance))


def average_ranks(scores) -> np.ndarray:
    """Ascending 1-based ranks; tied values share the mean of their ranks."""
    raw = getattr(scores, "raw", scores)
    return rankdata(np.asarray(raw, dtype=np.float64), method="average")


# ---------------------------------------------------------------------------
# fusion


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def fuse_convex_value(loss_norm, dens_norm, alpha: float) -> ScoreVector:
    """``alpha * loss + (1 - alpha) * density`` on [0, 1]-normalized difficulties."""
    _check_alpha(alpha)
    a = np.asarray(getattr(loss_norm, "normalized", None) if isinstance(loss_norm, ScoreVector) else loss_norm,
                   dtype=np.float64)
    b = np.asarray(getattr(dens_norm, "normalized", None) if isinstance(dens_norm, ScoreVector) else dens_norm,
                   dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("score vectors differ in length")
    if a.min() < 0 or a.max() > 1 or b.min() < 0 or b.max() > 1:
        raise ValueError("convex-value fusion needs scores normalized to [0, 1]")
    return ScoreVector("convex-value", alpha * a + (1.0 - alpha) * b, provenance={"alpha": alpha})


def fuse_convex_rank(loss_ranks, dens_ranks, alpha: float) -> ScoreVector:
    _check_alpha(alpha)
    a = np.asarray(loss_ranks, dtype=np.float64)
    b = np.asarray(dens_ranks, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("rank vectors differ in length")
    return ScoreVector("convex-rank", alpha * a + (1.0 - alpha) * b, provenance={"alpha": alpha})


def quantile_bins(values, bins: int) -> np.ndarray:
    """Equal-count bins over the (value, index) order; bin ids 0..bins-1."""
    n = len(values)
    pos = np.empty(n, dtype=np.int64)
    pos[stable_order(values)] = np.arange(n)
    return (pos * bins) // n


def grid_order(loss_scores, density, bins: int) -> np.ndarray:
    """Easy-to-hard traversal of the loss x density quantile grid.

    ``density`` is the density itself (higher = denser = easier). Cells are
    visited by ``loss_bin + (bins - 1 - density_bin)``, then loss bin
    ascending, then density bin descending; inside a cell instances follow
    ascending loss, then index.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    loss = np.asarray(loss_scores, dtype=np.float64)
    dens = np.asarray(density, dtype=np.float64)
    if loss.shape != dens.shape:
        raise ValueError("loss and density vectors differ in length")
    lb = quantile_bins(loss, bins)
    db = quantile_bins(dens, bins)
    key = lb + (bins - 1 - db)
    idx = np.arange(len(loss))
    # lexsort: last key is primary
    return np.lexsort((idx, loss, -db, lb, key))


def grid_stratify(loss_scores, density, bins: int, K: int):
    """Quantile-grid stratification cut into exactly ``K`` balanced buckets."""
    from .curriculum import BucketPartition, split_balanced

    n = len(loss_scores)
    if K < 1 or n < K:
        raise ValueError(f"need N >= K >= 1 (N={n}, K={K})")
    order = grid_order(loss_scores, density, bins)
    return BucketPartition(split_balanced(order, K), "grid")


def grid_scores(loss_scores, density, bins: int) -> ScoreVector:
    """Traversal position as a score, so generic bucketing reproduces the grid cut."""
    order = grid_order(loss_scores, density, bins)
    pos = np.empty(len(order))
    pos[order] = np.arange(len(order), dtype=np.float64)
    return ScoreVector("grid", pos, provenance={"bins": bins})


# ---------------------------------------------------------------------------
# export


def write_scores_csv(scores: ScoreVector, path) -> Path:
    """``index,raw,normalized,rank`` rows, one per instance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    norm = scores.normalized if scores.normalized is not None else minmax_normalize(scores).normalized
    ranks = average_ranks(scores.raw)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "raw", "normalized", "rank"])
        for i in range(len(scores.raw)):
            w.writerow([i, repr(float(scores.raw[i])), repr(float(norm[i])), repr(float(ranks[i]))])
    return path


def read_scores_csv(path, strategy: str = "") -> ScoreVector:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    raw = np.array([float(r["raw"]) for r in rows])
    norm = np.array([float(r["normalized"]) for r in rows])
    return ScoreVector(strategy, raw, norm)

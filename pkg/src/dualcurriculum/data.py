"""Series ingestion, synthesis, sliding windows, chronological splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from .optim import make_rng


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RawSeries:
    timestamps: np.ndarray  # (T,) strictly increasing integer ticks
    channels: tuple[str, ...]
    values: np.ndarray  # (T, C)
    target_channels: tuple[str, ...] = ()
    sample_period: str = ""
    seasonal_period: int = 1

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.channels):
            raise DataError(f"values shape {self.values.shape} does not match {len(self.channels)} channels")
        if len(self.timestamps) != self.values.shape[0]:
            raise DataError("timestamps and values disagree on length")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise DataError("timestamps must be strictly increasing")
        for name in self.target_channels:
            if name not in self.channels:
                raise DataError(f"unknown target channel {name!r}")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    @property
    def target_idx(self) -> list[int]:
        targets = self.target_channels or self.channels
        return [self.channels.index(c) for c in targets]

    def rows(self, start: int, stop: int) -> "RawSeries":
        return replace(self, timestamps=self.timestamps[start:stop], values=self.values[start:stop])


@dataclass(frozen=True)
class WindowInstance:
    index: int
    x: np.ndarray  # (L, C)
    y: np.ndarray  # (H, C_target)
    origin: int  # tick of the window start


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, train_values: np.ndarray) -> "NormStats":
        mean = train_values.mean(axis=0)
        std = train_values.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def normalize(self, values: np.ndarray, channels=None) -> np.ndarray:
        m, s = (self.mean, self.std) if channels is None else (self.mean[channels], self.std[channels])
        return (values - m) / s

    def denormalize(self, values: np.ndarray, channels=None) -> np.ndarray:
        m, s = (self.mean, self.std) if channels is None else (self.mean[channels], self.std[channels])
        return values * s + m


@dataclass(frozen=True)
class SplitBundle:
    train: list[WindowInstance]
    val: list[WindowInstance]
    test: list[WindowInstance]
    norm_stats: NormStats
    target_idx: tuple[int, ...] = ()
    train_ticks: tuple[int, int] = (0, 0)  # [start, stop) tick range spanned by the train split

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def stack(instances: Sequence[WindowInstance]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``(N, L, C)`` and ``(N, H, C_target)``."""
    return np.stack([w.x for w in instances]), np.stack([w.y for w in instances])


# ---------------------------------------------------------------------------
# CSV


def _parse_timestamp(raw: str, row: int) -> int | datetime:
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(raw)
    except ValueError:
        raise DataError(f"row {row}, column 'timestamp': cannot parse timestamp {raw!r}") from None


def load_csv(path, target_channels: Sequence[str] = (), *, sample_period: str = "",
             seasonal_period: int = 1) -> RawSeries:
    """Read ``timestamp,<ch1>,...`` into a :class:`RawSeries`.

    Integer timestamps are kept as ticks; ISO-8601 timestamps become ticks
    ``0..T-1`` in row order.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: header needs a timestamp column and at least one channel")
        channels = tuple(h.strip() for h in header[1:])
        stamps, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(rec)} cells, expected {len(header)}")
            stamps.append(_parse_timestamp(rec[0], lineno))
            vals = []
            for col, cell in zip(channels, rec[1:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col!r}: not a number: {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {lineno}, column {col!r}: missing or non-finite value")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    kinds = {type(s) for s in stamps}
    if len(kinds) > 1:
        raise DataError(f"{path}: mixed integer and ISO-8601 timestamps")
    for i in range(1, len(stamps)):
        if stamps[i] <= stamps[i - 1]:
            raise DataError(f"{path}: row {i + 2}: duplicate or unsorted timestamp")
    ticks = np.array(stamps, dtype=np.int64) if kinds == {int} else np.arange(len(stamps), dtype=np.int64)
    for name in target_channels:
        if name not in channels:
            raise DataError(f"{path}: unknown target channel {name!r}")
    return RawSeries(ticks, channels, np.array(rows, dtype=np.float64), tuple(target_channels),
                     sample_period, seasonal_period)


def write_csv(series: RawSeries, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *series.channels])
        for t, row in zip(series.timestamps, series.values):
            w.writerow([int(t), *(repr(float(v)) for v in row)])
    return path


# ---------------------------------------------------------------------------
# windows and splits


def window_count(T: int, L: int, H: int, s: int) -> int:
    return (T - L - H) // s + 1 if T >= L + H else 0


def make_windows(series: RawSeries, L: int, H: int, s: int = 1, *, start_index: int = 0) -> list[WindowInstance]:
    if L < 1 or H < 1 or s < 1:
        raise DataError(f"L, H and stride must be >= 1 (got L={L}, H={H}, s={s})")
    if series.T < L + H:
        raise DataError(f"series too short: T={series.T} < L+H={L + H}")
    tgt = series.target_idx
    vals = series.values
    out = []
    for k, row in enumerate(range(0, series.T - L - H + 1, s)):
        out.append(WindowInstance(
            index=start_index + k,
            x=vals[row:row + L].copy(),
            y=vals[row + L:row + L + H][:, tgt].copy(),
            origin=int(series.timestamps[row]),
        ))
    return out


def apportion(total: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment; ties go to the earlier slot."""
    quotas = [total * r for r in ratios]
    counts = [math.floor(q) for q in quotas]
    left = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def _check_ratios(ratios):
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three positive numbers summing to 1, got {ratios}")


def _reindex(instances, stats: NormStats | None = None, target_idx=None):
    out = []
    for i, w in enumerate(instances):
        x, y = w.x, w.y
        if stats is not None:
            x = stats.normalize(x)
            y = stats.normalize(y, list(target_idx))
        out.append(WindowInstance(i, x, y, w.origin))
    return out


def _unique_tick_rows(instances: Sequence[WindowInstance], target_idx) -> np.ndarray:
    """Rows of the underlying series covered by the inputs of ``instances``."""
    seen: dict[int, np.ndarray] = {}
    for w in instances:
        for t in range(w.x.shape[0]):
            seen.setdefault(w.origin + t, w.x[t])
    return np.stack([seen[k] for k in sorted(seen)])


def chrono_split(instances: Sequence[WindowInstance], ratios=(0.70, 0.15, 0.15), *,
                 target_idx: Sequence[int] | None = None) -> SplitBundle:
    """Contiguous prefix/middle/suffix split of origin-ordered instances.

    Normalization statistics come from the distinct input ticks of the train
    prefix only. Each split is re-indexed from 0.
    """
    _check_ratios(ratios)
    if len(instances) < 3:
        raise DataError(f"need at least 3 instances to split, got {len(instances)}")
    origins = [w.origin for w in instances]
    if any(b <= a for a, b in zip(origins, origins[1:])):
        raise DataError("instances must be strictly origin-ordered")
    n_tr, n_va, _ = apportion(len(instances), ratios)
    train, val, test = instances[:n_tr], instances[n_tr:n_tr + n_va], instances[n_tr + n_va:]
    if target_idx is None:
        target_idx = list(range(instances[0].y.shape[1]))
    stats = NormStats.fit(_unique_tick_rows(train, target_idx))
    lo = train[0].origin
    hi = train[-1].origin + train[-1].x.shape[0]
    return SplitBundle(_reindex(train, stats, target_idx), _reindex(val, stats, target_idx),
                       _reindex(test, stats, target_idx), stats, tuple(target_idx), (lo, hi))


def split_series(series: RawSeries, L: int, H: int, s: int = 1, ratios=(0.70, 0.15, 0.15)) -> SplitBundle:
    """Split the tick range chronologically, then window each segment.

    No window crosses a segment boundary, so validation/test targets never
    enter training windows. Statistics are fitted on the train segment.
    """
    _check_ratios(ratios)
    n_tr, n_va, n_te = apportion(series.T, ratios)
    bounds = [(0, n_tr), (n_tr, n_tr + n_va), (n_tr + n_va, series.T)]
    for (a, b), name in zip(bounds, ("train", "val", "test")):
        if b - a < L + H:
            raise DataError(f"{name} segment has {b - a} ticks, fewer than L+H={L + H}")
    stats = NormStats.fit(series.values[:n_tr])
    normed = replace(series, values=stats.normalize(series.values))
    parts = [make_windows(normed.rows(a, b), L, H, s) for a, b in bounds]
    t0 = int(series.timestamps[0])
    t1 = int(series.timestamps[n_tr - 1]) + 1
    return SplitBundle(*parts, norm_stats=stats, target_idx=tuple(series.target_idx), train_ticks=(t0, t1))


def subsample(instances: Sequence[WindowInstance], max_n: int | None, seed: int) -> list[WindowInstance]:
    """Seeded uniform sample without replacement, kept in origin order and re-indexed."""
    if max_n is None or len(instances) <= max_n:
        return list(instances)
    if max_n < 1:
        raise DataError("max_n must be >= 1")
    picked = np.sort(make_rng(seed).choice(len(instances), size=max_n, replace=False))
    return [WindowInstance(i, instances[j].x, instances[j].y, instances[j].origin) for i, j in enumerate(picked)]


# ---------------------------------------------------------------------------
# synthetic series


@dataclass(frozen=True)
class Anomaly:
    start: int
    end: int  # exclusive
    kind: str = "spike"  # "spike" or "shift"
    magnitude: float = 6.0


@dataclass(frozen=True)
class SynthSpec:
    T: int = 540
    C: int = 2
    period: int = 24
    amplitude: float = 1.0
    trend: float = 0.002  # per tick
    noise_std: float = 0.1
    anomalies: tuple[Anomaly, ...] = ()
    seed: int = 0

    def __post_init__(self):
        for a in self.anomalies:
            if not (0 <= a.start < a.end <= self.T):
                raise DataError(f"anomaly interval [{a.start}, {a.end}) outside [0, {self.T})")
            if a.kind not in ("spike", "shift"):
                raise DataError(f"unknown anomaly kind {a.kind!r}")


def synth_clean(spec: SynthSpec) -> np.ndarray:
    t = np.arange(spec.T, dtype=np.float64)[:, None]
    phase = np.arange(spec.C, dtype=np.float64)[None, :] * (np.pi / 4)
    return spec.amplitude * np.sin(2 * np.pi * t / spec.period + phase) + spec.trend * t


def synth_generate(spec: SynthSpec) -> RawSeries:
    """Sinusoid + linear trend + Gaussian noise + planted anomaly segments.

    A spike segment adds a triangular bump peaking at ``magnitude``; a shift
    adds a constant ``magnitude`` over the interval. Anomalies hit every channel.
    """
    values = synth_clean(spec)
    if spec.noise_std > 0:
        values = values + make_rng(spec.seed).normal(0.0, spec.noise_std, size=values.shape)
    for a in spec.anomalies:
        n = a.end - a.start
        if a.kind == "spike":
            bump = 1.0 - np.abs(np.linspace(-1.0, 1.0, n + 2)[1:-1]) if n > 1 else np.ones(1)
            bump = bump / bump.max()
        else:
            bump = np.ones(n)
        values[a.start:a.end] += a.magnitude * bump[:, None]
    channels = tuple(f"ch{i}" for i in range(spec.C))
    return RawSeries(np.arange(spec.T, dtype=np.int64), channels, values, (channels[0],), "1h", spec.period)

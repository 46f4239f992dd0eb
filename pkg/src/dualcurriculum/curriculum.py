"""Ordered buckets, One-Pass / Baby-Steps schedules, stage-wise fine-tuning."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import WindowInstance, stack
from .difficulty import ScoreVector, stable_order
from .models import Forecaster, evaluate_mse, train_steps
from .optim import AdamState, make_rng

log = logging.getLogger(__name__)


class Schedule(str, enum.Enum):
    ONE_PASS = "one-pass"
    BABY_STEPS = "baby-steps"


@dataclass
class BucketPartition:
    buckets: list[np.ndarray]  # B_1 (easiest) .. B_K (hardest), each ascending indices
    strategy: str = ""

    @property
    def K(self) -> int:
        return len(self.buckets)

    def sizes(self) -> list[int]:
        return [len(b) for b in self.buckets]

    def labels(self, n: int | None = None) -> np.ndarray:
        """Bucket id per instance index."""
        n = n if n is not None else sum(self.sizes())
        out = np.full(n, -1, dtype=np.int64)
        for k, b in enumerate(self.buckets):
            out[b] = k
        return out

    def as_sets(self) -> list[frozenset]:
        return [frozenset(int(i) for i in b) for b in self.buckets]


def balanced_sizes(n: int, K: int) -> list[int]:
    base, rem = divmod(n, K)
    return [base + (1 if k < rem else 0) for k in range(K)]


def split_balanced(order: Sequence[int], K: int) -> list[np.ndarray]:
    """Cut an easy-to-hard sequence into ``K`` contiguous groups of balanced size."""
    order = np.asarray(order, dtype=np.int64)
    out, lo = [], 0
    for size in balanced_sizes(len(order), K):
        out.append(np.sort(order[lo:lo + size]))
        lo += size
    return out


def make_buckets(scores: ScoreVector | Sequence[float], K: int) -> BucketPartition:
    raw = scores.raw if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    n = len(raw)
    if K < 1 or n < K:
        raise ValueError(f"need N >= K >= 1 (N={n}, K={K})")
    tag = scores.strategy if isinstance(scores, ScoreVector) else ""
    return BucketPartition(split_balanced(stable_order(raw), K), tag)


def stage_sets(partition: BucketPartition, schedule: Schedule | str) -> list[np.ndarray]:
    schedule = Schedule(schedule)
    if schedule is Schedule.ONE_PASS:
        return [np.sort(b) for b in partition.buckets]
    out, seen = [], np.empty(0, dtype=np.int64)
    for b in partition.buckets:
        seen = np.concatenate([seen, b])
        out.append(np.sort(seen))
    return out


def gradient_step_count(partition: BucketPartition | Sequence[int], schedule: Schedule | str,
                        epochs_per_stage: int, batch_size: int) -> int:
    """Optimizer steps over all stages: sum of epochs x ceil(|C_k| / batch)."""
    if not isinstance(partition, BucketPartition):
        partition = BucketPartition([np.arange(s) for s in partition])
    schedule = Schedule(schedule)
    sizes = partition.sizes()
    if schedule is Schedule.BABY_STEPS:
        sizes = list(np.cumsum(sizes))
    return int(sum(epochs_per_stage * math.ceil(s / batch_size) for s in sizes))


@dataclass(frozen=True)
class StageConfig:
    epochs_per_stage: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    clip_max_norm: float = 1.0


@dataclass
class StageTrainRecord:
    losses: list[list[float]] = field(default_factory=list)  # [stage][epoch]
    val_mse: list[float] = field(default_factory=list)
    cum_steps: list[list[int]] = field(default_factory=list)  # [stage][epoch]
    final_params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.losses)

    @property
    def total_steps(self) -> int:
        return self.cum_steps[-1][-1] if self.cum_steps else 0

    def rows(self):
        for k, (ls, steps) in enumerate(zip(self.losses, self.cum_steps)):
            val = self.val_mse[k] if k < len(self.val_mse) else float("nan")
            for e, (loss, step) in enumerate(zip(ls, steps)):
                yield k + 1, e + 1, loss, val, step


def stage_train(model: Forecaster, partition: BucketPartition, schedule: Schedule | str,
                config: StageConfig, train: Sequence[WindowInstance],
                val: Sequence[WindowInstance] | None = None) -> StageTrainRecord:
    """Fine-tune ``model`` in place on ``C_1 .. C_K``, each stage continuing from the last."""
    xs, ys = stack(train)
    ys = ys.reshape(len(ys), -1)
    rng = make_rng(config.seed)
    opt = AdamState(learning_rate=config.lr, clip_max_norm=config.clip_max_norm)
    record = StageTrainRecord()
    for k, members in enumerate(stage_sets(partition, schedule)):
        losses, steps = [], []
        for epoch in range(config.epochs_per_stage):
            order = members[rng.permutation(len(members))]
            losses.append(train_steps(model, xs, ys, order, config.batch_size, opt,
                                      context=f"stage {k + 1}, epoch {epoch}, "))
            steps.append(opt.step_count)
        record.losses.append(losses)
        record.cum_steps.append(steps)
        if val:
            record.val_mse.append(evaluate_mse(model, val))
        log.debug("stage %d/%d: loss %.5f", k + 1, partition.K, losses[-1] if losses else float("nan"))
    record.final_params = model.get_state()
    return record


def write_stage_csv(record: StageTrainRecord, path) -> Path:
    """``stage,epoch,train_loss,val_mse,cum_steps``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "epoch", "train_loss", "val_mse", "cum_steps"])
        for stage, epoch, loss, val, step in record.rows():
            w.writerow([stage, epoch, repr(float(loss)), repr(float(val)), step])
    return path


def write_buckets_csv(partition: BucketPartition, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = partition.labels()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "bucket"])
        for i, b in enumerate(labels):
            w.writerow([i, int(b) + 1])
    return path


def read_buckets_csv(path, strategy: str = "") -> BucketPartition:
    with Path(path).open(newline="") as fh:
        rows = [(int(r["index"]), int(r["bucket"])) for r in csv.DictReader(fh)]
    K = max(b for _, b in rows)
    buckets = [np.array(sorted(i for i, b in rows if b == k), dtype=np.int64) for k in range(1, K + 1)]
    return BucketPartition(buckets, strategy)

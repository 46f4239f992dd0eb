"""Two-stage protocol across strategies, schedules, seeds and search trials.

Stage 1 trains a representation model and derives difficulty scores; stage 2
trains a fresh curriculum forecaster over the resulting buckets. A cell is
one (dataset, strategy, schedule) triple.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .autodiff import NonFiniteError
from .config import ExperimentConfig, DatasetConfig, dump_config
from .curriculum import (BucketPartition, StageConfig, StageTrainRecord, make_buckets, stage_train,
                         write_stage_csv)
from .data import RawSeries, SplitBundle, load_csv, split_series, subsample, synth_generate
from .difficulty import (DensityConfig, ScoreVector, average_ranks, fuse_convex_rank, fuse_convex_value,
                         grid_scores, minmax_normalize, score_density, score_loss, score_random, score_stl,
                         write_scores_csv)
from .models import (ModelConfig, TrainConfig, build_model, evaluate_mse, extract_embeddings,
                     per_instance_losses, train_representation)

log = logging.getLogger(__name__)

BASELINE = "no-curriculum"
NEEDS_REPRESENTATION = {"loss", "knn", "kde", "convex-value", "convex-rank", "grid"}
UNTUNED = {"no-curriculum", "random", "stl"}


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedData:
    name: str
    bundle: SplitBundle
    stl_series: RawSeries  # normalized train segment
    config: DatasetConfig

    @property
    def n_inputs(self) -> int:
        return self.bundle.train[0].x.shape[1]

    @property
    def n_targets(self) -> int:
        return self.bundle.train[0].y.shape[1]


def load_series(dcfg: DatasetConfig) -> RawSeries:
    if dcfg.source == "csv":
        return load_csv(dcfg.path, dcfg.target_channels, sample_period=dcfg.sample_period,
                        seasonal_period=dcfg.seasonal_period)
    series = synth_generate(dcfg.synthetic.to_spec())
    if dcfg.target_channels:
        series = replace(series, target_channels=tuple(dcfg.target_channels))
    return replace(series, seasonal_period=dcfg.seasonal_period, sample_period=dcfg.sample_period)


def prepare_data(dcfg: DatasetConfig, seed: int = 0) -> PreparedData:
    series = load_series(dcfg)
    bundle = split_series(series, dcfg.lookback, dcfg.horizon, dcfg.stride, dcfg.ratios)
    if dcfg.subsample is not None:
        bundle = replace(bundle, train=subsample(bundle.train, dcfg.subsample, seed))
    t0, t1 = bundle.train_ticks
    rows = np.flatnonzero((series.timestamps >= t0) & (series.timestamps < t1))
    normed = replace(series, values=bundle.norm_stats.normalize(series.values))
    return PreparedData(dcfg.name, bundle, normed.rows(int(rows[0]), int(rows[-1]) + 1), dcfg)


# ---------------------------------------------------------------------------
# hyperparameters


def sample_trial(cfg: ExperimentConfig, trial: int) -> dict:
    """Hyperparameters of one search trial, drawn in a fixed order.

    The draw depends only on (search seed, trial index), so trial ``i``
    proposes the same values in every cell.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.search.seed, trial]))
    space = cfg.representation.search_space
    st = cfg.strategies
    lo, hi = space.lr
    return {
        "hidden_dim": int(space.hidden_dim[rng.integers(len(space.hidden_dim))]),
        "repr_lr": float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
        "knn_percentile": float(rng.uniform(*st.knn_percentile)),
        "kde_bandwidth_scale": float(math.exp(rng.uniform(math.log(st.kde_bandwidth_scale[0]),
                                                           math.log(st.kde_bandwidth_scale[1])))),
        "density_estimator": str(st.density_estimators[rng.integers(len(st.density_estimators))]),
        "alpha": float(rng.uniform(*st.alpha)),
        "grid_bins": int(st.grid_bins[rng.integers(len(st.grid_bins))]),
    }


def relevant_hparams(strategy: str, hp: dict) -> dict:
    keys: list[str] = []
    if strategy in NEEDS_REPRESENTATION:
        keys += ["hidden_dim", "repr_lr"]
    dens = {"knn": "knn", "kde": "kde"}.get(strategy)
    if strategy in ("convex-value", "convex-rank", "grid"):
        dens = hp["density_estimator"]
        keys.append("density_estimator")
    if dens == "knn":
        keys.append("knn_percentile")
    elif dens == "kde":
        keys.append("kde_bandwidth_scale")
    if strategy in ("convex-value", "convex-rank"):
        keys.append("alpha")
    if strategy == "grid":
        keys.append("grid_bins")
    return {k: hp[k] for k in keys}


def density_config(estimator: str, hp: dict, seed: int) -> DensityConfig:
    if estimator == "knn":
        return DensityConfig("knn", radius_percentile=hp["knn_percentile"], seed=seed)
    return DensityConfig("kde", bandwidth_scale=hp["kde_bandwidth_scale"], seed=seed)


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class Representation:
    embeddings: np.ndarray
    losses: np.ndarray
    state: dict
    model_config: ModelConfig
    loss_curve: list[float]


_REPR_CACHE: dict[tuple, Representation] = {}


def train_representation_stage(cfg: ExperimentConfig, data: PreparedData, hidden: int, lr: float,
                               seed: int) -> Representation:
    rc = cfg.representation
    key = (data.name, rc.kind, hidden, lr, seed, rc.epochs, rc.batch_size, len(data.bundle.train),
           cfg.schedule.clip_max_norm)
    if key in _REPR_CACHE:
        return _REPR_CACHE[key]
    dc = data.config
    mcfg = ModelConfig(rc.kind, dc.lookback, data.n_inputs, dc.horizon, data.n_targets, hidden)
    model = build_model(mcfg, seed)
    model, curve = train_representation(model, data.bundle.train, TrainConfig(
        epochs=rc.epochs, batch_size=rc.batch_size, lr=lr, seed=seed, clip_max_norm=cfg.schedule.clip_max_norm))
    rep = Representation(extract_embeddings(model, data.bundle.train).embeddings,
                         per_instance_losses(model, data.bundle.train), model.get_state(), mcfg, curve)
    _REPR_CACHE[key] = rep
    return rep


def compute_scores(strategy: str, data: PreparedData, hp: dict, rep: Representation | None,
                   seed: int) -> ScoreVector | None:
    """Difficulty scores for ``strategy`` (``None`` for the no-curriculum baseline)."""
    n = len(data.bundle.train)
    if strategy == BASELINE:
        return None
    if strategy == "random":
        return score_random(n, seed)
    if strategy == "stl":
        return score_stl(data.stl_series, data.bundle.train)
    if rep is None:
        raise ValueError(f"strategy {strategy!r} needs a trained representation")
    if strategy == "loss":
        return score_loss(rep.losses)
    if strategy in ("knn", "kde"):
        return score_density(rep.embeddings, density_config(strategy, hp, seed))
    loss = minmax_normalize(score_loss(rep.losses))
    dens = score_density(rep.embeddings, density_config(hp["density_estimator"], hp, seed))
    if strategy == "convex-value":
        out = fuse_convex_value(loss.normalized, minmax_normalize(dens).normalized, hp["alpha"])
    elif strategy == "convex-rank":
        out = fuse_convex_rank(average_ranks(loss.raw), average_ranks(dens.raw), hp["alpha"])
    elif strategy == "grid":
        out = grid_scores(loss.raw, -dens.raw, hp["grid_bins"])
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    out.provenance.update(density_estimator=hp["density_estimator"])
    return out


def partition_for(scores: ScoreVector | None, n: int, K: int) -> BucketPartition:
    if scores is None:
        return BucketPartition([np.arange(n)], BASELINE)
    return make_buckets(scores, K)


# ---------------------------------------------------------------------------
# stage 2


def train_curriculum(cfg: ExperimentConfig, data: PreparedData, partition: BucketPartition, schedule: str,
                     seed: int, rep: Representation | None = None):
    """Fresh (or warm-started) curriculum model trained over ``partition``.

    Returns ``(record, val_mse, test_mse, seconds)``.
    """
    sc = cfg.schedule
    dc = data.config
    start = time.perf_counter()
    mcfg = ModelConfig(sc.model, dc.lookback, data.n_inputs, dc.horizon, data.n_targets, sc.hidden_dim)
    model = build_model(mcfg, seed)
    if sc.warm_start and rep is not None:
        if rep.model_config != mcfg:
            raise ValueError("warm start needs identical representation and curriculum architectures")
        model.set_state(rep.state)
    record = stage_train(model, partition, schedule,
                         StageConfig(sc.epochs_per_stage, sc.batch_size, sc.lr, seed, sc.clip_max_norm),
                         data.bundle.train, data.bundle.val)
    val = evaluate_mse(model, data.bundle.val)
    test = evaluate_mse(model, data.bundle.test)
    return record, val, test, time.perf_counter() - start


# ---------------------------------------------------------------------------
# search


@dataclass
class TrialResult:
    trial: int
    hparams: dict
    val_mse: float
    seconds: float
    failed: bool = False


@dataclass
class SearchOutcome:
    best: TrialResult
    trials: list[TrialResult]
    scores: ScoreVector | None = None
    partition: BucketPartition | None = None
    representation: Representation | None = None


def pick_best(trials: Sequence[TrialResult]) -> TrialResult:
    """Lowest validation MSE; ties go to the earlier trial."""
    return min(trials, key=lambda t: (t.val_mse, t.trial))


def run_trial(cfg, data, strategy, schedule, trial):
    hp = sample_trial(cfg, trial)
    seed = cfg.search.seed
    start = time.perf_counter()
    rep = None
    if strategy in NEEDS_REPRESENTATION or cfg.schedule.warm_start:
        rep = train_representation_stage(cfg, data, hp["hidden_dim"], hp["repr_lr"], seed)
    scores = compute_scores(strategy, data, hp, rep, seed)
    partition = partition_for(scores, len(data.bundle.train), cfg.schedule.K)
    _, val, _, _ = train_curriculum(cfg, data, partition, schedule, seed, rep)
    return TrialResult(trial, relevant_hparams(strategy, hp), val, time.perf_counter() - start), scores, \
        partition, rep


def random_search(cfg: ExperimentConfig, data: PreparedData, strategy: str, schedule: str) -> SearchOutcome:
    """Seeded uniform search over the declared ranges; best trial by validation MSE.

    Strategies without tunable parameters run a single trial. A trial that hits
    a non-finite value is kept with ``val_mse = inf``.
    """
    n_trials = 1 if strategy in UNTUNED else cfg.search.trials
    trials, artifacts = [], {}
    for t in range(n_trials):
        try:
            result, scores, partition, rep = run_trial(cfg, data, strategy, schedule, t)
            artifacts[t] = (scores, partition, rep)
        except (NonFiniteError, FloatingPointError) as exc:
            log.warning("trial %d of %s/%s failed: %s", t, strategy, schedule, exc)
            result = TrialResult(t, relevant_hparams(strategy, sample_trial(cfg, t)), math.inf, 0.0, failed=True)
        trials.append(result)
    best = pick_best(trials)
    scores, partition, rep = artifacts.get(best.trial, (None, None, None))
    return SearchOutcome(best, trials, scores, partition, rep)


# ---------------------------------------------------------------------------
# seeds and aggregation


@dataclass
class SeedResult:
    seed: int
    val_mse: float
    test_mse: float
    seconds: float
    steps: int
    failed: bool = False


@dataclass
class RunAggregate:
    dataset: str
    strategy: str
    schedule: str
    val_mean: float
    val_std: float
    test_mean: float
    test_std: float
    n_seeds: int
    seconds_mean: float = 0.0
    valid: bool = True
    seeds: list[SeedResult] = field(default_factory=list)
    hparams: dict = field(default_factory=dict)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and unbiased (n-1) standard deviation; std is 0 for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), std


def aggregate(dataset: str, strategy: str, schedule: str, seeds: Sequence[SeedResult],
              expected: int | None = None, hparams: dict | None = None) -> RunAggregate:
    ok = [s for s in seeds if not s.failed]
    expected = expected if expected is not None else len(seeds)
    vm, vs = mean_std([s.val_mse for s in ok])
    tm, ts = mean_std([s.test_mse for s in ok])
    secs = float(np.mean([s.seconds for s in ok])) if ok else math.nan
    return RunAggregate(dataset, strategy, schedule, vm, vs, tm, ts, len(ok), secs,
                        valid=len(ok) >= expected / 2, seeds=list(seeds), hparams=dict(hparams or {}))


def run_seeds(cfg: ExperimentConfig, data: PreparedData, strategy: str, schedule: str,
              outcome: SearchOutcome) -> tuple[RunAggregate, dict[int, StageTrainRecord]]:
    """Retrain the curriculum model with seeds ``0..S-1`` on the best trial's buckets."""
    S = cfg.evaluation.seeds
    partition = outcome.partition or partition_for(None, len(data.bundle.train), cfg.schedule.K)
    results, records = [], {}
    for s in range(S):
        try:
            record, val, test, secs = train_curriculum(cfg, data, partition, schedule, s, outcome.representation)
            results.append(SeedResult(s, val, test, secs, record.total_steps))
            records[s] = record
        except (NonFiniteError, FloatingPointError) as exc:
            log.warning("seed %d of %s/%s failed: %s", s, strategy, schedule, exc)
            results.append(SeedResult(s, math.nan, math.nan, 0.0, 0, failed=True))
    agg = aggregate(data.name, strategy, schedule, results, expected=S, hparams=outcome.best.hparams)
    if not agg.valid:
        log.warning("cell %s/%s/%s invalid: only %d of %d seeds succeeded", data.name, strategy, schedule,
                    agg.n_seeds, S)
    return agg, records


# ---------------------------------------------------------------------------
# tables


@dataclass
class RankTable:
    per_dataset: dict[str, dict[str, dict[str, float]]]  # schedule -> dataset -> strategy -> rank
    mean: dict[str, dict[str, float]]  # schedule -> strategy -> mean rank


def mean_ranks(columns: dict[str, dict[str, float]]) -> tuple[dict[str, dict[str, float]], dict[str, float]]:
    """Rank strategies within each dataset column (ascending, ties averaged), then average."""
    strategies = None
    per: dict[str, dict[str, float]] = {}
    for ds, col in columns.items():
        names = list(col)
        if strategies is None:
            strategies = names
        elif set(names) != set(strategies):
            missing = set(strategies) ^ set(names)
            raise KeyError(f"dataset {ds!r}: missing cells for {sorted(missing)}")
        r = average_ranks(np.array([col[n] for n in names]))
        per[ds] = {n: float(v) for n, v in zip(names, r)}
    means = {s: float(np.mean([per[ds][s] for ds in per])) for s in (strategies or [])}
    return per, means


def mean_rank_table(aggregates: Iterable[RunAggregate], metric: str = "test_mean") -> RankTable:
    by_sched: dict[str, dict[str, dict[str, float]]] = {}
    for a in aggregates:
        by_sched.setdefault(a.schedule, {}).setdefault(a.dataset, {})[a.strategy] = getattr(a, metric)
    per, means = {}, {}
    for sched, cols in by_sched.items():
        per[sched], means[sched] = mean_ranks(cols)
    return RankTable(per, means)


def improvement(baseline_mse: float, strategy_mse: float) -> float:
    if baseline_mse == 0:
        raise ZeroDivisionError("baseline MSE is zero")
    return 100.0 * (baseline_mse - strategy_mse) / baseline_mse


def improvement_table(aggregates: Iterable[RunAggregate], baseline: str = BASELINE,
                      metric: str = "test_mean") -> dict[tuple[str, str, str], float]:
    """``(dataset, schedule, strategy) -> % improvement``; positive means better than baseline."""
    aggs = list(aggregates)
    base = {(a.dataset, a.schedule): getattr(a, metric) for a in aggs if a.strategy == baseline}
    out = {}
    for a in aggs:
        key = (a.dataset, a.schedule)
        if key not in base:
            raise KeyError(f"no {baseline!r} cell for dataset {a.dataset!r}, schedule {a.schedule!r}")
        out[(a.dataset, a.schedule, a.strategy)] = improvement(base[key], getattr(a, metric))
    return out


# ---------------------------------------------------------------------------
# reports

RESULTS_HEADER = ["dataset", "strategy", "schedule", "seed", "val_mse", "test_mse", "train_seconds", "steps",
                  "failed"]
SUMMARY_HEADER = ["dataset", "strategy", "schedule", "n_seeds", "val_mean", "val_std", "test_mean", "test_std",
                  "valid"]
RANKS_HEADER = ["schedule", "strategy", "dataset", "rank"]
IMPROVEMENT_HEADER = ["dataset", "schedule", "strategy", "improvement_pct"]
TIMING_HEADER = ["dataset", "strategy", "schedule", "train_seconds_mean"]
TRIALS_HEADER = ["dataset", "strategy", "schedule", "trial", "val_mse", "seconds", "failed", "hparams"]


def _f(x: float) -> str:
    return repr(float(x))


def _write(path: Path, header, rows) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, files: Sequence[Path], extra: dict | None = None,
                   name: str = "manifest.json") -> Path:
    """``manifest.json`` with a sha256 per file and one digest over all of them."""
    entries = sorted(({"file": p.name, "sha256": _sha256(p)} for p in files), key=lambda e: e["file"])
    digest = hashlib.sha256("".join(e["file"] + e["sha256"] for e in entries).encode()).hexdigest()
    doc = {"version": __version__, "files": entries, "digest": digest, **(extra or {})}
    path = Path(out_dir) / name
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def emit_reports(aggregates: Sequence[RunAggregate], rank_table: RankTable | None,
                 improvements: dict | None, score_dumps: dict | None, stage_records: dict | None,
                 out_dir, trials: dict | None = None, extra: dict | None = None) -> Path:
    """Write every report file plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    files = []
    files.append(_write(out / "results.csv", RESULTS_HEADER, [
        [a.dataset, a.strategy, a.schedule, s.seed, _f(s.val_mse), _f(s.test_mse), _f(s.seconds), s.steps,
         int(s.failed)] for a in aggregates for s in a.seeds]))
    files.append(_write(out / "summary.csv", SUMMARY_HEADER, [
        [a.dataset, a.strategy, a.schedule, a.n_seeds, _f(a.val_mean), _f(a.val_std), _f(a.test_mean),
         _f(a.test_std), int(a.valid)] for a in aggregates]))
    files.append(_write(out / "timing.csv", TIMING_HEADER, [
        [a.dataset, a.strategy, a.schedule, _f(a.seconds_mean)] for a in aggregates]))
    rank_rows = []
    if rank_table is not None:
        for sched, cols in rank_table.per_dataset.items():
            for ds, col in cols.items():
                rank_rows += [[sched, s, ds, _f(r)] for s, r in col.items()]
            rank_rows += [[sched, s, "mean", _f(r)] for s, r in rank_table.mean[sched].items()]
    files.append(_write(out / "ranks.csv", RANKS_HEADER, rank_rows))
    files.append(_write(out / "improvement.csv", IMPROVEMENT_HEADER, [
        [ds, sched, s, _f(v)] for (ds, sched, s), v in (improvements or {}).items()]))
    if trials:
        files.append(_write(out / "trials.csv", TRIALS_HEADER, [
            [ds, s, sched, t.trial, _f(t.val_mse), _f(t.seconds), int(t.failed), json.dumps(t.hparams, sort_keys=True)]
            for (ds, s, sched), ts in trials.items() for t in ts]))
    for (ds, s, sched), scores in (score_dumps or {}).items():
        files.append(write_scores_csv(scores, out / f"scores_{ds}_{s}_{sched}.csv"))
    for (ds, s, sched, seed), rec in (stage_records or {}).items():
        files.append(write_stage_csv(rec, out / f"stages_{ds}_{s}_{sched}_s{seed}.csv"))
    return write_manifest(out, files, extra)


def read_results(path) -> list[RunAggregate]:
    """Rebuild aggregates from ``results.csv`` (per-seed rows)."""
    cells: dict[tuple, list[SeedResult]] = {}
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            key = (r["dataset"], r["strategy"], r["schedule"])
            cells.setdefault(key, []).append(SeedResult(
                int(r["seed"]), float(r["val_mse"]), float(r["test_mse"]), float(r["train_seconds"]),
                int(r["steps"]), bool(int(r["failed"]))))
    return [aggregate(*key, seeds) for key, seeds in cells.items()]


def read_summary(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# orchestration


def run_cell(cfg: ExperimentConfig, data: PreparedData, strategy: str, schedule: str):
    outcome = random_search(cfg, data, strategy, schedule)
    agg, records = run_seeds(cfg, data, strategy, schedule, outcome)
    return agg, records, outcome


def _cell_job(args):
    cfg_doc, ds_idx, strategy, schedule = args
    cfg = ExperimentConfig.model_validate(cfg_doc)
    data = prepare_data(cfg.dataset[ds_idx], cfg.search.seed)
    return run_cell(cfg, data, strategy, schedule)


def _cells(cfg: ExperimentConfig):
    for i, d in enumerate(cfg.dataset):
        for strategy in cfg.strategies.names:
            # the baseline ignores the schedule; it runs once and is reported under every schedule
            scheds = cfg.schedule.schedules[:1] if strategy == BASELINE else cfg.schedule.schedules
            for sched in scheds:
                yield i, d.name, strategy, sched


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run every cell, aggregate, and emit reports. Returns a summary dict."""
    out = Path(out_dir or cfg.output.dir)
    cells = list(_cells(cfg))
    if cfg.evaluation.workers > 1:
        doc = cfg.model_dump(mode="json")
        with ProcessPoolExecutor(cfg.evaluation.workers) as pool:
            done = list(pool.map(_cell_job, [(doc, i, s, sc) for i, _, s, sc in cells]))
    else:
        prepared = {i: prepare_data(d, cfg.search.seed) for i, d in enumerate(cfg.dataset)}
        done = []
        for i, name, strategy, sched in cells:
            log.info("cell %s / %s / %s", name, strategy, sched)
            done.append(run_cell(cfg, prepared[i], strategy, sched))

    aggregates, stage_records, score_dumps, trials = [], {}, {}, {}
    for (i, name, strategy, sched), (agg, records, outcome) in zip(cells, done):
        scheds = cfg.schedule.schedules if strategy == BASELINE else [sched]
        for sc in scheds:
            aggregates.append(replace(agg, schedule=sc))
            trials[(name, strategy, sc)] = outcome.trials
            for seed, rec in records.items():
                stage_records[(name, strategy, sc, seed)] = rec
            if outcome.scores is not None:
                score_dumps[(name, strategy, sc)] = outcome.scores

    ranks = mean_rank_table(aggregates)
    has_base = BASELINE in cfg.strategies.names
    improvements = improvement_table(aggregates) if has_base else {}
    manifest = emit_reports(aggregates, ranks, improvements, score_dumps, stage_records, out, trials,
                            extra={"config": cfg.model_dump(mode="json"), "search_seed": cfg.search.seed,
                                   "evaluation_seeds": list(range(cfg.evaluation.seeds))})
    (out / "config.resolved.yaml").write_text(dump_config(cfg))
    return {"aggregates": aggregates, "ranks": ranks, "improvements": improvements, "manifest": manifest}

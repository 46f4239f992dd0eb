"""Command-line entry point; each subcommand wraps one pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .config import STRATEGIES, ConfigError, ExperimentConfig, load_config
from .curriculum import read_buckets_csv, write_buckets_csv, write_stage_csv
from .data import DataError, synth_generate, write_csv
from .difficulty import read_scores_csv, write_scores_csv
from .models import (ModelConfig, TrainConfig, build_model, extract_embeddings, load_checkpoint,
                     per_instance_losses, save_checkpoint, train_representation)

log = logging.getLogger("dualcurriculum")

COMMANDS = ("synth", "windows", "train-repr", "score", "buckets", "train-curriculum", "experiment", "report")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default",
                        help="YAML config path, or a shipped name ('default', 'smoke')")
    common.add_argument("--out", default=None, help="output directory (defaults to output.dir)")
    common.add_argument("--seed", type=int, default=None, help="seed override (defaults to search.seed)")
    common.add_argument("--strategy", choices=STRATEGIES, default="loss")
    common.add_argument("--schedule", choices=("one-pass", "baby-steps"), default="one-pass")
    common.add_argument("--k", type=int, default=None, help="number of buckets (defaults to schedule.K)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dualcurriculum", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    helps = {
        "synth": "generate the configured synthetic series as CSV",
        "windows": "window and split the dataset; write arrays and norm stats",
        "train-repr": "train the representation model; write checkpoint, embeddings, losses",
        "score": "compute difficulty scores for --strategy",
        "buckets": "partition scores into --k ordered buckets",
        "train-curriculum": "stage-wise training over buckets with --schedule",
        "experiment": "full search + multi-seed protocol with reports",
        "report": "rebuild summary, rank and improvement tables from results.csv",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


class _Ctx:
    def __init__(self, args):
        self.args = args
        self.cfg: ExperimentConfig = load_config(args.config)
        if args.k is not None:
            if args.k < 1:
                raise ConfigError("--k must be >= 1")
            self.cfg = self.cfg.model_copy(update={"schedule": self.cfg.schedule.model_copy(update={"K": args.k})})
        self.out = Path(args.out or self.cfg.output.dir)
        self.seed = args.seed if args.seed is not None else self.cfg.search.seed
        self.written: list[Path] = []
        self._data = None

    @property
    def data(self) -> ex.PreparedData:
        if self._data is None:
            self._data = ex.prepare_data(self.cfg.dataset[0], self.cfg.search.seed)
        return self._data

    def hparams(self) -> dict:
        rc = self.cfg.representation
        return {"hidden_dim": rc.hidden_dim, "repr_lr": rc.lr, "knn_percentile": 50.0, "kde_bandwidth_scale": 1.0,
                "density_estimator": self.cfg.strategies.density_estimators[0], "alpha": 0.5,
                "grid_bins": self.cfg.schedule.K}

    def stamp(self, command: str):
        # one manifest per command, so stages can share a directory
        ex.write_manifest(self.out, self.written, {"command": command, "seed": self.seed,
                                                   "config": self.cfg.model_dump(mode="json")},
                          name=f"manifest_{command}.json")


def _representation(ctx: _Ctx) -> ex.Representation:
    ckpt = ctx.out / "repr_model.json"
    if ckpt.exists():
        model = load_checkpoint(ckpt)
        train = ctx.data.bundle.train
        return ex.Representation(extract_embeddings(model, train).embeddings, per_instance_losses(model, train),
                                 model.get_state(), model.config, [])
    return _train_repr(ctx)


def _train_repr(ctx: _Ctx) -> ex.Representation:
    rc = ctx.cfg.representation
    data = ctx.data
    dc = data.config
    mcfg = ModelConfig(rc.kind, dc.lookback, data.n_inputs, dc.horizon, data.n_targets, rc.hidden_dim)
    model, curve = train_representation(build_model(mcfg, ctx.seed), data.bundle.train, TrainConfig(
        rc.epochs, rc.batch_size, rc.lr, ctx.seed, ctx.cfg.schedule.clip_max_norm))
    table = extract_embeddings(model, data.bundle.train)
    losses = per_instance_losses(model, data.bundle.train)
    ctx.out.mkdir(parents=True, exist_ok=True)
    ctx.written.append(save_checkpoint(model, ctx.out / "repr_model.json"))
    ctx.written.append(ex._write(ctx.out / "repr_loss.csv", ["epoch", "train_loss"],
                                 [[i + 1, repr(v)] for i, v in enumerate(curve)]))
    ctx.written.append(ex._write(ctx.out / "embeddings.csv", ["index", *[f"e{j}" for j in range(table.embeddings.shape[1])]],
                                 [[int(i), *map(repr, map(float, row))]
                                  for i, row in zip(table.instance_index, table.embeddings)]))
    ctx.written.append(ex._write(ctx.out / "losses.csv", ["index", "loss"],
                                 [[i, repr(float(v))] for i, v in enumerate(losses)]))
    return ex.Representation(table.embeddings, losses, model.get_state(), mcfg, curve)


def _scores(ctx: _Ctx, strategy: str):
    path = ctx.out / f"scores_{strategy}.csv"
    if strategy == ex.BASELINE:
        return None
    if path.exists():
        return read_scores_csv(path, strategy)
    rep = _representation(ctx) if strategy in ex.NEEDS_REPRESENTATION else None
    scores = ex.compute_scores(strategy, ctx.data, ctx.hparams(), rep, ctx.seed)
    ctx.written.append(write_scores_csv(scores, path))
    return scores


def _partition(ctx: _Ctx, strategy: str):
    path = ctx.out / f"buckets_{strategy}.csv"
    if path.exists():
        part = read_buckets_csv(path, strategy)
        if part.K == ctx.cfg.schedule.K or strategy == ex.BASELINE:
            return part
    part = ex.partition_for(_scores(ctx, strategy), len(ctx.data.bundle.train), ctx.cfg.schedule.K)
    ctx.written.append(write_buckets_csv(part, path))
    return part


def cmd_synth(ctx: _Ctx) -> str:
    dcfg = ctx.cfg.dataset[0]
    if dcfg.source != "synthetic":
        raise ConfigError("dataset.0.source: 'synth' needs a synthetic dataset")
    spec = dcfg.synthetic.to_spec()
    if ctx.args.seed is not None:
        spec = type(spec)(**{**spec.__dict__, "seed": ctx.args.seed})
    series = synth_generate(spec)
    ctx.written.append(write_csv(series, ctx.out / "series.csv"))
    return f"T={series.T} C={series.C}"


def cmd_windows(ctx: _Ctx) -> str:
    b = ctx.data.bundle
    arrays = {}
    for name in ("train", "val", "test"):
        split = getattr(b, name)
        arrays[f"{name}_x"] = np.stack([w.x for w in split])
        arrays[f"{name}_y"] = np.stack([w.y for w in split])
        arrays[f"{name}_origin"] = np.array([w.origin for w in split])
    ctx.out.mkdir(parents=True, exist_ok=True)
    np.savez(ctx.out / "windows.npz", norm_mean=b.norm_stats.mean, norm_std=b.norm_stats.std, **arrays)
    ctx.written.append(ctx.out / "windows.npz")
    n = b.sizes()
    return f"train={n[0]} val={n[1]} test={n[2]}"


def cmd_train_repr(ctx: _Ctx) -> str:
    rep = _train_repr(ctx)
    return f"epochs={len(rep.loss_curve)} final_loss={rep.loss_curve[-1]:.6g} d={rep.embeddings.shape[1]}"


def cmd_score(ctx: _Ctx) -> str:
    strategy = ctx.args.strategy
    if strategy == ex.BASELINE:
        raise ConfigError("--strategy: no-curriculum has no difficulty scores")
    path = ctx.out / f"scores_{strategy}.csv"
    if path.exists():
        path.unlink()
    scores = _scores(ctx, strategy)
    return f"strategy={strategy} n={len(scores)}"


def cmd_buckets(ctx: _Ctx) -> str:
    strategy = ctx.args.strategy
    path = ctx.out / f"buckets_{strategy}.csv"
    if path.exists():
        path.unlink()
    part = _partition(ctx, strategy)
    return f"strategy={strategy} sizes={part.sizes()}"


def cmd_train_curriculum(ctx: _Ctx) -> str:
    strategy, schedule = ctx.args.strategy, ctx.args.schedule
    part = _partition(ctx, strategy)
    rep = _representation(ctx) if ctx.cfg.schedule.warm_start else None
    record, val, test, secs = ex.train_curriculum(ctx.cfg, ctx.data, part, schedule, ctx.seed, rep)
    ctx.written.append(write_stage_csv(record, ctx.out / f"stages_{strategy}_{schedule}.csv"))
    metrics = ctx.out / f"metrics_{strategy}_{schedule}.json"
    metrics.write_text(json.dumps({"val_mse": val, "test_mse": test, "train_seconds": secs,
                                   "steps": record.total_steps}, indent=2))
    ctx.written.append(metrics)
    return f"val_mse={val:.6g} test_mse={test:.6g} steps={record.total_steps}"


def cmd_experiment(ctx: _Ctx) -> str:
    res = ex.run_experiment(ctx.cfg, ctx.out)
    return f"cells={len(res['aggregates'])} manifest={res['manifest']}"


def cmd_report(ctx: _Ctx) -> str:
    results = ctx.out / "results.csv"
    if not results.exists():
        raise DataError(f"{results} not found; run 'experiment' first")
    aggs = ex.read_results(results)
    ranks = ex.mean_rank_table(aggs)
    has_base = any(a.strategy == ex.BASELINE for a in aggs)
    imps = ex.improvement_table(aggs) if has_base else {}
    ex.emit_reports(aggs, ranks, imps, None, None, ctx.out)
    files = sorted(p for p in ctx.out.iterdir() if p.suffix in (".csv", ".npz") or p.name == "repr_model.json")
    ex.write_manifest(ctx.out, files, {"command": "report", "config": ctx.cfg.model_dump(mode="json")})
    return f"cells={len(aggs)}"


HANDLERS = {
    "synth": cmd_synth, "windows": cmd_windows, "train-repr": cmd_train_repr, "score": cmd_score,
    "buckets": cmd_buckets, "train-curriculum": cmd_train_curriculum, "experiment": cmd_experiment,
    "report": cmd_report,
}


def run_cli(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = _Ctx(args)
        message = HANDLERS[args.command](ctx)
        if args.command not in ("experiment", "report"):
            ctx.stamp(args.command)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(message)
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()

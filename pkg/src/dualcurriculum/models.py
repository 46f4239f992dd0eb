"""Recurrent and attention forecasters that double as representation models."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import WindowInstance, stack
from .optim import AdamState, adam_step, glorot_uniform, make_rng

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dualcurriculum.params"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    kind: str  # "lstm" or "attention"
    lookback: int
    n_inputs: int
    horizon: int
    n_targets: int
    hidden: int = 32


class Forecaster:
    """Parameter container plus a batched forward pass.

    ``forward_batch`` returns ``(forecast, embedding)`` as tensors of shape
    ``(B, H * C_target)`` and ``(B, d)``.
    """

    kind = ""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def out_dim(self) -> int:
        return self.config.horizon * self.config.n_targets

    def _check_input(self, x: np.ndarray):
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.lookback, cfg.n_inputs):
            raise ValueError(f"expected input (B, {cfg.lookback}, {cfg.n_inputs}), got {x.shape}")

    def forward_batch(self, x: np.ndarray) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def get_state(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.values = np.array(state[k], dtype=np.float64)


class RecurrentForecaster(Forecaster):
    """Single LSTM cell unrolled over the lookback; embedding is the final cell state."""

    kind = "lstm"

    @classmethod
    def init(cls, config: ModelConfig, seed: int, zero: bool = False) -> "RecurrentForecaster":
        rng = make_rng(seed)
        d, C, out = config.hidden, config.n_inputs, config.horizon * config.n_targets
        shapes = {"W_x": (C, 4 * d), "W_h": (d, 4 * d), "b": (4 * d,), "W_out": (d, out), "b_out": (out,)}
        params = {}
        for name, shape in shapes.items():
            if zero or len(shape) == 1:
                v = np.zeros(shape)
            else:
                v = glorot_uniform(rng, shape[0], shape[1])
            params[name] = Tensor(v, requires_grad=True, name=name)
        return cls(config, params)

    def forward_batch(self, x):
        self._check_input(x)
        p = self.params
        d = self.config.hidden
        B, L, _ = x.shape
        xw = ad.add(ad.matmul(Tensor(x), p["W_x"]), p["b"])  # (B, L, 4d)
        h = Tensor(np.zeros((B, d)))
        c = Tensor(np.zeros((B, d)))
        for t in range(L):
            z = ad.add(xw[:, t, :], ad.matmul(h, p["W_h"]))
            i = ad.sigmoid(z[:, 0:d])
            f = ad.sigmoid(z[:, d:2 * d])
            o = ad.sigmoid(z[:, 2 * d:3 * d])
            g = ad.tanh(z[:, 3 * d:4 * d])
            c = ad.add(ad.mul(f, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
        forecast = ad.add(ad.matmul(h, p["W_out"]), p["b_out"])
        return forecast, c


def sinusoidal_positions(L: int, d: int) -> np.ndarray:
    pos = np.arange(L, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class AttentionForecaster(Forecaster):
    """One single-head self-attention block with a tanh feed-forward sublayer.

    Post-norm residual wiring; the embedding is the block output at the last
    time index, which also feeds the linear forecast head.
    """

    kind = "attention"

    def __init__(self, config, params, residual: bool = True):
        super().__init__(config, params)
        self.residual = residual
        self.last_attention: np.ndarray | None = None

    @classmethod
    def init(cls, config: ModelConfig, seed: int, zero: bool = False, residual: bool = True) -> "AttentionForecaster":
        rng = make_rng(seed)
        d, C, out = config.hidden, config.n_inputs, config.horizon * config.n_targets
        mats = {"W_in": (C, d), "W_q": (d, d), "W_k": (d, d), "W_v": (d, d), "W_o": (d, d),
                "W_ff1": (d, d), "W_ff2": (d, d), "W_out": (d, out)}
        params = {}
        for name, shape in mats.items():
            v = np.zeros(shape) if zero else glorot_uniform(rng, *shape)
            params[name] = Tensor(v, requires_grad=True, name=name)
            bias = "b" + name[1:]
            params[bias] = Tensor(np.zeros(shape[1]), requires_grad=True, name=bias)
        for ln in ("ln1", "ln2"):
            params[f"{ln}_scale"] = Tensor(np.ones(d), requires_grad=True, name=f"{ln}_scale")
            params[f"{ln}_shift"] = Tensor(np.zeros(d), requires_grad=True, name=f"{ln}_shift")
        return cls(config, params, residual=residual)

    def _linear(self, x, name):
        return ad.add(ad.matmul(x, self.params["W" + name]), self.params["b" + name])

    def forward_batch(self, x):
        self._check_input(x)
        p = self.params
        d = self.config.hidden
        L = x.shape[1]
        h = ad.add(self._linear(Tensor(x), "_in"), Tensor(sinusoidal_positions(L, d)))
        q, k, v = self._linear(h, "_q"), self._linear(h, "_k"), self._linear(h, "_v")
        scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d))
        attn = ad.softmax(scores)  # (B, L, L)
        self.last_attention = attn.values
        a = self._linear(ad.matmul(attn, v), "_o")
        h1 = ad.layer_norm(ad.add(h, a) if self.residual else a, p["ln1_scale"], p["ln1_shift"])
        ff = self._linear(ad.tanh(self._linear(h1, "_ff1")), "_ff2")
        h2 = ad.layer_norm(ad.add(h1, ff) if self.residual else ff, p["ln2_scale"], p["ln2_shift"])
        emb = h2[:, L - 1, :]
        return self._linear(emb, "_out"), emb


MODEL_KINDS = {"lstm": RecurrentForecaster, "attention": AttentionForecaster}


def build_model(config: ModelConfig, seed: int) -> Forecaster:
    try:
        cls = MODEL_KINDS[config.kind]
    except KeyError:
        raise ValueError(f"unknown model kind {config.kind!r}; choose from {sorted(MODEL_KINDS)}") from None
    return cls.init(config, seed)


def forward(model: Forecaster, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-instance forward: ``x`` is ``(L, C)``; returns ``(H x C_target, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (L, C) input, got {x.shape}")
    pred, emb = model.forward_batch(x[None])
    cfg = model.config
    return pred.values[0].reshape(cfg.horizon, cfg.n_targets), emb.values[0]


def predict(model: Forecaster, instances: Sequence[WindowInstance], batch_size: int = 256):
    """Deterministic batched inference: ``(forecasts (N, H*Ct), embeddings (N, d))``."""
    xs, _ = stack(instances)
    preds, embs = [], []
    for lo in range(0, len(xs), batch_size):
        pred, emb = model.forward_batch(xs[lo:lo + batch_size])
        preds.append(pred.values)
        embs.append(emb.values)
    return np.concatenate(preds), np.concatenate(embs)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    clip_max_norm: float = 1.0


def _flat_targets(instances):
    _, ys = stack(instances)
    return ys.reshape(len(ys), -1)


def train_steps(model: Forecaster, xs: np.ndarray, ys: np.ndarray, order: np.ndarray,
                batch_size: int, opt: AdamState, context: str = "") -> float:
    """One pass over ``order`` in mini-batches; returns the size-weighted mean batch loss."""
    total = 0.0
    for b, lo in enumerate(range(0, len(order), batch_size)):
        idx = order[lo:lo + batch_size]
        try:
            with Tape() as tape:
                pred, _ = model.forward_batch(xs[idx])
                loss = ad.mse(pred, Tensor(ys[idx]))
                grads = ad.backward(loss, tape)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"{context}batch {b}: {exc}") from exc
        named = {name: grads[p] for name, p in model.params.items() if p in grads}
        adam_step(model.params, named, opt)
        total += loss.item() * len(idx)
    return total / len(order)


def train_representation(model: Forecaster, train: Sequence[WindowInstance], config: TrainConfig):
    """Fit on the full train split with shuffled mini-batches; returns ``(model, loss_curve)``."""
    if not train:
        raise ValueError("empty train split")
    xs, _ = stack(train)
    ys = _flat_targets(train)
    rng = make_rng(config.seed)
    opt = AdamState(learning_rate=config.lr, clip_max_norm=config.clip_max_norm)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        curve.append(train_steps(model, xs, ys, order, config.batch_size, opt, context=f"epoch {epoch}, "))
        log.debug("repr epoch %d loss %.6f", epoch, curve[-1])
    return model, curve


# ---------------------------------------------------------------------------
# extraction


@dataclass(frozen=True)
class EmbeddingTable:
    embeddings: np.ndarray  # (N, d)
    instance_index: np.ndarray  # (N,), row i <-> instance index i

    def __len__(self):
        return len(self.embeddings)


def extract_embeddings(model: Forecaster, train: Sequence[WindowInstance]) -> EmbeddingTable:
    if not train:
        raise ValueError("empty split")
    _, embs = predict(model, train)
    return EmbeddingTable(embs, np.array([w.index for w in train], dtype=np.int64))


def per_instance_losses(model: Forecaster, train: Sequence[WindowInstance]) -> np.ndarray:
    preds, _ = predict(model, train)
    ys = _flat_targets(train)
    return ad.per_instance_mse(preds, ys).values


def evaluate_mse(model: Forecaster, instances: Sequence[WindowInstance]) -> float:
    preds, _ = predict(model, instances)
    return float(ad.mse(preds, _flat_targets(instances)).values)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Forecaster, path) -> Path:
    """Write a versioned JSON manifest of ``{name, shape, values}`` entries."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "params": [{"name": k, "shape": list(p.shape), "values": p.values.reshape(-1).tolist()}
                   for k, p in model.params.items()],
    }
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path) -> Forecaster:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter manifest")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {doc.get('version')}")
    config = ModelConfig(**doc["config"])
    model = build_model(config, seed=0)
    model.set_state({e["name"]: np.array(e["values"], dtype=np.float64).reshape(e["shape"])
                     for e in doc["params"]})
    return model

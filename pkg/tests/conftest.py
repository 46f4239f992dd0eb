import contextlib
import time

import numpy as np
import pytest

from dualcurriculum import autodiff as ad


def rel_error(analytic, numeric, floor=1e-5):
    """Max abs difference over the larger magnitude; the floor avoids 0/0 on zero gradients."""
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(loss_fn, params, step=1e-5):
    """Worst relative error over every entry of every parameter."""
    with ad.Tape() as tape:
        loss = loss_fn()
    grads = ad.backward(loss, tape)

    def value():
        return loss_fn().item()

    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros(p.shape))
        numeric = ad.numerical_gradient(value, p, step)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config_doc(**sections):
    """A seconds-scale experiment: short series, small models, few trials and seeds."""
    doc = {
        "dataset": [{"name": "tiny", "lookback": 6, "horizon": 2, "seasonal_period": 12,
                     "synthetic": {"T": 160, "period": 12, "seed": 1,
                                   "anomalies": [{"start": 40, "end": 44, "magnitude": 4.0}]}}],
        "representation": {"epochs": 2, "hidden_dim": 8, "search_space": {"hidden_dim": [8, 12]}},
        "schedule": {"K": 3, "epochs_per_stage": 1, "batch_size": 16, "hidden_dim": 8},
        "search": {"trials": 2, "seed": 42},
        "evaluation": {"seeds": 2},
    }
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **value}
        else:
            doc[key] = value
    return doc


ACCEPTANCE_LINES: dict[int, str] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record one PASS/FAIL line for an acceptance criterion; failures re-raise."""
    start = time.perf_counter()
    detail: dict = {}
    try:
        yield detail
    except BaseException as exc:
        ACCEPTANCE_LINES[number] = f"criterion {number:2d} FAIL  {title}: {type(exc).__name__}: {exc}".splitlines()[0]
        raise
    secs = time.perf_counter() - start
    extra = "; ".join(f"{k}={v}" for k, v in detail.items())
    ACCEPTANCE_LINES[number] = f"criterion {number:2d} PASS  {title} ({secs:.1f}s{'; ' + extra if extra else ''})"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])

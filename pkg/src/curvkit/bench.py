"""Relative-cost measurement: matrix-vector product wall time per curvature
kind, reported in multiples of one gradient evaluation."""

from __future__ import annotations

import time
import tracemalloc
from typing import Optional, Sequence

import numpy as np

from .curvature import make_curvature
from .risk import Batching, Dataset, RiskSpec, risk_gradient

DEFAULT_KINDS = ("hessian", "ggn", "mc-fisher", "emp-fisher", "kfac", "kfac-inverse")


def _median_time(fn, repeats: int) -> float:
    samples = []
    fn()  # warm up
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def relative_cost(
    risk: RiskSpec,
    params,
    data: Dataset,
    kinds: Sequence[str] = DEFAULT_KINDS,
    repeats: int = 5,
    batching: Batching = None,
    n_samples: int = 1,
    seed: int = 0,
    damping: float = 1e-2,
    measure_memory: bool = False,
) -> list[dict]:
    """Median matvec time per curvature kind, normalized by the gradient.

    The gradient row is 1.0 by definition. KFAC rows time the application of
    precomputed factors (setup cost is reported separately in the row).
    Memory rows are best-effort peak allocations via tracemalloc.
    """
    if repeats < 3:
        raise ValueError("need at least 3 repeats")
    rng = np.random.default_rng(seed)
    probe = rng.standard_normal(risk.model.n_params)

    rows = []

    def run(name, fn, setup_seconds=0.0):
        median = _median_time(fn, repeats)
        peak = None
        if measure_memory:
            tracemalloc.start()
            fn()
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
        rows.append(
            {
                "name": name,
                "median_seconds": median,
                "setup_seconds": setup_seconds,
                "peak_bytes": peak,
            }
        )

    run("gradient", lambda: risk_gradient(risk, params, data, batching))

    from .curvature import DampingConfig, KFACInverseOperator, kfac_compute

    for kind in kinds:
        if kind == "kfac" or kind == "kfac-inverse":
            t0 = time.perf_counter()
            blocks = kfac_compute(risk, params, data, "ggn", batching)
            setup = time.perf_counter() - t0
            if kind == "kfac":
                op = make_curvature("kfac", risk, params, data, batching)
                run("kfac", lambda op=op: op.matvec(probe), setup)
            else:
                inv = KFACInverseOperator(blocks, DampingConfig(damping, "exact"))
                run("kfac-inverse", lambda inv=inv: inv.matvec(probe), setup)
        else:
            op = make_curvature(
                kind, risk, params, data, batching, n_samples=n_samples, seed=seed
            )
            run(kind, lambda op=op: op.matvec(probe))

    grad_time = rows[0]["median_seconds"]
    for row in rows:
        row["relative"] = row["median_seconds"] / grad_time if grad_time > 0 else np.inf
    rows[0]["relative"] = 1.0  # exact by definition
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'operator':<14} {'median [s]':>12} {'x gradient':>12} {'setup [s]':>12}"]
    for row in rows:
        lines.append(
            f"{row['name']:<14} {row['median_seconds']:>12.6f} "
            f"{row['relative']:>12.3f} {row['setup_seconds']:>12.6f}"
        )
    return "\n".join(lines)

"""Command-line surface.

Every subcommand reads JSON model/parameter/dataset files, writes its results
to ``--out`` (JSON for scalar reports, CSV for curves and matrices, plus an
SVG next to spectrum CSVs), and honors ``--seed``: re-running with identical
inputs and flags reproduces byte-identical outputs. Timing information goes
to stderr so it never perturbs result files. Failures exit nonzero after
printing a machine-readable ``{"error": ..., "context": ...}`` object.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import io
from .applications import (
    eigenspace_overlap,
    fisher_merge,
    influence_upweight,
    newton_step,
    prune_scores,
)
from .bench import format_table, relative_cost
from .curvature import (
    CURVATURE_KINDS,
    DampingConfig,
    KFACInverseOperator,
    kfac_compute,
    make_curvature,
)
from .linop import check_deterministic
from .rla import (
    ProbeSpec,
    frobenius_sq,
    hutchinson_diag,
    hutchinson_trace,
    hutchpp_trace,
    log_spectral_density,
    spectral_density,
    xdiag,
    xtrace,
)
from .solvers import eigsh_topk


class CliError(Exception):
    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


def _add_problem_args(p: argparse.ArgumentParser, curvature: bool = True):
    p.add_argument("--model", required=True, help="model JSON file")
    p.add_argument("--params", required=True, help="parameters JSON file")
    p.add_argument("--data", required=True, help="dataset JSON file")
    if curvature:
        p.add_argument("--curvature", default="ggn", choices=CURVATURE_KINDS)
        p.add_argument("--mc-samples", type=int, default=1)
        p.add_argument("--kfac-flavor", default="ggn")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output file path")


def _load_problem(args):
    risk = io.load_model(args.model)
    params = io.load_params(args.params, risk.model)
    data = io.load_dataset(args.data)
    risk.check_data(data)
    return risk, params, data


def _build_operator(args, risk, params, data):
    return make_curvature(
        args.curvature,
        risk,
        params,
        data,
        batching=args.batch_size,
        n_samples=args.mc_samples,
        seed=args.seed,
        kfac_flavor=args.kfac_flavor,
    )


def _base_report(args, **extra):
    report = {"seed": args.seed}
    report.update(extra)
    return report


def cmd_matvec(args):
    risk, params, data = _load_problem(args)
    op = _build_operator(args, risk, params, data)
    if args.vector:
        v = np.asarray(io.load_json(args.vector)["v"], dtype=np.float64)
    else:
        v = np.random.default_rng(args.seed).standard_normal(op.dim_in)
    out = op.matvec(v)
    io.save_json(args.out, _base_report(args, curvature=args.curvature, result=out))


def cmd_materialize(args):
    risk, params, data = _load_problem(args)
    op = _build_operator(args, risk, params, data)
    io.save_matrix_csv(args.out, op.to_dense())


def cmd_trace(args):
    risk, params, data = _load_problem(args)
    op = _build_operator(args, risk, params, data)
    if args.estimator == "hutchinson":
        est = hutchinson_trace(op, ProbeSpec(args.budget, args.seed, args.distribution))
    elif args.estimator == "hutchpp":
        est = hutchpp_trace(op, args.budget, args.seed)
    else:
        est = xtrace(op, args.budget, args.seed)
    io.save_json(
        args.out,
        _base_report(
            args, curvature=args.curvature, estimator=args.estimator,
            budget=args.budget, estimate=est,
        ),
    )


def cmd_diag(args):
    risk, params, data = _load_problem(args)
    op = _build_operator(args, risk, params, data)
    if args.estimator == "bekas":
        est = hutchinson_diag(op, ProbeSpec(args.budget, args.seed, args.distribution))
    else:
        est = xdiag(op, args.budget, args.seed)
    io.save_json(
        args.out,
        _base_report(
            args, curvature=args.curvature, estimator=args.estimator,
            budget=args.budget, estimate=est,
        ),
    )


def cmd_frobenius(args):
    risk, params, data = _load_problem(args)
    op = _build_operator(args, risk, params, data)
    est = frobenius_sq(op, ProbeSpec(args.budget, args.seed, args.distribution), args.variant)
    io.save_json(
        args.out,
        _base_report(
            args, curvature=args.curvature, variant=args.variant,
            budget=args.budget, estimate=est,
        ),
    )


def cmd_spectrum(args):
    risk, params, data = _load_problem(args)
    op = _build_operator(args, risk, params, data)
    kwargs = dict(
        n_runs=args.runs, steps=args.steps, width=args.sigma,
        n_points=args.points, seed=args.seed,
    )
    if args.log:
        sd = log_spectral_density(op, epsilon=args.eps, **kwargs)
    else:
        sd = spectral_density(op, **kwargs)
    io.save_csv(args.out, ["grid", "density"], [sd.grid, sd.density])
    svg = args.out + ".svg"
    io.save_svg_line_plot(
        svg, sd.grid, sd.density,
        title="log spectral density" if args.log else "spectral density",
        xlabel="log(|eigenvalue| + eps)" if args.log else "eigenvalue",
        ylabel="density",
    )


def cmd_eigs(args):
    risk, params, data = _load_problem(args)
    op = _build_operator(args, risk, params, data)
    vals, _ = eigsh_topk(op, args.k, tol=args.tol, seed=args.seed)
    io.save_json(
        args.out,
        _base_report(args, curvature=args.curvature, k=args.k, eigenvalues=vals),
    )


def cmd_newton(args):
    risk, params, data = _load_problem(args)
    res = newton_step(
        risk, params, data, curvature=args.curvature, damping=args.damping,
        batching=args.batch_size, mc_samples=args.mc_samples,
        kfac_flavor=args.kfac_flavor, seed=args.seed,
    )
    report = _base_report(
        args, curvature=args.curvature, damping=args.damping, direction=res.direction
    )
    if res.report is not None:
        report["iterations"] = res.report.iterations
        report["residual"] = res.report.residual_norm
    io.save_json(args.out, report)


def cmd_influence(args):
    risk, params, data = _load_problem(args)
    res = influence_upweight(
        risk, params, data, args.index, args.damping,
        curvature=args.curvature, batching=args.batch_size,
    )
    io.save_json(
        args.out,
        _base_report(
            args, curvature=args.curvature, index=args.index,
            damping=args.damping, influence=res.influence,
            iterations=res.report.iterations, residual=res.report.residual_norm,
        ),
    )


def cmd_merge(args):
    risk = io.load_model(args.model)
    if len(args.params) != len(args.data):
        raise CliError(
            "need one dataset per parameter file",
            n_params=len(args.params), n_data=len(args.data),
        )
    thetas, ops = [], []
    for ppath, dpath in zip(args.params, args.data):
        params = io.load_params(ppath, risk.model)
        data = io.load_dataset(dpath)
        risk.check_data(data)
        op = make_curvature(
            "ggn", risk, params, data, batching=args.batch_size, seed=args.seed
        )
        thetas.append(op.adapter.flatten(params))
        ops.append(op)
    merged = fisher_merge(thetas, ops, args.damping, mode=args.mode, seed=args.seed)
    io.save_json(
        args.out,
        _base_report(args, mode=args.mode, damping=args.damping, merged=merged),
    )


def cmd_prune(args):
    risk, params, data = _load_problem(args)
    indices = None
    if args.indices:
        indices = [int(i) for i in args.indices.split(",")]
    res = prune_scores(
        risk, params, data, mode=args.mode, damping=args.damping,
        indices=indices, diag_source=args.diag_source,
        diag_budget=args.budget, batching=args.batch_size, seed=args.seed,
    )
    io.save_json(
        args.out,
        _base_report(
            args, mode=args.mode, damping=args.damping,
            indices=res.indices, scores=res.scores, invalid=res.invalid,
        ),
    )


def cmd_overlap(args):
    risk, params, data = _load_problem(args)
    value = eigenspace_overlap(
        risk, params, data, args.k, eig_tol=args.tol,
        batching=args.batch_size, seed=args.seed,
    )
    io.save_json(args.out, _base_report(args, k=args.k, overlap=value))


def cmd_check_deterministic(args):
    risk, params, data = _load_problem(args)
    op = _build_operator(args, risk, params, data)
    exact = check_deterministic(op, probe_seed=args.seed, tol=0.0)
    report = {
        "passed": exact.passed,
        "first_mismatch": exact.first_mismatch,
        "max_differences": exact.max_differences,
    }
    if args.shuffle:
        shuffled = check_deterministic(
            op, probe_seed=args.seed, tol=args.shuffle_tol,
            reshuffle_batches=True, shuffle_seed=args.seed + 1,
        )
        report["shuffle_passed"] = shuffled.passed
        report["shuffle_first_mismatch"] = shuffled.first_mismatch
        report["shuffle_max_differences"] = shuffled.max_differences
        if exact.passed and not shuffled.passed:
            report["passed"] = False
            report["first_mismatch"] = shuffled.first_mismatch
    io.save_json(args.out, report)
    if not report["passed"]:
        print(
            io.dumps_json(
                {"error": "operator is not deterministic", "context": report}
            )
        )
        return 1
    return 0


def cmd_bench(args):
    risk, params, data = _load_problem(args)
    kinds = args.kinds.split(",") if args.kinds else list(
        ("hessian", "ggn", "emp-fisher", "kfac", "kfac-inverse")
    )
    rows = relative_cost(
        risk, params, data, kinds=kinds, repeats=args.repeats,
        batching=args.batch_size, seed=args.seed, measure_memory=args.memory,
    )
    print(format_table(rows), file=sys.stderr)
    io.save_json(
        args.out,
        {
            "repeats": args.repeats,
            "rows": [
                {"name": r["name"], "relative": r["relative"]} for r in rows
            ],
        },
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="curvkit",
        description="matrix-free curvature operators, solvers, and estimators",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("matvec", help="apply a curvature operator to a vector")
    _add_problem_args(p)
    p.add_argument("--vector", help='JSON file {"v": [...]}; default: seeded probe')
    p.set_defaults(fn=cmd_matvec)

    p = sub.add_parser("materialize", help="write the dense matrix as CSV")
    _add_problem_args(p)
    p.set_defaults(fn=cmd_materialize)

    p = sub.add_parser("trace", help="randomized trace estimate")
    _add_problem_args(p)
    p.add_argument("--estimator", default="hutchinson",
                   choices=("hutchinson", "hutchpp", "xtrace"))
    p.add_argument("--budget", type=int, default=60)
    p.add_argument("--distribution", default="rademacher",
                   choices=("rademacher", "standard-normal"))
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("diag", help="randomized diagonal estimate")
    _add_problem_args(p)
    p.add_argument("--estimator", default="bekas", choices=("bekas", "xdiag"))
    p.add_argument("--budget", type=int, default=60)
    p.add_argument("--distribution", default="rademacher",
                   choices=("rademacher", "standard-normal"))
    p.set_defaults(fn=cmd_diag)

    p = sub.add_parser("frobenius", help="squared Frobenius norm estimate")
    _add_problem_args(p)
    p.add_argument("--variant", default="one-pass", choices=("one-pass", "two-pass"))
    p.add_argument("--budget", type=int, default=60)
    p.add_argument("--distribution", default="rademacher",
                   choices=("rademacher", "standard-normal"))
    p.set_defaults(fn=cmd_frobenius)

    p = sub.add_parser("spectrum", help="Lanczos spectral density (CSV + SVG)")
    _add_problem_args(p)
    p.add_argument("--log", action="store_true", help="log-spectral density")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--points", type=int, default=1024)
    p.set_defaults(fn=cmd_spectrum)

    p = sub.add_parser("eigs", help="top-k eigenvalues")
    _add_problem_args(p)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(fn=cmd_eigs)

    p = sub.add_parser("newton", help="damped Newton / natural-gradient direction")
    _add_problem_args(p)
    p.add_argument("--damping", type=float, default=1e-3)
    p.set_defaults(fn=cmd_newton)

    p = sub.add_parser("influence", help="influence of up-weighting one datum")
    _add_problem_args(p, curvature=False)
    p.add_argument("--curvature", default="hessian", choices=("hessian", "ggn"))
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--damping", type=float, default=1e-3)
    p.set_defaults(fn=cmd_influence)

    p = sub.add_parser("merge", help="Fisher-weighted model merging")
    p.add_argument("--model", required=True)
    p.add_argument("--params", action="append", required=True,
                   help="repeat per task")
    p.add_argument("--data", action="append", required=True, help="repeat per task")
    p.add_argument("--mode", default="full", choices=("full", "diagonal"))
    p.add_argument("--damping", type=float, default=1e-6)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("prune", help="loss-increase saliency scores")
    _add_problem_args(p, curvature=False)
    p.add_argument("--mode", default="diagonal", choices=("diagonal", "full"))
    p.add_argument("--damping", type=float, default=1e-3)
    p.add_argument("--indices", help="comma-separated parameter indices")
    p.add_argument("--diag-source", default="exact", choices=("exact", "estimator"))
    p.add_argument("--budget", type=int, default=64)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("overlap", help="gradient overlap with the top eigenspace")
    _add_problem_args(p, curvature=False)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(fn=cmd_overlap)

    p = sub.add_parser("check-deterministic", help="determinism safeguard")
    _add_problem_args(p)
    p.add_argument("--shuffle", action="store_true", default=True,
                   help="also probe under a reshuffled batch partition")
    p.add_argument("--no-shuffle", dest="shuffle", action="store_false")
    p.add_argument("--shuffle-tol", type=float, default=1e-9,
                   help="tolerance for the reshuffled comparison")
    p.set_defaults(fn=cmd_check_deterministic)

    p = sub.add_parser("bench", help="relative matvec cost (gradient = 1.0)")
    _add_problem_args(p, curvature=False)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--kinds", help="comma-separated curvature kinds")
    p.add_argument("--memory", action="store_true")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        status = args.fn(args)
    except CliError as exc:
        print(io.dumps_json({"error": str(exc), "context": exc.context}))
        return 1
    except (io.FileFormatError, FileNotFoundError) as exc:
        print(io.dumps_json({"error": str(exc), "context": {"kind": type(exc).__name__}}))
        return 1
    except (ValueError, IndexError, RuntimeError) as exc:
        print(io.dumps_json({"error": str(exc), "context": {"kind": type(exc).__name__}}))
        return 1
    print(f"[curvkit] {args.command} finished in {time.perf_counter() - t0:.3f}s",
          file=sys.stderr)
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())

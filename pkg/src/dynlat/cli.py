"""Command line entry point.

Subcommands: fit, simulate, predict, gof, cv, convert-step, study.
Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import DataError, load_long_csv, regrid, write_long_csv
from .modelspec import ModelSpec, SpecError, pack, unpack
from .optimizer import FitConfig, FitError, fit
from .stepconv import (ConversionError, coarse_to_fine, fine_to_coarse,
                       influence_from_continuous)

USAGE_ERROR = 1
NUMERICAL_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _build_parser() -> _Parser:
    parser = _Parser(prog="dynlat",
                     description="Dynamic latent-process network models for "
                                 "multivariate longitudinal markers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes for replicate-level parallelism")
        if out:
            p.add_argument("--out-dir", default=".", help="report directory")

    p = sub.add_parser("fit", help="estimate a model from long-format data")
    p.add_argument("data", help="long-format CSV")
    p.add_argument("spec", help="model spec JSON")
    p.add_argument("--delta", type=float, default=None,
                   help="override the spec's discretization step")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--no-staged-init", action="store_true",
                   help="start from the plain data-driven values")
    common(p)

    p = sub.add_parser("simulate", help="generate a scenario dataset")
    p.add_argument("--scenario", choices=["s1", "s2"], default="s2")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--p-visit", type=float, default=0.0)
    p.add_argument("--p-marker", type=float, default=0.0)
    common(p)

    p = sub.add_parser("predict", help="marginal and subject-specific predictions")
    p.add_argument("data")
    p.add_argument("spec")
    p.add_argument("params", help="fit_report.csv from a previous fit")
    p.add_argument("--natural", action="store_true")
    p.add_argument("--ndraws", type=int, default=1000)
    common(p)

    p = sub.add_parser("gof", help="binned observed-vs-predicted table and figure")
    p.add_argument("data")
    p.add_argument("spec")
    p.add_argument("params")
    p.add_argument("--bins", type=float, nargs="+", default=None,
                   help="bin edges (default: the spec's grid)")
    common(p)

    p = sub.add_parser("cv", help="k-fold cross-validated predictions")
    p.add_argument("data")
    p.add_argument("spec")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--max-iters", type=int, default=500)
    common(p)

    p = sub.add_parser("convert-step", help="convert an influence matrix between steps")
    p.add_argument("matrix", help="square matrix CSV")
    p.add_argument("output", help="output matrix CSV")
    p.add_argument("--direction",
                   choices=["fine-to-coarse", "coarse-to-fine", "from-continuous"],
                   required=True)
    p.add_argument("--delta-star", type=float, required=True)
    p.add_argument("--rho", type=int, default=1)

    p = sub.add_parser("study", help="run a simulation study")
    p.add_argument("--study", choices=["coverage", "type1"], required=True)
    p.add_argument("--scenario", choices=["s1", "s2"], default="s2")
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--p-visit", type=float, default=0.0)
    p.add_argument("--p-marker", type=float, default=0.0)
    p.add_argument("--delta", type=float, default=0.5,
                   help="fit step for the type-I study")
    p.add_argument("--max-iters", type=int, default=200)
    common(p)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        return _dispatch(args)
    except (SpecError, DataError, FileNotFoundError) as exc:
        print(f"dynlat: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (FitError, ConversionError, np.linalg.LinAlgError) as exc:
        print(f"dynlat: numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR


def _dispatch(args) -> int:
    from . import report as rep

    out = Path(getattr(args, "out_dir", "."))

    if args.command == "fit":
        spec = ModelSpec.from_json(args.spec)
        if args.delta is not None:
            spec = spec.with_delta(args.delta)
        data = regrid(load_long_csv(args.data, spec), spec)
        cfg = FitConfig(max_iters=args.max_iters)
        res = fit(spec, data, config=cfg, staged=not args.no_staged_init)
        table = rep.write_fit_report(out, res, spec, seed=args.seed)
        print(f"fit {'converged' if res.converged else 'did not converge'} "
              f"after {res.iterations} iterations; loglik {res.loglik:.3f}; "
              f"report at {table}")
        return 0 if res.converged else NUMERICAL_ERROR

    if args.command == "simulate":
        from .simstudies import apply_missingness, generate, _scenario_pair

        spec, theta = _scenario_pair(args.scenario)
        rng = np.random.default_rng(args.seed)
        data = generate(spec, theta, args.n, rng)
        if args.p_visit or args.p_marker:
            data = apply_missingness(data, args.p_visit, args.p_marker, rng)
        out.mkdir(parents=True, exist_ok=True)
        write_long_csv(data, out / "data.csv")
        spec.to_json(out / "spec.json")
        with open(out / "true_params.json", "w") as fh:
            json.dump({n: float(v) for n, v in
                       zip(spec.parameter_names(), pack(theta, spec))},
                      fh, indent=2)
            fh.write("\n")
        print(f"wrote {out / 'data.csv'} ({data.n_observations()} observations, "
              f"{len(data)} subjects)")
        return 0

    if args.command == "predict":
        from .prediction import predict_dataset

        spec = ModelSpec.from_json(args.spec)
        data = regrid(load_long_csv(args.data, spec), spec)
        flat = rep.read_params_csv(args.params, spec)
        preds = predict_dataset(unpack(flat, spec), data, spec,
                                natural=args.natural, ndraws=args.ndraws,
                                seed=args.seed)
        table = rep.write_predictions(out, preds)
        print(f"wrote {table} ({len(preds.rows)} rows)")
        return 0

    if args.command == "gof":
        from .prediction import gof_binned, predict_dataset

        spec = ModelSpec.from_json(args.spec)
        data = regrid(load_long_csv(args.data, spec), spec)
        flat = rep.read_params_csv(args.params, spec)
        preds = predict_dataset(unpack(flat, spec), data, spec)
        edges = args.bins if args.bins else list(
            np.arange(-0.5 * spec.delta,
                      (spec.grid_len + 1) * spec.delta, spec.delta))
        bins = gof_binned(preds, edges)
        table = rep.write_gof_report(out, bins)
        print(f"wrote {table} ({len(bins)} bins)")
        return 0

    if args.command == "cv":
        from .prediction import kfold_cv

        spec = ModelSpec.from_json(args.spec)
        data = regrid(load_long_csv(args.data, spec), spec)
        cfg = FitConfig(max_iters=args.max_iters)
        preds = kfold_cv(spec, data, k=args.k, seed=args.seed, config=cfg)
        table = rep.write_predictions(out, preds, name="cv_predictions.csv")
        msg = f"wrote {table} ({len(preds.rows)} rows)"
        if preds.failed_folds:
            msg += f"; folds failed: {preds.failed_folds}"
        print(msg)
        return 0 if not preds.failed_folds else NUMERICAL_ERROR

    if args.command == "convert-step":
        A = rep.read_matrix_csv(args.matrix)
        if args.direction == "fine-to-coarse":
            B = fine_to_coarse(A, args.delta_star, args.rho)
        elif args.direction == "coarse-to-fine":
            B = coarse_to_fine(A, args.delta_star, args.rho)
        else:
            B = influence_from_continuous(A, args.delta_star)
        rep.write_matrix_csv(args.output, B)
        print(f"wrote {args.output}")
        return 0

    if args.command == "study":
        from .simstudies import ScenarioConfig, run_coverage_study, run_type1_study

        config = ScenarioConfig(scenario=args.scenario, n_subjects=args.n,
                                replicates=args.replicates, seed=args.seed,
                                p_visit=args.p_visit, p_marker=args.p_marker)
        if args.study == "coverage":
            result = run_coverage_study(config, max_iters=args.max_iters,
                                        workers=args.threads)
            name = "coverage_study"
        else:
            result = run_type1_study(config, delta_fit=args.delta,
                                     max_iters=args.max_iters,
                                     workers=args.threads)
            name = "type1_study"
        table = rep.write_study_report(out, result, name=name)
        print(f"wrote {table} ({result.n_converged}/{result.n_replicates} "
              f"replicates converged)")
        return 0

    raise SpecError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    raise SystemExit(main())

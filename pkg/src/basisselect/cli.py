"""Command-line surface: fit, simulate, bench, bands.

Every command is deterministic given --seed; output files carry stable
headers and 17-significant-digit decimals so estimates round-trip
bitwise. Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric
failure.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .basis import BasisSystem, make_bspline_basis, make_fourier_basis
from .data import ingest_csv
from .errors import (
    ConfigurationError,
    DataError,
    DomainError,
    NumericError,
    ShapeError,
)
from .estimators import credible_band
from .gibbs import ChainSpec, benchmark_vb_vs_gibbs, chains_to_csv, write_comparison_csv, write_comparison_json
from .simulate import make_scenario, run_replicates, write_manifest, write_summary_csv
from .vem import InitSpec, PriorConfig, VariationalState, fit

USAGE_EXIT = 2
DATA_EXIT = 3
NUMERIC_EXIT = 4


def _fmt(x):
    return format(float(x), ".17g")


def save_state(path, state, basis, data, independent):
    """Persist a fitted state plus enough context to rebuild bands later."""
    blob = {
        "version": __version__,
        "independent": independent,
        "basis": {
            "kind": basis.kind,
            "K": basis.K,
            "domain": list(basis.domain),
            "degree": basis.degree,
            "knots": basis.knots.tolist() if basis.knots is not None else None,
            "period": basis.period,
        },
        "curves": [
            {"curve_id": c.curve_id, "t": c.t.tolist(), "y": c.y.tolist()} for c in data.curves
        ],
        "state": {
            "p": state.p.tolist(),
            "a1": state.a1.tolist(),
            "a2": state.a2.tolist(),
            "beta_mean": state.beta_mean.tolist(),
            "beta_cov": state.beta_cov.tolist(),
            "sigma2_shape": state.sigma2_shape,
            "sigma2_scale": state.sigma2_scale,
            "tau2_shape": state.tau2_shape,
            "tau2_scale": state.tau2_scale,
            "w": state.w,
            "elbo_trace": state.elbo_trace,
        },
    }
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_state(path):
    """Inverse of save_state; returns (state, basis, curve dicts, independent)."""
    with open(path) as fh:
        blob = json.load(fh)
    b = blob["basis"]
    basis = BasisSystem(
        kind=b["kind"],
        K=b["K"],
        domain=tuple(b["domain"]),
        degree=b["degree"],
        knots=np.asarray(b["knots"]) if b["knots"] is not None else None,
        period=b["period"],
    )
    s = blob["state"]
    state = VariationalState(
        p=np.asarray(s["p"]),
        a1=np.asarray(s["a1"]),
        a2=np.asarray(s["a2"]),
        beta_mean=np.asarray(s["beta_mean"]),
        beta_cov=np.asarray(s["beta_cov"]),
        sigma2_shape=s["sigma2_shape"],
        sigma2_scale=s["sigma2_scale"],
        tau2_shape=s["tau2_shape"],
        tau2_scale=s["tau2_scale"],
        w=s["w"],
        elbo_trace=list(s["elbo_trace"]),
    )
    return state, basis, blob["curves"], blob["independent"]


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="basisselect",
        description="Sparse basis selection for functional data with correlated errors.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit curves from a curve_id,t,y CSV")
    p_fit.add_argument("--data", required=True, help="input CSV path")
    p_fit.add_argument("--basis", choices=["bspline", "fourier"], default="bspline")
    p_fit.add_argument("--K", type=int, required=True, help="number of basis functions")
    p_fit.add_argument("--degree", type=int, default=3, help="B-spline degree")
    p_fit.add_argument("--period", type=float, default=None, help="Fourier period (default: data range)")
    p_fit.add_argument("--independent", action="store_true", help="assume uncorrelated errors")
    p_fit.add_argument("--sigma2-guess", type=float, default=None)
    p_fit.add_argument("--w-init", type=float, default=None)
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--out", required=True, help="output directory")
    p_fit.add_argument("--tol", type=float, default=0.01, help="ELBO convergence threshold")
    p_fit.add_argument("--max-iter", type=int, default=100)
    p_fit.add_argument("--mu", type=float, default=0.5, help="inclusion-prior mean")
    p_fit.add_argument("--delta1", type=float, default=0.0)
    p_fit.add_argument("--delta2", type=float, default=0.0)
    p_fit.add_argument("--lambda1", type=float, default=0.0)
    p_fit.add_argument("--lambda2", type=float, default=0.0)
    p_fit.add_argument("--lambda2-init", type=float, default=1.0)
    p_fit.add_argument("--band-draws", type=int, default=200)
    p_fit.add_argument("--level", type=float, default=0.95)
    p_fit.add_argument("--no-jitter", action="store_true",
                       help="fail on duplicate time points instead of jittering")

    p_sim = sub.add_parser("simulate", help="run a replicate study on a synthetic scenario")
    p_sim.add_argument("--scenario", choices=["1", "2", "3"], required=True)
    p_sim.add_argument("--sigma", type=float, default=None)
    p_sim.add_argument("--w", type=float, default=None, help="true correlation decay")
    p_sim.add_argument("--replicates", type=int, required=True)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--independent-noise", action="store_true",
                       help="generate uncorrelated noise")
    p_sim.add_argument("--independent-fit", action="store_true",
                       help="fit with the identity correlation")

    p_bench = sub.add_parser("bench", help="VB vs Gibbs comparison (independence case)")
    p_bench.add_argument("--scenario", choices=["1", "2"], default="1")
    p_bench.add_argument("--sigma", type=float, default=None)
    p_bench.add_argument("--replicates", type=int, required=True)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", required=True)
    p_bench.add_argument("--iterations", type=int, default=10000, help="Gibbs iterations per chain")
    p_bench.add_argument("--dump-chains", action="store_true",
                         help="also write retained samples for the first dataset")

    p_bands = sub.add_parser("bands", help="credible bands from a saved state")
    p_bands.add_argument("--state", required=True, help="state.json written by fit")
    p_bands.add_argument("--draws", type=int, default=200)
    p_bands.add_argument("--level", type=float, default=0.95)
    p_bands.add_argument("--seed", type=int, default=0)
    p_bands.add_argument("--out", default=None, help="output CSV (default: stdout)")
    return parser


def _cmd_fit(args):
    data_path = Path(args.data)
    if not data_path.exists():
        print(f"basisselect: data file not found: {data_path}", file=sys.stderr)
        return USAGE_EXIT
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    jitter_seed = None if args.no_jitter else args.seed
    data = ingest_csv(data_path, jitter_seed=jitter_seed)
    lo, hi = data.domain()
    if args.basis == "bspline":
        basis = make_bspline_basis(args.K, args.degree, (lo, hi))
    else:
        basis = make_fourier_basis(args.K, args.period if args.period is not None else hi - lo)

    priors = PriorConfig.default(
        data.m, args.K, mu=args.mu,
        lambda1=args.lambda1, lambda2=args.lambda2,
        delta1=args.delta1, delta2=args.delta2,
        elbo_tol=args.tol, max_iter=args.max_iter,
        w_init=args.w_init if args.w_init is not None else 1.0,
    )
    init = InitSpec(sigma2_guess=args.sigma2_guess, lambda2_scale=args.lambda2_init, w=args.w_init)
    state, report = fit(
        data, basis, priors, init,
        independent=args.independent, seed=args.seed,
        band_draws=args.band_draws, band_level=args.level,
    )

    report_dict = report.to_dict()
    report_dict.update({
        "version": __version__,
        "seed": args.seed,
        "config": {
            "basis": args.basis, "K": args.K, "degree": args.degree, "period": args.period,
            "independent": args.independent, "tol": args.tol, "max_iter": args.max_iter,
            "mu": args.mu, "delta1": args.delta1, "delta2": args.delta2,
            "lambda1": args.lambda1, "lambda2": args.lambda2,
            "lambda2_init": args.lambda2_init, "w_init": args.w_init,
            "sigma2_guess": args.sigma2_guess, "band_draws": args.band_draws, "level": args.level,
        },
    })
    with open(out_dir / "fit_report.json", "w") as fh:
        json.dump(report_dict, fh, indent=2)

    with open(out_dir / "coefficients.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["curve_id", "coefficient", "xi_hat", "p_star", "selected"])
        for i, c in enumerate(data.curves):
            for k in range(args.K):
                writer.writerow([
                    c.curve_id, k + 1, _fmt(report.xi_hat[i, k]), _fmt(state.p[i, k]),
                    int(state.p[i, k] >= 0.5),
                ])

    def _write_curve(path, i):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "fitted", "lower", "upper"])
            c = data.curves[i]
            for j in range(c.n):
                writer.writerow([
                    _fmt(c.t[j]), _fmt(report.mean_curves[i][j]),
                    _fmt(report.band_lower[i][j]), _fmt(report.band_upper[i][j]),
                ])

    if data.m == 1:
        _write_curve(out_dir / "curve.csv", 0)
    else:
        for i, c in enumerate(data.curves):
            _write_curve(out_dir / f"curve_{c.curve_id}.csv", i)

    save_state(out_dir / "state.json", state, basis, data, args.independent)
    print(f"fit: {data.m} curve(s), {report.iterations} iterations, "
          f"sigma2_hat={report.sigma2_hat:.6g}, w_hat={report.w_hat}")
    return 0


def _cmd_simulate(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = make_scenario(
        args.scenario, sigma=args.sigma, w=args.w, seed=args.seed,
        independent_noise=args.independent_noise,
    )
    summary = run_replicates(spec, args.replicates, independent=args.independent_fit)
    write_summary_csv(summary, out_dir / "summary.csv")
    write_manifest(summary, out_dir / "manifest.json",
                   extra={"independent_fit": args.independent_fit})
    print(f"simulate: scenario {spec.id}, {summary.replicates} replicates "
          f"({summary.failed} failed), coef means written to {out_dir / 'summary.csv'}")
    return 0


def _cmd_bench(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = make_scenario(args.scenario, sigma=args.sigma, seed=args.seed, independent_noise=True)
    chain_spec = ChainSpec(iterations=args.iterations)
    rows, first = benchmark_vb_vs_gibbs(
        spec, args.replicates, chain_spec=chain_spec, keep_first_chains=args.dump_chains
    )
    write_comparison_csv(rows, out_dir / "comparison.csv")
    write_comparison_json(rows, out_dir / "comparison.json")
    if args.dump_chains and first is not None:
        chains_to_csv(first, out_dir / "chains_rep000.csv")
    ratios = [row["speed_ratio"] for row in rows]
    print(f"bench: {len(rows)} dataset(s), median speed ratio {np.median(ratios):.1f}x")
    return 0


def _cmd_bands(args):
    state_path = Path(args.state)
    if not state_path.exists():
        print(f"basisselect: state file not found: {state_path}", file=sys.stderr)
        return USAGE_EXIT
    state, basis, curves, _ = load_state(state_path)
    points = [np.asarray(c["t"], dtype=float) for c in curves]
    lowers, uppers = credible_band(
        state, basis, points, level=args.level, draws=args.draws, seed=args.seed
    )
    rows = [["curve_id", "t", "lower", "upper"]]
    for i, c in enumerate(curves):
        for j, t in enumerate(points[i]):
            rows.append([c["curve_id"], _fmt(t), _fmt(lowers[i][j]), _fmt(uppers[i][j])])
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    else:
        csv.writer(sys.stdout).writerows(rows)
    return 0


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "fit": _cmd_fit,
        "simulate": _cmd_simulate,
        "bench": _cmd_bench,
        "bands": _cmd_bands,
    }
    try:
        return handlers[args.command](args)
    except FileNotFoundError as exc:
        print(f"basisselect: missing file: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except ConfigurationError as exc:
        print(f"basisselect: configuration error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (DataError, DomainError) as exc:
        print(f"basisselect: data error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except (NumericError, ShapeError) as exc:
        print(f"basisselect: numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT


if __name__ == "__main__":
    sys.exit(main())

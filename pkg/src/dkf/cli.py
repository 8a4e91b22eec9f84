"""Command-line interface.

Subcommands: run, sweep-gamma, sweep-eta, steady-state, qws-bench. All take a
JSON config file; sweep variants override the config's gamma/eta lists. Exit
code 0 on success; on failure a machine-readable JSON error is printed to
stderr and the exit code is nonzero. DKF_THREADS caps BLAS parallelism.
"""
from __future__ import annotations

import argparse
import json
import os
import sys


def _cap_threads() -> None:
    # the package __init__ applies this before numpy loads when the CLI is the
    # entry point; kept here as well for direct module invocation
    cap = os.environ.get("DKF_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dkf",
        description="Distributed Kalman filter simulation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--trials", type=int, default=None,
                       help="override config trial count")
        p.add_argument("--out", default=None, help="override output directory")

    p_run = sub.add_parser("run", help="run every (algorithm, gamma, eta) cell")
    add_common(p_run)

    p_sg = sub.add_parser("sweep-gamma", help="run with a gamma sweep")
    add_common(p_sg)
    p_sg.add_argument("--gammas", default=None,
                      help="comma-separated gamma list, e.g. 1,2,4,8")

    p_se = sub.add_parser("sweep-eta", help="run with an eta (weight-blend) sweep")
    add_common(p_se)
    p_se.add_argument("--etas", default=None,
                      help="comma-separated eta list, e.g. 0,0.3,0.5,0.9")

    p_ss = sub.add_parser("steady-state",
                          help="emit steady-state theory (no Monte Carlo)")
    p_ss.add_argument("--config", required=True)
    p_ss.add_argument("--out", default=None)

    p_qb = sub.add_parser("qws-bench",
                          help="benchmark the QWS estimators against the oracle")
    p_qb.add_argument("--config", required=True)
    p_qb.add_argument("--out", default=None)
    p_qb.add_argument("--max-k", type=int, default=60)
    p_qb.add_argument("--replicas", type=int, default=1000)
    return parser


def _load(args):
    from .harness import load_config

    cfg = load_config(args.config)
    if getattr(args, "trials", None):
        cfg.trials = args.trials
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _cmd_run(args) -> int:
    from .harness import emit_report, run_experiment

    cfg = _load(args)
    if getattr(args, "gammas", None):
        cfg.gammas = [int(g) for g in args.gammas.split(",")]
    if getattr(args, "etas", None):
        cfg.etas = [float(e) for e in args.etas.split(",")]
    cfg.validate()
    report = run_experiment(cfg)
    paths = emit_report(report, cfg.out_dir)
    failed = [c for c in report.cells if c.failed]
    for c in failed:
        print(f"cell failed: {c.algorithm} gamma={c.gamma} eta={c.eta}: {c.error}",
              file=sys.stderr)
    for p in paths:
        print(p)
    return 1 if failed else 0


def _cmd_steady_state(args) -> int:
    from pathlib import Path

    from .harness import load_config, steady_state_tables

    cfg = load_config(args.config)
    tables = steady_state_tables(cfg)
    text = json.dumps(tables, indent=1)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{cfg.name}-steady-state.json"
        path.write_text(text)
        print(path)
    else:
        print(text)
    return 0


def _cmd_qws_bench(args) -> int:
    from pathlib import Path

    from .harness import load_config, qws_benchmark

    cfg = load_config(args.config)
    report = qws_benchmark(cfg, max_k=args.max_k, replicas=args.replicas)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{cfg.name}-qws.csv"
    with open(csv_path, "w") as fh:
        fh.write("step,node,err_fro,err_pinv_fro,bound_exact,bound_spectral\n")
        n_nodes = report.direct_err.shape[1]
        for idx, k in enumerate(report.ks):
            spectral = report.bound_spectral[idx]
            for node in range(n_nodes):
                fh.write(f"{k},{node + 1},{report.direct_err[idx, node]!r},"
                         f"{report.direct_err_pinv[idx, node]!r},"
                         f"{report.bound_exact[idx, node]!r},"
                         f"{'' if spectral is None else repr(spectral)}\n")
    summary = {
        "gamma": report.gamma,
        "direct_bound_ok": report.direct_bound_ok,
        "stoch_k": report.stoch_k,
        "stoch_mse_empirical": report.stoch_mse_empirical,
        "stoch_mse_predicted": report.stoch_mse_predicted,
        "stoch_agrees": report.stoch_agrees,
    }
    json_path = out / f"{cfg.name}-qws.json"
    json_path.write_text(json.dumps(summary, indent=1))
    print(csv_path)
    print(json_path)
    return 0 if (report.direct_bound_ok and report.stoch_agrees) else 1


def main(argv=None) -> int:
    _cap_threads()
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "sweep-gamma": _cmd_run,
        "sweep-eta": _cmd_run,
        "steady-state": _cmd_steady_state,
        "qws-bench": _cmd_qws_bench,
    }
    try:
        return handlers[args.command](args)
    except Exception as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``swimcal {gen-ref,run,summarize,plot,serve-stub}``.

Exit codes: 0 success, 2 config error, 3 aborted runs present, 4 proposer hard failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from swimcal import params as P

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTED = 3
EXIT_PROPOSER = 4

log = logging.getLogger("swimcal")


def _sim_args(p):
    p.add_argument("--duration", type=float, default=5.0, help="trial length in seconds (default 5)")
    p.add_argument("--warmup", type=float, default=1.0, help="discarded transient in seconds (default 1)")
    p.add_argument("--dt", type=float, default=0.001, help="integration step in seconds (default 0.001)")
    p.add_argument("--sample-rate", type=float, default=60.0, help="marker sampling rate in Hz (default 60)")


def build_parser():
    parser = argparse.ArgumentParser(prog="swimcal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-ref", help="simulate a synthetic reference set from a hidden parameter vector")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0, help="seed of the hidden parameter draw")
    g.add_argument("--noise", type=float, default=0.0, help="Gaussian marker noise sigma in meters")
    g.add_argument("--theta", help="comma-separated 16-vector to use instead of a random draw")
    _sim_args(g)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config", help="JSON experiment config")
    r.add_argument("--seed", type=int, action="append", help="override seeds (repeatable)")
    r.add_argument("--budget", type=int, help="override the evaluation budget")
    r.add_argument("--out", help="override the output directory")
    r.add_argument("--workers", type=int, help="parallel (method, seed) runs")

    s = sub.add_parser("summarize", help="recompute summary, velocity sweep and figures from records")
    s.add_argument("dir", help="experiment output directory")
    s.add_argument("--no-figures", action="store_true")

    pl = sub.add_parser("plot", help="write the convergence SVG for an experiment directory")
    pl.add_argument("dir", help="experiment output directory (or a records directory)")
    pl.add_argument("--out", help="SVG path (default <dir>/convergence.svg)")

    st = sub.add_parser("serve-stub", help="serve a fixed proposal over the proposer protocol")
    st.add_argument("--host", default="127.0.0.1")
    st.add_argument("--port", type=int, default=8765)
    st.add_argument("--theta", help="comma-separated reply vector (default: bounds midpoint)")
    st.add_argument("--rationale", default="stub reply")
    st.add_argument("--delay", type=float, default=0.0, help="seconds to wait before replying")
    return parser


def _parse_theta(text):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise SystemExit(f"cannot parse vector: {text!r}") from None


def cmd_gen_ref(args):
    from swimcal.objective import FREQUENCIES, draw_theta_star, save_reference, synthetic_reference
    from swimcal.swimsim import SimConfig

    try:
        sim = SimConfig(args.duration, args.warmup, args.dt, args.sample_rate)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    bounds = P.swimmer_bounds()
    if args.theta:
        theta = _parse_theta(args.theta)
        if theta.shape != (16,) or not bounds.contains(theta):
            print("config error: --theta must be a feasible 16-vector", file=sys.stderr)
            return EXIT_CONFIG
        draws = 0
    else:
        theta, draws = draw_theta_star(args.seed, bounds, sim)
    ref = synthetic_reference(theta, sim, FREQUENCIES, args.noise, args.seed,
                              {"theta_star_seed": args.seed, "rejection_draws": draws, "sim": sim.to_dict()})
    save_reference(ref, args.out)
    print(json.dumps({"out": str(args.out), "theta_star": theta.tolist(),
                      "velocities_m_s": ref.velocities.tolist()}, indent=1))
    return EXIT_OK


def _exit_status(records):
    if any(r.aborted and r.abort_reason == "proposer_failure" for r in records):
        return EXIT_PROPOSER
    if any(r.aborted for r in records):
        return EXIT_ABORTED
    return EXIT_OK


def _print_summary(summary):
    print(f"{'method':<14}{'best (mm)':>20}{'worst (mm)':>12}{'AUC (mm)':>20}{'vel MAE':>10}")
    for m, e in summary["methods"].items():
        if e["best_mean"] is None:
            print(f"{m:<14}{'(no finished runs)':>20}")
            continue
        vm = e.get("velocity_mae_mm_s")
        print(f"{m:<14}{1e3 * e['best_mean']:>11.2f} ± {1e3 * e['best_std']:<6.2f}{1e3 * e['worst']:>12.2f}"
              f"{1e3 * e['auc_mean']:>11.2f} ± {1e3 * e['auc_std']:<6.2f}"
              f"{'' if vm is None else f'{vm:10.2f}'}")


def cmd_run(args):
    from swimcal.harness import ConfigError, ExperimentConfig, run_experiment

    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed:
        raw["seeds"] = args.seed
    if args.budget is not None:
        raw["budget"] = args.budget
    if args.out:
        raw["output_dir"] = args.out
    if args.workers:
        raw["workers"] = args.workers
    try:
        exp = ExperimentConfig.from_dict(raw)
        summary, records = run_experiment(exp)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _print_summary(summary)
    print(f"outputs in {exp.output_dir}")
    return _exit_status(records)


def cmd_summarize(args):
    from swimcal.harness import ExperimentConfig, load_records, write_summary
    from swimcal.objective import load_reference

    out = Path(args.dir)
    try:
        exp = ExperimentConfig.from_dict(json.loads((out / "config.json").read_text()))
        ref = load_reference(out / "reference", exp.sim_config())
        records = load_records(out)
    except (OSError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summary = write_summary(out, records, ref, exp.sim_config(), exp.seeds, figures=not args.no_figures)
    _print_summary(summary)
    return _exit_status(records)


def cmd_plot(args):
    from swimcal.harness import load_records
    from swimcal.plotting import convergence_svg

    try:
        records = load_records(args.dir)
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot read run records under {args.dir}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not records:
        print(f"no run records under {args.dir}", file=sys.stderr)
        return EXIT_CONFIG
    path = convergence_svg(records, args.out or Path(args.dir) / "convergence.svg")
    print(path)
    return EXIT_OK


def cmd_serve_stub(args):
    from swimcal.proposer import StubServer

    theta = _parse_theta(args.theta) if args.theta else P.swimmer_bounds().midpoint
    srv = StubServer(theta, args.rationale, args.host, args.port, delay=args.delay)
    print(f"stub proposer listening on {srv.url}/propose", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return EXIT_OK


COMMANDS = {
    "gen-ref": cmd_gen_ref,
    "run": cmd_run,
    "summarize": cmd_summarize,
    "plot": cmd_plot,
    "serve-stub": cmd_serve_stub,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

    tubempc simulate --controller smooth --task position --seed 3 --out out/
    tubempc compare --seeds 10 --out out/
    tubempc check
    tubempc preset

Exit codes: 0 success, 2 configuration error, 3 episode failure,
4 property check failed.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ENV_VAR, ConfigError, load_config, preset
from .gains import check_theorem2, synthesize_tube_gains
from .linearization import certified_budget, linearize_discrete, sample_linearization_error
from .manipulator import lipschitz_constants
from .prediction import containment_monte_carlo

EXIT_OK, EXIT_CONFIG, EXIT_EPISODE, EXIT_PROPERTY = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"TOML config file (default: ${ENV_VAR}, else the preset)")
    common.add_argument("--preset", choices=["paper"], help="start from a built-in preset, ignoring --config")
    common.add_argument("--strict-theorem2", action="store_true",
                        help="abort (exit 4) when the tube hypotheses fail instead of warning")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tubempc", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run one episode")
    s.add_argument("--controller", choices=["optimal", "delayed", "smooth"], default="smooth")
    s.add_argument("--task", choices=["position", "trajectory"], default="position")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", type=Path, default=Path("out"))

    c = sub.add_parser("compare", parents=[common], help="run the controller comparison")
    c.add_argument("--seeds", type=int, default=None, help="use seeds 0..N-1 (default: config)")
    c.add_argument("--seed", type=int, default=None, help="run a single seed")
    c.add_argument("--controller", action="append", choices=["optimal", "delayed", "smooth"],
                   help="restrict to a controller (repeatable)")
    c.add_argument("--task", action="append", choices=["position", "trajectory"],
                   help="restrict to a task (repeatable)")
    c.add_argument("--out", type=Path, default=Path("out"))

    k = sub.add_parser("check", parents=[common], help="linearization, containment and tube reports")
    k.add_argument("--samples", type=int, default=1000, help="Monte Carlo rollouts per m")
    k.add_argument("--max-m", type=int, default=8)
    k.add_argument("--seed", type=int, default=0)

    sub.add_parser("preset", parents=[common], help="print the resolved configuration as TOML")
    return p


def _resolve(args):
    rc = preset("paper") if args.preset else load_config(args.config)
    if args.strict_theorem2:
        rc = replace(rc, sim=replace(rc.sim, theorem2_policy="abort"))
    return rc


def cmd_simulate(args, rc) -> int:
    from .compare import run_name, write_manifest
    from .simulation import metrics_summary, run_episode
    from .traces import emit_trace

    task = rc.task(args.task)
    seed = rc.sim.seed if args.seed is None else args.seed
    write_manifest(args.out, rc, (args.controller,), (task,), (seed,))
    (args.out / "runs").mkdir(exist_ok=True)
    tr = run_episode(rc.with_seed(seed), args.controller, task)
    path = args.out / "runs" / run_name(task.name, args.controller, seed)
    emit_trace(tr, path)
    for key, val in metrics_summary(tr).items():
        print(f"{key:26s} {val}")
    print(f"trace written to {path}")
    if tr.status != "ok":
        print(f"episode failed at step {tr.failure_step}: {tr.failure}", file=sys.stderr)
        return EXIT_PROPERTY if tr.failure and tr.failure.startswith("Theorem2Violation") else EXIT_EPISODE
    return EXIT_OK


def cmd_compare(args, rc) -> int:
    from .compare import format_verdicts, run_compare

    seeds = None
    if args.seed is not None:
        seeds = (args.seed,)
    elif args.seeds is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be at least 1")
        seeds = tuple(range(args.seeds))
    tasks = tuple(rc.task(name) for name in args.task) if args.task else None

    def progress(row):
        print(f"{row['task']:10s} {row['controller']:8s} seed {row['seed']:<3d} {row['status']:6s} "
              f"final {row['final_error']:.4f} steady {row['steady_state_error']:.4f} "
              f"viol {row['violation_count']}", flush=True)

    res = run_compare(rc, args.out, controllers=args.controller, tasks=tasks, seeds=seeds, progress=progress)
    if res.verdicts:
        print(format_verdicts(res.verdicts))
    print(f"outputs written to {args.out}")
    if res.failures:
        for c, t, s, msg in res.failures:
            print(f"failed: {t}/{c}/seed {s}: {msg}", file=sys.stderr)
        return EXIT_EPISODE
    if res.verdicts and not res.ordering_ok:
        return EXIT_PROPERTY
    return EXIT_OK


def cmd_check(args, rc) -> int:
    cfg = rc.sim
    params = cfg.params
    z0 = cfg.z0
    rng = np.random.default_rng(args.seed)
    l1, l2, l = lipschitz_constants(params)
    print(f"lipschitz: l1 = {l1:.12g}, l2 = {l2:.12g}, l = {l:.12g}")

    print("\nlinearization bound at the initial state")
    u_probe = 0.5 * np.asarray(params.omega_max)
    for label, u0 in (("u0 = 0", np.zeros(3)), ("u0 = omega_max/2", u_probe)):
        model, budget, dz, du = certified_budget(z0, u0, params, cfg.delta)
        err = sample_linearization_error(model, params, dz, du, 10_000, rng)
        print(f"  {label}: etaR = {budget.etaR:.6g}, eta2 = {budget.eta2:.6g}, eta = eta1 + eta2 = "
              f"{budget.eta:.6g}; sampled max error {err.max():.6g} over 10^4 points, "
              f"{int(np.sum(err > budget.eta2))} above eta2")
    print(f"  operative eta used by the tube: {cfg.eta:g}")

    print(f"\ndeviation containment, {args.samples} disturbed rollouts per m (eta = {cfg.eta:g})")
    failures = 0
    for m in range(1, args.max_m + 1):
        rep = containment_monte_carlo(z0, params, cfg.delta, cfg.eta, m, args.samples, rng)
        failures += rep.failures
        print(f"  m = {m}: radius {rep.radius:.6g}, max deviation {rep.max_deviation:.6g}, failures {rep.failures}")

    print("\ntube hypotheses at the initial state")
    model = linearize_discrete(z0, u_probe, params, cfg.delta)
    gains = synthesize_tube_gains(model.Ad, model.Bd, cfg.Q, cfg.R)
    rep = check_theorem2(cfg.m, cfg.eta, l, gains.Acl)
    print(f"  linearized at u0 = omega_max/2, m = {cfg.m}, eta = {cfg.eta:g}, l = {l:.12g}")
    print(f"  lhs m*eta*(1+l)^m = {rep.lhs:.12g}")
    print(f"  rhs gamma = sum_i |Acl^i| eta = {rep.rhs:.12g}")
    print("  " + rep.format().replace("\n", "\n  "))
    if failures:
        return EXIT_PROPERTY
    if args.strict_theorem2 and not (rep.condition_i and rep.condition_ii):
        return EXIT_PROPERTY
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = _resolve(args)
        if args.command == "preset":
            sys.stdout.write(rc.dumps())
            return EXIT_OK
        return {"simulate": cmd_simulate, "compare": cmd_compare, "check": cmd_check}[args.command](args, rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

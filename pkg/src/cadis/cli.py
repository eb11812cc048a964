"""Command-line entry point.

Subcommands:

* ``run`` — execute an experiment from an INI config, writing metrics.csv,
  summary.json, similarity snapshots, and rendered figures into the run
  directory.
* ``theory rounds`` — coverage-time table: exact recursion, closed-form
  bound, Monte Carlo estimate with a 99% confidence half-width.
* ``theory convergence`` — quadratic-client fixed points of the two
  aggregation schemes and their objective gap.
* ``gradcheck`` — finite-difference validation of all analytic gradients.
* ``partition`` — dry-run a partition and emit the shard manifest JSON.
* ``plot`` — re-render figures for an existing run directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .data import partition as partition_shards
from .data import shards_to_manifest
from .engine import load_data, metrics_to_csv, run_experiment, summary_json
from .gradcheck import run_suite
from .theory import (
    QuadraticClient,
    expected_rounds_bound,
    expected_rounds_exact,
    expected_rounds_mc,
    fixed_point,
    global_objective,
    quadratic_trajectory,
)


def _cmd_run(args: argparse.Namespace) -> int:
    resolved = load_config(args.config, overrides=args.set or [])
    experiment = resolved.experiment
    if args.seed is not None:
        import dataclasses

        experiment = dataclasses.replace(experiment, seed=args.seed)
    out_root = Path(args.out) if args.out else resolved.out_dir
    run_id = resolved.run_id
    if args.seed is not None:
        run_id = f"{Path(args.config).stem}-{experiment.algorithm}-s{experiment.seed}"
    run_dir = out_root / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    def snapshot(t: int, blob: str) -> None:
        (run_dir / f"similarity_t{t}.json").write_text(blob, encoding="utf-8")

    result = run_experiment(experiment, snapshot_sink=snapshot)
    (run_dir / "metrics.csv").write_text(
        metrics_to_csv(result.metrics, experiment.shape.classes), encoding="utf-8"
    )
    (run_dir / "summary.json").write_text(summary_json(result), encoding="utf-8")
    if result.sim_state is not None:
        (run_dir / "similarity_final.json").write_text(
            result.sim_state.to_json(), encoding="utf-8"
        )
    if not args.no_plots and result.metrics:
        from .plots import render_run

        render_run(run_dir)
    best = max((m.top1 for m in result.metrics), default=result.initial_top1)
    print(f"run {run_id}: {experiment.rounds} rounds, best top-1 {best:.2f}%")
    print(f"outputs in {run_dir}")
    return 0


def _parse_pairs(parts: list[str]) -> list[tuple[int, int]]:
    pairs = []
    for part in parts:
        try:
            n_str, k_str = part.split(":")
            pairs.append((int(n_str), int(k_str)))
        except ValueError:
            raise SystemExit(f"expected n:k, got {part!r}")
    return pairs


def _cmd_theory_rounds(args: argparse.Namespace) -> int:
    rows = []
    for n, k in _parse_pairs(args.pairs):
        exact = expected_rounds_exact(n, k)
        bound = expected_rounds_bound(n, k)
        if args.trials > 0:
            mean, half = expected_rounds_mc(n, k, args.trials, args.seed)
            rows.append((n, k, exact, bound, mean, half))
            print(
                f"n={n} k={k} exact={exact:.3f} bound={bound:.3f} "
                f"mc={mean:.3f} ci99=±{half:.3f}"
            )
        else:
            rows.append((n, k, exact, bound, float("nan"), float("nan")))
            print(f"n={n} k={k} exact={exact:.3f} bound={bound:.3f}")
    if args.csv:
        lines = ["n,k,exact,bound,mc_mean,mc_ci99_half"]
        lines += [",".join(repr(v) if isinstance(v, float) else str(v) for v in row) for row in rows]
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _floats(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _cmd_theory_convergence(args: argparse.Namespace) -> int:
    a = _floats(args.a)
    b = _floats(args.b)
    clusters = [int(c) for c in args.clusters.split(",")] if args.clusters else [0] * len(a)
    if not (len(a) == len(b) == len(clusters)):
        raise SystemExit("a, b and clusters must have the same length")
    clients = [QuadraticClient(ai, bi, ci) for ai, bi, ci in zip(a, b, clusters)]
    try:
        z_fed = fixed_point(clients, args.lr, args.steps, "fedavg")
        z_cad = fixed_point(clients, args.lr, args.steps, "cadis")
        traj_fed = quadratic_trajectory(clients, args.lr, args.steps, args.rounds, "fedavg", args.z0)
        traj_cad = quadratic_trajectory(clients, args.lr, args.steps, args.rounds, "cadis", args.z0)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    loss_fed = global_objective(z_fed, clients)
    loss_cad = global_objective(z_cad, clients)
    gap = loss_fed - loss_cad
    print(f"Z_fedavg={z_fed:.9f} (iterated {traj_fed[-1]:.9f})")
    print(f"Z_cadis={z_cad:.9f} (iterated {traj_cad[-1]:.9f})")
    print(f"objective_fedavg={loss_fed:.9f} objective_cadis={loss_cad:.9f} gap={gap:.9f}")
    if args.csv:
        lines = ["round,z_fedavg,z_cadis"]
        lines += [
            f"{t},{repr(float(zf))},{repr(float(zc))}"
            for t, (zf, zc) in enumerate(zip(traj_fed, traj_cad))
        ]
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_suite(args.seed, args.trials)
    worst = max(results, key=lambda r: r.error)
    failures = [r for r in results if not r.passed]
    for r in results:
        if args.verbose or not r.passed:
            status = "ok" if r.passed else "FAIL"
            print(f"{status:4s} {r.name:12s} rel_err={r.error:.3e}")
    print(
        f"{len(results) - len(failures)}/{len(results)} checks passed, "
        f"worst rel_err={worst.error:.3e} ({worst.name})"
    )
    return 1 if failures else 0


def _cmd_partition(args: argparse.Namespace) -> int:
    resolved = load_config(args.config, overrides=args.set or [])
    train, _test = load_data(resolved.experiment)
    shards = partition_shards(train, resolved.experiment.partition)
    manifest = shards_to_manifest(shards)
    if args.out:
        Path(args.out).write_text(manifest, encoding="utf-8")
        print(f"wrote manifest for {len(shards)} clients to {args.out}")
    else:
        print(manifest)
    return 0


def _cmd_plot(args: argparse.Namespace) -> int:
    from .plots import render_run

    written = render_run(args.run_dir)
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cadis", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from an INI config")
    run.add_argument("-c", "--config", required=True, help="path to the INI config")
    run.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    run.add_argument("--seed", type=int, default=None, help="override the master seed")
    run.add_argument("--out", default=None, help="override the output directory")
    run.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    run.set_defaults(fn=_cmd_run)

    theory = sub.add_parser("theory", help="coverage-time and convergence checks")
    tsub = theory.add_subparsers(dest="subcommand", required=True)

    rounds = tsub.add_parser("rounds", help="expected rounds to full participation")
    rounds.add_argument("pairs", nargs="+", metavar="N:K", help="client:participant pairs")
    rounds.add_argument("--trials", type=int, default=10000, help="Monte Carlo trials (0 to skip)")
    rounds.add_argument("--seed", type=int, default=0)
    rounds.add_argument("--csv", default=None, help="also write the table as CSV")
    rounds.set_defaults(fn=_cmd_theory_rounds)

    conv = tsub.add_parser("convergence", help="quadratic-client fixed points and gap")
    conv.add_argument("--a", required=True, help="comma-separated quadratic coefficients")
    conv.add_argument("--b", required=True, help="comma-separated linear coefficients")
    conv.add_argument("--clusters", default=None, help="comma-separated cluster tags")
    conv.add_argument("--lr", type=float, default=0.01)
    conv.add_argument("--steps", type=int, default=5, help="local gradient steps per round")
    conv.add_argument("--rounds", type=int, default=2000)
    conv.add_argument("--z0", type=float, default=0.0)
    conv.add_argument("--csv", default=None, help="also write the trajectories as CSV")
    conv.set_defaults(fn=_cmd_theory_convergence)

    grad = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--trials", type=int, default=20)
    grad.add_argument("-v", "--verbose", action="store_true")
    grad.set_defaults(fn=_cmd_gradcheck)

    part = sub.add_parser("partition", help="dry-run a partition, emit the shard manifest")
    part.add_argument("-c", "--config", required=True)
    part.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    part.add_argument("--out", default=None, help="manifest output path (default stdout)")
    part.set_defaults(fn=_cmd_partition)

    plot = sub.add_parser("plot", help="re-render figures for a run directory")
    plot.add_argument("run_dir")
    plot.set_defaults(fn=_cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points.

Subcommands map one-to-one onto the evaluation protocols: train, eval
(nominal or cbf_compare), stress, ablate (both load conditions), transfer,
and validate-grid.  Output directory defaults to $GRIDSHIELD_OUT or ./runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import environment as env
from . import harness, training
from .agent import AgentVariant
from .grid import validate_spec
from .harness import RunConfig, run_suite, write_report
from .training import TrainConfig

VARIANT_CHOICES = {v.value: v for v in AgentVariant}


def _default_out() -> str:
    return os.environ.get("GRIDSHIELD_OUT", "runs")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid", default="train14", help="builtin grid name or spec file path")
    p.add_argument("--variant", choices=sorted(VARIANT_CHOICES), default=None,
                   help="restrict the suite to a single variant")
    p.add_argument("--rho-max", type=float, default=0.98, help="shield admissibility threshold")
    p.add_argument("--seed", type=int, default=0, help="base seed; episode i uses seed+i")
    p.add_argument("--episodes", type=int, default=None, help="episode count override")
    p.add_argument("--horizon", type=int, default=200)
    p.add_argument("--sigma", type=float, default=0.02, help="load noise std")
    p.add_argument("--stress-step", type=int, default=10)
    p.add_argument("--updates", type=int, default=200, help="training updates")
    p.add_argument("--episodes-per-update", type=int, default=4)
    p.add_argument("--no-traces", action="store_true", help="drop per-step traces from records")
    p.add_argument("--out", default=None, help="output directory")


def _run_config(args, stress: bool = False) -> RunConfig:
    return RunConfig(
        grid=args.grid,
        rho_max=args.rho_max,
        episodes=args.episodes,
        base_seed=args.seed,
        out_dir=args.out or _default_out(),
        env=env.EnvConfig(
            horizon=args.horizon,
            load_noise_sigma=args.sigma,
            stress_mode=stress,
            stress_outage_step=args.stress_step,
        ),
        train=TrainConfig(
            total_updates=args.updates,
            episodes_per_update=args.episodes_per_update,
        ),
        variants=(VARIANT_CHOICES[args.variant],) if args.variant else None,
        retain_traces=not args.no_traces,
    )


def _emit(report, out_dir) -> None:
    paths = write_report(report, out_dir)
    print(f"suite {report.suite} on {report.eval_grid} ({report.episode_count} episodes, "
          f"provenance {report.provenance})")
    for row in report.rows:
        print(f"  {row.label:20s} steps {row.mean_steps:7.2f}  max rho {row.mean_max_rho:5.2f}  "
              f"vetoes {row.mean_vetoes:6.2f}  reward {row.mean_reward:8.2f}")
    print("wrote " + ", ".join(str(p) for p in paths))


def cmd_train(args) -> int:
    run_cfg = _run_config(args)
    variant = VARIANT_CHOICES[args.variant or "hierarchy_shield"]
    result = harness.train_params_for(variant, run_cfg)
    if result is None:
        print(f"variant {variant.value} has no trainable policy", file=sys.stderr)
        return 2
    out = Path(args.out or _default_out())
    out.mkdir(parents=True, exist_ok=True)
    policy_path = out / f"policy_{variant.value}.bin"
    harness.save_policy(result.params, policy_path)
    log_path = out / f"training_{variant.value}.csv"
    rows = ["update,mean_return,grad_norm"] + [
        f"{i},{r!r},{g!r}" for i, (r, g) in enumerate(zip(result.mean_returns, result.grad_norms))
    ]
    log_path.write_text("\n".join(rows) + "\n")
    window = min(10, max(1, len(result.mean_returns)))
    lead = sum(result.mean_returns[:window]) / window
    trail = sum(result.mean_returns[-window:]) / window
    print(f"trained {variant.value} on {harness.TRAIN_GRID}: "
          f"first-{window} return {lead:.1f}, last-{window} return {trail:.1f}")
    print(f"wrote {policy_path}, {log_path}")
    return 0


def cmd_eval(args) -> int:
    run_cfg = _run_config(args, stress=False)
    report = run_suite(args.suite, run_cfg)
    _emit(report, Path(run_cfg.out_dir) / args.suite)
    return 0


def cmd_stress(args) -> int:
    run_cfg = _run_config(args, stress=True)
    report = run_suite("stress", run_cfg)
    _emit(report, Path(run_cfg.out_dir) / "stress")
    return 0


def cmd_ablate(args) -> int:
    # Both load conditions: the plain grid and the forced-outage variant.
    for condition, stress in (("nominal", False), ("stress", True)):
        run_cfg = _run_config(args, stress=stress)
        report = run_suite("ablation", run_cfg)
        _emit(report, Path(run_cfg.out_dir) / "ablation" / condition)
    return 0


def cmd_transfer(args) -> int:
    if args.grid == harness.TRAIN_GRID:
        args.grid = "large36"
    run_cfg = _run_config(args, stress=False)
    report = run_suite("transfer", run_cfg)
    _emit(report, Path(run_cfg.out_dir) / "transfer")
    return 0


def cmd_validate_grid(args) -> int:
    try:
        spec = harness.resolve_grid(args.grid)
    except harness.GridFileError as e:
        print(f"invalid: {e}", file=sys.stderr)
        return 1
    violations = validate_spec(spec)
    if violations:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        return 1
    print(f"ok: {spec.n_buses} buses, {spec.n_lines} lines, "
          f"{spec.n_gens} generators, {spec.n_loads} loads")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gridshield",
        description="Safety-shielded hierarchical grid-control workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy and save it")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="nominal (or cbf_compare) evaluation suite")
    _add_common(p)
    p.add_argument("--suite", choices=("nominal", "cbf_compare"), default="nominal")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("stress", help="forced line-outage stress suite")
    _add_common(p)
    p.set_defaults(fn=cmd_stress)

    p = sub.add_parser("ablate", help="four-variant ablation, nominal and stress")
    _add_common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("transfer", help="train on train14, evaluate zero-shot elsewhere")
    _add_common(p)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("validate-grid", help="check a grid file or builtin name")
    p.add_argument("--grid", required=True)
    p.set_defaults(fn=cmd_validate_grid)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())

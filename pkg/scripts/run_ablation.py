"""Four-variant ablation (flat / veto-only / hierarchy-only / hierarchy+CBF)
under both load conditions: plain and with the forced line outage."""

import argparse
from pathlib import Path

from gridshield.environment import EnvConfig
from gridshield.harness import RunConfig, run_suite, write_report
from gridshield.training import TrainConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", default="large36")
    ap.add_argument("--episodes", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--updates", type=int, default=200)
    ap.add_argument("--episodes-per-update", type=int, default=12)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    for condition, stress in (("nominal", False), ("stress", True)):
        run_cfg = RunConfig(
            grid=args.grid,
            episodes=args.episodes,
            base_seed=args.seed,
            env=EnvConfig(stress_mode=stress),
            train=TrainConfig(
                total_updates=args.updates, episodes_per_update=args.episodes_per_update
            ),
        )
        report = run_suite("ablation", run_cfg)
        out = Path(args.out) / condition
        write_report(report, out)
        print(f"[{condition}] on {report.eval_grid}:")
        for row in report.rows:
            print(f"  {row.label:18s} steps {row.mean_steps:7.2f}  max rho {row.mean_max_rho:5.2f}  "
                  f"vetoes {row.mean_vetoes:6.2f}  reward {row.mean_reward:8.2f}")
        print(f"  wrote {out}")


if __name__ == "__main__":
    main()

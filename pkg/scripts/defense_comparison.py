"""Measure how the FIM filter and normalization change the attack gains.

Example:
    python scripts/defense_comparison.py --protocol gridtrace --out runs/defense
"""

import argparse
from pathlib import Path

from trapattack.experiment import ExperimentConfig, run_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--protocol", choices=["direct", "gridtrace"], default="direct")
    parser.add_argument("--n", type=int, default=4000)
    parser.add_argument("--repetitions", type=int, default=5)
    parser.add_argument("--fim-freq", type=float, default=0.9)
    parser.add_argument("--fim-composition", type=float, default=0.9)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs/defense")
    args = parser.parse_args()

    defenses = ["none", "fim"] + (["normalize"] if args.protocol == "gridtrace" else [])
    cfg = ExperimentConfig(
        protocol=args.protocol, n_real=args.n, repetitions=args.repetitions,
        defenses=defenses, fim_freq_threshold=args.fim_freq,
        fim_composition_threshold=args.fim_composition, seed=args.seed,
    )
    report = run_experiment(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / f"{args.protocol}.json", out / f"{args.protocol}.csv")
    print("condition       score_gain   pr_gain  removed/run")
    for name, m in report.conditions.items():
        removed = report.extras["removed"][name]
        print(f"{name:14s} {m.score_gain:11.4f} {m.pr_gain:9.2f} "
              f"{sum(removed) / len(removed):12.1f}")


if __name__ == "__main__":
    main()

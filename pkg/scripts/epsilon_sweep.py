"""Sweep the privacy budget and report the OPA gain per protocol.

DirectTraj forwards crafted trajectories verbatim, so its OPA gain should
not depend on epsilon. GridTrace spends epsilon on the statistics it
aggregates, so its gain is expected to shrink or stay flat as epsilon grows.

Example:
    python scripts/epsilon_sweep.py --protocol gridtrace --n 2000 --out runs/eps
"""

import argparse
from pathlib import Path

from trapattack.experiment import ExperimentConfig, run_sweep


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--protocol", choices=["direct", "gridtrace"], default="gridtrace")
    parser.add_argument("--epsilons", default="0.5,1,2,4")
    parser.add_argument("--n", type=int, default=2000)
    parser.add_argument("--repetitions", type=int, default=5)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs/eps")
    args = parser.parse_args()

    cfg = ExperimentConfig(
        protocol=args.protocol, n_real=args.n, repetitions=args.repetitions,
        modes=["none", "opa"], seed=args.seed,
        sweep={"epsilon": [float(e) for e in args.epsilons.split(",")]},
    )
    results = run_sweep(cfg, Path(args.out), jobs=args.jobs)
    print("epsilon  opa_score_gain  opa_pr_gain")
    for cell, report in sorted(results, key=lambda r: r[0]["epsilon"]):
        m = report.conditions["none/opa"]
        print(f"{cell['epsilon']:7g}  {m.score_gain:14.4f}  {m.pr_gain:11.2f}")


if __name__ == "__main__":
    main()

"""Compare no-attack, IPA and OPA on both victim protocols.

Example:
    python scripts/attack_direction.py --n 4000 --repetitions 5 --out runs/direction
"""

import argparse
import dataclasses
import json
from pathlib import Path

from trapattack.experiment import ExperimentConfig, run_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--n", type=int, default=4000, help="synthetic dataset size")
    parser.add_argument("--epsilon", type=float, default=1.0)
    parser.add_argument("--beta", type=float, default=0.2)
    parser.add_argument("--repetitions", type=int, default=5)
    parser.add_argument("--protocols", default="direct,gridtrace")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs/direction")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for protocol in args.protocols.split(","):
        cfg = ExperimentConfig(
            protocol=protocol, epsilon=args.epsilon, n_real=args.n, beta=args.beta,
            repetitions=args.repetitions, seed=args.seed,
        )
        report = run_experiment(cfg)
        report.write(out / f"{protocol}.json", out / f"{protocol}.csv")
        print(f"{protocol} ({report.wall_clock:.0f}s)")
        for name, m in report.conditions.items():
            print(f"  {name:10s} " + json.dumps(dataclasses.asdict(m)))


if __name__ == "__main__":
    main()

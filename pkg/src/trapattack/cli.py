"""Command-line entry point.

Subcommands mirror the experiment pipeline: ``synth-data`` and
``sample-patterns`` prepare inputs, ``generate-fakes`` runs the fake
trajectory generator, ``attack`` pushes one condition through a victim
protocol, ``evaluate`` scores a dataset, and ``sweep`` runs full repeated
experiments over a parameter grid.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data
error, 4 enumeration capacity exceeded, 5 under-filled length.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .attacks import assemble_poisoned_run, fake_count
from .core import TrajectoryDataset, write_trajectory_csv
from .defenses import FimConfig
from .errors import ConfigError, TrapError
from .experiment import (
    ExperimentConfig,
    config_schema,
    generate_synthetic,
    load_dataset,
    load_patterns,
    make_protocol,
    make_reachability,
    run_sweep,
    sample_target_patterns,
    save_patterns,
)
from .generator import (
    DEFAULT_ENUMERATION_CAP,
    LengthDistribution,
    brute_force_generate,
    sample_length_distribution,
    trap_generate,
)
from .metrics import evaluate
from .protocols import write_reports_binary, write_reports_jsonl

log = logging.getLogger("trapattack")

# CLI flag -> ExperimentConfig field; flags left unset keep the file value.
_OVERRIDES = {
    "protocol": "protocol",
    "epsilon": "epsilon",
    "rows": "rows",
    "cols": "cols",
    "n": "n_real",
    "length_min": "length_min",
    "length_max": "length_max",
    "reachability": "reachability",
    "beta": "beta",
    "max_rep": "max_rep",
    "mean_div": "mean_div",
    "std_div": "std_div",
    "k_min": "k_min",
    "k_max": "k_max",
    "per_length": "per_length",
    "repetitions": "repetitions",
    "seed": "seed",
    "tie_break": "tie_break",
}


def _add_config_flags(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--config", help="YAML experiment config; flags override its values")
    spec = {
        "protocol": dict(choices=["direct", "gridtrace"]),
        "epsilon": dict(type=float),
        "rows": dict(type=int),
        "cols": dict(type=int),
        "n": dict(type=int, help="synthetic dataset size"),
        "length_min": dict(type=int),
        "length_max": dict(type=int),
        "reachability": dict(choices=["neighbors8", "speed_limit"]),
        "beta": dict(type=float),
        "max_rep": dict(type=int),
        "mean_div": dict(type=float),
        "std_div": dict(type=float),
        "k_min": dict(type=int),
        "k_max": dict(type=int),
        "per_length": dict(type=int),
        "repetitions": dict(type=int),
        "seed": dict(type=int),
        "tie_break": dict(choices=["lex", "shuffle"]),
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **spec[name])


def _config(args) -> ExperimentConfig:
    overrides = {
        field: getattr(args, flag)
        for flag, field in _OVERRIDES.items()
        if getattr(args, flag, None) is not None
    }
    if getattr(args, "config", None):
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_dict(overrides)


def _dataset(args, cfg: ExperimentConfig) -> TrajectoryDataset:
    if getattr(args, "data", None):
        res = load_dataset(args.data, cfg.grid, make_reachability(cfg), cfg.sample_cap, cfg.seed)
        if res.excluded:
            print(f"excluded {res.excluded} trajectories violating reachability", file=sys.stderr)
        return res.dataset
    return generate_synthetic(cfg.grid, cfg.n_real, cfg.length_min, cfg.length_max, cfg.seed)


def _read_cells(path) -> TrajectoryDataset:
    from .core import read_trajectory_csv
    from .errors import DataError

    kind, rows = read_trajectory_csv(path)
    if kind != "cell":
        raise DataError(f"{path}: expected cell-format trajectories")
    return TrajectoryDataset([tuple(v) for v in rows.values()])


# --------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    data = generate_synthetic(cfg.grid, cfg.n_real, cfg.length_min, cfg.length_max, cfg.seed)
    write_trajectory_csv(args.out, data)
    print(f"wrote {len(data)} trajectories to {args.out}")
    return 0


def cmd_sample_patterns(args) -> int:
    cfg = _config(args)
    data = _dataset(args, cfg)
    TP = sample_target_patterns(data, cfg.k_min, cfg.k_max, cfg.per_length, cfg.seed)
    save_patterns(args.out, TP)
    print(f"wrote {len(TP)} target patterns to {args.out}")
    return 0


def cmd_generate_fakes(args) -> int:
    cfg = _config(args)
    if cfg.patterns is None and args.patterns is None:
        raise ConfigError("generate-fakes needs --patterns")
    TP = load_patterns(args.patterns or cfg.patterns)
    rps = make_reachability(cfg)
    if args.dist:
        with open(args.dist) as fh:
            dist = LengthDistribution({int(k): int(v) for k, v in json.load(fh).items()})
    else:
        m = args.m if args.m is not None else fake_count(cfg.n_real, cfg.beta)
        dist = sample_length_distribution(
            m, cfg.length_min, cfg.length_max, cfg.seed, cfg.mean_div, cfg.std_div
        )
    if args.brute_force:
        fset = brute_force_generate(rps, TP, dist, cfg.max_rep, cap=args.cap)
    else:
        fset = trap_generate(
            rps, TP, dist, cfg.max_rep, cfg.seed,
            tie_break=cfg.tie_break, allow_underfill=args.allow_underfill,
        )
    write_trajectory_csv(args.out, fset.trajectories)
    manifest = {
        "m": len(fset),
        "dist": {str(k): v for k, v in dist.nonzero().items()},
        "max_rep": cfg.max_rep,
        "seed": cfg.seed,
        "total_score": fset.total_score,
        "underfilled": {str(k): v for k, v in fset.underfilled.items()},
        "generator": "brute_force" if args.brute_force else "trap",
    }
    manifest_path = args.manifest or str(Path(args.out).with_suffix(".json"))
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    print(f"wrote {len(fset)} fakes (total score {fset.total_score:g}) to {args.out}")
    return 0


def cmd_attack(args) -> int:
    cfg = _config(args)
    real = _dataset(args, cfg)
    fakes = list(_read_cells(args.fakes)) if args.fakes else []
    if args.mode != "none" and not fakes:
        raise ConfigError(f"mode {args.mode} needs --fakes")
    L_max = max(len(t) for t in real)
    protocol = make_protocol(cfg, args.defense, L_max)
    fim = None
    if args.defense == "fim" and cfg.protocol == "direct":
        fim = FimConfig(cfg.fim_freq_threshold, cfg.fim_composition_threshold)
    run = assemble_poisoned_run(
        real, fakes, args.mode, protocol, cfg.seed, fim=fim, craft_length=cfg.craft_length
    )
    write_trajectory_csv(args.out, run.output)
    if args.reports:
        writer = write_reports_binary if args.report_format == "binary" else write_reports_jsonl
        writer(args.reports, run.fake_reports)
    summary = {"n_real": run.n_real, "n_fake": run.n_fake, "L_k": run.L_k,
               "removed": run.removed, "output_size": len(run.output)}
    print(json.dumps(summary))
    return 0


def cmd_evaluate(args) -> int:
    TP = load_patterns(args.patterns)
    data = _read_cells(args.data)
    baseline = evaluate(_read_cells(args.baseline), TP) if args.baseline else None
    report = evaluate(data, TP, baseline)
    text = report.to_json(seed=args.seed)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_sweep(args) -> int:
    if args.print_schema:
        print(config_schema())
        return 0
    cfg = _config(args)
    if args.sweep:
        sweep = dict(cfg.sweep)
        for item in args.sweep:
            key, _, values = item.partition("=")
            if not values:
                raise ConfigError(f"--sweep expects key=v1,v2,... got {item!r}")
            sweep[key] = [_parse_scalar(v) for v in values.split(",")]
        cfg = ExperimentConfig.from_dict(cfg.to_dict() | {"sweep": sweep})
    if args.modes:
        cfg = dataclasses.replace(cfg, modes=args.modes.split(","))
    if args.defenses:
        cfg = dataclasses.replace(cfg, defenses=args.defenses.split(","))
    results = run_sweep(cfg, args.out, jobs=args.jobs)
    for cell, report in results:
        for name, m in report.conditions.items():
            print(f"{cell or ''} {name}: score_gain={m.score_gain:.4f} pr_gain={m.pr_gain:.2f}")
    return 0


def _parse_scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trapattack", description=__doc__.split("\n\n")[0])
    parser.add_argument("--print-schema", action="store_true",
                        help="print the experiment config schema and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth-data", help="write seeded random-walk trajectories")
    _add_config_flags(p, "rows", "cols", "n", "length_min", "length_max", "seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("sample-patterns", help="sample length-scored target patterns")
    _add_config_flags(p, "rows", "cols", "n", "length_min", "length_max", "reachability",
                      "k_min", "k_max", "per_length", "seed")
    p.add_argument("--data", help="trajectory CSV; omit to use synthetic walks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_patterns)

    p = sub.add_parser("generate-fakes", help="generate fake trajectories")
    _add_config_flags(p, "rows", "cols", "n", "length_min", "length_max", "reachability",
                      "beta", "max_rep", "mean_div", "std_div", "seed", "tie_break")
    p.add_argument("--patterns", help="target pattern JSON")
    p.add_argument("--m", type=int, help="number of fakes (default from n and beta)")
    p.add_argument("--dist", help="JSON {length: count}; overrides --m")
    p.add_argument("--brute-force", action="store_true", help="use the exhaustive oracle")
    p.add_argument("--cap", type=int, default=DEFAULT_ENUMERATION_CAP,
                   help="brute-force enumeration cap per length")
    p.add_argument("--allow-underfill", action="store_true")
    p.add_argument("--out", required=True, help="fake trajectory CSV")
    p.add_argument("--manifest", help="manifest JSON (default: next to --out)")
    p.set_defaults(func=cmd_generate_fakes)

    p = sub.add_parser("attack", help="run one attack condition through a protocol")
    _add_config_flags(p, "protocol", "epsilon", "rows", "cols", "n", "length_min",
                      "length_max", "reachability", "seed")
    p.add_argument("--data", help="real trajectory CSV; omit to use synthetic walks")
    p.add_argument("--fakes", help="fake trajectory CSV")
    p.add_argument("--mode", choices=["none", "ipa", "opa"], default="opa")
    p.add_argument("--defense", choices=["none", "fim", "normalize"], default="none")
    p.add_argument("--out", required=True, help="server output trajectory CSV")
    p.add_argument("--reports", help="write the fake users' submissions here")
    p.add_argument("--report-format", choices=["jsonl", "binary"], default="jsonl")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="score a dataset against target patterns")
    p.add_argument("--data", required=True)
    p.add_argument("--patterns", required=True)
    p.add_argument("--baseline", help="no-attack dataset for gains")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run repeated experiments over a parameter grid")
    _add_config_flags(p, *_OVERRIDES)
    p.add_argument("--print-schema", action="store_true")
    p.add_argument("--sweep", action="append", metavar="KEY=V1,V2",
                   help="add a sweep axis (repeatable)")
    p.add_argument("--modes", help="comma-separated attack modes")
    p.add_argument("--defenses", help="comma-separated defenses")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_schema and args.command is None:
        print(config_schema())
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except TrapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

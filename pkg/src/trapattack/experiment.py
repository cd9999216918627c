"""End-to-end experiment orchestration.

One *run* takes a real dataset and, for every repetition seed, samples
target patterns, generates fake trajectories, pushes honest and fake users
through the victim protocol under each (defense, attack mode) condition, and
scores the server output. Gains are measured against the no-attack condition
under the same defense setting.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .attacks import HonestCache, assemble_poisoned_run, fake_count
from .core import (
    GridSpec,
    ReachabilityGraph,
    TargetPatternSet,
    TrajectoryDataset,
    build_reachability,
    discretize,
    read_trajectory_csv,
)
from .defenses import FimConfig
from .errors import ConfigError, DataError, TrapError
from .generator import sample_length_distribution, trap_generate
from .metrics import MetricReport, evaluate
from .protocols import DirectTrajConfig, GridTraceConfig

log = logging.getLogger(__name__)


def _f(default, doc):
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: type(default)(default), metadata={"doc": doc})
    return field(default=default, metadata={"doc": doc})


@dataclass
class ExperimentConfig:
    protocol: str = _f("direct", "victim protocol: direct | gridtrace")
    epsilon: float = _f(1.0, "total privacy budget per user")
    rows: int = _f(16, "grid rows")
    cols: int = _f(16, "grid columns")
    bbox: list = _f([0.0, 1.0, 0.0, 1.0], "min_lat, max_lat, min_lon, max_lon")
    dataset: str | None = _f(None, "trajectory CSV; omit to use synthetic walks")
    n_real: int = _f(4000, "synthetic dataset size")
    length_min: int = _f(2, "synthetic shortest trajectory")
    length_max: int = _f(15, "synthetic longest trajectory")
    sample_cap: int = _f(5000, "keep at most this many real trajectories (seeded sample)")
    reachability: str = _f("neighbors8", "neighbors8 | speed_limit")
    speed_kmh: float = _f(50.0, "speed for speed_limit reachability")
    interval_h: float = _f(0.1, "time interval for speed_limit reachability")
    patterns: str | None = _f(None, "target pattern JSON; omit to sample from the dataset")
    k_min: int = _f(1, "shortest sampled target pattern")
    k_max: int = _f(6, "longest sampled target pattern")
    per_length: int = _f(5, "sampled target patterns per length")
    beta: float = _f(0.2, "fake share m / (m + n)")
    max_rep: int = _f(1, "maximum copies of any fake trajectory")
    mean_div: float = _f(2.0, "fake length mean = (L_min + L_max) / mean_div")
    std_div: float = _f(5.0, "fake length std = (L_max - L_min) / std_div")
    tie_break: str = _f("lex", "lex | shuffle")
    modes: list = _f(["none", "ipa", "opa"], "attack conditions")
    defenses: list = _f(["none"], "defense settings: none | fim | normalize")
    fim_freq_threshold: float = _f(0.9, "FIM item frequency percentile")
    fim_composition_threshold: float = _f(0.9, "FIM composition threshold")
    quantile: float = _f(0.9, "GridTrace length quantile k")
    length_fraction: float = _f(0.1, "GridTrace budget share of the length report")
    craft_length: bool = _f(True, "OPA fakes craft their GridTrace length report")
    repetitions: int = _f(5, "independent repetitions averaged together")
    seed: int = _f(0, "root seed")
    sweep: dict = _f({}, "parameter -> list of values; one run per grid cell")

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.protocol not in ("direct", "gridtrace"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0 <= self.beta < 1:
            raise ConfigError("beta must lie in [0, 1)")
        if self.max_rep < 1 or self.repetitions < 1:
            raise ConfigError("max_rep and repetitions must be >= 1")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError("need 1 <= k_min <= k_max")
        if not 1 <= self.length_min <= self.length_max:
            raise ConfigError("need 1 <= length_min <= length_max")
        for m in self.modes:
            if m not in ("none", "ipa", "opa"):
                raise ConfigError(f"unknown mode {m!r}")
        for d in self.defenses:
            if d not in ("none", "fim", "normalize"):
                raise ConfigError(f"unknown defense {d!r}")
            if d == "normalize" and self.protocol != "gridtrace":
                raise ConfigError("normalization applies to gridtrace only")
        for path in (self.dataset, self.patterns):
            if path is not None and not Path(path).exists():
                raise ConfigError(f"file not found: {path}")
        unknown = set(self.sweep) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"cannot sweep unknown parameters {sorted(unknown)}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.rows, self.cols, *self.bbox)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data.update(overrides or {})
        return cls.from_dict(data)


def config_schema() -> str:
    lines = ["# experiment config (YAML); every key optional"]
    for f in dataclasses.fields(ExperimentConfig):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        lines.append(f"{f.name}: {json.dumps(default)}  # {f.metadata['doc']}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# data


@dataclass
class LoadResult:
    dataset: TrajectoryDataset
    excluded: int
    sampled_out: int


def make_reachability(cfg: ExperimentConfig) -> ReachabilityGraph:
    if cfg.reachability == "speed_limit":
        return build_reachability(
            cfg.grid, "speed_limit", speed_kmh=cfg.speed_kmh, interval_h=cfg.interval_h
        )
    if cfg.reachability == "neighbors8":
        return build_reachability(cfg.grid, "neighbors8")
    raise ConfigError(f"unknown reachability {cfg.reachability!r}")


def load_dataset(
    path, spec: GridSpec, rps: ReachabilityGraph | None = None, sample_cap: int | None = None,
    seed: int = 0,
) -> LoadResult:
    """Read a trajectory CSV, discretize, drop unreachable trajectories, cap size."""
    kind, rows = read_trajectory_csv(path)
    trajs = []
    for tid, pts in rows.items():
        if kind == "latlon":
            trajs.append(discretize(pts, spec))
        else:
            if not spec.is_valid(pts):
                raise DataError(f"{path}: trajectory {tid} has cells outside the grid")
            trajs.append(tuple(pts))
    excluded = 0
    if rps is not None:
        kept = [t for t in trajs if rps.is_valid(t)]
        excluded = len(trajs) - len(kept)
        trajs = kept
    if excluded:
        log.info("excluded %d trajectories violating reachability", excluded)
    sampled_out = 0
    if sample_cap is not None and len(trajs) > sample_cap:
        idx = np.sort(np.random.default_rng(seed).choice(len(trajs), sample_cap, replace=False))
        sampled_out = len(trajs) - sample_cap
        trajs = [trajs[i] for i in idx]
    if not trajs:
        raise DataError(f"{path}: no usable trajectories")
    return LoadResult(TrajectoryDataset(trajs, "real"), excluded, sampled_out)


def generate_synthetic(spec: GridSpec, n: int, L_min: int, L_max: int, seed: int) -> TrajectoryDataset:
    """Seeded random walks over king-move neighbours, lengths uniform in bounds."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rps = build_reachability(spec, "neighbors8")
    rng = np.random.default_rng(seed)
    lengths = rng.integers(L_min, L_max + 1, size=n)
    trajs = []
    for L in lengths.tolist():
        t = [int(rng.integers(spec.size))]
        while len(t) < L:
            nbrs = rps.rps[t[-1]]
            if not nbrs:
                break
            t.append(nbrs[int(rng.integers(len(nbrs)))])
        trajs.append(tuple(t))
    return TrajectoryDataset(trajs, "real")


def sample_target_patterns(
    dataset: TrajectoryDataset, k_min: int, k_max: int, per_length: int, seed: int
) -> TargetPatternSet:
    """Draw distinct patterns of each length from the data, scored by length."""
    rng = np.random.default_rng(seed)
    chosen = []
    for k in range(k_min, k_max + 1):
        pool = sorted({t[i : i + k] for t in dataset for i in range(len(t) - k + 1)})
        if len(pool) < per_length:
            raise ConfigError(
                f"only {len(pool)} distinct length-{k} patterns, need {per_length}"
            )
        for i in sorted(rng.choice(len(pool), per_length, replace=False).tolist()):
            chosen.append(pool[i])
    return TargetPatternSet.length_scored(chosen)


def load_patterns(path) -> TargetPatternSet:
    with open(path) as fh:
        data = json.load(fh)
    try:
        pats = tuple((tuple(p["cells"]), float(p["score"])) for p in data["patterns"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed pattern file ({exc})") from None
    return TargetPatternSet(pats, data.get("policy", "custom"))


def save_patterns(path, TP: TargetPatternSet) -> None:
    with open(path, "w") as fh:
        json.dump(
            {"policy": TP.policy,
             "patterns": [{"cells": list(tp), "score": s} for tp, s in TP]},
            fh, indent=1,
        )


# --------------------------------------------------------------------------
# runs


@dataclass
class RunReport:
    conditions: dict[str, MetricReport]
    per_repetition: list[dict[str, dict]]
    wall_clock: float
    config_digest: str
    seed: int
    extras: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "seed": self.seed,
            "wall_clock": self.wall_clock,
            "conditions": {k: dataclasses.asdict(v) for k, v in self.conditions.items()},
            "per_repetition": self.per_repetition,
            "extras": self.extras,
        }

    def write(self, json_path, csv_path=None, cell: dict | None = None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
        if csv_path is not None:
            write_condition_rows(csv_path, [(cell or {}, self)])


def write_condition_rows(csv_path, cells: list[tuple[dict, "RunReport"]]) -> None:
    keys = sorted({k for cell, _ in cells for k in cell})
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*keys, "condition", "avg_score", "avg_pr", "score_gain", "pr_gain",
                    "config_digest", "seed"])
        for cell, rep in cells:
            for name, m in rep.conditions.items():
                w.writerow([*(cell.get(k) for k in keys), name, m.avg_score, m.avg_pr,
                            m.score_gain, m.pr_gain, rep.config_digest, rep.seed])


def repetition_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def make_protocol(cfg: ExperimentConfig, defense: str, max_length: int):
    if cfg.protocol == "direct":
        return DirectTrajConfig(cfg.epsilon, cfg.grid)
    fim = None
    if defense == "fim":
        fim = FimConfig(cfg.fim_freq_threshold, cfg.fim_composition_threshold)
    return GridTraceConfig(
        cfg.epsilon, cfg.grid, max_length,
        quantile=cfg.quantile, length_fraction=cfg.length_fraction,
        normalize=(defense == "normalize"), fim=fim,
    )


def real_dataset(cfg: ExperimentConfig, rps: ReachabilityGraph) -> TrajectoryDataset:
    if cfg.dataset:
        return load_dataset(cfg.dataset, cfg.grid, rps, cfg.sample_cap, cfg.seed).dataset
    return generate_synthetic(cfg.grid, cfg.n_real, cfg.length_min, cfg.length_max, cfg.seed)


def run_experiment(cfg: ExperimentConfig, real: TrajectoryDataset | None = None) -> RunReport:
    """Average every (defense, mode) condition over ``cfg.repetitions`` seeds."""
    t0 = time.perf_counter()
    rps = make_reachability(cfg)
    real = real if real is not None else real_dataset(cfg, rps)
    lengths = [len(t) for t in real]
    L_min, L_max = min(lengths), max(lengths)
    n = len(real)
    m = fake_count(n, cfg.beta)
    fixed_TP = load_patterns(cfg.patterns) if cfg.patterns else None

    per_rep: list[dict[str, dict]] = []
    extras: dict[str, list] = {"fake_total_score": [], "removed": {}}
    for rep, rseed in enumerate(repetition_seeds(cfg.seed, cfg.repetitions)):
        stage = "patterns"
        try:
            TP = fixed_TP or sample_target_patterns(real, cfg.k_min, cfg.k_max, cfg.per_length, rseed)
            stage = "fakes"
            fakes = []
            if m > 0:
                dist = sample_length_distribution(m, L_min, L_max, rseed, cfg.mean_div, cfg.std_div)
                fset = trap_generate(rps, TP, dist, cfg.max_rep, rseed, tie_break=cfg.tie_break)
                fakes = fset.trajectories
                extras["fake_total_score"].append(fset.total_score)
            stage = "protocol"
            cache = HonestCache()
            results: dict[str, dict] = {}
            for defense in cfg.defenses:
                protocol = make_protocol(cfg, defense, L_max)
                fim = FimConfig(cfg.fim_freq_threshold, cfg.fim_composition_threshold) \
                    if (defense == "fim" and cfg.protocol == "direct") else None
                baseline = None
                for mode in ["none", *[x for x in cfg.modes if x != "none"]]:
                    run = assemble_poisoned_run(real, fakes, mode, protocol, rseed,
                                                fim=fim, craft_length=cfg.craft_length, cache=cache)
                    metrics = evaluate(run.output, TP, baseline)
                    if mode == "none":
                        baseline = metrics
                    if mode in cfg.modes:
                        results[f"{defense}/{mode}"] = dataclasses.asdict(metrics)
                    extras["removed"].setdefault(f"{defense}/{mode}", []).append(run.removed)
        except TrapError as exc:
            exc.args = (f"stage {stage} (seed {rseed}): {exc}",)
            raise
        per_rep.append(results)
        log.info("repetition %d done", rep)

    conditions = {}
    for key in per_rep[0]:
        vals = [r[key] for r in per_rep]
        conditions[key] = MetricReport(
            *(float(np.mean([v[f] for v in vals])) for f in
              ("avg_score", "avg_pr", "score_gain", "pr_gain"))
        )
    return RunReport(conditions, per_rep, time.perf_counter() - t0, cfg.digest(), cfg.seed,
                     extras)


def sweep_cells(cfg: ExperimentConfig) -> list[tuple[dict, ExperimentConfig]]:
    if not cfg.sweep:
        return [({}, cfg)]
    keys = sorted(cfg.sweep)
    cells = []
    for values in itertools.product(*(cfg.sweep[k] for k in keys)):
        cell = dict(zip(keys, values))
        sub = cfg.to_dict() | cell | {"sweep": {}}
        cells.append((cell, ExperimentConfig.from_dict(sub)))
    return cells


def _run_cell(args):
    cell, sub = args
    return cell, run_experiment(sub)


def run_sweep(cfg: ExperimentConfig, out_dir, jobs: int = 1) -> list[tuple[dict, RunReport]]:
    """Run every sweep cell; write one JSON per cell plus a combined CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = sweep_cells(cfg)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    for i, (cell, rep) in enumerate(results):
        rep.write(out_dir / f"cell_{i:03d}.json")
    write_condition_rows(out_dir / "summary.csv", results)
    with open(out_dir / "config.yaml", "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    return results

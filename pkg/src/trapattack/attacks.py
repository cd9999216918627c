"""Input and output poisoning attacks against the victim protocols."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Trajectory, TrajectoryDataset
from .defenses import FimConfig, fim_filter_trajectories
from .errors import ConfigError, DataError
from .ldp import OueParams, OueReport, oue_estimate, ones_counts
from .protocols import (
    DirectTrajConfig,
    GridTraceConfig,
    GridTraceReport,
    aggregate_model,
    direct_traj_perturb,
    grid_trace_length_report,
    grid_trace_transitions,
    length_item,
    quantile_from_estimates,
    transition_plan,
)

log = logging.getLogger(__name__)

MODES = ("none", "ipa", "opa")


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "opa"
    beta: float = 0.2
    seed: int = 0
    craft_length: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown attack mode {self.mode!r}")
        if not 0 <= self.beta < 1:
            raise ConfigError("fake ratio beta must lie in [0, 1)")


def fake_count(n: int, beta: float) -> int:
    """Number of fake users giving a fake share of ``beta`` among ``n + m``."""
    return int(round(beta * n / (1 - beta)))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def craft_oue_bits(
    targets: Sequence[int], params: OueParams, rng: np.random.Generator
) -> OueReport:
    """Set the target bits, then pad with uniformly drawn non-target bits.

    The total number of ones is the honest expectation
    ``round_half_up(p + (d - 1) q)``; if the targets alone already reach
    it no padding is added.
    """
    targets = np.unique(np.asarray(targets, dtype=np.int64))
    want = round_half_up(params.expected_ones)
    bits = np.zeros(params.d, dtype=bool)
    bits[targets] = True
    n_pad = want - targets.size
    if n_pad > 0:
        free = np.ones(params.d, dtype=bool)
        free[targets] = False
        pool = np.flatnonzero(free)
        bits[rng.choice(pool, size=min(n_pad, pool.size), replace=False)] = True
    return OueReport(np.packbits(bits), params.d)


def craft_opa_direct(fakes: Sequence[Trajectory]) -> list[Trajectory]:
    """Output poisoning on DirectTraj: submit the fakes as if already perturbed."""
    return [tuple(t) for t in fakes]


def craft_opa_oue(
    traj: Sequence[int],
    cfg: GridTraceConfig,
    L_k: int,
    rng: np.random.Generator,
    craft_length: bool = True,
) -> GridTraceReport:
    """Output poisoning on GridTrace: MGA-style crafted bundle for one fake user."""
    if not cfg.grid.is_valid(traj):
        raise DataError(f"fake trajectory {tuple(traj)} invalid for grid")
    length = craft_length_report(traj, cfg, rng, craft_length)
    begin, intra, terminate = transition_plan(traj, cfg.n_cells, L_k)
    report = GridTraceReport(length, craft_oue_bits([begin], cfg.begin_params(L_k), rng))
    ip = cfg.intra_params(L_k)
    report.intra = [craft_oue_bits([item], ip, rng) for item in intra]
    if terminate is not None:
        report.terminate = craft_oue_bits([terminate], cfg.terminate_params(L_k), rng)
    return report


def craft_length_report(traj, cfg: GridTraceConfig, rng, craft: bool = True) -> OueReport:
    if craft:
        return craft_oue_bits([length_item(len(traj), cfg)], cfg.length_params(), rng)
    return grid_trace_length_report(traj, cfg, rng)


def run_ipa(protocol, fakes: Sequence[Trajectory], rng: np.random.Generator, L_k: int | None = None):
    """Feed fake trajectories through the honest client."""
    if isinstance(protocol, DirectTrajConfig):
        return [direct_traj_perturb(t, protocol, rng) for t in fakes]
    if isinstance(protocol, GridTraceConfig):
        if L_k is None:
            raise ConfigError("GridTrace IPA needs the broadcast L_k")
        out = []
        for t in fakes:
            length = grid_trace_length_report(t, protocol, rng)
            report = grid_trace_transitions(t, protocol, L_k, rng)
            report.length = length
            out.append(report)
        return out
    raise ConfigError(f"unsupported protocol {type(protocol).__name__}")


@dataclass
class PoisonedRun:
    output: TrajectoryDataset
    n_real: int
    n_fake: int
    L_k: int | None = None
    removed: int = 0
    fake_reports: list = field(default_factory=list)


class HonestCache:
    """Memoizes honest reports for one real dataset.

    Honest randomness depends only on (seed, protocol, L_k), so conditions that
    share those inputs see identical honest reports.
    """

    def __init__(self):
        self._store: dict = {}

    def get(self, key, build):
        if key not in self._store:
            self._store[key] = build()
        return self._store[key]


def assemble_poisoned_run(
    real: TrajectoryDataset,
    fakes: Sequence[Trajectory],
    mode: str,
    protocol,
    seed: int,
    *,
    fim: FimConfig | None = None,
    craft_length: bool = True,
    cache: HonestCache | None = None,
) -> PoisonedRun:
    """Run honest users plus fake users through one protocol end to end.

    ``mode`` is ``"none"``, ``"ipa"`` or ``"opa"``. Honest and fake reports
    are merged and shuffled by ``seed`` before the server sees them. For
    DirectTraj ``fim`` filters the collected trajectories; for GridTrace set
    ``protocol.fim`` instead.
    """
    if len(real) == 0:
        raise DataError("real dataset is empty")
    if mode not in MODES:
        raise ConfigError(f"unknown attack mode {mode!r}")
    fakes = [] if mode == "none" else [tuple(t) for t in fakes]
    cache = cache or HonestCache()
    ss = np.random.SeedSequence(seed)
    honest_ss, fake_ss, shuffle_ss, server_ss = ss.spawn(4)

    if isinstance(protocol, DirectTrajConfig):
        if not all(protocol.grid.is_valid(t) for t in fakes):
            raise ConfigError("fake trajectories do not fit the protocol grid")

        def honest():
            rng = np.random.default_rng(honest_ss)
            return [direct_traj_perturb(t, protocol, rng) for t in real]

        reports = list(cache.get(("direct", seed, protocol), honest))
        fake_rng = np.random.default_rng(fake_ss)
        fake_reports = []
        if mode == "ipa":
            fake_reports = run_ipa(protocol, fakes, fake_rng)
        elif mode == "opa":
            fake_reports = craft_opa_direct(fakes)
        reports += fake_reports
        order = np.random.default_rng(shuffle_ss).permutation(len(reports))
        collected = TrajectoryDataset([reports[i] for i in order], "perturbed")
        removed = 0
        if fim is not None:
            filtered = fim_filter_trajectories(collected, fim)
            removed = len(collected) - len(filtered)
            collected = filtered
        return PoisonedRun(collected, len(real), len(fakes), removed=removed,
                           fake_reports=fake_reports)

    if isinstance(protocol, GridTraceConfig):
        if not all(protocol.grid.is_valid(t) for t in fakes):
            raise ConfigError("fake trajectories do not fit the protocol grid")
        (len_ss,) = honest_ss.spawn(1)
        fake_len_ss, fake_trans_ss = fake_ss.spawn(2)

        # round 1: lengths
        def honest_lengths():
            rng = np.random.default_rng(len_ss)
            return [grid_trace_length_report(t, protocol, rng) for t in real]

        length_reports = list(cache.get(("gt-len", seed, protocol.epsilon, protocol.max_length,
                                         protocol.length_fraction), honest_lengths))
        rng = np.random.default_rng(fake_len_ss)
        fake_lengths = []
        if mode == "ipa":
            fake_lengths = [grid_trace_length_report(t, protocol, rng) for t in fakes]
        elif mode == "opa":
            fake_lengths = [craft_length_report(t, protocol, rng, craft_length) for t in fakes]
        length_reports += fake_lengths
        lp = protocol.length_params()
        L_k = quantile_from_estimates(
            oue_estimate(ones_counts(length_reports), len(length_reports), lp),
            protocol.quantile,
            protocol.max_length,
        )

        # round 2: transitions under the broadcast L_k
        def honest_transitions():
            rng = np.random.default_rng(np.random.SeedSequence([seed, 7, L_k]))
            return [grid_trace_transitions(t, protocol, L_k, rng) for t in real]

        bundles = list(cache.get(("gt-trans", seed, protocol.epsilon, protocol.max_length,
                                  protocol.length_fraction, L_k), honest_transitions))
        rng = np.random.default_rng(fake_trans_ss)
        fake_bundles = []
        if mode == "ipa":
            fake_bundles = [grid_trace_transitions(t, protocol, L_k, rng) for t in fakes]
        elif mode == "opa":
            for t in fakes:
                b = craft_opa_oue(t, protocol, L_k, rng, craft_length)
                b.length = None
                fake_bundles.append(b)
        bundles += fake_bundles
        # the exported view pairs each fake's round-1 and round-2 reports
        fake_reports = [
            GridTraceReport(ln, b.begin, b.intra, b.terminate)
            for ln, b in zip(fake_lengths, fake_bundles)
        ]
        order = np.random.default_rng(shuffle_ss).permutation(len(bundles))
        bundles = [bundles[i] for i in order]
        model = aggregate_model(length_reports, bundles, protocol, L_k)
        n_out = len(real) + len(fakes)
        out = TrajectoryDataset(model.sample(n_out, np.random.default_rng(server_ss)), "synthesized")
        return PoisonedRun(out, len(real), len(fakes), L_k=L_k,
                           removed=sum(model.removed.values()), fake_reports=fake_reports)

    raise ConfigError(f"unsupported protocol {type(protocol).__name__}")

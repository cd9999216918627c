"""Attack-effectiveness metrics: average trajectory score and target percentile rank."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .core import PatternScorer, TargetPatternSet, Trajectory, TrajectoryDataset, count_pattern
from .errors import ConfigError, DataError


@dataclass
class MetricReport:
    avg_score: float
    avg_pr: float
    score_gain: float = 0.0
    pr_gain: float = 0.0

    def to_json(self, config_digest: str = "", seed: int | None = None) -> str:
        return json.dumps({**asdict(self), "config_digest": config_digest, "seed": seed})


def _trajs(dataset) -> list[Trajectory]:
    trajs = dataset.trajectories if isinstance(dataset, TrajectoryDataset) else list(dataset)
    return [tuple(t) for t in trajs]


def avg_score(dataset, TP: TargetPatternSet) -> float:
    trajs = _trajs(dataset)
    if not trajs:
        raise DataError("cannot score an empty dataset")
    if len(TP) == 0:
        return 0.0
    scorer = PatternScorer(TP)
    return sum(scorer.score(t) for t in trajs) / len(trajs)


def pattern_counts(trajs: Iterable[Trajectory], k: int) -> Counter:
    """Occurrence counts of every length-``k`` contiguous pattern."""
    counts: Counter = Counter()
    for t in trajs:
        for i in range(len(t) - k + 1):
            counts[t[i : i + k]] += 1
    return counts


def pr_from_counts(tp: Trajectory, counts: Counter, strict: bool = False) -> float:
    """Percentile rank of ``tp`` among observed same-length patterns plus itself."""
    own = counts.get(tp, 0)
    universe = len(counts) + (tp not in counts)
    if strict:
        below = sum(1 for c in counts.values() if c < own)
    else:
        below = sum(1 for c in counts.values() if c <= own) + (tp not in counts)
    return 100.0 * below / universe


def get_pr(tp: Sequence[int], dataset, strict: bool = False) -> float:
    """Percentile rank of the target's total count among same-length patterns.

    The universe is every pattern of length ``len(tp)`` seen in ``dataset``,
    plus ``tp`` itself. Ties count toward the rank unless ``strict``.
    """
    tp = tuple(tp)
    if not tp:
        raise ConfigError("pattern must be non-empty")
    return pr_from_counts(tp, pattern_counts(_trajs(dataset), len(tp)), strict)


def avg_pr(dataset, TP: TargetPatternSet, strict: bool = False) -> float:
    if len(TP) == 0:
        raise ConfigError("target pattern set is empty")
    trajs = _trajs(dataset)
    by_len = {k: pattern_counts(trajs, k) for k in {len(tp) for tp, _ in TP}}
    return sum(pr_from_counts(tp, by_len[len(tp)], strict) for tp, _ in TP) / len(TP)


def evaluate(dataset, TP: TargetPatternSet, baseline: MetricReport | None = None) -> MetricReport:
    s = avg_score(dataset, TP)
    pr = avg_pr(dataset, TP)
    if baseline is None:
        return MetricReport(s, pr)
    return MetricReport(s, pr, s - baseline.avg_score, pr - baseline.avg_pr)


__all__ = [
    "MetricReport",
    "avg_score",
    "avg_pr",
    "get_pr",
    "evaluate",
    "pattern_counts",
    "count_pattern",
]

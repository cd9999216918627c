"""Server-side countermeasures: frequent-item filtering and normalization."""

from __future__ import annotations

import logging
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import TrajectoryDataset
from .errors import ConfigError
from .ldp import OueReport, ones_counts

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FimConfig:
    """Thresholds for the frequent-item filter.

    ``threshold_mode="percentile"`` marks an item frequent when its count is
    strictly above the ``freq_threshold`` percentile of all item counts;
    ``"max_ratio"`` marks it frequent when its count is strictly above
    ``freq_threshold`` times the largest count. A record is dropped when more
    than ``composition_threshold`` of its items are frequent. With
    ``until_stable`` the filter is re-applied until nothing more is removed.
    """

    freq_threshold: float = 0.9
    composition_threshold: float = 0.9
    threshold_mode: str = "percentile"
    until_stable: bool = True

    def __post_init__(self):
        for name in ("freq_threshold", "composition_threshold"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.threshold_mode not in ("percentile", "max_ratio"):
            raise ConfigError(f"unknown threshold_mode {self.threshold_mode!r}")


def frequent_mask(counts: np.ndarray, cfg: FimConfig) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    if counts.size == 0:
        return np.zeros(0, dtype=bool)
    if cfg.threshold_mode == "percentile":
        cut = np.percentile(counts, 100 * cfg.freq_threshold)
    else:
        cut = cfg.freq_threshold * counts.max()
    return counts > cut


def _fim_trajectory_pass(trajs, cfg):
    cell_counts = Counter(c for t in trajs for c in t)
    if not cell_counts:
        return trajs
    cells = np.fromiter(cell_counts, dtype=np.int64)
    mask = frequent_mask(np.fromiter(cell_counts.values(), dtype=float), cfg)
    frequent = set(cells[mask].tolist())
    if not frequent:
        return trajs
    return [
        t for t in trajs if sum(c in frequent for c in t) / len(t) <= cfg.composition_threshold
    ]


def fim_filter_trajectories(
    dataset: TrajectoryDataset, cfg: FimConfig = FimConfig()
) -> TrajectoryDataset:
    """Drop trajectories made up mostly of suspiciously frequent cells.

    Frequency is measured over the cells observed in ``dataset``; each
    occurrence within a trajectory counts.
    """
    trajs = list(dataset.trajectories)
    while True:
        kept = _fim_trajectory_pass(trajs, cfg)
        if len(kept) == len(trajs) or not cfg.until_stable:
            trajs = kept
            break
        trajs = kept
    log.debug("FIM kept %d of %d trajectories", len(trajs), len(dataset))
    return TrajectoryDataset(trajs, dataset.provenance)


def _fim_report_pass(reports, cfg):
    if not reports:
        return reports
    frequent = frequent_mask(ones_counts(reports), cfg)
    if not frequent.any():
        return reports
    packed_freq = np.packbits(frequent)
    kept = []
    for r in reports:
        total = r.ones
        if total == 0:
            kept.append(r)
            continue
        hits = int(np.unpackbits(r.packed & packed_freq, count=r.d).sum())
        if hits / total <= cfg.composition_threshold:
            kept.append(r)
    return kept


def fim_filter_reports(
    reports: Sequence[OueReport], cfg: FimConfig = FimConfig()
) -> list[OueReport]:
    """Drop OUE reports whose 1-bits fall mostly on frequent indices.

    Reports with no 1-bits are always kept.
    """
    reports = list(reports)
    if reports and any(r.d != reports[0].d for r in reports):
        raise ConfigError("reports have mixed domain sizes")
    while True:
        kept = _fim_report_pass(reports, cfg)
        if len(kept) == len(reports) or not cfg.until_stable:
            return kept
        reports = kept


def normalize_distribution(estimates) -> np.ndarray:
    """Shift by the minimum and rescale to sum to one.

    A constant vector has nothing left after the shift; it maps to the
    uniform distribution with a warning.
    """
    v = np.asarray(estimates, dtype=float)
    if v.size == 0:
        raise ConfigError("cannot normalize an empty vector")
    shifted = v - v.min()
    total = shifted.sum()
    if total <= 0:
        warnings.warn("degenerate estimates; returning uniform distribution", RuntimeWarning)
        return np.full(v.size, 1.0 / v.size)
    return shifted / total


def clamp_distribution(estimates) -> np.ndarray | None:
    """Zero out negatives and rescale. Returns None when nothing positive is left."""
    v = np.clip(np.asarray(estimates, dtype=float), 0.0, None)
    total = v.sum()
    if total <= 0:
        return None
    return v / total

"""Local perturbation primitives: OUE, k-ary randomized response, exponential mechanism.

All samplers take an explicit ``numpy.random.Generator``; nothing here
touches global random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class OueParams:
    d: int
    epsilon: float

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("OUE domain size must be positive")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")

    @property
    def p(self) -> float:
        return 0.5

    @property
    def q(self) -> float:
        return 1.0 / (math.exp(self.epsilon) + 1.0)

    @property
    def expected_ones(self) -> float:
        return self.p + (self.d - 1) * self.q


class OueReport:
    """A length-``d`` bit vector, stored bit-packed."""

    __slots__ = ("packed", "d")

    def __init__(self, packed: np.ndarray, d: int):
        self.packed = packed
        self.d = d

    @classmethod
    def from_bits(cls, bits) -> "OueReport":
        bits = np.asarray(bits, dtype=bool)
        return cls(np.packbits(bits), bits.size)

    @classmethod
    def from_indices(cls, indices, d: int) -> "OueReport":
        bits = np.zeros(d, dtype=bool)
        bits[np.asarray(indices, dtype=np.int64)] = True
        return cls.from_bits(bits)

    @property
    def bits(self) -> np.ndarray:
        return np.unpackbits(self.packed, count=self.d).astype(bool)

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    @property
    def ones(self) -> int:
        return int(np.unpackbits(self.packed, count=self.d).sum())

    def __len__(self):
        return self.d

    def __eq__(self, other):
        return (
            isinstance(other, OueReport)
            and self.d == other.d
            and np.array_equal(self.packed, other.packed)
        )

    def __repr__(self):
        return f"OueReport(d={self.d}, ones={self.ones})"


def oue_perturb(item: int, params: OueParams, rng: np.random.Generator) -> OueReport:
    if not 0 <= item < params.d:
        raise ConfigError(f"item {item} outside [0, {params.d})")
    bits = rng.random(params.d, dtype=np.float32) < params.q
    bits[item] = rng.random() < params.p
    return OueReport(np.packbits(bits), params.d)


def ones_counts(reports: Sequence[OueReport], chunk: int = 512) -> np.ndarray:
    """Per-index count of 1-bits over ``reports``."""
    if not reports:
        raise ConfigError("no reports to aggregate")
    d = reports[0].d
    if any(r.d != d for r in reports):
        raise ConfigError("reports have mixed domain sizes")
    total = np.zeros(d, dtype=np.int64)
    for start in range(0, len(reports), chunk):
        block = np.stack([r.packed for r in reports[start : start + chunk]])
        total += np.unpackbits(block, axis=1, count=d).sum(axis=0, dtype=np.int64)
    return total


def oue_estimate(ones: np.ndarray, n: int, params: OueParams) -> np.ndarray:
    """Unbiased count estimate from per-index ones counts over ``n`` reports."""
    return (np.asarray(ones, dtype=float) - n * params.q) / (params.p - params.q)


def oue_aggregate(reports: Sequence[OueReport], params: OueParams) -> np.ndarray:
    """Unbiased per-index count estimates. Entries may be negative."""
    return oue_estimate(ones_counts(reports), len(reports), params)


def oue_report_probability(bits: Sequence[int], item: int, params: OueParams) -> float:
    """Exact probability that ``item`` is perturbed into ``bits``."""
    prob = 1.0
    for j, b in enumerate(bits):
        on = params.p if j == item else params.q
        prob *= on if b else 1.0 - on
    return prob


def krr_keep_probability(d: int, epsilon: float) -> float:
    return math.exp(epsilon) / (math.exp(epsilon) + d - 1)


def krr_perturb(item: int, d: int, epsilon: float, rng: np.random.Generator) -> int:
    if d < 2:
        raise ConfigError("k-RR needs a domain of at least 2 items")
    if not 0 <= item < d:
        raise ConfigError(f"item {item} outside [0, {d})")
    if rng.random() < krr_keep_probability(d, epsilon):
        return item
    other = int(rng.integers(d - 1))
    return other if other < item else other + 1


def krr_probability(out: int, item: int, d: int, epsilon: float) -> float:
    p = krr_keep_probability(d, epsilon)
    return p if out == item else (1.0 - p) / (d - 1)


@dataclass(frozen=True)
class EmCandidateSet:
    """Candidates with utilities; utilities are taken to have sensitivity 1."""

    candidates: Sequence
    utilities: np.ndarray
    epsilon: float

    def __post_init__(self):
        u = np.asarray(self.utilities, dtype=float)
        if len(self.candidates) == 0 or u.shape != (len(self.candidates),):
            raise ConfigError("need one utility per candidate and at least one candidate")
        if not np.all(np.isfinite(u)):
            raise ConfigError("utilities must be finite")
        object.__setattr__(self, "utilities", u)

    def probabilities(self) -> np.ndarray:
        return em_probabilities(self.utilities, self.epsilon)


def em_probabilities(utilities: np.ndarray, epsilon: float) -> np.ndarray:
    logits = 0.5 * epsilon * np.asarray(utilities, dtype=float)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def em_sample(cset: EmCandidateSet, rng: np.random.Generator):
    if len(cset.candidates) == 1:
        return cset.candidates[0]
    probs = cset.probabilities()
    idx = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
    return cset.candidates[min(idx, len(probs) - 1)]


class BudgetLedger:
    """Tracks privacy budget spent by one client and refuses to overspend."""

    def __init__(self, total: float):
        self.total = total
        self.spent = 0.0
        self.entries: list[tuple[str, float]] = []

    def spend(self, label: str, eps: float) -> float:
        if eps <= 0:
            raise ConfigError(f"non-positive budget for {label}")
        if self.spent + eps > self.total * (1 + 1e-9):
            raise AssertionError(
                f"budget exceeded: {self.spent + eps:.6g} > {self.total:.6g} at {label}"
            )
        self.spent += eps
        self.entries.append((label, eps))
        return eps

"""Fake-trajectory generation: prefix-suffix heuristic and brute-force oracle.

The heuristic grows candidate trajectories one cell at a time. After every
extension round the highest-scoring candidates of the current length are
collected (Pick-High), then candidates that can no longer reach a top-scoring
extension are pruned (Delete). Candidates are grouped by *prefix category*:
the longest proper prefix of some target pattern that is a suffix of the
candidate. That category says which target patterns the candidate could
complete next.
"""

from __future__ import annotations

import heapq
import logging
import math
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import PatternScorer, ReachabilityGraph, TargetPatternSet, Trajectory
from .errors import CapacityError, ConfigError, UnderfillError

log = logging.getLogger(__name__)

DEFAULT_ENUMERATION_CAP = 5_000_000


@dataclass(frozen=True)
class LengthDistribution:
    counts: dict[int, int]

    def __post_init__(self):
        if any(v < 0 for v in self.counts.values()):
            raise ConfigError("length counts must be non-negative")

    @property
    def m(self) -> int:
        return sum(self.counts.values())

    @property
    def L_min(self) -> int:
        return min(self.counts)

    @property
    def L_max(self) -> int:
        return max(self.counts)

    def get(self, length: int) -> int:
        return self.counts.get(length, 0)

    def nonzero(self) -> dict[int, int]:
        return {k: v for k, v in sorted(self.counts.items()) if v > 0}


def sample_length_distribution(
    m: int, L_min: int, L_max: int, seed: int, mean_div: float = 2.0, std_div: float = 5.0
) -> LengthDistribution:
    """Tally ``m`` fake lengths drawn from a clamped, rounded Gaussian.

    Mean is ``(L_min + L_max) / mean_div`` and standard deviation
    ``(L_max - L_min) / std_div``. Rounding is half-to-even (numpy's rint).
    """
    if L_min < 1 or L_min > L_max:
        raise ConfigError(f"need 1 <= L_min <= L_max, got {L_min}, {L_max}")
    if m < 0:
        raise ConfigError("m must be non-negative")
    if m == 0:
        return LengthDistribution({})
    rng = np.random.default_rng(seed)
    draws = rng.normal((L_min + L_max) / mean_div, (L_max - L_min) / std_div, size=m)
    lengths = np.clip(np.rint(draws), L_min, L_max).astype(int)
    tally = Counter(lengths.tolist())
    return LengthDistribution({i: tally.get(i, 0) for i in range(L_min, L_max + 1)})


class PrefixSet:
    """All proper prefixes of the target patterns, including ``()``."""

    def __init__(self, prefixes: Iterable[Trajectory]):
        self.prefixes = frozenset(tuple(p) for p in prefixes) | {()}
        self.max_len = max(len(p) for p in self.prefixes)
        # longest first; lexicographic among equal lengths
        self.ordered = sorted(self.prefixes, key=lambda p: (-len(p), p))
        self._ancestors = {
            u: [v for v in self.ordered if len(v) > len(u) and v[len(v) - len(u) :] == u]
            for u in self.ordered
        }

    def __contains__(self, item):
        return item in self.prefixes

    def __iter__(self):
        return iter(self.ordered)

    def __len__(self):
        return len(self.prefixes)

    def __eq__(self, other):
        if isinstance(other, PrefixSet):
            return self.prefixes == other.prefixes
        return self.prefixes == frozenset(tuple(p) for p in other)

    def __repr__(self):
        return f"PrefixSet({sorted(self.prefixes, key=lambda p: (len(p), p))})"

    def ancestors(self, u: Trajectory) -> list[Trajectory]:
        """Categories that have ``u`` as a proper suffix."""
        return self._ancestors[u]

    def category(self, traj: Sequence[int]) -> Trajectory:
        traj = tuple(traj)
        for k in range(min(len(traj), self.max_len), 0, -1):
            suffix = traj[-k:]
            if suffix in self.prefixes:
                return suffix
        return ()


def build_prefix_set(TP: TargetPatternSet) -> PrefixSet:
    if len(TP) == 0:
        raise ConfigError("target pattern set is empty")
    return PrefixSet(tp[:k] for tp, _ in TP for k in range(len(tp)))


def prefix_category(traj: Sequence[int], PREF: PrefixSet) -> Trajectory:
    return PREF.category(traj)


def lex_key(score: float, traj: Trajectory):
    return (-score, traj)


@dataclass
class PickResult:
    selected: list[Trajectory]
    underfilled: bool


def pick_high(
    omega: Iterable[Trajectory],
    m_L: int,
    max_rep: int,
    SC: dict[Trajectory, float],
    key: Callable | None = None,
) -> PickResult:
    """Take candidates in score-descending order, each up to ``max_rep`` times."""
    if max_rep < 1:
        raise ConfigError("max_rep must be >= 1")
    key = key or (lambda t: lex_key(SC[t], t))
    ranked = sorted(omega, key=key)
    selected: list[Trajectory] = []
    for traj in ranked:
        if len(selected) >= m_L:
            break
        selected.extend([traj] * min(max_rep, m_L - len(selected)))
    return PickResult(selected, len(selected) < m_L)


def index_by_prefix(
    omega: Iterable[Trajectory], PREF: PrefixSet, key: Callable
) -> dict[Trajectory, list[Trajectory]]:
    """Bucket candidates by prefix category, each bucket sorted by ``key``."""
    buckets: dict[Trajectory, list[Trajectory]] = {u: [] for u in PREF}
    for traj in omega:
        buckets[PREF.category(traj)].append(traj)
    for bucket in buckets.values():
        bucket.sort(key=key)
    return buckets


def delete_hopeless(
    omega: Iterable[Trajectory],
    m_max: int,
    max_rep: int,
    rps: ReachabilityGraph,
    SC: dict[Trajectory, float],
    PREF: PrefixSet,
    M: dict[Trajectory, list[Trajectory]],
) -> list[Trajectory]:
    """Prune candidates that cannot enter a top-scoring extension set.

    Categories are visited longest first. A category with ancestors keeps a
    candidate that beats every ancestor bucket's best score outright;
    otherwise it keeps the candidate only while the extension capacity
    (successor count times ``max_rep``) of already-kept, not-lower-scoring
    ancestor candidates is at most ``m_max``. A category without ancestors
    keeps candidates in score order while its own accumulated capacity is
    at most ``m_max``.

    Returns the surviving candidates in the order of ``omega``.
    """
    selected: dict[Trajectory, list[Trajectory]] = {u: [] for u in PREF}

    def capacity(traj):
        return rps.out_degree(traj[-1]) * max_rep

    for u in PREF:
        bucket = M.get(u)
        if not bucket:
            continue
        anc = PREF.ancestors(u)
        if anc:
            tops = [SC[M[a][0]] for a in anc if M.get(a)]
            top = max(tops) if tops else -math.inf
            pool = sorted(((SC[t], capacity(t)) for a in anc for t in selected[a]), reverse=True)
            neg_scores = [-s for s, _ in pool]
            cum = [0, *accumulate(c for _, c in pool)]
            for traj in bucket:
                s = SC[traj]
                if s > top:
                    selected[u].append(traj)
                    continue
                acc = cum[bisect_right(neg_scores, -s)]
                if acc <= m_max:
                    selected[u].append(traj)
        else:
            acc = 0
            for traj in bucket:
                if acc > m_max:
                    break
                selected[u].append(traj)
                acc += capacity(traj)

    kept = {t for sel in selected.values() for t in sel}
    return [t for t in omega if t in kept]


@dataclass
class RoundTrace:
    length: int
    buckets: dict[Trajectory, list[Trajectory]]
    scores: dict[Trajectory, float]
    picked: list[Trajectory]
    kept: list[Trajectory] | None
    m_max: int | None

    @property
    def removed(self) -> set[Trajectory]:
        if self.kept is None:
            return set()
        alive = set(self.kept)
        return {t for b in self.buckets.values() for t in b if t not in alive}


@dataclass
class FakeTrajectorySet:
    trajectories: list[Trajectory]
    total_score: float
    max_rep: int
    underfilled: dict[int, int] = field(default_factory=dict)
    trace: list[RoundTrace] | None = None
    candidate_counts: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def by_length(self) -> dict[int, list[Trajectory]]:
        out: dict[int, list[Trajectory]] = {}
        for t in self.trajectories:
            out.setdefault(len(t), []).append(t)
        return out

    def length_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(len(t) for t in self.trajectories).items()))

    def violations(
        self, dist: LengthDistribution, rps: ReachabilityGraph
    ) -> list[str]:
        """Constraint violations: per-length counts, repetition cap, reachability."""
        out = []
        counts = self.length_counts()
        for i in sorted(set(counts) | set(dist.nonzero())):
            if counts.get(i, 0) != dist.get(i):
                out.append(f"length {i}: {counts.get(i, 0)} trajectories, expected {dist.get(i)}")
        for traj, c in Counter(self.trajectories).items():
            if c > self.max_rep:
                out.append(f"{traj} repeated {c} times > max_rep {self.max_rep}")
        for traj in set(self.trajectories):
            if not rps.is_valid(traj):
                out.append(f"{traj} violates reachability")
        return out


def _validate_inputs(rps, TP, dist, max_rep):
    if max_rep < 1:
        raise ConfigError("max_rep must be >= 1")
    if dist.m == 0 or not dist.counts:
        raise ConfigError("length distribution is empty")
    missing = TP.cells() - set(rps.rps)
    if missing:
        raise ConfigError(f"target pattern cells {sorted(missing)} not in reachability domain")
    bad = [tp for tp, _ in TP if not rps.is_valid(tp)]
    if bad:
        raise ConfigError(f"target patterns violate reachability: {bad[:5]}")


def trap_generate(
    rps: ReachabilityGraph,
    TP: TargetPatternSet,
    dist: LengthDistribution,
    max_rep: int,
    seed: int = 0,
    *,
    tie_break: str = "lex",
    allow_underfill: bool = False,
    keep_trace: bool = False,
) -> FakeTrajectorySet:
    """Generate a fake trajectory set with the prefix-suffix heuristic.

    Args:
        rps: reachable successors for every cell of the point domain.
        TP: target patterns; each must itself be reachability-valid.
        dist: required number of fake trajectories per length.
        max_rep: maximum multiplicity of any trajectory in the output.
        seed: seeds the tie-break shuffle when ``tie_break="shuffle"``.
        tie_break: ``"lex"`` orders equal scores by ascending cell ids;
            ``"shuffle"`` orders them by a seeded random key.
        allow_underfill: warn and continue instead of raising
            :class:`UnderfillError` when a length cannot be filled.
        keep_trace: record per-round buckets, picks and survivors.
    """
    _validate_inputs(rps, TP, dist, max_rep)
    PREF = build_prefix_set(TP)
    scorer = PatternScorer(TP)
    need = dist.counts
    L_max = max(i for i, v in need.items() if v > 0)

    if tie_break == "lex":
        def key(t):
            return (-SC[t], t)
    elif tie_break == "shuffle":
        rng = np.random.default_rng(seed)
        rank: dict[Trajectory, float] = {}

        def key(t):
            return (-SC[t], rank[t])
    else:
        raise ConfigError(f"unknown tie_break {tie_break!r}")

    out: list[Trajectory] = []
    underfilled: dict[int, int] = {}
    trace: list[RoundTrace] | None = [] if keep_trace else None
    candidate_counts: list[int] = []
    total = 0.0

    SC: dict[Trajectory, float] = {}
    kept: list[Trajectory] = []
    for i in range(1, L_max + 1):
        prev_sc = SC
        SC = {}
        if i == 1:
            omega = [(c,) for c in rps.domain]
            for t in omega:
                SC[t] = scorer.suffix_gain(t)
        else:
            omega = []
            for parent in kept:
                base = prev_sc[parent]
                for nxt in rps.rps[parent[-1]]:
                    child = parent + (nxt,)
                    omega.append(child)
                    SC[child] = base + scorer.suffix_gain(child)
        if tie_break == "shuffle":
            draws = rng.random(len(omega))
            rank = dict(zip(omega, draws.tolist()))

        M = index_by_prefix(omega, PREF, key)

        m_L = need.get(i, 0)
        picked: list[Trajectory] = []
        if m_L > 0:
            res = pick_high(omega, m_L, max_rep, SC, key=key)
            picked = res.selected
            if res.underfilled:
                if not allow_underfill:
                    raise UnderfillError(i, m_L, len(picked))
                log.warning("length %d under-filled: %d of %d", i, len(picked), m_L)
                underfilled[i] = m_L - len(picked)
            out.extend(picked)
            total += sum(SC[t] for t in picked)

        m_max = max((need.get(j, 0) for j in range(i + 1, L_max + 1)), default=0)
        if i < L_max:
            kept = delete_hopeless(omega, m_max, max_rep, rps, SC, PREF, M)
            candidate_counts.append(len(kept))
        else:
            kept = None
        if trace is not None:
            trace.append(RoundTrace(i, M, dict(SC), picked, kept, m_max if i < L_max else None))
        if i < L_max and not kept:
            for j in range(i + 1, L_max + 1):
                if need.get(j, 0) > 0:
                    if not allow_underfill:
                        raise UnderfillError(j, need[j], 0)
                    underfilled[j] = need[j]
            break

    return FakeTrajectorySet(out, total, max_rep, underfilled, trace, candidate_counts)


def count_walks(rps: ReachabilityGraph, length: int) -> int:
    """Number of reachability-valid trajectories with ``length`` cells."""
    if length < 1:
        return 0
    ways = {c: 1 for c in rps.rps}
    for _ in range(length - 1):
        ways = {c: sum(ways.get(n, 0) for n in nbrs) for c, nbrs in rps.rps.items()}
    return sum(ways.values())


def iter_walks(rps: ReachabilityGraph, length: int):
    stack = [(c,) for c in reversed(rps.domain)]
    while stack:
        t = stack.pop()
        if len(t) == length:
            yield t
            continue
        for n in reversed(rps.rps[t[-1]]):
            stack.append(t + (n,))


def brute_force_generate(
    rps: ReachabilityGraph,
    TP: TargetPatternSet,
    dist: LengthDistribution,
    max_rep: int,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> FakeTrajectorySet:
    """Exhaustive oracle: per length, rank every valid trajectory by score.

    Raises :class:`CapacityError` before enumerating any length whose walk
    count exceeds ``cap``.
    """
    _validate_inputs(rps, TP, dist, max_rep)
    out: list[Trajectory] = []
    total = 0.0
    for i, m_L in dist.nonzero().items():
        n_walks = count_walks(rps, i)
        if n_walks > cap:
            raise CapacityError(
                f"length {i}: {n_walks} trajectories exceed enumeration cap {cap}"
            )
        n_distinct = m_L // max_rep + 1
        scored = ((sum(s * _count(tp, t) for tp, s in TP), t) for t in iter_walks(rps, i))
        top = heapq.nsmallest(n_distinct, scored, key=lambda st: (-st[0], st[1]))
        chosen: list[Trajectory] = []
        for j in range(min(n_distinct, len(top))):
            for _ in range(max_rep):
                if len(chosen) < m_L:
                    chosen.append(top[j][1])
                    total += top[j][0]
                else:
                    break
        if len(chosen) < m_L:
            raise UnderfillError(i, m_L, len(chosen))
        out.extend(chosen)
    return FakeTrajectorySet(out, total, max_rep)


def _count(tp, traj):
    # Direct subarray matching, kept separate from the heuristic's scorer.
    k = len(tp)
    num = 0
    for i in range(len(traj) - k + 1):
        match = 1
        for j in range(k):
            if traj[i + j] != tp[j]:
                match = 0
                break
        num += match
    return num

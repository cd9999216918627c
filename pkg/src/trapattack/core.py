"""Trajectory domain types, reachability, pattern counting and scoring.

Trajectories are plain tuples of integer cell ids. Cells are numbered
row-major (``id = row * cols + col``) with row 0 at the minimum latitude.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, DataError

Trajectory = tuple[int, ...]


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    min_lat: float = 0.0
    max_lat: float = 1.0
    min_lon: float = 0.0
    max_lon: float = 1.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if not (self.min_lat < self.max_lat and self.min_lon < self.max_lon):
            raise ConfigError("degenerate bounding box")

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def cell_id(self, row: int, col: int) -> int:
        return row * self.cols + col

    def row_col(self, cell: int) -> tuple[int, int]:
        return divmod(cell, self.cols)

    def contains(self, lat: float, lon: float) -> bool:
        return self.min_lat <= lat <= self.max_lat and self.min_lon <= lon <= self.max_lon

    def cell_of(self, lat: float, lon: float) -> int:
        if not self.contains(lat, lon):
            raise DataError(f"point ({lat}, {lon}) outside bounding box")
        fr = (lat - self.min_lat) / (self.max_lat - self.min_lat)
        fc = (lon - self.min_lon) / (self.max_lon - self.min_lon)
        row = min(int(fr * self.rows), self.rows - 1)
        col = min(int(fc * self.cols), self.cols - 1)
        return self.cell_id(row, col)

    def center(self, cell: int) -> tuple[float, float]:
        row, col = self.row_col(cell)
        lat = self.min_lat + (row + 0.5) * (self.max_lat - self.min_lat) / self.rows
        lon = self.min_lon + (col + 0.5) * (self.max_lon - self.min_lon) / self.cols
        return lat, lon

    def chebyshev(self, a: int, b: int) -> int:
        ra, ca = self.row_col(a)
        rb, cb = self.row_col(b)
        return max(abs(ra - rb), abs(ca - cb))

    def is_valid(self, traj: Sequence[int]) -> bool:
        return len(traj) >= 1 and all(0 <= c < self.size for c in traj)


@dataclass(frozen=True)
class TargetPatternSet:
    """Attacker's target patterns with their importance scores.

    With ``policy="length"`` every pattern's score must be non-decreasing in
    pattern length; ``policy="custom"`` lifts that check.
    """

    patterns: tuple[tuple[Trajectory, float], ...]
    policy: str = "custom"
    _scores: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        scores = {}
        for tp, s in self.patterns:
            if len(tp) < 1:
                raise ConfigError("target patterns must be non-empty")
            if tp in scores:
                raise ConfigError(f"duplicate target pattern {tp}")
            if s < 0:
                raise ConfigError(f"negative score for {tp}")
            scores[tp] = s
        if self.policy == "length":
            by_len = sorted((len(tp), s) for tp, s in self.patterns)
            for (l1, s1), (l2, s2) in zip(by_len, by_len[1:]):
                if l2 > l1 and s2 < s1:
                    raise ConfigError("scores must be non-decreasing in pattern length")
        object.__setattr__(self, "_scores", scores)

    @classmethod
    def from_mapping(cls, mapping: Mapping[Sequence[int], float], policy: str = "custom"):
        return cls(tuple((tuple(tp), float(s)) for tp, s in mapping.items()), policy)

    @classmethod
    def length_scored(cls, patterns: Iterable[Sequence[int]]):
        """Score every pattern by its length."""
        return cls(tuple((tuple(tp), float(len(tp))) for tp in patterns), "length")

    @property
    def scores(self) -> dict[Trajectory, float]:
        return self._scores

    @property
    def k_min(self) -> int:
        return min((len(tp) for tp, _ in self.patterns), default=0)

    @property
    def k_max(self) -> int:
        return max((len(tp) for tp, _ in self.patterns), default=0)

    def __len__(self):
        return len(self.patterns)

    def __iter__(self):
        return iter(self.patterns)

    def cells(self) -> set[int]:
        return {c for tp, _ in self.patterns for c in tp}


@dataclass(frozen=True)
class ReachabilityGraph:
    rps: Mapping[int, tuple[int, ...]]

    @property
    def domain(self) -> list[int]:
        return sorted(self.rps)

    def reachable(self, a: int, b: int) -> bool:
        return b in self._sets[a] if a in self._sets else False

    @property
    def _sets(self) -> dict[int, frozenset]:
        cached = self.__dict__.get("_set_cache")
        if cached is None:
            cached = {c: frozenset(nbrs) for c, nbrs in self.rps.items()}
            object.__setattr__(self, "_set_cache", cached)
        return cached

    def out_degree(self, cell: int) -> int:
        return len(self.rps.get(cell, ()))

    def is_valid(self, traj: Sequence[int]) -> bool:
        if len(traj) == 0 or traj[0] not in self.rps:
            return False
        return all(self.reachable(a, b) for a, b in zip(traj, traj[1:]))


@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory]
    provenance: str = "real"

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)


def count_pattern(tp: Sequence[int], traj: Sequence[int]) -> int:
    """Number of contiguous subarrays of ``traj`` equal to ``tp``."""
    tp = tuple(tp)
    traj = tuple(traj)
    k = len(tp)
    return sum(1 for i in range(len(traj) - k + 1) if traj[i : i + k] == tp)


def traj_score(traj: Sequence[int], TP: TargetPatternSet) -> float:
    return sum(s * count_pattern(tp, traj) for tp, s in TP.patterns)


class PatternScorer:
    """Window-scan scorer equivalent to :func:`traj_score`.

    One dict lookup per (position, distinct pattern length) instead of a
    full scan per pattern.
    """

    def __init__(self, TP: TargetPatternSet):
        self.scores = dict(TP.scores)
        self.lengths = sorted({len(tp) for tp in self.scores})

    def score(self, traj: Sequence[int]) -> float:
        traj = tuple(traj)
        get = self.scores.get
        total = 0.0
        n = len(traj)
        for k in self.lengths:
            for i in range(n - k + 1):
                s = get(traj[i : i + k])
                if s:
                    total += s
        return total

    def suffix_gain(self, traj: Trajectory) -> float:
        """Score of the patterns ending exactly at the last cell of ``traj``."""
        get = self.scores.get
        n = len(traj)
        total = 0.0
        for k in self.lengths:
            if k > n:
                break
            s = get(traj[n - k :])
            if s:
                total += s
        return total


def build_reachability(
    spec: GridSpec,
    mode: str = "neighbors8",
    self_loops: bool = False,
    *,
    speed_kmh: float | None = None,
    interval_h: float | None = None,
    edges: Mapping[int, Iterable[int]] | None = None,
) -> ReachabilityGraph:
    """Build the reachable-next-cell map for every cell of ``spec``.

    Modes:
        neighbors8: the (up to) 8 king-move neighbours.
        speed_limit: cells whose centre-to-centre haversine distance divided
            by ``speed_kmh`` is at most ``interval_h``.
        explicit: ``edges`` verbatim; cells missing from ``edges`` get no
            successors (besides themselves with ``self_loops``).
    """
    n = spec.size
    rps: dict[int, tuple[int, ...]] = {}
    if mode == "neighbors8":
        for cell in range(n):
            r, c = spec.row_col(cell)
            out = []
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == 0 and dc == 0 and not self_loops:
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < spec.rows and 0 <= cc < spec.cols:
                        out.append(spec.cell_id(rr, cc))
            rps[cell] = tuple(out)
    elif mode == "speed_limit":
        if not speed_kmh or not interval_h or speed_kmh <= 0 or interval_h <= 0:
            raise ConfigError("speed_limit mode needs positive speed_kmh and interval_h")
        limit = speed_kmh * interval_h
        centers = [spec.center(c) for c in range(n)]
        for a in range(n):
            out = []
            for b in range(n):
                if a == b:
                    if self_loops:
                        out.append(b)
                    continue
                if haversine_km(*centers[a], *centers[b]) <= limit:
                    out.append(b)
            rps[a] = tuple(out)
    elif mode == "explicit":
        edges = edges or {}
        for a, nbrs in edges.items():
            for x in (a, *nbrs):
                if not 0 <= x < n:
                    raise ConfigError(f"cell {x} outside domain of size {n}")
        for a in range(n):
            out = list(dict.fromkeys(edges.get(a, ())))
            if self_loops and a not in out:
                out.append(a)
            rps[a] = tuple(sorted(out))
    else:
        raise ConfigError(f"unknown reachability mode {mode!r}")
    return ReachabilityGraph(rps)


def haversine_km(lat1, lon1, lat2, lon2) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * 6371.0088 * math.asin(math.sqrt(h))


def cell_line(spec: GridSpec, a: int, b: int) -> list[int]:
    """8-connected cells on the straight line from ``a`` to ``b`` (Bresenham)."""
    r0, c0 = spec.row_col(a)
    r1, c1 = spec.row_col(b)
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 > r0 else -1
    sc = 1 if c1 > c0 else -1
    err = dc - dr
    out = [a]
    r, c = r0, c0
    while (r, c) != (r1, c1):
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr
        out.append(spec.cell_id(r, c))
    return out


def discretize(raw: Iterable[tuple[float, float]], spec: GridSpec) -> Trajectory:
    """Map (lat, lon) points onto grid cells.

    Consecutive repeats collapse to one cell, and gaps between non-adjacent
    cells are filled by line interpolation so that every step is a king move.
    """
    cells: list[int] = []
    for lat, lon in raw:
        cell = spec.cell_of(lat, lon)
        if cells and cells[-1] == cell:
            continue
        if cells and spec.chebyshev(cells[-1], cell) > 1:
            cells.extend(cell_line(spec, cells[-1], cell)[1:])
        else:
            cells.append(cell)
    if not cells:
        raise DataError("empty trajectory")
    return tuple(cells)


def read_trajectory_csv(path) -> tuple[str, dict[str, list]]:
    """Parse a trajectory CSV.

    Returns ``(kind, rows)`` where kind is ``"cell"`` or ``"latlon"`` and rows
    maps each ``traj_id`` to its points ordered by step. Steps must be
    contiguous from 0 within each trajectory.
    """
    groups: dict[str, dict[int, object]] = defaultdict(dict)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header == ["traj_id", "step", "cell"]:
            kind = "cell"
        elif header == ["traj_id", "step", "lat", "lon"]:
            kind = "latlon"
        else:
            raise DataError(f"{path}:1: unrecognised header {header}")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                step = int(row[1])
                value = int(row[2]) if kind == "cell" else (float(row[2]), float(row[3]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            tid = row[0].strip()
            if step in groups[tid]:
                raise DataError(f"{path}:{lineno}: duplicate step {step} for {tid}")
            groups[tid][step] = value
    out = {}
    for tid, steps in groups.items():
        if sorted(steps) != list(range(len(steps))):
            raise DataError(f"{path}: steps of trajectory {tid} are not contiguous from 0")
        out[tid] = [steps[i] for i in range(len(steps))]
    return kind, out


def write_trajectory_csv(path, trajectories: Iterable[Sequence[int]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "step", "cell"])
        for tid, traj in enumerate(trajectories):
            for step, cell in enumerate(traj):
                w.writerow([tid, step, cell])

"""Simplified victim protocols.

DirectTraj: every point is perturbed locally with the exponential mechanism
and the whole trajectory goes to the server, which keeps it as is.

GridTrace: users send an OUE length report and OUE transition reports (a
begin transition from a virtual start cell, intra-trajectory cell pairs, and
a terminate transition into a virtual end cell). The server estimates a
Markov model from the aggregated reports and synthesizes trajectories from it.
"""

from __future__ import annotations

import base64
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .core import GridSpec, Trajectory, TrajectoryDataset
from .defenses import FimConfig, clamp_distribution, fim_filter_reports, normalize_distribution
from .errors import ConfigError, DataError
from .ldp import BudgetLedger, OueParams, OueReport, oue_estimate, oue_perturb, ones_counts

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# DirectTraj


@dataclass(frozen=True)
class DirectTrajConfig:
    epsilon: float
    grid: GridSpec

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")


@lru_cache(maxsize=64)
def _em_cdf(grid: GridSpec, eps_point: float) -> np.ndarray:
    # row i: cumulative selection probabilities when the true cell is i
    n = grid.size
    rows, cols = np.divmod(np.arange(n), grid.cols)
    dist = np.maximum(np.abs(rows[:, None] - rows[None, :]), np.abs(cols[:, None] - cols[None, :]))
    logits = -0.5 * eps_point * dist
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    cdf = np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1)
    cdf[:, -1] = 1.0
    return cdf


def direct_traj_perturb(
    traj: Sequence[int], cfg: DirectTrajConfig, rng: np.random.Generator
) -> Trajectory:
    """Replace each point by an exponential-mechanism draw over all cells.

    Utility is the negative Chebyshev cell distance to the true cell; each
    point spends ``epsilon / len(traj)``.
    """
    if len(traj) == 0:
        raise DataError("empty trajectory")
    ledger = BudgetLedger(cfg.epsilon)
    eps_point = cfg.epsilon / len(traj)
    for j in range(len(traj)):
        ledger.spend(f"point{j}", eps_point)
    if cfg.grid.size == 1:
        return tuple(traj)
    cdf = _em_cdf(cfg.grid, eps_point)
    u = rng.random(len(traj))
    return tuple(
        int(np.searchsorted(cdf[c], x, side="right")) for c, x in zip(traj, u)
    )


# --------------------------------------------------------------------------
# GridTrace


@dataclass(frozen=True)
class GridTraceConfig:
    """Parameters of the transition-report protocol.

    The length report uses ``length_fraction * epsilon``; the rest is split
    evenly over the ``L_k + 1`` transition reports a user may send.
    """

    epsilon: float
    grid: GridSpec
    max_length: int
    quantile: float = 0.9
    length_fraction: float = 0.1
    normalize: bool = False
    fim: FimConfig | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.quantile <= 1:
            raise ConfigError("quantile must lie in (0, 1]")
        if not 0 < self.length_fraction < 1:
            raise ConfigError("length_fraction must lie in (0, 1)")
        if self.max_length < 1:
            raise ConfigError("max_length must be positive")

    @property
    def n_cells(self) -> int:
        return self.grid.size

    def length_params(self) -> OueParams:
        return OueParams(self.max_length, self.length_fraction * self.epsilon)

    def transition_epsilon(self, L_k: int) -> float:
        return (1 - self.length_fraction) * self.epsilon / (L_k + 1)

    def begin_params(self, L_k: int) -> OueParams:
        return OueParams(self.n_cells, self.transition_epsilon(L_k))

    def intra_params(self, L_k: int) -> OueParams:
        return OueParams(self.n_cells**2, self.transition_epsilon(L_k))

    def terminate_params(self, L_k: int) -> OueParams:
        return OueParams(self.n_cells, self.transition_epsilon(L_k))


@dataclass
class GridTraceReport:
    length: OueReport | None
    begin: OueReport | None = None
    intra: list[OueReport] = field(default_factory=list)
    terminate: OueReport | None = None

    @property
    def n_reports(self) -> int:
        return (
            (self.length is not None)
            + (self.begin is not None)
            + len(self.intra)
            + (self.terminate is not None)
        )

    def __eq__(self, other):
        if not isinstance(other, GridTraceReport):
            return NotImplemented
        return (
            self.length == other.length
            and self.begin == other.begin
            and self.terminate == other.terminate
            and len(self.intra) == len(other.intra)
            and all(a == b for a, b in zip(self.intra, other.intra))
        )


def transition_plan(traj: Sequence[int], n_cells: int, L_k: int):
    """Items a user reports, honestly or as poisoning targets.

    Returns ``(begin_item, intra_items, terminate_item_or_None)``. At most
    ``L_k`` intra transitions are sent; the terminate transition is sent
    only if it still fits within ``L_k`` intra-plus-terminate reports.
    """
    n_intra = min(L_k, len(traj) - 1)
    intra = [traj[j] * n_cells + traj[j + 1] for j in range(n_intra)]
    terminate = traj[-1] if len(traj) - 1 < L_k else None
    return traj[0], intra, terminate


def length_item(length: int, cfg: GridTraceConfig) -> int:
    return min(max(length, 1), cfg.max_length) - 1


def grid_trace_length_report(
    traj: Sequence[int], cfg: GridTraceConfig, rng: np.random.Generator
) -> OueReport:
    return oue_perturb(length_item(len(traj), cfg), cfg.length_params(), rng)


def grid_trace_transitions(
    traj: Sequence[int], cfg: GridTraceConfig, L_k: int, rng: np.random.Generator
) -> GridTraceReport:
    if len(traj) == 0:
        raise DataError("empty trajectory")
    if L_k < 1:
        raise ConfigError("L_k must be positive")
    ledger = BudgetLedger((1 - cfg.length_fraction) * cfg.epsilon)
    begin, intra, terminate = transition_plan(traj, cfg.n_cells, L_k)
    eps = cfg.transition_epsilon(L_k)
    ledger.spend("begin", eps)
    report = GridTraceReport(None, oue_perturb(begin, cfg.begin_params(L_k), rng))
    ip = cfg.intra_params(L_k)
    for j, item in enumerate(intra):
        ledger.spend(f"intra{j}", eps)
        report.intra.append(oue_perturb(item, ip, rng))
    if terminate is not None:
        ledger.spend("terminate", eps)
        report.terminate = oue_perturb(terminate, cfg.terminate_params(L_k), rng)
    return report


def grid_trace_client(
    traj: Sequence[int], cfg: GridTraceConfig, L_k: int, rng: np.random.Generator
) -> GridTraceReport:
    """One user's full bundle: length report plus transition reports."""
    length = grid_trace_length_report(traj, cfg, rng)
    report = grid_trace_transitions(traj, cfg, L_k, rng)
    report.length = length
    return report


def quantile_from_estimates(estimates, k: float, fallback: int) -> int:
    """Smallest length whose cumulative (negativity-clamped) mass reaches ``k``.

    ``estimates[j]`` is the estimated count of length ``j + 1``.
    """
    if not 0 < k <= 1:
        raise ConfigError("quantile must lie in (0, 1]")
    probs = clamp_distribution(estimates)
    if probs is None:
        return fallback
    cdf = np.cumsum(probs)
    return int(np.searchsorted(cdf, k - 1e-12, side="left")) + 1


def estimate_length_quantile(
    length_reports: Sequence[OueReport], k: float, params: OueParams, fallback: int | None = None
) -> int:
    est = oue_estimate(ones_counts(length_reports), len(length_reports), params)
    return quantile_from_estimates(est, k, params.d if fallback is None else fallback)


@dataclass
class SynthesisModel:
    length_probs: np.ndarray  # index j -> length j + 1
    begin_probs: np.ndarray  # over cells
    transition_probs: np.ndarray  # (cells, cells + 1); last column is the end cell
    removed: dict = field(default_factory=dict)  # report family -> reports dropped by FIM

    def sample(self, n_out: int, rng: np.random.Generator) -> list[Trajectory]:
        if n_out == 0:
            return []
        n_cells = self.begin_probs.size
        lengths = _sample(self.length_probs, n_out, rng) + 1
        first = _sample(self.begin_probs, n_out, rng)
        cdf = np.cumsum(self.transition_probs, axis=1)
        cdf[:, -1] = 1.0
        trajs = [[int(c)] for c in first]
        active = np.flatnonzero(lengths > 1)
        current = first.copy()
        while active.size:
            u = rng.random(active.size)
            nxt = (cdf[current[active]] < u[:, None]).sum(axis=1)
            still = []
            for idx, cell in zip(active.tolist(), nxt.tolist()):
                if cell == n_cells:
                    continue
                trajs[idx].append(cell)
                current[idx] = cell
                if len(trajs[idx]) < lengths[idx]:
                    still.append(idx)
            active = np.asarray(still, dtype=np.int64)
        return [tuple(t) for t in trajs]


def _sample(probs: np.ndarray, size: int, rng) -> np.ndarray:
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(size), side="right")


def _clean(vec, normalize: bool, what: str) -> np.ndarray:
    if normalize:
        return normalize_distribution(vec)
    probs = clamp_distribution(vec)
    if probs is None:
        warnings.warn(f"degenerate {what} estimate; falling back to uniform", RuntimeWarning)
        return np.full(len(vec), 1.0 / len(vec))
    return probs


def aggregate_model(
    length_reports: Sequence[OueReport],
    bundles: Sequence[GridTraceReport],
    cfg: GridTraceConfig,
    L_k: int,
) -> SynthesisModel:
    """Aggregate OUE reports into a cleaned Markov synthesis model.

    With ``cfg.fim`` set, each report family is filtered before aggregation.
    Cleanup is min-shift normalization when ``cfg.normalize`` is set and
    clamp-and-rescale otherwise.
    """
    n = cfg.n_cells
    families = {
        "length": (list(length_reports), cfg.length_params()),
        "begin": ([b.begin for b in bundles if b.begin is not None], cfg.begin_params(L_k)),
        "intra": ([r for b in bundles for r in b.intra], cfg.intra_params(L_k)),
        "terminate": (
            [b.terminate for b in bundles if b.terminate is not None],
            cfg.terminate_params(L_k),
        ),
    }
    est = {}
    removed = {}
    for name, (reports, params) in families.items():
        if cfg.fim is not None:
            before = len(reports)
            reports = fim_filter_reports(reports, cfg.fim)
            removed[name] = before - len(reports)
            log.debug("FIM on %s reports kept %d of %d", name, len(reports), before)
        if reports:
            est[name] = oue_estimate(ones_counts(reports), len(reports), params)
        else:
            est[name] = np.zeros(params.d)
    length_probs = _clean(est["length"], cfg.normalize, "length")
    begin_probs = _clean(est["begin"], cfg.normalize, "begin")
    joint = np.concatenate([est["intra"].reshape(n, n), est["terminate"][:, None]], axis=1)
    trans = np.vstack([_clean(row, cfg.normalize, "transition") for row in joint])
    return SynthesisModel(length_probs, begin_probs, trans, removed)


def grid_trace_server(
    reports: Sequence[GridTraceReport],
    cfg: GridTraceConfig,
    n_out: int,
    rng: np.random.Generator,
    L_k: int,
) -> TrajectoryDataset:
    if not reports:
        raise ConfigError("server needs at least one report")
    model = aggregate_model([r.length for r in reports if r.length is not None], reports, cfg, L_k)
    return TrajectoryDataset(model.sample(n_out, rng), "synthesized")


# --------------------------------------------------------------------------
# Report bundle serialization. See docs/report_schema.md.

_MAGIC = b"TRPB1\n"
_KINDS = {"length": 0, "begin": 1, "intra": 2, "terminate": 3}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


def _oue_json(r: OueReport | None):
    if r is None:
        return None
    return {"d": r.d, "bits": base64.b64encode(r.packed.tobytes()).decode("ascii")}


def _oue_from_json(obj) -> OueReport | None:
    if obj is None:
        return None
    packed = np.frombuffer(base64.b64decode(obj["bits"]), dtype=np.uint8).copy()
    return OueReport(packed, int(obj["d"]))


def report_to_json(report) -> str:
    if isinstance(report, GridTraceReport):
        obj = {
            "type": "gridtrace",
            "length": _oue_json(report.length),
            "begin": _oue_json(report.begin),
            "intra": [_oue_json(r) for r in report.intra],
            "terminate": _oue_json(report.terminate),
        }
    else:
        obj = {"type": "direct", "trajectory": [int(c) for c in report]}
    return json.dumps(obj, separators=(",", ":"))


def report_from_json(line: str):
    obj = json.loads(line)
    if obj.get("type") == "direct":
        return tuple(int(c) for c in obj["trajectory"])
    if obj.get("type") == "gridtrace":
        return GridTraceReport(
            _oue_from_json(obj["length"]),
            _oue_from_json(obj["begin"]),
            [_oue_from_json(r) for r in obj["intra"]],
            _oue_from_json(obj["terminate"]),
        )
    raise DataError(f"unknown report type {obj.get('type')!r}")


def write_reports_jsonl(path, reports: Iterable) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(report_to_json(r) + "\n")


def read_reports_jsonl(path) -> list:
    with open(path) as fh:
        return [report_from_json(line) for line in fh if line.strip()]


def _pack_bundle(report) -> bytes:
    parts = []
    if isinstance(report, GridTraceReport):
        entries = [("length", report.length), ("begin", report.begin)]
        entries += [("intra", r) for r in report.intra]
        entries.append(("terminate", report.terminate))
        for kind, r in entries:
            if r is None:
                continue
            parts.append(struct.pack(">BI", _KINDS[kind], r.d) + r.packed.tobytes())
        return b"G" + b"".join(parts)
    cells = [int(c) for c in report]
    return b"D" + struct.pack(f">I{len(cells)}I", len(cells), *cells)


def _unpack_bundle(payload: bytes):
    tag, body = payload[:1], payload[1:]
    if tag == b"D":
        (n,) = struct.unpack_from(">I", body)
        return tuple(struct.unpack_from(f">{n}I", body, 4))
    if tag != b"G":
        raise DataError(f"unknown bundle tag {tag!r}")
    report = GridTraceReport(None)
    pos = 0
    while pos < len(body):
        kind, d = struct.unpack_from(">BI", body, pos)
        pos += 5
        nbytes = (d + 7) // 8
        r = OueReport(np.frombuffer(body, dtype=np.uint8, count=nbytes, offset=pos).copy(), d)
        pos += nbytes
        name = _KIND_NAMES[kind]
        if name == "intra":
            report.intra.append(r)
        else:
            setattr(report, name, r)
    return report


def write_reports_binary(path_or_fh, reports: Iterable) -> None:
    fh: BinaryIO
    own = isinstance(path_or_fh, (str, bytes)) or hasattr(path_or_fh, "__fspath__")
    fh = open(path_or_fh, "wb") if own else path_or_fh
    try:
        fh.write(_MAGIC)
        for r in reports:
            payload = _pack_bundle(r)
            fh.write(struct.pack(">I", len(payload)))
            fh.write(payload)
    finally:
        if own:
            fh.close()


def read_reports_binary(path) -> list:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_MAGIC):
        raise DataError(f"{path}: not a report bundle file")
    pos = len(_MAGIC)
    out = []
    while pos < len(data):
        (size,) = struct.unpack_from(">I", data, pos)
        pos += 4
        out.append(_unpack_bundle(data[pos : pos + size]))
        pos += size
    return out

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapattack.core import GridSpec, build_reachability
from trapattack.errors import DataError
from trapattack.experiment import generate_synthetic
from trapattack.ldp import OueParams, oue_perturb
from trapattack.protocols import (
    DirectTrajConfig,
    GridTraceConfig,
    GridTraceReport,
    _em_cdf,
    aggregate_model,
    direct_traj_perturb,
    estimate_length_quantile,
    grid_trace_client,
    grid_trace_length_report,
    grid_trace_server,
    grid_trace_transitions,
    quantile_from_estimates,
    read_reports_binary,
    read_reports_jsonl,
    write_reports_binary,
    write_reports_jsonl,
)

G16 = GridSpec(16, 16)

# ---------------------------------------------------------------- DirectTraj


def test_direct_single_cell_grid_is_identity():
    cfg = DirectTrajConfig(1.0, GridSpec(1, 1))
    assert direct_traj_perturb((0, 0, 0), cfg, np.random.default_rng(0)) == (0, 0, 0)


def test_direct_high_epsilon_concentrates():
    cfg = DirectTrajConfig(50.0, G16)
    rng = np.random.default_rng(1)
    same = sum(direct_traj_perturb((17, 18), cfg, rng) == (17, 18) for _ in range(100))
    assert same >= 99


@given(st.lists(st.integers(0, 255), min_size=1, max_size=20), st.integers(0, 10**6))
def test_direct_preserves_length_and_domain(traj, seed):
    out = direct_traj_perturb(traj, DirectTrajConfig(1.0, G16), np.random.default_rng(seed))
    assert len(out) == len(traj)
    assert G16.is_valid(out)


def test_direct_em_weights():
    # probability of reporting cell j for true cell i is proportional to
    # exp(-eps_point * chebyshev(i, j) / 2)
    spec = GridSpec(4, 4)
    eps_point = 0.7
    probs = np.diff(_em_cdf(spec, eps_point), prepend=0.0, axis=1)
    for i in (0, 5, 15):
        w = np.array([np.exp(-eps_point * spec.chebyshev(i, j) / 2) for j in range(16)])
        assert np.allclose(probs[i], w / w.sum())


def test_direct_rejects_empty():
    with pytest.raises(DataError):
        direct_traj_perturb((), DirectTrajConfig(1.0, G16), np.random.default_rng(0))


# ---------------------------------------------------------------- GridTrace client


def _cfg(eps=1.0, grid=GridSpec(4, 4), max_length=12, **kw):
    return GridTraceConfig(eps, grid, max_length, **kw)


def test_client_single_point_structure():
    cfg = _cfg()
    r = grid_trace_client((5,), cfg, 4, np.random.default_rng(0))
    assert r.length is not None and r.begin is not None and r.terminate is not None
    assert r.intra == []
    assert (r.begin.d, r.terminate.d, r.length.d) == (16, 16, 12)


def test_client_omits_terminate_beyond_lk():
    cfg = _cfg()
    traj = (0, 1, 2, 3, 7, 11, 15, 14, 13, 12)
    r = grid_trace_client(traj, cfg, 4, np.random.default_rng(0))
    assert len(r.intra) == 4 and r.terminate is None
    assert all(x.d == 256 for x in r.intra)


@given(st.lists(st.integers(0, 15), min_size=1, max_size=14), st.integers(1, 10))
@settings(max_examples=40)
def test_client_report_count_and_budget(traj, L_k):
    cfg = _cfg()
    r = grid_trace_client(traj, cfg, L_k, np.random.default_rng(0))
    assert r.n_reports <= L_k + 2
    spent = cfg.length_params().epsilon + (r.n_reports - 1) * cfg.transition_epsilon(L_k)
    assert spent <= cfg.epsilon + 1e-12


# ---------------------------------------------------------------- length quantile


def test_quantile_examples():
    point = np.zeros(12)
    point[4] = 100.0
    assert quantile_from_estimates(point, 0.9, 12) == 5
    uniform = np.zeros(12)
    uniform[1:11] = 10.0  # lengths 2..11
    assert quantile_from_estimates(uniform, 0.5, 12) == 6
    assert quantile_from_estimates(uniform, 1.0, 12) == 11
    assert quantile_from_estimates(-np.ones(12), 0.9, 7) == 7


def test_estimate_length_quantile_from_reports():
    cfg = _cfg(eps=100.0)
    rng = np.random.default_rng(0)
    reports = [grid_trace_length_report((0,) * 5, cfg, rng) for _ in range(500)]
    assert estimate_length_quantile(reports, 0.9, cfg.length_params()) == 5


# ---------------------------------------------------------------- GridTrace server


def test_server_recovers_single_trajectory():
    cfg = _cfg(eps=50.0, max_length=4)
    rng = np.random.default_rng(0)
    reports = [grid_trace_client((5, 6), cfg, 2, rng) for _ in range(300)]
    out = grid_trace_server(reports, cfg, 500, rng, 2)
    frac = sum(t == (5, 6) for t in out) / len(out)
    assert frac >= 0.9


def test_server_zero_outputs_and_domain():
    cfg = _cfg()
    rng = np.random.default_rng(0)
    reports = [grid_trace_client((1, 2, 3), cfg, 3, rng) for _ in range(50)]
    assert len(grid_trace_server(reports, cfg, 0, rng, 3)) == 0
    out = grid_trace_server(reports, cfg, 200, rng, 3)
    assert all(cfg.grid.is_valid(t) and 1 <= len(t) <= cfg.max_length for t in out)


@pytest.mark.parametrize("eps", [20.0, 50.0])
def test_server_recovers_transition_matrix(eps):
    """Honest clients, 4x4 grid, n = 20,000: row-weighted L1 error <= 0.05."""
    g = GridSpec(4, 4)
    data = generate_synthetic(g, 20_000, 2, 4, seed=0)
    cfg = GridTraceConfig(eps, g, 4)
    rng = np.random.default_rng(1)
    lengths = [grid_trace_length_report(t, cfg, rng) for t in data]
    L_k = estimate_length_quantile(lengths, cfg.quantile, cfg.length_params())
    bundles = [grid_trace_transitions(t, cfg, L_k, rng) for t in data]
    model = aggregate_model(lengths, bundles, cfg, L_k)
    counts = np.zeros((16, 17))
    for t in data:
        for a, b in list(zip(t, t[1:]))[:L_k]:
            counts[a, b] += 1
        if len(t) - 1 < L_k:
            counts[t[-1], 16] += 1
    empirical = counts / counts.sum(axis=1, keepdims=True)
    row_l1 = np.abs(model.transition_probs - empirical).sum(axis=1)
    weighted = float((counts.sum(axis=1) / counts.sum()) @ row_l1)
    assert weighted <= 0.05, f"weighted row L1 {weighted:.3f} at eps={eps}"


def test_noiseless_synthesis_respects_reachability():
    g = GridSpec(4, 4)
    rps = build_reachability(g, "neighbors8")
    data = generate_synthetic(g, 2000, 2, 4, seed=3)
    cfg = GridTraceConfig(200.0, g, 4)
    rng = np.random.default_rng(0)
    reports = [grid_trace_client(t, cfg, 4, rng) for t in data]
    out = grid_trace_server(reports, cfg, 1000, rng, 4)
    assert all(rps.is_valid(t) for t in out)


def test_normalize_mode_builds_a_model():
    cfg = _cfg(normalize=True)
    rng = np.random.default_rng(0)
    reports = [grid_trace_client((1, 2, 3), cfg, 3, rng) for _ in range(40)]
    out = grid_trace_server(reports, cfg, 100, rng, 3)
    assert len(out) == 100


# ---------------------------------------------------------------- serialization


def _mixed_reports():
    cfg = _cfg()
    rng = np.random.default_rng(0)
    grid = [grid_trace_client(t, cfg, 3, rng) for t in [(1,), (1, 2, 3), (0, 1, 2, 3, 7)]]
    partial = GridTraceReport(None, oue_perturb(0, OueParams(16, 1.0), rng))
    return grid + [partial, (3, 4, 5), (0,)]


def test_jsonl_roundtrip(tmp_path):
    reports = _mixed_reports()
    write_reports_jsonl(tmp_path / "r.jsonl", reports)
    assert read_reports_jsonl(tmp_path / "r.jsonl") == reports


def test_binary_roundtrip(tmp_path):
    reports = _mixed_reports()
    write_reports_binary(tmp_path / "r.bin", reports)
    assert read_reports_binary(tmp_path / "r.bin") == reports
    buf = io.BytesIO()
    write_reports_binary(buf, reports)
    assert buf.getvalue() == (tmp_path / "r.bin").read_bytes()


def test_binary_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a report file")
    with pytest.raises(DataError):
        read_reports_binary(tmp_path / "x.bin")

import os

import pytest
from hypothesis import HealthCheck, settings

from trapattack.core import GridSpec, ReachabilityGraph, TargetPatternSet, build_reachability
from trapattack.generator import LengthDistribution

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# The four-cell toy world used throughout: a, b, c, d.
A, B, C, D = 0, 1, 2, 3


@pytest.fixture
def toy_rps() -> ReachabilityGraph:
    return build_reachability(
        GridSpec(2, 2),
        "explicit",
        edges={A: [A, B], B: [A, B, C, D], C: [B, C, D], D: [B, C, D]},
    )


@pytest.fixture
def toy_tp() -> TargetPatternSet:
    return TargetPatternSet.from_mapping({(A, B): 1, (A, B, C): 2, (B, D): 1})


@pytest.fixture
def toy_dist() -> LengthDistribution:
    return LengthDistribution({1: 3, 2: 5, 3: 4})


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one verdict line per acceptance criterion.

    Call ``acceptance(key, ok, detail)``; the lines are printed together in
    the terminal summary so a run shows every verdict in one block.
    """
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def emit(key: str, ok: bool, detail: str) -> bool:
        lines.append(f"criterion {key}: {'PASS' if ok else 'FAIL'} | {detail}")
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

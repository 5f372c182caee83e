import os

import pytest
from hypothesis import HealthCheck, settings

from fjsplb.instance import GeneratorConfig, Instance, Job, Operation, generate_instance

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_instance(jobs, machine_count, ps_machines=(), C=3, P=2, tp=2, tsw=5, name="hand"):
    """``jobs``: list of (ops, parts); ``ops``: list of (compat dict, is_ps)."""
    out = []
    for j, (ops, parts) in enumerate(jobs):
        out.append(Job(tuple(Operation(j, i, tuple(sorted(c.items())), ps) for i, (c, ps) in enumerate(ops)),
                       tuple(sorted(parts))))
    return Instance(tuple(out), machine_count, frozenset(ps_machines), C, P, tp, tsw, name)


@pytest.fixture
def small_instance():
    return generate_instance(GeneratorConfig(seed=7))


@pytest.fixture
def tiny_instance():
    return generate_instance(GeneratorConfig.tiny(3))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

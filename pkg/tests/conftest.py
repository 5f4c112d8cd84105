"""Shared fixtures and the acceptance-summary report hook."""

import pytest

from cduq.mathcore import RngStream
from cduq import synth

_acceptance_results = []


def record_acceptance(name, passed, detail):
    """Log one acceptance criterion outcome for the terminal summary."""
    _acceptance_results.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _acceptance_results:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {name}: {detail}")


@pytest.fixture(scope="session")
def iid_episodes():
    """A small deterministic iid stream shared by read-only tests."""
    spec = synth.shifted_stream_spec("iid", n=40, map_seed=3)
    return synth.gen_stream(synth.TrajectorySpec(), spec, RngStream(29))

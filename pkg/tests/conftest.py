from __future__ import annotations

import numpy as np
import pytest

from viewmem.scene_memory import Pose


@pytest.fixture(scope="session")
def tmp_root(tmp_path_factory):
    return tmp_path_factory.mktemp("fixtures")


@pytest.fixture(scope="session")
def localization_fixture(tmp_root):
    from viewmem.synthetic import write_localization_fixture

    return write_localization_fixture(3, tmp_root / "loc3")


@pytest.fixture(scope="session")
def trajectory_fixture(tmp_root):
    from viewmem.synthetic import write_trajectory_fixture

    return write_trajectory_fixture(7, tmp_root / "sweep7")


@pytest.fixture
def identity_pose() -> Pose:
    return Pose.identity()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of a run."""
    reports = []
    for key in ("passed", "failed"):
        reports.extend(terminalreporter.stats.get(key, []))
    acceptance = [
        r for r in reports
        if getattr(r, "when", "call") == "call" and "test_acceptance" in r.nodeid
    ]
    if not acceptance:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for report in sorted(acceptance, key=lambda r: r.nodeid):
        status = "PASS" if report.passed else "FAIL"
        name = report.nodeid.split("::")[-1]
        terminalreporter.write_line(f"[{status}] {name}")

from __future__ import annotations

from datetime import date

import pytest

from hospnet.records import StayRecord, group_by_patient
from hospnet.synthgen import GeneratorConfig, make_cohort


def rec(pid="p1", fac="f1", adm="2013-01-01", dis="2013-01-05", state="BY", diag="I21.0",
        sex="f", birth_year=1950):
    return StayRecord(pid, fac, state, date.fromisoformat(adm), date.fromisoformat(dis),
                      diag, sex, birth_year)


@pytest.fixture(scope="session")
def cohort42():
    """Seed-42 cohort with default injection rates, 2000 patients."""
    cfg = GeneratorConfig(seed=42, n_patients=2000)
    records, manifest = make_cohort(cfg)
    return cfg, records, manifest


@pytest.fixture(scope="session")
def patients42(cohort42):
    return list(group_by_patient(cohort42[1]))


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

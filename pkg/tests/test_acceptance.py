"""Acceptance criteria: one PASS/FAIL line per criterion (see ``volnav selfcheck``)."""

import pytest

from volnav.selfcheck import CHECKS, run_all


@pytest.fixture(scope="module")
def results():
    return {r.number: r for r in run_all()}


@pytest.mark.parametrize("number", [n for n, _, _ in CHECKS], ids=[f"criterion{n}" for n, _, _ in CHECKS])
def test_criterion(results, number, capsys):
    r = results[number]
    with capsys.disabled():
        print(f"\n{r.line()}")
    assert r.passed, r.detail

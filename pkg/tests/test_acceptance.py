"""Acceptance gate: every criterion at its stated tolerance.

The whole suite runs once per session; each test asserts one criterion and
prints its pass/fail line.
"""

import pytest

from liftrec import acceptance


@pytest.fixture(scope="module")
def suite():
    results = acceptance.run_all(printer=None)
    return {r.index: r for r in results}


@pytest.mark.parametrize("index", sorted(acceptance.CRITERIA))
def test_criterion(suite, index):
    result = suite[index]
    print(result.line())
    assert result.passed, result.details

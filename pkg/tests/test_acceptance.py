"""Exit criteria; each prints one PASS/FAIL line (run with ``-s`` to see them)."""
import pytest

from meldiff.acceptance import CRITERIA, run_criterion


@pytest.mark.parametrize("number", [c[0] for c in CRITERIA],
                         ids=[f"{c[0]:02d}-{c[1].replace(' ', '-')}" for c in CRITERIA])
def test_criterion(number):
    result = run_criterion(number, seed=0)
    print("\n" + result.line())
    assert result.passed, result.detail

"""Acceptance suite: every criterion at its stated tolerance.

Each criterion records a one-line verdict that ``conftest.py`` prints in the
terminal summary.  Running this file directly prints the same lines.
"""

import pytest

from stochns import acceptance as AC

RESULTS = {}


@pytest.mark.slow
@pytest.mark.parametrize("criterion", AC.CRITERIA, ids=[f"criterion_{c.number:02d}" for c in AC.CRITERIA])
def test_criterion(criterion):
    res = criterion(seed=0)
    RESULTS[res.number] = res
    print(res.line())
    assert res.passed, res.detail


if __name__ == "__main__":
    for r in AC.run_all():
        print(r.line(), flush=True)

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def random_spd(rng, n=None, lo=1e-4, hi=3e-3):
    """Random symmetric positive definite tensors as ``(..., 6)`` components."""
    from superdti.dti import from_matrix
    shape = () if n is None else (n,)
    q, _ = np.linalg.qr(rng.normal(size=shape + (3, 3)))
    lam = rng.uniform(lo, hi, size=shape + (3,))
    mat = np.einsum("...ik,...k,...jk->...ij", q, lam, q)
    return from_matrix(mat)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, printed together at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, name, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:2d}  {name}: {detail}")

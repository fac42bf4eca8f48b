import numpy as np
import pytest

from hybridmem.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def loop_attention(q, k, v, mask):
    """Triple-loop softmax attention used as an independent oracle."""
    nq, d = q.shape
    nk = k.shape[0]
    out = np.zeros((nq, v.shape[1]))
    for i in range(nq):
        logits = [sum(q[i, c] * k[j, c] for c in range(d)) / np.sqrt(d) if mask[i, j] else None
                  for j in range(nk)]
        top = max(x for x in logits if x is not None)
        w = [np.exp(x - top) if x is not None else 0.0 for x in logits]
        z = sum(w)
        for j in range(nk):
            out[i] += (w[j] / z) * v[j]
    return out


def svd_polar(g):
    """Orthogonal polar factor U V^T via SVD (oracle for Newton-Schulz)."""
    u, _, vt = np.linalg.svd(g, full_matrices=False)
    return u @ vt


# one PASS/FAIL line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)

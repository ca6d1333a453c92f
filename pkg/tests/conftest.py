import math

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x`` (x is restored)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for ix in np.ndindex(x.shape):
        old = x[ix]
        x[ix] = old + h
        up = f(x)
        x[ix] = old - h
        down = f(x)
        x[ix] = old
        g[ix] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def brute_force_ten_fold(scores, issame, n_folds=10):
    """Loop-by-loop fold evaluation: every midpoint threshold, smallest best kept."""
    n = len(scores)
    bounds = [0]
    base, extra = divmod(n, n_folds)
    for k in range(n_folds):
        bounds.append(bounds[-1] + base + (1 if k < extra else 0))
    accs = []
    for k in range(n_folds):
        test = list(range(bounds[k], bounds[k + 1]))
        train = [i for i in range(n) if i not in test]
        uniq = sorted(set(scores[i] for i in train))
        cands = [(a + b) / 2 for a, b in zip(uniq, uniq[1:])] or uniq
        best_t, best_acc = None, -1
        for t in cands:
            correct = sum((scores[i] > t) == issame[i] for i in train)
            if correct > best_acc:
                best_t, best_acc = t, correct
        accs.append(sum((scores[i] > best_t) == issame[i] for i in test) / len(test))
    return math.fsum(accs) / n_folds


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

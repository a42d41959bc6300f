import itertools

import numpy as np
import pytest

from mpem.sensing import gen_white_gaussian, scale_to_unit_spectral_norm, simulate_measurements
from mpem.tree import HmtParams, build_tree, sample_prior

_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request):
    """Record one pass/fail line per acceptance criterion; printed at session end."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def report(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


# -- shared oracles and instances ------------------------------------------


def all_state_configs(tree):
    """Every state vector with A pinned high; shape (2**|T|, p), int8."""
    t = tree.set_T
    bits = np.array(list(itertools.product((0, 1), repeat=t.size)), dtype=np.int8)
    q = np.ones((bits.shape[0], tree.p), dtype=np.int8)
    q[:, t] = bits
    return q


def enumerated_objective(qs, z, sigma2, tree, params):
    """M-step objective for many state vectors at once, s set per state.

    Written out directly from the model (Gaussian fit term, coefficient
    prior, Markov-tree prior) without using the library's helpers.  Differs
    from ``mstep_objective`` by the constant -0.5 * p * log(eps2).
    """
    qs = np.asarray(qs)
    var = np.where(qs == 1, params.gamma2, params.eps2)
    s = var / (1.0 + var) * z
    fit = -0.5 * np.sum((z - s) ** 2 + s**2 / var, axis=1) / sigma2
    coef = -0.5 * np.sum(np.log(var), axis=1)
    prior = np.zeros(qs.shape[0])
    for i in tree.set_T:
        par = tree.parent[i]
        qi = qs[:, i]
        if par < 0:
            pr = np.full(qs.shape[0], params.p_root)
        else:
            pr = np.where(qs[:, par] == 1, params.p_high, params.p_low)
        prior += np.where(qi == 1, np.log(pr), np.log1p(-pr))
    return fit + coef + prior, s


def random_z(rng, tree, sigma2, frac_high=0.3, gamma2=1000.0):
    big = rng.random(tree.p) < frac_high
    scale = np.where(big, np.sqrt(1.0 + gamma2), 1.0)
    return np.sqrt(sigma2) * scale * rng.standard_normal(tree.p)


def small_instance(seed, rows=8, cols=8, levels=3, N=32, sigma2=1.0, params=None):
    """Matched-model instance: prior draw with the tuning constants, white H."""
    params = params or HmtParams()
    tree = build_tree(rows, cols, levels)
    truth = sample_prior(tree, params, sigma2, seed)
    op, _, _ = scale_to_unit_spectral_norm(gen_white_gaussian(N, tree.p, seed))
    y = simulate_measurements(op, truth.s, sigma2, seed).y
    return tree, truth, op, y

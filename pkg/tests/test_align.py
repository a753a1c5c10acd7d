import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdcnet.align import (KernelBank, PseudoLabelSet, cmmd2, filter_pseudo_labels,
                          median_heuristic, mmd2)
from oracles import mmd2_bruteforce


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        dn = f()
        x[idx] = old
        g[idx] = (up - dn) / (2 * h)
    return g


def test_median_heuristic_line():
    assert median_heuristic(np.array([[0.0], [1.0], [3.0]])) == pytest.approx(2.0)


def test_median_heuristic_degenerate_and_scaling():
    assert median_heuristic(np.ones((4, 3))) == 1.0
    x = np.random.default_rng(0).standard_normal((9, 3))
    assert median_heuristic(2 * x) == pytest.approx(2 * median_heuristic(x), rel=1e-12)
    with pytest.raises(ValueError):
        median_heuristic(np.zeros((1, 2)))


def test_bank_around_median():
    bank = KernelBank.around(2.0, 5)
    assert bank.bandwidths == (0.5, 1.0, 2.0, 4.0, 8.0)
    assert sum(bank.weights) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        KernelBank((1.0, -1.0))


def test_mmd_closed_form_scalar_pair():
    v, _, _ = mmd2(np.array([[0.0]]), np.array([[1.0]]), KernelBank((1.0,)))
    assert v == pytest.approx(2 - 2 * math.exp(-0.5), abs=1e-15)
    assert v == pytest.approx(0.7869387, abs=1e-7)


def test_mmd_identical_sets():
    x = np.random.default_rng(1).standard_normal((7, 3))
    v, gs, gt = mmd2(x, x.copy(), KernelBank.around(1.0))
    assert v < 1e-12


def test_mmd_matches_bruteforce():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n, m, d = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 6)
        xs, xt = rng.standard_normal((n, d)), rng.standard_normal((m, d)) + 0.5
        bw = tuple(rng.uniform(0.3, 3.0, rng.integers(1, 4)))
        assert abs(mmd2(xs, xt, KernelBank(bw))[0] - mmd2_bruteforce(xs, xt, list(bw))) < 1e-10


def test_mmd_gradients():
    rng = np.random.default_rng(3)
    xs, xt = rng.standard_normal((5, 3)), rng.standard_normal((4, 3)) + 0.3
    bank = KernelBank((0.5, 1.0, 2.0), (0.2, 0.3, 0.5))
    _, gs, gt = mmd2(xs, xt, bank)
    assert np.allclose(gs, fd_grad(lambda: mmd2(xs, xt, bank)[0], xs), rtol=1e-5, atol=1e-9)
    assert np.allclose(gt, fd_grad(lambda: mmd2(xs, xt, bank)[0], xt), rtol=1e-5, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 10 ** 6))
def test_mmd_symmetry_permutation_nonnegativity(n, m, d, seed):
    rng = np.random.default_rng(seed)
    xs, xt = rng.standard_normal((n, d)), rng.standard_normal((m, d))
    bank = KernelBank.around(float(rng.uniform(0.2, 3)))
    v = mmd2(xs, xt, bank)[0]
    assert v >= -1e-12
    assert mmd2(xt, xs, bank)[0] == pytest.approx(v, abs=1e-12)
    assert mmd2(xs[rng.permutation(n)], xt[rng.permutation(m)], bank)[0] == pytest.approx(v, abs=1e-12)


def test_mmd_empty():
    with pytest.raises(ValueError):
        mmd2(np.zeros((0, 2)), np.zeros((1, 2)), KernelBank((1.0,)))


# -- pseudo-labels ----------------------------------------------------------

def test_gate_threshold():
    p = np.array([[0.7, 0.2, 0.1]])
    assert len(filter_pseudo_labels(p, 0.8)) == 0
    got = filter_pseudo_labels(p, 0.7)
    assert list(got.indices) == [0] and list(got.labels) == [0]


def test_gate_zero_accepts_all_and_ties():
    p = np.array([[0.5, 0.5], [0.1, 0.9], [1.0, 0.0]])
    got = filter_pseudo_labels(p, 0.0)
    assert list(got.indices) == [0, 1, 2]
    assert list(got.labels) == [0, 1, 0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0, 1), st.floats(0, 1))
def test_gate_monotone(seed, t1, t2):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3), size=20)
    lo, hi = sorted((t1, t2))
    assert len(filter_pseudo_labels(p, hi)) <= len(filter_pseudo_labels(p, lo))


# -- conditional MMD --------------------------------------------------------

def _all(labels):
    labels = np.asarray(labels)
    return PseudoLabelSet(np.arange(len(labels)), labels, np.ones(len(labels)))


def test_cmmd_identical_per_class():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 3))
    y = np.array([0, 1, 2, 0, 1, 2])
    r = cmmd2(x, y, x.copy(), _all(y), KernelBank.around(1.0), 3)
    assert r.value < 1e-12 and r.classes == 3


def test_cmmd_empty_gate():
    rng = np.random.default_rng(5)
    empty = PseudoLabelSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    r = cmmd2(rng.standard_normal((4, 2)), [0, 1, 0, 1], rng.standard_normal((3, 2)), empty,
              KernelBank((1.0,)), 2)
    assert r.value == 0 and r.classes == 0
    assert np.all(r.grad_source == 0) and np.all(r.grad_target == 0)


def test_cmmd_is_sum_of_class_mmds():
    rng = np.random.default_rng(6)
    xs, xt = rng.standard_normal((9, 4)), rng.standard_normal((8, 4))
    ys = rng.integers(0, 3, 9)
    pseudo = PseudoLabelSet(np.array([0, 2, 3, 5, 7]), np.array([0, 1, 1, 2, 0]), np.ones(5))
    bank = KernelBank((0.7, 1.5))
    expected = 0.0
    for c in range(3):
        a = xs[ys == c]
        b = xt[pseudo.indices[pseudo.labels == c]]
        if len(a) and len(b):
            expected += mmd2_bruteforce(a, b, [0.7, 1.5])
    assert abs(cmmd2(xs, ys, xt, pseudo, bank, 3).value - expected) < 1e-12


def test_cmmd_relabel_invariance():
    rng = np.random.default_rng(7)
    xs, xt = rng.standard_normal((9, 2)), rng.standard_normal((6, 2))
    ys = rng.integers(0, 3, 9)
    yt = rng.integers(0, 3, 6)
    perm = np.array([2, 0, 1])
    bank = KernelBank.around(1.0)
    a = cmmd2(xs, ys, xt, _all(yt), bank, 3).value
    b = cmmd2(xs, perm[ys], xt, _all(perm[yt]), bank, 3).value
    assert a == pytest.approx(b, abs=1e-12)


def test_cmmd_gradients_and_class_mean():
    rng = np.random.default_rng(8)
    xs, xt = rng.standard_normal((7, 3)), rng.standard_normal((6, 3))
    ys = np.array([0, 1, 2, 0, 1, 2, 0])
    pseudo = PseudoLabelSet(np.array([0, 1, 3, 4]), np.array([0, 0, 2, 1]), np.ones(4))
    bank = KernelBank((0.8, 1.6))
    r = cmmd2(xs, ys, xt, pseudo, bank, 3)
    f = lambda: cmmd2(xs, ys, xt, pseudo, bank, 3).value
    assert np.allclose(r.grad_source, fd_grad(f, xs), rtol=1e-5, atol=1e-9)
    assert np.allclose(r.grad_target, fd_grad(f, xt), rtol=1e-5, atol=1e-9)
    mean = cmmd2(xs, ys, xt, pseudo, bank, 3, class_mean=True)
    assert mean.value == pytest.approx(r.value / r.classes)

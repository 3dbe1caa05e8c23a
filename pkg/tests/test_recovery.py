import numpy as np
import pytest
from hypothesis import given, strategies as st

from flipsim.datasets import make_synthetic
from flipsim.formats import BitWord, LutTable
from flipsim.oracle import full_corruption_recovery
from flipsim.recovery import (
    PER_LAYER,
    PER_PAIR,
    alpha,
    antisymmetric_network,
    construct_antisymmetric,
    fully_corrupted,
    network_alpha,
    parity_sweep,
    predicted_recovery,
    recovery_probability_single,
    terminal_bits,
)


def test_alpha_examples():
    assert alpha(LutTable.from_array([0, 1, 1, 0])) == 0.0
    assert alpha(LutTable.from_array([1] * 8)) == 0.0
    assert alpha(construct_antisymmetric(5, seed=3)) == 1.0


def test_alpha_validates_distribution():
    t = LutTable.from_array([0, 1, 0, 1])
    with pytest.raises(ValueError):
        alpha(t, [0.5, 0.5])
    with pytest.raises(ValueError):
        alpha(t, [0.5, 0.5, 0.5, 0.5])
    assert alpha(t, [1.0, 0.0, 0.0, 0.0]) == 1.0


def test_k1_constructions():
    seen = {construct_antisymmetric(1, seed=s).entries.code for s in range(20)}
    assert seen == {0b01, 0b10}


@given(st.integers(1, 6), st.integers(0, 2**32))
def test_construction_is_antisymmetric(k, seed):
    t = construct_antisymmetric(k, seed).as_array()
    idx = np.arange(1 << k)
    assert np.all(t[idx] != t[idx ^ ((1 << k) - 1)])


def test_recovery_single():
    assert recovery_probability_single(construct_antisymmetric(4, 1)) == 1.0
    assert recovery_probability_single(LutTable.from_array([0] * 4)) == 0.0


@given(st.integers(0, 255), st.lists(st.floats(0.01, 1.0), min_size=8, max_size=8))
def test_recovery_equals_alpha_k3(code, w):
    t = LutTable(3, BitWord(code, 8))
    d = np.array(w) / sum(w)
    d = d / d.sum()
    r = recovery_probability_single(t, d)
    assert abs(r - alpha(t, d)) <= 1e-15
    assert abs(r - full_corruption_recovery(t, d)) <= 1e-15


def test_predicted_recovery():
    assert predicted_recovery(1.0, 7) == 1.0
    assert predicted_recovery(0.9, 4, PER_LAYER) == pytest.approx(0.6561, abs=1e-15)
    assert predicted_recovery(0.9, 4, PER_PAIR) == pytest.approx(0.81, abs=1e-15)
    with pytest.raises(ValueError):
        predicted_recovery(0.9, 3, PER_PAIR)
    with pytest.raises(ValueError):
        predicted_recovery(1.2, 2)


@pytest.fixture(scope="module")
def blobs():
    return make_synthetic("blobs", 40, 3, seed=1)


def test_parity_of_constructed_networks(blobs):
    X = blobs.features
    for depth in (1, 2, 3, 4):
        net = antisymmetric_network(2, [24] * depth, 4, 3, seed=depth, X=X)
        bad = fully_corrupted(net)
        clean_bits = terminal_bits(net, X)
        bits = terminal_bits(net, X, bad)
        if depth % 2 == 0:
            np.testing.assert_array_equal(bits, clean_bits)
            np.testing.assert_array_equal(bad.forward(X), net.forward(X))
        else:
            np.testing.assert_array_equal(bits, 1 - clean_bits)


def test_parity_sweep_rows(blobs):
    nets = {d: antisymmetric_network(2, [12] * d, 3, 3, seed=d, X=blobs.features) for d in (1, 2)}
    rows = parity_sweep(nets, blobs, [0.0, 1.0], seed=0, trials=2)
    assert [(r.depth, r.p) for r in rows] == [(1, 0.0), (1, 1.0), (2, 0.0), (2, 1.0)]
    two = [r for r in rows if r.depth == 2]
    assert two[1].mean_accuracy == two[1].clean_accuracy


def test_network_alpha_report(blobs):
    net = antisymmetric_network(2, [8, 8], 3, 3, seed=0, X=blobs.features)
    rep = network_alpha(net)
    assert rep.mean_alpha == rep.min_alpha == 1.0
    assert rep.predicted_recovery == 1.0
    emp = network_alpha(net, blobs.features, PER_PAIR)
    assert emp.depth == 2 and emp.mean_alpha == 1.0

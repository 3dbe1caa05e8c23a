import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flipsim import analytic as an
from flipsim.fault_model import corrupted_distribution, moments
from flipsim.formats import (
    BINARY,
    EXTENDED,
    AffineQuantLayerParams,
    BitWord,
    FloatFormat,
    IntFormat,
    encode_float,
    encode_int,
)
from flipsim.oracle import aq_error, neuron_error


def int_neuron(x, w, bits):
    fmt = IntFormat(bits)
    return an.NeuronInstance(x, [encode_int(v, fmt) for v in w], fmt)


def bnn_neuron(x, w):
    return an.NeuronInstance(x, [BitWord((v + 1) // 2, 1) for v in w], BINARY)


def test_int_neuron_examples():
    r = an.int_neuron_mse(int_neuron([1.0], [0], 2), 0.1)
    assert r.variance_term == pytest.approx(0.45, abs=1e-15)
    assert r.bias_term == pytest.approx(0.01, abs=1e-15)
    assert r.total == pytest.approx(0.46, abs=1e-15)
    r = an.int_neuron_mse(int_neuron([1.0, 1.0], [0, 0], 2), 0.1)
    assert r.variance_term == pytest.approx(0.9, abs=1e-15)
    assert r.bias_term == pytest.approx(0.04, abs=1e-15)
    assert an.int_neuron_mse(int_neuron([1.0, -2.0], [1, -1], 3), 0.0).total == 0.0


def test_int_neuron_two_input_enumeration():
    n = int_neuron([1.0, 1.0], [0, 0], 2)
    o = neuron_error(n.x, n.codes, n.fmt, 0.1)
    assert o.second == pytest.approx(an.int_neuron_mse(n, 0.1).total, rel=1e-12)


@settings(max_examples=40)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_int_mse_nondecreasing_on_lower_half(bits, seed):
    rng = np.random.default_rng(seed)
    fmt = IntFormat(bits)
    w = rng.integers(fmt.min_value, fmt.max_value + 1, size=3)
    n = int_neuron(rng.normal(size=3), [int(v) for v in w], bits)
    totals = [an.int_neuron_mse(n, p).total for p in np.linspace(0, 0.5, 21)]
    assert all(b >= a - 1e-12 for a, b in zip(totals, totals[1:]))


def test_float_moments_at_zero_rate_are_clean():
    fmt = FloatFormat(2, 1, bias=1, specials=EXTENDED)
    word = encode_float(1.5, fmt)
    assert an.float_weight_moments(word, fmt, 0.0) == (1.5, 2.25)


@pytest.mark.parametrize("p", [0.01, 0.1, 0.5, 0.9])
def test_float_moments_match_enumeration(p):
    fmt = FloatFormat(2, 1, bias=1, specials=EXTENDED)
    word = encode_float(1.5, fmt)
    g, o = an.float_weight_moments(word, fmt, p)
    m, s = moments(corrupted_distribution(word, fmt, p))
    assert g == pytest.approx(m, rel=1e-12)
    assert o == pytest.approx(s, rel=1e-12)


def test_float_sign_moment_vanishes_at_half():
    fmt = FloatFormat(3, 2, specials=EXTENDED)
    for v in (1.0, -3.5):
        g, _ = an.float_weight_moments(encode_float(v, fmt), fmt, 0.5)
        assert g == 0.0


def test_float_moments_reject_ieee():
    fmt = FloatFormat(2, 1)
    with pytest.raises(ValueError, match="corrupted_distribution"):
        an.float_weight_moments(BitWord(0, 4), fmt, 0.1)


def test_float_neuron_single_weight_identity():
    fmt = FloatFormat(3, 2, specials=EXTENDED)
    word = encode_float(-0.75, fmt)
    g, o = an.float_weight_moments(word, fmt, 0.2)
    r = an.float_neuron_mse(an.NeuronInstance([1.0], [word], fmt), 0.2)
    assert r.total == pytest.approx(o - 2 * g * -0.75 + 0.75 ** 2, rel=1e-12)


def test_float_neuron_two_inputs_enumeration():
    fmt = FloatFormat(2, 1, bias=1, specials=EXTENDED)
    words = [encode_float(1.5, fmt), encode_float(-0.5, fmt)]
    n = an.NeuronInstance([1.0, 2.0], words, fmt)
    for p in (0.0, 0.1, 0.5, 1.0):
        o = neuron_error(n.x, n.codes, fmt, p)
        assert an.float_neuron_mse(n, p).total == pytest.approx(o.second, rel=1e-10, abs=1e-300)


def test_exponent_bound_growth():
    e1 = FloatFormat(1, 2, bias=0, specials=EXTENDED)
    # two patterns; at p=1 pattern 0 becomes 2^1 and its square is 4
    assert an.exponent_second_moment_bound(e1) == pytest.approx(4.0)
    bounds = [an.exponent_second_moment_bound(FloatFormat(e, 2, specials=EXTENDED))
              for e in range(2, 6)]
    assert all(b >= a for a, b in zip(bounds, bounds[1:]))
    ratios = [b / 2.0 ** (2 ** e) for e, b in zip(range(2, 6), bounds)]
    assert max(ratios) <= 4.0


def test_exponent_bound_e3_direct():
    fmt = FloatFormat(3, 1, specials=EXTENDED)
    best = 0.0
    for p in np.linspace(0, 1, 101):
        for e in range(8):
            v = 2.0 ** (2 * (e - fmt.bias))
            for j in range(3):
                b = (e >> j) & 1
                v *= (1 - p) + p * 2.0 ** (2 * (1 - 2 * b) * 2 ** j)
            best = max(best, v)
    assert an.exponent_second_moment_bound(fmt) == pytest.approx(best, rel=1e-12)


def aq_case(scale=0.5, z=1, bw=2, bz=2, x=(0.7, -1.2), w=(1, -2)):
    wfmt, zfmt = IntFormat(bw), IntFormat(bz)
    sfmt = FloatFormat(2, 1, bias=1, specials=EXTENDED)
    params = AffineQuantLayerParams(encode_float(scale, sfmt), sfmt, encode_int(z, zfmt), zfmt, wfmt)
    n = an.NeuronInstance(list(x), [encode_int(v, wfmt) for v in w], wfmt)
    return n, params


def test_aq_protected_scaling():
    n, _ = aq_case()
    wfmt = IntFormat(2)
    one = AffineQuantLayerParams.from_values(1.0, 0, wfmt)
    two = AffineQuantLayerParams.from_values(2.0, 0, wfmt)
    base = an.int_neuron_mse(n, 0.1).total
    assert an.aq_protected_mse(n, one, 0.1).total == base
    assert an.aq_protected_mse(n, two, 0.1).total == 4 * base
    n, params = aq_case(scale=0.5)
    o = aq_error(n.x, n.codes, params, 0.1, False, False)
    assert an.aq_protected_mse(n, params, 0.1).total == pytest.approx(o.second, rel=1e-12)


def test_aq_accumulation_variance():
    n, params = aq_case(x=(1.0, 1.0))
    assert an.aq_corrupted_accumulation_variance(n, params, 0.0) == 0.0
    p = 0.1
    _, var_z = an.int_word_moments(params.zero_point_word, params.zero_point_format, p)
    only_w = float(np.dot(n.x ** 2, an.int_error_moments(n.clean_weights, 2, p)[1]))
    assert an.aq_corrupted_accumulation_variance(n, params, p) == pytest.approx(only_w + 4 * var_z)
    o = aq_error(n.x, n.codes, params, p, False, True)
    assert an.aq_corrupted_accumulation_variance(n, params, p) == pytest.approx(
        o.variance / params.scale ** 2, rel=1e-10)


@pytest.mark.parametrize("p", [0.0, 0.01, 0.1, 0.5, 0.9, 1.0])
def test_aq_full_matches_enumeration(p):
    n, params = aq_case(scale=1.5, z=-1, bw=2, bz=1, x=(0.8,), w=(1,))
    o = aq_error(n.x, n.codes, params, p, True, True)
    got = an.aq_corrupted_full_mse(n, params, p).total
    if p == 0:
        assert got == 0.0
    else:
        assert got == pytest.approx(o.second, rel=1e-10)


def test_bnn_examples():
    r = an.bnn_neuron_mse(bnn_neuron([1.0], [1]), 0.5)
    assert (r.variance_term, r.bias_term, r.total) == (1.0, 1.0, 2.0)
    assert an.bnn_neuron_mse(bnn_neuron([1.0], [1]), 0.0).total == 0.0
    r = an.bnn_neuron_mse(bnn_neuron([1.0, -1.0], [1, 1]), 0.1)
    assert r.variance_term == pytest.approx(0.72, abs=1e-15)
    assert r.bias_term == 0.0
    with pytest.raises(TypeError):
        an.bnn_neuron_mse(int_neuron([1.0], [0], 2), 0.1)


def test_relu_propagation():
    point = an.NoiseDistribution.point
    assert an.relu_propagated_mse(1.0, point(3.0)) == 9.0
    assert an.relu_propagated_mse(1.0, point(-5.0)) == 1.0
    assert an.relu_propagated_mse(1.0, point(0.0)) == 0.0
    assert an.relu_propagated_mse(-1.0, point(3.0)) == 4.0
    noise = an.NoiseDistribution([0.5, 1.0, 2.0], [0.2, 0.5, 0.3])
    assert an.relu_propagated_mse(0.3, noise) == pytest.approx(noise.second_moment)


def test_sigmoid_propagation():
    point = an.NoiseDistribution.point
    assert an.sigmoid_propagated_mse(2.0, 0.0, point(-3.0)) == 1.0
    assert an.sigmoid_propagated_mse(2.0, 0.0, point(1.0)) == 0.0
    # the boundary counts as the negative side
    assert an.sigmoid_propagated_mse(1.0, 0.0, point(-1.0)) == 1.0
    noise = an.NoiseDistribution([-1.0, 1.0], [0.5, 0.5])
    exact = an.sigmoid_propagated_mse(0.0, 100.0, noise)
    assert exact == pytest.approx(1 / (16 * 100 ** 2), rel=0.05)
    with pytest.raises(ValueError):
        an.sigmoid_propagated_mse(0.0, -1.0, noise)


def test_noise_distribution_matches_enumeration():
    n = int_neuron([0.5, -1.5], [1, -2], 3)
    noise = an.noise_distribution(n, 0.2)
    o = neuron_error(n.x, n.codes, n.fmt, 0.2)
    assert noise.second_moment == pytest.approx(o.second, rel=1e-12)


def test_width_sparsity_predictor():
    a = an.width_sparsity_predictor(10, 0.5, 0.2, 1.0, 1.0)
    b = an.width_sparsity_predictor(20, 0.5, 0.2, 1.0, 1.0)
    assert b.bias_term == pytest.approx(4 * a.bias_term)
    assert an.width_sparsity_predictor(0, 0.5, 0.2, 1.0, 1.0).total == 0.0
    c = an.width_sparsity_predictor(20, 0.5, 0.0, 1.0, 1.0)
    assert c.total == 2 * an.width_sparsity_predictor(10, 0.5, 0.0, 1.0, 1.0).total


def test_depth_mse():
    assert an.depth_mse(1.0, 0.1, 5) == 0.5
    assert an.depth_mse(0.5, 1.0, 200) == pytest.approx(4 / 3)
    assert an.depth_mse(0.5, 1.0, 0) == 0.0
    for lam in (0.5, 1.0, 1.5):
        for L in range(65):
            assert an.depth_mse(lam, 0.3, L) == an.depth_recursion(lam, 0.3, L)
    with pytest.raises(ValueError):
        an.depth_mse(1.0, 0.1, -1)


def test_breakdowns_zero_only_at_zero_rate():
    n = int_neuron([0.3, -0.7], [1, 0], 3)
    assert an.int_neuron_mse(n, 0.0).total == 0.0
    for p in (1e-6, 0.3, 1.0):
        r = an.int_neuron_mse(n, p)
        assert r.total > 0 and r.variance_term >= 0 and r.bias_term >= 0

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flipsim.fault_model import (
    CorruptionSpec,
    EnumerationCapacityError,
    apply_mask,
    corrupted_distribution,
    flip_uniforms,
    make_stream,
    masks_from_uniforms,
    moments,
    popcount_codes,
    sample_flip_mask,
)
from flipsim.formats import BINARY, EXTENDED, FP32, BitWord, FloatFormat, IntFormat, place_values


def test_mask_extremes():
    s = make_stream(0, 1)
    assert sample_flip_mask(16, 0.0, s).code == 0
    assert sample_flip_mask(16, 1.0, s).code == 0xFFFF


def test_half_rate_popcount_is_binomial():
    u = flip_uniforms(make_stream(7, 0), 100_000, 16)
    counts = popcount_codes(masks_from_uniforms(u, 0.5))
    se = np.sqrt(16 * 0.25 / len(counts))
    assert abs(counts.mean() - 8.0) < 3 * se


def test_streams_are_reproducible_and_distinct():
    a = flip_uniforms(make_stream(3, 1, 2), 4, 8)
    b = flip_uniforms(make_stream(3, 1, 2), 4, 8)
    c = flip_uniforms(make_stream(3, 2, 1), 4, 8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_nested_flip_sets_across_rates():
    u = flip_uniforms(make_stream(0, 0), 50, 8)
    lo, hi = masks_from_uniforms(u, 0.1), masks_from_uniforms(u, 0.4)
    assert np.all(lo & ~hi == 0)


def test_apply_mask():
    w = BitWord.from_string("01")
    assert apply_mask(w, BitWord(0, 2)) == w
    assert str(apply_mask(w, BitWord(3, 2))) == "10"
    with pytest.raises(ValueError):
        apply_mask(w, BitWord(0, 3))


def test_int_word_distribution_by_hand():
    d = corrupted_distribution(BitWord(0, 2), IntFormat(2), 0.1).as_dict()
    expected = {0.0: 0.81, 1.0: 0.09, -2.0: 0.09, -1.0: 0.01}
    assert d.keys() == expected.keys()
    for k, v in expected.items():
        assert d[k] == pytest.approx(v, abs=1e-15)
    mean, second = moments(corrupted_distribution(BitWord(0, 2), IntFormat(2), 0.1))
    assert mean == pytest.approx(-0.1, abs=1e-15)
    assert second == pytest.approx(0.46, abs=1e-15)


def test_distribution_at_p0_and_p1():
    fmt = IntFormat(4)
    word = BitWord(0b0101, 4)
    assert corrupted_distribution(word, fmt, 0.0).atoms == [(5.0, 1.0)]
    assert corrupted_distribution(word, fmt, 1.0).atoms == [(-6.0, 1.0)]


def test_binary_half_rate():
    assert moments(corrupted_distribution(BitWord(1, 1), BINARY, 0.5)) == (0.0, 1.0)


def test_single_atom_moments():
    from flipsim.fault_model import ValueDistribution
    assert moments(ValueDistribution([3.0], [1.0])) == (3.0, 9.0)


def test_specials_dropped_or_renormalized():
    fmt = FloatFormat(2, 1, bias=1)
    d = corrupted_distribution(BitWord.from_string("0011"), fmt, 0.3)
    assert d.special.any()
    m_sub, _ = moments(d)
    m_cond, _ = moments(d, renormalize=True)
    finite_mass = d.probs[~d.special].sum()
    assert m_cond == pytest.approx(m_sub / finite_mass, rel=1e-12)
    assert np.isnan(moments(d, exclude_specials=False)[0])


def test_capacity_error():
    with pytest.raises(EnumerationCapacityError):
        corrupted_distribution(BitWord(0, 32), FP32, 0.1)


def test_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec(1.5)
    with pytest.raises(ValueError):
        CorruptionSpec(0.1, scope="everything")


@settings(max_examples=60)
@given(st.integers(1, 8), st.integers(0, 255), st.sampled_from([0.0, 0.01, 0.1, 0.5, 0.9, 1.0]))
def test_int_moment_identities(bits, code, p):
    code &= (1 << bits) - 1
    fmt = IntFormat(bits)
    w = code - (1 << bits) if code >> (bits - 1) else code
    mean, second = moments(corrupted_distribution(BitWord(code, bits), fmt, p))
    var = second - mean ** 2
    assert mean - w == pytest.approx(p * (-1 - 2 * w), abs=1e-10)
    assert var == pytest.approx(p * (1 - p) * sum(v * v for v in place_values(fmt)), abs=1e-9)


def test_extended_float_distribution_is_all_finite():
    fmt = FloatFormat(3, 2, specials=EXTENDED)
    d = corrupted_distribution(BitWord(0b010101, 6), fmt, 0.3)
    assert not d.special.any()
    assert d.probs.sum() == pytest.approx(1.0, abs=1e-12)

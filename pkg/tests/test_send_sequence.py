import math

import mpmath
import pytest
from hypothesis import given, settings, strategies as st

from backofflab.errors import IndexUnavailable, InvalidFamilyParameter
from backofflab.send_sequence import (explicit, log_weight, make_family, prob,
                                      validate_cap)

FAMILIES = [
    {"family": "constant", "p": 0.5},
    {"family": "binary_exponential"},
    {"family": "geometric", "base": 10},
    {"family": "polynomial", "c": 2.0},
    {"family": "explicit", "probs": [1, 0.5, 0.25, 0.3]},
    {"family": "interleaved_aloha_exp", "base": 10, "schedule": [0, 4, 9, 20]},
]


def test_binary_exponential_p3():
    assert prob(make_family("binary_exponential"), 3) == 1 / 8


@pytest.mark.parametrize("desc", FAMILIES)
def test_p0_is_one(desc):
    seq = make_family(desc)
    assert prob(seq, 0) == 1.0
    assert log_weight(seq, 0) == 0.0


def test_interleaved_even_interval():
    seq = make_family({"family": "interleaved_aloha_exp", "base": 10, "schedule": [0, 20, 40]})
    assert prob(seq, 5) == pytest.approx(1e-5, rel=1e-12)


def test_polynomial_constant_geometric():
    assert prob(make_family({"family": "polynomial", "c": 2}), 3) == pytest.approx(1 / 9, rel=1e-14)
    assert prob(make_family({"family": "constant", "p": 0.5}), 7) == 0.5
    assert prob(make_family({"family": "geometric", "base": 10}), 4) == pytest.approx(1e-4, rel=1e-14)


def test_log_weight_against_mpmath():
    assert log_weight(make_family("binary_exponential"), 10) == pytest.approx(
        float(10 * mpmath.log(2)), rel=1e-14)
    lw = log_weight(make_family({"family": "geometric", "base": 10}), 400)
    assert lw == pytest.approx(float(mpmath.log(mpmath.mpf(10) ** 400)), rel=1e-14)
    assert lw == pytest.approx(921.03, abs=0.01)


def test_validate_cap_examples():
    assert validate_cap(make_family("binary_exponential"), 0.5, 50).ok
    assert validate_cap(make_family({"family": "constant", "p": 1.0}), 0.5, 50).ok
    rep = validate_cap(make_family({"family": "geometric", "base": 10}), 1.9, 3)
    assert rep.first_failure == 1


def test_explicit_errors():
    seq = explicit([1, 0.5])
    with pytest.raises(IndexUnavailable):
        seq.prob(2)
    with pytest.raises(InvalidFamilyParameter):
        explicit([])
    with pytest.raises(InvalidFamilyParameter):
        explicit([0.5, 0.5])
    with pytest.raises(InvalidFamilyParameter):
        explicit([1, 1.5])
    with pytest.raises(InvalidFamilyParameter):
        make_family({"family": "no_such"})


def test_interleaved_matches_pieces():
    sched = [0, 4, 9, 30, 200]
    seq = make_family({"family": "interleaved_aloha_exp", "base": 10, "schedule": sched})
    geo = make_family({"family": "geometric", "base": 10})
    for k in range(1, 10 ** 4 + 1):
        interval = max(i for i, a in enumerate(sched) if a <= k)
        want = geo.log_weight(k) if interval % 2 == 0 else math.log(2.0)
        assert seq.log_weight(k) == want


@settings(max_examples=200, deadline=None)
@given(idx=st.integers(0, len(FAMILIES) - 1), k=st.integers(0, 3))
def test_prob_times_weight_is_one(idx, k):
    seq = make_family(FAMILIES[idx])
    assert prob(seq, k) * math.exp(log_weight(seq, k)) == pytest.approx(1.0, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(k=st.integers(1, 2000), base=st.integers(2, 50), c=st.floats(0.1, 5.0))
def test_log_weight_monotone(k, base, c):
    for seq in (make_family("binary_exponential"),
                make_family({"family": "geometric", "base": base}),
                make_family({"family": "polynomial", "c": c})):
        assert seq.log_weight(k + 1) >= seq.log_weight(k)


def test_huge_weights_stay_in_logs():
    seq = make_family({"family": "geometric", "base": 10})
    assert math.isinf(seq.weight(400))
    assert seq.floor_weight(400) == 10 ** 400

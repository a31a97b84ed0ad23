import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backofflab.classify import (BinKind, classify_bin, is_bottleneck, kind_from_props,
                                 l_of, ll_of, many_covered_onset, upsilon_count, wtilde)
from backofflab.constants import ClassifierConstants
from backofflab.send_sequence import explicit, make_family

from oracles import naive_class

ALOHA = make_family({"family": "constant", "p": 0.5})
BEB = make_family("binary_exponential")


def test_l_and_ll_values():
    c = ClassifierConstants.genuine(0.1)
    assert c.c_se == 10 * 300 * 3
    assert ll_of(0.1, 2) == c.c_se
    assert l_of(1 / math.e, 1) == 300
    assert l_of(0.1, 10 ** 6) == 1_243_500


def test_constants_formulas():
    lam = 0.2
    c = ClassifierConstants.genuine(lam)
    assert c.c_nb == pytest.approx(1 / 9600, rel=1e-15)
    want = 2 * 100 * 2 * 320 * 300 ** 2 * math.log(6 / lam) / (c.c_nb * lam)
    assert c.c_0 == pytest.approx(want, rel=1e-12)
    assert c.k_of(100) == 2 * math.ceil(320 * c.ll_of(100) / lam)


def test_upsilon_counts():
    assert upsilon_count(BEB, 1, 0.0) == 0
    assert upsilon_count(ALOHA, 6, math.log(2)) == 5
    assert upsilon_count(ALOHA, 6, math.log(3)) == 0


def test_wtilde_examples():
    assert tuple(wtilde(BEB, 0.1, 1)) == (1, 0)
    assert tuple(wtilde(ALOHA, 0.1, 6)) == (2, 5)
    assert tuple(wtilde(BEB, 0.1, 4)) == (2, 3)


def test_aloha_classes():
    small = classify_bin(ALOHA, 0.1, 5)
    assert small.kind is BinKind.STRONGLY_EXPOSED
    assert (small.prop1, small.prop2, small.prop3) == (False, False, False)
    assert classify_bin(ALOHA, 0.1, 10 ** 9).kind is BinKind.MANY_COVERED


def test_aloha_onset_and_never_heavy():
    onset = many_covered_onset(ALOHA, 0.1, 10 ** 12)
    assert onset is not None and onset > 10 ** 5
    assert classify_bin(ALOHA, 0.1, onset).kind is BinKind.MANY_COVERED
    assert classify_bin(ALOHA, 0.1, onset - 1).kind is not BinKind.MANY_COVERED
    for j in list(range(1, 2001)) + list(range(2001, 10 ** 5 + 1, 997)):
        assert not classify_bin(ALOHA, 0.1, j).prop2


def test_bottleneck_examples():
    r = is_bottleneck(ALOHA, 0.1, 100, 200)
    assert not r.flag and not r.cond_weight
    g = is_bottleneck(make_family({"family": "geometric", "base": 10}), 0.1, 100, 110)
    assert g.cond_weight and not g.cond_light_prefix and not g.flag and g.witness is None
    with pytest.raises(ValueError):
        is_bottleneck(ALOHA, 0.1, 10, 20)


def test_kind_table():
    assert kind_from_props(True, True, True) is BinKind.MANY_COVERED
    assert kind_from_props(False, True, True) is BinKind.HEAVY_COVERED
    assert kind_from_props(False, False, True) is BinKind.WEAKLY_EXPOSED
    assert kind_from_props(False, False, False) is BinKind.STRONGLY_EXPOSED


def test_geometric_overflow_safe():
    seq = make_family({"family": "geometric", "base": 10})
    bc = classify_bin(seq, 0.1, 400)
    assert bc.log_weight == pytest.approx(400 * math.log(10))


def _rand_seq(rng, j, max_exp):
    exps = [0] + [int(e) for e in rng.integers(0, max_exp + 1, size=j)]
    return explicit([2.0 ** -e for e in exps]), [2 ** e for e in exps[1:]]


@pytest.mark.parametrize("synthetic", [False, True])
def test_classify_matches_naive(synthetic):
    rng = np.random.default_rng(11 + synthetic)
    kinds = set()
    for _ in range(40):
        lam = float(rng.choice([0.05, 0.3, 0.7]))
        j = int(rng.integers(1, 65))
        seq, w = _rand_seq(rng, j, 20)
        c = (ClassifierConstants.synthetic_preset if synthetic else ClassifierConstants.genuine)(lam)
        got = classify_bin(seq, lam, j, c)
        kind, props, (wt, cnt) = naive_class(w, lam, j, c.c_no, c.c_upsilon, c.c_f, c.phi,
                                             c.chi, c.c_se_factor)
        assert got.kind.value == kind
        assert (got.prop1, got.prop2, got.prop3) == props
        assert (got.wtilde, got.upsilon_wtilde) == (wt, cnt)
        kinds.add(kind)
    if synthetic:
        assert len(kinds) >= 2


@settings(max_examples=60, deadline=None)
@given(exps=st.lists(st.integers(0, 30), min_size=1, max_size=40),
       lam=st.sampled_from([0.01, 0.1, 0.5]))
def test_wtilde_product_bound_and_exposed_weight(exps, lam):
    seq = explicit([1.0] + [2.0 ** -e for e in exps])
    c = ClassifierConstants.synthetic_preset(lam)
    for j in range(1, len(exps) + 1):
        wt = wtilde(seq, lam, j, c)
        assert wt.w * wt.count >= j - 1
        bc = classify_bin(seq, lam, j, c)
        assert bc.kind is kind_from_props(bc.prop1, bc.prop2, bc.prop3)

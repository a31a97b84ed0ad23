import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backofflab.engine import backoff, new_process
from backofflab.errors import InsufficientSamples
from backofflab.metrics import (BottleConstants, PseudoParams, bottle_events, noise,
                                poisson_gof, prob_at_most_one_send, pseudorandomness_report,
                                record_bottle_trace, single_send_bound, summarize)
from backofflab.recurrence import EscapeConstants
from backofflab.send_sequence import explicit, make_family

P3 = explicit([1, 0.5, 0.25])
ALOHA = make_family({"family": "constant", "p": 0.5})


def test_noise_examples():
    assert noise([], P3, {1, 2}) == 0.0
    assert noise([4, 8], P3, {1, 2}) == 4.0
    assert noise([4, 8], P3, set()) == 0.0


@settings(max_examples=100, deadline=None)
@given(a=st.lists(st.integers(0, 100), min_size=6, max_size=6),
       b=st.lists(st.integers(0, 100), min_size=6, max_size=6),
       S=st.sets(st.integers(1, 6)))
def test_noise_is_linear(a, b, S):
    seq = make_family("binary_exponential")
    both = [x + y for x, y in zip(a, b)]
    assert noise(both, seq, S) == pytest.approx(noise(a, seq, S) + noise(b, seq, S), rel=1e-12)


def test_single_send_bound_cases():
    small = single_send_bound([8, 8], ALOHA, 0.1, {1, 2})
    assert not small.applicable
    ok = single_send_bound([8] * 4, ALOHA, 0.1, {1, 2, 3, 4}, set_floor=4)
    assert ok.applicable and ok.noise == 16.0
    assert ok.bound == pytest.approx(math.exp(-1))
    assert ok.bound == pytest.approx(0.3679, abs=1e-4)


def test_single_send_bound_monte_carlo():
    # four bins of 4 balls at p = 1/2: N_S = 8, hypotheses met with floor 4
    occ = np.array([4, 4, 4, 4])
    rep = single_send_bound(occ, ALOHA, 0.1, {1, 2, 3, 4}, set_floor=4)
    assert rep.applicable
    rng = np.random.default_rng(17)
    sends = rng.binomial(np.tile(occ, (10 ** 4, 1)), 0.5).sum(axis=1)
    emp = float((sends <= 1).mean())
    exact = prob_at_most_one_send(occ, ALOHA)
    assert exact == pytest.approx(17 * 2.0 ** -16, rel=1e-12)
    assert emp <= rep.bound
    assert exact <= rep.bound


def test_poisson_gof_degenerate_and_small():
    assert poisson_gof(np.zeros(200, dtype=int), 0.0) == (1.0, 1.0)
    with pytest.raises(InsufficientSamples):
        poisson_gof([1] * 99, 1.0)


def test_poisson_gof_negative_control():
    x = np.random.default_rng(3).binomial(6, 0.5, 10 ** 4)
    ratio, p = poisson_gof(x, 3.0)
    assert ratio == pytest.approx(0.5, abs=0.05)
    assert p < 1e-3


def test_poisson_gof_calibration():
    rng = np.random.default_rng(8)
    rejects = sum(poisson_gof(rng.poisson(3.0, 10 ** 4), 3.0)[1] <= 1e-3 for _ in range(1000))
    assert rejects <= 5


def test_bottle_constants():
    bc = BottleConstants(0.1)
    assert bc.c_b == pytest.approx(1 / (8 * math.log(70)))
    assert bc.c_b == pytest.approx(0.02942, abs=1e-5)
    assert bc.alpha_b == pytest.approx(4.597e-6, rel=1e-3)


def test_bottle_events_empty_and_newborn():
    e_n, e_s = bottle_events({"occupancy_pre": np.zeros((3, 4)), "old_sends": [0, 0, 0]},
                             ALOHA, 0.1, 10 ** 6)
    assert not e_n.any() and not e_s.any()
    with pytest.raises(ValueError):
        bottle_events({"occupancy_pre": np.zeros((1, 1)), "old_sends": [0]}, ALOHA, 0.1, 15)
    # from empty, the first step with a birth has only newborn senders
    proc = new_process(backoff(), make_family("binary_exponential"), 0.3, seed=9)
    tr = record_bottle_trace(proc, 50)
    first = next(t for t in range(50) if tr["occupancy_pre"][t].sum() == 0)
    _, e_s = bottle_events(tr, proc.seq, 0.3, 10 ** 6)
    assert not e_s[first]
    assert e_s.any()


def test_pseudorandomness_report_zero():
    rep = pseudorandomness_report([0.0, 0.0], P3, PseudoParams(0.1, 1.0, 2.0, 0.5, 0.1, 1.0))
    c = rep.conditions
    assert c.con1 and c.con2 and c.con3 and c.con4 and rep.af_good and rep.rs_good
    esc = EscapeConstants(0.1, p_override=(1.0, 1.0, 1.0))
    rep = pseudorandomness_report([9.0, 0.0], P3, PseudoParams(0.1, 1.0, 2.0, 0.5, 0.1, 1.0,
                                                               esc=esc))
    assert not rep.conditions.con4 and rep.conditions.slack4 == pytest.approx(-0.5)


def test_summarize_empty_and_censored():
    assert summarize({}, 5).windows == []
    s = summarize({"backlog": np.array([0, 1, 2, 3])}, 2)
    assert s.sojourn == [None] and s.censored == [True]
    with pytest.raises(ValueError):
        summarize({"backlog": [1]}, 0)


def test_summarize_toy_trace():
    back = np.array([0, 2, 3, 1, 0, 0, 4, 5, 6, 2])
    esc = np.array([0, 0, 1, 1, 1, 0, 0, 0, 1, 0])
    mb = np.array([0, 1, 2, 2, 0, 0, 3, 3, 4, 2])
    s = summarize({"backlog": back, "escapes": esc, "max_bin": mb}, 4)
    rows = s.rows()
    assert [r["window_start"] for r in rows] == [1, 5, 9]
    assert [r["backlog_mean"] for r in rows] == [1.5, 2.25, 4.0]
    assert [r["escapes_cum"] for r in rows] == [2, 3, 4]
    assert [r["empty_visits"] for r in rows] == [1, 2, 0]
    assert [r["max_bin"] for r in rows] == [2, 3, 4]
    assert s.sojourn == [5]


@settings(max_examples=50, deadline=None)
@given(esc=st.lists(st.integers(0, 3), min_size=1, max_size=60), w=st.integers(1, 10))
def test_summarize_window_refinement(esc, w):
    back = np.arange(len(esc))
    coarse = summarize({"backlog": back, "escapes": np.array(esc)}, 2 * w)
    fine = summarize({"backlog": back, "escapes": np.array(esc)}, w)
    assert coarse.rows()[-1]["escapes_cum"] == fine.rows()[-1]["escapes_cum"] == sum(esc)
    cum = [r["escapes_cum"] for r in fine.rows()]
    assert cum == sorted(cum)
    for k, r in enumerate(coarse.rows()):
        parts = fine.rows()[2 * k:2 * k + 2]
        n = [min(w, len(esc) - (2 * k + i) * w) for i in range(len(parts))]
        mean = sum(p["backlog_mean"] * m for p, m in zip(parts, n)) / sum(n)
        assert r["backlog_mean"] == pytest.approx(mean)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backofflab.engine import (Kind, Mode, PoissonStart, ProcessSpec, StandardCoupling,
                               backoff, constant_escape, escape, escape_nu, externally_jammed,
                               j_jammed, new_process, run, two_stream, under_backoff)
from backofflab.errors import (CouplingPreconditionViolated, InvalidInitialPopulation,
                               ModeUnsupported)
from backofflab.recurrence import f_at
from backofflab.send_sequence import explicit, make_family

BEB = make_family("binary_exponential")
ALOHA = make_family({"family": "constant", "p": 0.5})


def test_empty_start_and_zero_horizon():
    p = new_process(backoff(), BEB, 0.5, seed=1)
    assert p.backlog.tolist() == [0]
    before = p.counts.copy()
    assert run(p, 0, {"b": lambda pr, r: 1}) == {"b": []}
    assert np.array_equal(p.counts, before) and p.t == 0
    assert new_process(j_jammed(3), BEB, 0.5, initial=[0, 0, 0]).backlog.tolist() == [0]


def test_poisson_start_reproducible():
    a = new_process(j_jammed(2), BEB, 0.5, initial=PoissonStart([10.0, 2.0]), seed=7)
    b = new_process(j_jammed(2), BEB, 0.5, initial=PoissonStart([10.0, 2.0]), seed=7)
    assert np.array_equal(a.counts, b.counts)
    with pytest.raises(InvalidInitialPopulation):
        new_process(j_jammed(2), BEB, 0.5, initial=[1, 1, 1])


def test_single_sender_escapes():
    # one ball in bin 1 with p_1 = 1: it sends alone unless a newborn joins
    seq = explicit([1.0, 1.0, 0.5])
    p = new_process(backoff(), seq, 1e-12, initial=[1], mode=Mode.IDENTITY, seed=3)
    rep = p.step()
    assert rep.total_send.tolist() == [1] and rep.total_escape.tolist() == [1]
    assert p.backlog.tolist() == [0]


def test_escape_nu_values():
    lam = 0.1
    j = 10 ** 4
    spec = escape(j, [range(1, j + 1)], lam)
    p = ALOHA.probs(j + 1)
    b = np.zeros((1, j + 1))
    assert escape_nu(spec, b, p)[0] == pytest.approx(math.exp(-12.5 / 192), rel=1e-14)
    # the four-digit figure 0.93694 quoted for this case is a rounding slip of 3e-5
    assert escape_nu(spec, b, p)[0] == pytest.approx(0.93697, abs=5e-6)
    empty = escape(5, [], lam)
    assert escape_nu(empty, np.zeros((1, 6)), ALOHA.probs(6))[0] == 1.0
    small = escape(5, [[1, 2]], lam)
    assert escape_nu(small, np.zeros((1, 6)), ALOHA.probs(6))[0] == 1.0


def test_escape_process_all_arrive_when_nu_is_one():
    p = new_process(escape(4, [], 0.1), ALOHA, 0.0, seed=2)
    p.step()
    assert (p.occupancy[0, 1:5] >= 1).all()


ALL_KINDS = [backoff(), backoff(2), j_jammed(3), externally_jammed(), externally_jammed(4),
             two_stream(), under_backoff(), constant_escape(3, 0.3),
             escape(4, [[1, 2], [3]], 0.3, set_floor=2.0)]


@pytest.mark.parametrize("spec", ALL_KINDS, ids=lambda s: f"{s.kind.value}-{s.j}-{s.cohorts}")
def test_count_equals_identity(spec):
    rate = 0.0 if spec.kind in (Kind.CONSTANT_ESCAPE, Kind.ESCAPE) else 0.6
    a = new_process(spec, BEB, rate, seed=99, mode=Mode.COUNT, debug=True)
    b = new_process(spec, BEB, rate, seed=99, mode=Mode.IDENTITY, debug=True)
    for _ in range(200):
        ra, rb = a.step(), b.step()
        assert np.array_equal(ra.sends, rb.sends)
        assert np.array_equal(ra.escapes, rb.escapes)
        w = min(a.B, b.B)
        assert np.array_equal(a.counts[..., :w], b.counts[..., :w])
        if spec.kind in (Kind.J_JAMMED, Kind.CONSTANT_ESCAPE, Kind.ESCAPE):
            assert a.occupancy[0, spec.j + 1:].sum() == 0


def test_identity_sets_disjoint():
    p = new_process(two_stream(), BEB, 0.8, seed=5, mode=Mode.IDENTITY)
    for _ in range(300):
        p.step()
        seen = set()
        for g in range(p.G):
            for i in range(p.B):
                ids = set(p.balls[g][i])
                assert len(ids) == len(p.balls[g][i])
                assert not ids & seen
                seen |= ids


def test_identity_mode_single_replica_only():
    with pytest.raises(ModeUnsupported):
        new_process(backoff(), BEB, 0.5, mode=Mode.IDENTITY, replicas=2)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32), rate=st.floats(0.05, 0.95))
def test_backoff_escape_rule(seed, rate):
    p = new_process(backoff(), BEB, rate, seed=seed, replicas=4, debug=True)
    for _ in range(100):
        rep = p.step()
        esc, snd = rep.total_escape, rep.total_send
        assert (esc <= 1).all()
        assert ((esc == 1) == (snd == 1)).all()


def test_j_jammed_single_bin_mean():
    seq = explicit([1.0, 0.5])
    p = new_process(j_jammed(1), seq, 0.5, seed=2024, replicas=10 ** 4)
    for _ in range(160):
        p.step()
    b1 = p.occupancy[:, 1]
    want = f_at(seq, 0.5, [0.0], [0.0], 160)[0]
    assert want == pytest.approx(1 - 2.0 ** -160)
    se = b1.std(ddof=1) / math.sqrt(b1.size)
    assert abs(b1.mean() - want) <= 3 * se


def test_coupling_examples():
    lo = new_process(backoff(), BEB, 0.2, mode=Mode.IDENTITY, seed=1)
    up = new_process(backoff(), BEB, 0.5, mode=Mode.IDENTITY, seed=1)
    assert StandardCoupling(lo, up, seed=1).run(1000) == 0
    lo = new_process(two_stream(), BEB, 0.6, mode=Mode.IDENTITY, seed=2)
    up = new_process(backoff(2), BEB, 0.6, mode=Mode.IDENTITY, seed=2)
    assert StandardCoupling(lo, up, seed=2).run(1000) == 0
    empty = StandardCoupling(new_process(backoff(), BEB, 0.1, mode=Mode.IDENTITY),
                             new_process(backoff(), BEB, 0.1, mode=Mode.IDENTITY), seed=0)
    assert empty.run(0) == 0


def test_coupling_preconditions():
    lo = new_process(backoff(), BEB, 0.5, mode=Mode.IDENTITY)
    up = new_process(backoff(), BEB, 0.2, mode=Mode.IDENTITY)
    with pytest.raises(CouplingPreconditionViolated):
        StandardCoupling(lo, up)
    with pytest.raises(CouplingPreconditionViolated):
        StandardCoupling(new_process(backoff(), BEB, 0.1), new_process(backoff(), BEB, 0.2))
    with pytest.raises(CouplingPreconditionViolated):
        StandardCoupling(new_process(two_stream(), BEB, 0.4, mode=Mode.IDENTITY),
                         new_process(backoff(3), BEB, 0.4, mode=Mode.IDENTITY))
    with pytest.raises(CouplingPreconditionViolated):
        StandardCoupling(new_process(backoff(), BEB, 0.1, mode=Mode.IDENTITY),
                         new_process(backoff(), ALOHA, 0.2, mode=Mode.IDENTITY))


def test_externally_jammed_window_departures():
    p = new_process(externally_jammed(2), ALOHA, 0.9, seed=4)
    departed = 0
    for _ in range(200):
        rep = p.step()
        assert rep.total_escape.sum() == 0
        departed += int(rep.departed.sum())
    assert departed > 0
    assert p.occupancy[0, 3:].sum() == 0


def test_spec_validation():
    with pytest.raises(ValueError):
        ProcessSpec(Kind.J_JAMMED)
    with pytest.raises(ValueError):
        escape(3, [[1, 2], [2, 3]], 0.1)
    with pytest.raises(ValueError):
        escape(3, [[4]], 0.1)
    with pytest.raises(ValueError):
        constant_escape(3, 1.5)

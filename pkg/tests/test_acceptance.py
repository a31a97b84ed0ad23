"""Acceptance criteria 1-12.  Each test records one PASS/FAIL line, shown in
the terminal summary, then asserts the same verdict."""

import json
import time

import numpy as np
import pytest

import acceptance_log
from backofflab.classify import classify_bin, wtilde
from backofflab.cli import parse_config, run_experiment
from backofflab.constants import ClassifierConstants, constants_for
from backofflab.engine import (Mode, PoissonStart, StandardCoupling, backoff, externally_jammed,
                               j_jammed, new_process, two_stream, under_backoff)
from backofflab.hls_volume import (HighLevelState, Rule, StateType, check_axioms,
                                   random_domain_sample, random_sequence, veb_run)
from backofflab.metrics import poisson_gof
from backofflab.recurrence import (f_at, f_run, gamma_vector, h_run, kappa, missing, mu_vector,
                                   t_prot)
from backofflab.send_sequence import explicit, make_family

from oracles import L, naive_class, naive_wtilde


def verdict(k, ok, detail, started):
    line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}  [{time.perf_counter() - started:.1f}s]"
    print(line)
    acceptance_log.LINES.append(line)
    assert ok, line


def test_1_j_jammed_poisson_law():
    t0 = time.perf_counter()
    seq, lam, j, n = explicit([1, 0.5, 0.5, 0.25]), 0.5, 3, 10 ** 4
    T = t_prot(seq, j)
    assert T == 5760
    proc = new_process(j_jammed(j), seq, lam, seed=20240601, replicas=n)
    bad, worst_z, ratios, pvals = [], 0.0, [], []
    t = 0
    for mark in (50, 200, T):
        while t < mark:
            proc.step()
            t += 1
        want = f_at(seq, lam, np.zeros(j), np.zeros(j), mark)
        for k in range(1, j + 1):
            x = proc.occupancy[:, k]
            se = x.std(ddof=1) / np.sqrt(n)
            z = abs(x.mean() - want[k - 1]) / se
            ratio, p = poisson_gof(x, want[k - 1])
            worst_z = max(worst_z, z)
            ratios.append(ratio)
            if want[k - 1] >= 1:
                pvals.append(p)
            if z > 3 or not 0.9 <= ratio <= 1.1 or (want[k - 1] >= 1 and p <= 1e-3):
                bad.append((mark, k))
    verdict(1, not bad, f"max |z|={worst_z:.2f}, var/mean in [{min(ratios):.3f}, {max(ratios):.3f}], "
                        f"min chi2 p={min(pvals):.3g}", t0)


def test_2_fill_law():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    fails, checked = 0, 0
    for _ in range(50):
        j = int(rng.integers(1, 9))
        W = rng.integers(1, 65, size=j)
        seq = explicit([1.0] + [1.0 / w for w in W])
        for lam in (0.1, 0.3, 0.5):
            f = f_at(seq, lam, np.zeros(j), np.zeros(j), t_prot(seq, j))
            w = seq.weights(j + 1)[1:]
            fails += int((f < 0.9 * lam * w).sum())
            checked += j
    verdict(2, fails == 0, f"{fails} failures over {checked} bins", t0)


def test_3_externally_jammed_stationary():
    t0 = time.perf_counter()
    seq, lam, n = explicit([1, 0.5, 0.5, 0.25, 0.25, 0.125]), 0.5, 10 ** 4
    window = 5
    w = seq.weights(window + 1)[1:]
    proc = new_process(externally_jammed(window), seq, lam, initial=PoissonStart(lam * w),
                       seed=33, replicas=n)
    for _ in range(int(10 * w.max())):
        proc.step()
    means = proc.occupancy[:, 1:window + 1].mean(axis=0)
    rel = np.abs(means / (lam * w) - 1)[lam * w >= 0.5]
    verdict(3, bool((rel <= 0.05).all()), f"max relative deviation {rel.max():.4f}", t0)


def test_4_h_fixed_point():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        j = int(rng.integers(1, 33))
        seq = explicit([1.0] + [2.0 ** -int(e) for e in rng.integers(0, 13, size=j)])
        nu = float(rng.uniform(0, 0.05))
        k = kappa(seq, nu, j)
        vals = h_run(seq, nu, k, 1000).values
        dev = np.abs(vals - k) / np.where(k > 0, k, 1.0)
        worst = max(worst, float(dev.max()))
    verdict(4, worst <= 1e-12, f"max relative deviation {worst:.2e}", t0)


def _f_inst(rng):
    j = int(rng.integers(1, 9))
    seq = explicit([1.0] + [2.0 ** -int(e) for e in rng.integers(0, 7, size=j)])
    lam = float(rng.uniform(0.01, 0.99))
    gamma = rng.random(j) * rng.choice([0.0, 1.0])
    return seq, lam, gamma, rng.random(j), int(rng.integers(0, 1001))


def _tol(x):
    return 1e-12 * max(1.0, float(np.max(np.abs(x))))


def test_5_monotonicity_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    viol = dict(bounded=0, prefix_sum=0, order=0, pointwise=0, missing=0)
    for _ in range(200):
        seq, lam, gamma, frac, T = _f_inst(rng)
        mu = mu_vector(seq, lam, gamma)
        vals = f_run(seq, lam, gamma, frac * mu, T).values
        viol["bounded"] += int((vals < 0).any() or (vals > mu * (1 + 1e-12)).any())
        for jp in range(1, len(gamma) + 1):
            s = vals[:, :jp].sum(axis=1)
            viol["prefix_sum"] += int((np.diff(s) < -_tol(s)).any())

        seq, lam, gamma, frac, T = _f_inst(rng)
        j = len(gamma)
        lam_vec = np.minimum(1.0, gamma + rng.random(j))
        z = frac * 10
        hi = f_run(seq, lam, gamma, z, T).values
        lo = f_run(seq, lam, lam_vec, z * rng.random(j), T).values
        viol["order"] += int((hi < lo - _tol(hi)).any())

        seq, lam, gamma, _, T = _f_inst(rng)
        j = len(gamma)
        start = mu_vector(seq, lam, np.minimum(1.0, gamma + rng.random(j)))
        tr = f_run(seq, lam, gamma, start, T).values
        viol["pointwise"] += int((np.diff(tr, axis=0) < -_tol(tr)).any())

        seq, lam, _, frac, T = _f_inst(rng)
        j = len(frac)
        cc = ClassifierConstants.synthetic_preset(lam)
        mu = mu_vector(seq, lam, gamma_vector(j, cc))
        psi = HighLevelState(1, 0, j, tuple(frac * 2 * mu), (), StateType.FAILURE)
        S = list(range(1, int(rng.integers(1, j + 1)) + 1))
        m = [missing(psi, S, t, seq, lam, cc) for t in range(min(T, 80) + 1)]
        viol["missing"] += int(any(b > a + 1e-12 * max(1.0, a) for a, b in zip(m, m[1:])))
    verdict(5, sum(viol.values()) == 0, f"violations {viol}", t0)


def test_6_transition_axioms():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    lam = 0.5
    consts = constants_for(lam, synthetic=True)
    clean, mutant_hits, total = 0, 0, 0
    for _ in range(20):
        rule = Rule(random_sequence(rng), lam, consts)
        sample = [random_domain_sample(rule, rng, 32) for _ in range(500)]
        total += len(sample)
        clean += len(check_axioms(rule, sample, seed=6))
        mutant = Rule(rule.seq, lam, consts, skip_r2_zeroing=True)
        mutant_hits += len(check_axioms(mutant, sample, seed=6))
    verdict(6, clean == 0 and mutant_hits >= 1,
            f"{clean} violations on {total} triples; mutant found {mutant_hits}", t0)


def test_7_coupling_invariants():
    t0 = time.perf_counter()
    beb = make_family("binary_exponential")
    pairs = {
        "standard": lambda s: (new_process(backoff(), beb, 0.2, mode=Mode.IDENTITY, seed=s),
                               new_process(backoff(), beb, 0.5, mode=Mode.IDENTITY, seed=s)),
        "two_stream": lambda s: (new_process(two_stream(), beb, 0.5, mode=Mode.IDENTITY, seed=s),
                                 new_process(backoff(2), beb, 0.5, mode=Mode.IDENTITY, seed=s)),
        "under_backoff": lambda s: (new_process(under_backoff(), beb, 0.5, mode=Mode.IDENTITY,
                                                seed=s),
                                    new_process(backoff(3), beb, 0.5, mode=Mode.IDENTITY,
                                                seed=s)),
    }
    counts = {}
    for name, make in pairs.items():
        counts[name] = sum(StandardCoupling(*make(s), seed=s).run(1000) for s in range(100))
    verdict(7, sum(counts.values()) == 0, f"violations {counts}", t0)


def test_8_veb_invariant():
    t0 = time.perf_counter()
    lam = 0.005
    consts = constants_for(lam, synthetic=True)
    seq = explicit([1.0] + [1e-4] * 3 + [2.0 ** -40] * 60)
    i2, malformed, moves = 0, 0, 0
    for seed in range(20):
        tr = veb_run(seq, lam, 3, 10 ** 4, seed=seed, consts=consts)
        i2 += tr.i2_violations
        malformed += int(not tr.well_formed())
        moves += len(tr.transitions)
    verdict(8, i2 == 0 and malformed == 0,
            f"{i2} I2 violations, {malformed} malformed logs, {moves} transitions", t0)


def test_9_classification_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    wt_bad = cls_bad = 0
    for _ in range(100):
        j = int(rng.integers(1, 65))
        exps = [int(e) for e in rng.integers(0, 17, size=j)]
        seq = explicit([1.0] + [2.0 ** -e for e in exps])
        ints = [2 ** e for e in exps]
        lam = float(rng.choice([0.05, 0.3, 0.7]))
        c = ClassifierConstants.synthetic_preset(lam)
        for jj in range(2, j + 1):
            got = wtilde(seq, lam, jj, c)
            need = min(jj - 1, c.c_upsilon * L(lam, jj, c.c_no) / lam)
            if (got.w, got.count) != naive_wtilde(ints[:jj - 1], need):
                wt_bad += 1
        for consts in (c, ClassifierConstants.genuine(lam)):
            bc = classify_bin(seq, lam, j, consts)
            kind, props, wc = naive_class(ints, lam, j, consts.c_no, consts.c_upsilon,
                                          consts.c_f, consts.phi, consts.chi, consts.c_se_factor)
            if (bc.kind.value, (bc.prop1, bc.prop2, bc.prop3),
                    (bc.wtilde, bc.upsilon_wtilde)) != (kind, props, wc):
                cls_bad += 1
    verdict(9, wt_bad == 0 and cls_bad == 0,
            f"{wt_bad} wtilde mismatches, {cls_bad} verdict mismatches", t0)


def _grow(seq, seed, horizon=10 ** 5, replicas=20):
    proc = new_process(backoff(), seq, 0.5, seed=seed, replicas=replicas)
    esc = np.zeros((horizon, replicas), dtype=np.int64)
    at_1000 = None
    revisit = np.zeros(replicas, dtype=bool)
    for t in range(1, horizon + 1):
        rep = proc.step()
        esc[t - 1] = rep.total_escape
        if t == 1000:
            at_1000 = proc.backlog.copy()
        elif t > 1000:
            revisit |= proc.backlog == 0
    return proc.backlog.copy(), at_1000, revisit, esc


def test_10_instability_demo():
    # demonstration only: a finite-horizon picture, not a proof
    t0 = time.perf_counter()
    final, early, revisit, _ = _grow(make_family("binary_exponential"), 10)
    grew = float((final > early).mean())
    stay = float((~revisit).mean())
    verdict(10, grew >= 0.95 and stay >= 0.90,
            f"backlog grew in {grew:.0%}, never empty after t=1000 in {stay:.0%}, "
            f"median final backlog {int(np.median(final))}", t0)


def test_11_polynomial_escapes_demo():
    # demonstration only: a finite-horizon picture, not a proof
    t0 = time.perf_counter()
    *_, esc = _grow(make_family({"family": "polynomial", "c": 2.0}), 11)
    first, last = esc[:10 ** 4].sum(axis=0), esc[-10 ** 4:].sum(axis=0)
    share = float((last <= first).mean())
    verdict(11, share >= 0.90,
            f"last-decile escapes <= first-decile in {share:.0%} "
            f"(mean {first.mean():.0f} -> {last.mean():.0f})", t0)


def _snapshot(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "timing.json"}


def test_12_determinism(tmp_path):
    t0 = time.perf_counter()
    base = {"experiment": "det", "lambda": 0.5, "horizon": 500, "replicas": 3, "base_seed": 99,
            "sequence": {"family": "binary_exponential"}}
    configs = {
        "simulate_csv": {**base, "process": {"kind": "backoff"}},
        "simulate_jsonl": {**base, "process": {"kind": "j_jammed", "j": 3},
                           "output": {"format": "jsonl"}},
        "veb": {**base, "lambda": 0.005, "horizon": 300, "synthetic_constants": True,
                "sequence": {"family": "explicit", "probs": [1.0] + [1e-4] * 3 + [2.0 ** -40] * 60},
                "process": {"kind": "veb", "j0": 3}},
    }
    differ = []
    for name, raw in configs.items():
        cfg = parse_config(json.dumps(raw))
        run_experiment(cfg, tmp_path / name / "a")
        run_experiment(cfg, tmp_path / name / "b")
        if _snapshot(tmp_path / name / "a") != _snapshot(tmp_path / name / "b"):
            differ.append(name)
    verdict(12, not differ, f"{len(configs) - len(differ)}/{len(configs)} runs byte-identical", t0)

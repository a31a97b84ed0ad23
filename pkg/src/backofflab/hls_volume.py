"""High-level states, the backoff-bounding transition rule, the volume process
and the volume/escape/backoff composite.

A high-level state is (g, tau, j, z, S, type).  ``Rule`` bundles the send
sequence, the rate and the constants, caches the per-j bin sets and applies
the rule.  ``hls`` returns the next state; ``Rule.apply`` also reports which
clause fired.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence

import numpy as np
from scipy import stats

from .classify import BinKind, classify_bin, weight_at_least, wtilde
from .constants import LabConstants, constants_for
from .engine import Kind, Process, ProcessSpec, StepReport, escape_nu, j_jammed
from .errors import DomainViolation, InvariantViolation
from .recurrence import _f_parts, f_at, f_step, gamma_vector, mu_vector, t_prot
from .send_sequence import SendSequence


class StateType(str, Enum):
    FAILURE = "failure"
    INITIALISING = "initialising"
    ADVANCING = "advancing"
    FILLING = "filling"
    REFILLING = "refilling"
    STABILISING = "stabilising"


@dataclass(frozen=True)
class HighLevelState:
    g: int
    tau: int
    j: int
    z: tuple[float, ...]
    sets: tuple[frozenset, ...]
    type: StateType

    def __post_init__(self) -> None:
        if len(self.z) != self.j:
            raise InvariantViolation(f"z has {len(self.z)} entries for j={self.j}")
        seen: set[int] = set()
        for s in self.sets:
            if not s or seen & s or min(s) < 1 or max(s) > self.j:
                raise InvariantViolation("sets must be non-empty, disjoint and inside [j]")
            seen |= s

    @property
    def zvec(self) -> np.ndarray:
        return np.asarray(self.z, dtype=float)

    def summary(self) -> dict:
        return {"g": self.g, "tau": self.tau, "j": self.j, "type": self.type.value}


@dataclass(frozen=True)
class Transition:
    state: HighLevelState
    rule: str  # e.g. "R2(ii)"; "T3" marks the written fallback of a clause
    fallback: bool = False


BACK_TRANSITIONS = {
    (StateType.REFILLING, StateType.REFILLING, "R5(i)"),
    (StateType.STABILISING, StateType.REFILLING, "R2(ii)"),
    (StateType.STABILISING, StateType.REFILLING, "R6(i)"),
}


def is_back_transition(prev: HighLevelState, nxt: HighLevelState, via: str) -> bool:
    if prev == nxt:
        return False
    return (prev.type, nxt.type, via) in BACK_TRANSITIONS


class Rule:
    """The backoff-bounding rule for one (sequence, rate, constants) triple.

    ``skip_r2_zeroing`` is a deliberately broken variant used as a negative
    control: R2(ii) keeps min(F, mu) on every bin instead of zeroing the
    light ones.
    """

    def __init__(self, seq: SendSequence, lam: float, consts: LabConstants | None = None,
                 skip_r2_zeroing: bool = False, validate: bool = True):
        self.seq = seq
        self.lam = float(lam)
        self.consts = consts or constants_for(lam)
        if self.consts.lam != self.lam:
            raise ValueError("constants were built for a different rate")
        self.cc = self.consts.classifier
        self.rc = self.consts.rule
        self.skip_r2_zeroing = skip_r2_zeroing
        self.validate = validate and not skip_r2_zeroing
        self._sets: dict[tuple, tuple[int, ...]] = {}
        self._mu: np.ndarray = np.zeros(0)

    # -------------------------------------------------------- per-j data
    def kind(self, j: int) -> BinKind:
        return classify_bin(self.seq, self.lam, j, self.cc).kind

    def covered(self, j: int) -> bool:
        return self.kind(j).covered

    def weight(self, k: int) -> float:
        return self.seq.weight(k)

    def upsilon(self, j: int, threshold: int) -> tuple[int, ...]:
        """{l in [j-1] : W_l >= threshold}."""
        key = ("u", j, threshold)
        hit = self._sets.get(key)
        if hit is None:
            hit = tuple(k for k in range(1, j) if weight_at_least(self.seq, k, threshold))
            self._sets[key] = hit
        return hit

    def upsilon_wtilde(self, j: int) -> tuple[int, ...]:
        key = ("wt", j)
        hit = self._sets.get(key)
        if hit is None:
            wt = wtilde(self.seq, self.lam, j, self.cc)
            if wt.w is not None:
                hit = self.upsilon(j, wt.w)
            else:
                hit = tuple(k for k in range(1, j) if self.seq.log_weight(k) >= wt.log_w)
            self._sets[key] = hit
        return hit

    def chi_set(self, j: int) -> tuple[int, ...]:
        return self.upsilon(j, j ** self.cc.chi)

    def sq_set(self, j: int) -> tuple[int, ...]:
        return self.upsilon(j, j * j)

    def sq_set_next(self, j: int) -> tuple[int, ...]:
        """Upsilon_{j+1, >= j^2}: bins of [j] with W >= j^2."""
        return self.upsilon(j + 1, j * j)

    def mu(self, j: int) -> np.ndarray:
        if self._mu.shape[0] < j:
            n = max(j, 2 * self._mu.shape[0])
            if self.seq.length is not None:
                n = max(j, min(n, self.seq.length - 1))
            self._mu = mu_vector(self.seq, self.lam, gamma_vector(n, self.cc))
        return self._mu[:j]

    def F(self, psi: HighLevelState, t: int) -> np.ndarray:
        if t < psi.tau:
            raise DomainViolation(f"t={t} precedes tau={psi.tau}")
        return f_at(self.seq, self.lam, np.zeros(psi.j), psi.zvec, t - psi.tau)

    def noise(self, S: Iterable[int], b: Sequence[float]) -> float:
        return float(sum(self.seq.prob(k) * b[k - 1] for k in S))

    def noise_ok(self, S: frozenset, b: Sequence[float]) -> bool:
        return self.noise(S, b) >= self.lam * len(S) / self.rc.noise_divisor

    def t3_ok(self, psi: HighLevelState, b: Sequence[float]) -> bool:
        return all(self.noise_ok(S, b) for S in psi.sets)

    # -------------------------------------------------------- constructors
    def _fam(self, *groups: Iterable[int]) -> tuple[frozenset, ...]:
        return tuple(frozenset(s) for s in groups if len(set(s)) > 0)

    def failure(self, g: int, tau: int, j: int) -> HighLevelState:
        return HighLevelState(g, tau, j, (0.0,) * j, (), StateType.FAILURE)

    def initialising(self, tau: int, j: int) -> HighLevelState:
        w = self.seq.weights(j + 1)[1:]
        z = tuple(float(x) for x in 0.75 * self.lam * w)
        return HighLevelState(0, tau, j, z, (), StateType.INITIALISING)

    def advancing(self, g: int, tau: int, j: int) -> HighLevelState:
        kind = self.kind(j)
        if not kind.covered:
            raise InvariantViolation(f"advancing state needs bin {j} covered, it is {kind.value}")
        z = tuple(float(x) for x in self.mu(j - 1)) + (0.0,)
        if kind is BinKind.MANY_COVERED:
            fam = self._fam(self.upsilon_wtilde(j))
        else:
            fam = self._fam(self.sq_set(j))
        return HighLevelState(g, tau, j, z, fam, StateType.ADVANCING)

    def _need_exposed(self, j: int, what: str) -> None:
        kind = self.kind(j)
        if kind.covered:
            raise InvariantViolation(f"{what} state needs bin {j} exposed, it is {kind.value}")

    def filling(self, g: int, tau: int, j: int, z_j: float) -> HighLevelState:
        self._need_exposed(j, "filling")
        z = tuple(float(x) for x in self.mu(j - 1)) + (float(z_j),)
        light = set(self.upsilon_wtilde(j)) - set(self.sq_set(j))
        fam = self._fam(sorted(light), *[[k] for k in self.chi_set(j)])
        return HighLevelState(g, tau, j, z, fam, StateType.FILLING)

    def refilling(self, g: int, tau: int, j: int, values: dict[int, float]) -> HighLevelState:
        """``values`` gives z_k on Upsilon_{j+1,>=j^2}; every other bin is 0."""
        self._need_exposed(j, "refilling")
        allowed = set(self.sq_set_next(j))
        if set(values) - allowed and not self.skip_r2_zeroing:
            raise InvariantViolation("refilling z must vanish on bins with W < j^2")
        z = tuple(float(values.get(k, 0.0)) for k in range(1, j + 1))
        fam = self._fam(*[[k] for k in self.chi_set(j)])
        return HighLevelState(g, tau, j, z, fam, StateType.REFILLING)

    def stabilising(self, g: int, tau: int, j: int, z_j: float) -> HighLevelState:
        self._need_exposed(j, "stabilising")
        z = tuple(float(x) for x in self.mu(j - 1)) + (float(z_j),)
        cut = math.floor(math.log(j) ** 2) if j > 1 else 0
        light = [k for k in range(1, j) if not weight_at_least(self.seq, k, j * j)]
        low = [k for k in light if k <= cut]
        high = [k for k in light if k > cut]
        fam = self._fam(low, high, *[[k] for k in self.chi_set(j)])
        return HighLevelState(g, tau, j, z, fam, StateType.STABILISING)

    def make_state(self, type_: StateType | str, g: int, tau: int, j: int,
                   **extra: Any) -> HighLevelState:
        type_ = StateType(type_)
        if j < 1:
            raise InvariantViolation("j must be positive")
        if type_ is StateType.FAILURE:
            return self.failure(g, tau, j)
        if type_ is StateType.INITIALISING:
            if g != 0:
                raise InvariantViolation("initialising states have g = 0")
            return self.initialising(tau, j)
        if type_ is StateType.ADVANCING:
            return self.advancing(g, tau, j)
        if type_ is StateType.FILLING:
            return self.filling(g, tau, j, extra.get("z_j", 0.0))
        if type_ is StateType.STABILISING:
            return self.stabilising(g, tau, j, extra.get("z_j", 0.0))
        return self.refilling(g, tau, j, dict(extra.get("values", {})))

    def validate_state(self, psi: HighLevelState) -> None:
        """Rebuild psi from its defining data and compare."""
        j = psi.j
        if psi.type is StateType.REFILLING:
            vals = {k: psi.z[k - 1] for k in range(1, j + 1) if psi.z[k - 1] != 0.0}
            ref = self.refilling(psi.g, psi.tau, j, vals)
        elif psi.type is StateType.INITIALISING:
            ref = self.initialising(psi.tau, j)
        else:
            ref = self.make_state(psi.type, psi.g, psi.tau, j, z_j=psi.z[-1])
        if ref != psi:
            raise InvariantViolation(f"state does not satisfy the {psi.type.value} invariants")

    # -------------------------------------------------------- the rule
    def apply(self, psi: HighLevelState, b: Sequence[float], t: int,
              F: np.ndarray | None = None) -> Transition:
        j = psi.j
        if t <= psi.tau:
            raise DomainViolation(f"t={t} must exceed tau={psi.tau}")
        if psi.type is StateType.INITIALISING and t != psi.tau + 1:
            raise DomainViolation("an initialising state only moves at tau + 1")
        b = [float(x) for x in b]
        if len(b) != j:
            raise DomainViolation(f"occupancy has {len(b)} entries for j={j}")
        g1 = psi.g + 1
        fail = self.failure(g1, t, j)
        if psi.type is StateType.FAILURE:
            return Transition(fail, "R1(i)")
        if F is None:
            F = self.F(psi, t)
        lam = self.lam

        for k in self.chi_set(j):
            if F[k - 1] < lam * self.weight(k) / 2.0:
                return Transition(fail, "R1(ii)")
        for k in self.sq_set(j):
            w = self.weight(k)
            if F[k - 1] >= lam * w / 2.0 and b[k - 1] < lam * w / 4.0:
                return Transition(fail, "R1(iii)")

        if any(not self.noise_ok(S, b) for S in psi.sets):
            if psi.type in (StateType.REFILLING, StateType.ADVANCING):
                return Transition(fail, "R2(i)")
            mu = self.mu(j)
            if self.skip_r2_zeroing:
                keep = range(1, j + 1)
            else:
                keep = self.sq_set_next(j)
            vals = {k: min(float(F[k - 1]), float(mu[k - 1])) for k in keep}
            return Transition(self.refilling(g1, t, j, vals), "R2(ii)")

        if psi.type is StateType.INITIALISING:
            if self.covered(j):
                cand, tag = self.advancing(g1, t, j), "R3(i)"
            else:
                cand, tag = self.filling(g1, t, j, 0.0), "R3(ii)"
            return self._or_fail(cand, tag, b, fail)

        if psi.type in (StateType.ADVANCING, StateType.FILLING):
            if t >= psi.tau + j ** self.rc.advance_exp and F[j - 1] >= self.mu(j)[j - 1]:
                nj = j + 1
                if self.covered(nj):
                    cand = self.advancing(g1, t, nj)
                else:
                    cand = self.filling(g1, t, nj, 0.0)
                return self._or_fail(cand, "R4(i)", b + [0.0], fail)
            return Transition(psi, "R4(ii)")

        phi = self.cc.phi
        if psi.type is StateType.REFILLING:
            mu = self.mu(j)
            if (t >= psi.tau + j ** (phi + self.rc.refill_offset)
                    and all(F[k - 1] >= mu[k - 1] for k in range(1, j))):
                cand = self.stabilising(g1, t, j, float(F[j - 1]))
                return self._or_refill(cand, "R5(i)", b, F, g1, t)
            return Transition(psi, "R5(ii)")

        # stabilising
        if t >= psi.tau + j ** (phi + self.rc.stabilise_offset):
            cand = self.filling(g1, t, j, float(F[j - 1]))
            return self._or_refill(cand, "R6(i)", b, F, g1, t)
        return Transition(psi, "R6(ii)")

    def _or_fail(self, cand: HighLevelState, tag: str, b: Sequence[float],
                 fail: HighLevelState) -> Transition:
        if self.t3_ok(cand, b):
            return Transition(cand, tag)
        return Transition(fail, tag, fallback=True)

    def _or_refill(self, cand: HighLevelState, tag: str, b: Sequence[float],
                   F: np.ndarray, g1: int, t: int) -> Transition:
        if self.t3_ok(cand, b):
            return Transition(cand, tag)
        j = cand.j
        vals = {k: float(F[k - 1]) for k in self.sq_set_next(j)}
        return Transition(self.refilling(g1, t, j, vals), tag, fallback=True)

    def __call__(self, psi: HighLevelState, b: Sequence[float], t: int) -> HighLevelState:
        return self.apply(psi, b, t).state


def hls(psi: HighLevelState, b: Sequence[float], t: int, rule: Rule) -> HighLevelState:
    return rule.apply(psi, b, t).state


# ------------------------------------------------------------------ axioms

@dataclass(frozen=True)
class AxiomViolation:
    axiom: str
    index: int
    detail: str


def _raise_vec(b: Sequence[int], frozen: set[int], rng: np.random.Generator) -> list[int]:
    out = list(b)
    for k in range(1, len(b) + 1):
        if k in frozen:
            continue
        if rng.random() < 0.6:
            out[k - 1] += int(rng.geometric(0.2))
    return out


def check_axioms(rule: Rule, sample: Iterable[tuple[HighLevelState, Sequence[int], int]],
                 seed: Any = 0, raises: int = 4, rel_tol: float = 1e-12) -> list[AxiomViolation]:
    """Check T1-T5 directly and V1-V3 by re-running the rule on raised vectors."""
    rng = np.random.default_rng(seed)
    bad: list[AxiomViolation] = []
    for idx, (psi, b, t) in enumerate(sample):
        F = rule.F(psi, t)
        tr = rule.apply(psi, b, t, F)
        new = tr.state
        changed = new != psi

        def flag(ax: str, msg: str) -> None:
            bad.append(AxiomViolation(ax, idx, f"{tr.rule}: {msg}"))

        if changed and (new.g != psi.g + 1 or new.tau != t):
            flag("T1", f"g {psi.g}->{new.g}, tau {new.tau} at t={t}")
        if psi.type is StateType.FAILURE and new != rule.failure(psi.g + 1, t, psi.j):
            flag("T2", "failure must map to the next failure state")
        bb = list(b) + [0] * max(0, new.j - psi.j)
        if not rule.t3_ok(new, bb):
            flag("T3", "a set of the new state is below the noise floor")
        if new.j < psi.j or any(new.z[l - 1] != 0.0 for l in range(psi.j + 1, new.j + 1)):
            flag("T4", f"j {psi.j}->{new.j} or fresh bins carry mass")
        if psi.type is StateType.INITIALISING and new.j != psi.j:
            flag("T4", "initialising states keep j")
        if new.type is StateType.INITIALISING:
            flag("T5", "re-entered an initialising state")
        if changed:
            for l in range(1, psi.j + 1):
                if new.z[l - 1] > F[l - 1] * (1.0 + rel_tol) + 1e-300:
                    flag("V1", f"z'_{l}={new.z[l - 1]} > F={F[l - 1]}")
                    break
            frozen = {k for k in range(1, psi.j + 1) if new.z[k - 1] == 0.0}
            for _ in range(raises):
                bp = _raise_vec(b, frozen, rng)
                if rule.apply(psi, bp, t, F).state != new:
                    flag("V3", f"raise {bp} changed the outcome")
                    break
        else:
            for r in range(raises):
                bp = _raise_vec(b, set(), rng) if r else [x + 10 ** 6 for x in b]
                if rule.apply(psi, bp, t, F).state != psi:
                    flag("V2", f"raise {bp} left the fixed point")
                    break
    return bad


def random_sequence(rng: np.random.Generator, length: int = 40, max_exp: int = 16) -> SendSequence:
    from .send_sequence import explicit
    exps = [0] + [int(e) for e in rng.integers(1, max_exp + 1, size=length - 1)]
    return explicit([2.0 ** -e for e in exps])


def random_domain_sample(rule: Rule, rng: np.random.Generator, j_max: int = 32
                         ) -> tuple[HighLevelState, list[int], int]:
    """A random (psi, b, t) in the rule's domain, biased towards boundaries."""
    lam = rule.lam
    while True:
        j = int(rng.integers(2, j_max + 1))
        covered = rule.covered(j)
        types = [StateType.FAILURE, StateType.INITIALISING]
        types += [StateType.ADVANCING] if covered else [
            StateType.FILLING, StateType.REFILLING, StateType.STABILISING]
        ty = types[int(rng.integers(len(types)))]
        tau = int(rng.integers(0, 50))
        g = 0 if ty is StateType.INITIALISING else int(rng.integers(1, 20))
        w = rule.seq.weights(j + 1)[1:]
        if not np.isfinite(w).all():
            continue
        mu = rule.mu(j)
        zj = float(rng.choice([0.0, mu[-1] * rng.random(), mu[-1] * (1 + rng.random())]))
        if ty is StateType.REFILLING:
            vals = {k: float(mu[k - 1] * rng.choice([0.3, 0.8, 1.0, 1.2]))
                    for k in rule.sq_set_next(j)}
            psi = rule.refilling(g, tau, j, vals)
        else:
            psi = rule.make_state(ty, g, tau, j, z_j=zj)
        if ty is StateType.INITIALISING:
            t = tau + 1
        else:
            phi = rule.cc.phi
            marks = [j ** rule.rc.advance_exp, j ** (phi + rule.rc.refill_offset),
                     j ** (phi + rule.rc.stabilise_offset)]
            m = int(rng.choice(marks))
            dt = int(rng.choice([1, int(rng.integers(1, 40)), max(1, m - 1), m, m + int(rng.integers(0, 50))]))
            t = tau + dt
        scale = rng.choice([0.05, 0.2, 0.3, 0.8, 1.5])
        b = [int(x) for x in rng.poisson(scale * lam * w)]
        return psi, b, t


# ------------------------------------------------------------------ volume

@dataclass
class VolumeState:
    """Volume process: current high-level state plus the bins [j] it tracks."""

    rule: Rule
    psi: HighLevelState
    counts: np.ndarray  # length j
    rng: np.random.Generator
    F: np.ndarray = field(default=None)  # F^psi at the current clock
    t: int = 0
    log: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.F is None:
            self.F = self.rule.F(self.psi, self.t)
        if len(self.counts) != self.psi.j:
            raise InvariantViolation("volume counts must cover exactly [j]")


def new_volume(rule: Rule, psi0: HighLevelState, seed: Any = None) -> VolumeState:
    rng = np.random.default_rng(seed)
    counts = rng.poisson(psi0.zvec)
    return VolumeState(rule, psi0, counts.astype(np.int64), rng, None, psi0.tau)


def thin_ratio(z_new: Sequence[float], F_old: np.ndarray, j_old: int) -> np.ndarray:
    """Keep-probabilities min(1, z'_k / F_k) on [j_old]; 0 where z' or F is 0."""
    z = np.asarray(z_new[:j_old], dtype=float)
    F = np.asarray(F_old, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where((z > 0) & (F > 0), np.minimum(1.0, z / F), 0.0)
    return r


def volume_step(V: VolumeState) -> tuple[VolumeState, HighLevelState, StepReport]:
    """One step: j-jammed evolution from the current counts, the rule, thinning."""
    rule, psi = V.rule, V.psi
    j = psi.j
    Y = Process(j_jammed(j), rule.seq, rule.lam, tau=V.t, initial=V.counts, rng=V.rng)
    rep = Y.step()
    t = V.t + 1
    b = Y.bins()[:j]
    stay, feed = _f_parts(rule.seq, rule.lam, np.zeros(j), j)
    F_t = f_step(V.F, rule.lam, stay, feed)
    tr = rule.apply(psi, b, t, F_t)
    new = tr.state
    if new == psi:
        V.counts, V.F = b.copy(), F_t
    else:
        keep = thin_ratio(new.z, F_t, j)
        thinned = V.rng.binomial(b, keep)
        counts = np.zeros(new.j, dtype=np.int64)
        counts[:j] = thinned
        V.counts, V.F = counts, new.zvec.copy()
        V.log.append({"t": t, "rule": tr.rule, "fallback": tr.fallback,
                      "back": is_back_transition(psi, new, tr.rule), **new.summary()})
    V.psi, V.t = new, t
    return V, new, rep


# ------------------------------------------------------------------ VEB composite

class BallBins:
    """Named balls by bin with O(1) insert, delete and membership."""

    def __init__(self) -> None:
        self.bins: dict[int, list] = {}
        self.pos: dict[Any, tuple[int, int]] = {}

    def add(self, i: int, ball: Any) -> None:
        if ball in self.pos:
            raise InvariantViolation(f"ball {ball} is already present")
        lst = self.bins.setdefault(i, [])
        self.pos[ball] = (i, len(lst))
        lst.append(ball)

    def remove(self, ball: Any) -> int:
        i, k = self.pos.pop(ball)
        lst = self.bins[i]
        last = lst.pop()
        if k < len(lst):
            lst[k] = last
            self.pos[last] = (i, k)
        return i

    def __contains__(self, ball: Any) -> bool:
        return ball in self.pos

    def bin_of(self, ball: Any) -> int | None:
        hit = self.pos.get(ball)
        return None if hit is None else hit[0]

    def count(self, i: int) -> int:
        return len(self.bins.get(i, ()))

    def members(self, i: int) -> list:
        return self.bins.get(i, [])

    def occupied(self) -> list[int]:
        return sorted(i for i, lst in self.bins.items() if lst)

    def counts(self, j: int) -> np.ndarray:
        return np.array([self.count(i) for i in range(1, j + 1)], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.pos)

    def copy(self) -> "BallBins":
        out = BallBins()
        out.bins = {i: list(v) for i, v in self.bins.items()}
        out.pos = dict(self.pos)
        return out


def sample_excluding(items: list, k: int, exclude: set, rng: np.random.Generator) -> list:
    """k distinct uniform picks from items \\ exclude (exclude is small)."""
    n = len(items)
    if k <= 0:
        return []
    if 4 * (k + len(exclude)) >= n:
        pool = [x for x in items if x not in exclude]
        idx = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
        return [pool[i] for i in idx]
    out: list = []
    taken: set = set()
    while len(out) < k:
        x = items[int(rng.integers(n))]
        if x in exclude or x in taken:
            continue
        taken.add(x)
        out.append(x)
    return out


def truncated_poisson_ge1(rng: np.random.Generator, lam: float, size) -> np.ndarray:
    """Po(lam) conditioned on >= 1 by inverse CDF on the truncated law."""
    p0 = math.exp(-lam)
    u = rng.random(size)
    return stats.poisson.ppf(p0 + u * (1.0 - p0), lam).astype(np.int64).clip(min=1)


@dataclass
class VEBTrace:
    tau0: int
    transitions: list[dict]
    i1_violations: int
    i2_violations: int
    max_backlog: int
    steps: int
    failed_at: int | None
    warmup_deficit: list[int]
    final_state: dict
    i2_events: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"tau0": self.tau0, "steps": self.steps, "i1_violations": self.i1_violations,
                "i2_violations": self.i2_violations, "max_backlog": self.max_backlog,
                "failed_at": self.failed_at, "transitions": len(self.transitions),
                "warmup_deficit": self.warmup_deficit, "final_state": self.final_state}

    def well_formed(self) -> bool:
        prev_g = 0
        for rec in self.transitions:
            if rec["g"] != prev_g + 1 or rec["tau"] != rec["t"]:
                return False
            prev_g = rec["g"]
        return True


def warmup_length(seq: SendSequence, j0: int, consts: LabConstants) -> int:
    """T^{p,j0} with its leading factor 80 replaced by the rule constants' factor."""
    f = Fraction(consts.rule.warmup_factor).limit_denominator(10 ** 6)
    return math.ceil(Fraction(t_prot(seq, j0)) * f / 80)


def veb_warmup(seq: SendSequence, lam: float, j0: int, consts: LabConstants,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
    """Run X (two cohorts at rate lam each, cohort B forced to >= 1 birth per
    step) in count mode up to tau0.  Returns the cohort counts (A, B) over bins
    1.. and tau0.  Balls of one cohort in one bin are exchangeable, so naming
    them at tau0 loses nothing."""
    tau0 = warmup_length(seq, j0, consts)
    born_a = rng.poisson(lam, tau0)
    born_b = truncated_poisson_ge1(rng, lam, tau0)
    B = 16
    p = seq.probs(B)
    c = np.zeros((2, B), dtype=np.int64)
    for t in range(tau0):
        c[0, 0] = born_a[t]
        c[1, 0] = born_b[t]
        s = rng.binomial(c, p)
        esc = s.sum() == 1
        c -= s
        if esc:
            s = np.zeros_like(s)
        c[:, 1:] += s[:, :-1]
        if c[:, -1].any():
            extra = B if seq.length is None else min(B, seq.length - B)
            if extra <= 0:
                raise InvariantViolation("warmup ran past the end of the sequence")
            c = np.concatenate([c, np.zeros((2, extra), dtype=np.int64)], axis=1)
            B += extra
            p = seq.probs(B)
    return c[0, 1:].copy(), c[1, 1:].copy(), tau0


def veb_run(seq: SendSequence, lam: float, j0: int, horizon: int, seed: Any = None,
            consts: LabConstants | None = None, check_every: int = 1,
            arrival_shift: int = 1) -> VEBTrace:
    """The volume/escape/backoff composite, in identity mode.

    ``horizon`` counts coupled steps after the warmup.  Escapes of X from bin
    i < j enter the escape process in bin i + 1, the bin the same ball
    occupies in the j-jammed copy; every other bin of [j] receives a fresh
    ball with probability nu.  ``arrival_shift=0`` files the escaped ball
    under the bin it escaped from instead; it exists as a negative control.
    """
    if not 0.0 < lam < 1.0 / 120.0:
        raise ValueError("the composite needs lam in (0, 1/120)")
    if j0 < 2:
        raise ValueError("j0 must be at least 2")
    consts = consts or constants_for(lam)
    rule = Rule(seq, lam, consts)
    rng = np.random.default_rng(seed)
    cnt_a, cnt_b, tau0 = veb_warmup(seq, lam, j0, consts, rng)

    X = BallBins()
    for i, c in enumerate(cnt_a, start=1):
        for o in range(1, int(c) + 1):
            X.add(i, (tau0, i, o))
    for i, c in enumerate(cnt_b, start=1):
        base = int(cnt_a[i - 1]) if i - 1 < len(cnt_a) else 0
        for o in range(1, int(c) + 1):
            X.add(i, (tau0, i, base + o))

    # initial volume: thin X^A on [j0] from Po(f(tau0)) down to Po(z)
    psi = rule.initialising(tau0, j0)
    f0 = f_at(seq, lam, np.zeros(j0), np.zeros(j0), tau0)
    deficit = [k for k in range(1, j0 + 1) if psi.z[k - 1] > f0[k - 1]]
    keep = thin_ratio(psi.z, f0, j0)
    Y = BallBins()
    for i in range(1, j0 + 1):
        a = int(cnt_a[i - 1]) if i - 1 < len(cnt_a) else 0
        k = int(rng.binomial(a, keep[i - 1]))
        for o in sorted(rng.choice(a, size=k, replace=False).tolist()) if k else []:
            Y.add(i, (tau0, i, o + 1))

    E: BallBins | None = None
    shared_y: dict[int, tuple[set, set]] = {}
    nu_spec: dict[HighLevelState, ProcessSpec] = {}
    F = psi.zvec.copy()
    p_cache = seq.probs(64)

    def prob(i: int) -> float:
        nonlocal p_cache
        if i >= len(p_cache):
            p_cache = seq.probs(max(2 * len(p_cache), i + 1))
        return float(p_cache[i])

    transitions: list[dict] = []
    i1 = i2 = 0
    i2_events: list = []
    max_backlog = len(X)
    failed_at = None
    t = tau0
    steps = 0
    for _ in range(horizon):
        if psi.type is StateType.FAILURE:
            failed_at = failed_at or t
            break
        t += 1
        steps += 1
        j = psi.j
        # nu from the current escape process at t-1
        nu = 0.0
        if E is not None:
            spec = nu_spec.get(psi)
            if spec is None:
                spec = ProcessSpec(Kind.ESCAPE, j=j, sets=psi.sets, lam=lam,
                                   set_floor=consts.rule.set_floor,
                                   escape_divisor=consts.rule.escape_divisor,
                                   nu_divisor=consts.rule.nu_divisor)
                nu_spec.clear()
                nu_spec[psi] = spec
            occ = np.concatenate([[0], E.counts(j)])[None, :]
            pv = np.array([prob(i) for i in range(j + 1)])
            nu = float(escape_nu(spec, occ, pv)[0])

        # births: X^A shares names with Y, X^B is independent
        nA = int(rng.poisson(lam))
        nB = int(rng.poisson(lam))
        born_a = [(t, 0, o) for o in range(1, nA + 1)]
        born_b = [(t, 0, nA + o) for o in range(1, nB + 1)]

        # sends: one decision per ball, shared by every process holding it in
        # that bin.  Y is small, so its balls decide one by one; the rest of
        # each E and X bin is a binomial count plus a uniform pick.
        sendY: dict[int, list] = {0: list(born_a)} if born_a else {}
        sendE: dict[int, list] = {}
        sendX: dict[int, list] = {0: born_a + born_b} if (born_a or born_b) else {}
        for i in Y.occupied():
            pi = prob(i)
            inE: set = set()
            inX: set = set()
            for ball in Y.members(i):
                d = rng.random() < pi
                if E is not None and E.bin_of(ball) == i:
                    inE.add(ball)
                    if d:
                        sendE.setdefault(i, []).append(ball)
                if X.bin_of(ball) == i:
                    inX.add(ball)
                    if d:
                        sendX.setdefault(i, []).append(ball)
                if d:
                    sendY.setdefault(i, []).append(ball)
            shared_y[i] = (inE, inX)
        for proc, out, slot in ((E, sendE, 0), (X, sendX, 1)):
            if proc is None:
                continue
            for i in proc.occupied():
                lst = proc.members(i)
                excl = shared_y[i][slot] if i in shared_y else set()
                rest = len(lst) - len(excl)
                k = int(rng.binomial(rest, prob(i))) if rest else 0
                if k:
                    out.setdefault(i, []).extend(sample_excluding(lst, k, excl, rng))
        shared_y.clear()

        # escapes: X escapes its sender iff exactly one ball sends
        tot_x = sum(len(v) for v in sendX.values())
        esc_x = None
        if tot_x == 1:
            (bin_x, (ball_x,)), = sendX.items()
            esc_x = (bin_x, ball_x)

        # moves: senders climb one bin; Y and E lose senders from bin j
        for i, lst in sendX.items():
            for ball in lst:
                if i > 0:
                    X.remove(ball)
                if esc_x is None or ball != esc_x[1]:
                    X.add(i + 1, ball)
        for proc, snd in ((Y, sendY), (E, sendE)):
            if proc is None:
                continue
            for i, lst in snd.items():
                for ball in lst:
                    if i > 0:
                        proc.remove(ball)
            for i, lst in snd.items():
                if i < j:
                    for ball in lst:
                        proc.add(i + 1, ball)
        # arrivals into the escape process
        mapped = None
        if esc_x is not None and esc_x[0] < j:
            mapped = (esc_x[0] + arrival_shift, esc_x[1])
            if mapped[0] < 1:
                mapped = None
        if E is None:
            # first coupled step: E_0 is exactly the escape of X
            E = BallBins()
            if mapped is not None:
                E.add(mapped[0], mapped[1])
        else:
            u = rng.random(j)
            for i in range(1, j + 1):
                if mapped is not None and mapped[0] == i:
                    E.add(i, mapped[1])
                elif u[i - 1] < nu:
                    E.add(i, (t, i, 1))

        # high-level state
        bY = Y.counts(j)
        stay, feed = _f_parts(seq, lam, np.zeros(j), j)
        F_t = f_step(F, lam, stay, feed)
        tr = rule.apply(psi, bY, t, F_t)
        new = tr.state

        # invariants at t, against Y_{t-1}(t) before thinning
        if new.type not in (StateType.INITIALISING, StateType.FAILURE):
            if not rule.t3_ok(new, list(bY) + [0] * (new.j - j)):
                i1 += 1
            if steps % check_every == 0:
                for i in Y.occupied():
                    for ball in Y.members(i):
                        if E.bin_of(ball) != i and X.bin_of(ball) != i:
                            i2 += 1
                            if len(i2_events) < 20:
                                i2_events.append({"t": t, "bin": i, "ball": list(ball)})

        if new != psi:
            ratio = thin_ratio(new.z, F_t, j)
            for i in range(1, j + 1):
                lst = list(Y.members(i))
                keep_n = int(rng.binomial(len(lst), ratio[i - 1]))
                if keep_n < len(lst):
                    drop = rng.choice(len(lst), size=len(lst) - keep_n, replace=False)
                    for d in sorted(drop.tolist()):
                        Y.remove(lst[d])
            transitions.append({"t": t, "rule": tr.rule, "fallback": tr.fallback,
                                "back": is_back_transition(psi, new, tr.rule),
                                **new.summary()})
            # E_{g+1} starts from E_g's population; older ones are not observed
            F = new.zvec.copy()
        else:
            F = F_t
        psi = new
        max_backlog = max(max_backlog, len(X))
        if psi.type is StateType.FAILURE:
            failed_at = t
            break

    return VEBTrace(tau0, transitions, i1, i2, max_backlog, steps, failed_at, deficit,
                    psi.summary(), i2_events)

"""Generalised backoff processes: births, sends, escapes, end-of-step arrivals.

Two population modes share one step kernel.  ``CountMode`` keeps an integer
array of shape (replicas, groups, bins) and draws sends per bin as
Binomial(count, p_i).  ``IdentityMode`` (one replica) keeps named balls; it
makes exactly the same calls on the main generator as count mode and uses a
second generator only to decide *which* balls send, so both modes produce
identical counts from identical seeds.

Groups are cohorts (backoff) or streams (two-stream, under-backoff).
Bin 0 holds newborns; since p_0 = 1 it is always empty after a step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (CouplingPreconditionViolated, IndexUnavailable,
                     InvalidInitialPopulation, InvariantViolation, ModeUnsupported)
from .send_sequence import SendSequence

BallId = tuple  # (birth step, entry bin, ordinal)


class Kind(str, Enum):
    BACKOFF = "backoff"
    J_JAMMED = "j_jammed"
    EXTERNALLY_JAMMED = "externally_jammed"
    TWO_STREAM = "two_stream"
    UNDER_BACKOFF = "under_backoff"
    CONSTANT_ESCAPE = "constant_escape"
    ESCAPE = "escape"


class Mode(str, Enum):
    COUNT = "count"
    IDENTITY = "identity"


_FIXED_KINDS = {Kind.J_JAMMED, Kind.CONSTANT_ESCAPE, Kind.ESCAPE}


@dataclass(frozen=True)
class ProcessSpec:
    """Kind tag plus its parameters.

    j       active bin for jammed and escape kinds; observation window for the
            externally-jammed kind (None means unbounded)
    nu      arrival rate of a constant-escape process
    sets    the family of bin sets used by an escape process
    lam     rate entering the escape-process arrival law
    cohorts number of accounting cohorts of a backoff process
    """

    kind: Kind
    j: int | None = None
    nu: float = 0.0
    sets: tuple[frozenset, ...] = ()
    lam: float = 0.0
    cohorts: int = 1
    escape_divisor: float = 80.0
    nu_divisor: float = 192.0
    set_floor: float | None = None

    def __post_init__(self) -> None:
        if self.kind in _FIXED_KINDS and (self.j is None or self.j < 1):
            raise ValueError(f"{self.kind.value} needs a positive bin index j")
        if self.kind is Kind.ESCAPE:
            if not 0.0 < self.lam < 1.0:
                raise ValueError("escape process needs lam in (0, 1)")
            seen: set[int] = set()
            for s in self.sets:
                if seen & s:
                    raise ValueError("escape sets must be pairwise disjoint")
                if any(k < 1 or k > self.j for k in s):
                    raise ValueError("escape sets must lie inside [j]")
                seen |= s
        if self.cohorts < 1:
            raise ValueError("need at least one cohort")

    @property
    def groups(self) -> int:
        if self.kind is Kind.TWO_STREAM:
            return 2
        if self.kind is Kind.UNDER_BACKOFF:
            return 3
        if self.kind is Kind.BACKOFF:
            return self.cohorts
        return 1

    @property
    def floor(self) -> float:
        return self.set_floor if self.set_floor is not None else 100.0 / self.lam ** 2


def backoff(cohorts: int = 1) -> ProcessSpec:
    return ProcessSpec(Kind.BACKOFF, cohorts=cohorts)


def j_jammed(j: int) -> ProcessSpec:
    return ProcessSpec(Kind.J_JAMMED, j=j)


def externally_jammed(window: int | None = None) -> ProcessSpec:
    return ProcessSpec(Kind.EXTERNALLY_JAMMED, j=window)


def two_stream() -> ProcessSpec:
    return ProcessSpec(Kind.TWO_STREAM)


def under_backoff() -> ProcessSpec:
    return ProcessSpec(Kind.UNDER_BACKOFF)


def constant_escape(j: int, nu: float) -> ProcessSpec:
    if not 0.0 <= nu <= 1.0:
        raise ValueError("arrival rate must be a probability")
    return ProcessSpec(Kind.CONSTANT_ESCAPE, j=j, nu=nu)


def escape(j: int, sets: Iterable[Iterable[int]], lam: float,
           set_floor: float | None = None) -> ProcessSpec:
    fam = tuple(frozenset(s) for s in sets if len(set(s)) > 0)
    return ProcessSpec(Kind.ESCAPE, j=j, sets=fam, lam=lam, set_floor=set_floor)


def group_rates(spec: ProcessSpec, rate: float) -> np.ndarray:
    """Per-group Poisson birth means for a total birth rate."""
    g = spec.groups
    if spec.kind in (Kind.CONSTANT_ESCAPE, Kind.ESCAPE):
        return np.zeros(1)
    return np.full(g, rate / g)


def escape_nu(spec: ProcessSpec, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    """nu^E for each replica from the pre-step occupancy b (R, B)."""
    R = b.shape[0]
    hat = np.zeros(R)
    for s in spec.sets:
        idx = np.fromiter(sorted(s), dtype=int)
        noise = (b[:, idx] * p[idx]).sum(axis=1)
        hat += np.where(noise <= spec.lam * len(s) / spec.escape_divisor, len(s), 0)
    xi = np.where(hat >= spec.floor, spec.lam * hat / spec.escape_divisor, 0.0)
    return np.exp(-xi / spec.nu_divisor)


@dataclass
class StepReport:
    """Counts for one step.  Arrays are (replicas, groups, bins)."""

    t: int
    births: np.ndarray
    sends: np.ndarray
    escapes: np.ndarray
    arrivals: np.ndarray
    departed: np.ndarray | None = None
    nu: np.ndarray | None = None
    escaped_ids: list = field(default_factory=list)

    @property
    def total_send(self) -> np.ndarray:
        return self.sends.sum(axis=(1, 2))

    @property
    def total_escape(self) -> np.ndarray:
        return self.escapes.sum(axis=(1, 2))

    @property
    def old_sends(self) -> np.ndarray:
        """Sends from bins >= 1, i.e. excluding newborn sends."""
        return self.sends[:, :, 1:].sum(axis=(1, 2))

    def by_bin(self, what: str = "sends", replica: int = 0) -> dict[int, int]:
        arr = getattr(self, what)[replica].sum(axis=0)
        return {i: int(c) for i, c in enumerate(arr) if c}


class Process:
    """One generalised backoff process (or R independent count-mode replicas)."""

    def __init__(self, spec: ProcessSpec, seq: SendSequence, rate: float = 0.0,
                 mode: Mode | str = Mode.COUNT, replicas: int = 1, seed: Any = None,
                 tau: int = 0, initial: Any = None, capacity: int = 8,
                 rng: np.random.Generator | None = None, debug: bool = False,
                 birth_sampler: Callable[[np.random.Generator, tuple], np.ndarray] | None = None):
        self.spec = spec
        self.birth_sampler = birth_sampler
        self.seq = seq
        self.rate = float(rate)
        self.mode = Mode(mode)
        self.R = int(replicas)
        if self.mode is Mode.IDENTITY and self.R != 1:
            raise ModeUnsupported("identity mode runs a single replica")
        if self.R < 1:
            raise ValueError("need at least one replica")
        ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
        main, pick = ss.spawn(2)
        self.rng = rng if rng is not None else np.random.default_rng(main)
        self.pick_rng = np.random.default_rng(pick)
        self.t = int(tau)
        self.tau = int(tau)
        self.debug = debug
        self.G = spec.groups
        self.rates = group_rates(spec, self.rate)
        if spec.kind in _FIXED_KINDS:
            self.B = spec.j + 1
        elif spec.kind is Kind.EXTERNALLY_JAMMED and spec.j is not None:
            self.B = spec.j + 1
        else:
            self.B = max(2, int(capacity))
            if seq.length is not None:
                self.B = min(self.B, seq.length)
        self.growable = not (spec.kind in _FIXED_KINDS
                             or (spec.kind is Kind.EXTERNALLY_JAMMED and spec.j is not None))
        self._p = seq.probs(self.B)
        self.counts = np.zeros((self.R, self.G, self.B), dtype=np.int64)
        self.balls: list[list[list[BallId]]] | None = None
        if self.mode is Mode.IDENTITY:
            self.balls = [[[] for _ in range(self.B)] for _ in range(self.G)]
        self._set_initial(initial)
        self._pending: dict | None = None

    # ------------------------------------------------------------ setup
    def _set_initial(self, initial: Any) -> None:
        if initial is None:
            return
        if isinstance(initial, PoissonStart):
            z = np.asarray(initial.means, dtype=float)
            if z.ndim == 1:
                z = z[None, :]
            if z.shape[0] != self.G:
                raise InvalidInitialPopulation("Poisson means need one row per group")
            self._fit(z.shape[1] + 1)
            draw = self.rng.poisson(z, (self.R,) + z.shape)
            arr = np.zeros((self.R, self.G, self.B), dtype=np.int64)
            arr[:, :, 1:z.shape[1] + 1] = draw
        else:
            a = np.asarray(initial, dtype=np.int64)
            if a.ndim == 1:
                a = a[None, None, :]
            elif a.ndim == 2:
                a = a[None, :, :]
            if a.shape[1] != self.G:
                raise InvalidInitialPopulation("initial counts need one row per group")
            if (a < 0).any():
                raise InvalidInitialPopulation("initial counts must be non-negative")
            self._fit(a.shape[2] + 1)
            arr = np.zeros((self.R, self.G, self.B), dtype=np.int64)
            arr[:, :, 1:a.shape[2] + 1] = a
        self.counts = arr
        if self.balls is not None:
            # ordinals are unique per (tau, bin) across groups
            for g in range(self.G):
                for i in range(1, self.B):
                    off = int(arr[0, :g, i].sum())
                    self.balls[g][i] = [(self.tau, i, off + o)
                                        for o in range(1, int(arr[0, g, i]) + 1)]

    def _fit(self, need: int) -> None:
        if need <= self.B:
            return
        if not self.growable:
            raise InvalidInitialPopulation(
                f"initial population reaches bin {need - 1} beyond the process's last bin {self.B - 1}")
        self._grow(need)

    def _grow(self, need: int | None = None) -> None:
        new_b = max(2 * self.B, need or 0)
        if self.seq.length is not None:
            new_b = min(new_b, self.seq.length)
        if new_b <= self.B:
            return
        pad = np.zeros((self.R, self.G, new_b - self.B), dtype=np.int64)
        self.counts = np.concatenate([self.counts, pad], axis=2)
        if self.balls is not None:
            for g in range(self.G):
                self.balls[g].extend([] for _ in range(new_b - self.B))
        self.B = new_b
        self._p = self.seq.probs(self.B)

    # ------------------------------------------------------------ views
    @property
    def occupancy(self) -> np.ndarray:
        """Bin counts summed over groups, (R, B); column 0 is bin 0."""
        return self.counts.sum(axis=1)

    def bins(self, replica: int = 0) -> np.ndarray:
        """Occupancy of bins 1..B-1 for one replica (entry 0 is bin 1)."""
        return self.occupancy[replica, 1:]

    @property
    def backlog(self) -> np.ndarray:
        return self.counts.sum(axis=(1, 2))

    def ball_set(self, group: int | None = None, bin_index: int | None = None) -> set:
        if self.balls is None:
            raise ModeUnsupported("ball identities need identity mode")
        groups = range(self.G) if group is None else [group]
        out: set = set()
        for g in groups:
            rng_bins = range(self.B) if bin_index is None else [bin_index]
            for i in rng_bins:
                if i < self.B:
                    out.update(self.balls[g][i])
        return out

    def _counts_from_balls(self) -> np.ndarray:
        assert self.balls is not None
        return np.array([[[len(self.balls[g][i]) for i in range(self.B)]
                          for g in range(self.G)]], dtype=np.int64)

    # ------------------------------------------------------------ kernel pieces
    def _draw_births(self) -> np.ndarray:
        if self.birth_sampler is not None:
            return np.asarray(self.birth_sampler(self.rng, (self.R, self.G)), dtype=np.int64)
        if not self.rates.any():
            return np.zeros((self.R, self.G), dtype=np.int64)
        return self.rng.poisson(self.rates, (self.R, self.G))

    def _escape_counts(self, s: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
        """Escapes per (replica, group, bin) and, for two-stream, the chosen bins."""
        kind = self.spec.kind
        e = np.zeros_like(s)
        chosen = None
        if kind is Kind.BACKOFF:
            single = s.sum(axis=(1, 2)) == 1
            e[single] = s[single]
        elif kind in _FIXED_KINDS:
            e[:, :, self.spec.j] = s[:, :, self.spec.j]
        elif kind is Kind.TWO_STREAM:
            tot = s.sum(axis=2)  # (R, 2)
            u = rng.random(self.R)
            chosen = np.full(self.R, -1)
            for d in (0, 1):
                c = 1 - d
                cond = (tot[:, c] == 0) & (tot[:, d] > 0)
                for r in np.flatnonzero(cond):
                    cum = np.cumsum(s[r, d]) / tot[r, d]
                    jd = int(np.searchsorted(cum, u[r], side="right"))
                    e[r, d, jd] = 1
                    chosen[r] = jd
        elif kind is Kind.UNDER_BACKOFF:
            ab = s[:, 0:2].sum(axis=(1, 2))
            allt = s.sum(axis=(1, 2))
            m_ab = ab == 1
            e[m_ab, 0:2] = s[m_ab, 0:2]
            m_c = (allt == 1) & (s[:, 2].sum(axis=1) == 1)
            e[m_c, 2] = s[m_c, 2]
        return e, chosen

    def _departures(self, s: np.ndarray, e: np.ndarray) -> np.ndarray | None:
        if self.spec.kind is Kind.EXTERNALLY_JAMMED and self.spec.j is not None:
            d = np.zeros_like(s)
            d[:, :, self.B - 1] = s[:, :, self.B - 1]
            return d
        return None

    def _arrival_counts(self, pre: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        arr = np.zeros((self.R, self.G, self.B), dtype=np.int64)
        kind = self.spec.kind
        if kind not in (Kind.CONSTANT_ESCAPE, Kind.ESCAPE):
            return arr, None
        j = self.spec.j
        if kind is Kind.CONSTANT_ESCAPE:
            nu = np.full(self.R, self.spec.nu)
        else:
            nu = escape_nu(self.spec, pre.sum(axis=1), self._p)
        hit = self.rng.random((self.R, j)) < nu[:, None]
        arr[:, 0, 1:j + 1] = hit
        return arr, nu

    # ------------------------------------------------------------ step
    def step(self) -> StepReport:
        if self.mode is Mode.IDENTITY:
            return self._step_identity()
        return self._step_count()

    def _next_counts(self, Bc, s, e, arr, dep) -> np.ndarray:
        moved = s - e if dep is None else s - e - dep
        if self.B and moved[:, :, self.B - 1].any():
            raise IndexUnavailable(
                f"a ball left bin {self.B - 1}, the last bin the sequence defines")
        new = Bc - s
        new[:, :, 1:] += moved[:, :, :-1]
        new += arr
        return new

    def _step_count(self) -> StepReport:
        t = self.t + 1
        pre = self.counts
        n = self._draw_births()
        Bc = pre.copy()
        Bc[:, :, 0] = n
        s = self.rng.binomial(Bc, self._p)
        e, _ = self._escape_counts(s, self.rng)
        dep = self._departures(s, e)
        arr, nu = self._arrival_counts(pre)
        new = self._next_counts(Bc, s, e, arr, dep)
        if self.debug:
            self._check_counts(Bc, s, e, new)
        self.counts = new
        self.t = t
        self._maybe_grow()
        return StepReport(t, n, s, e, arr, dep, nu)

    def _maybe_grow(self) -> None:
        if self.growable and self.counts[:, :, self.B - 1].any():
            self._grow()

    def _check_counts(self, Bc, s, e, new) -> None:
        if (new < 0).any() or (e > s).any() or (s > Bc).any():
            raise InvariantViolation("count conservation broken")
        if self.spec.kind is Kind.BACKOFF:
            tot_e = e.sum(axis=(1, 2))
            if (tot_e > 1).any() or ((tot_e == 1) & (s.sum(axis=(1, 2)) != 1)).any():
                raise InvariantViolation("backoff escape rule broken")

    # identity mode, split into phases so couplings can drive it
    def begin_step(self, births: Sequence[Any] | None = None) -> np.ndarray:
        """Start step t+1: add newborns.  ``births`` gives, per group, a count
        or an explicit list of ball ids.  Returns the births per group."""
        if self.balls is None:
            raise ModeUnsupported("phased stepping needs identity mode")
        if self._pending is not None:
            raise RuntimeError("previous step not finished")
        t = self.t + 1
        if births is None:
            n = self._draw_births()[0]
            births = [int(x) for x in n]
        ordinal = 0
        counts = []
        for g, b in enumerate(births):
            if isinstance(b, (int, np.integer)):
                ids = [(t, 0, ordinal + o) for o in range(1, int(b) + 1)]
                ordinal += int(b)
            else:
                ids = list(b)
            if self.balls[g][0]:
                raise InvariantViolation("bin 0 should be empty between steps")
            self.balls[g][0] = ids
            counts.append(len(ids))
        self._pending = {"t": t, "pre": self._counts_with_bin0_zero(), "births": counts}
        return np.array(counts, dtype=np.int64)

    def _counts_with_bin0_zero(self) -> np.ndarray:
        c = self._counts_from_balls()
        c[:, :, 0] = 0
        return c

    def before_sends(self) -> np.ndarray:
        """B(t) counts (1, G, B) for the pending step."""
        return self._counts_from_balls()

    def apply_sends(self, senders: Sequence[Mapping[int, Sequence[BallId]]]) -> None:
        """Record the balls that send, per group as {bin: ids}."""
        assert self._pending is not None
        s = np.zeros((1, self.G, self.B), dtype=np.int64)
        for g, per_bin in enumerate(senders):
            for i, ids in per_bin.items():
                s[0, g, i] = len(ids)
        self._pending["senders"] = [{i: list(ids) for i, ids in per_bin.items() if len(ids)}
                                    for per_bin in senders]
        self._pending["s"] = s

    def sample_sends(self, rng: np.random.Generator | None = None,
                     pick: np.random.Generator | None = None) -> list[dict[int, list]]:
        """Independent per-ball sends for the pending step."""
        rng = rng or self.rng
        pick = pick or self.pick_rng
        Bc = self._counts_from_balls()
        k = rng.binomial(Bc, self._p)
        out = []
        for g in range(self.G):
            per = {}
            for i in np.flatnonzero(k[0, g]):
                per[int(i)] = choose(self.balls[g][i], int(k[0, g, i]), pick)
            out.append(per)
        return out

    def resolve_escapes(self, rng: np.random.Generator | None = None,
                        pick: np.random.Generator | None = None) -> np.ndarray:
        assert self._pending is not None and "s" in self._pending
        rng = rng or self.rng
        pick = pick or self.pick_rng
        s = self._pending["s"]
        e, chosen = self._escape_counts(s, rng)
        esc_ids: list[list[list]] = [[[] for _ in range(self.B)] for _ in range(self.G)]
        snd = self._pending["senders"]
        for g, i in zip(*np.nonzero(e[0])):
            ids = snd[g].get(int(i), [])
            if e[0, g, i] == len(ids):
                esc_ids[g][i] = list(ids)
            else:
                esc_ids[g][i] = choose(ids, int(e[0, g, i]), pick)
        self._pending["e"] = e
        self._pending["esc_ids"] = esc_ids
        return e

    def end_step(self, arrivals: Mapping[int, Sequence[BallId]] | None = None,
                 nu: np.ndarray | None = None) -> StepReport:
        """Move non-escaping senders up a bin, add arrivals, finish the step."""
        pd = self._pending
        assert pd is not None and "e" in pd
        t = pd["t"]
        Bc = self._counts_from_balls()
        s, e = pd["s"], pd["e"]
        dep = self._departures(s, e)
        moved = s - e if dep is None else s - e - dep
        if moved[0, :, self.B - 1].any():
            raise IndexUnavailable(
                f"a ball left bin {self.B - 1}, the last bin the sequence defines")
        escaped: list = []
        arr = np.zeros((1, self.G, self.B), dtype=np.int64)
        for g in range(self.G):
            bins = self.balls[g]
            carry: dict[int, list] = {}
            for i, ids in pd["senders"][g].items():
                gone = set(ids)
                bins[i] = [b for b in bins[i] if b not in gone]
                esc = set(pd["esc_ids"][g][i])
                escaped.extend(pd["esc_ids"][g][i])
                if i == self.B - 1 and dep is not None:
                    continue
                up = [b for b in ids if b not in esc]
                if up:
                    carry[i + 1] = up
            for i, ids in carry.items():
                bins[i].extend(ids)
            if bins[0]:
                raise InvariantViolation("newborn left in bin 0 after sends")
        if arrivals:
            for i, ids in arrivals.items():
                self.balls[0][i].extend(ids)
                arr[0, 0, i] = len(ids)
        self.counts = self._counts_from_balls()
        births = np.array([pd["births"]], dtype=np.int64)
        self.t = t
        self._pending = None
        if self.debug:
            self._check_counts(Bc, s, e, self.counts - arr + arr)
        self._maybe_grow()
        return StepReport(t, births, s, e, arr, dep, nu, escaped)

    def _step_identity(self) -> StepReport:
        pre = self._counts_from_balls()
        self.begin_step()
        self.apply_sends(self.sample_sends())
        self.resolve_escapes()
        arr_counts, nu = self._arrival_counts(pre)
        arrivals = {int(i): [(self.t + 1, int(i), 1)] for i in np.flatnonzero(arr_counts[0, 0])}
        return self.end_step(arrivals, nu)


@dataclass(frozen=True)
class PoissonStart:
    """Initial population drawn as independent Po(means) per bin (and group)."""

    means: Any


def choose(items: Sequence, k: int, rng: np.random.Generator) -> list:
    """k distinct elements, uniformly; order of the returned list is random."""
    n = len(items)
    if k >= n:
        return list(items)
    if k == 1:
        return [items[int(rng.integers(n))]]
    idx = rng.choice(n, size=k, replace=False)
    return [items[i] for i in idx]


def new_process(kind: ProcessSpec | Kind | str, seq: SendSequence, rate: float = 0.0,
                tau: int = 0, initial: Any = None, mode: Mode | str = Mode.COUNT,
                seed: Any = None, replicas: int = 1, **kw: Any) -> Process:
    if not isinstance(kind, ProcessSpec):
        kind = ProcessSpec(Kind(kind), **{k: kw.pop(k) for k in list(kw)
                                          if k in ProcessSpec.__dataclass_fields__})
    if kind.kind in _FIXED_KINDS and initial is not None and not isinstance(initial, PoissonStart):
        a = np.asarray(initial)
        if a.shape[-1] > kind.j:
            raise InvalidInitialPopulation(f"initial mass beyond bin {kind.j}")
    return Process(kind, seq, rate, mode=mode, replicas=replicas, seed=seed, tau=tau,
                   initial=initial, **kw)


def step(proc: Process) -> StepReport:
    return proc.step()


Observer = Callable[[Process, StepReport], Any]


def run(proc: Process, horizon: int, observers: Mapping[str, Observer] | None = None
        ) -> dict[str, list]:
    """Step ``horizon`` times, calling each observer after every step."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    observers = observers or {}
    out: dict[str, list] = {name: [] for name in observers}
    for _ in range(horizon):
        rep = proc.step()
        for name, fn in observers.items():
            out[name].append(fn(proc, rep))
    return out


# ------------------------------------------------------------------ couplings

@dataclass
class CouplingViolation:
    t: int
    name: str
    group: int
    bin_index: int
    count: int


class StandardCoupling:
    """Synchronised births and sends keeping lower's balls inside upper's.

    Supported pairs (lower, upper): backoff under backoff (rates r' <= r),
    two-stream under two-cohort backoff and under-backoff under
    three-cohort backoff, both at equal per-group rates.  Each group of the
    lower process is matched to the same-index group of the upper one.
    """

    def __init__(self, lower: Process, upper: Process, seed: Any = None):
        if lower.mode is not Mode.IDENTITY or upper.mode is not Mode.IDENTITY:
            raise CouplingPreconditionViolated("couplings need identity mode on both sides")
        pair = (lower.spec.kind, upper.spec.kind)
        ok = {(Kind.BACKOFF, Kind.BACKOFF): lower.G == upper.G,
              (Kind.TWO_STREAM, Kind.BACKOFF): upper.G == 2,
              (Kind.UNDER_BACKOFF, Kind.BACKOFF): upper.G == 3}
        if not ok.get(pair, False):
            raise CouplingPreconditionViolated(f"unsupported coupling {pair}")
        if (lower.rates > upper.rates + 1e-15).any():
            raise CouplingPreconditionViolated("lower birth rates must not exceed upper ones")
        if pair != (Kind.BACKOFF, Kind.BACKOFF) and not np.allclose(lower.rates, upper.rates):
            raise CouplingPreconditionViolated("stream couplings need equal per-group rates")
        if lower.seq != upper.seq:
            raise CouplingPreconditionViolated("both processes need the same send sequence")
        if lower.t != upper.t:
            raise CouplingPreconditionViolated("clocks differ")
        self.lower, self.upper = lower, upper
        self.rng = np.random.default_rng(seed)
        self.violations: list[CouplingViolation] = []
        self.steps = 0

    def _check(self, t: int, name: str, lo: Sequence, up: Sequence) -> None:
        for g in range(self.lower.G):
            for i in range(len(lo[g])):
                a = lo[g][i]
                if not a:
                    continue
                b = set(up[g][i]) if i < len(up[g]) else set()
                bad = sum(1 for x in a if x not in b)
                if bad:
                    self.violations.append(CouplingViolation(t, name, g, i, bad))

    def step(self) -> tuple[StepReport, StepReport]:
        lo, up, rng = self.lower, self.upper, self.rng
        t = lo.t + 1
        n_lo = rng.poisson(lo.rates)
        extra = rng.poisson(np.maximum(up.rates - lo.rates, 0.0))
        lo.begin_step([int(x) for x in n_lo])
        up.begin_step([int(a + b) for a, b in zip(n_lo, extra)])
        # lower's newborns keep their names in upper; upper's extras come after
        ordinal = sum(int(x) for x in n_lo)
        for g in range(up.G):
            more = [(t, 0, ordinal + o) for o in range(1, int(extra[g]) + 1)]
            ordinal += int(extra[g])
            up.balls[g][0] = list(lo.balls[g][0]) + more
        up._pending["births"] = [len(up.balls[g][0]) for g in range(up.G)]

        self._check(t, "Inv-B", lo.balls, up.balls)

        lo_send = lo.sample_sends(rng, rng)
        up_send: list[dict[int, list]] = []
        p = up._p
        for g in range(up.G):
            per: dict[int, list] = {}
            for i in range(up.B):
                if not up.balls[g][i]:
                    continue
                low = lo.balls[g][i] if i < lo.B else []
                if low:
                    shared = set(low)
                    mine = set(up.balls[g][i])
                    forced = [b for b in lo_send[g].get(i, []) if b in mine]
                    rest = [b for b in up.balls[g][i] if b not in shared]
                else:
                    forced, rest = [], up.balls[g][i]
                k = int(rng.binomial(len(rest), p[i])) if rest else 0
                picked = choose(rest, k, rng) if k else []
                if forced or picked:
                    per[i] = forced + picked
            up_send.append(per)
        self._check(t, "Inv-s",
                    [[lo_send[g].get(i, []) for i in range(lo.B)] for g in range(lo.G)],
                    [[up_send[g].get(i, []) for i in range(up.B)] for g in range(up.G)])
        lo.apply_sends(lo_send)
        up.apply_sends(up_send)
        lo.resolve_escapes(rng, rng)
        up.resolve_escapes(rng, rng)
        r_lo = lo.end_step()
        r_up = up.end_step()
        self._check(t, "Inv-b", lo.balls, up.balls)
        self.steps += 1
        return r_lo, r_up

    def run(self, horizon: int) -> int:
        for _ in range(horizon):
            self.step()
        return len(self.violations)

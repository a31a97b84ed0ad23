"""Observers and statistics over simulated runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .engine import Process, StepReport, run
from .errors import InsufficientSamples
from .recurrence import ConditionReport, EscapeConstants, af_good, check_conditions, rs_good
from .send_sequence import SendSequence


def _occ_prob(seq: SendSequence, n: int) -> np.ndarray:
    return seq.probs(n + 1)[1:]


def noise(occupancy: Sequence[float], seq: SendSequence, S: Iterable[int]) -> float:
    """Expected sends from the bins of S: sum_{i in S} p_i b_i.

    ``occupancy[0]`` is bin 1.
    """
    b = np.asarray(occupancy, dtype=float)
    idx = [i for i in S]
    if not idx or b.size == 0:
        return 0.0
    p = _occ_prob(seq, max(max(idx), b.size))
    return float(sum(p[i - 1] * (b[i - 1] if i <= b.size else 0.0) for i in idx))


@dataclass(frozen=True)
class SendBound:
    bound: float
    applicable: bool
    noise: float
    set_size: int


def single_send_bound(occupancy: Sequence[float], seq: SendSequence, lam: float,
                      S: Iterable[int], set_floor: float | None = None) -> SendBound:
    """exp(-N_S/16), flagged applicable when |S| >= floor and N_S >= lam|S|/80."""
    S = sorted(set(S))
    n = noise(occupancy, seq, S)
    floor = 100.0 / lam ** 2 if set_floor is None else set_floor
    ok = len(S) >= floor and n >= lam * len(S) / 80.0
    return SendBound(math.exp(-n / 16.0), ok, n, len(S))


def prob_at_most_one_send(occupancy: Sequence[int], seq: SendSequence) -> float:
    """Exact P(at most one old ball sends) for independent per-ball sends."""
    b = np.asarray(occupancy, dtype=float)
    p = _occ_prob(seq, b.size)
    if (p >= 1.0).any() and (b[p >= 1.0] > 0).any():
        tot = int(b[p >= 1.0].sum())
        if tot > 1:
            return 0.0
    with np.errstate(divide="ignore"):
        log_none = float(np.sum(b * np.log1p(-np.minimum(p, 1 - 1e-300))))
    none = math.exp(log_none)
    one = none * float(np.sum(b * p / np.maximum(1.0 - p, 1e-300)))
    return none + one


# ------------------------------------------------------------------ Poisson fit

def _merged_bins(mean: float, n: int, min_expected: float = 5.0) -> list[tuple[int, int | None]]:
    """Contiguous category ranges [lo, hi] (hi None = open tail) with expected >= 5."""
    dist = stats.poisson(mean)
    hi_cut = int(dist.ppf(1 - 1e-12)) + 1
    cats: list[tuple[int, int | None]] = []
    lo = 0
    acc = 0.0
    for k in range(hi_cut + 1):
        acc += n * dist.pmf(k)
        if acc >= min_expected:
            cats.append((lo, k))
            lo, acc = k + 1, 0.0
    if not cats:
        return [(0, None)]
    # the open tail joins the last category unless it is big enough alone
    tail = n * dist.sf(lo - 1) if lo > 0 else float(n)
    if tail >= min_expected:
        cats.append((lo, None))
    else:
        first, _ = cats.pop()
        cats.append((first, None))
    return cats


def poisson_gof(samples: Sequence[int], mean: float) -> tuple[float, float]:
    """(variance/mean, chi-square p-value against Po(mean)).

    Categories are merged until each expects at least 5 counts; the mean is
    given, not fitted, so df = categories - 1.
    """
    x = np.asarray(samples, dtype=np.int64).reshape(-1)
    n = x.size
    if n < 100:
        raise InsufficientSamples(f"need at least 100 samples, got {n}")
    if mean < 0:
        raise ValueError("mean must be non-negative")
    if mean == 0.0:
        return (1.0, 1.0) if not x.any() else (math.inf, 0.0)
    m = float(x.mean())
    ratio = float(x.var(ddof=1)) / m if m > 0 else 0.0
    cats = _merged_bins(mean, n)
    if len(cats) < 2:
        return ratio, 1.0
    dist = stats.poisson(mean)
    obs, exp = [], []
    for lo, hi in cats:
        if hi is None:
            obs.append(int((x >= lo).sum()))
            exp.append(n * (dist.sf(lo - 1) if lo > 0 else 1.0))
        else:
            obs.append(int(((x >= lo) & (x <= hi)).sum()))
            exp.append(n * (dist.cdf(hi) - (dist.cdf(lo - 1) if lo > 0 else 0.0)))
    obs_a, exp_a = np.array(obs, float), np.array(exp, float)
    stat = float(((obs_a - exp_a) ** 2 / exp_a).sum())
    return ratio, float(stats.chi2.sf(stat, len(cats) - 1))


# ------------------------------------------------------------------ bottle events

@dataclass(frozen=True)
class BottleConstants:
    lam: float

    @property
    def c_b(self) -> float:
        return 1.0 / (8.0 * math.log(7.0 / self.lam))

    @property
    def alpha_b(self) -> float:
        return self.c_b * self.lam / 640.0

    def j_of(self, i: int) -> int:
        return math.floor(self.c_b * math.log(i))


def bottle_events(trace: Mapping[str, Any], seq: SendSequence, lam: float,
                  i: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-step flags (E_N, E_s).

    ``trace["occupancy_pre"]`` holds b(t-1) for bins 1.. (one row per step);
    ``trace["old_sends"]`` holds the number of sends from bins >= 1 at t.
    """
    if i < 16:
        raise ValueError("bottle events need i >= 16")
    bc = BottleConstants(lam)
    j = bc.j_of(i)
    occ = np.atleast_2d(np.asarray(trace["occupancy_pre"], dtype=float))
    old = np.asarray(trace["old_sends"]).reshape(-1)
    if occ.shape[0] != old.shape[0]:
        raise ValueError("occupancy and send traces have different lengths")
    if j >= 1:
        width = max(j, occ.shape[1])
        p = _occ_prob(seq, width)
        padded = np.zeros((occ.shape[0], width))
        padded[:, :occ.shape[1]] = occ
        n_j = (padded[:, :j] * p[:j]).sum(axis=1)
    else:
        n_j = np.zeros(occ.shape[0])
    e_n = n_j >= bc.alpha_b * math.log(i)
    return e_n, old > 0


def record_bottle_trace(proc: Process, horizon: int) -> dict[str, np.ndarray]:
    """Run one replica and keep what bottle_events needs."""
    pre, old = [], []
    for _ in range(horizon):
        pre.append(proc.bins(0).copy())
        rep = proc.step()
        old.append(int(rep.old_sends[0]))
    width = max((len(r) for r in pre), default=0)
    occ = np.zeros((len(pre), width))
    for k, r in enumerate(pre):
        occ[k, :len(r)] = r
    return {"occupancy_pre": occ, "old_sends": np.array(old, dtype=np.int64)}


# ------------------------------------------------------------------ conditions

@dataclass(frozen=True)
class PseudoParams:
    lam: float
    d: float
    varpi: float
    theta: float
    nu: float
    G: float
    log_theta: float | None = None
    esc: EscapeConstants | None = None


@dataclass(frozen=True)
class PseudoReport:
    conditions: ConditionReport
    af_good: bool
    rs_good: bool


def pseudorandomness_report(occupancy: Sequence[float], seq: SendSequence,
                            params: PseudoParams) -> PseudoReport:
    esc = params.esc or EscapeConstants(params.lam)
    rep = check_conditions(occupancy, params.lam, esc, seq, params.d, params.varpi,
                           params.theta, params.nu, params.G, params.log_theta)
    af = af_good(occupancy, params.d, params.lam, esc, seq)
    rs = rs_good(occupancy, params.d, params.varpi, params.theta, params.G, esc, seq,
                 params.log_theta)
    return PseudoReport(rep, af, rs)


# ------------------------------------------------------------------ run summaries

def standard_observers(seq: SendSequence, sets: Mapping[str, Iterable[int]] | None = None
                       ) -> dict:
    """Per-step observers returning one value per replica."""
    sets = {k: sorted(set(v)) for k, v in (sets or {}).items()}

    def backlog(proc: Process, rep: StepReport) -> np.ndarray:
        return proc.backlog.copy()

    def escapes(proc: Process, rep: StepReport) -> np.ndarray:
        return rep.total_escape.copy()

    def max_bin(proc: Process, rep: StepReport) -> np.ndarray:
        occ = proc.occupancy
        nz = occ > 0
        idx = np.where(nz.any(axis=1), occ.shape[1] - 1 - np.argmax(nz[:, ::-1], axis=1), 0)
        return idx

    obs = {"backlog": backlog, "escapes": escapes, "max_bin": max_bin}
    for name, S in sets.items():
        def _noise(proc: Process, rep: StepReport, S=S) -> np.ndarray:
            occ = proc.occupancy
            p = proc._p
            idx = [i for i in S if i < occ.shape[1]]
            return (occ[:, idx] * p[idx]).sum(axis=1) if idx else np.zeros(proc.R)
        obs[f"noise_{name}"] = _noise
    return obs


def collect(proc: Process, horizon: int, sets: Mapping[str, Iterable[int]] | None = None
            ) -> dict[str, np.ndarray]:
    """Run and stack observer output into arrays of shape (horizon, replicas)."""
    out = run(proc, horizon, standard_observers(proc.seq, sets))
    trace = {k: np.asarray(v).reshape(horizon, -1) if horizon else np.zeros((0, proc.R))
             for k, v in out.items()}
    trace["final_occupancy"] = proc.occupancy.copy()
    return trace


@dataclass
class WindowRecord:
    window_start: int
    backlog_mean: float
    noise: dict[str, float]
    escapes_cum: float
    empty_visits: int
    max_bin: int

    def row(self) -> dict:
        out = {"window_start": self.window_start, "backlog_mean": self.backlog_mean}
        for k, v in self.noise.items():
            out[f"noise_{k}"] = v
        out.update({"escapes_cum": self.escapes_cum, "empty_visits": self.empty_visits,
                    "max_bin": self.max_bin})
        return out


@dataclass
class RunSummary:
    windows: list[WindowRecord] = field(default_factory=list)
    sojourn: list[int | None] = field(default_factory=list)  # None = censored
    bin_mean: np.ndarray | None = None
    bin_var: np.ndarray | None = None

    @property
    def censored(self) -> list[bool]:
        return [s is None for s in self.sojourn]

    def rows(self) -> list[dict]:
        return [w.row() for w in self.windows]


def _as_2d(a: Any) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def summarize(trace: Mapping[str, Any], window: int) -> RunSummary:
    """Windowed means of backlog and noise, cumulative escapes (mean over
    replicas), empty-state visits, the largest occupied bin, and per-replica
    first return to the empty state (censored when it never happens)."""
    if window < 1:
        raise ValueError("window must be at least 1")
    if "backlog" not in trace or len(trace["backlog"]) == 0:
        return RunSummary()
    back = _as_2d(trace["backlog"])
    T, R = back.shape
    esc = _as_2d(trace.get("escapes", np.zeros((T, R))))
    mb = _as_2d(trace.get("max_bin", np.zeros((T, R))))
    noise_keys = sorted(k[len("noise_"):] for k in trace if k.startswith("noise_"))
    cum = np.cumsum(esc, axis=0)
    out = RunSummary()
    for w0 in range(0, T, window):
        w1 = min(T, w0 + window)
        out.windows.append(WindowRecord(
            window_start=w0 + 1,
            backlog_mean=float(back[w0:w1].mean()),
            noise={k: float(_as_2d(trace[f"noise_{k}"])[w0:w1].mean()) for k in noise_keys},
            escapes_cum=float(cum[w1 - 1].mean()),
            empty_visits=int((back[w0:w1] == 0).sum()),
            max_bin=int(mb[w0:w1].max()),
        ))
    for r in range(R):
        col = back[:, r]
        left = np.flatnonzero(col > 0)
        if left.size == 0:
            out.sojourn.append(None)
            continue
        back_to_empty = np.flatnonzero(col[left[0]:] == 0)
        out.sojourn.append(int(left[0] + back_to_empty[0] + 1) if back_to_empty.size else None)
    if "final_occupancy" in trace:
        occ = np.asarray(trace["final_occupancy"], dtype=float)
        out.bin_mean = occ.mean(axis=0)
        out.bin_var = occ.var(axis=0, ddof=1) if occ.shape[0] > 1 else np.zeros(occ.shape[1])
    return out

"""Mean-tracking recurrences and the constants derived from them.

Vectors indexed by bins 1..j are stored as numpy arrays whose entry 0 is
bin 1.  Send probabilities come from ``seq.probs``, where entry 0 is p_0 = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Iterable, Sequence

import numpy as np

from .constants import ClassifierConstants
from .errors import IncompatibleLengths, InvariantViolation, NumericOverflow
from .send_sequence import SendSequence

# above this many steps f is advanced by matrix powers instead of iteration
_ITERATE_LIMIT = 4096


class TraceKind(str, Enum):
    F = "f"
    H = "h"


@dataclass
class ExpectationTrace:
    kind: TraceKind
    j: int
    tau: int
    values: np.ndarray  # shape (T+1, j), or (1, j) in last-only mode
    last_only: bool = False

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def at(self, t: int) -> np.ndarray:
        if self.last_only:
            raise IndexError("trace kept only its final vector")
        return self.values[t - self.tau]

    def __len__(self) -> int:
        return self.values.shape[0]


# ----------------------------------------------------------------- gamma / mu

def gamma_vector(j: int, consts: ClassifierConstants) -> np.ndarray:
    """gamma_x = 1/(4 x^phi) for x = 1..j."""
    x = np.arange(1, j + 1, dtype=float)
    return 1.0 / (4.0 * x ** consts.phi)


def _as_vec(v: Any, j: int | None = None, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if j is not None and arr.shape[0] != j:
        raise IncompatibleLengths(f"{name} has length {arr.shape[0]}, expected {j}")
    return arr


def mu_gamma(seq: SendSequence, lam: float, gamma: Sequence[float], x: int) -> float:
    """mu_x = lam * W_x * prod_{a<=x} (1 - Gamma_a); mu_0 = lam."""
    if x == 0:
        return lam
    g = _as_vec(gamma)
    if x > g.shape[0]:
        raise IncompatibleLengths(f"need {x} damping entries, got {g.shape[0]}")
    w = seq.weight(x)
    if math.isinf(w):
        raise NumericOverflow(f"W_{x} is beyond double range")
    return lam * w * float(np.prod(1.0 - g[:x]))


def mu_vector(seq: SendSequence, lam: float, gamma: Sequence[float]) -> np.ndarray:
    """(mu_1, ..., mu_j) for a damping vector of length j."""
    g = _as_vec(gamma)
    j = g.shape[0]
    w = seq.weights(j + 1)[1:]
    if np.isinf(w).any():
        raise NumericOverflow("a weight is beyond double range")
    return lam * w * np.cumprod(1.0 - g)


def mu_canonical(seq: SendSequence, lam: float, j: int,
                 consts: ClassifierConstants) -> np.ndarray:
    """mu^gamma on [j], checked against 2 lam W/3 <= mu <= 3 lam W/4."""
    mu = mu_vector(seq, lam, gamma_vector(j, consts))
    w = seq.weights(j + 1)[1:]
    lo, hi = 2.0 * lam * w / 3.0, 3.0 * lam * w / 4.0
    if (mu < lo * (1 - 1e-12)).any() or (mu > hi * (1 + 1e-12)).any():
        raise InvariantViolation("mu^gamma left the band [2 lam W/3, 3 lam W/4]")
    return mu


# ----------------------------------------------------------------- f

def _f_parts(seq: SendSequence, lam: float, gamma: np.ndarray, j: int):
    p = seq.probs(j + 1)
    stay = 1.0 - p[1:]  # (1 - p_x), x = 1..j
    feed = (1.0 - gamma) * p[:-1]  # (1 - Gamma_x) p_{x-1}
    return stay, feed


def f_step(f: np.ndarray, lam: float, stay: np.ndarray, feed: np.ndarray) -> np.ndarray:
    out = stay * f
    out[0] += feed[0] * lam
    out[1:] += feed[1:] * f[:-1]
    return out


def f_run(seq: SendSequence, lam: float, gamma: Sequence[float], z: Sequence[float],
          T: int, last_only: bool = False, tau: int = 0) -> ExpectationTrace:
    """Trace f^{Gamma,z}(0..T); f(0) = z and f_0 = lam."""
    zv = _as_vec(z, name="z")
    j = zv.shape[0]
    g = _as_vec(gamma, j, "Gamma")
    if j < 1:
        raise IncompatibleLengths("f needs at least one bin")
    if T < 0:
        raise ValueError("T must be non-negative")
    if (zv < 0).any():
        raise ValueError("initial means must be non-negative")
    stay, feed = _f_parts(seq, lam, g, j)
    if last_only:
        return ExpectationTrace(TraceKind.F, j, tau, f_at(seq, lam, g, zv, T)[None, :], True)
    out = np.empty((T + 1, j))
    out[0] = zv
    cur = zv.copy()
    for t in range(1, T + 1):
        cur = f_step(cur, lam, stay, feed)
        out[t] = cur
    return ExpectationTrace(TraceKind.F, j, tau, out)


def _transfer_matrix(lam: float, stay: np.ndarray, feed: np.ndarray) -> np.ndarray:
    """Affine map on (f_1..f_j, 1) as a (j+1)x(j+1) matrix."""
    j = stay.shape[0]
    m = np.zeros((j + 1, j + 1))
    m[np.arange(j), np.arange(j)] = stay
    m[np.arange(1, j), np.arange(j - 1)] = feed[1:]
    m[0, j] = feed[0] * lam
    m[j, j] = 1.0
    return m


def f_at(seq: SendSequence, lam: float, gamma: Sequence[float], z: Sequence[float],
         T: int) -> np.ndarray:
    """f^{Gamma,z}(T) only; uses repeated squaring when T is large."""
    zv = _as_vec(z, name="z")
    j = zv.shape[0]
    g = _as_vec(gamma, j, "Gamma")
    stay, feed = _f_parts(seq, lam, g, j)
    if T <= _ITERATE_LIMIT:
        cur = zv.copy()
        for _ in range(T):
            cur = f_step(cur, lam, stay, feed)
        return cur
    m = np.linalg.matrix_power(_transfer_matrix(lam, stay, feed), T)
    aug = np.append(zv, 1.0)
    return np.maximum(m @ aug, 0.0)[:j]


# ----------------------------------------------------------------- T, fill time

def exact_weight(seq: SendSequence, k: int) -> Fraction:
    """W_k as an exact rational (the reciprocal of the stored probability)."""
    if seq.is_integer_weight(k):
        return Fraction(seq.floor_weight(k))
    p = seq.prob(k)
    if p == 0.0:
        raise NumericOverflow(f"W_{k} is beyond double range")
    return Fraction(1) / Fraction(p)


def t_prot(seq: SendSequence, j: int) -> int:
    """80 j^2 floor(sum_{x<=j} W_x), exact."""
    if j < 1:
        raise ValueError("j must be positive")
    total = sum((exact_weight(seq, x) for x in range(1, j + 1)), Fraction(0))
    return 80 * j * j * math.floor(total)


def t_prot_log(seq: SendSequence, j: int) -> float:
    """Natural log of an upper estimate of T^{p,j}, for when it will not fit."""
    lws = np.array([seq.log_weight(x) for x in range(1, j + 1)])
    top = lws.max()
    return math.log(80 * j * j) + top + math.log(np.exp(lws - top).sum())


def fill_time_bound(seq: SendSequence, lam: float, j: int, R: float,
                    big_lambda: Sequence[float]) -> int:
    """ceil((4/lam) j R / min Lambda_k)."""
    lv = _as_vec(big_lambda, j, "Lambda")
    if (lv <= 0).any() or (lv > 1).any():
        raise ValueError("Lambda entries must lie in (0, 1]")
    if R <= 0:
        return 0
    return math.ceil((4.0 / lam) * j * R / float(lv.min()))


def slowfill_parameters(seq: SendSequence, lam: float, j: int) -> tuple[float, np.ndarray]:
    """R = lam * sum W and Lambda_k = 1/(10 j), the choice that bounds T^{p,j}."""
    w = seq.weights(j + 1)[1:]
    return lam * float(w.sum()), np.full(j, 1.0 / (10.0 * j))


# ----------------------------------------------------------------- F and M

def F_of_state(state: Any, t: int, seq: SendSequence, lam: float) -> np.ndarray:
    """F^Psi(t) = f^{0,z}(t - tau) on [j^Psi]."""
    if t < state.tau:
        raise ValueError(f"t={t} precedes the state start {state.tau}")
    z = np.asarray(state.z, dtype=float)
    return f_at(seq, lam, np.zeros(z.shape[0]), z, t - state.tau)


def F_trace(state: Any, t_end: int, seq: SendSequence, lam: float) -> np.ndarray:
    """Rows F^Psi(tau), ..., F^Psi(t_end)."""
    z = np.asarray(state.z, dtype=float)
    return f_run(seq, lam, np.zeros(z.shape[0]), z, t_end - state.tau).values


def missing_from(F: np.ndarray, mu: np.ndarray, S: Iterable[int]) -> float:
    idx = [k - 1 for k in S]
    if not idx:
        return 0.0
    return float(np.maximum(0.0, mu[idx] - F[idx]).sum())


def missing(state: Any, S: Iterable[int], t: int, seq: SendSequence, lam: float,
            consts: ClassifierConstants) -> float:
    """M_S^Psi(t) = sum_{k in S} max(0, mu^gamma_k - F_k^Psi(t))."""
    S = list(S)
    j = len(state.z)
    if any(k < 1 or k > j for k in S):
        raise ValueError(f"S must lie inside [1, {j}]")
    F = F_of_state(state, t, seq, lam)
    return missing_from(F, mu_vector(seq, lam, gamma_vector(j, consts)), S)


def missing_trace(state: Any, S: Iterable[int], t_end: int, seq: SendSequence,
                  lam: float, consts: ClassifierConstants,
                  check_prefix: bool = True) -> np.ndarray:
    """M_S over tau..t_end; asserts monotonicity when S is a prefix [j']."""
    S = sorted(set(S))
    j = len(state.z)
    mu = mu_vector(seq, lam, gamma_vector(j, consts))
    rows = F_trace(state, t_end, seq, lam)
    out = np.array([missing_from(r, mu, S) for r in rows])
    if check_prefix and S == list(range(1, len(S) + 1)):
        grow = np.diff(out) > 1e-12 * max(1.0, float(mu[:len(S)].sum()))
        if grow.any():
            raise InvariantViolation("missing mass grew along a fixed state")
    return out


# ----------------------------------------------------------------- h and kappa

def h_run(seq: SendSequence, nu: float, a: Sequence[float], T: int,
          last_only: bool = False, tau: int = 0) -> ExpectationTrace:
    """h(t) with h(0) = a, h_0 = 0 and constant arrivals nu into every bin."""
    av = _as_vec(a, name="a")
    j = av.shape[0]
    if nu < 0 or (av < 0).any():
        raise ValueError("nu and a must be non-negative")
    p = seq.probs(j + 1)
    stay = 1.0 - p[1:]
    feed = p[1:j]  # p_{x-1} for x = 2..j
    cur = av.copy()
    rows = [cur] if not last_only else []
    for _ in range(T):
        nxt = stay * cur + nu
        nxt[1:] += feed * cur[:-1]
        cur = nxt
        if not last_only:
            rows.append(cur)
    vals = np.array(rows) if not last_only else cur[None, :]
    return ExpectationTrace(TraceKind.H, j, tau, vals, last_only)


def kappa(seq: SendSequence, nu: float, j: int) -> np.ndarray:
    """kappa_x = x nu W_x for x = 1..j."""
    x = np.arange(1, j + 1, dtype=float)
    return x * nu * seq.weights(j + 1)[1:]


# ----------------------------------------------------------------- escape constants

@dataclass(frozen=True)
class EscapeConstants:
    """xi, P_k and the two arrival rates.  Kept in logs: xi underflows.

    ``log_xi`` and ``p_override`` replace the genuine values in
    synthetic-constants mode.
    """

    lam: float
    log_xi_override: float | None = None
    p_override: tuple[float, ...] | None = None
    _logp: dict = field(default_factory=dict, compare=False, hash=False, repr=False)

    @property
    def synthetic(self) -> bool:
        return self.log_xi_override is not None or self.p_override is not None

    @property
    def log_xi(self) -> float:
        if self.log_xi_override is not None:
            return self.log_xi_override
        return -math.log(160.0) + (1e7 / self.lam ** 3) * math.log(self.lam / 4.0)

    @property
    def xi(self) -> float:
        return math.exp(self.log_xi)

    def log_p(self, k: int) -> float:
        if self.p_override is not None:
            return math.log(self.p_override[k]) if self.p_override[k] > 0 else -math.inf
        hit = self._logp.get(k)
        if hit is None:
            hit = self.log_xi + math.fsum(math.log1p(1.0 / l ** 2) for l in range(1, k + 1))
            self._logp[k] = hit
        return hit

    def p(self, k: int) -> float:
        return math.exp(self.log_p(k))

    @staticmethod
    def nu_hi(j: int) -> float:
        return math.log(j) ** -100 if j > 1 else math.inf

    @staticmethod
    def nu_lo(j: int) -> float:
        return float(j) ** -100


def _threshold(seq: SendSequence, esc: EscapeConstants, log_delta: float, k: int) -> float:
    lt = log_delta + esc.log_p(k) + seq.log_weight(k)
    return math.inf if lt > 709.0 else math.exp(lt)


def excess(x: Sequence[float], delta: float, esc: EscapeConstants, seq: SendSequence,
           log_delta: float | None = None) -> float:
    """sum_k max(0, x_k - delta P_k W_k), with delta optionally given as a log."""
    xv = _as_vec(x, name="x")
    if log_delta is None:
        if delta <= 0:
            raise ValueError("delta must be positive")
        log_delta = math.log(delta)
    return math.fsum(max(0.0, float(xk) - _threshold(seq, esc, log_delta, k))
                     for k, xk in enumerate(xv, start=1))


@dataclass(frozen=True)
class ConditionReport:
    con1: bool
    con2: bool
    con3: bool
    con4: bool
    slack1: float
    slack2: float
    slack3: float
    slack4: float


def con1(x, d, esc, seq) -> tuple[bool, float]:
    e = excess(x, 1.0, esc, seq)
    return e <= d, d - e


def con2(x, lam, esc, seq) -> tuple[bool, float]:
    j = len(x)
    e = excess(x, 0.0, esc, seq, log_delta=-esc.log_xi / 3.0)
    return e <= lam * j / 500.0, lam * j / 500.0 - e


def con3(x, varpi, theta, nu, esc, seq, log_theta: float | None = None) -> tuple[bool, float]:
    """For k with W_k >= varpi: p_k x_k <= nu k + (1 + theta) P_k."""
    if log_theta is None:
        log_theta = math.log(theta) if theta > 0 else -math.inf
    slack = math.inf
    for k, xk in enumerate(_as_vec(x), start=1):
        if seq.log_weight(k) < (math.log(varpi) if varpi > 0 else -math.inf):
            continue
        log_rhs_p = esc.log_p(k) + float(np.logaddexp(0.0, log_theta))
        rhs = nu * k + (math.exp(log_rhs_p) if log_rhs_p < 709 else math.inf)
        slack = min(slack, rhs - seq.prob(k) * float(xk))
    return slack >= 0, slack


def con4(x, G, seq) -> tuple[bool, float]:
    xv = _as_vec(x)
    j = xv.shape[0]
    p = seq.probs(j + 1)[1:]
    slack = float((G * j * j - p * xv).min()) if j else math.inf
    return slack >= 0, slack


def check_conditions(x: Sequence[float], lam: float, esc: EscapeConstants,
                     seq: SendSequence, d: float, varpi: float, theta: float,
                     nu: float, G: float, log_theta: float | None = None) -> ConditionReport:
    c1, s1 = con1(x, d, esc, seq)
    c2, s2 = con2(x, lam, esc, seq)
    c3, s3 = con3(x, varpi, theta, nu, esc, seq, log_theta)
    c4, s4 = con4(x, G, seq)
    return ConditionReport(c1, c2, c3, c4, s1, s2, s3, s4)


def af_good(x, d, lam, esc, seq) -> bool:
    return con1(x, d, esc, seq)[0] and con2(x, lam, esc, seq)[0]


def rs_good(x, d, varpi, theta, G, esc, seq, log_theta: float | None = None) -> bool:
    j = len(x)
    return (con1(x, d, esc, seq)[0]
            and con3(x, varpi, theta, EscapeConstants.nu_hi(j), esc, seq, log_theta)[0]
            and con4(x, G, seq)[0])


def lifted_rs_parameters(d: float, j: int, esc: EscapeConstants) -> dict:
    """(d, d j^3, 1/(xi j^3), 1) with theta passed as a log."""
    return {"d": d, "varpi": d * j ** 3, "theta": 0.0,
            "log_theta": -esc.log_xi - 3.0 * math.log(j), "G": 1.0}

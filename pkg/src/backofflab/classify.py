"""Bin taxonomy: many-covered, heavy-covered, weakly and strongly exposed.

Thresholds that are integers (W, j**2, j**chi) are compared exactly against
floor(W_l); logs are only used as a cheap prefilter and when a weight is too
large to materialise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

from .constants import ClassifierConstants
from .errors import InvariantViolation, NumericOverflow
from .send_sequence import Family, SendSequence

_LOG_SLACK = 1e-9


class BinKind(str, Enum):
    MANY_COVERED = "many_covered"
    HEAVY_COVERED = "heavy_covered"
    WEAKLY_EXPOSED = "weakly_exposed"
    STRONGLY_EXPOSED = "strongly_exposed"

    @property
    def covered(self) -> bool:
        return self in (BinKind.MANY_COVERED, BinKind.HEAVY_COVERED)

    @property
    def exposed(self) -> bool:
        return not self.covered


def _consts(lam: float, consts: ClassifierConstants | None) -> ClassifierConstants:
    if consts is None:
        return ClassifierConstants.genuine(lam)
    if consts.lam != lam:
        raise ValueError(f"constants were built for lambda={consts.lam}, not {lam}")
    return consts


def l_of(lam: float, j: int, consts: ClassifierConstants | None = None) -> float:
    return _consts(lam, consts).l_of(j)


def ll_of(lam: float, j: int, consts: ClassifierConstants | None = None) -> float:
    return _consts(lam, consts).ll_of(j)


# ---------------------------------------------------------------- comparisons

def weight_at_least(seq: SendSequence, k: int, threshold: int) -> bool:
    """W_k >= threshold for a positive integer threshold, decided exactly."""
    lw = seq.log_weight(k)
    lt = math.log(threshold)
    slack = _LOG_SLACK * max(1.0, lt)
    if lw > lt + slack:
        return True
    if lw < lt - slack:
        return False
    return seq.floor_weight(k) >= threshold


def _constant_weight(seq: SendSequence) -> int | None:
    if seq.family is Family.CONSTANT:
        return seq.floor_weight(1)
    return None


def upsilon_count(seq: SendSequence, j: int, log_w_threshold: float) -> int:
    """|{l in [j-1] : log W_l >= log_w_threshold}|."""
    if j <= 1:
        return 0
    if seq.family is Family.CONSTANT:
        return j - 1 if seq.log_weight(1) >= log_w_threshold else 0
    return sum(1 for ell in range(1, j) if seq.log_weight(ell) >= log_w_threshold)


def upsilon_set(seq: SendSequence, j: int, threshold: int) -> list[int]:
    """Bins l in [j-1] with W_l >= threshold (integer threshold, exact)."""
    return [ell for ell in range(1, j) if weight_at_least(seq, ell, threshold)]


def upsilon_size(seq: SendSequence, j: int, threshold: int) -> int:
    if j <= 1:
        return 0
    cw = _constant_weight(seq)
    if cw is not None:
        return j - 1 if cw >= threshold else 0
    return sum(1 for ell in range(1, j) if weight_at_least(seq, ell, threshold))


# ---------------------------------------------------------------- W tilde

@dataclass(frozen=True)
class WTilde:
    """Result of the W-tilde search.  Unpacks as (w, count)."""

    w: int | None  # None only when the weight is too large to build exactly
    count: int
    log_w: float

    def __iter__(self) -> Iterator:
        return iter((self.w, self.count))

    @property
    def log_product(self) -> float:
        return self.log_w + math.log(self.count) if self.count else -math.inf


def count_floor(lam: float, j: int, consts: ClassifierConstants) -> float:
    """min{j-1, C_Y L(j)/lam}: the least admissible |Upsilon| for W tilde."""
    return min(j - 1, consts.c_upsilon * consts.l_of(j) / lam)


def wtilde(seq: SendSequence, lam: float, j: int,
           consts: ClassifierConstants | None = None) -> WTilde:
    """Positive integer W maximising W*|Upsilon_{j,>=W}| under the count floor.

    Only W = 1 and W = floor(W_l) need checking, since the count is a step
    function of W and the product grows between steps.  Ties go to the
    larger W.
    """
    c = _consts(lam, consts)
    if j <= 1:
        return WTilde(1, 0, 0.0)
    need = count_floor(lam, j, c)
    cw = _constant_weight(seq)
    if cw is not None:
        return WTilde(cw, j - 1, math.log(cw))

    floors: list[int] = []
    huge: list[float] = []
    for ell in range(1, j):
        try:
            floors.append(seq.floor_weight(ell))
        except NumericOverflow:
            huge.append(seq.log_weight(ell))
    if huge:
        return _wtilde_logspace(seq, j, need)

    floors.sort(reverse=True)
    best_w, best_n, best_prod = 1, j - 1, j - 1
    n = 0
    idx = 0
    while idx < len(floors):
        v = floors[idx]
        while idx < len(floors) and floors[idx] == v:
            idx += 1
        n = idx  # bins with floor weight >= v
        if n < need:
            continue
        prod = v * n
        if prod > best_prod or (prod == best_prod and v > best_w):
            best_w, best_n, best_prod = v, n, prod
    return WTilde(best_w, best_n, math.log(best_w))


def _wtilde_logspace(seq: SendSequence, j: int, need: float) -> WTilde:
    logs = sorted((seq.log_weight(ell) for ell in range(1, j)), reverse=True)
    best = (math.log(j - 1), 0.0, j - 1)  # (log product, log w, count)
    for n, lw in enumerate(logs, start=1):
        if n < need:
            continue
        if n < len(logs) and logs[n] == lw:
            continue  # count at this W includes the later equal entries
        lp = lw + math.log(n)
        if lp > best[0] or (lp == best[0] and lw > best[1]):
            best = (lp, lw, n)
    _, lw, n = best
    w = None
    if lw <= 700.0:
        w = math.floor(math.exp(lw))
    return WTilde(w, n, lw)


# ---------------------------------------------------------------- classify

@dataclass(frozen=True)
class BinClass:
    kind: BinKind
    j: int
    prop1: bool
    prop2: bool
    prop3: bool
    wtilde: int | None
    upsilon_wtilde: int
    upsilon_sq: int
    upsilon_chi: int
    log_weight: float
    rhs_overflow: bool = False
    literal_weight_bound: bool | None = None
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def covered(self) -> bool:
        return self.kind.covered

    @property
    def exposed(self) -> bool:
        return self.kind.exposed

    def row(self) -> dict:
        return {
            "j": self.j,
            "class": self.kind.value,
            "prop1": int(self.prop1),
            "prop2": int(self.prop2),
            "prop3": int(self.prop3),
            "wtilde": "" if self.wtilde is None else self.wtilde,
            "upsilon_wtilde": self.upsilon_wtilde,
            "log_weight": self.log_weight,
        }


def kind_from_props(prop1: bool, prop2: bool, prop3: bool) -> BinKind:
    if prop1:
        return BinKind.MANY_COVERED
    if prop2:
        return BinKind.HEAVY_COVERED
    if prop3:
        return BinKind.WEAKLY_EXPOSED
    return BinKind.STRONGLY_EXPOSED


def prop1_holds(seq: SendSequence, j: int, wt: WTilde,
                consts: ClassifierConstants) -> tuple[bool, bool]:
    """(Prop1 verdict, whether the right-hand side overflowed a double)."""
    lhs_log = math.log(consts.c_f) + seq.log_weight(j) + consts.phi * math.log(j)
    if wt.count == 0:
        return lhs_log <= 0.0, False
    if wt.w is not None:
        prod = wt.w * wt.count
        if prod < 10 ** 300:
            return lhs_log <= consts.c_nb * consts.lam * prod, False
        log_rhs = math.log(consts.c_nb * consts.lam) + math.log(prod)
    else:
        log_rhs = math.log(consts.c_nb * consts.lam) + wt.log_product
    # rhs is astronomically large; compare logs of both sides
    return math.log(lhs_log) <= log_rhs, True


def classify_bin(seq: SendSequence, lam: float, j: int,
                 consts: ClassifierConstants | None = None) -> BinClass:
    c = _consts(lam, consts)
    if j < 1:
        raise ValueError("bins are numbered from 1")
    key = ("cls", j, c)
    hit = seq._cache.get(key)
    if hit is not None:
        return hit

    wt = wtilde(seq, lam, j, c)
    p1, overflow = prop1_holds(seq, j, wt, c)
    n_sq = upsilon_size(seq, j, j * j)
    p2 = n_sq >= c.c_upsilon * c.l_of(j) / (2.0 * lam)
    n_chi = upsilon_size(seq, j, j ** c.chi)
    p3 = n_chi >= c.c_upsilon * c.ll_of(j) / lam
    kind = kind_from_props(p1, p2, p3)

    lw = seq.log_weight(j)
    literal = None
    if kind.exposed:
        # Prop1 false together with W~*|Y| >= j-1 gives this bound.
        bound = c.c_nb * lam * (j - 1) - math.log(c.c_f) - c.phi * math.log(j)
        if not lw > bound - 1e-9 * max(1.0, abs(bound)):
            raise InvariantViolation(
                f"bin {j} classified exposed but log W_j = {lw} <= {bound}")
        literal = lw >= c.c_nb * lam * j / 2.0
    if wt.w is not None and wt.w * wt.count < j - 1:
        raise InvariantViolation(f"W-tilde product below j-1 at j={j}")

    out = BinClass(kind, j, p1, p2, p3, wt.w, wt.count, n_sq, n_chi, lw,
                   overflow, literal)
    seq._cache[key] = out
    return out


def classify_range(seq: SendSequence, lam: float, j_lo: int, j_hi: int,
                   consts: ClassifierConstants | None = None) -> list[BinClass]:
    return [classify_bin(seq, lam, j, consts) for j in range(j_lo, j_hi + 1)]


# ---------------------------------------------------------------- bottleneck

@dataclass(frozen=True)
class BottleneckResult:
    flag: bool
    witness: int | None
    cond_weight: bool
    cond_light_prefix: bool
    scan_hi: int
    truncated: bool


def is_bottleneck(seq: SendSequence, lam: float, i: int, search_cap: int,
                  consts: ClassifierConstants | None = None) -> BottleneckResult:
    c = _consts(lam, consts)
    if i < 16:
        raise ValueError("bottleneck test needs i >= 16")
    if search_cap < i:
        raise ValueError("search_cap must be at least i")
    lw_i = seq.log_weight(i)
    cond_i = lw_i >= i / math.exp(math.log(math.log(i)) ** 2)
    cap_k = c.k_of(i)
    cond_ii = all(seq.log_weight(ell) <= lw_i / (2 * cap_k) for ell in range(1, i))
    full_hi = math.floor(i * math.exp(math.sqrt(math.log(i))))
    hi = min(search_cap, full_hi)
    truncated = hi < full_hi
    witness = None
    if cond_i and cond_ii:
        for ip in range(i, hi + 1):
            if classify_bin(seq, lam, ip, c).kind is BinKind.STRONGLY_EXPOSED:
                witness = ip
                break
    flag = cond_i and cond_ii and witness is not None
    return BottleneckResult(flag, witness, cond_i, cond_ii, hi, truncated)


def many_covered_onset(seq: SendSequence, lam: float, hi: int,
                       consts: ClassifierConstants | None = None) -> int | None:
    """Least j <= hi from which a constant sequence is many-covered, by bisection.

    Only meaningful for the constant family, where Prop1 flips once as j
    grows (the right side is linear in j, the left logarithmic).
    """
    if seq.family is not Family.CONSTANT:
        raise ValueError("onset search needs a constant sequence")
    c = _consts(lam, consts)

    def many(j: int) -> bool:
        return prop1_holds(seq, j, wtilde(seq, lam, j, c), c)[0]

    if not many(hi):
        return None
    lo = 1
    if many(lo):
        return lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if many(mid):
            hi = mid
        else:
            lo = mid
    return hi

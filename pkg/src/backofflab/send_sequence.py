"""Send sequences p_0 = 1, p_1, p_2, ... and their weights W_k = 1/p_k.

Weights are handled in log space (natural logs).  ``floor_weight`` returns
the exact integer part of W_k, which classification uses for threshold
comparisons against integers such as j**2.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Mapping, Sequence

import numpy as np

from .constants import ClassifierConstants
from .errors import IndexUnavailable, InvalidFamilyParameter, NumericOverflow


class Family(str, Enum):
    CONSTANT = "constant"
    BINARY_EXPONENTIAL = "binary_exponential"
    GEOMETRIC = "geometric"
    POLYNOMIAL = "polynomial"
    EXPLICIT = "explicit"
    INTERLEAVED = "interleaved_aloha_exp"
    WEAKLY_EXPOSED = "weakly_exposed_example"


# log of the largest integer we are willing to materialise as a schedule entry
_SCHEDULE_LOG_CAP = 60.0
# exact integer weights are only built below this log size (about 43k digits)
_EXACT_LOG_CAP = 1.0e5


def _default_schedule(base: int) -> tuple[float, ...]:
    """a_0 = 0, a_k = (2C)^{a_{k-1}}; the first entry too large to build is inf."""
    sched: list[float] = [0]
    while True:
        prev = sched[-1]
        if prev * math.log(2 * base) > _SCHEDULE_LOG_CAP:
            sched.append(math.inf)
            return tuple(sched)
        sched.append((2 * base) ** int(prev))


@dataclass(frozen=True)
class SendSequence:
    family: Family
    params: tuple[tuple[str, Any], ...]
    _cache: dict = field(default_factory=dict, compare=False, hash=False, repr=False)

    # ------------------------------------------------------------------ access
    def param(self, name: str) -> Any:
        return dict(self.params)[name]

    @property
    def descriptor(self) -> dict[str, Any]:
        out: dict[str, Any] = {"family": self.family.value}
        for k, v in self.params:
            if k == "consts":
                continue
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    def _check(self, k: int) -> None:
        if k < 0:
            raise IndexUnavailable(f"bin index must be non-negative, got {k}")
        if self.family is Family.EXPLICIT and k >= len(self.param("probs")):
            raise IndexUnavailable(
                f"explicit sequence has {len(self.param('probs'))} entries; bin {k} requested")

    @property
    def length(self) -> int | None:
        """Number of defined bins, or None for infinite families."""
        if self.family is Family.EXPLICIT:
            return len(self.param("probs"))
        return None

    # ------------------------------------------------------------ schedules
    def _schedule(self) -> tuple[float, ...]:
        if self.family is Family.INTERLEAVED and self.param("schedule") is not None:
            return self.param("schedule")
        return _default_schedule(self.param("base"))

    def _interleaved_even(self, k: int) -> bool:
        # the last listed interval runs to infinity
        return (bisect.bisect_right(self._schedule(), k) - 1) % 2 == 0

    def _weakly_exposed_case(self, j: int) -> tuple[str, int]:
        """('peak', a_k) if j = a_k, ('ramp', a_k) if j sits in a_k's ramp, else ('flat', 0)."""
        hit = self._cache.get(("we", j))
        if hit is not None:
            return hit
        lam = self.param("lam")
        consts: ClassifierConstants = self.param("consts")
        sched = self._schedule()
        out: tuple[str, int] = ("flat", 0)
        finite = [int(a) for a in sched[self.param("k0"):] if a != math.inf]
        if j in finite:
            out = ("peak", j)
        else:
            for a_k in finite:
                if a_k <= j:
                    continue
                ramp = math.ceil(consts.c_upsilon * consts.ll_of(a_k) / lam)
                if a_k - ramp <= j:
                    out = ("ramp", a_k)
                    break
        self._cache[("we", j)] = out
        return out

    # -------------------------------------------------------------- weights
    def log_weight(self, k: int) -> float:
        self._check(k)
        if k == 0:
            return 0.0
        cached = self._cache.get(k)
        if cached is not None:
            return cached
        fam = self.family
        if fam is Family.CONSTANT:
            val = -math.log(self.param("p"))
        elif fam is Family.BINARY_EXPONENTIAL:
            val = k * math.log(2.0)
        elif fam is Family.GEOMETRIC:
            val = k * math.log(self.param("base"))
        elif fam is Family.POLYNOMIAL:
            val = self.param("c") * math.log(k)
        elif fam is Family.EXPLICIT:
            val = -math.log(self.param("probs")[k])
        elif fam is Family.INTERLEAVED:
            val = k * math.log(self.param("base")) if self._interleaved_even(k) else math.log(2.0)
        else:
            case, a_k = self._weakly_exposed_case(k)
            if case == "peak":
                val = k * math.log(self.param("base"))
            elif case == "ramp":
                val = self.param("consts").chi * math.log(a_k)
            else:
                val = math.log(2.0)
        self._cache[k] = val
        return val

    def prob(self, k: int) -> float:
        self._check(k)
        if k == 0:
            return 1.0
        fam = self.family
        if fam is Family.CONSTANT:
            return float(self.param("p"))
        if fam is Family.EXPLICIT:
            return float(self.param("probs")[k])
        if fam is Family.BINARY_EXPONENTIAL:
            return math.ldexp(1.0, -k)
        exact = self._exact_int_weight(k)
        if exact is not None and self.log_weight(k) < 709.0:
            return 1 / exact  # int true division rounds correctly
        return math.exp(-self.log_weight(k))

    def weight(self, k: int) -> float:
        """W_k as a float; +inf when it exceeds the double range."""
        if self.log_weight(k) > 710.0:
            return math.inf
        exact = self._exact_int_weight(k)
        if exact is not None:
            try:
                return float(exact)
            except OverflowError:
                return math.inf
        p = self.prob(k)
        return math.inf if p == 0.0 else 1.0 / p

    def _exact_int_weight(self, k: int) -> int | None:
        fam = self.family
        if k == 0:
            return 1
        if self.log_weight(k) > _EXACT_LOG_CAP:
            return None
        if fam is Family.BINARY_EXPONENTIAL:
            return 2 ** k
        if fam is Family.GEOMETRIC:
            return self.param("base") ** k
        if fam is Family.POLYNOMIAL:
            c = self.param("c")
            if float(c).is_integer():
                return k ** int(c)
            return None
        if fam is Family.INTERLEAVED:
            return self.param("base") ** k if self._interleaved_even(k) else 2
        if fam is Family.WEAKLY_EXPOSED:
            case, a_k = self._weakly_exposed_case(k)
            if case == "peak":
                return self.param("base") ** k
            if case == "ramp":
                return a_k ** self.param("consts").chi
            return 2
        p = self.prob(k)
        w = 1.0 / p
        if w.is_integer() and w < 2 ** 53:
            return int(w)
        return None

    def floor_weight(self, k: int) -> int:
        """Exact floor(W_k) as a Python integer (arbitrary size).

        Families with float probabilities use the exact rational value of the
        stored double, so the result is the floor of 1/fl(p_k).
        """
        self._check(k)
        exact = self._exact_int_weight(k)
        if exact is not None:
            return exact
        p = self.prob(k)
        if p == 0.0 or self.log_weight(k) > _EXACT_LOG_CAP:
            raise NumericOverflow(f"weight of bin {k} is beyond double range")
        return math.floor(Fraction(1) / Fraction(p))

    def is_integer_weight(self, k: int) -> bool:
        return self._exact_int_weight(k) is not None

    # ---------------------------------------------------------- vector views
    def probs(self, n: int) -> np.ndarray:
        """Array (p_0, ..., p_{n-1}); bins past an explicit list raise."""
        arr = self._cache.get("probs_arr")
        if arr is None or len(arr) < n:
            m = max(n, 2 * (0 if arr is None else len(arr)), 8)
            if self.length is not None:
                m = min(m, self.length)
                if m < n:
                    self._check(n - 1)
            arr = np.array([self.prob(k) for k in range(m)], dtype=float)
            self._cache["probs_arr"] = arr
        return arr[:n]

    def log_weights(self, n: int) -> np.ndarray:
        return np.array([self.log_weight(k) for k in range(n)], dtype=float)

    def weights(self, n: int) -> np.ndarray:
        return np.array([self.weight(k) for k in range(n)], dtype=float)


# ------------------------------------------------------------------ builders

def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidFamilyParameter(msg)


def make_family(spec: Mapping[str, Any] | str, **kwargs: Any) -> SendSequence:
    """Build a sequence from a descriptor such as ``{"family": "geometric", "base": 10}``."""
    if isinstance(spec, str):
        desc = {"family": spec, **kwargs}
    else:
        desc = {**spec, **kwargs}
    try:
        fam = Family(desc.get("family"))
    except ValueError as exc:
        raise InvalidFamilyParameter(f"unknown family {desc.get('family')!r}") from exc

    if fam is Family.CONSTANT:
        p = float(desc.get("p", 0.5))
        _require(0.0 < p <= 1.0, f"constant probability must lie in (0, 1], got {p}")
        params: tuple = (("p", p),)
    elif fam is Family.BINARY_EXPONENTIAL:
        params = ()
    elif fam is Family.GEOMETRIC:
        base = desc.get("base", 10)
        _require(isinstance(base, int) and not isinstance(base, bool) and base >= 2,
                 f"geometric base must be an integer >= 2, got {base!r}")
        params = (("base", base),)
    elif fam is Family.POLYNOMIAL:
        c = float(desc.get("c", 2.0))
        _require(c > 0.0, f"polynomial exponent must be positive, got {c}")
        params = (("c", c),)
    elif fam is Family.EXPLICIT:
        probs = tuple(float(x) for x in desc.get("probs", ()))
        _require(len(probs) > 0, "explicit sequence must be non-empty")
        _require(all(0.0 < x <= 1.0 for x in probs), "explicit probabilities must lie in (0, 1]")
        _require(probs[0] == 1.0, "explicit sequence must start with p_0 = 1")
        params = (("probs", probs),)
    elif fam is Family.INTERLEAVED:
        base = desc.get("base", 10)
        _require(isinstance(base, int) and not isinstance(base, bool) and base >= 2,
                 f"interleaved base must be an integer >= 2, got {base!r}")
        sched = desc.get("schedule")
        if sched is not None:
            sched = tuple(int(a) for a in sched)
            _require(len(sched) >= 1 and sched[0] == 0, "schedule must start with a_0 = 0")
            _require(all(b > a for a, b in zip(sched, sched[1:])),
                     "schedule must be strictly increasing")
        params = (("base", base), ("schedule", sched))
    else:
        base = desc.get("base", 10)
        _require(isinstance(base, int) and not isinstance(base, bool) and base >= 2,
                 f"weakly-exposed base must be an integer >= 2, got {base!r}")
        k0 = desc.get("k0", 1)
        _require(isinstance(k0, int) and k0 >= 1, f"k0 must be a positive integer, got {k0!r}")
        lam = float(desc.get("lam", 0.1))
        _require(0.0 < lam < 1.0, f"birth rate must lie in (0, 1), got {lam}")
        consts = desc.get("consts") or ClassifierConstants.genuine(lam)
        params = (("base", base), ("k0", k0), ("lam", lam), ("consts", consts))
    return SendSequence(fam, params)


def prob(seq: SendSequence, k: int) -> float:
    return seq.prob(k)


def log_weight(seq: SendSequence, k: int) -> float:
    return seq.log_weight(k)


@dataclass(frozen=True)
class CapReport:
    passed: tuple[bool, ...]
    first_failure: int | None

    @property
    def ok(self) -> bool:
        return self.first_failure is None


def validate_cap(seq: SendSequence, lam: float, j_max: int) -> CapReport:
    """Check log W_j <= j ln(2/lam) for j in [j_max]."""
    if lam <= 0.0:
        raise InvalidFamilyParameter("birth rate must be positive")
    if j_max < 1:
        raise InvalidFamilyParameter("j_max must be at least 1")
    bound = math.log(2.0 / lam)
    passed = tuple(seq.log_weight(j) <= j * bound for j in range(1, j_max + 1))
    first = next((j for j, ok in enumerate(passed, start=1) if not ok), None)
    return CapReport(passed, first)


def descriptor_of(seq: SendSequence) -> dict[str, Any]:
    return seq.descriptor


def explicit(probs: Sequence[float]) -> SendSequence:
    return make_family({"family": "explicit", "probs": list(probs)})

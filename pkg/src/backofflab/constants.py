"""Proof constants for bin classification and the transition rule.

Two presets exist.  ``genuine`` uses the full-size values.  ``synthetic`` keeps
every formula but shrinks the base numbers so that property tests can reach
real transitions on tiny instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class ClassifierConstants:
    lam: float
    c_no: float = 300.0
    c_upsilon: float = 320.0
    c_f: float = 2.0
    phi: int = 100
    chi: int = 1000
    c_se_factor: float = 10.0
    synthetic: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"birth rate must lie in (0, 1), got {self.lam}")

    @classmethod
    def genuine(cls, lam: float) -> "ClassifierConstants":
        return cls(lam=lam)

    @classmethod
    def synthetic_preset(cls, lam: float) -> "ClassifierConstants":
        # phi = 3 keeps prod(1 - 1/(4a^phi)) above 2/3, which mu_gamma asserts.
        return cls(lam=lam, c_no=1.0, c_upsilon=1.0, c_f=2.0, phi=3, chi=3,
                   c_se_factor=1.0, synthetic=True)

    @property
    def c_se(self) -> float:
        return self.c_se_factor * self.c_no * math.ceil(-math.log(self.lam))

    @property
    def c_nb(self) -> float:
        return 1.0 / (30.0 * self.c_upsilon)

    @property
    def c_0(self) -> float:
        return (2.0 * self.phi * self.c_f * self.c_upsilon * self.c_no ** 2
                * math.log(6.0 / self.lam) / (self.c_nb * self.lam))

    def ll_of(self, j: int) -> float:
        """C_SE * ceil(max(1, ln ln j)); the clamp also covers j in {1, 2}."""
        inner = 1.0
        if j > 1:
            lj = math.log(j)
            if lj > 1.0:
                inner = max(1.0, math.log(lj))
        return self.c_se * math.ceil(inner)

    def l_of(self, j: int) -> float:
        return self.c_no * math.ceil(max(-math.log(self.lam), self.c_no * math.log(j)))

    def k_of(self, i: int) -> int:
        return 2 * math.ceil(self.c_upsilon * self.ll_of(i) / self.lam)


@dataclass(frozen=True)
class RuleConstants:
    """Numbers used by the transition rule, escape processes and warmup."""

    lam: float
    noise_divisor: float = 40.0
    escape_divisor: float = 80.0
    escape_floor: float | None = None  # None means 100 / lam**2
    nu_divisor: float = 192.0
    advance_exp: int = 24
    refill_offset: int = 46
    stabilise_offset: int = 72
    warmup_factor: float = 80.0  # leading factor of the protection time
    synthetic: bool = False

    @classmethod
    def genuine(cls, lam: float) -> "RuleConstants":
        return cls(lam=lam)

    @classmethod
    def synthetic_preset(cls, lam: float) -> "RuleConstants":
        return cls(lam=lam, escape_floor=4.0, advance_exp=2, refill_offset=0,
                   stabilise_offset=1, warmup_factor=0.25, synthetic=True)

    @property
    def set_floor(self) -> float:
        if self.escape_floor is not None:
            return self.escape_floor
        return 100.0 / self.lam ** 2


@dataclass(frozen=True)
class LabConstants:
    classifier: ClassifierConstants
    rule: RuleConstants

    @property
    def lam(self) -> float:
        return self.classifier.lam

    @property
    def synthetic(self) -> bool:
        return self.classifier.synthetic


def constants_for(lam: float, synthetic: bool = False) -> LabConstants:
    if synthetic:
        return LabConstants(ClassifierConstants.synthetic_preset(lam),
                            RuleConstants.synthetic_preset(lam))
    return LabConstants(ClassifierConstants.genuine(lam), RuleConstants.genuine(lam))


def with_lambda(consts: LabConstants, lam: float) -> LabConstants:
    return LabConstants(replace(consts.classifier, lam=lam), replace(consts.rule, lam=lam))

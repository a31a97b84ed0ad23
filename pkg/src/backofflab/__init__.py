"""Simulation and verification lab for backoff contention resolution."""

from .constants import ClassifierConstants, LabConstants, RuleConstants, constants_for
from .send_sequence import Family, SendSequence, make_family, validate_cap

__version__ = "0.1.0"

__all__ = [
    "ClassifierConstants",
    "Family",
    "LabConstants",
    "RuleConstants",
    "SendSequence",
    "constants_for",
    "make_family",
    "validate_cap",
    "__version__",
]

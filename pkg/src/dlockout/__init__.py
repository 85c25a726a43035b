"""Key-MUX obfuscation hardened with an attempt-counting design lockout."""

__version__ = "0.1.0"

from .ir import Design, DesignError, parse_design, serialize_design, validate_design
from .lockout import LockoutState, Phase, harden
from .obfuscate import KeySpec, ObfuscationPoint
from .sim import run_pass, simulate

__all__ = [
    "Design",
    "DesignError",
    "KeySpec",
    "LockoutState",
    "ObfuscationPoint",
    "Phase",
    "__version__",
    "harden",
    "parse_design",
    "run_pass",
    "serialize_design",
    "simulate",
    "validate_design",
]

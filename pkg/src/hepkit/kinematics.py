"""Relativistic kinematics primitives (GeV, metric +,-,-,-).

All scalars are 64-bit floats.  Operations are pure functions on value
types and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# relative tolerance for the on-shell precondition of invariant_mass
MASS_TOLERANCE = 1e-9

# absolute slack on threshold preconditions, absorbs chain rounding
THRESHOLD_SLACK = 1e-12


class KinematicsError(ValueError):
    """A documented kinematic precondition failed."""

    kind = "NonPhysical"


class BelowThreshold(KinematicsError):
    kind = "BelowThreshold"


class NonPhysical(KinematicsError):
    kind = "NonPhysical"


@dataclass(frozen=True)
class FourVector:
    """Energy-momentum 4-tuple (e, px, py, pz)."""

    e: float
    px: float
    py: float
    pz: float

    def __add__(self, other: "FourVector") -> "FourVector":
        return FourVector(
            self.e + other.e,
            self.px + other.px,
            self.py + other.py,
            self.pz + other.pz,
        )

    def __sub__(self, other: "FourVector") -> "FourVector":
        return FourVector(
            self.e - other.e,
            self.px - other.px,
            self.py - other.py,
            self.pz - other.pz,
        )

    def p2(self) -> float:
        return self.px**2 + self.py**2 + self.pz**2

    def mass2(self) -> float:
        return self.e**2 - self.p2()

    @classmethod
    def at_rest(cls, mass: float) -> "FourVector":
        return cls(mass, 0.0, 0.0, 0.0)


@dataclass
class Parameter:
    """Named fit parameter with optional bounds.

    ``step`` seeds the initial simplex of the minimizer and must be
    positive.  When both bounds are present the value must stay inside.
    """

    name: str
    value: float
    step: float = 0.1
    lower: float | None = None
    upper: float | None = None
    fixed: bool = False

    def __post_init__(self):
        if not self.name:
            raise ValueError("parameter name must be non-empty")
        if not self.step > 0:
            raise ValueError(f"{self.name}: step must be > 0, got {self.step}")
        if self.lower is not None and self.upper is not None and not self.lower < self.upper:
            raise ValueError(f"{self.name}: lower {self.lower} must be < upper {self.upper}")
        self._check_bounds(self.value)

    def _check_bounds(self, value: float) -> None:
        if self.lower is not None and value < self.lower:
            raise ValueError(f"{self.name}: value {value} below lower bound {self.lower}")
        if self.upper is not None and value > self.upper:
            raise ValueError(f"{self.name}: value {value} above upper bound {self.upper}")

    def set(self, value: float) -> None:
        self._check_bounds(value)
        self.value = float(value)

    @property
    def bounded(self) -> bool:
        return self.lower is not None or self.upper is not None


def invariant_mass(v: FourVector) -> float:
    """sqrt(e^2 - |p|^2); NonPhysical when the metric is space-like."""
    m2 = v.mass2()
    if m2 < -MASS_TOLERANCE * v.e**2:
        raise NonPhysical(f"space-like four-vector, m^2 = {m2!r}")
    return math.sqrt(max(0.0, m2))


def kallen(x: float, y: float, z: float) -> float:
    """Triangle function x^2 + y^2 + z^2 - 2xy - 2yz - 2zx."""
    return x * x + y * y + z * z - 2.0 * (x * y + y * z + z * x)


def breakup_momentum(M: float, m1: float, m2: float) -> float:
    """Two-body breakup momentum sqrt(lambda(M^2, m1^2, m2^2)) / (2M).

    Exactly 0 at threshold; BelowThreshold when M < m1 + m2 (beyond the
    absolute slack).
    """
    if M <= 0:
        raise BelowThreshold(f"mother mass must be positive, got {M}")
    if M < m1 + m2 - THRESHOLD_SLACK:
        raise BelowThreshold(f"{M} below threshold {m1} + {m2}")
    lam = kallen(M * M, m1 * m1, m2 * m2)
    return math.sqrt(max(0.0, lam)) / (2.0 * M)


def boost_into(v: FourVector, frame: FourVector) -> FourVector:
    """Boost ``v`` from the rest frame of ``frame`` into the frame where
    ``frame`` carries its given momentum.

    The rapidity factors are taken as gamma = E/M and gamma^2/(gamma+1),
    which avoids the cancellation in (gamma-1)/beta^2 near rest.
    """
    m2 = frame.mass2()
    if m2 <= 0:
        raise NonPhysical(f"boost frame must be time-like, m^2 = {m2!r}")
    m = math.sqrt(m2)
    gamma = frame.e / m
    bx, by, bz = frame.px / frame.e, frame.py / frame.e, frame.pz / frame.e
    bp = bx * v.px + by * v.py + bz * v.pz
    k = gamma * gamma / (gamma + 1.0) * bp + gamma * v.e
    return FourVector(
        gamma * (v.e + bp),
        v.px + k * bx,
        v.py + k * by,
        v.pz + k * bz,
    )

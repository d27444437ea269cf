"""Bounded parameter space for the swimmer simulator.

Vectors are plain float64 numpy arrays in physical units, ordered
fluid coefficients (5), motor arm length, hinge stiffness (5), hinge damping (5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLUID_LABELS = (
    "fluid_blunt_drag",
    "fluid_slender_drag",
    "fluid_angular_drag",
    "fluid_kutta_lift",
    "fluid_magnus_lift",
)
ARM_LABEL = "motor_arm_length"
STIFFNESS_LABELS = tuple(f"hinge_stiffness_{j}" for j in range(1, 6))
DAMPING_LABELS = tuple(f"hinge_damping_{j}" for j in range(1, 6))

# index slices into the canonical 16-vector
FLUID = slice(0, 5)
ARM = 5
STIFFNESS = slice(6, 11)
DAMPING = slice(11, 16)
N_PARAMS = 16


def make_rng(seed) -> np.random.Generator:
    """The one generator used everywhere: PCG64 seeded through SeedSequence."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class ParamBounds:
    labels: tuple
    lower: np.ndarray
    upper: np.ndarray
    units: tuple

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "units", tuple(self.units))
        n = len(self.labels)
        if lower.shape != (n,) or upper.shape != (n,) or len(self.units) != n:
            raise ValueError("labels, lower, upper and units must have equal length")
        if len(set(self.labels)) != n:
            raise ValueError("parameter labels must be unique")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("bounds must be finite")
        if np.any(lower >= upper):
            bad = [self.labels[i] for i in np.flatnonzero(lower >= upper)]
            raise ValueError(f"lower must be < upper for {bad}")

    @property
    def dim(self) -> int:
        return len(self.labels)

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def to_list(self) -> list:
        return [
            {"label": lab, "lower": float(lo), "upper": float(hi), "unit": unit}
            for lab, lo, hi, unit in zip(self.labels, self.lower, self.upper, self.units)
        ]

    @classmethod
    def from_list(cls, entries) -> "ParamBounds":
        return cls(
            labels=[e["label"] for e in entries],
            lower=[e["lower"] for e in entries],
            upper=[e["upper"] for e in entries],
            units=[e.get("unit", "") for e in entries],
        )

    @classmethod
    def unit_box(cls, dim: int) -> "ParamBounds":
        return cls(
            labels=[f"x{i}" for i in range(dim)],
            lower=np.zeros(dim),
            upper=np.ones(dim),
            units=[""] * dim,
        )


def swimmer_bounds() -> ParamBounds:
    """The 16-dimensional box searched during calibration."""
    labels = FLUID_LABELS + (ARM_LABEL,) + STIFFNESS_LABELS + DAMPING_LABELS
    lower = [0.0] * 5 + [0.01] + [0.1] * 5 + [0.0] * 5
    upper = [10.0] * 5 + [0.06] + [5.0] * 5 + [2.0] * 5
    units = ("",) * 5 + ("m",) + ("N*m/rad",) * 5 + ("N*m*s/rad",) * 5
    return ParamBounds(labels, lower, upper, units)


def _check_shape(theta, bounds):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (bounds.dim,):
        raise ValueError(f"expected a {bounds.dim}-vector, got shape {theta.shape}")
    return theta


def clip(theta, bounds: ParamBounds) -> np.ndarray:
    """Project onto the bounds box. Non-finite components raise ValueError."""
    theta = _check_shape(theta, bounds)
    if not np.all(np.isfinite(theta)):
        raise ValueError(f"non-finite parameter vector: {theta.tolist()}")
    return np.minimum(np.maximum(theta, bounds.lower), bounds.upper)


def normalize(theta, bounds: ParamBounds) -> np.ndarray:
    theta = _check_shape(theta, bounds)
    if not (np.all(np.isfinite(theta)) and bounds.contains(theta)):
        raise ValueError("normalize requires a feasible parameter vector")
    return (theta - bounds.lower) / bounds.span


def denormalize(u, bounds: ParamBounds) -> np.ndarray:
    u = _check_shape(u, bounds)
    return bounds.lower + u * bounds.span


def random_init(seed: int, bounds: ParamBounds) -> np.ndarray:
    """Uniform draw inside the box; the first draw of ``make_rng(seed)``."""
    return uniform_samples(make_rng(seed), bounds, 1)[0]


def uniform_samples(rng: np.random.Generator, bounds: ParamBounds, n: int) -> np.ndarray:
    u = rng.random((n, bounds.dim))
    return bounds.lower + u * bounds.span

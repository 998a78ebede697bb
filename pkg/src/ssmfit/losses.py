"""Smooth separable loss functions with value, gradient, and diagonal Hessian.

Three kinds are supported: plain least squares, the hybrid penalty
sqrt(r^2 + nu^2) - nu (quadratic near zero, linear in the tails), and the
redescending Student's t penalty ln(1 + r^2 / nu).  The Student's t
curvature can go negative; `min_psd_boost` returns the smallest diagonal
shift that restores a strictly positive curvature floor.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

LS = "ls"
HYBRID = "hybrid"
STUDENT_T = "student_t"
VALID_KINDS = (LS, HYBRID, STUDENT_T)

# Curvature floor used when repairing nonconvex losses.
PSD_FLOOR = 1e-8


@dataclass(frozen=True)
class LossSpec:
    """A loss kind plus its scale parameter and optional curvature boost."""

    kind: str = LS
    nu: float | None = None
    boost: float = 0.0

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}, expected one of {VALID_KINDS}")
        if self.kind in (HYBRID, STUDENT_T):
            if self.nu is None or self.nu <= 0:
                raise ValueError(f"{self.kind} loss requires nu > 0, got {self.nu}")
        if self.boost < 0:
            raise ValueError(f"boost must be nonnegative, got {self.boost}")

    def with_boost(self, extra: float) -> "LossSpec":
        return dataclasses.replace(self, boost=self.boost + extra)


def loss_value(spec: LossSpec, r) -> float:
    r = np.asarray(r, dtype=float)
    if spec.kind == LS:
        return 0.5 * float(np.dot(r, r))
    if spec.kind == HYBRID:
        return float(np.sum(np.sqrt(r * r + spec.nu**2) - spec.nu))
    return float(np.sum(np.log1p(r * r / spec.nu)))


def loss_grad(spec: LossSpec, r):
    r = np.asarray(r, dtype=float)
    if spec.kind == LS:
        return r.copy()
    if spec.kind == HYBRID:
        return r / np.sqrt(r * r + spec.nu**2)
    return 2.0 * r / (spec.nu + r * r)


def loss_hess_diag(spec: LossSpec, r):
    """Componentwise second derivative, including the spec's boost."""
    r = np.asarray(r, dtype=float)
    if spec.kind == LS:
        h = np.ones_like(r)
    elif spec.kind == HYBRID:
        h = spec.nu**2 / (r * r + spec.nu**2) ** 1.5
    else:
        h = 2.0 * (spec.nu - r * r) / (spec.nu + r * r) ** 2
    return h + spec.boost


def min_psd_boost(spec: LossSpec, r) -> float:
    """Smallest extra boost making every curvature entry >= PSD_FLOOR."""
    h = loss_hess_diag(spec, r)
    if h.size == 0:
        return 0.0
    return float(max(0.0, PSD_FLOOR - h.min()))

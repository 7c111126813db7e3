"""Damped double pendulum: the ground-truth field for the experiments.

Point masses on rigid massless links, angles measured from the downward
vertical, viscous damping torque at each joint.  With positive damping the
origin is a stable equilibrium.  The energy routines double as a test
oracle: along the flow, dE/dt = -b1 w1^2 - b2 w2^2 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PendulumParams", "field", "energy", "energy_rate"]


@dataclass(frozen=True)
class PendulumParams:
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    gravity: float = 9.81
    b1: float = 0.5
    b2: float = 0.5

    def __post_init__(self):
        for name in ("m1", "m2", "l1", "l2", "gravity", "b1", "b2"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


def field(p: PendulumParams, x) -> np.ndarray:
    """State derivative [w1, w2, acc1, acc2]; accepts (..., 4) batches."""
    x = np.asarray(x, dtype=np.float64)
    th1, th2, w1, w2 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    delta = th1 - th2
    c, s = np.cos(delta), np.sin(delta)
    a11 = (p.m1 + p.m2) * p.l1 ** 2
    a12 = p.m2 * p.l1 * p.l2 * c
    a22 = p.m2 * p.l2 ** 2
    rhs1 = (-p.m2 * p.l1 * p.l2 * s * w2 ** 2
            - (p.m1 + p.m2) * p.gravity * p.l1 * np.sin(th1) - p.b1 * w1)
    rhs2 = (p.m2 * p.l1 * p.l2 * s * w1 ** 2
            - p.m2 * p.gravity * p.l2 * np.sin(th2) - p.b2 * w2)
    det = a11 * a22 - a12 * a12
    # det = m2 l1^2 l2^2 (m1 + m2 - m2 cos^2) > 0 for positive masses
    assert np.all(det > 0.0), "mass matrix became singular"
    acc1 = (a22 * rhs1 - a12 * rhs2) / det
    acc2 = (a11 * rhs2 - a12 * rhs1) / det
    return np.stack([w1, w2, acc1, acc2], axis=-1)


def energy(p: PendulumParams, x) -> np.ndarray:
    """Kinetic plus potential energy, zeroed at the origin; (...,) shaped."""
    x = np.asarray(x, dtype=np.float64)
    th1, th2, w1, w2 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    kin = (0.5 * (p.m1 + p.m2) * p.l1 ** 2 * w1 ** 2
           + 0.5 * p.m2 * p.l2 ** 2 * w2 ** 2
           + p.m2 * p.l1 * p.l2 * np.cos(th1 - th2) * w1 * w2)
    pot = ((p.m1 + p.m2) * p.gravity * p.l1 * (1.0 - np.cos(th1))
           + p.m2 * p.gravity * p.l2 * (1.0 - np.cos(th2)))
    return kin + pot


def energy_rate(p: PendulumParams, x) -> np.ndarray:
    """dE/dt along the field, via the analytic energy gradient."""
    x = np.asarray(x, dtype=np.float64)
    th1, th2, w1, w2 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    v = field(p, x)
    acc1, acc2 = v[..., 2], v[..., 3]
    cross = p.m2 * p.l1 * p.l2
    s = np.sin(th1 - th2)
    c = np.cos(th1 - th2)
    de_th1 = -cross * s * w1 * w2 + (p.m1 + p.m2) * p.gravity * p.l1 * np.sin(th1)
    de_th2 = cross * s * w1 * w2 + p.m2 * p.gravity * p.l2 * np.sin(th2)
    de_w1 = (p.m1 + p.m2) * p.l1 ** 2 * w1 + cross * c * w2
    de_w2 = p.m2 * p.l2 ** 2 * w2 + cross * c * w1
    return de_th1 * w1 + de_th2 * w2 + de_w1 * acc1 + de_w2 * acc2

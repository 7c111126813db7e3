"""Fixed-step RK4 integration, trajectory metrics and stability audits.

Field callables take a state array (optionally batched along the leading
axis) and return its derivative with matching shape.  All CSV output uses
17 significant digits so written floats round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import NumericError

__all__ = [
    "Trajectory",
    "SimReport",
    "rk4_step",
    "simulate",
    "simulate_batch",
    "batch_sim_error",
    "audit_stability",
    "energy_monotonicity_audit",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_sim_report_csv",
]


@dataclass
class Trajectory:
    t0: float
    dt: float
    states: np.ndarray  # (n_steps + 1, dim)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.states.shape[0])


@dataclass
class SimReport:
    """Per-step batch error statistics between two simulated fields."""
    t0: float
    dt: float
    mean_err: np.ndarray
    max_err: np.ndarray
    bound_violations: int | None = None
    final_mean: float = dc_field(init=False, default=0.0)
    final_max: float = dc_field(init=False, default=0.0)

    def __post_init__(self):
        if np.any(self.mean_err < 0.0) or np.any(self.max_err < 0.0):
            raise ValueError("errors must be nonnegative")
        self.final_mean = float(self.mean_err[-1])
        self.final_max = float(self.max_err[-1])

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.mean_err.shape[0])


def rk4_step(field, x, dt: float) -> np.ndarray:
    """One classical four-stage step; raises on non-finite stages."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    k1 = field(x)
    k2 = field(x + 0.5 * dt * k1)
    k3 = field(x + 0.5 * dt * k2)
    k4 = field(x + dt * k3)
    for i, k in enumerate((k1, k2, k3, k4), start=1):
        if not np.all(np.isfinite(k)):
            raise NumericError(f"non-finite derivative at RK4 stage {i}")
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _n_steps(t_end: float, dt: float) -> int:
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if t_end < 0.0:
        raise ValueError("t_end must be nonnegative")
    return int(np.ceil(t_end / dt - 1e-12))


def simulate(field, x0, dt: float, t_end: float, t0: float = 0.0) -> Trajectory:
    """Integrate ceil(t_end / dt) fixed steps from x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    steps = _n_steps(t_end, dt)
    states = np.empty((steps + 1,) + x0.shape)
    states[0] = x0
    x = x0
    for k in range(steps):
        try:
            x = rk4_step(field, x, dt)
        except NumericError as e:
            raise NumericError(f"{e} (time step {k})") from None
        states[k + 1] = x
    return Trajectory(t0=t0, dt=dt, states=states)


def simulate_batch(field, x0: np.ndarray, dt: float, t_end: float) -> np.ndarray:
    """Integrate a batch of initial states; returns (steps + 1, batch, dim)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    steps = _n_steps(t_end, dt)
    out = np.empty((steps + 1,) + x0.shape)
    out[0] = x0
    x = x0
    for k in range(steps):
        try:
            x = rk4_step(field, x, dt)
        except NumericError as e:
            raise NumericError(f"{e} (time step {k})") from None
        out[k + 1] = x
    return out


def batch_sim_error(field_a, field_b, initial_states, dt: float,
                    t_end: float) -> SimReport:
    """Mean and max over the batch of |x_a(t) - x_b(t)| per time step."""
    initial_states = np.atleast_2d(np.asarray(initial_states, dtype=np.float64))
    if initial_states.shape[0] == 0:
        raise ValueError("batch of initial states is empty")
    xa = simulate_batch(field_a, initial_states, dt, t_end)
    xb = simulate_batch(field_b, initial_states, dt, t_end)
    err = np.linalg.norm(xa - xb, axis=2)
    return SimReport(t0=0.0, dt=dt, mean_err=err.mean(axis=1),
                     max_err=err.max(axis=1))


def audit_stability(traj: Trajectory, x_star, overshoot: float,
                    decay_rate: float, slack: float = 1e-6) -> int:
    """Count steps violating the certified containment/decay envelopes.

    Checks both |x(t) - x*| <= overshoot * exp(-decay_rate t) |x(0) - x*|
    and the flat containment bound (the decay_rate = 0 envelope), each
    inflated by ``1 + slack`` to absorb integration error.
    """
    if traj.states.shape[0] == 0:
        raise ValueError("trajectory is empty")
    x_star = np.asarray(x_star, dtype=np.float64)
    dist = np.linalg.norm(traj.states - x_star, axis=1)
    r0 = dist[0]
    t = traj.times - traj.t0
    envelope = overshoot * np.exp(-decay_rate * t) * r0 * (1.0 + slack)
    flat = overshoot * r0 * (1.0 + slack)
    return int(np.count_nonzero((dist > envelope) | (dist > flat)))


def energy_monotonicity_audit(field, energy_fn, traj: Trajectory,
                              base_slack: float = 1e-9):
    """Count energy increases beyond integration slack along a trajectory.

    The per-step allowance is base_slack + C dt^5 with the dt^5 coefficient
    estimated by one Richardson comparison (full step vs two half steps) at
    the trajectory start.
    """
    h = np.asarray(energy_fn(traj.states), dtype=np.float64)
    dt = traj.dt
    x0 = traj.states[0]
    full = rk4_step(field, x0, dt)
    half = rk4_step(field, rk4_step(field, x0, 0.5 * dt), 0.5 * dt)
    coeff = abs(float(energy_fn(full[None])[0]) -
                float(energy_fn(half[None])[0])) * (16.0 / 15.0) / dt ** 5
    allowance = base_slack + coeff * dt ** 5
    increases = int(np.count_nonzero(np.diff(h) > allowance))
    return increases, allowance


# -- CSV output ------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectory_csv(path, traj: Trajectory):
    dim = traj.states.shape[1]
    header = "t," + ",".join(f"x{i + 1}" for i in range(dim))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t, row in zip(traj.times, traj.states):
            fh.write(_fmt(t) + "," + ",".join(_fmt(v) for v in row) + "\n")


def read_trajectory_csv(path) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    return Trajectory(t0=float(t[0]), dt=dt, states=data[:, 1:])


def write_sim_report_csv(path, report: SimReport):
    with open(path, "w") as fh:
        fh.write("t,mean_err,max_err\n")
        for t, me, xe in zip(report.times, report.mean_err, report.max_err):
            fh.write(f"{_fmt(t)},{_fmt(me)},{_fmt(xe)}\n")

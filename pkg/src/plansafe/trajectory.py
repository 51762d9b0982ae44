"""Unicycle dynamics and ego trajectories.

State rows are ``[x, y, theta, v]``; controls are ``(omega, a)`` with
``xdot = [v cos(theta), v sin(theta), omega, a]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle
from .scene import DEFAULT_FOOTPRINT, VEHICLE, AgentState


@dataclass(frozen=True)
class Bounds:
    v_max: float = 15.0
    omega_max: float = 0.6
    a_min: float = -4.0
    a_max: float = 3.0


DEFAULT_BOUNDS = Bounds()


@dataclass(frozen=True)
class ControlInput:
    omega: float
    a: float

    def check(self, bounds: Bounds = DEFAULT_BOUNDS):
        if abs(self.omega) > bounds.omega_max + 1e-12 or not (bounds.a_min - 1e-12 <= self.a <= bounds.a_max + 1e-12):
            raise ValueError(f"control {self} outside bounds {bounds}")


def unicycle(state, omega, a):
    x, y, th, v = np.moveaxis(np.asarray(state, dtype=float), -1, 0)
    return np.stack(
        np.broadcast_arrays(v * np.cos(th), v * np.sin(th), np.asarray(omega, float), np.asarray(a, float)),
        axis=-1,
    )


def rk4(state, omega, a, dt):
    """One RK4 step of the raw unicycle ODE (no clamping), vectorized over leading axes."""
    s = np.asarray(state, dtype=float)
    k1 = unicycle(s, omega, a)
    k2 = unicycle(s + 0.5 * dt * k1, omega, a)
    k3 = unicycle(s + 0.5 * dt * k2, omega, a)
    k4 = unicycle(s + dt * k3, omega, a)
    return s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def step(x: AgentState, u: ControlInput, dt: float, bounds: Bounds = DEFAULT_BOUNDS) -> AgentState:
    """Advance ``x`` by ``dt`` under constant control ``u``."""
    u.check(bounds)
    nx, ny, nth, nv = rk4(x.as_row(), u.omega, u.a, dt)
    return AgentState(nx, ny, wrap_angle(nth), float(np.clip(nv, 0.0, bounds.v_max)), x.kind, x.half_length, x.half_width)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ego plan sampled at ``dt``, including the current state as row 0."""

    states: np.ndarray
    dt: float = 0.1
    half_length: float = DEFAULT_FOOTPRINT[VEHICLE][0]
    half_width: float = DEFAULT_FOOTPRINT[VEHICLE][1]

    def __post_init__(self):
        st = np.array(self.states, dtype=float)
        if st.ndim != 2 or st.shape[1] != 4 or len(st) < 2:
            raise ValueError("trajectory needs an (n >= 2, 4) state array")
        st.setflags(write=False)
        object.__setattr__(self, "states", st)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.states))

    @property
    def horizon(self) -> float:
        return self.dt * (len(self.states) - 1)

    def __len__(self):
        return len(self.states)

    def __eq__(self, other):
        return isinstance(other, Trajectory) and self.dt == other.dt and np.array_equal(self.states, other.states)

    __hash__ = None

    def to_rows(self) -> list:
        return np.column_stack([self.times, self.states]).tolist()

    @classmethod
    def from_rows(cls, rows, **kw) -> "Trajectory":
        arr = np.asarray(rows, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 5:
            raise ValueError("trajectory rows must be [t, x, y, theta, v]")
        dt = float(arr[1, 0] - arr[0, 0])
        return cls(arr[:, 1:], dt=round(dt, 12), **kw)

    def dumps(self) -> str:
        return json.dumps(self.to_rows())


def refit_controls(states: np.ndarray, dt: float):
    """Finite-difference controls that best explain consecutive states."""
    st = np.asarray(states, dtype=float)
    omega = wrap_angle(np.diff(st[..., 2], axis=-1)) / dt
    a = np.diff(st[..., 3], axis=-1) / dt
    return omega, a


def validate_trajectory(traj: Trajectory, bounds: Bounds = DEFAULT_BOUNDS, rtol: float = 0.1, pos_tol: float = 0.05) -> None:
    """Raise ``ValueError`` unless the plan is explained by admissible controls.

    Controls are re-fitted per step; each must lie within the bounds widened by
    ``rtol`` and reproduce the next position within ``pos_tol`` meters.
    """
    st = traj.states
    omega, a = refit_controls(st, traj.dt)
    if np.any(np.abs(omega) > bounds.omega_max * (1 + rtol)):
        raise ValueError(f"heading rate {np.abs(omega).max():.3f} exceeds bound")
    if np.any(a > bounds.a_max * (1 + rtol)) or np.any(a < bounds.a_min * (1 + rtol)):
        raise ValueError(f"acceleration outside bounds: [{a.min():.3f}, {a.max():.3f}]")
    if np.any(st[:, 3] > bounds.v_max * (1 + rtol)):
        raise ValueError("speed exceeds v_max")
    pred = rk4(st[:-1], omega, a, traj.dt)
    err = np.linalg.norm(pred[:, :2] - st[1:, :2], axis=1)
    if np.any(err > pos_tol):
        raise ValueError(f"positions inconsistent with dynamics (max error {err.max():.4f} m)")

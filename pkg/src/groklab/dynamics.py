"""Reduced three-scalar training dynamics and its Lyapunov function.

State ``(x, w, u)`` stands for embedding, hidden weight and unembedding
scales of one sample; ``delta`` is 1 when the sample's class is the target
class and 0 otherwise.  The system is

    dx/dt = -(xwu - delta) wu
    dw/dt = -(xwu - delta) xu
    du/dt = -(xwu - delta) xw
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CUBE_EPS = 1e-6


@dataclass(frozen=True)
class ReducedState:
    x: float
    w: float
    u: float
    delta: int = 1

    def __post_init__(self):
        if self.delta not in (0, 1):
            raise ValueError("delta must be 0 or 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.w, self.u], dtype=np.float64)


def _check_delta(delta: int) -> None:
    if delta not in (0, 1):
        raise ValueError("delta must be 0 or 1")


def derivative(state, delta: int = 1) -> np.ndarray:
    """Right-hand side; ``state`` has shape ``(..., 3)``."""
    _check_delta(delta)
    s = np.asarray(state, dtype=np.float64)
    x, w, u = s[..., 0], s[..., 1], s[..., 2]
    r = x * w * u - delta
    return np.stack([-r * w * u, -r * x * u, -r * x * w], axis=-1)


def lyapunov(state) -> tuple[np.ndarray | float, np.ndarray | float]:
    """``V = sum (c - 1)^2`` and the closed form ``(3xwu - wu - xu - xw)(1 - xwu)``.

    The closed form is half of the chain-rule derivative along the delta = 1
    flow (see :func:`lyapunov_rate`); it has the same sign everywhere.
    """
    s = np.asarray(state, dtype=np.float64)
    x, w, u = s[..., 0], s[..., 1], s[..., 2]
    V = (x - 1) ** 2 + (w - 1) ** 2 + (u - 1) ** 2
    p = x * w * u
    Vdot = (3 * p - w * u - x * u - x * w) * (1 - p)
    if s.ndim == 1:
        return float(V), float(Vdot)
    return V, Vdot


def lyapunov_rate(state, delta: int = 1) -> np.ndarray | float:
    """``grad V . f`` evaluated directly."""
    s = np.asarray(state, dtype=np.float64)
    rate = (2.0 * (s - 1.0) * derivative(s, delta)).sum(axis=-1)
    return float(rate) if s.ndim == 1 else rate


@dataclass
class Trajectory:
    t: np.ndarray  # (n_steps + 1,)
    states: np.ndarray  # (n_steps + 1, 3) or (n_steps + 1, batch, 3)
    delta: int
    step_h: float
    left_cube: np.ndarray | bool  # per trajectory
    exit_time: np.ndarray | float  # first time outside the cube, nan if never

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def V(self) -> np.ndarray:
        return lyapunov(self.states)[0]

    def to_csv(self, path: str | Path, index: int | None = None) -> Path:
        """Write ``t,x,w,u,V`` rows; ``index`` picks one member of a batch."""
        states = self.states
        if states.ndim == 3:
            if index is None:
                raise ValueError("batched trajectory: pass index")
            states = states[:, index]
        V = lyapunov(states)[0]
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "x", "w", "u", "V"])
            for t, (x, w, u), v in zip(self.t, states, V):
                writer.writerow([repr(float(t)), repr(float(x)), repr(float(w)), repr(float(u)), repr(float(v))])
        return path


def rk4_step(s: np.ndarray, delta: int, h: float) -> np.ndarray:
    k1 = derivative(s, delta)
    k2 = derivative(s + 0.5 * h * k1, delta)
    k3 = derivative(s + 0.5 * h * k2, delta)
    k4 = derivative(s + h * k3, delta)
    return s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(start, delta: int = 1, step_h: float = 0.01, t_end: float = 100.0) -> Trajectory:
    """Fixed-step RK4 from ``start`` (shape ``(3,)`` or ``(batch, 3)``).

    Every step is recorded.  Leaving ``[-1e-6, 1 + 1e-6]^3`` is flagged on the
    result, never clipped.
    """
    _check_delta(delta)
    if step_h <= 0:
        raise ValueError("step_h must be positive")
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    s = np.array(start, dtype=np.float64)
    if s.shape[-1] != 3 or s.ndim not in (1, 2):
        raise ValueError("start must have shape (3,) or (batch, 3)")
    n = int(round(t_end / step_h))
    states = np.empty((n + 1,) + s.shape)
    states[0] = s
    for k in range(n):
        s = rk4_step(s, delta, step_h)
        states[k + 1] = s
    t = step_h * np.arange(n + 1)
    outside = ((states < -CUBE_EPS) | (states > 1 + CUBE_EPS)).any(axis=-1)  # (n+1, ...)
    left = outside.any(axis=0)
    first = np.argmax(outside, axis=0)
    exit_time = np.where(left, t[first], np.nan)
    if s.ndim == 1:
        left, exit_time = bool(left), float(exit_time)
    return Trajectory(t, states, delta, step_h, left, exit_time)

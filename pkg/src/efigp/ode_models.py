"""Benchmark ODE systems and a fixed-step RK4 integrator.

Three oscillators are shipped: FitzHugh-Nagumo in raw coordinates, and
Lotka-Volterra / Hes1 in log coordinates (both are strictly positive
systems, so inference runs on u = log(x) end to end).

Right-hand sides are written against a pluggable array module ``xp`` so the
same code evaluates on numpy arrays (integration, evaluation) and torch
tensors (the optimization loop). They are pure functions: no state, no RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "OdeSystem",
    "TimeGrid",
    "Trajectory",
    "RhsDomainError",
    "IntegrationDivergedError",
    "fn_system",
    "lv_system",
    "hes1_system",
    "get_system",
    "eval_rhs",
    "integrate_rk4",
]

# Relative spacing tolerance below which a grid counts as equally spaced.
# The Fourier constraint requires a regular grid, so this is enforced hard.
_SPACING_RTOL = 1e-12


class RhsDomainError(ValueError):
    """Right-hand side produced a non-finite value for some component."""

    def __init__(self, system: str, component: int):
        self.system = system
        self.component = component
        super().__init__(
            f"{system}: non-finite rhs output in component {component + 1}"
        )


class IntegrationDivergedError(RuntimeError):
    """State became non-finite during integration; carries the failing time."""

    def __init__(self, system: str, time: float):
        self.system = system
        self.time = float(time)
        super().__init__(f"{system}: integration diverged at t={time:.6g}")


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing, equally spaced time points."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("grid needs at least two points")
        steps = np.diff(pts)
        if np.any(steps <= 0):
            raise ValueError("grid must be strictly increasing")
        h = (pts[-1] - pts[0]) / (pts.size - 1)
        if np.max(np.abs(steps - h)) > _SPACING_RTOL * max(abs(h), 1.0):
            raise ValueError("grid must be equally spaced")

    @classmethod
    def regular(cls, start: float, end: float, n: int) -> "TimeGrid":
        # i/(n-1) before scaling keeps nested grids bitwise-exact subsets:
        # the same rational i/(n-1) rounds identically at every refinement.
        frac = np.arange(n, dtype=float) / (n - 1)
        return cls(start + (end - start) * frac)

    @property
    def start(self) -> float:
        return float(self.points[0])

    @property
    def end(self) -> float:
        return float(self.points[-1])

    @property
    def n(self) -> int:
        return self.points.size

    @property
    def spacing(self) -> float:
        return (self.points[-1] - self.points[0]) / (self.points.size - 1)


@dataclass(frozen=True)
class Trajectory:
    """States on a grid, one row per system component."""

    grid: TimeGrid
    values: np.ndarray  # (D, n)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 2 or vals.shape[1] != self.grid.n:
            raise ValueError("values must be (D, n) matching the grid")
        if not np.all(np.isfinite(vals)):
            raise ValueError("trajectory contains non-finite entries")

    def to_csv(self, path) -> None:
        d = self.values.shape[0]
        header = "t," + ",".join(f"x{i + 1}" for i in range(d))
        data = np.column_stack([self.grid.points, self.values.T])
        np.savetxt(path, data, delimiter=",", header=header, comments="",
                   fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(TimeGrid(data[:, 0]), data[:, 1:].T)


@dataclass(frozen=True)
class OdeSystem:
    """A named right-hand side f(x, theta, t) with analytic Jacobians.

    ``rhs``, ``jac_state`` and ``jac_params`` take state rows shaped (D,)
    or (D, n), a parameter vector of length P, the time(s), and an array
    module (numpy or torch). ``jac_state`` returns (D, D, ...) with
    [d, e] = df_d/dx_e, ``jac_params`` returns (D, P, ...).

    If ``log_space`` is set the dynamics are already expressed in
    u = log(x): rhs(u) = f(exp(u), theta, t) / exp(u) componentwise.
    """

    name: str
    dim: int
    param_count: int
    param_box: np.ndarray  # (P, 2) finite bounds, lo < hi
    rhs: Callable
    jac_state: Callable
    jac_params: Callable
    log_space: bool = False

    def __post_init__(self):
        box = np.asarray(self.param_box, dtype=float)
        object.__setattr__(self, "param_box", box)
        if box.shape != (self.param_count, 2):
            raise ValueError("param_box must be (P, 2)")
        if not np.all(np.isfinite(box)) or np.any(box[:, 0] >= box[:, 1]):
            raise ValueError("param_box bounds must be finite with lo < hi")


def eval_rhs(system: OdeSystem, state, params, time=0.0, xp=np):
    """Evaluate f(x, theta, t); raises RhsDomainError on non-finite output."""
    out = system.rhs(state, params, time, xp)
    finite = xp.isfinite(out)
    if not bool(finite.all()):
        bad = int(np.argmin(np.asarray(finite).reshape(system.dim, -1).all(axis=1)))
        raise RhsDomainError(system.name, bad)
    return out


# --- FitzHugh-Nagumo -------------------------------------------------------

def _fn_rhs(x, th, t, xp):
    a, b, c = th[0], th[1], th[2]
    v, r = x[0], x[1]
    return xp.stack([c * (v - v ** 3 / 3.0 + r), -(v - a + b * r) / c])


def _fn_jac_state(x, th, t, xp):
    b, c = th[1], th[2]
    v = x[0]
    one = xp.ones_like(v)
    return xp.stack([
        xp.stack([c * (1.0 - v ** 2), c * one]),
        xp.stack([-one / c, -(b / c) * one]),
    ])


def _fn_jac_params(x, th, t, xp):
    a, b, c = th[0], th[1], th[2]
    v, r = x[0], x[1]
    zero = xp.zeros_like(v)
    one = xp.ones_like(v)
    return xp.stack([
        xp.stack([zero, zero, v - v ** 3 / 3.0 + r]),
        xp.stack([one / c, -r / c, (v - a + b * r) / c ** 2]),
    ])


def fn_system() -> OdeSystem:
    """FitzHugh-Nagumo relaxation oscillator, raw coordinates, theta=(a,b,c)."""
    return OdeSystem(
        name="fn", dim=2, param_count=3,
        param_box=np.array([[0.0, 5.0]] * 3),
        rhs=_fn_rhs, jac_state=_fn_jac_state, jac_params=_fn_jac_params,
        log_space=False,
    )


# --- Lotka-Volterra in log coordinates -------------------------------------
#
# du1/dt = a - b*exp(u2),  du2/dt = c*exp(u1) - d

def _lv_rhs(u, th, t, xp):
    a, b, c, d = th[0], th[1], th[2], th[3]
    e1, e2 = xp.exp(u[0]), xp.exp(u[1])
    return xp.stack([a - b * e2, c * e1 - d])


def _lv_jac_state(u, th, t, xp):
    b, c = th[1], th[2]
    e1, e2 = xp.exp(u[0]), xp.exp(u[1])
    zero = xp.zeros_like(e1)
    return xp.stack([
        xp.stack([zero, -b * e2]),
        xp.stack([c * e1, zero]),
    ])


def _lv_jac_params(u, th, t, xp):
    e1, e2 = xp.exp(u[0]), xp.exp(u[1])
    zero = xp.zeros_like(e1)
    one = xp.ones_like(e1)
    return xp.stack([
        xp.stack([one, -e2, zero, zero]),
        xp.stack([zero, zero, e1, -one]),
    ])


def lv_system() -> OdeSystem:
    """Lotka-Volterra predator-prey model on u = log(x), theta=(a,b,c,d)."""
    return OdeSystem(
        name="lv", dim=2, param_count=4,
        param_box=np.array([[0.0, 10.0]] * 4),
        rhs=_lv_rhs, jac_state=_lv_jac_state, jac_params=_lv_jac_params,
        log_space=True,
    )


# --- Hes1 in log coordinates ------------------------------------------------
#
# With x = exp(u) and theta = (a, b, c, d, e, f, g):
#   du1/dt = -a*exp(u3) + b*exp(u2 - u1) - c
#   du2/dt = -d + e*exp(-u2) / (1 + exp(2*u1))
#   du3/dt = -a*exp(u1) + f*exp(-u3) / (1 + exp(2*u1)) - g

def _hes1_rhs(u, th, t, xp):
    a, b, c, d, e, f, g = (th[i] for i in range(7))
    e1, e3 = xp.exp(u[0]), xp.exp(u[2])
    e21 = xp.exp(u[1] - u[0])
    q = 1.0 + xp.exp(2.0 * u[0])
    return xp.stack([
        -a * e3 + b * e21 - c,
        -d + e * xp.exp(-u[1]) / q,
        -a * e1 + f * xp.exp(-u[2]) / q - g,
    ])


def _hes1_jac_state(u, th, t, xp):
    a, b, e, f = th[0], th[1], th[4], th[5]
    e1, e3 = xp.exp(u[0]), xp.exp(u[2])
    e21 = xp.exp(u[1] - u[0])
    s = xp.exp(2.0 * u[0])
    q = 1.0 + s
    dq = 2.0 * s / q ** 2  # d(1/q)/du1 = -2*exp(2u1)/q^2
    em2, em3 = xp.exp(-u[1]), xp.exp(-u[2])
    zero = xp.zeros_like(e1)
    return xp.stack([
        xp.stack([-b * e21, b * e21, -a * e3]),
        xp.stack([-e * em2 * dq, -e * em2 / q, zero]),
        xp.stack([-a * e1 - f * em3 * dq, zero, -f * em3 / q]),
    ])


def _hes1_jac_params(u, th, t, xp):
    e1, e3 = xp.exp(u[0]), xp.exp(u[2])
    e21 = xp.exp(u[1] - u[0])
    q = 1.0 + xp.exp(2.0 * u[0])
    em2, em3 = xp.exp(-u[1]), xp.exp(-u[2])
    zero = xp.zeros_like(e1)
    one = xp.ones_like(e1)
    return xp.stack([
        xp.stack([-e3, e21, -one, zero, zero, zero, zero]),
        xp.stack([zero, zero, zero, -one, em2 / q, zero, zero]),
        xp.stack([-e1, zero, zero, zero, zero, em3 / q, -one]),
    ])


def hes1_system() -> OdeSystem:
    """Hes1 transcription oscillator on u = log(x), theta=(a,b,c,d,e,f,g)."""
    box = np.array([[0.0, 1.0]] * 7)
    box[5] = [0.0, 50.0]
    return OdeSystem(
        name="hes1", dim=3, param_count=7,
        param_box=box,
        rhs=_hes1_rhs, jac_state=_hes1_jac_state, jac_params=_hes1_jac_params,
        log_space=True,
    )


_REGISTRY = {"fn": fn_system, "lv": lv_system, "hes1": hes1_system}


def get_system(name: str) -> OdeSystem:
    try:
        return _REGISTRY[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown system {name!r}; known: {sorted(_REGISTRY)}")


def integrate_rk4(system: OdeSystem, x0, params, grid: TimeGrid) -> Trajectory:
    """Classical fixed-step RK4 with step equal to the grid spacing."""
    x0 = np.asarray(x0, dtype=float)
    params = np.asarray(params, dtype=float)
    t = grid.points
    h = grid.spacing
    out = np.empty((system.dim, grid.n))
    out[:, 0] = x0
    x = x0
    for i in range(grid.n - 1):
        ti = t[i]
        k1 = system.rhs(x, params, ti, np)
        k2 = system.rhs(x + 0.5 * h * k1, params, ti + 0.5 * h, np)
        k3 = system.rhs(x + 0.5 * h * k2, params, ti + 0.5 * h, np)
        k4 = system.rhs(x + h * k3, params, ti + h, np)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(system.name, t[i + 1])
        out[:, i + 1] = x
    return Trajectory(grid, out)

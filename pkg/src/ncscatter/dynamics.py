"""Fixed-energy integration of x'' = grad V(x) and the large-radius monitors."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp, trapezoid
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq

from . import problem
from .errors import CollisionApproachError, PreconditionError, StepFailureError
from .problem import CalibratedConstants, ProblemSetup

CSV_HEADER = ["t", "x1", "x2", "x3", "v1", "v2", "v3", "energy_residual"]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


@dataclass(frozen=True)
class State:
    t: float
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "x", np.array(self.x, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.array(self.v, dtype=float).reshape(3))


@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    index: int


class DenseOutput:
    """Piecewise dense interpolant ``t -> (x, v)``.

    Each piece is ``(t_lo, t_hi, fn, shift, sign)`` where ``fn`` maps the
    local time ``sign * (t - shift)`` to a 6-state; ``sign = -1`` encodes a
    time-reversed leg (velocity flipped).
    """

    def __init__(self, pieces: Sequence[tuple[float, float, Callable, float, float]]):
        self.pieces = sorted(pieces, key=lambda p: p[0])
        self.t_min = self.pieces[0][0]
        self.t_max = self.pieces[-1][1]

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.empty((t.size, 3))
        v = np.empty((t.size, 3))
        done = np.zeros(t.size, dtype=bool)
        for lo, hi, fn, shift, sign in self.pieces:
            sel = (~done) & (t >= lo - 1e-12 * max(1.0, abs(lo))) & (t <= hi + 1e-12 * max(1.0, abs(hi)))
            if not sel.any():
                continue
            y = np.asarray(fn(sign * (t[sel] - shift))).reshape(6, -1)
            x[sel] = y[:3].T
            v[sel] = sign * y[3:].T
            done |= sel
        if not done.all():
            raise ValueError("dense output evaluated outside the trajectory span")
        return x, v

    def shifted(self, dt: float) -> "DenseOutput":
        return DenseOutput([(lo + dt, hi + dt, fn, shift + dt, sign) for lo, hi, fn, shift, sign in self.pieces])


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered samples of a solution, optionally with dense output.

    ``kind == "linear"`` marks a piecewise-linear trajectory (positions at the
    sample times, straight segments between them).
    """

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    setup: ProblemSetup | None = None
    tol: float = math.nan
    events: tuple = ()
    dense: DenseOutput | None = None
    kind: str = "dense"

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(-1)
        x = np.array(self.x, dtype=float).reshape(-1, 3)
        v = np.array(self.v, dtype=float).reshape(-1, 3)
        if not (t.size == x.shape[0] == v.shape[0]):
            raise ValueError("t, x, v lengths differ")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        for arr in (t, x, v):
            arr.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "events", tuple(self.events))

    @property
    def t_start(self) -> float:
        return float(self.t[0])

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def states(self) -> list[State]:
        return [State(t, x, v) for t, x, v in zip(self.t, self.x, self.v)]

    def evaluate(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Positions and velocities at arbitrary times inside the span."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.dense is not None:
            return self.dense(t)
        x = np.stack([np.interp(t, self.t, self.x[:, k]) for k in range(3)], axis=-1)
        v = np.stack([np.interp(t, self.t, self.v[:, k]) for k in range(3)], axis=-1)
        return x, v

    def refined_times(self, per_step: int = 8) -> np.ndarray:
        if self.dense is None or per_step <= 1:
            return self.t.copy()
        frac = np.arange(per_step) / per_step
        inner = (self.t[:-1, None] + np.diff(self.t)[:, None] * frac[None, :]).ravel()
        return np.append(inner, self.t[-1])

    def energy_residual(self, setup: ProblemSetup | None = None) -> np.ndarray:
        setup = setup or self.setup
        return 0.5 * (self.v**2).sum(axis=1) - problem.potential(setup, self.x) - setup.energy_H

    def shifted(self, dt: float) -> "Trajectory":
        return Trajectory(
            self.t + dt,
            self.x,
            self.v,
            self.setup,
            self.tol,
            tuple(Event(e.t + dt, e.kind, e.index) for e in self.events),
            None if self.dense is None else self.dense.shifted(dt),
            self.kind,
        )


def reverse_time(traj: Trajectory) -> Trajectory:
    """The solution t -> x(-t) (velocities flipped)."""
    dense = None
    if traj.dense is not None:
        dense = DenseOutput(
            [(-hi, -lo, fn, -shift, -sign) for lo, hi, fn, shift, sign in traj.dense.pieces]
        )
    return Trajectory(
        -traj.t[::-1],
        traj.x[::-1],
        -traj.v[::-1],
        traj.setup,
        traj.tol,
        tuple(Event(-e.t, e.kind, e.index) for e in reversed(traj.events)),
        dense,
        traj.kind,
    )


def concatenate(first: Trajectory, second: Trajectory) -> Trajectory:
    """Join two legs sharing the junction time (the duplicate sample is dropped)."""
    if abs(first.t_end - second.t_start) > 1e-9 * max(1.0, abs(first.t_end)):
        raise ValueError("legs do not meet in time")
    dense = None
    if first.dense is not None and second.dense is not None:
        dense = DenseOutput(list(first.dense.pieces) + list(second.dense.pieces))
    return Trajectory(
        np.concatenate([first.t, second.t[1:]]),
        np.concatenate([first.x, second.x[1:]]),
        np.concatenate([first.v, second.v[1:]]),
        first.setup,
        max(first.tol, second.tol),
        first.events + second.events,
        dense,
        first.kind,
    )


def state_on_shell(setup: ProblemSetup, x, direction, t: float = 0.0) -> State:
    """State at ``x`` whose speed satisfies 1/2|v|^2 = V(x) + H."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    speed = math.sqrt(2.0 * (problem.potential(setup, x) + setup.energy_H))
    return State(t, x, speed * d)


def _rhs(setup: ProblemSetup):
    def f(_t, y):
        return np.concatenate([y[3:], problem.gradient(setup, y[:3])])

    return f


def integrate(
    setup: ProblemSetup,
    initial: State,
    t_span: tuple[float, float],
    tol: float = 1e-8,
    consts: CalibratedConstants | None = None,
    handoff_radius: float | None = None,
    rtol: float = 1e-12,
) -> Trajectory:
    """Adaptive DOP853 integration at fixed energy.

    The energy residual is monitored at every accepted step and must stay
    below ``tol``; the integration is retried with a tighter tolerance before
    giving up.  With calibrated constants, crossings of the delta*-spheres
    and of the K-sphere are logged, and the trajectory is stopped when it
    enters the handoff ball of radius delta*/4 around a centre.
    """
    e0 = 0.5 * initial.v @ initial.v - problem.potential(setup, initial.x) - setup.energy_H
    if abs(e0) > tol:
        raise PreconditionError(f"initial energy residual {e0:.3e} exceeds tol {tol:.1e}")
    t0, t1 = map(float, t_span)
    if t1 == t0:
        raise PreconditionError("empty time span")
    if handoff_radius is None:
        handoff_radius = consts.delta_star / 4 if consts is not None else 0.0
    events = []
    labels = []
    if consts is not None:
        for i, c in enumerate(setup.centres):
            events.append(lambda _t, y, c=c: np.linalg.norm(y[:3] - c) - consts.delta_star)
            labels.append(("delta_ball", i))
        events.append(lambda _t, y: np.linalg.norm(y[:3]) - consts.K_radius)
        labels.append(("K_sphere", -1))
    if handoff_radius > 0:
        def handoff(_t, y):
            return np.min(np.linalg.norm(y[:3] - setup.centres, axis=1)) - handoff_radius

        handoff.terminal = True
        handoff.direction = -1
        events.append(handoff)
        labels.append(("handoff", -1))

    y0 = np.concatenate([initial.x, initial.v])
    current = rtol
    while True:
        sol = solve_ivp(
            _rhs(setup),
            (t0, t1),
            y0,
            method="DOP853",
            rtol=current,
            atol=current * 1e-1,
            dense_output=True,
            events=events or None,
        )
        if sol.status == -1:
            raise StepFailureError(f"integrator failed: {sol.message}")
        res = 0.5 * (sol.y[3:] ** 2).sum(axis=0) - problem.potential(setup, sol.y[:3].T) - setup.energy_H
        if np.max(np.abs(res)) <= tol:
            break
        if current <= 1e-14:
            raise StepFailureError(
                f"energy residual {np.max(np.abs(res)):.3e} exceeds tol {tol:.1e} at rtol {current:.0e}"
            )
        current = max(current / 10, 1e-14)

    log = []
    hit = None
    if events:
        for (kind, idx), times, states in zip(labels, sol.t_events, sol.y_events):
            for te, ye in zip(times, states):
                x, v = ye[:3], ye[3:]
                sgn = np.sign(t1 - t0)
                if kind == "delta_ball":
                    rate = (x - setup.centres[idx]) @ v * sgn
                    log.append(Event(float(te), "delta_ball_" + ("enter" if rate < 0 else "exit"), idx))
                elif kind == "K_sphere":
                    rate = x @ v * sgn
                    log.append(Event(float(te), "K_sphere_" + ("in" if rate < 0 else "out"), -1))
                else:
                    k = int(np.argmin(np.linalg.norm(x - setup.centres, axis=1)))
                    hit = (float(te), k)
    log.sort(key=lambda e: e.t)
    sign = 1.0 if t1 > t0 else -1.0
    lo, hi = (t0, sol.t[-1]) if sign > 0 else (sol.t[-1], t0)
    dense = DenseOutput([(lo, hi, sol.sol, 0.0, 1.0)])
    if sign > 0:
        traj = Trajectory(sol.t, sol.y[:3].T, sol.y[3:].T, setup, tol, log, dense)
    else:
        traj = Trajectory(sol.t[::-1], sol.y[:3, ::-1].T, sol.y[3:, ::-1].T, setup, tol, log, dense)
    if hit is not None:
        raise CollisionApproachError(
            f"trajectory entered the handoff ball of centre {hit[1]} at t={hit[0]:.6g}",
            centre_index=hit[1],
            partial=traj,
        )
    return traj


# ------------------------------------------------------------- polar profile


@dataclass(frozen=True)
class RadialProfile:
    t: np.ndarray
    r: np.ndarray
    s: np.ndarray
    I: np.ndarray
    A: np.ndarray
    rdot: np.ndarray
    sdot: np.ndarray
    polar_energy_residual: np.ndarray


def polar_profile(traj: Trajectory, per_step: int = 1) -> RadialProfile:
    t = traj.refined_times(per_step)
    x, v = traj.evaluate(t)
    r = np.linalg.norm(x, axis=1)
    if np.any(r <= 0):
        raise PreconditionError("trajectory passes through the origin")
    s = x / r[:, None]
    rdot = (s * v).sum(axis=1)
    sdot = (v - rdot[:, None] * s) / r[:, None]
    A = np.cross(x, v)
    setup = traj.setup
    pe = rdot**2 + r**2 * (sdot**2).sum(axis=1) - 2 * (problem.potential(setup, x) + setup.energy_H)
    return RadialProfile(t, r, s, 0.5 * r**2, A, rdot, sdot, pe)


# ------------------------------------------------------------------ monitors


@dataclass
class MonitorReport:
    n_checked: int
    lj_min_margin: float
    dA_max_excess: float
    energy_max_residual: float
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "n_checked": self.n_checked,
            "lj_min_margin": self.lj_min_margin,
            "dA_max_excess": self.dA_max_excess,
            "energy_max_residual": self.energy_max_residual,
            "violations": self.violations,
            "passed": self.passed,
        }


def virial_monitor(
    traj: Trajectory,
    consts: CalibratedConstants,
    slack: float = 1e-8,
    per_step: int = 4,
    energy_tol: float | None = None,
) -> MonitorReport:
    """Lagrange-Jacobi convexity and angular-momentum drift outside B_K.

    I'' is evaluated as |v|^2 + x . grad V(x) and |A'| as |x ^ grad V(x)|.
    """
    setup = traj.setup
    a, H = setup.alpha, setup.energy_H
    t = traj.refined_times(per_step)
    x, v = traj.evaluate(t)
    r = np.linalg.norm(x, axis=1)
    outside = r >= consts.K_radius
    violations = []
    if not outside.any():
        return MonitorReport(0, math.inf, -math.inf, 0.0, [])
    t, x, v, r = t[outside], x[outside], v[outside], r[outside]
    g = problem.gradient(setup, x)
    lj = (v**2).sum(axis=1) + (x * g).sum(axis=1) - 2 * H
    dA = np.linalg.norm(np.cross(x, g), axis=1) * r ** (a + 2) - consts.C_plus
    er = np.abs(0.5 * (v**2).sum(axis=1) - problem.potential(setup, x) - H)
    for k in np.flatnonzero(lj < -slack):
        violations.append({"t": float(t[k]), "kind": "lagrange_jacobi", "value": float(lj[k])})
    for k in np.flatnonzero(dA > slack):
        violations.append({"t": float(t[k]), "kind": "angular_momentum", "value": float(dA[k])})
    if energy_tol is None:
        energy_tol = traj.tol if np.isfinite(traj.tol) else None
    if energy_tol is not None:
        for k in np.flatnonzero(er > energy_tol):
            violations.append({"t": float(t[k]), "kind": "energy", "value": float(er[k])})
    return MonitorReport(int(outside.sum()), float(lj.min()), float(dA.max()), float(er.max()), violations)


@dataclass(frozen=True)
class RadialStructure:
    classification: str
    t_star: float | None = None
    t_minus: float | None = None
    t_plus: float | None = None


def _radius_fn(traj: Trajectory):
    def r_of(t):
        x, _ = traj.evaluate(t)
        return float(np.linalg.norm(x[0]))

    def rdot_of(t):
        x, v = traj.evaluate(t)
        return float(x[0] @ v[0] / np.linalg.norm(x[0]))

    return r_of, rdot_of


def _roots(fn, grid, values, xtol):
    out = []
    for k in range(len(grid) - 1):
        f0, f1 = values[k], values[k + 1]
        if f0 == 0.0:
            out.append(float(grid[k]))
        elif f0 * f1 < 0:
            out.append(brentq(fn, grid[k], grid[k + 1], xtol=xtol, rtol=1e-15))
    if values[-1] == 0.0:
        out.append(float(grid[-1]))
    return sorted(set(out))


def radial_structure(traj: Trajectory, K: float, xtol: float = 1e-12, per_step: int = 16) -> RadialStructure:
    """Classify r(t) relative to the sphere of radius K.

    Outside B_K the radius is either monotone or has a single minimum; a
    trajectory entering B_K crosses the sphere exactly twice.
    """
    t = traj.refined_times(per_step)
    x, v = traj.evaluate(t)
    r = np.linalg.norm(x, axis=1)
    rdot = (x * v).sum(axis=1) / r
    r_of, rdot_of = _radius_fn(traj)
    if r.min() >= K:
        if np.all(rdot >= 0):
            return RadialStructure("monotone increasing")
        if np.all(rdot <= 0):
            return RadialStructure("monotone decreasing")
        turns = _roots(rdot_of, t, rdot, xtol)
        if len(turns) != 1:
            raise PreconditionError(f"radius has {len(turns)} turning points outside B_K")
        return RadialStructure("single minimum", t_star=turns[0])
    crossings = _roots(lambda s: r_of(s) - K, t, r - K, xtol)
    if len(crossings) == 2:
        return RadialStructure("crossing pair", t_minus=crossings[0], t_plus=crossings[1])
    if len(crossings) == 1:
        if r[0] < K:
            return RadialStructure("exits", t_plus=crossings[0])
        return RadialStructure("enters", t_minus=crossings[0])
    if not crossings:
        return RadialStructure("inside")
    raise PreconditionError(f"trajectory crosses the K-sphere {len(crossings)} times")


def _check_monotone_outside(traj, consts, t1, t2, per_step=8, increasing=None):
    t = traj.refined_times(per_step)
    t = np.concatenate([[t1], t[(t > t1) & (t < t2)], [t2]])
    x, v = traj.evaluate(t)
    r = np.linalg.norm(x, axis=1)
    rdot = (x * v).sum(axis=1) / r
    tol = 1e-9 * max(1.0, r.max())
    if r.min() < consts.K_radius - tol:
        raise PreconditionError("segment enters B_K")
    inc = np.all(rdot[1:] > -tol)
    dec = np.all(rdot[:-1] < tol)
    if increasing is True and not inc:
        raise PreconditionError("radius is not increasing on the segment")
    if increasing is None and not (inc or dec):
        raise PreconditionError("radius is not monotone on the segment")
    return r, inc


@dataclass(frozen=True)
class TimeBoundsReport:
    duration: float
    lower: float
    upper: float
    slack_lower: float
    slack_upper: float
    passed: bool


def time_bounds_check(
    traj: Trajectory,
    consts: CalibratedConstants,
    t1: float | None = None,
    t2: float | None = None,
    slack: float = 1e-8,
) -> TimeBoundsReport:
    """Two-sided bound on the duration of a monotone escape segment."""
    setup = traj.setup
    t1 = traj.t_start if t1 is None else float(t1)
    t2 = traj.t_end if t2 is None else float(t2)
    H = setup.energy_H
    if t2 == t1:
        x, _ = traj.evaluate([t1])
        r1 = float(np.linalg.norm(x[0]))
        upper = r1 / math.sqrt(2 * H)
        return TimeBoundsReport(0.0, 0.0, upper, 0.0, upper, True)
    r, _ = _check_monotone_outside(traj, consts, t1, t2)
    r1, r2 = r[0], r[-1]
    vmax = math.sqrt(2 * (H + consts.C_plus / consts.K_radius**setup.alpha))
    lower = abs(r2 - r1) / vmax
    upper = max(r1, r2) / math.sqrt(2 * H)
    dur = t2 - t1
    sl, su = dur - lower, upper - dur
    return TimeBoundsReport(dur, lower, upper, sl, su, bool(sl >= -slack and su >= -slack))


def tail_constants(setup: ProblemSetup, consts: CalibratedConstants) -> tuple[float, float]:
    H = setup.energy_H
    c1 = math.pi * consts.C_plus / (2 * math.sqrt(2 * H))
    c2 = math.sqrt(2 * (H + consts.C_plus / consts.K_radius**setup.alpha))
    return c1, c2


def angular_speed_integral(traj: Trajectory, t_a: float, t_b: float) -> float:
    """Quadrature of |s'| = |x ^ v| / |x|^2 over [t_a, t_b]."""
    knots = np.concatenate([[t_a], traj.t[(traj.t > t_a) & (traj.t < t_b)], [t_b]])
    if traj.dense is None:
        x, v = traj.evaluate(knots)
        f = np.linalg.norm(np.cross(x, v), axis=1) / (x**2).sum(axis=1)
        return float(trapezoid(f, knots))
    lo, hi = knots[:-1], knots[1:]
    half = 0.5 * (hi - lo)
    tq = (0.5 * (hi + lo))[:, None] + half[:, None] * _GL_NODES[None, :]
    x, v = traj.evaluate(tq.ravel())
    f = (np.linalg.norm(np.cross(x, v), axis=1) / (x**2).sum(axis=1)).reshape(tq.shape)
    return float((f @ _GL_WEIGHTS * half).sum())


@dataclass(frozen=True)
class TailBound:
    bound: float
    measured: float
    C1: float
    C2: float
    passed: bool


def tail_direction_bound(
    traj: Trajectory,
    t1: float,
    tau: float,
    t2: float,
    consts: CalibratedConstants,
    slack: float = 1e-8,
) -> TailBound:
    """Compare the measured angular travel on [tau, t2] with its a-priori bound.

    Requires r increasing and r >= K on [t1, t2]; for an incoming leg apply it
    to ``reverse_time(traj)``.
    """
    if not t1 < tau <= t2:
        raise PreconditionError("need t1 < tau <= t2")
    setup = traj.setup
    r, _ = _check_monotone_outside(traj, consts, t1, t2, increasing=True)
    c1, c2 = tail_constants(setup, consts)
    bound = (c1 + c2 * r[0]) / (2 * setup.energy_H * (tau - t1))
    measured = angular_speed_integral(traj, tau, t2)
    return TailBound(bound, measured, c1, c2, bool(measured <= bound + slack))


def _legs(traj: Trajectory, K: float) -> tuple[tuple[float, float] | None, tuple[float, float] | None]:
    """(incoming, outgoing) time intervals on which r >= K is monotone."""
    rs = radial_structure(traj, K)
    c = rs.classification
    t0, t1 = traj.t_start, traj.t_end
    inc = out = None
    if c == "crossing pair":
        inc, out = (t0, rs.t_minus), (rs.t_plus, t1)
    elif c == "single minimum":
        inc, out = (t0, rs.t_star), (rs.t_star, t1)
    elif c == "monotone increasing":
        out = (t0, t1)
    elif c == "monotone decreasing":
        inc = (t0, t1)
    elif c == "exits":
        out = (rs.t_plus, t1)
    elif c == "enters":
        inc = (t0, rs.t_minus)
    return (inc if inc and inc[1] > inc[0] else None), (out if out and out[1] > out[0] else None)


def monitor_suite(traj: Trajectory, consts: CalibratedConstants, slack: float = 1e-8) -> dict:
    """All large-radius checks on one trajectory.

    Lagrange-Jacobi and angular-momentum drift at every sample outside B_K,
    two-sided duration bounds on each monotone leg outside B_K, and the
    angular tail bound on each leg from its midpoint on.
    """
    mon = virial_monitor(traj, consts, slack=slack)
    inc, out = _legs(traj, consts.K_radius)
    times, tails = [], []
    for leg, rev in ((inc, True), (out, False)):
        if leg is None:
            continue
        times.append(time_bounds_check(traj, consts, leg[0], leg[1], slack))
        if rev:
            back = reverse_time(traj)
            a, b = -leg[1], -leg[0]
            tails.append(tail_direction_bound(back, a, 0.5 * (a + b), b, consts, slack))
        else:
            tails.append(tail_direction_bound(traj, leg[0], 0.5 * (leg[0] + leg[1]), leg[1], consts, slack))
    passed = mon.passed and all(r.passed for r in times) and all(r.passed for r in tails)
    return {
        "virial": mon.to_dict(),
        "time_bounds": [r.__dict__ for r in times],
        "tail_bounds": [r.__dict__ for r in tails],
        "passed": bool(passed),
    }


def random_escape_states(
    setup: ProblemSetup,
    consts: CalibratedConstants,
    rng: np.random.Generator,
    count: int,
    radius_range: tuple[float, float] = (1.5, 4.0),
    kinds: Sequence[str] = ("outgoing", "flyby"),
) -> list[State]:
    """Seeded initial states for escape tests, alternating between kinds.

    ``outgoing``: on a sphere of radius in ``radius_range`` (units of K) with
    a velocity pointing outwards (radial cosine >= 0.2).  ``flyby``: at
    radius 6K heading inwards with impact parameter up to 2K, so that the
    trajectory comes in and escapes again.
    """
    K = consts.K_radius
    out = []
    for k in range(count):
        kind = kinds[k % len(kinds)]
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if kind == "outgoing":
            r = K * rng.uniform(*radius_range)
            while True:
                u = rng.normal(size=3)
                u /= np.linalg.norm(u)
                if u @ d >= 0.2:
                    break
            out.append(state_on_shell(setup, r * d, u))
        elif kind == "flyby":
            p = rng.normal(size=3)
            p -= (p @ d) * d
            p *= K * rng.uniform(0.0, 2.0) / np.linalg.norm(p)
            out.append(state_on_shell(setup, 6 * K * d + p, -d))
        else:
            raise PreconditionError(f"unknown state kind {kind!r}")
    return out


# ------------------------------------------------------------------ CSV I/O


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectory_csv(traj: Trajectory, path: str | Path, setup: ProblemSetup | None = None) -> None:
    setup = setup or traj.setup
    res = traj.energy_residual(setup)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for k in range(traj.t.size):
            w.writerow([_fmt(traj.t[k]), *map(_fmt, traj.x[k]), *map(_fmt, traj.v[k]), _fmt(res[k])])


def hermite_dense(setup: ProblemSetup, t, x, v) -> DenseOutput:
    """C^1 interpolant from samples; velocities use the equation of motion for slopes."""
    t = np.asarray(t, dtype=float)
    px = CubicHermiteSpline(t, x, v, axis=0)
    pv = CubicHermiteSpline(t, v, problem.gradient(setup, x), axis=0)

    def fn(s):
        return np.concatenate([px(s).T, pv(s).T]).reshape(6, -1)

    return DenseOutput([(float(t[0]), float(t[-1]), fn, 0.0, 1.0)])


def read_trajectory_csv(path: str | Path, setup: ProblemSetup | None = None, tol: float = math.nan) -> Trajectory:
    """Load a trajectory; with a setup a Hermite dense output is attached."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
    data = np.array([[float(c) for c in row] for row in rows[1:]], dtype=float)
    t, x, v = data[:, 0], data[:, 1:4], data[:, 4:7]
    dense = hermite_dense(setup, t, x, v) if setup is not None and t.size > 1 else None
    return Trajectory(t, x, v, setup, tol, (), dense)

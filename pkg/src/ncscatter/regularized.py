"""Sundman-regularized Kepler flow near a single centre, collision asymptotics
and the penalized blow-up problem."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from . import problem
from .dynamics import Trajectory
from .errors import ConvergenceError, PreconditionError, StepFailureError
from .problem import ProblemSetup

REG_CSV_HEADER = ["s", "t", "u1", "u2", "u3", "v1", "v2", "v3", "w1", "w2", "w3"]


def _zero_value(q):
    return 0.0


def _zero_grad(q):
    return np.zeros(3)


@dataclass(frozen=True)
class KeplerEnv:
    """Kepler centre of strength ``mu`` at the origin plus a smooth potential U."""

    mu: float = 1.0
    U: Callable = _zero_value
    gradU: Callable = _zero_grad
    h: float = 0.0

    def __post_init__(self):
        if not self.mu > 0:
            raise PreconditionError("mu must be positive")
        u0, g0 = self.U(np.zeros(3)), np.asarray(self.gradU(np.zeros(3)), dtype=float)
        if not (np.isfinite(u0) and np.all(np.isfinite(g0))):
            raise PreconditionError("U and grad U must be finite at the origin")


def quadratic_env(mu: float = 1.0, k: float = 0.5, h: float = 0.5, centre=(0.3, -0.2, 0.1)) -> KeplerEnv:
    """Kepler centre perturbed by U(q) = k/2 |q - c|^2 (smooth test environment)."""
    c = np.asarray(centre, dtype=float)

    def U(q):
        d = np.asarray(q) - c
        return 0.5 * k * float(d @ d)

    def gradU(q):
        return k * (np.asarray(q, dtype=float) - c)

    return KeplerEnv(mu, U, gradU, h)


@dataclass(frozen=True)
class RegState:
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    s: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        for name in ("u", "v", "w"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float).reshape(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.u, self.v, self.w, [self.t]])


def sperling_coefficient(mu: float) -> float:
    return (4.5 * mu) ** (1.0 / 3.0)


def literal_collision_w(mu: float) -> float:
    """Alternative datum -mu + 4/9 (9 mu / 2)^(2/3); off the zero-energy shell."""
    return -mu + 4.0 / 9.0 * (4.5 * mu) ** (2.0 / 3.0)


def collision_w(mu: float) -> float:
    """w at a zero-energy collision: -mu xi + |q||qdot|^2 xi -> mu xi."""
    return mu


def collision_state(env: KeplerEnv, xi, literal: bool = False) -> RegState:
    xi = np.asarray(xi, dtype=float)
    xi = xi / np.linalg.norm(xi)
    w = literal_collision_w(env.mu) if literal else collision_w(env.mu)
    return RegState(np.zeros(3), np.zeros(3), w * xi)


def sundman_field(env: KeplerEnv, z) -> np.ndarray:
    """d/ds of (u, v, w, t); regular at u = 0."""
    z = z.as_vector() if isinstance(z, RegState) else np.asarray(z, dtype=float)
    u, v, w = z[0:3], z[3:6], z[6:9]
    g = np.asarray(env.gradU(u), dtype=float)
    ru = math.sqrt(u @ u)
    f1 = v
    f2 = w + ru * ru * g
    f3 = (u @ v) * g + (2 * env.h + 2 * env.U(u) + u @ g) * v
    return np.concatenate([f1, f2, f3, [ru]])


def to_regularized(env: KeplerEnv, q, qdot, s: float = 0.0, t: float = 0.0) -> RegState:
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    r = np.linalg.norm(q)
    if r == 0:
        raise PreconditionError("to_regularized needs q != 0")
    return RegState(q, r * qdot, -env.mu * q / r + (q @ qdot) * qdot, s, t)


def from_regularized(z: RegState) -> tuple[np.ndarray, np.ndarray | None]:
    """(q, qdot); qdot is None at the collision where it diverges."""
    r = np.linalg.norm(z.u)
    if r == 0:
        return z.u.copy(), None
    return z.u.copy(), z.v / r


@dataclass(frozen=True)
class RegTrajectory:
    s: np.ndarray
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    env: KeplerEnv
    dense: Callable | None = None

    def at(self, s) -> np.ndarray:
        """State vectors (k, 10) at Sundman times ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return np.asarray(self.dense(s)).T.reshape(s.size, 10)

    def s_at_time(self, t: float) -> float:
        """Invert the (strictly increasing) physical clock."""
        f = lambda s: self.at([s])[0, 9] - t
        return brentq(f, self.s[0], self.s[-1], xtol=1e-16, rtol=1e-15)

    def physical(self, s=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(t, q, qdot) at Sundman samples with u != 0."""
        if s is None:
            t, u, v = self.t, self.u, self.v
        else:
            z = self.at(s)
            t, u, v = z[:, 9], z[:, 0:3], z[:, 3:6]
        r = np.linalg.norm(u, axis=1)
        keep = r > 0
        return t[keep], u[keep], v[keep] / r[keep, None]


def _kep_defects(env: KeplerEnv, z: np.ndarray, r_min: float):
    u, v, w = z[:, 0:3], z[:, 3:6], z[:, 6:9]
    r = np.linalg.norm(u, axis=1)
    keep = r > r_min
    u, v, w, r = u[keep], v[keep], w[keep], r[keep]
    qd = v / r[:, None]
    Uq = np.array([env.U(x) for x in u])
    energy = 0.5 * (qd**2).sum(axis=1) - env.mu / r - Uq - env.h
    # q'' reconstructed from the regularized field versus the Kepler force
    g = np.array([env.gradU(x) for x in u])
    f2 = w + (r**2)[:, None] * g
    qdd = (f2 - v * ((u * v).sum(axis=1) / r**2)[:, None]) / (r**2)[:, None]
    kep = qdd + env.mu * u / (r**3)[:, None] - g
    return energy, np.linalg.norm(kep, axis=1)


def integrate_through_collision(
    env: KeplerEnv,
    z0: RegState,
    s_span: tuple[float, float],
    tol: float = 1e-10,
    rtol: float = 1e-13,
    r_min: float = 1e-3,
    check: bool = True,
) -> RegTrajectory:
    """Integrate the regularized flow over ``s_span`` (which may straddle z0.s).

    Reconstructed energy and Kepler-equation residuals are checked on samples
    with |u| > ``r_min``.
    """
    y0 = z0.as_vector()
    if not np.all(np.isfinite(y0)):
        raise PreconditionError("non-finite initial state")
    s_lo, s_hi = sorted(map(float, s_span))
    f = lambda _s, y: sundman_field(env, y)
    legs = []
    for end in (s_lo, s_hi):
        if end == z0.s:
            continue
        sol = solve_ivp(f, (z0.s, end), y0, method="DOP853", rtol=rtol, atol=rtol * 1e-2, dense_output=True)
        if sol.status != 0:
            raise StepFailureError(f"regularized integration failed: {sol.message}")
        legs.append(sol)
    if not legs:
        raise PreconditionError("empty Sundman span")
    s_parts, y_parts, pieces = [], [], []
    for sol in legs:
        order = np.argsort(sol.t)
        s_parts.append(sol.t[order])
        y_parts.append(sol.y[:, order])
        pieces.append((min(sol.t[0], sol.t[-1]), max(sol.t[0], sol.t[-1]), sol.sol))
    s_all = np.concatenate(s_parts)
    y_all = np.concatenate(y_parts, axis=1)
    s_all, idx = np.unique(s_all, return_index=True)
    y_all = y_all[:, idx]

    def dense(s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.empty((10, s.size))
        for lo, hi, fn in pieces:
            sel = (s >= lo - 1e-14) & (s <= hi + 1e-14)
            if sel.any():
                out[:, sel] = fn(s[sel])
        return out

    traj = RegTrajectory(s_all, y_all[9], y_all[0:3].T, y_all[3:6].T, y_all[6:9].T, env, dense)
    if np.any(np.diff(traj.t) <= 0):
        raise StepFailureError("physical time is not strictly increasing")
    if check:
        energy, kep = _kep_defects(env, y_all.T, r_min)
        if energy.size and np.max(np.abs(energy)) > tol:
            raise StepFailureError(f"reconstructed energy residual {np.max(np.abs(energy)):.3e} exceeds {tol:.1e}")
    return traj


def reconstruction_residuals(traj: RegTrajectory, r_min: float = 1e-3) -> dict:
    z = np.column_stack([traj.u, traj.v, traj.w, traj.t])
    energy, kep = _kep_defects(traj.env, z, r_min)
    return {
        "energy": float(np.max(np.abs(energy))) if energy.size else 0.0,
        "kepler": float(np.max(kep)) if kep.size else 0.0,
        "n_checked": int(energy.size),
    }


def parity_defect(traj: RegTrajectory, s_max: float = 1.0, n: int = 201) -> dict:
    """max |u(s) - u(-s)| and |v(s) + v(-s)| over 0 < s <= s_max."""
    s = np.linspace(0, s_max, n)[1:]
    zp, zm = traj.at(s), traj.at(-s)
    return {
        "u": float(np.max(np.linalg.norm(zp[:, 0:3] - zm[:, 0:3], axis=1))),
        "v": float(np.max(np.linalg.norm(zp[:, 3:6] + zm[:, 3:6], axis=1))),
    }


def write_regularized_csv(traj: RegTrajectory, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(REG_CSV_HEADER)
        for k in range(traj.s.size):
            row = [traj.s[k], traj.t[k], *traj.u[k], *traj.v[k], *traj.w[k]]
            wr.writerow([format(float(c), ".17g") for c in row])


# ---------------------------------------------------------- Sperling asymptotics


@dataclass(frozen=True)
class SperlingFit:
    xi: np.ndarray
    xi_minus: np.ndarray
    xi_plus: np.ndarray
    residual_position: float
    residual_velocity: float


def sperling_fit(t, q, qdot, t0: float, mu: float, window: float) -> SperlingFit:
    """Least-squares collision direction from samples with |t - t0| <= window.

    The model is q ~ c |t-t0|^{2/3} xi, qdot ~ sign(t-t0) (2/3) c |t-t0|^{-1/3} xi
    with c = (9 mu / 2)^{1/3}; the reported residuals are the maximal
    deviations from the model inside the window.
    """
    t = np.asarray(t, dtype=float)
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    qdot = np.asarray(qdot, dtype=float).reshape(-1, 3)
    tau = t - t0
    sel = (np.abs(tau) <= window) & (tau != 0)
    if sel.sum() < 2:
        raise PreconditionError("too few samples inside the window")
    tau, q, qdot = tau[sel], q[sel], qdot[sel]
    c = sperling_coefficient(mu)
    profile = c * np.abs(tau) ** (2 / 3)
    ratio = np.linalg.norm(q, axis=1) / profile
    if np.any(np.abs(ratio - 1) > 0.5):
        raise PreconditionError("samples do not follow a collision profile at t0")

    def direction(mask):
        if not mask.any():
            return None
        d = (profile[mask, None] * q[mask]).sum(axis=0)
        return d / np.linalg.norm(d)

    xi_m, xi_p = direction(tau < 0), direction(tau > 0)
    xi = direction(np.ones_like(tau, dtype=bool))
    model_q = profile[:, None] * xi
    model_v = (np.sign(tau) * (2 / 3) * c * np.abs(tau) ** (-1 / 3))[:, None] * xi
    return SperlingFit(
        xi,
        xi if xi_m is None else xi_m,
        xi if xi_p is None else xi_p,
        float(np.max(np.linalg.norm(q - model_q, axis=1))),
        float(np.max(np.linalg.norm(qdot - model_v, axis=1))),
    )


def remainder_exponent(traj: RegTrajectory, windows=(1e-2, 5e-3, 2.5e-3, 1.25e-3), n: int = 64) -> dict:
    """Fit the log-log slope of the position and velocity remainders."""
    t0 = float(traj.at([0.0])[0, 9])
    pos, vel = [], []
    xi = None
    for wdw in windows:
        tt = t0 + np.concatenate([-np.geomspace(wdw, wdw / 4, n), np.geomspace(wdw / 4, wdw, n)])
        s = np.array([traj.s_at_time(x) for x in tt])
        z = traj.at(s)
        r = np.linalg.norm(z[:, 0:3], axis=1)
        fit = sperling_fit(z[:, 9], z[:, 0:3], z[:, 3:6] / r[:, None], t0, traj.env.mu, wdw)
        pos.append(fit.residual_position)
        vel.append(fit.residual_velocity)
        xi = fit.xi
    lw = np.log(windows)
    return {
        "xi": xi,
        "position_exponent": float(np.polyfit(lw, np.log(pos), 1)[0]),
        "velocity_exponent": float(np.polyfit(lw, np.log(vel), 1)[0]),
        "position_residuals": [float(p) for p in pos],
        "velocity_residuals": [float(v) for v in vel],
    }


def reflection_check(t, q, t0: float, window: float, mu: float | None = None, n: int = 200) -> float:
    """max |q(t0 + tau) - q(t0 - tau)| for tau in (0, window], by interpolation.

    With ``mu`` given, the samples are first checked to describe a collision
    at ``t0`` whose incoming and outgoing directions coincide.
    """
    t = np.asarray(t, dtype=float)
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if mu is not None:
        fit = sperling_fit(t, q, np.gradient(q, t, axis=0), t0, mu, window)
        if np.linalg.norm(fit.xi_minus - fit.xi_plus) > 1e-3:
            raise PreconditionError("incoming and outgoing collision directions differ")
    if t.min() > t0 - window or t.max() < t0 + window:
        raise PreconditionError("samples do not cover the reflection window")
    tau = np.linspace(0, window, n + 1)[1:]
    qp = np.stack([np.interp(t0 + tau, t, q[:, k]) for k in range(3)], axis=-1)
    qm = np.stack([np.interp(t0 - tau, t, q[:, k]) for k in range(3)], axis=-1)
    return float(np.max(np.linalg.norm(qp - qm, axis=1)))


def reflection_check_regularized(traj: RegTrajectory, window: float, n: int = 100) -> float:
    """Same defect measured on a regularized trajectory via its dense output."""
    t0 = float(traj.at([0.0])[0, 9])
    tau = np.linspace(0, window, n + 1)[1:]
    sp = np.array([traj.s_at_time(t0 + x) for x in tau])
    sm = np.array([traj.s_at_time(t0 - x) for x in tau])
    return float(np.max(np.linalg.norm(traj.at(sp)[:, 0:3] - traj.at(sm)[:, 0:3], axis=1)))


def lem_pre_radius(env: KeplerEnv, r_max: float = 1.0, n_radial: int = 200, n_dir: int = 64) -> float:
    """Largest sampled radius r0 with mu/|q| + 2U + <q, grad U> + 2h > 0 on B_r0."""
    dirs = problem.sphere_directions(n_dir)
    for r in np.linspace(r_max / n_radial, r_max, n_radial):
        for d in dirs:
            q = r * d
            if env.mu / r + 2 * env.U(q) + q @ env.gradU(q) + 2 * env.h <= 0:
                return float(r - r_max / n_radial)
    return float(r_max)


# ---------------------------------------------------------- penalized family


def penalized_field(env: KeplerEnv, eps: float, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    r = np.linalg.norm(q)
    if r == 0:
        raise PreconditionError("penalized field is singular at q = 0")
    return -env.mu * q / r**3 - 2 * eps * env.mu * q / r**4 + np.asarray(env.gradU(q), dtype=float)


def penalized_energy(env: KeplerEnv, eps: float, q, qdot) -> float:
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    r = np.linalg.norm(q)
    if r == 0:
        raise PreconditionError("penalized energy is singular at q = 0")
    return float(0.5 * qdot @ qdot - env.mu / r - eps * env.mu / r**2 - env.U(q))


def integrate_penalized(env: KeplerEnv, eps: float, q0, qdot0, t_span, rtol: float = 1e-12):
    f = lambda _t, y: np.concatenate([y[3:], penalized_field(env, eps, y[:3])])
    sol = solve_ivp(f, t_span, np.concatenate([q0, qdot0]), method="DOP853", rtol=rtol, atol=rtol * 1e-2, dense_output=True)
    if sol.status != 0:
        raise StepFailureError(sol.message)
    return sol


def collision_angle(d: float) -> float:
    if d < 0:
        raise PreconditionError("d must be non-negative")
    return 2 * math.pi * math.sqrt(1 + d)


def _swept_half(d: float, mu: float, radii, sign: float, rtol: float):
    # planar zero-energy blow-up orbit, perihelion (1,0), angle carried as a state
    L = math.sqrt(2 * (mu + d * mu ** (4 / 3)))
    k = 2 * d * mu ** (4 / 3)

    def f(_t, y):
        x, yv = y[0:2], y[2:4]
        r2 = x @ x
        r = math.sqrt(r2)
        acc = -mu * x / (r2 * r) - k * x / (r2 * r2)
        return [yv[0], yv[1], acc[0], acc[1], (x[0] * yv[1] - x[1] * yv[0]) / r2]

    events = []
    for R in radii:
        ev = lambda _t, y, R=R: math.hypot(y[0], y[1]) - R
        events.append(ev)
    stop = events[-1]
    stop.terminal = True
    y0 = [1.0, 0.0, 0.0, sign * L, 0.0]
    sol = solve_ivp(f, (0, sign * 1e30), y0, method="DOP853", rtol=rtol, atol=rtol * 1e-3, events=events)
    if sol.status != 1:
        raise ConvergenceError("blow-up orbit did not reach the radius horizon")
    return np.array([sol.y_events[j][0][4] for j in range(len(radii))])


def measure_collision_angle(d: float, tol: float = 1e-6, mu: float = 1.0, horizon: float = 1e6, rtol: float = 1e-13) -> dict:
    """Total polar angle swept by the zero-energy penalized blow-up orbit.

    The angle reached at radius r behaves like theta_inf - c / sqrt(r), so each
    branch is extrapolated from consecutive decades; the two extrapolations
    over the last two decades must agree within ``tol``.
    """
    if d < 0:
        raise PreconditionError("d must be non-negative")
    radii = np.array([horizon / 100, horizon / 10, horizon])
    total = 0.0
    change = 0.0
    for sign in (1.0, -1.0):
        th = np.abs(_swept_half(d, mu, radii, sign, rtol))
        sq = np.sqrt(radii)
        ext = (th[1:] * sq[1:] - th[:-1] * sq[:-1]) / (sq[1:] - sq[:-1])
        change = max(change, abs(ext[1] - ext[0]))
        total += ext[1]
    if change >= tol:
        raise ConvergenceError(f"asymptotic direction not stabilized: change {change:.2e}")
    return {"d": d, "measured": total, "predicted": collision_angle(d), "stabilization": change}


# ---------------------------------------------------------- blow-up rescaling


def blowup_rescale(traj: Trajectory, delta: float, t_center: float, alpha: float, centre=None) -> Trajectory:
    """y(t) = (q(delta^{1+alpha/2} t + t_center) - c) / delta, velocities scaled by delta^{alpha/2}."""
    if not delta > 0:
        raise PreconditionError("delta must be positive")
    if centre is None:
        xc, _ = traj.evaluate([t_center])
        cs = traj.setup.centres
        centre = cs[int(np.argmin(np.linalg.norm(cs - xc[0], axis=1)))]
    centre = np.asarray(centre, dtype=float)
    scale = delta ** (1 + alpha / 2)
    return Trajectory(
        (traj.t - t_center) / scale,
        (traj.x - centre) / delta,
        traj.v * delta ** (alpha / 2),
        None,
        traj.tol,
        (),
        None,
        traj.kind,
    )


def rescaled_energy(y_traj: Trajectory, mass: float, alpha: float) -> np.ndarray:
    r = np.linalg.norm(y_traj.x, axis=1)
    return 0.5 * (y_traj.v**2).sum(axis=1) - mass / (alpha * r**alpha)


def rescaled_residual(setup: ProblemSetup, traj: Trajectory, delta: float, centre_index: int, t_window=None) -> float:
    """max |y'' + m y/|y|^{alpha+2}| of the rescaled orbit, i.e. delta^{1+alpha} |grad Phi_i|."""
    x = traj.x
    if t_window is not None:
        sel = (traj.t >= t_window[0]) & (traj.t <= t_window[1])
        x = x[sel]
    g = problem.phi_gradient(setup, centre_index, x)
    return float(delta ** (1 + setup.alpha) * np.max(np.linalg.norm(np.atleast_2d(g), axis=-1)))

"""Discrete Maupertuis functional on piecewise-linear paths over [-1, 1].

M(u) = int |u'|^2 dt * int (V_beta(u) + H) dt with the kinetic integral exact
for linear elements and the potential integral by composite 4-point Gauss
quadrature.  Critical paths are reparameterized into fixed-energy solutions
and can be polished into true ODE solutions by two-sided shooting.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

from . import dynamics, problem
from .errors import ConvergenceError, PreconditionError, SingularPathError
from .problem import ProblemSetup

NODE_GUARD = 1e-12
QUAD_GUARD = 1e-8
_MAX_SUBDIVISION = 30

_gl_x, _gl_w = np.polynomial.legendre.leggauss(4)
GAUSS_LAMBDA = 0.5 * (_gl_x + 1.0)
GAUSS_WEIGHT = 0.5 * _gl_w


# ------------------------------------------------------------------ potentials


def cutoff(rho, delta_star: float):
    """Quintic smoothstep: 1 on [0, delta*], 0 on [2 delta*, inf); value, d/drho, d2/drho2."""
    rho = np.asarray(rho, dtype=float)
    z = np.clip((rho - delta_star) / delta_star, 0.0, 1.0)
    inside = (z > 0) & (z < 1)
    psi = 1.0 - z**3 * (10 - 15 * z + 6 * z**2)
    dpsi = np.where(inside, -30 * z**2 * (1 - z) ** 2 / delta_star, 0.0)
    d2psi = np.where(inside, -60 * z * (1 - z) * (1 - 2 * z) / delta_star**2, 0.0)
    return psi, dpsi, d2psi


@dataclass(frozen=True)
class PenalizedPotentialParams:
    beta: float = 0.0
    delta_star: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise PreconditionError("beta must lie in [0, 1]")
        if not self.delta_star > 0:
            raise PreconditionError("delta_star must be positive")


class Field:
    """Potential with value, gradient and Hessian, vectorized over (..., 3)."""

    H: float
    singular_points: np.ndarray = np.zeros((0, 3))

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def hessian(self, x):
        raise NotImplementedError


class PenalizedField(Field):
    """V_beta = V + beta * sum_i m_i Psi(|x - c_i|^2) / |x - c_i|^2."""

    def __init__(self, setup: ProblemSetup, params: PenalizedPotentialParams | None = None):
        self.setup = setup
        self.params = params or PenalizedPotentialParams()
        self.H = setup.energy_H
        self.singular_points = setup.centres

    def _penalty_terms(self, x):
        d = np.asarray(x, dtype=float)[..., None, :] - self.setup.centres
        rho = (d * d).sum(axis=-1)
        psi, dpsi, d2psi = cutoff(rho, self.params.delta_star)
        f = psi / rho
        f1 = dpsi / rho - psi / rho**2
        f2 = d2psi / rho - 2 * dpsi / rho**2 + 2 * psi / rho**3
        m = self.setup.masses
        return d, m * f, m * f1, m * f2

    def value(self, x):
        v = problem.potential(self.setup, x)
        if self.params.beta == 0:
            return v
        _, f, _, _ = self._penalty_terms(x)
        return v + self.params.beta * f.sum(axis=-1)

    def gradient(self, x):
        g = problem.gradient(self.setup, x)
        if self.params.beta == 0:
            return g
        d, _, f1, _ = self._penalty_terms(x)
        return g + self.params.beta * (2 * f1[..., None] * d).sum(axis=-2)

    def hessian(self, x):
        h = problem.hessian(self.setup, x)
        if self.params.beta == 0:
            return h
        d, _, f1, f2 = self._penalty_terms(x)
        pen = 2 * f1[..., None, None] * np.eye(3) + 4 * f2[..., None, None] * d[..., :, None] * d[..., None, :]
        return h + self.params.beta * pen.sum(axis=-3)


class ZeroField(Field):
    """V identically zero (closed-form oracles)."""

    def __init__(self, H: float):
        self.H = float(H)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1]) if x.ndim > 1 else 0.0

    def gradient(self, x):
        return np.zeros(np.shape(x))

    def hessian(self, x):
        return np.zeros(np.shape(x) + (3,))


class ConvexBump(Field):
    """Smooth bump a*exp(-|x-c|^2/s^2) without singularities (surrogate landscape)."""

    def __init__(self, H: float, centre=(0.0, 0.0, 0.0), amplitude: float = 1.0, width: float = 1.0):
        self.H = float(H)
        self.c = np.asarray(centre, dtype=float)
        self.a = float(amplitude)
        self.s2 = float(width) ** 2

    def value(self, x):
        d = np.asarray(x, dtype=float) - self.c
        return self.a * np.exp(-(d * d).sum(axis=-1) / self.s2)

    def gradient(self, x):
        d = np.asarray(x, dtype=float) - self.c
        return (-2 / self.s2 * self.value(x))[..., None] * d

    def hessian(self, x):
        d = np.asarray(x, dtype=float) - self.c
        v = self.value(x)[..., None, None]
        return v * (-2 / self.s2 * np.eye(3) + 4 / self.s2**2 * d[..., :, None] * d[..., None, :])


# ------------------------------------------------------------------ path grid


@dataclass(frozen=True)
class PathGrid:
    R: float
    xi_minus: np.ndarray
    xi_plus: np.ndarray
    nodes: np.ndarray

    def __post_init__(self):
        xm = np.array(self.xi_minus, dtype=float).reshape(3)
        xp = np.array(self.xi_plus, dtype=float).reshape(3)
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[1] != 3 or nodes.shape[0] < 3:
            raise PreconditionError("nodes must be an (n+1, 3) array with n >= 2")
        for xi in (xm, xp):
            if abs(np.linalg.norm(xi) - 1) > 1e-12:
                raise PreconditionError("asymptotic directions must be unit vectors")
        nodes[0] = self.R * xm
        nodes[-1] = self.R * xp
        for arr in (xm, xp, nodes):
            arr.setflags(write=False)
        object.__setattr__(self, "R", float(self.R))
        object.__setattr__(self, "xi_minus", xm)
        object.__setattr__(self, "xi_plus", xp)
        object.__setattr__(self, "nodes", nodes)

    @property
    def n(self) -> int:
        return self.nodes.shape[0] - 1

    @property
    def dt(self) -> float:
        return 2.0 / self.n

    @property
    def times(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.n + 1)

    @property
    def free(self) -> np.ndarray:
        return self.nodes[1:-1].ravel()

    def with_free(self, z) -> "PathGrid":
        nodes = self.nodes.copy()
        nodes[1:-1] = np.asarray(z, dtype=float).reshape(-1, 3)
        return PathGrid(self.R, self.xi_minus, self.xi_plus, nodes)

    def with_nodes(self, nodes) -> "PathGrid":
        return PathGrid(self.R, self.xi_minus, self.xi_plus, nodes)

    @classmethod
    def straight(cls, R: float, xi_minus, xi_plus, n: int) -> "PathGrid":
        xm = np.asarray(xi_minus, dtype=float)
        xp = np.asarray(xi_plus, dtype=float)
        lam = np.linspace(0, 1, n + 1)[:, None]
        return cls(R, xm, xp, (1 - lam) * R * xm + lam * R * xp)

    def resample(self, n: int) -> "PathGrid":
        """Linear interpolation of the path onto a uniform grid with n segments."""
        tau = np.linspace(-1, 1, n + 1)
        nodes = np.stack([np.interp(tau, self.times, self.nodes[:, k]) for k in range(3)], axis=-1)
        return self.with_nodes(nodes)

    def min_distance(self, points) -> np.ndarray:
        """Minimal distance of the polygon to each of ``points``."""
        a, b = self.nodes[:-1], self.nodes[1:]
        out = []
        for p in np.atleast_2d(points):
            d = b - a
            lam = np.clip(((p - a) * d).sum(axis=1) / np.maximum((d * d).sum(axis=1), 1e-300), 0, 1)
            out.append(np.min(np.linalg.norm(a + lam[:, None] * d - p, axis=1)))
        return np.array(out)

    def to_dict(self) -> dict:
        return {
            "R": self.R,
            "xi_minus": self.xi_minus.tolist(),
            "xi_plus": self.xi_plus.tolist(),
            "nodes": self.nodes.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PathGrid":
        return cls(data["R"], data["xi_minus"], data["xi_plus"], data["nodes"])

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> "PathGrid":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ------------------------------------------------------------------ quadrature


def _quadrature(field: Field, nodes: np.ndarray):
    """Flat composite-Gauss rule: (segment index, barycentric lambda, weight, point)."""
    sing = np.asarray(field.singular_points)
    n = nodes.shape[0] - 1
    if sing.size:
        dn = np.linalg.norm(nodes[:, None, :] - sing[None], axis=-1)
        if dn.min() < NODE_GUARD:
            raise SingularPathError("a path node coincides with a centre")
    dt = 2.0 / n
    seg = np.repeat(np.arange(n), GAUSS_LAMBDA.size)
    lam = np.tile(GAUSS_LAMBDA, n)
    wt = np.tile(GAUSS_WEIGHT, n) * dt
    pts = nodes[seg] + lam[:, None] * (nodes[seg + 1] - nodes[seg])
    if not sing.size:
        return seg, lam, wt, pts
    close = np.linalg.norm(pts[:, None, :] - sing[None], axis=-1).min(axis=1) < QUAD_GUARD
    if not close.any():
        return seg, lam, wt, pts
    bad = np.unique(seg[close])
    keep = ~np.isin(seg, bad)
    segs, lams, wts = [seg[keep]], [lam[keep]], [wt[keep]]
    for j in bad:
        a, b = nodes[j], nodes[j + 1]
        for depth in range(1, _MAX_SUBDIVISION + 1):
            k = 2**depth
            lo = np.arange(k) / k
            sl = (lo[:, None] + GAUSS_LAMBDA[None, :] / k).ravel()
            p = a + sl[:, None] * (b - a)
            if np.linalg.norm(p[:, None, :] - sing[None], axis=-1).min() >= QUAD_GUARD:
                break
        else:
            raise SingularPathError("quadrature cannot avoid a centre on a segment")
        segs.append(np.full(sl.size, j))
        lams.append(sl)
        wts.append(np.tile(GAUSS_WEIGHT, k) * dt / k)
    seg, lam, wt = map(np.concatenate, (segs, lams, wts))
    pts = nodes[seg] + lam[:, None] * (nodes[seg + 1] - nodes[seg])
    return seg, lam, wt, pts


def maupertuis_parts(field: Field, path: PathGrid) -> tuple[float, float]:
    """(int |u'|^2, int (V_beta(u) + H))."""
    D = np.diff(path.nodes, axis=0)
    T = float((D * D).sum() / path.dt)
    _, _, wt, pts = _quadrature(field, path.nodes)
    P = float(wt @ (field.value(pts) + field.H))
    return T, P


def maupertuis_value(field: Field, path: PathGrid) -> float:
    T, P = maupertuis_parts(field, path)
    return T * P


def _first_variations(field: Field, path: PathGrid):
    nodes = path.nodes
    D = np.diff(nodes, axis=0)
    T = float((D * D).sum() / path.dt)
    dT = np.zeros_like(nodes)
    dT[:-1] -= 2 * D / path.dt
    dT[1:] += 2 * D / path.dt
    seg, lam, wt, pts = _quadrature(field, nodes)
    P = float(wt @ (field.value(pts) + field.H))
    g = field.gradient(pts) * wt[:, None]
    dP = np.zeros_like(nodes)
    np.add.at(dP, seg, (1 - lam)[:, None] * g)
    np.add.at(dP, seg + 1, lam[:, None] * g)
    return T, P, dT[1:-1], dP[1:-1], (seg, lam, wt, pts)


def maupertuis_gradient(field: Field, path: PathGrid) -> np.ndarray:
    """dM/d(free nodes), shape (n-1, 3)."""
    T, P, dT, dP, _ = _first_variations(field, path)
    return P * dT + T * dP


def maupertuis_hessian(field: Field, path: PathGrid) -> np.ndarray:
    """Dense Hessian with respect to the 3(n-1) free coordinates."""
    n = path.n
    T, P, dT, dP, (seg, lam, wt, pts) = _first_variations(field, path)
    hv = field.hessian(pts) * wt[:, None, None]
    diag = np.zeros((n + 1, 3, 3))
    off = np.zeros((n, 3, 3))
    np.add.at(diag, seg, ((1 - lam) ** 2)[:, None, None] * hv)
    np.add.at(diag, seg + 1, (lam**2)[:, None, None] * hv)
    np.add.at(off, seg, (lam * (1 - lam))[:, None, None] * hv)
    m = 3 * (n - 1)
    d2P = np.zeros((m, m))
    d2T = np.zeros((m, m))
    eye = np.eye(3)
    for k in range(n - 1):
        sl = slice(3 * k, 3 * k + 3)
        d2P[sl, sl] = diag[k + 1]
        d2T[sl, sl] = 4 / path.dt * eye
        if k + 1 < n - 1:
            sn = slice(3 * k + 3, 3 * k + 6)
            d2P[sl, sn] = off[k + 1]
            d2P[sn, sl] = off[k + 1].T
            d2T[sl, sn] = d2T[sn, sl] = -2 / path.dt * eye
    a, b = dT.ravel(), dP.ravel()
    hess = P * d2T + T * d2P + np.outer(a, b) + np.outer(b, a)
    return 0.5 * (hess + hess.T)


def morse_index(hessian: np.ndarray, tol: float | None = None) -> int:
    """Number of eigenvalues below -tol (default 1e-8 * ||H||)."""
    try:
        ev = np.linalg.eigvalsh(hessian)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"eigensolver failed: {exc}") from exc
    if tol is None:
        tol = 1e-8 * np.max(np.abs(ev))
    return int((ev < -tol).sum())


def omega(field: Field, path: PathGrid) -> float:
    T, P = maupertuis_parts(field, path)
    if T == 0:
        raise PreconditionError("omega is undefined on a constant path")
    if P <= 0:
        raise PreconditionError("potential integral must be positive")
    return math.sqrt(T / (2 * P))


# ------------------------------------------------------------------ refinement


def newton_refine(
    field: Field,
    path: PathGrid,
    tol: float = 1e-10,
    max_iter: int = 50,
    max_step: float | None = None,
) -> tuple[PathGrid, float]:
    """Newton iteration on grad M = 0 with backtracking on the gradient norm.

    Returns the refined path and its gradient norm; raises ConvergenceError
    when the norm stalls above ``tol``.
    """
    g = maupertuis_gradient(field, path).ravel()
    gn = float(np.linalg.norm(g))
    if max_step is None:
        max_step = 0.25 * path.R
    for _ in range(max_iter):
        if gn <= tol:
            return path, gn
        hess = maupertuis_hessian(field, path)
        try:
            step = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(hess, g, rcond=None)[0]
        big = np.max(np.linalg.norm(step.reshape(-1, 3), axis=1))
        if big > max_step:
            step *= max_step / big
        t = 1.0
        while t > 1e-6:
            try:
                trial = path.with_free(path.free + t * step)
                gt = maupertuis_gradient(field, trial).ravel()
                gtn = float(np.linalg.norm(gt))
            except SingularPathError:
                gtn = math.inf
            if gtn < (1 - 1e-4 * t) * gn or (t == 1.0 and gtn < 10 * gn and gn < 1e-6):
                break
            t *= 0.5
        else:
            raise ConvergenceError(f"Newton stalled at gradient norm {gn:.3e}")
        path, g, gn = trial, gt, gtn
    if gn <= tol:
        return path, gn
    raise ConvergenceError(f"Newton did not reach {tol:.1e}; gradient norm {gn:.3e}")


# ------------------------------------------------------------------ trajectories


@dataclass(frozen=True)
class Reparameterized:
    trajectory: dynamics.Trajectory
    omega: float
    ode_residual: float
    energy_residual: float


def reparameterize(field: Field, path: PathGrid, omega_value: float | None = None) -> Reparameterized:
    """x(t) = u(t/omega) on [-omega, omega] with residuals of the fixed-energy system.

    The ODE residual uses second differences at interior nodes; the energy
    residual compares 1/2|x'|^2 with V_beta + H at segment midpoints.
    """
    w = omega(field, path) if omega_value is None else float(omega_value)
    if not w > 0:
        raise PreconditionError("omega must be positive")
    h = w * path.dt
    x = path.nodes
    D = np.diff(x, axis=0) / h
    v = np.empty_like(x)
    v[0], v[-1] = D[0], D[-1]
    v[1:-1] = 0.5 * (D[:-1] + D[1:])
    acc = (x[2:] - 2 * x[1:-1] + x[:-2]) / h**2
    ode = float(np.max(np.linalg.norm(acc - field.gradient(x[1:-1]), axis=1)))
    mid = 0.5 * (x[:-1] + x[1:])
    en = float(np.max(np.abs(0.5 * (D * D).sum(axis=1) - field.value(mid) - field.H)))
    setup = getattr(field, "setup", None)
    traj = dynamics.Trajectory(w * path.times, x, v, setup, math.nan, (), None, "linear")
    return Reparameterized(traj, w, ode, en)


def _traj_integrals(field: Field, traj: dynamics.Trajectory) -> tuple[float, float]:
    """(int |x'|^2 dt, int (V + H) dt) along a trajectory."""
    if traj.kind == "linear":
        D = np.diff(traj.x, axis=0)
        dt = np.diff(traj.t)
        kin = float(((D * D).sum(axis=1) / dt).sum())
        seg = np.repeat(np.arange(dt.size), GAUSS_LAMBDA.size)
        lam = np.tile(GAUSS_LAMBDA, dt.size)
        pts = traj.x[seg] + lam[:, None] * D[seg]
        pot = float((np.tile(GAUSS_WEIGHT, dt.size) * dt[seg]) @ (field.value(pts) + field.H))
        return kin, pot
    gx, gw = np.polynomial.legendre.leggauss(8)
    lo, hi = traj.t[:-1], traj.t[1:]
    half = 0.5 * (hi - lo)
    tq = (0.5 * (hi + lo))[:, None] + half[:, None] * gx[None, :]
    x, v = traj.evaluate(tq.ravel())
    wq = (half[:, None] * gw[None, :]).ravel()
    return float(wq @ (v * v).sum(axis=1)), float(wq @ (field.value(x) + field.H))


def action(field: Field, traj: dynamics.Trajectory) -> float:
    """int (1/2|x'|^2 + V(x) + H) dt."""
    kin, pot = _traj_integrals(field, traj)
    return 0.5 * kin + pot


def length_functional(field: Field, path: PathGrid) -> float:
    """int |u'| sqrt(V + H) dt with the module's quadrature."""
    seg, _, wt, pts = _quadrature(field, path.nodes)
    speed = np.linalg.norm(np.diff(path.nodes, axis=0), axis=1) / path.dt
    return float(wt @ (speed[seg] * np.sqrt(field.value(pts) + field.H)))


def maupertuis_action_identity(field: Field, path: PathGrid) -> float:
    """|sqrt(M_0(u)) - A(x)/sqrt 2| after reparameterization with the optimal omega."""
    rep = reparameterize(field, path)
    return abs(math.sqrt(maupertuis_value(field, path)) - action(field, rep.trajectory) / math.sqrt(2))


def trajectory_identity_defect(field: Field, traj: dynamics.Trajectory) -> float:
    """Same identity on a trajectory; the time rescaling cancels from M_0."""
    kin, pot = _traj_integrals(field, traj)
    return abs(math.sqrt(kin * pot) - (0.5 * kin + pot) / math.sqrt(2))


def ode_residual(setup: ProblemSetup, traj: dynamics.Trajectory, per_step: int = 4) -> float:
    """max |x'' - grad V(x)| with x'' by central differences of the dense velocity."""
    if traj.dense is None:
        raise PreconditionError("ODE residual needs dense output")
    t = traj.refined_times(per_step)[1:-1]
    steps = np.diff(traj.t)
    local = np.interp(t, traj.t[:-1], steps)
    h = np.minimum(1e-3 * local, 1e-4)
    _, vp = traj.evaluate(t + h)
    _, vm = traj.evaluate(t - h)
    x, _ = traj.evaluate(t)
    acc = (vp - vm) / (2 * h)[:, None]
    return float(np.max(np.linalg.norm(acc - problem.gradient(setup, x), axis=1)))


# ------------------------------------------------------------------ shooting


def _variational_rhs(setup: ProblemSetup):
    def f(_t, y):
        x, v = y[0:3], y[3:6]
        phi = y[6:].reshape(6, 6)
        A = np.zeros((6, 6))
        A[0:3, 3:6] = np.eye(3)
        A[3:6, 0:3] = problem.hessian(setup, x)
        return np.concatenate([v, problem.gradient(setup, x), (A @ phi).ravel()])

    return f


def _flow_with_stm(setup, y0, t_end, rtol):
    y = np.concatenate([y0, np.eye(6).ravel()])
    sol = solve_ivp(_variational_rhs(setup), (0.0, t_end), y, method="DOP853", rtol=rtol, atol=rtol * 1e-2)
    if sol.status != 0:
        raise ConvergenceError(f"shooting integration failed: {sol.message}")
    yf = sol.y[:, -1]
    return yf[0:6], yf[6:].reshape(6, 6)


@dataclass(frozen=True)
class PolishedSolution:
    trajectory: dynamics.Trajectory
    omega: float
    ode_residual: float
    energy_residual: float
    endpoint_error: float
    distance_to_path: float
    iterations: int


def polish(
    setup: ProblemSetup,
    path: PathGrid,
    tol: float = 1e-11,
    max_iter: int = 30,
    rtol: float = 1e-13,
    energy_tol: float = 1e-9,
) -> PolishedSolution:
    """Shoot from the path midpoint to a true solution joining R xi- and R xi+.

    Unknowns: two offsets of the midpoint in the plane normal to the path,
    two tilts of the velocity direction, and the backward and forward flight
    times; the speed is fixed by the energy.
    """
    field = PenalizedField(setup)
    w = omega(field, path)
    k = path.n // 2
    p0 = path.nodes[k]
    e = path.nodes[k + 1] - path.nodes[k - 1]
    e /= np.linalg.norm(e)
    a = np.cross(e, [1.0, 0.0, 0.0])
    if np.linalg.norm(a) < 0.5:
        a = np.cross(e, [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(e, a)
    target_m, target_p = path.R * path.xi_minus, path.R * path.xi_plus

    def initial(z):
        x0 = p0 + z[0] * a + z[1] * b
        d = e + z[2] * a + z[3] * b
        dn = np.linalg.norm(d)
        speed = math.sqrt(2 * (problem.potential(setup, x0) + setup.energy_H))
        return np.concatenate([x0, speed * d / dn])

    def dinitial(z, h=1e-7):
        return np.column_stack([(initial(z + h * ei) - initial(z - h * ei)) / (2 * h) for ei in np.eye(4)])

    tau = path.times[k]
    z = np.array([0.0, 0.0, 0.0, 0.0, w * (1 + tau), w * (1 - tau)])
    scale = max(1.0, path.R)
    it = 0
    res_norm = math.inf
    for it in range(1, max_iter + 1):
        y0 = initial(z[:4])
        yf, Pf = _flow_with_stm(setup, y0, z[5], rtol)
        yb, Pb = _flow_with_stm(setup, y0, -z[4], rtol)
        F = np.concatenate([yf[:3] - target_p, yb[:3] - target_m])
        res_norm = float(np.linalg.norm(F))
        if res_norm <= tol * scale:
            break
        J0 = dinitial(z[:4])
        J = np.zeros((6, 6))
        J[0:3, 0:4] = Pf[0:3] @ J0
        J[3:6, 0:4] = Pb[0:3] @ J0
        J[0:3, 5] = yf[3:]
        J[3:6, 4] = -yb[3:]
        step = -np.linalg.solve(J, F)
        t = 1.0
        while t > 1e-4:
            zt = z + t * step
            if zt[4] > 0 and zt[5] > 0:
                y0t = initial(zt[:4])
                ft = solve_ivp(dynamics._rhs(setup), (0, zt[5]), y0t, method="DOP853", rtol=rtol, atol=rtol * 1e-2)
                bt = solve_ivp(dynamics._rhs(setup), (0, -zt[4]), y0t, method="DOP853", rtol=rtol, atol=rtol * 1e-2)
                Ft = np.concatenate([ft.y[:3, -1] - target_p, bt.y[:3, -1] - target_m])
                if np.linalg.norm(Ft) < (1 - 1e-4 * t) * res_norm or t == 1.0 and np.linalg.norm(Ft) < res_norm:
                    break
            t *= 0.5
        else:
            raise ConvergenceError(f"shooting stalled at endpoint error {res_norm:.3e}")
        z = zt
    else:
        raise ConvergenceError(f"shooting did not converge; endpoint error {res_norm:.3e}")

    y0 = initial(z[:4])
    st = dynamics.State(0.0, y0[:3], y0[3:])
    fwd = dynamics.integrate(setup, st, (0.0, z[5]), tol=energy_tol, handoff_radius=0.0, rtol=rtol)
    bwd = dynamics.integrate(setup, st, (0.0, -z[4]), tol=energy_tol, handoff_radius=0.0, rtol=rtol)
    traj = dynamics.concatenate(bwd, fwd)
    half = 0.5 * (z[4] + z[5])
    traj = traj.shifted(0.5 * (z[4] - z[5]))
    xe, _ = traj.evaluate([-half, half])
    endpoint = float(max(np.linalg.norm(xe[0] - target_m), np.linalg.norm(xe[1] - target_p)))
    # distance from the discrete nodes to the polished solution at matching times
    xs, _ = traj.evaluate(np.clip(half * path.times, -half, half))
    dist = float(np.max(np.linalg.norm(xs - path.nodes, axis=1)))
    return PolishedSolution(
        traj,
        half,
        ode_residual(setup, traj),
        float(np.max(np.abs(traj.energy_residual()))),
        endpoint,
        dist,
        it,
    )

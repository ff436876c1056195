"""Loop families of paths, their S^2-degrees, and the min-max search for a
mountain-pass critical point of the penalized Maupertuis functional."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import quad
from scipy.linalg import solve_banded

from . import maupertuis as mp
from . import problem
from .errors import (
    AdmissibilityError,
    CollisionTrendError,
    ConstructionError,
    ConvergenceError,
    DegeneratePanelError,
    MeshTooCoarseError,
    PreconditionError,
    SingularPathError,
    StagnationError,
)
from .maupertuis import Field, PathGrid
from .problem import CalibratedConstants, ProblemSetup

log = logging.getLogger(__name__)

PANEL_ANGLE = 0.3
MAX_PANEL_DEPTH = 14


# ------------------------------------------------------------------ families


@dataclass(frozen=True)
class LoopFamily:
    """Cyclic family of paths sharing R, xi+- and n; ``nodes`` has shape (M, n+1, 3)."""

    R: float
    xi_minus: np.ndarray
    xi_plus: np.ndarray
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 3 or nodes.shape[2] != 3 or nodes.shape[0] < 3:
            raise PreconditionError("family nodes must have shape (M >= 3, n+1, 3)")
        xm = np.array(self.xi_minus, dtype=float)
        xp = np.array(self.xi_plus, dtype=float)
        nodes[:, 0] = self.R * xm
        nodes[:, -1] = self.R * xp
        nodes.setflags(write=False)
        object.__setattr__(self, "R", float(self.R))
        object.__setattr__(self, "xi_minus", xm)
        object.__setattr__(self, "xi_plus", xp)
        object.__setattr__(self, "nodes", nodes)

    @property
    def M(self) -> int:
        return self.nodes.shape[0]

    @property
    def n(self) -> int:
        return self.nodes.shape[1] - 1

    def member(self, j: int) -> PathGrid:
        return PathGrid(self.R, self.xi_minus, self.xi_plus, self.nodes[j % self.M])

    def members(self) -> list[PathGrid]:
        return [self.member(j) for j in range(self.M)]

    def with_nodes(self, nodes) -> "LoopFamily":
        return LoopFamily(self.R, self.xi_minus, self.xi_plus, nodes)

    def gaps(self) -> np.ndarray:
        """Sup-node distance between member j and j+1 (cyclically)."""
        d = np.linalg.norm(np.roll(self.nodes, -1, axis=0) - self.nodes, axis=2)
        return d.max(axis=1)

    @classmethod
    def constant(cls, path: PathGrid, M: int = 8) -> "LoopFamily":
        return cls(path.R, path.xi_minus, path.xi_plus, np.repeat(path.nodes[None], M, axis=0))


# ------------------------------------------------------------------ degree


def _solid_angle(a, b, c):
    """Signed solid angle of spherical triangles with unit vertices (..., 3)."""
    num = (a * np.cross(b, c)).sum(axis=-1)
    den = 1 + (a * b).sum(axis=-1) + (b * c).sum(axis=-1) + (c * a).sum(axis=-1)
    return 2 * np.arctan2(num, den)


def _unit(x):
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / r, r[..., 0]


@dataclass(frozen=True)
class DegreeResult:
    degree: int
    raw: float
    defect: float
    panels: int


def sphere_degree_detail(family: LoopFamily, centre, max_depth: int = MAX_PANEL_DEPTH) -> DegreeResult:
    """Degree of (s, t) -> (h(s)(t) - c)/|h(s)(t) - c| by summing signed solid
    angles of bilinear image panels, adaptively subdivided until every panel
    spans less than ``PANEL_ANGLE`` radians on the sphere."""
    c = np.asarray(centre, dtype=float)
    X = family.nodes - c
    if np.min(np.linalg.norm(X, axis=2)) < problem.SINGULAR_RADIUS:
        raise PreconditionError("a member node coincides with the centre")
    Xn = np.roll(X, -1, axis=0)
    # corners in (s, t) order: (j,k), (j+1,k), (j+1,k+1), (j,k+1)
    quads = np.stack([X[:, :-1], Xn[:, :-1], Xn[:, 1:], X[:, 1:]], axis=2).reshape(-1, 4, 3)
    total = 0.0
    count = 0
    for depth in range(max_depth + 1):
        if quads.shape[0] == 0:
            break
        u, r = _unit(quads)
        if np.min(r) < 1e-14:
            raise DegeneratePanelError("an image panel passes through the centre")
        cosines = np.stack([(u[:, i] * u[:, k]).sum(axis=-1) for i in range(4) for k in range(i + 1, 4)], axis=1)
        wide = np.arccos(np.clip(cosines.min(axis=1), -1, 1)) > PANEL_ANGLE
        fine = ~wide
        uf = u[fine]
        total += _solid_angle(uf[:, 0], uf[:, 1], uf[:, 2]).sum() + _solid_angle(uf[:, 0], uf[:, 2], uf[:, 3]).sum()
        count += int(fine.sum())
        q = quads[wide]
        if q.shape[0] == 0:
            quads = q
            break
        if depth == max_depth:
            raise DegeneratePanelError(f"{q.shape[0]} panels still wide at maximal subdivision depth")
        a, b, cc, d = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        ab, bc, cd, da = 0.5 * (a + b), 0.5 * (b + cc), 0.5 * (cc + d), 0.5 * (d + a)
        mid = 0.25 * (a + b + cc + d)
        quads = np.concatenate(
            [
                np.stack([a, ab, mid, da], axis=1),
                np.stack([ab, b, bc, mid], axis=1),
                np.stack([mid, bc, cc, cd], axis=1),
                np.stack([da, mid, cd, d], axis=1),
            ]
        )
    raw = total / (4 * math.pi)
    deg = int(round(raw))
    defect = abs(raw - deg)
    if defect >= 0.1:
        raise MeshTooCoarseError(f"degree rounding defect {defect:.3f} (raw {raw:.4f})")
    return DegreeResult(deg, float(raw), float(defect), count)


def sphere_degree(family: LoopFamily, centre) -> int:
    return sphere_degree_detail(family, centre).degree


def family_degrees(setup: ProblemSetup, family: LoopFamily) -> list[int]:
    return [sphere_degree(family, c) for c in setup.centres]


def default_designation(setup: ProblemSetup) -> tuple[int, int]:
    if setup.n_centres < 2:
        raise PreconditionError("the admissible class needs at least two centres")
    return (0, 1)


def admissible(setup: ProblemSetup, family: LoopFamily, designation: tuple[int, int] | None = None) -> bool:
    """deg about the first designated centre is nonzero and about the second is zero."""
    i1, i2 = designation or default_designation(setup)
    return sphere_degree(family, setup.centres[i1]) != 0 and sphere_degree(family, setup.centres[i2]) == 0


# ------------------------------------------------------------------ construction


def _polyline_resample(points: np.ndarray, n: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0, s[-1], n + 1)
    return np.stack([np.interp(target, s, points[:, k]) for k in range(3)], axis=-1)


def initial_family(
    setup: ProblemSetup,
    consts: CalibratedConstants,
    R: float,
    xi_minus,
    xi_plus,
    M: int = 24,
    n: int = 64,
    designation: tuple[int, int] | None = None,
    radius: float | None = None,
    phase: float = 0.5,
) -> LoopFamily:
    """Family whose members detour over a small sphere around the designated centre.

    Member j runs straight from R xi- to the pole c + rho e, along the
    meridian of longitude 2 pi (j + phase) / M to the antipode c - rho e, then straight
    to R xi+.  The meridians sweep the sphere once, giving degree +-1 about c.
    """
    xm = np.asarray(xi_minus, dtype=float)
    xp = np.asarray(xi_plus, dtype=float)
    xm, xp = xm / np.linalg.norm(xm), xp / np.linalg.norm(xp)
    if R <= consts.K_radius:
        raise PreconditionError("R must exceed K")
    if abs(abs(xm @ xp) - 1) < 1e-9:
        raise PreconditionError("xi+ must differ from +-xi-")
    i1, _ = designation or default_designation(setup)
    c = setup.centres[i1]
    rho = 0.5 * consts.delta_star if radius is None else radius
    e = xm - xp
    e /= np.linalg.norm(e)
    f = np.cross(e, [0.0, 0.0, 1.0])
    if np.linalg.norm(f) < 0.3:
        f = np.cross(e, [0.0, 1.0, 0.0])
    f /= np.linalg.norm(f)
    g = np.cross(e, f)
    theta = np.linspace(0, math.pi, 64)
    # a third of the segments on the arc keeps the detour resolved at large R
    n_arc = max(2, n // 3)
    la, lb = np.linalg.norm(c + rho * e - R * xm), np.linalg.norm(R * xp - c + rho * e)
    n_in = max(1, int(round((n - n_arc) * la / (la + lb))))
    n_out = n - n_arc - n_in
    if n_out < 1:
        raise PreconditionError("too few segments for the detour family")
    nodes = []
    for j in range(M):
        phi = 2 * math.pi * (j + phase) / M
        side = math.cos(phi) * f + math.sin(phi) * g
        arc = c + rho * (np.cos(theta)[:, None] * e + np.sin(theta)[:, None] * side)
        pts = np.vstack(
            [
                _polyline_resample(np.array([R * xm, arc[0]]), n_in)[:-1],
                _polyline_resample(arc, n_arc),
                _polyline_resample(np.array([arc[-1], R * xp]), n_out)[1:],
            ]
        )
        nodes.append(pts)
    fam = LoopFamily(R, xm, xp, np.array(nodes))
    if not admissible(setup, fam, designation):
        raise ConstructionError("constructed family is not admissible (detour radius too large?)")
    return fam


# ------------------------------------------------------------------ search


@dataclass
class MinMaxResult:
    c_value: float
    argmax_index: int
    critical_path: PathGrid
    gradient_norm: float
    morse_index: int
    degrees: list = field(default_factory=list)
    min_centre_distances: list = field(default_factory=list)
    history: list = field(default_factory=list)
    sweeps: int = 0
    newton_iterations: int = 0
    family: LoopFamily | None = None

    def to_dict(self) -> dict:
        return {
            "c_value": self.c_value,
            "argmax_index": self.argmax_index,
            "gradient_norm": self.gradient_norm,
            "morse_index": self.morse_index,
            "degrees": list(self.degrees),
            "min_centre_distances": [float(d) for d in self.min_centre_distances],
            "sweeps": self.sweeps,
            "newton_iterations": self.newton_iterations,
            "history": self.history,
            "critical_path": self.critical_path.to_dict(),
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


@dataclass(frozen=True)
class Schedule:
    max_sweeps: int = 300
    window: int | None = None
    descent_steps: int = 1
    sweep_rtol: float = 1e-3
    saddle_tol: float = 1e-6
    tol: float = 1e-8
    max_saddle_iter: int = 200
    trust_radius: float = 0.2
    max_members: int = 96
    retries: int = 3
    retry_sweeps: int = 15


def _values(field: Field, family: LoopFamily) -> np.ndarray:
    out = np.empty(family.M)
    for j in range(family.M):
        try:
            out[j] = mp.maupertuis_value(field, family.member(j))
        except SingularPathError:
            out[j] = math.inf
    return out


def _preconditioned_direction(field: Field, path: PathGrid, grad: np.ndarray) -> np.ndarray:
    """Solve (P d2T) d = grad with the block-tridiagonal kinetic operator."""
    T, P = mp.maupertuis_parts(field, path)
    m = path.n - 1
    ab = np.zeros((3, m))
    ab[0, 1:] = -2 / path.dt * P
    ab[1, :] = 4 / path.dt * P
    ab[2, :-1] = -2 / path.dt * P
    return solve_banded((1, 1), ab, grad.reshape(m, 3))


def _descend_member(field: Field, path: PathGrid, value: float, steps: int, centres: np.ndarray):
    """A few Armijo steps of preconditioned descent keeping the path away from centres."""
    for _ in range(steps):
        g = mp.maupertuis_gradient(field, path)
        d = _preconditioned_direction(field, path, g)
        slope = float((g * d).sum())
        if slope <= 0:
            break
        # the straight homotopy to the new path stays outside half the current clearance
        clearance = float(path.min_distance(centres).min())
        big = float(np.max(np.linalg.norm(d, axis=1)))
        t = min(1.0, 0.5 * clearance / big) if big > 0 else 1.0
        while t > 1e-8:
            trial = path.with_free(path.free - t * d.ravel())
            try:
                vt = mp.maupertuis_value(field, trial)
            except SingularPathError:
                vt = math.inf
            if vt <= value - 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        if t < 1e-8:
            break
        path, value = trial, vt
    return path, value


def _reparameterize_loop(family: LoopFamily, M: int | None = None) -> LoopFamily:
    """Redistribute members to equal spacing along the (closed) string of paths."""
    M = M or family.M
    X = family.nodes.reshape(family.M, -1)
    closed = np.vstack([X, X[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return family
    target = np.arange(M) * s[-1] / M
    k = np.clip(np.searchsorted(s, target, side="right") - 1, 0, family.M - 1)
    lam = ((target - s[k]) / np.where(seg[k] > 0, seg[k], 1.0))[:, None]
    out = (1 - lam) * closed[k] + lam * closed[k + 1]
    return family.with_nodes(out.reshape(M, family.n + 1, 3))


def _degrees_or_none(setup, family, designation):
    try:
        return [sphere_degree(family, setup.centres[i]) for i in designation]
    except (MeshTooCoarseError, DegeneratePanelError, PreconditionError):
        return None


def _segment_distances(nodes: np.ndarray, centres: np.ndarray) -> np.ndarray:
    """Distance from each polyline segment (..., n) to the nearest centre."""
    p, q = nodes[..., :-1, :], nodes[..., 1:, :]
    d = q - p
    out = np.full(p.shape[:-1], np.inf)
    for c in centres:
        lam = np.clip(((c - p) * d).sum(-1) / np.maximum((d * d).sum(-1), 1e-300), 0.0, 1.0)
        out = np.minimum(out, np.linalg.norm(p + lam[..., None] * d - c, axis=-1))
    return out


def _panel_overlap(family: LoopFamily, centres: np.ndarray) -> np.ndarray:
    """Per member j, whether some panel between members j and j+1 may reach a centre.

    Every point of the panel over segment k lies within the larger endpoint
    gap g_k of either member's segment k, so the panel misses the centres
    when g_k is below that segment's clearance.
    """
    X = family.nodes
    Y = np.roll(X, -1, axis=0)
    gap = np.linalg.norm(Y - X, axis=-1)
    g = np.maximum(gap[:, :-1], gap[:, 1:])
    clear = _segment_distances(X, centres)
    clear = np.maximum(clear, np.roll(clear, -1, axis=0))
    return np.any(g >= 0.9 * clear, axis=1)


def _insert_members(field, family, vals, centres, max_members):
    """Insert midpoints between neighbours whose panels may reach a centre.

    Once no panel can reach a centre, the discrete family represents a
    continuous loop in the path space with well-defined degrees.
    """
    for _ in range(8):
        need = _panel_overlap(family, centres)
        if not need.any() or family.M >= max_members:
            return family, vals, bool(need.any())
        nodes, new_vals = [], []
        for j in range(family.M):
            nodes.append(family.nodes[j])
            new_vals.append(vals[j])
            if need[j] and len(nodes) < max_members:
                mid = 0.5 * (family.nodes[j] + family.nodes[(j + 1) % family.M])
                nodes.append(mid)
                try:
                    new_vals.append(mp.maupertuis_value(field, family.member(j).with_nodes(mid)))
                except SingularPathError:
                    new_vals.append(math.inf)
        family, vals = family.with_nodes(np.array(nodes)), np.array(new_vals)
    return family, vals, True


def _deform(setup, field, family, schedule, designation, history):
    """String-method deformation of the loop.

    Each sweep moves the members selected by ``schedule.window`` (all members
    when None, otherwise a window around the argmax) by a clearance-limited
    descent step, which cannot raise any member value.  Members are inserted
    where neighbours drift apart (a refinement of the same loop, logged as
    such), and the loop is redistributed to equal spacing when that does not
    raise the maximum.  Between refinements the recorded maximum is
    non-increasing.
    """
    degs0 = _degrees_or_none(setup, family, designation)
    vals = _values(field, family)
    family, vals, _ = _insert_members(field, family, vals, setup.centres, schedule.max_members)
    recent = [float(vals.max())]
    sweep = 0
    for sweep in range(1, schedule.max_sweeps + 1):
        saved = (family, vals)
        if schedule.window is None:
            chosen = range(family.M)
        else:
            j0 = int(np.argmax(vals))
            chosen = [(j0 + dj) % family.M for dj in range(-schedule.window, schedule.window + 1)]
        nodes = family.nodes.copy()
        new_vals = vals.copy()
        for j in chosen:
            p, v = _descend_member(field, family.member(j), vals[j], schedule.descent_steps, setup.centres)
            nodes[j] = p.nodes
            new_vals[j] = v
        family, vals = family.with_nodes(nodes), new_vals
        history.append({"sweep": sweep, "c_value": float(vals.max()), "argmax": int(np.argmax(vals)), "M": family.M})
        M_before = family.M
        family, vals, unresolved = _insert_members(field, family, vals, setup.centres, schedule.max_members)
        if unresolved or _degrees_or_none(setup, family, designation) != degs0:
            # the loop can no longer be resolved with the member budget: keep the last valid loop
            family, vals = saved
            history[-1] = {"sweep": sweep, "c_value": float(vals.max()), "event": "resolution limit", "M": family.M}
            break
        if family.M != M_before:
            history.append({"sweep": sweep, "c_value": float(vals.max()), "event": "refined", "M": family.M})
        spaced = _reparameterize_loop(family)
        spaced_vals = _values(field, spaced)
        if (
            spaced_vals.max() <= vals.max()
            and not _insert_members(field, spaced, spaced_vals, setup.centres, spaced.M)[2]
            and _degrees_or_none(setup, spaced, designation) == degs0
        ):
            family, vals = spaced, spaced_vals
        recent.append(float(vals.max()))
        if len(recent) > 10 and abs(recent[-11] - recent[-1]) < schedule.sweep_rtol * abs(recent[-1]):
            break
    return family, vals, sweep


def _prfo_step(ev, V, g, k):
    """P-RFO step maximizing along eigenmode k and minimizing along the others."""
    gt = V.T @ g
    lam_up = 0.5 * ev[k] + 0.5 * math.sqrt(ev[k] ** 2 + 4 * gt[k] ** 2)
    step = np.zeros_like(g) if lam_up == ev[k] else -gt[k] / (ev[k] - lam_up) * V[:, k]
    others = np.arange(ev.size) != k
    eo, go = ev[others], gt[others]
    a = np.zeros((eo.size + 1, eo.size + 1))
    a[:-1, :-1] = np.diag(eo)
    a[:-1, -1] = a[-1, :-1] = go
    lam_dn = min(np.linalg.eigvalsh(a)[0], eo.min() - 1e-12 * np.max(np.abs(ev)))
    return step - V[:, others] @ (go / (eo - lam_dn))


def saddle_search(
    field: Field,
    path: PathGrid,
    tol: float = 1e-6,
    max_iter: int = 200,
    trust_radius: float = 0.2,
    follow: np.ndarray | None = None,
) -> tuple[PathGrid, float, int]:
    """Partitioned rational-function optimization towards an index-1 saddle.

    The mode to be maximized is the Hessian eigenvector with the largest
    overlap with ``follow`` (default: lowest eigenvalue) among the lowest
    few, tracked by overlap between iterations.  The trust radius on the
    largest node move adapts to whether the gradient norm decreased.
    """
    mode = follow
    g = mp.maupertuis_gradient(field, path).ravel()
    gn = float(np.linalg.norm(g))
    for it in range(1, max_iter + 1):
        if gn <= tol:
            return path, gn, it
        hess = mp.maupertuis_hessian(field, path)
        ev, V = np.linalg.eigh(hess)
        low = min(6, ev.size)
        k = 0 if mode is None else int(np.argmax(np.abs(V[:, :low].T @ mode)))
        mode = V[:, k]
        step = _prfo_step(ev, V, g, k)
        big = float(np.max(np.linalg.norm(step.reshape(-1, 3), axis=1)))
        radius = trust_radius
        while True:
            s = step * min(1.0, radius / big) if big > 0 else step
            try:
                trial = path.with_free(path.free + s)
                gt = mp.maupertuis_gradient(field, trial).ravel()
                gtn = float(np.linalg.norm(gt))
            except SingularPathError:
                gtn = math.inf
            if gtn < gn or radius < 1e-3 * trust_radius:
                break
            radius *= 0.5
        if not math.isfinite(gtn):
            raise ConvergenceError("saddle search ran into a centre")
        if gtn >= gn:
            raise ConvergenceError(f"saddle search stalled at gradient norm {gn:.3e}")
        trust_radius = min(2 * radius, 1.0) if gtn < 0.5 * gn else radius
        path, g, gn = trial, gt, gtn
    raise ConvergenceError(f"saddle search did not converge; gradient norm {gn:.3e}")


def minmax_solve(
    setup: ProblemSetup,
    field: Field,
    family: LoopFamily,
    schedule: Schedule = Schedule(),
    designation: tuple[int, int] | None = None,
    check_admissible: bool = True,
) -> MinMaxResult:
    """Deform the family to lower its maximum, then converge the argmax member
    to a critical point of Morse index <= 1 and Newton-refine it."""
    designation = designation or default_designation(setup)
    if check_admissible and not admissible(setup, family, designation):
        raise AdmissibilityError("initial family is not admissible")
    history: list = []
    family, vals, sweeps = _deform(setup, field, family, schedule, designation, history)
    path = None
    for attempt in range(schedule.retries + 1):
        top = int(np.argmax(vals))
        # the discrete argmax can sit on the wrong side of the ridge; its
        # neighbours are cheap alternatives before deforming further
        for j in sorted({top, (top - 1) % family.M, (top + 1) % family.M}, key=lambda k: -vals[k]):
            start = family.member(j)
            tangent = 0.5 * (family.nodes[(j + 1) % family.M] - family.nodes[j - 1])[1:-1].ravel()
            nt = np.linalg.norm(tangent)
            tangent = tangent / nt if nt > 0 else None
            try:
                path, _, it = saddle_search(
                    field, start, schedule.saddle_tol, schedule.max_saddle_iter, schedule.trust_radius, tangent
                )
                break
            except ConvergenceError as exc:
                log.info("saddle search from member %d failed: %s", j, exc)
                continue
        if path is not None:
            break
        if attempt == schedule.retries:
            raise StagnationError("no index-1 critical point found from the deformed family")
        more = Schedule(**{**schedule.__dict__, "max_sweeps": schedule.retry_sweeps, "sweep_rtol": 0.0})
        family, vals, extra = _deform(setup, field, family, more, designation, history)
        sweeps += extra
    path, gn = mp.newton_refine(field, path, tol=schedule.tol)
    c_value = mp.maupertuis_value(field, path)
    if history and c_value > history[-1]["c_value"] * (1 + 1e-9):
        log.info("critical value %.12g exceeds the deformed family maximum", c_value)
    idx = mp.morse_index(mp.maupertuis_hessian(field, path))
    degs = [sphere_degree(family, c) for c in setup.centres]
    history.append({"sweep": sweeps, "c_value": float(c_value), "event": "refined critical path"})
    return MinMaxResult(
        c_value,
        j,
        path,
        gn,
        idx,
        degs,
        path.min_distance(setup.centres).tolist(),
        history,
        sweeps,
        it,
        family,
    )


# ------------------------------------------------------------------ beta sweep


@dataclass
class BetaSweepResult:
    path: PathGrid
    minmax: MinMaxResult
    betas: list
    min_distances: list
    gradient_norm: float
    morse_index: int
    collision_free: bool
    polished: mp.PolishedSolution | None = None
    events: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "betas": self.betas,
            "events": self.events,
            "min_distances": self.min_distances,
            "gradient_norm": self.gradient_norm,
            "morse_index": self.morse_index,
            "collision_free": self.collision_free,
            "minmax": {k: v for k, v in self.minmax.to_dict().items() if k != "critical_path"},
            "path": self.path.to_dict(),
        }
        if self.polished is not None:
            p = self.polished
            out["polished"] = {
                "omega": p.omega,
                "ode_residual": p.ode_residual,
                "energy_residual": p.energy_residual,
                "endpoint_error": p.endpoint_error,
                "distance_to_path": p.distance_to_path,
                "iterations": p.iterations,
            }
        return out


def _collision_trend(dists: np.ndarray, floor: float) -> bool:
    """True when the min centre distance keeps shrinking towards zero along the schedule."""
    if dists.size < 3:
        return bool(dists[-1] < floor)
    tail = dists[-3:]
    return bool(tail[-1] < floor or (np.all(np.diff(tail) < 0) and tail[-1] < 0.25 * dists[0]))


def _continue_beta(fieldf, path, beta_from, beta_to, tol, min_step=1e-4):
    """Newton continuation of a critical path in beta with step bisection."""
    b = beta_from
    step = beta_to - beta_from
    while b != beta_to:
        target = beta_to if abs(beta_to - b) <= abs(step) else b + step
        try:
            path, _ = mp.newton_refine(fieldf(target), path, tol=tol)
        except (ConvergenceError, SingularPathError):
            step *= 0.5
            if abs(step) < min_step:
                raise
            continue
        b = target
        step *= 1.5
    return path, b


def branch_switch(field: Field, path: PathGrid, tol: float = 1e-8, scales=(0.05, 0.2, 0.5)) -> tuple[PathGrid, int, str]:
    """Leave a critical path of index >= 2 for a nearby one of index <= 1.

    A second negative eigenvalue appears where the branch has passed a
    pitchfork (for instance out of a symmetry plane); the bifurcating
    critical points lie along the extra negative modes and sit below it.
    Returns the lowest index <= 1 critical path found, its index and a note;
    the input is returned unchanged when none is found.
    """
    ev, V = np.linalg.eigh(mp.maupertuis_hessian(field, path))
    idx0 = mp.morse_index(np.diag(ev))
    value = mp.maupertuis_value(field, path)
    best = None
    for k in range(1, idx0):
        for eps in scales:
            for sign in (1.0, -1.0):
                trial = path.with_free(path.free + sign * eps * math.sqrt(path.n) * V[:, k])
                try:
                    q, _ = mp.newton_refine(field, trial, tol=tol)
                except (ConvergenceError, SingularPathError):
                    continue
                idx = mp.morse_index(mp.maupertuis_hessian(field, q))
                vq = mp.maupertuis_value(field, q)
                if idx <= 1 and np.max(np.abs(q.nodes - path.nodes)) > 1e-6 and (best is None or vq < best[1]):
                    best = (q, vq, idx)
            if best is not None:
                break
        if best is not None:
            break
    if best is None:
        return path, idx0, f"index {idx0}; no lower-index critical point along the extra negative modes"
    return best[0], best[2], f"index {idx0} -> {best[2]}; value {value:.12g} -> {best[1]:.12g}"


def beta_sweep(
    setup: ProblemSetup,
    consts: CalibratedConstants,
    R: float,
    xi_minus,
    xi_plus,
    beta_schedule=(1.0, 0.5, 0.25, 0.1, 0.0),
    n_family: int = 48,
    M: int = 24,
    n_final: int = 256,
    schedule: Schedule = Schedule(),
    designation: tuple[int, int] | None = None,
    warm_start: PathGrid | None = None,
    polish: bool = True,
) -> BetaSweepResult:
    """Min-max at the first beta, then continue the critical path as beta -> 0.

    The final beta must be 0; the path is prolonged to ``n_final`` segments,
    Newton-refined for M_0 and (optionally) polished into a true solution.
    """
    betas = [float(b) for b in beta_schedule]
    if not betas or betas[-1] != 0.0 or np.any(np.diff(betas) >= 0):
        raise PreconditionError("beta schedule must be strictly decreasing and end at 0")
    fieldf = lambda b: mp.PenalizedField(setup, mp.PenalizedPotentialParams(b, consts.delta_star))
    if warm_start is None:
        fam = initial_family(setup, consts, R, xi_minus, xi_plus, M=M, n=n_family, designation=designation)
        res = minmax_solve(setup, fieldf(betas[0]), fam, schedule, designation)
        path = res.critical_path
    else:
        path = warm_start.resample(n_family) if warm_start.n != n_family else warm_start
        path, gn = mp.newton_refine(fieldf(betas[0]), path, tol=schedule.tol)
        f0 = fieldf(betas[0])
        res = MinMaxResult(
            mp.maupertuis_value(f0, path), 0, path, gn, mp.morse_index(mp.maupertuis_hessian(f0, path)),
            [], path.min_distance(setup.centres).tolist(), [{"event": "warm start"}],
        )
    dists = [float(path.min_distance(setup.centres).min())]
    events = []
    current = betas[0]
    for b in betas[1:]:
        try:
            path, current = _continue_beta(fieldf, path, current, b, schedule.tol)
        except (ConvergenceError, SingularPathError) as exc:
            # the branch folds (a Hessian eigenvalue crosses zero): the min-max
            # level is carried by another critical point, so search again
            events.append({"beta": b, "event": "branch lost", "reason": str(exc)})
            fam = res.family
            if fam is None:
                fam = initial_family(setup, consts, R, xi_minus, xi_plus, M=M, n=n_family, designation=designation)
            res = minmax_solve(setup, fieldf(b), fam, schedule, designation)
            path, current = res.critical_path, b
        dists.append(float(path.min_distance(setup.centres).min()))
    f0 = fieldf(0.0)
    if path.n != n_final:
        path = path.resample(n_final)
        path, _ = mp.newton_refine(f0, path, tol=schedule.tol)
    idx = mp.morse_index(mp.maupertuis_hessian(f0, path))
    if idx > 1:
        path, idx, why = branch_switch(f0, path, tol=schedule.tol)
        events.append({"beta": 0.0, "event": "branch switch", "reason": why})
    gn = float(np.linalg.norm(mp.maupertuis_gradient(f0, path)))
    dists.append(float(path.min_distance(setup.centres).min()))
    arr = np.array(dists)
    if _collision_trend(arr, 1e-3 * consts.delta_star):
        raise CollisionTrendError(
            "critical paths approach a centre as beta -> 0; for alpha > 1 this contradicts the index bound, "
            "for alpha = 1 the limit is a collision-reflection solution"
        )
    polished = mp.polish(setup, path) if polish else None
    return BetaSweepResult(path, res, betas, dists, gn, idx, True, polished, events)


# ------------------------------------------------------------------ level bounds


def f_k_quadrature(setup: ProblemSetup, consts: CalibratedConstants, R: float) -> float:
    """F_K(R) = int_K^R sqrt(m/(alpha r^alpha) + H) dr."""
    K = consts.K_radius
    if R < K:
        raise PreconditionError("R must be at least K")
    m, a, H = setup.m_total, setup.alpha, setup.energy_H
    val, _ = quad(lambda r: math.sqrt(m / (a * r**a) + H), K, R, epsabs=1e-13, epsrel=1e-12, limit=200)
    return float(val)


def f_k_closed_form_alpha1(m: float, H: float, K: float, R: float) -> float:
    """Antiderivative of sqrt(m/r + H) evaluated between K and R."""

    def F(r):
        return math.sqrt(r * (m + H * r)) + m / math.sqrt(H) * math.log(math.sqrt(H * r) + math.sqrt(m + H * r))

    return F(R) - F(K)


@dataclass(frozen=True)
class LevelBounds:
    R: float
    action: float
    lower: float
    lower_ok: bool
    f_k: float
    slack: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def level_bounds_check(setup: ProblemSetup, consts: CalibratedConstants, action_value: float, R: float) -> LevelBounds:
    lower = 2 * math.sqrt(2 * setup.energy_H) * (R - consts.K_radius)
    fk = f_k_quadrature(setup, consts, R)
    return LevelBounds(R, action_value, lower, bool(action_value >= lower), fk, action_value - 2 * math.sqrt(2) * fk)


def slack_variation(bounds: list[LevelBounds]) -> float:
    """Relative spread (max - min)/max|.| of the upper-bound slack over the top half of the grid."""
    s = np.array([b.slack for b in sorted(bounds, key=lambda b: b.R)])
    top = s[len(s) // 2 :]
    return float((top.max() - top.min()) / np.max(np.abs(top)))


def maupertuis_lower_bound(setup: ProblemSetup, consts: CalibratedConstants, path: PathGrid) -> dict:
    """For a path entering B_K: sqrt(M_0) >= 2 sqrt(H) (R - K)."""
    r = np.linalg.norm(path.nodes, axis=1)
    enters = bool(r.min() <= consts.K_radius)
    val = math.sqrt(mp.maupertuis_value(mp.PenalizedField(setup), path))
    bound = 2 * math.sqrt(setup.energy_H) * (path.R - consts.K_radius)
    return {"enters_BK": enters, "sqrt_M0": val, "bound": bound, "holds": (not enters) or val >= bound - 1e-8}


def meets_centre_segment(family: LoopFamily, a, b, tol: float = 1e-9) -> bool:
    """True if some member polygon comes within ``tol`` of the segment [a, b]
    or two consecutive members are on opposite sides of it."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dists = []
    for p in family.members():
        dists.append(_segment_polyline_distance(a, b, p.nodes))
    dists = np.array(dists)
    if dists.min() <= tol:
        return True
    # a continuous family must sweep across the segment if degrees differ
    return bool(dists.min() <= family.gaps().max())


def _segment_polyline_distance(a, b, nodes) -> float:
    best = math.inf
    for p0, p1 in zip(nodes[:-1], nodes[1:]):
        best = min(best, _segment_segment_distance(a, b, p0, p1))
    return best


def _segment_segment_distance(p, q, r, s) -> float:
    d1, d2, w = q - p, s - r, p - r
    a, b, c, d, e = d1 @ d1, d1 @ d2, d2 @ d2, d1 @ w, d2 @ w
    den = a * c - b * b
    sc = 0.0 if den < 1e-300 else np.clip((b * e - c * d) / den, 0, 1)
    tc = np.clip((b * sc + e) / c, 0, 1) if c > 0 else 0.0
    sc = np.clip((b * tc - d) / a, 0, 1) if a > 0 else 0.0
    return float(np.linalg.norm(p + sc * d1 - r - tc * d2))

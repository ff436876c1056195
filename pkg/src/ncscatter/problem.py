"""Generalized N-centre potential, its splittings and constant calibration.

The potential is ``V(x) = sum_i m_i / (alpha |x - c_i|^alpha)`` so that the
equation of motion ``x'' = grad V(x)`` has the force
``-sum_i m_i (x - c_i) / |x - c_i|^(alpha + 2)``.  All evaluators accept a
single point of shape ``(3,)`` or a stack of shape ``(..., 3)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CalibrationError, ConfigError, PreconditionError, SingularInputError

SINGULAR_RADIUS = 1e-12


@dataclass(frozen=True)
class ProblemSetup:
    centres: np.ndarray
    masses: np.ndarray
    alpha: float
    energy_H: float

    def __post_init__(self):
        centres = np.array(self.centres, dtype=float).reshape(-1, 3)
        masses = np.array(self.masses, dtype=float).reshape(-1)
        if centres.shape[0] < 1:
            raise ConfigError("at least one centre is required")
        if masses.shape[0] != centres.shape[0]:
            raise ConfigError("centres and masses differ in length")
        if np.any(masses <= 0) or not np.all(np.isfinite(masses)):
            raise ConfigError("masses must be positive")
        if not 1.0 <= self.alpha < 2.0:
            raise ConfigError(f"alpha must lie in [1, 2), got {self.alpha}")
        if not self.energy_H > 0:
            raise ConfigError("energy H must be positive")
        n = centres.shape[0]
        for i in range(n):
            for j in range(i + 1, n):
                if np.linalg.norm(centres[i] - centres[j]) <= SINGULAR_RADIUS:
                    raise ConfigError(f"centres {i} and {j} coincide")
        centres.setflags(write=False)
        masses.setflags(write=False)
        object.__setattr__(self, "centres", centres)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "energy_H", float(self.energy_H))

    @property
    def n_centres(self) -> int:
        return self.centres.shape[0]

    @property
    def m_total(self) -> float:
        return float(self.masses.sum())

    @property
    def Xi(self) -> float:
        return float(np.max(np.linalg.norm(self.centres, axis=1)))

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ProblemSetup":
        try:
            return cls(
                centres=doc["centres"],
                masses=doc["masses"],
                alpha=float(doc["alpha"]),
                energy_H=float(doc["H"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed problem document: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "H": self.energy_H,
            "centres": self.centres.tolist(),
            "masses": self.masses.tolist(),
        }


def load_setup(path: str | Path) -> ProblemSetup:
    with open(path, encoding="utf-8") as fh:
        return ProblemSetup.from_dict(json.load(fh))


def recentre(setup: ProblemSetup) -> ProblemSetup:
    """Translate the centres so that sum_i m_i c_i = 0."""
    shift = (setup.masses[:, None] * setup.centres).sum(axis=0) / setup.m_total
    centres = setup.centres - shift
    # second pass removes the O(eps) residue of the first subtraction
    shift = (setup.masses[:, None] * centres).sum(axis=0) / setup.m_total
    centres = centres - shift
    return ProblemSetup(centres, setup.masses, setup.alpha, setup.energy_H)


def _offsets(setup: ProblemSetup, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    d = x[..., None, :] - setup.centres
    r = np.linalg.norm(d, axis=-1)
    if np.any(r < SINGULAR_RADIUS):
        raise SingularInputError("evaluation point coincides with a centre")
    return d, r


def potential(setup: ProblemSetup, x) -> np.ndarray | float:
    _, r = _offsets(setup, x)
    val = (setup.masses / (setup.alpha * r**setup.alpha)).sum(axis=-1)
    return float(val) if np.ndim(val) == 0 else val


def gradient(setup: ProblemSetup, x) -> np.ndarray:
    d, r = _offsets(setup, x)
    coef = setup.masses / r ** (setup.alpha + 2)
    return -(coef[..., None] * d).sum(axis=-2)


def hessian(setup: ProblemSetup, x) -> np.ndarray:
    d, r = _offsets(setup, x)
    a = setup.alpha
    m = setup.masses
    eye = np.eye(3)
    c1 = -m / r ** (a + 2)
    c2 = m * (a + 2) / r ** (a + 4)
    out = c1[..., None, None] * eye + c2[..., None, None] * d[..., :, None] * d[..., None, :]
    return out.sum(axis=-3)


def _check_index(setup: ProblemSetup, i: int) -> None:
    if not 0 <= i < setup.n_centres:
        raise IndexError(f"centre index {i} out of range for N={setup.n_centres}")


def split_singular(setup: ProblemSetup, i: int, x) -> tuple[Any, Any]:
    """Return ``(m_i/(alpha|x-c_i|^alpha), Phi_i(x))``.

    ``Phi_i`` collects the other centres and is finite at ``x = c_i``; the
    Kepler part is ``inf`` there.
    """
    _check_index(setup, i)
    x = np.asarray(x, dtype=float)
    d = x[..., None, :] - setup.centres
    r = np.linalg.norm(d, axis=-1)
    others = np.arange(setup.n_centres) != i
    if np.any(r[..., others] < SINGULAR_RADIUS):
        raise SingularInputError("evaluation point coincides with another centre")
    a = setup.alpha
    with np.errstate(divide="ignore"):
        kepler = setup.masses[i] / (a * r[..., i] ** a)
    phi = (setup.masses[others] / (a * r[..., others] ** a)).sum(axis=-1)
    if np.ndim(kepler) == 0:
        return float(kepler), float(phi)
    return kepler, phi


def phi_gradient(setup: ProblemSetup, i: int, x) -> np.ndarray:
    _check_index(setup, i)
    x = np.asarray(x, dtype=float)
    others = np.arange(setup.n_centres) != i
    d = x[..., None, :] - setup.centres[others]
    r = np.linalg.norm(d, axis=-1)
    coef = setup.masses[others] / r ** (setup.alpha + 2)
    return -(coef[..., None] * d).sum(axis=-2)


def _inv_power_ratio_m1(x: np.ndarray, c: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """``|x - c|^-p / |x|^-p - 1`` without cancellation, and ``|x|``."""
    rx2 = (x * x).sum(axis=-1)
    q = ((c * c).sum() - 2.0 * (x * c).sum(axis=-1)) / rx2
    return np.expm1(-0.5 * p * np.log1p(q)), np.sqrt(rx2)


def split_infinity(setup: ProblemSetup, x) -> tuple[Any, Any]:
    """Return ``(m/(alpha|x|^alpha), W(x))`` with W computed cancellation-free."""
    x = np.asarray(x, dtype=float)
    _offsets(setup, x)
    a = setup.alpha
    rx = np.linalg.norm(x, axis=-1)
    if np.any(rx < SINGULAR_RADIUS):
        raise SingularInputError("split at infinity is undefined at the origin")
    kepler = setup.m_total / (a * rx**a)
    w = np.zeros_like(rx)
    for ci, mi in zip(setup.centres, setup.masses):
        ratio_m1, _ = _inv_power_ratio_m1(x, ci, a)
        w = w + mi / (a * rx**a) * ratio_m1
    if np.ndim(kepler) == 0:
        return float(kepler), float(w)
    return kepler, w


def w_gradient(setup: ProblemSetup, x) -> np.ndarray:
    """Gradient of W = V - m/(alpha|x|^alpha), cancellation-free."""
    x = np.asarray(x, dtype=float)
    a = setup.alpha
    out = np.zeros(x.shape, dtype=float)
    for ci, mi in zip(setup.centres, setup.masses):
        ratio_m1, rx = _inv_power_ratio_m1(x, ci, a + 2)
        d = x - ci
        rd = np.linalg.norm(d, axis=-1)
        # -(m_i d/|d|^(a+2) - m_i x/|x|^(a+2))
        term = x * (ratio_m1 / rx ** (a + 2))[..., None] - ci * (1.0 / rd ** (a + 2))[..., None]
        out = out - mi * term
    return out


# ---------------------------------------------------------------- calibration


@dataclass(frozen=True)
class CalibratedConstants:
    Xi: float
    m_total: float
    delta_star: float
    K_radius: float
    C_minus: float
    C_plus: float
    verification_grid: dict = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "Xi": self.Xi,
            "m_total": self.m_total,
            "delta_star": self.delta_star,
            "K_radius": self.K_radius,
            "C_minus": self.C_minus,
            "C_plus": self.C_plus,
            "verification_grid": self.verification_grid,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "CalibratedConstants":
        return cls(
            Xi=float(doc["Xi"]),
            m_total=float(doc["m_total"]),
            delta_star=float(doc["delta_star"]),
            K_radius=float(doc["K_radius"]),
            C_minus=float(doc["C_minus"]),
            C_plus=float(doc["C_plus"]),
            verification_grid=dict(doc.get("verification_grid", {})),
        )


def sphere_directions(n: int) -> np.ndarray:
    """Fibonacci lattice on S^2 plus the six coordinate axes."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = k * math.pi * (3.0 - math.sqrt(5.0))
    rho = np.sqrt(1.0 - z * z)
    fib = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    axes = np.vstack([np.eye(3), -np.eye(3)])
    return np.vstack([fib, axes])


def _directions(setup: ProblemSetup, n_angular: int) -> np.ndarray:
    dirs = [sphere_directions(n_angular)]
    for c in setup.centres:
        nc = np.linalg.norm(c)
        if nc > 0:
            dirs.append(np.vstack([c / nc, -c / nc]))
    for i in range(setup.n_centres):
        for j in range(setup.n_centres):
            if i != j:
                e = setup.centres[j] - setup.centres[i]
                dirs.append((e / np.linalg.norm(e))[None, :])
    return np.vstack(dirs)


def _ball_margins(setup: ProblemSetup, delta: float, n_radial: int, n_angular: int):
    """Worst margins of the two near-centre inequalities inside each punctured ball."""
    a, H = setup.alpha, setup.energy_H
    dirs = _directions(setup, n_angular)
    rho = delta * np.arange(1, n_radial + 1) / n_radial
    worst2 = (math.inf, None)
    worst3 = (math.inf, None)
    for i, (ci, mi) in enumerate(zip(setup.centres, setup.masses)):
        pts = ci + rho[:, None, None] * dirs[None, :, :]
        d = pts - ci
        rd = np.linalg.norm(d, axis=-1)
        _, phi = split_singular(setup, i, pts)
        gphi = phi_gradient(setup, i, pts)
        sing = mi / (a * rd**a)
        lhs2 = (2 - a) * sing + 2 * phi + (gphi * d).sum(axis=-1)
        # V + H <= 3 m_i / (2 alpha |x - c_i|^alpha), scaled by the right-hand side
        rhs3 = 1.5 * sing
        margin3 = (rhs3 - (sing + phi + H)) / rhs3
        margin2 = lhs2 / sing
        k2 = np.unravel_index(np.argmin(margin2), margin2.shape)
        k3 = np.unravel_index(np.argmin(margin3), margin3.shape)
        if margin2[k2] < worst2[0]:
            worst2 = (float(margin2[k2]), pts[k2])
        if margin3[k3] < worst3[0]:
            worst3 = (float(margin3[k3]), pts[k3])
    return worst2, worst3


def _shell_points(setup: ProblemSetup, K: float, K_outer: float, n_radial: int, n_angular: int):
    radii = np.geomspace(K, K_outer, n_radial)
    dirs = _directions(setup, n_angular)
    return radii[:, None, None] * dirs[None, :, :]


def _shell_quantities(setup: ProblemSetup, pts: np.ndarray) -> dict[str, np.ndarray]:
    a, H, m = setup.alpha, setup.energy_H, setup.m_total
    r = np.linalg.norm(pts, axis=-1)
    kep, w = split_infinity(setup, pts)
    gw = w_gradient(setup, pts)
    v = kep + w
    k2 = (2 - a) * m / (a * r**a) + 2 * w + (gw * pts).sum(axis=-1)
    return {
        "r": r,
        "K1_W": np.abs(w) * r ** (a + 2),
        "K1_gradW": np.linalg.norm(gw, axis=-1) * r ** (a + 3),
        "K2": k2 / (m / (a * r**a)),
        "K3": v * r**a,
        "K4": np.abs(np.sqrt(v + H) - np.sqrt(kep + H)) * r ** (a + 2),
    }


def verify_constants(
    setup: ProblemSetup,
    consts: CalibratedConstants,
    n_radial: int = 64,
    n_angular: int = 128,
    K_outer: float | None = None,
) -> dict[str, Any]:
    """Re-check every calibrated inequality family on a given grid.

    Returns per-family worst margins (non-negative means satisfied) and the
    overall verdict under ``"passed"``.
    """
    d = consts.delta_star
    report: dict[str, Any] = {"n_radial": n_radial, "n_angular": n_angular}
    geo = _geometric_delta_bound(setup)
    report["deltastar1"] = float(geo - d)
    (m2, _), (m3, _) = _ball_margins(setup, d, n_radial, n_angular)
    report["deltastar2"] = m2
    report["deltastar3"] = m3
    K = consts.K_radius
    outer = K_outer if K_outer is not None else consts.verification_grid.get("K_outer", 10 * K)
    q = _shell_quantities(setup, _shell_points(setup, K, outer, n_radial, n_angular))
    Cp, Cm = consts.C_plus, consts.C_minus
    report["K1"] = float(min(Cp - q["K1_W"].max(), Cp - q["K1_gradW"].max()))
    report["K2"] = float(q["K2"].min())
    report["K3"] = float(min(q["K3"].min() - Cm, Cp - q["K3"].max()))
    report["K4"] = float(Cp - q["K4"].max())
    report["K_gt_Xi_plus_1"] = float(K - (setup.Xi + 1))
    tol = 1e-10
    report["passed"] = all(
        report[k] >= -tol for k in ("deltastar1", "deltastar2", "deltastar3", "K1", "K2", "K3", "K4")
    ) and report["K_gt_Xi_plus_1"] > 0
    return report


def _geometric_delta_bound(setup: ProblemSetup) -> float:
    Xi = setup.Xi
    bound = min(Xi + 1 - float(np.linalg.norm(c)) for c in setup.centres)
    n = setup.n_centres
    for i in range(n):
        for j in range(i + 1, n):
            bound = min(bound, 0.5 * float(np.linalg.norm(setup.centres[i] - setup.centres[j])))
    return bound


def calibrate(
    setup: ProblemSetup,
    sample_density: tuple[int, int] = (64, 128),
    K_cap: float | None = None,
    safety: float = 1.05,
    bisection_steps: int = 40,
) -> CalibratedConstants:
    """Sample-based construction of delta*, K, C_- and C_+.

    delta* is the largest value (40-step bisection) for which the two
    near-centre inequalities hold on the punctured-ball sample; K is the
    smallest radius above Xi + 1 for which the far-field convexity
    inequality holds on shells out to ``10 * K_cap``.  C_+ takes the sampled
    supremum of the potential bound exactly and inflates the decay bounds on
    W and grad W by ``safety``; C_- is the sampled infimum.
    """
    n_radial, n_angular = sample_density
    com = (setup.masses[:, None] * setup.centres).sum(axis=0)
    if np.linalg.norm(com) > 1e-12 * max(1.0, setup.Xi) * setup.m_total:
        raise PreconditionError("setup is not recentred; call recentre() first")
    Xi = setup.Xi
    if K_cap is None:
        K_cap = 10.0 * (Xi + 1.0)
    if K_cap <= Xi + 1.0:
        raise CalibrationError(
            f"K_cap={K_cap} leaves no admissible K > Xi + 1 = {Xi + 1}",
            inequality="K>Xi+1",
            witness=[K_cap, 0.0, 0.0],
        )

    def delta_ok(delta: float):
        (m2, w2), (m3, w3) = _ball_margins(setup, delta, n_radial, n_angular)
        if m2 < 0:
            return False, ("deltastar2", w2)
        if m3 < 0:
            return False, ("deltastar3", w3)
        return True, None

    hi = _geometric_delta_bound(setup)
    ok, why = delta_ok(hi)
    if ok:
        delta_star = hi
    else:
        lo = hi * 2.0**-bisection_steps
        ok_lo, why_lo = delta_ok(lo)
        if not ok_lo:
            raise CalibrationError(
                f"no delta* validates ({why_lo[0]} fails)", inequality=why_lo[0], witness=why_lo[1]
            )
        for _ in range(bisection_steps):
            mid = 0.5 * (lo + hi)
            if delta_ok(mid)[0]:
                lo = mid
            else:
                hi = mid
        delta_star = lo

    K_outer = 10.0 * K_cap

    def K_ok(K: float):
        q = _shell_quantities(setup, _shell_points(setup, K, K_outer, n_radial, n_angular))
        k = np.unravel_index(np.argmin(q["K2"]), q["K2"].shape)
        if q["K2"][k] < 0:
            pts = _shell_points(setup, K, K_outer, n_radial, n_angular)
            return False, ("K2", pts[k])
        return True, None

    ok, why = K_ok(K_cap)
    if not ok:
        raise CalibrationError(
            f"no K <= K_cap={K_cap} validates ({why[0]} fails)", inequality=why[0], witness=why[1]
        )
    lo, hi = Xi + 1.0, K_cap
    for _ in range(bisection_steps):
        mid = 0.5 * (lo + hi)
        if K_ok(mid)[0]:
            hi = mid
        else:
            lo = mid
    K = hi

    q = _shell_quantities(setup, _shell_points(setup, K, K_outer, n_radial, n_angular))
    C_plus = max(
        float(q["K3"].max()),
        safety * float(q["K1_W"].max()),
        safety * float(q["K1_gradW"].max()),
        safety * float(q["K4"].max()),
    )
    C_minus = float(q["K3"].min())
    grid = {
        "n_radial": n_radial,
        "n_angular": n_angular,
        "n_directions": int(_directions(setup, n_angular).shape[0]),
        "K_outer": K_outer,
        "K_cap": K_cap,
        "safety": safety,
        "bisection_steps": bisection_steps,
    }
    consts = CalibratedConstants(
        Xi=Xi,
        m_total=setup.m_total,
        delta_star=float(delta_star),
        K_radius=float(K),
        C_minus=C_minus,
        C_plus=C_plus,
        verification_grid=grid,
    )
    report = verify_constants(setup, consts, n_radial, n_angular, K_outer)
    grid["margins"] = {k: v for k, v in report.items() if k not in ("n_radial", "n_angular")}
    return consts

"""Independent oracles shared by the module tests and the acceptance suite."""

import math

import numpy as np

from ncscatter import maupertuis as mp
from ncscatter import minmax as mm

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])
XM, XP = E2, (E1 + E2) / math.sqrt(2)


def random_path(rng, R, n, centres, amp=1.0, clearance=0.3):
    """Straight chord plus a smooth random bump, kept away from the centres."""
    xm = rng.normal(size=3)
    xm /= np.linalg.norm(xm)
    xp = rng.normal(size=3)
    xp /= np.linalg.norm(xp)
    base = mp.PathGrid.straight(R, xm, xp, n)
    t = base.times
    while True:
        c = rng.normal(size=(3, 3)) * amp
        bump = (1 - t**2)[:, None] * (c[0] + np.outer(t, c[1]) + np.outer(t**2, c[2]))
        path = base.with_nodes(base.nodes + bump)
        if len(centres) == 0 or path.min_distance(centres).min() > clearance:
            return path


def fd_gradient(field, path, h=1e-6):
    z = path.free.copy()
    g = np.empty_like(z)
    for k in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[k] += h
        zm[k] -= h
        g[k] = (mp.maupertuis_value(field, path.with_free(zp)) - mp.maupertuis_value(field, path.with_free(zm))) / (2 * h)
    return g


def fd_hessian(field, path, h=1e-6):
    z = path.free.copy()
    cols = []
    for k in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[k] += h
        zm[k] -= h
        gp = mp.maupertuis_gradient(field, path.with_free(zp)).ravel()
        gm = mp.maupertuis_gradient(field, path.with_free(zm)).ravel()
        cols.append((gp - gm) / (2 * h))
    return np.array(cols).T


def ray_degree(family, centre, seed=0):
    """Signed count of crossings of a random ray from ``centre`` with the
    triangulated image surface (flat triangles, Moller-Trumbore)."""
    X = family.nodes
    Xn = np.roll(X, -1, axis=0)
    a, b, c, d = X[:, :-1], Xn[:, :-1], Xn[:, 1:], X[:, 1:]
    tri = np.concatenate(
        [np.stack([a, b, c], axis=2).reshape(-1, 3, 3), np.stack([a, c, d], axis=2).reshape(-1, 3, 3)]
    )
    rng = np.random.default_rng(seed)
    ray = rng.normal(size=3)
    ray /= np.linalg.norm(ray)
    o = np.asarray(centre, dtype=float)
    p0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    pv = np.cross(ray, e2)
    det = (e1 * pv).sum(axis=1)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1 / np.where(ok, det, 1), 0)
    tv = o - p0
    u = (tv * pv).sum(axis=1) * inv
    qv = np.cross(tv, e1)
    v = (qv @ ray) * inv
    t = (qv * e2).sum(axis=1) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    normal = np.cross(e1, e2)
    return int(np.sign(normal[hit] @ ray).sum())


def detour_family(R, xm, xp, centre, rho, winding=1, M=24, n=60, tilt=0.0):
    """Members run to a small sphere about ``centre``, along a meridian of
    longitude 2 pi winding j / M, and on to R xp."""
    xm, xp = np.asarray(xm, float), np.asarray(xp, float)
    c = np.asarray(centre, float)
    e = xm - xp
    e /= np.linalg.norm(e)
    f = np.cross(e, [0.3, 0.1, 1.0])
    f /= np.linalg.norm(f)
    g = np.cross(e, f)
    k = n // 3
    theta = np.linspace(0, math.pi, k + 1)
    nodes = []
    for j in range(M):
        phi = 2 * math.pi * winding * (j + 0.5) / M + tilt
        side = math.cos(phi) * f + math.sin(phi) * g
        arc = c + rho * (np.cos(theta)[:, None] * e + np.sin(theta)[:, None] * side)
        lead = np.linspace(R * xm, arc[0], k + 1)[:-1]
        tail = np.linspace(arc[-1], R * xp, n - 2 * k + 1)[1:]
        nodes.append(np.vstack([lead, arc, tail]))
    return mm.LoopFamily(R, xm, xp, np.array(nodes))


def oracle_families(setup, consts):
    """Ten loop families with known winding about the listed points."""
    R = 2 * consts.K_radius
    c0, c1 = setup.centres
    base = mm.initial_family(setup, consts, R, XM, XP, M=24, n=48)
    rng = np.random.default_rng(4)
    t = np.linspace(-1, 1, base.n + 1)
    noise = 0.05 * (1 - t**2)[None, :, None] * rng.normal(size=(base.M, 1, 3))
    straight = mp.PathGrid.straight(R, XM, XP, 48)
    return [
        ("initial", base, [c0, c1]),
        ("initial, other designation", mm.initial_family(setup, consts, R, XM, XP, designation=(1, 0)), [c0, c1]),
        ("reversed", base.with_nodes(base.nodes[::-1]), [c0, c1]),
        ("perturbed", base.with_nodes(base.nodes + noise), [c0, c1]),
        ("constant", mm.LoopFamily.constant(straight, 12), [c0, c1]),
        ("winding 2", detour_family(R, XM, XP, c0, 0.4, winding=2, M=40), [c0, c1]),
        ("winding -1", detour_family(R, XM, XP, c1, 0.4, winding=-1), [c0, c1]),
        ("winding 3", detour_family(R, XM, XP, [0.0, 0.5, 0.2], 1.5, winding=3, M=60, n=90), [c0, c1, [0.0, 0.5, 0.2]]),
        ("far detour", detour_family(R, XM, XP, [0.0, 3.0, 0.0], 0.3, tilt=0.4), [c0, c1, [0.0, 3.1, 0.05]]),
        ("wide sphere", detour_family(R, -E1, E1 + 0.0, [0.0, 0.0, 0.0], 2.0, M=32), [c0, c1, [0.0, 0.3, -0.4]]),
    ]

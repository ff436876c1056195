"""Command-line front end.

    ncscatter <command> --config <path> --out <dir> [--workers N] [--seed S] [--figures]

Every successful command writes ``manifest.json`` naming its artifacts.
Failures print a JSON error document on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import dynamics
from . import maupertuis as mp
from . import minmax as mm
from . import problem
from . import regularized as rg
from . import scattering as sc
from .errors import ConfigError, NCScatterError

log = logging.getLogger("ncscatter")

COMMANDS = ("calibrate", "integrate", "bolza", "scatter", "verify-appendix", "verify-estimates")
EXIT_CODES = {"config": 2, "calibration": 3, "integration": 4, "optimization": 5, "diagnostics-failed": 6}

# ------------------------------------------------------------------ JSON


_FLOAT_TOKEN = re.compile(r'"@f:([^"]*)"')


def _encode(obj):
    """Replace floats by tokens carrying their 17-digit representation."""
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "@f:NaN"
        if math.isinf(v):
            return "@f:" + ("Infinity" if v > 0 else "-Infinity")
        return "@f:" + format(v, ".17g")
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return _encode(obj.to_dict())
    if hasattr(obj, "__dict__"):
        return _encode(vars(obj))
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    """JSON with every float written at 17 significant digits."""
    text = json.dumps(_encode(obj), indent=2, sort_keys=True)
    return _FLOAT_TOKEN.sub(lambda m: m.group(1), text)


def write_json(path: Path, obj) -> None:
    path.write_text(dumps(obj) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ config


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    return sec


def _positive(value, name: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a number") from exc
    if not v > 0 or not math.isfinite(v):
        raise ConfigError(f"{name} must be positive and finite")
    return v


def _vector(value, name: str) -> np.ndarray:
    try:
        v = np.asarray(value, dtype=float).reshape(3)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a 3-vector") from exc
    if not np.all(np.isfinite(v)) or np.linalg.norm(v) == 0:
        raise ConfigError(f"{name} must be a finite nonzero 3-vector")
    return v


def load_config(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    doc = cfg.get("problem", cfg.get("setup"))
    if not isinstance(doc, dict):
        raise ConfigError("config needs a 'problem' object")
    cfg["_setup"] = problem.ProblemSetup.from_dict(doc)
    cfg["_dir"] = Path(path).resolve().parent
    for key, sec in cfg.items():
        if isinstance(sec, dict) and "tolerances" in sec:
            for name, val in sec["tolerances"].items():
                _positive(val, f"{key}.tolerances.{name}")
    return cfg


# ------------------------------------------------------------------ commands


def _setup_and_constants(cfg: dict) -> tuple[problem.ProblemSetup, problem.CalibratedConstants, dict]:
    setup = problem.recentre(cfg["_setup"])
    cal = _section(cfg, "calibration")
    density = tuple(int(v) for v in cal.get("sample_density", (64, 128)))
    if len(density) != 2 or min(density) < 2:
        raise ConfigError("calibration.sample_density must be two integers >= 2")
    K_cap = cal.get("K_cap")
    consts = problem.calibrate(
        setup,
        sample_density=density,
        K_cap=None if K_cap is None else _positive(K_cap, "calibration.K_cap"),
        safety=_positive(cal.get("safety", 1.05), "calibration.safety"),
    )
    return setup, consts, {"sample_density": list(density)}


def cmd_calibrate(cfg, out: Path, args) -> dict:
    setup, consts, info = _setup_and_constants(cfg)
    report = problem.verify_constants(setup, consts, *info["sample_density"])
    write_json(out / "constants.json", {"problem": setup.to_dict(), "constants": consts.to_dict(), "verification": report})
    return {"constants.json": "calibrated constants and verification margins"}


def _integration_job(payload):
    setup, consts, x, v, span, tol = payload
    st = dynamics.State(span[0], x, v)
    try:
        traj = dynamics.integrate(setup, st, span, tol=tol, consts=consts)
        status = "ok"
    except NCScatterError as exc:
        traj = getattr(exc, "partial", None)
        if traj is None:
            raise
        status = f"stopped: {exc}"
    return traj, status


def _pool_map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def cmd_integrate(cfg, out: Path, args) -> dict:
    setup, consts, _ = _setup_and_constants(cfg)
    sec = _section(cfg, "integration")
    tol = _positive(sec.get("tol", 1e-8), "integration.tol")
    span = sec.get("t_span", [0.0, 20.0 * consts.K_radius])
    if len(span) != 2 or float(span[0]) == float(span[1]):
        raise ConfigError("integration.t_span must be two distinct times")
    span = (float(span[0]), float(span[1]))
    states = []
    for k, item in enumerate(sec.get("initial", [])):
        x = _vector(item.get("x"), f"integration.initial[{k}].x")
        if "v" in item:
            states.append(dynamics.State(span[0], x, _vector(item["v"], f"integration.initial[{k}].v")))
        else:
            states.append(dynamics.state_on_shell(setup, x, _vector(item.get("direction"), f"initial[{k}].direction"), span[0]))
    n_random = int(sec.get("random", 0))
    if n_random:
        rng = np.random.default_rng(args.seed)
        states += dynamics.random_escape_states(setup, consts, rng, n_random)
    if not states:
        raise ConfigError("integration needs 'initial' states or a positive 'random' count")
    jobs = [(setup, consts, s.x, s.v, span, tol) for s in states]
    results = _pool_map(_integration_job, jobs, args.workers)
    artifacts, rows = {}, []
    for k, (traj, status) in enumerate(results):
        name = f"trajectory_{k:03d}.csv"
        dynamics.write_trajectory_csv(traj, out / name)
        artifacts[name] = "trajectory samples"
        row = {"index": k, "status": status, "t_end": traj.t_end, "events": [vars(e) for e in traj.events]}
        try:
            row["monitors"] = dynamics.monitor_suite(traj, consts)
        except NCScatterError as exc:
            row["monitors"] = {"passed": False, "error": str(exc)}
        rows.append(row)
        if args.figures:
            from . import plotting

            fig = plotting.trajectory_figure(traj, setup, out / f"trajectory_{k:03d}.png", consts.K_radius)
            artifacts[Path(fig).name] = "figure"
    write_json(out / "monitors.json", {"constants": consts.to_dict(), "trajectories": rows})
    artifacts["monitors.json"] = "per-trajectory monitor reports"
    return artifacts


def _bolza_params(sec: dict, consts) -> dict:
    K = consts.K_radius
    R = sec.get("R")
    R = K * _positive(sec.get("R_over_K", 2.0), "R_over_K") if R is None else _positive(R, "R")
    betas = [float(b) for b in sec.get("beta_schedule", (1.0, 0.5, 0.25, 0.1, 0.0))]
    tol = _section(sec, "tolerances").get("gradient", 1e-8)
    return {
        "R": R,
        "xi_minus": _vector(sec.get("xi_minus", [0.0, 1.0, 0.0]), "xi_minus"),
        "xi_plus": _vector(sec.get("xi_plus", [1.0, 1.0, 0.0]), "xi_plus"),
        "n": int(sec.get("n", 256)),
        "M": int(sec.get("M", 24)),
        "n_family": int(sec.get("n_family", 48)),
        "betas": betas,
        "schedule": mm.Schedule(tol=float(tol)),
    }


def cmd_bolza(cfg, out: Path, args) -> dict:
    setup, consts, _ = _setup_and_constants(cfg)
    p = _bolza_params(_section(cfg, "bolza"), consts)
    xm, xp = sc.check_directions(p["xi_minus"], p["xi_plus"])
    res = sc.bolza_solve(setup, consts, p["R"], xm, xp, p["betas"], p["n_family"], p["M"], p["n"], p["schedule"])
    field0 = mp.PenalizedField(setup)
    traj = res.polished.trajectory
    A = mp.action(field0, traj)
    report = {
        "R": p["R"],
        "beta_sweep": res.to_dict(),
        "action": A,
        "identity_defect": mp.trajectory_identity_defect(field0, traj),
        "level_bounds": mm.level_bounds_check(setup, consts, A, p["R"]).to_dict(),
        "lower_bound_BK": mm.maupertuis_lower_bound(setup, consts, res.path),
    }
    write_json(out / "bolza.json", report)
    write_json(out / "minmax.json", res.minmax)
    res.path.to_json(out / "path.json")
    dynamics.write_trajectory_csv(traj, out / "solution.csv")
    artifacts = {
        "bolza.json": "beta sweep, identity and level-bound report",
        "minmax.json": "min-max result",
        "path.json": "critical path (beta = 0)",
        "solution.csv": "polished trajectory",
    }
    if args.figures:
        from . import plotting

        artifacts[Path(plotting.trajectory_figure(traj, setup, out / "solution.png", consts.K_radius)).name] = "figure"
        fig = plotting.beta_sweep_figure(res.betas, res.min_distances, out / "beta_sweep.png")
        artifacts[Path(fig).name] = "figure"
    return artifacts


def cmd_scatter(cfg, out: Path, args) -> dict:
    setup, consts, _ = _setup_and_constants(cfg)
    sec = _section(cfg, "scatter")
    p = _bolza_params(sec, consts)
    K = consts.K_radius
    if "R_grid" in sec:
        grid = [_positive(r, "R_grid") for r in sec["R_grid"]]
    else:
        grid = [K * _positive(r, "R_over_K") for r in sec.get("R_over_K_grid", (2, 4, 8, 16))]
    run = sc.scatter(
        setup,
        consts,
        p["xi_minus"],
        p["xi_plus"],
        grid,
        n=p["n"],
        M=p["M"],
        n_family=p["n_family"],
        beta_schedule=p["betas"],
        schedule=p["schedule"],
    )
    report = sc.scatter_report(run)
    write_json(out / "scatter_report.json", report)
    artifacts = {"scatter_report.json": "directions, trends, claims, blow-up residuals"}
    for k, rec in enumerate(run.records):
        name = f"trajectory_R{k}.csv"
        dynamics.write_trajectory_csv(rec.trajectory, out / name)
        artifacts[name] = f"translated solution at R={rec.R:.17g}"
    if args.figures:
        from . import plotting

        artifacts[Path(plotting.scatter_figure(run, out / "scatter.png")).name] = "figure"
    return artifacts


def _angle_job(payload):
    d, tol = payload
    return rg.measure_collision_angle(d, tol=tol)


def cmd_verify_appendix(cfg, out: Path, args) -> dict:
    sec = _section(cfg, "verify_appendix")
    d_values = [float(d) for d in sec.get("d_values", (0.0, 0.25, 0.5, 1.0))]
    if any(d < 0 for d in d_values):
        raise ConfigError("d_values must be non-negative")
    eps_values = [_positive(e, "eps_values") for e in sec.get("eps_values", (1e-3, 1e-4))]
    mu = _positive(sec.get("mu", 1.0), "mu")
    tol = _positive(_section(sec, "tolerances").get("angle", 1e-6), "tolerances.angle")
    rows = _pool_map(_angle_job, [(d, tol) for d in d_values], args.workers)
    with open(out / "collision_angles.csv", "w", encoding="utf-8") as fh:
        fh.write("d,predicted,measured,error,stabilization\n")
        for r in rows:
            vals = [r["d"], r["predicted"], r["measured"], r["measured"] - r["predicted"], r["stabilization"]]
            fh.write(",".join(format(float(v), ".17g") for v in vals) + "\n")

    # collision-reflection through the regularized flow, perturbed Kepler problem
    env = rg.quadratic_env(mu=mu)
    xi = np.array([0.0, 0.0, 1.0])
    z0 = rg.collision_state(env, xi)
    traj = rg.integrate_through_collision(env, z0, (-1.0, 1.0))
    rg.write_regularized_csv(traj, out / "reflection.csv")
    exponent = rg.remainder_exponent(traj)
    reflection = {
        "mu": mu,
        "xi": xi,
        "w0_consistent": rg.collision_w(mu),
        "w0_literal": rg.literal_collision_w(mu),
        "parity": rg.parity_defect(traj),
        "remainder_exponent": exponent,
        "reconstruction": rg.reconstruction_residuals(traj),
    }
    # penalized family converging to the limit flow at first order in eps
    env = rg.KeplerEnv(mu=mu)
    q0, qd0 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.2, 0.3])
    base = rg.integrate_penalized(env, 0.0, q0, qd0, (0.0, 1.0))
    pen = []
    for e in eps_values:
        sol = rg.integrate_penalized(env, e, q0, qd0, (0.0, 1.0))
        pen.append({"eps": e, "deviation": float(np.linalg.norm(sol.y[:3, -1] - base.y[:3, -1]))})
    write_json(out / "appendix.json", {"collision_angles": rows, "reflection": reflection, "penalized": pen})
    artifacts = {
        "collision_angles.csv": "measured vs predicted swept angle",
        "reflection.csv": "regularized trajectory through the collision",
        "appendix.json": "angles, parity, Sperling exponent, penalized convergence",
    }
    if args.figures:
        from . import plotting

        artifacts[Path(plotting.collision_angle_figure(rows, out / "collision_angles.png")).name] = "figure"
    return artifacts


def cmd_verify_estimates(cfg, out: Path, args) -> dict:
    setup, consts, _ = _setup_and_constants(cfg)
    sec = _section(cfg, "verify_estimates")
    items = sec.get("trajectories", [])
    if not items:
        raise ConfigError("verify_estimates.trajectories must list trajectory CSV files")
    slack = _positive(sec.get("slack", 1e-8), "verify_estimates.slack")
    rows = []
    for k, item in enumerate(items):
        item = {"csv": item} if isinstance(item, str) else item
        path = Path(item["csv"])
        path = path if path.is_absolute() else cfg["_dir"] / path
        try:
            traj = dynamics.read_trajectory_csv(path, setup)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read trajectory {path}: {exc}") from exc
        row = {"csv": str(item["csv"]), "monitors": dynamics.monitor_suite(traj, consts, slack)}
        if "R" in item:
            R = _positive(item["R"], "R")
            A = mp.action(mp.PenalizedField(setup), traj)
            row["level_bounds"] = mm.level_bounds_check(setup, consts, A, R).to_dict()
        rows.append(row)
    passed = all(r["monitors"]["passed"] and r.get("level_bounds", {}).get("lower_ok", True) for r in rows)
    write_json(out / "estimates.json", {"passed": passed, "trajectories": rows})
    return {"estimates.json": "inequality checks per trajectory"}


HANDLERS = {
    "calibrate": cmd_calibrate,
    "integrate": cmd_integrate,
    "bolza": cmd_bolza,
    "scatter": cmd_scatter,
    "verify-appendix": cmd_verify_appendix,
    "verify-estimates": cmd_verify_estimates,
}


# ------------------------------------------------------------------ entry


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ncscatter", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--figures", action="store_true", help="also render PNG figures")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=__version__)
    return ap


def _fail(exc: Exception) -> int:
    category = getattr(exc, "category", "diagnostics-failed")
    doc = {"status": "error", "category": category, "type": type(exc).__name__, "message": str(exc)}
    for attr in ("inequality", "witness", "centre_index"):
        if getattr(exc, attr, None) is not None:
            doc[attr] = getattr(exc, attr)
    sys.stderr.write(dumps(doc) + "\n")
    return EXIT_CODES.get(category, 1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        args.seed = seed
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        artifacts = HANDLERS[args.command](cfg, out, args)
    except NCScatterError as exc:
        return _fail(exc)
    manifest = {
        "command": args.command,
        "version": __version__,
        "seed": args.seed,
        "problem": cfg["_setup"].to_dict(),
        "artifacts": [{"file": k, "description": v} for k, v in sorted(artifacts.items())],
    }
    write_json(out / "manifest.json", manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: run orchestration, structured outputs, validation.

Subcommands: ``flow``, ``ode``, ``energy``, ``rescale``, ``validate``.
Runs are configured by a flat ``key = value`` text file (schema in the
README) plus repeatable ``--override KEY=VALUE`` flags, so one artifact
captures a reproducible run.

Exit codes: 0 clean termination (converged / horizon), 2 singular termination
(a scientific outcome, not a failure), 3 inconclusive termination
(dt collapse / step budget), 10 configuration errors, 11 IO errors,
12 solver failures.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from .diagnostics import FrameSink, classify_singularity, hypothesis_monitors
from .flow import (CSV_COLUMNS, FlowError, SteppingPolicy, TimeSeriesRecord,
                   run_flow)
from .geometry import (FlowParams, build_cache, gauss_bonnet_residual,
                       penalized_energy, willmore_bound_residual)
from .mesh import MeshError, TriangleMesh, load_mesh, make_icosphere, save_mesh
from .remesh import RemeshError
from .sphere_ode import (extinction_time_closed_form, integrate_sphere_ode,
                         theory_bounds)
from .validate import SUITES, run_suite

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SINGULAR = 2
EXIT_INCONCLUSIVE = 3
EXIT_CONFIG = 10
EXIT_IO = 11
EXIT_SOLVER = 12

_CLEAN_REASONS = ("converged", "horizon_reached")
_SINGULAR_REASONS = ("singular_area_collapse", "singular_curvature_blowup")


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything one flow run needs, parsed from a config file."""

    params: FlowParams
    policy: SteppingPolicy
    mesh_path: str | None = None
    icosphere_subdivisions: int | None = None
    icosphere_radius: float = 1.0
    icosphere_center: tuple = (0.0, 0.0, 0.0)
    kappa_target_fraction: float = 0.25
    kappa_radii: tuple | None = None     # None = automatic grid
    frames_enabled: bool = True
    out_dir: str = "out"
    seed: int = 0

    def build_mesh(self) -> TriangleMesh:
        if self.mesh_path is not None:
            return load_mesh(self.mesh_path)
        return make_icosphere(self.icosphere_subdivisions,
                              self.icosphere_radius, self.icosphere_center)


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        cut = line.find("#")
        if cut >= 0:
            line = line[:cut]
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def _parse_bool(value: str) -> bool:
    low = value.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def _parse_vec3(value: str) -> tuple:
    parts = [p for p in value.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise ConfigError(f"expected three numbers, got {value!r}")
    return tuple(float(p) for p in parts)


_POLICY_FIELD_TYPES = {f.name: f.type for f in fields(SteppingPolicy)}


def build_run_config(raw: dict, out_dir: str | None = None,
                     frames: str | None = None,
                     config_dir: str = ".") -> RunConfig:
    raw = dict(raw)

    def pop(key, default=None):
        return raw.pop(key, default)

    c0 = pop("params.c0")
    if c0 is None:
        raise ConfigError("params.c0 is required")
    params = FlowParams(
        float(c0),
        float(pop("params.lambda", 0.0)),
        allow_negative_lam=_parse_bool(pop("params.allow_negative_lambda", "false")),
    )

    policy_kwargs = {}
    for key in list(raw):
        if not key.startswith("policy."):
            continue
        name = key[len("policy."):]
        value = raw.pop(key)
        if name == "remesh_min_angle_deg":
            policy_kwargs["remesh_min_angle"] = np.deg2rad(float(value))
            continue
        if name not in _POLICY_FIELD_TYPES:
            raise ConfigError(f"unknown policy key {name!r}")
        if name == "mode":
            policy_kwargs[name] = value
        elif name in ("convergence_window", "max_steps", "record_every",
                      "checkpoint_every"):
            policy_kwargs[name] = int(value)
        elif name == "remesh_enabled":
            policy_kwargs[name] = _parse_bool(value)
        elif name == "checkpoint_dir":
            policy_kwargs[name] = value
        elif name == "gradient_tol":
            policy_kwargs[name] = None if value.lower() == "none" else float(value)
        elif name == "time_horizon":
            policy_kwargs[name] = np.inf if value.lower() in ("inf", "infinite") \
                else float(value)
        else:
            policy_kwargs[name] = float(value)
    policy = SteppingPolicy(**policy_kwargs)

    mesh_path = pop("mesh.path")
    subdiv = pop("mesh.icosphere.subdivisions")
    if (mesh_path is None) == (subdiv is None):
        raise ConfigError(
            "exactly one of mesh.path or mesh.icosphere.subdivisions is required"
        )
    if mesh_path is not None:
        if not os.path.isabs(mesh_path):
            mesh_path = os.path.join(config_dir, mesh_path)
        if not os.path.exists(mesh_path):
            raise ConfigError(f"mesh path not found: {mesh_path}")

    radii_raw = pop("diagnostics.kappa_radii", "auto")
    radii = None if radii_raw == "auto" else tuple(
        float(p) for p in radii_raw.replace(",", " ").split()
    )

    cfg = RunConfig(
        params=params,
        policy=policy,
        mesh_path=mesh_path,
        icosphere_subdivisions=None if subdiv is None else int(subdiv),
        icosphere_radius=float(pop("mesh.icosphere.radius", 1.0)),
        icosphere_center=_parse_vec3(pop("mesh.icosphere.center", "0,0,0")),
        kappa_target_fraction=float(pop("diagnostics.kappa_target_fraction", 0.25)),
        kappa_radii=radii,
        frames_enabled=_parse_bool(pop("diagnostics.frames", "on")),
        out_dir=pop("output.dir", "out"),
        seed=int(pop("seed", 0)),
    )
    if raw:
        raise ConfigError(f"unrecognized config keys: {sorted(raw)}")
    if out_dir is not None:
        cfg.out_dir = out_dir
    if frames is not None:
        cfg.frames_enabled = frames == "on"
    return cfg


def load_run_config(path: str, overrides=(), out_dir=None, frames=None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()
    return build_run_config(raw, out_dir=out_dir, frames=frames,
                            config_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


class CsvSink:
    """Streams TimeSeriesRecords to ``series.csv`` as they are emitted."""

    def __init__(self, path: str):
        self._fh = open(path, "w", encoding="utf-8")
        self._fh.write(",".join(CSV_COLUMNS) + "\n")

    def __call__(self, state, record: TimeSeriesRecord):
        row = [_fmt(getattr(record, col)) for col in CSV_COLUMNS]
        self._fh.write(",".join(row) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_json(path: str, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
        fh.write("\n")


def _write_kappa_profiles(profiles, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,r,kappa,cx,cy,cz\n")
        for prof in profiles:
            for r, k, c in zip(prof.radii, prof.kappa, prof.centers):
                fh.write(f"{prof.t:.17g},{r:.17g},{k:.17g},"
                         f"{c[0]:.17g},{c[1]:.17g},{c[2]:.17g}\n")


def _write_frames(frames, out_dir: str):
    frame_dir = os.path.join(out_dir, "frames")
    os.makedirs(frame_dir, exist_ok=True)
    for i, fr in enumerate(frames):
        save_mesh(fr.rescaled_mesh, os.path.join(frame_dir, f"{i:04d}.off"))
        meta = [
            f"t = {fr.t:.17g}",
            f"r = {fr.r:.17g}",
            f"x = {fr.x[0]:.17g} {fr.x[1]:.17g} {fr.x[2]:.17g}",
            f"rescaled_c0 = {fr.rescaled_params.c0:.17g}",
            f"rescaled_lambda = {fr.rescaled_params.lam:.17g}",
            f"kappa_target = {fr.kappa_target:.17g}",
            f"willmore = {fr.willmore:.17g}",
            f"penalized = {fr.penalized:.17g}",
            "cadence = area_halving",
        ]
        with open(os.path.join(frame_dir, f"{i:04d}.meta"), "w",
                  encoding="utf-8") as fh:
            fh.write("\n".join(meta) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_flow(args) -> int:
    try:
        cfg = load_run_config(args.config, overrides=args.override,
                              out_dir=args.out, frames=args.frames)
        mesh = cfg.build_mesh()
    except (ConfigError, MeshError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG

    os.makedirs(cfg.out_dir, exist_ok=True)
    policy = cfg.policy
    if policy.checkpoint_every and policy.checkpoint_dir is None:
        policy = replace(policy, checkpoint_dir=os.path.join(cfg.out_dir,
                                                             "checkpoints"))

    csv_sink = CsvSink(os.path.join(cfg.out_dir, "series.csv"))
    sinks = [csv_sink]
    frame_sink = None
    if cfg.frames_enabled:
        frame_sink = FrameSink(cfg.params, cfg.kappa_target_fraction)
        sinks.append(frame_sink)

    last_state = {}
    sinks.append(lambda s, r: last_state.update(state=s))

    try:
        records, report = run_flow(mesh, cfg.params, policy, sinks=sinks)
    except (FlowError, RemeshError) as exc:
        logger.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except OSError as exc:
        logger.error("IO failure: %s", exc)
        return EXIT_IO
    finally:
        csv_sink.close()

    singular = report.reason in _SINGULAR_REASONS
    classification = None
    if frame_sink is not None and frame_sink.profiles:
        _write_kappa_profiles(frame_sink.profiles,
                              os.path.join(cfg.out_dir, "kappa_profiles.csv"))
    if singular and frame_sink is not None and len(frame_sink.frames) >= 3:
        classification = classify_singularity(frame_sink.frames, report.reason)
        _write_frames(frame_sink.frames, cfg.out_dir)

    e0 = records[0].penalized
    bounds = theory_bounds(cfg.params, e0=e0)
    summary = {
        "params": {"c0": cfg.params.c0, "lambda": cfg.params.lam},
        "mesh": {"path": cfg.mesh_path,
                 "icosphere_subdivisions": cfg.icosphere_subdivisions,
                 "icosphere_radius": cfg.icosphere_radius,
                 "n_vertices": mesh.n_vertices, "genus": mesh.genus},
        "seed": cfg.seed,
        "termination": {
            "reason": report.reason,
            "final_time": report.final_time,
            "steps": report.steps,
            "rejected_steps": report.rejected_steps,
            "final_energies": report.final_energies,
            "evidence": report.evidence,
        },
        "theory_bounds": {
            "r_star": bounds.r_star,
            "t_bound": bounds.t_bound,
            "en_threshold": bounds.en_threshold,
            "beta_upper": bounds.beta_upper,
            "willmore_ctrl_factor": bounds.willmore_ctrl_factor,
        },
        "threshold_comparisons": {
            "initial_energy": e0,
            "en_threshold": bounds.en_threshold,
            "initial_energy_below_threshold": (
                None if bounds.en_threshold is None
                else bool(e0 <= bounds.en_threshold)),
            "t_bound": bounds.t_bound,
            "final_time_within_t_bound": (
                None if bounds.t_bound is None
                else bool(report.final_time < bounds.t_bound)),
            "e0_inconsistent_with_negative_c0": bounds.e0_inconsistent,
        },
        "monitors": (hypothesis_monitors(last_state["state"], cfg.params)
                     if last_state else None),
        "classification": (None if classification is None else {
            "verdict": classification.verdict,
            "fit_residual": classification.fit_residual,
            "limit_willmore": classification.limit_willmore,
            "limit_penalized": classification.limit_penalized,
        }),
        "n_frames": 0 if frame_sink is None else len(frame_sink.frames),
    }
    _write_json(os.path.join(cfg.out_dir, "summary.json"), summary)
    if not args.quiet:
        print(json.dumps(summary["termination"], indent=2,
                         default=_json_default))

    if report.reason in _CLEAN_REASONS:
        return EXIT_OK
    if singular:
        return EXIT_SINGULAR
    return EXIT_INCONCLUSIVE


def cmd_ode(args) -> int:
    try:
        params = FlowParams(args.c0, getattr(args, "lambda"))
    except ValueError as exc:
        logger.error("bad parameters: %s", exc)
        return EXIT_CONFIG
    if args.r0 <= 0 or args.horizon <= 0:
        logger.error("r0 and horizon must be positive")
        return EXIT_CONFIG
    sol = integrate_sphere_ode(args.r0, params, horizon=args.horizon,
                               rtol=args.rtol)
    bounds = theory_bounds(params,
                           e0=float(np.pi * (2 - params.c0 * args.r0) ** 2
                                    + 2 * np.pi * params.lam * args.r0 ** 2))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ode_series.csv"), "w",
              encoding="utf-8") as fh:
        fh.write("t,r\n")
        for t, r in zip(sol.times, sol.radii):
            fh.write(f"{t:.17g},{r:.17g}\n")
    summary = {
        "params": {"c0": params.c0, "lambda": params.lam, "r0": args.r0},
        "terminal": sol.terminal,
        "extinction_time": sol.extinction_time,
        "extinction_time_closed_form": extinction_time_closed_form(args.r0, params),
        "r_star": bounds.r_star,
        "t_bound": bounds.t_bound,
        "final_radius": float(sol.radii[-1]),
    }
    _write_json(os.path.join(args.out, "ode_summary.json"), summary)
    if not args.quiet:
        print(json.dumps(summary, indent=2, default=_json_default))
    return EXIT_OK


def cmd_energy(args) -> int:
    try:
        mesh = load_mesh(args.mesh)
    except MeshError as exc:
        logger.error("cannot load mesh: %s", exc)
        return EXIT_CONFIG
    params = FlowParams(args.c0, getattr(args, "lambda"))
    cache = build_cache(mesh, params)
    payload = {
        "mesh": {"path": args.mesh, "n_vertices": mesh.n_vertices,
                 "n_faces": mesh.n_faces, "genus": mesh.genus,
                 "euler_characteristic": mesh.euler_characteristic},
        "params": {"c0": params.c0, "lambda": params.lam},
        "area": cache.area,
        "volume": cache.signed_volume,
        "willmore": cache.willmore,
        "w0": cache.w0,
        "helfrich": cache.helfrich,
        "penalized": cache.penalized,
        "int_H": float(np.sum(cache.H * cache.vertex_areas)),
        "sup_Asq": cache.sup_Asq,
        "clamp_mass": cache.clamp_mass,
        "gauss_bonnet_residual": gauss_bonnet_residual(cache, mesh.genus),
        "angle_defect_total": float(np.sum(cache.K * cache.vertex_areas)),
        "willmore_bound_residual": (
            willmore_bound_residual(cache, params) if params.lam > 0 else None),
    }
    bounds = theory_bounds(params, e0=cache.penalized)
    payload["theory_bounds"] = {
        "r_star": bounds.r_star, "t_bound": bounds.t_bound,
        "en_threshold": bounds.en_threshold, "beta_upper": bounds.beta_upper,
        "willmore_ctrl_factor": bounds.willmore_ctrl_factor,
    }
    text = json.dumps(payload, indent=2, default=_json_default)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    if not args.quiet:
        print(text)
    return EXIT_OK


def cmd_rescale(args) -> int:
    if args.r <= 0:
        logger.error("rescaling factor must be positive, got %g", args.r)
        return EXIT_CONFIG
    try:
        mesh = load_mesh(args.mesh)
    except MeshError as exc:
        logger.error("cannot load mesh: %s", exc)
        return EXIT_CONFIG
    params = FlowParams(args.c0, getattr(args, "lambda"))
    x = np.asarray(args.x, dtype=np.float64)
    rescaled = mesh.translated(-x).scaled(1.0 / args.r)
    new_params = params.rescaled(args.r)
    e_orig = penalized_energy(build_cache(mesh), params)
    e_new = penalized_energy(build_cache(rescaled), new_params)
    out_path = args.out or (os.path.splitext(args.mesh)[0] + "_rescaled.off")
    try:
        save_mesh(rescaled, out_path)
    except OSError as exc:
        logger.error("cannot write %s: %s", out_path, exc)
        return EXIT_IO
    identity_dev = abs(e_new - e_orig) / max(abs(e_orig), 1e-300)
    if not args.quiet:
        print(f"rescaled mesh -> {out_path}")
        print(f"transformed params: c0 = {new_params.c0:.17g}, "
              f"lambda = {new_params.lam:.17g}")
        print(f"energy identity: {e_orig:.12g} vs {e_new:.12g} "
              f"(rel dev {identity_dev:.2e})")
    return EXIT_OK


def cmd_validate(args) -> int:
    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    all_ok = True
    for name in names:
        results = run_suite(name, fast=not args.full)
        for res in results:
            print(f"{name}: {res}")
            all_ok &= res.passed
    print("validation:", "PASS" if all_ok else "FAIL")
    return EXIT_OK if all_ok else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="helflow",
        description="Numerical laboratory for locally area-constrained "
                    "bending flows of closed triangulated surfaces.",
    )
    parser.add_argument("--quiet", action="store_true",
                        help="suppress console output except errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flow", help="run a flow from a config file")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--out", default=None, help="output directory override")
    p.add_argument("--override", action="append", default=[],
                   metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--frames", choices=("on", "off"), default=None,
                   help="force blow-up frame extraction on/off")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("ode", help="integrate the round-sphere radius ODE")
    p.add_argument("--c0", type=float, required=True)
    p.add_argument("--lambda", type=float, default=0.0, dest="lambda")
    p.add_argument("--r0", type=float, required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--rtol", type=float, default=1e-10)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_ode)

    p = sub.add_parser("energy", help="all energies and bounds of one mesh")
    p.add_argument("mesh", help="OFF/OBJ mesh path")
    p.add_argument("--c0", type=float, required=True)
    p.add_argument("--lambda", type=float, default=0.0, dest="lambda")
    p.add_argument("--out", default=None, help="also write JSON here")
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("rescale", help="parabolic rescaling of a mesh")
    p.add_argument("mesh", help="OFF/OBJ mesh path")
    p.add_argument("--r", type=float, required=True)
    p.add_argument("--x", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.add_argument("--c0", type=float, required=True)
    p.add_argument("--lambda", type=float, default=0.0, dest="lambda")
    p.add_argument("--out", default=None, help="output mesh path")
    p.set_defaults(func=cmd_rescale)

    p = sub.add_parser("validate", help="run a validation suite")
    p.add_argument("suite", choices=sorted(SUITES) + ["all"])
    p.add_argument("--full", action="store_true",
                   help="full-resolution variants (slower)")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

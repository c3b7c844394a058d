"""Time integration of the surface flow with energy-monotone step control.

The evolving object is a :class:`FlowState`; accepted steps never increase the
penalized energy by more than the policy tolerance (rejected attempts shrink
dt and leave the state unchanged).  Two stepping modes:

* ``explicit``: forward Euler on the velocity, dt capped by a fourth-order
  CFL bound ``c_dt * h_min^4``;
* ``semi_implicit``: the bi-Laplacian stiffness is treated implicitly in
  stabilized (add-subtract) form,

      (M + dt L M^-1 L) v+ = M v + dt (M xi nu + L M^-1 L v),

  with M the diagonal mixed-area mass matrix and L the cotangent operator;
  all curvature (lower-order) terms stay explicit.  dt is additionally capped
  by ``curvature_dt_coeff / (sup |A|^2)^2``, which tracks the physical r^4
  stiffness scale, so shrinking surfaces remain time-accurate.

Time has units length^4 (fourth-order scaling).
"""

import hashlib
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .geometry import FlowParams, GeometryCache, build_cache, flow_velocity
from .mesh import TriangleMesh, load_mesh, save_mesh, signed_volume

logger = logging.getLogger(__name__)

TERMINATION_REASONS = (
    "converged",
    "singular_area_collapse",
    "singular_curvature_blowup",
    "dt_collapse",
    "horizon_reached",
    "step_budget",
)

CHECKPOINT_FORMAT_VERSION = 1


class FlowError(Exception):
    """Flow setup or stepping failed."""


class SolverError(FlowError):
    """The semi-implicit linear solve failed."""


class CheckpointError(FlowError):
    """Checkpoint files are missing, corrupt, or inconsistent."""


@dataclass(frozen=True)
class SteppingPolicy:
    """Step-size control, termination thresholds, and run bookkeeping.

    ``energy_increase_tol_rel`` is relative to the initial energy; an accepted
    step may raise the penalized energy by at most that amount.  A ``None``
    gradient tolerance disables convergence detection.
    """

    mode: str = "semi_implicit"  # or "explicit"
    dt_init: float = 1e-3
    dt_growth: float = 1.3
    dt_shrink: float = 0.25
    cfl_coefficient: float = 0.05          # explicit: dt <= c * h_min^4
    curvature_dt_coeff: float = 0.02       # semi-implicit: dt <= c / sup|A|^2 ^2
    energy_increase_tol_rel: float = 1e-10
    gradient_tol: float | None = None
    convergence_window: int = 50
    max_steps: int = 200_000
    time_horizon: float = np.inf
    dt_floor: float = 1e-16
    area_floor_fraction: float = 1e-3
    blowup_threshold: float = 1e4          # on sup|A|^2 * A
    record_every: int = 1
    remesh_enabled: bool = True
    remesh_min_angle: float = np.deg2rad(10.0)
    remesh_edge_drift: float = 2.0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.mode not in ("explicit", "semi_implicit"):
            raise ValueError(f"unknown stepping mode {self.mode!r}")
        if not (0 < self.dt_shrink < 1 < self.dt_growth):
            raise ValueError("need 0 < dt_shrink < 1 < dt_growth")
        for name in ("dt_init", "cfl_coefficient", "curvature_dt_coeff",
                     "convergence_window", "max_steps", "dt_floor",
                     "area_floor_fraction", "blowup_threshold", "record_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class FlowState:
    """The evolving object: time, mesh, geometry cache, and step statistics."""

    t: float
    mesh: TriangleMesh
    cache: GeometryCache
    dt: float
    step_index: int = 0
    rejected_steps: int = 0
    energy0: float = 0.0
    last_step_accepted: bool = True
    rate_norm: float = np.nan   # L2(dmu) norm of the realized dt f


@dataclass
class TimeSeriesRecord:
    """One monitoring sample; the CSV schema follows the field order."""

    t: float
    dt: float
    area: float
    volume: float
    willmore: float
    w0: float
    helfrich: float
    penalized: float
    int_H: float
    sup_Asq: float
    grad_l2: float
    clamp_mass: float
    step_rejections: int


CSV_COLUMNS = (
    "t", "dt", "area", "volume", "willmore", "w0", "helfrich", "penalized",
    "int_H", "sup_Asq", "grad_l2", "clamp_mass", "step_rejections",
)


@dataclass
class TerminationReport:
    """Why a run stopped, with the evidence backing the classification."""

    reason: str
    final_time: float
    steps: int
    rejected_steps: int
    final_energies: dict
    evidence: dict

    def __post_init__(self):
        if self.reason not in TERMINATION_REASONS:
            raise ValueError(f"unknown termination reason {self.reason!r}")


# ---------------------------------------------------------------------------
# semi-implicit solver
# ---------------------------------------------------------------------------


class ImplicitSolver:
    """Solves the stabilized implicit system in update form.

    Jacobi-preconditioned conjugate gradients on the three coordinate columns
    of ``(M + dt L M^-1 L) delta = dt M xi nu``; falls back to a direct
    sparse LU if CG stalls.  The solve is a pure function of the current
    state (no cross-step memory), so replayed or restored trajectories
    reproduce the original bit for bit, and twin runs related by parabolic
    rescaling stay in lockstep.
    """

    def __init__(self, cg_rtol: float = 1e-9, cg_maxiter: int = 1500):
        self.cg_rtol = cg_rtol
        self.cg_maxiter = cg_maxiter

    def solve(self, vertices: np.ndarray, areas: np.ndarray,
              laplacian: sparse.csr_matrix, dt: float,
              velocity: np.ndarray) -> np.ndarray:
        # In update form the add-subtract terms cancel exactly:
        # (M + dt L M^-1 L) (v+ - v) = dt M xi nu.
        B = (laplacian @ sparse.diags(1.0 / areas)) @ laplacian
        A = (sparse.diags(areas) + dt * B).tocsr()
        rhs = dt * (areas[:, None] * velocity)
        delta = self._pcg_block(A, rhs, x0=np.zeros_like(rhs))
        if delta is None:
            delta = self._direct(A, rhs)
        out = vertices + delta
        if not np.all(np.isfinite(out)):
            raise SolverError("linear solve produced non-finite positions")
        return out

    def _pcg_block(self, A, rhs, x0):
        """Jacobi-preconditioned CG on the three coordinate columns in lockstep."""
        inv_diag = 1.0 / A.diagonal()
        x = x0.copy()
        r = rhs - A @ x
        tol_sq = (self.cg_rtol ** 2) * np.einsum("ij,ij->j", rhs, rhs)
        z = inv_diag[:, None] * r
        p = z.copy()
        rz = np.einsum("ij,ij->j", r, z)
        for _ in range(self.cg_maxiter):
            r_sq = np.einsum("ij,ij->j", r, r)
            active = r_sq > tol_sq
            if not np.any(active):
                return x
            Ap = A @ p
            pAp = np.einsum("ij,ij->j", p, Ap)
            alpha = np.where(active & (pAp > 0), rz / np.where(pAp > 0, pAp, 1.0), 0.0)
            x += alpha * p
            r -= alpha * Ap
            z = inv_diag[:, None] * r
            rz_new = np.einsum("ij,ij->j", r, z)
            beta = np.where(active, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
            p = z + beta * p
            rz = rz_new
        return None

    def _direct(self, A, rhs):
        try:
            lu = splu(A.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"sparse LU factorization failed: {exc}") from exc
        out = lu.solve(rhs)
        if not np.all(np.isfinite(out)):
            raise SolverError("linear solve produced non-finite positions")
        return out


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def init_state(mesh: TriangleMesh, params: FlowParams,
               policy: SteppingPolicy) -> FlowState:
    """Build the starting state; the mesh must be oriented for volume >= 0."""
    vol = signed_volume(mesh)
    if vol < -1e-12 * mesh.bbox_diagonal() ** 3:
        raise FlowError(
            f"initial mesh has negative signed volume {vol:.3e}; apply "
            "orient_for_positive_volume first"
        )
    cache = build_cache(mesh, params)
    return FlowState(
        t=0.0, mesh=mesh, cache=cache, dt=policy.dt_init,
        energy0=cache.penalized,
    )


def _dt_cap(state: FlowState, policy: SteppingPolicy) -> float:
    if policy.mode == "explicit":
        h_min = float(state.mesh.edge_lengths().min())
        return policy.cfl_coefficient * h_min ** 4
    return policy.curvature_dt_coeff / max(state.cache.sup_Asq, 1e-300) ** 2


def step(state: FlowState, params: FlowParams, policy: SteppingPolicy,
         solver: ImplicitSolver | None = None) -> FlowState:
    """One stepping attempt.

    On acceptance: positions advance, t increases by the (possibly capped) dt,
    and dt grows for the next attempt.  On rejection (energy increased beyond
    tolerance): the geometry is unchanged, dt shrinks, and the rejection
    counter increments.  The caller decides what a too-small dt means.
    """
    cache = state.cache
    if cache.penalized is None or cache.params != params:
        cache = build_cache(state.mesh, params)
        state = replace(state, cache=cache)
    dt = min(state.dt, _dt_cap(state, policy))

    xi = flow_velocity(cache, params).values
    velocity = xi[:, None] * cache.normals
    v_old = state.mesh.vertices
    if policy.mode == "explicit":
        v_new = v_old + dt * velocity
    else:
        if solver is None:
            solver = ImplicitSolver()
        v_new = solver.solve(v_old, cache.vertex_areas, cache.laplacian, dt,
                             velocity)

    new_mesh = state.mesh.with_vertices(v_new)
    new_cache = build_cache(new_mesh, params)
    tolerance = policy.energy_increase_tol_rel * abs(state.energy0)
    if new_cache.penalized - cache.penalized <= tolerance:
        rate = (v_new - v_old) / dt
        rate_norm = float(
            np.sqrt(np.sum(np.einsum("ij,ij->i", rate, rate)
                           * new_cache.vertex_areas))
        )
        return replace(
            state,
            t=state.t + dt,
            mesh=new_mesh,
            cache=new_cache,
            dt=dt * policy.dt_growth,
            step_index=state.step_index + 1,
            last_step_accepted=True,
            rate_norm=rate_norm,
        )
    return replace(
        state,
        dt=dt * policy.dt_shrink,
        rejected_steps=state.rejected_steps + 1,
        last_step_accepted=False,
    )


def _make_record(state: FlowState, grad_l2: float) -> TimeSeriesRecord:
    c = state.cache
    return TimeSeriesRecord(
        t=state.t,
        dt=state.dt,
        area=c.area,
        volume=c.signed_volume,
        willmore=c.willmore,
        w0=c.w0,
        helfrich=c.helfrich,
        penalized=c.penalized,
        int_H=float(np.sum(c.H * c.vertex_areas)),
        sup_Asq=c.sup_Asq,
        grad_l2=grad_l2,
        clamp_mass=c.clamp_mass,
        step_rejections=state.rejected_steps,
    )


def _initial_rate_norm(state: FlowState, params: FlowParams) -> float:
    xi = flow_velocity(state.cache, params).values
    return float(np.sqrt(np.sum(xi * xi * state.cache.vertex_areas)))


def run_flow(initial: TriangleMesh, params: FlowParams, policy: SteppingPolicy,
             sinks=()):
    """Iterate :func:`step` until termination.

    ``sinks`` are callables ``sink(state, record)`` invoked on every emitted
    record (immutable snapshots; safe to process concurrently).  Returns the
    list of records and a :class:`TerminationReport`.
    """
    state = init_state(initial, params, policy)
    solver = ImplicitSolver() if policy.mode == "semi_implicit" else None
    area0 = state.cache.area
    target_edge0 = initial.mean_edge_length()
    records: list[TimeSeriesRecord] = []
    remesh_count = 0
    below_tol_streak = 0
    reason = None

    def emit(st: FlowState, grad: float):
        rec = _make_record(st, grad)
        records.append(rec)
        for sink in sinks:
            sink(st, rec)

    emit(state, _initial_rate_norm(state, params))

    while True:
        if state.cache.area < policy.area_floor_fraction * area0:
            reason = "singular_area_collapse"
            break
        if state.t >= policy.time_horizon:
            reason = "horizon_reached"
            break
        if state.step_index >= policy.max_steps:
            reason = "step_budget"
            break
        if np.isfinite(policy.time_horizon):
            room = policy.time_horizon - state.t
            if room <= 1e-15 * policy.time_horizon:
                reason = "horizon_reached"
                break
            if state.dt > room:
                state = replace(state, dt=room)

        state = step(state, params, policy, solver=solver)

        if not state.last_step_accepted:
            if state.dt < policy.dt_floor:
                blown = state.cache.sup_Asq * state.cache.area
                reason = ("singular_curvature_blowup"
                          if blown > policy.blowup_threshold else "dt_collapse")
                break
            continue

        if policy.remesh_enabled and _needs_remesh(state, policy, target_edge0,
                                                   area0):
            state = _apply_remesh(state, params, target_edge0, area0, policy)
            remesh_count += 1

        if state.step_index % policy.record_every == 0:
            emit(state, state.rate_norm)
        if policy.checkpoint_every and state.step_index % policy.checkpoint_every == 0:
            if policy.checkpoint_dir is None:
                raise FlowError("checkpoint_every set without checkpoint_dir")
            prefix = os.path.join(policy.checkpoint_dir,
                                  f"ckpt_{state.step_index:07d}")
            checkpoint(state, params, prefix)

        if policy.gradient_tol is not None:
            below_tol_streak = (below_tol_streak + 1
                                if state.rate_norm < policy.gradient_tol else 0)
            if below_tol_streak >= policy.convergence_window:
                reason = "converged"
                break

    if records and records[-1].t != state.t:
        emit(state, state.rate_norm)

    report = _build_report(state, records, reason, area0, remesh_count)
    logger.info("flow terminated: %s at t=%.6g after %d steps (%d rejected)",
                report.reason, report.final_time, report.steps,
                report.rejected_steps)
    return records, report


def _needs_remesh(state: FlowState, policy: SteppingPolicy,
                  target_edge0: float, area0: float) -> bool:
    # Scale-adaptive target keeps resolution relative to sqrt(area); for a
    # uniformly shrinking surface the ratio never drifts and no remesh fires.
    target = target_edge0 * np.sqrt(max(state.cache.area / area0, 1e-300))
    mean_edge = state.mesh.mean_edge_length()
    drift = policy.remesh_edge_drift
    if not (target / drift <= mean_edge <= target * drift):
        return True
    min_angle = state.mesh.face_angles().min()
    return min_angle < policy.remesh_min_angle


def _apply_remesh(state: FlowState, params: FlowParams, target_edge0: float,
                  area0: float, policy: SteppingPolicy) -> FlowState:
    from .remesh import remesh

    target = target_edge0 * np.sqrt(max(state.cache.area / area0, 1e-300))
    logger.info("remeshing at t=%.6g (target edge %.4g)", state.t, target)
    new_mesh = remesh(state.mesh, target,
                      min_angle=policy.remesh_min_angle)
    new_cache = build_cache(new_mesh, params)
    return replace(state, mesh=new_mesh, cache=new_cache)


def _build_report(state: FlowState, records, reason, area0, remesh_count):
    c = state.cache
    tail = records[-10:]
    area_trend = tail[-1].area - tail[0].area if len(tail) >= 2 else 0.0
    asq_trend = tail[-1].sup_Asq - tail[0].sup_Asq if len(tail) >= 2 else 0.0
    return TerminationReport(
        reason=reason,
        final_time=state.t,
        steps=state.step_index,
        rejected_steps=state.rejected_steps,
        final_energies={
            "area": c.area,
            "volume": c.signed_volume,
            "willmore": c.willmore,
            "w0": c.w0,
            "helfrich": c.helfrich,
            "penalized": c.penalized,
        },
        evidence={
            "gradient_norm": state.rate_norm,
            "area_ratio": c.area / area0,
            "area_trend": area_trend,
            "sup_Asq": c.sup_Asq,
            "sup_Asq_trend": asq_trend,
            "sup_Asq_times_area": c.sup_Asq * c.area,
            "final_dt": state.dt,
            "remesh_count": remesh_count,
        },
    )


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def params_hash(params: FlowParams) -> str:
    payload = f"{params.c0!r}:{params.lam!r}".encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def checkpoint(state: FlowState, params: FlowParams, prefix: str) -> list[str]:
    """Write ``prefix.off`` (mesh) and ``prefix.meta`` (state metadata)."""
    mesh_path = prefix + ".off"
    meta_path = prefix + ".meta"
    os.makedirs(os.path.dirname(os.path.abspath(mesh_path)), exist_ok=True)
    save_mesh(state.mesh, mesh_path, fmt="OFF")
    lines = [
        f"format_version = {CHECKPOINT_FORMAT_VERSION}",
        f"t = {state.t:.17g}",
        f"dt = {state.dt:.17g}",
        f"step_index = {state.step_index}",
        f"rejected_steps = {state.rejected_steps}",
        f"energy0 = {state.energy0:.17g}",
        f"params_hash = {params_hash(params)}",
    ]
    with open(meta_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return [mesh_path, meta_path]


def restore(prefix: str, params: FlowParams) -> FlowState:
    """Rebuild a FlowState from checkpoint files; refuses mismatched params."""
    mesh_path = prefix + ".off"
    meta_path = prefix + ".meta"
    if not (os.path.exists(mesh_path) and os.path.exists(meta_path)):
        raise CheckpointError(f"missing checkpoint file(s) at {prefix!r}")
    meta = {}
    with open(meta_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    try:
        version = int(meta["format_version"])
        t = float(meta["t"])
        dt = float(meta["dt"])
        step_index = int(meta["step_index"])
        rejected = int(meta["rejected_steps"])
        energy0 = float(meta["energy0"])
        stored_hash = meta["params_hash"]
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if stored_hash != params_hash(params):
        raise CheckpointError(
            "checkpoint was written with different flow parameters"
        )
    mesh = load_mesh(mesh_path, fmt="OFF")
    cache = build_cache(mesh, params)
    return FlowState(t=t, mesh=mesh, cache=cache, dt=dt, step_index=step_index,
                     rejected_steps=rejected, energy0=energy0)

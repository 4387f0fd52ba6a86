"""SCvx* outer loop for free-final-time iterative covariance steering.

Each iteration linearizes and discretizes about the current reference, solves
the penalized subproblem, and compares the actual merit decrease with the
decrease the convex model predicted. Both merits use the same iteration's
multipliers ``(w, lam, mu)``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .discretize import OdeSettings, discretize_all, sigma_derivative
from .errors import IntegrationDiverged, SubproblemFailed, WarmStartInfeasible
from .model import ScpParams
from .subproblem import (
    KAPPA_FLOOR,
    CvxpyBackend,
    SolverStatus,
    SubproblemTemplate,
    build_subproblem,
    penalty_value,
    regularized_cost,
    solve_subproblem,
    tightening_factor,
)

__all__ = [
    "ScpParams",
    "ScpState",
    "IterationRecord",
    "RunResult",
    "nonlinear_residuals",
    "merit_values",
    "scvx_iterate",
    "update_trust_region",
    "warm_start",
    "initial_guess",
    "run",
]

log = logging.getLogger(__name__)

DELTA_L_ZERO = 1e-12


@dataclass
class ScpState:
    mu: np.ndarray
    lam: np.ndarray
    w: float
    delta: float
    tr_radius: float
    iter: int = 0
    history: list = field(default_factory=list)
    # discrete models behind the latest candidate and the accepted reference
    cand_model: object = None
    ref_model: object = None
    cand_offsets: object = None
    ref_offsets: object = None

    @classmethod
    def initial(cls, spec):
        p = spec.scp
        n = spec.dynamics.state_dim
        return cls(
            mu=np.zeros(spec.N * n),
            lam=np.zeros((spec.N_x + spec.N_u) * spec.N),
            w=p.w0,
            delta=math.inf,
            tr_radius=p.tr0,
        )


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    DeltaJ: float
    DeltaL: float
    chi: float
    rho: float
    accepted: bool
    objective: float
    t_f: float
    w: float
    delta: float
    tr_radius: float
    status: str
    wall_ms: float

    def as_dict(self):
        out = {}
        for key, val in self.__dict__.items():
            if isinstance(val, float) and not math.isfinite(val):
                val = None if math.isnan(val) else ("inf" if val > 0 else "-inf")
            out[key] = val
        return out


@dataclass
class RunResult:
    solution: object
    gains: np.ndarray
    history: list
    converged: bool
    iterations: int
    t_f: float
    warm_start: object = None
    state: ScpState = None
    model_data: object = None  # DiscreteModel of the subproblem that produced ``solution``
    covariance_offsets: object = None  # its dilation-sensitivity terms at ``solution``

    @property
    def status(self):
        return "converged" if self.converged else "max_iterations"


def _flow(spec, x0, v, sigma, dt):
    """RK4 on ``x' = sigma f(x, v)`` over one interval of normalized width ``dt``."""
    steps = spec.ode_steps
    h = dt / steps
    f = spec.dynamics.drift
    x = np.array(x0, dtype=float)
    for _ in range(steps):
        k1 = sigma * f(x, v)
        k2 = sigma * f(x + 0.5 * h * k1, v)
        k3 = sigma * f(x + 0.5 * h * k2, v)
        k4 = sigma * f(x + h * k3, v)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e12:
            raise IntegrationDiverged("mean flow diverged")
    return x


def nonlinear_residuals(z, spec):
    """Defects of the nonlinear mean flow and of the chance-constraint lifts.

    Returns ``(g, h)`` with ``g`` of length ``N n`` and ``h`` of length
    ``(N_x + N_u) N`` (state rows first, each block ordered by node then row).
    """
    N = spec.N
    m = spec.dynamics.control_dim
    g = np.empty((N, spec.dynamics.state_dim))
    for k in range(N):
        try:
            g[k] = z.xbar[k + 1] - _flow(spec, z.xbar[k], z.v[k], z.sigma[k], spec.delta_tau[k])
        except IntegrationDiverged as exc:
            raise IntegrationDiverged(str(exc), interval=k) from exc
    hx = np.einsum("ja,kab,jb->kj", spec.alpha, z.Sigma_x[1:], spec.alpha) - z.kappa_x ** 2
    hu = np.einsum("ja,kab,jb->kj", spec.a, z.Y[:, :m, :m], spec.a) - z.kappa_u ** 2
    return g.ravel(), np.concatenate([hx.ravel(), hu.ravel()])


def _zeta(z):
    return np.concatenate([np.ravel(z.zeta_x), np.ravel(z.zeta_u)])


def merit_values(z, residuals, state, spec):
    """Nonlinear merit at ``z`` and the convex model's merit at ``z``."""
    g, h = residuals
    J = regularized_cost(spec, z)
    # inequality defects enter through their positive part, matching zeta >= 0
    J_nl = J + penalty_value(g, np.maximum(h, 0.0), state.w, state.lam, state.mu)
    L_cvx = J + penalty_value(z.xi, _zeta(z), state.w, state.lam, state.mu)
    return J_nl, L_cvx


def update_trust_region(radius, rho, p):
    if rho < p.rho1:
        return max(radius / p.alpha1, p.tr_min)
    if rho < p.rho2:
        return radius
    return min(p.alpha2 * radius, p.tr_max)


def _discretize(spec, ref, threads=1):
    return discretize_all(
        spec.dynamics, ref, spec.delta_tau, OdeSettings(spec.ode_steps),
        mode=spec.mode, reference=spec.reference, threads=threads,
    )


def initial_guess(spec):
    """Straight-line state, zero control, unit dilation."""
    N = spec.N
    s = np.linspace(0.0, 1.0, N + 1)[:, None]
    x_hat = (1 - s) * spec.mu_i + s * spec.mu_f
    u_hat = np.zeros((N, spec.dynamics.control_dim))
    sigma_hat = np.clip(np.ones(N), spec.sigma_min, spec.sigma_max)
    return x_hat, u_hat, sigma_hat


@dataclass(frozen=True)
class WarmStart:
    reference: object  # SubproblemSolution used as the first reference tuple
    solution: object   # raw warm-start solution


def warm_start(spec, backend=None, threads=1, template=None):
    """Solve once without chance constraints to initialize the lifts.

    The linearization point stays at the initial guess; covariance and
    relaxation variables come from the warm-start solution, and the lifts are
    set to ``sqrt(alpha' Sigma alpha)`` and ``sqrt(a' Y a)``, capped at the
    largest value the hard chance constraint admits at the initial guess.
    """
    from .linearize import ReferenceTrajectory

    backend = backend or CvxpyBackend()
    N, Nx, Nu = spec.N, spec.N_x, spec.N_u
    m = spec.dynamics.control_dim
    x_hat, u_hat, sigma_hat = initial_guess(spec)
    ref0 = ReferenceTrajectory(x_hat, u_hat, sigma_hat, np.zeros((N, Nx)), np.zeros((N, Nu)))
    dm = _discretize(spec, ref0, threads)
    state = ScpState.initial(spec)
    program = build_subproblem(spec, dm, ref0, state, chance=False, template=template)
    sol = solve_subproblem(program, backend)
    if not sol.status.usable:
        raise WarmStartInfeasible(f"warm-start subproblem returned {sol.status.value}: {sol.message}")
    kx = np.sqrt(np.maximum(np.einsum("ja,kab,jb->kj", spec.alpha, sol.Sigma_x[1:], spec.alpha), 0.0))
    ku = np.sqrt(np.maximum(np.einsum("ja,kab,jb->kj", spec.a, sol.Y[:, :m, :m], spec.a), 0.0))
    # cap the lifts at the hard chance bound so the reference is subproblem-feasible
    if Nx:
        cap_x = -(x_hat[1:] @ spec.alpha.T + spec.beta) / tightening_factor(spec.delta_x)
        kx = np.minimum(kx, cap_x)
    if Nu:
        cap_u = -(u_hat @ spec.a.T + spec.b) / tightening_factor(spec.delta_u)
        ku = np.minimum(ku, cap_u)
    kx = np.maximum(kx, KAPPA_FLOOR)
    ku = np.maximum(ku, KAPPA_FLOOR)
    reference = replace(
        sol, xbar=x_hat, v=u_hat, sigma=sigma_hat, kappa_x=kx, kappa_u=ku,
        xi=np.zeros_like(sol.xi), zeta_x=np.zeros((N, Nx)), zeta_u=np.zeros((N, Nu)),
    )
    return WarmStart(reference, sol)


def scvx_iterate(spec, state, ref_z, backend=None, threads=1, template=None):
    """One SCvx* iteration. Returns ``(state, ref_z, record, candidate)``.

    ``state`` is updated in place and returned for convenience. A
    :class:`SubproblemTemplate` built for ``spec`` may be passed to skip
    recompilation.
    """
    p = spec.scp
    backend = backend or CvxpyBackend()
    t0 = time.perf_counter()
    ref = ref_z.as_reference()
    dm = _discretize(spec, ref, threads)
    dm_sigma = moments = None
    if spec.sigma_sensitivity:
        dm_sigma = sigma_derivative(
            spec.dynamics, ref, spec.delta_tau, OdeSettings(spec.ode_steps),
            mode=spec.mode, reference=spec.reference, threads=threads,
        )
        moments = (ref_z.Sigma_x, ref_z.U, ref_z.Y)
    program = build_subproblem(spec, dm, ref, state, template=template,
                               dm_sigma=dm_sigma, ref_moments=moments)
    cand = solve_subproblem(program, backend)
    if not cand.status.usable:
        raise SubproblemFailed(
            f"iteration {state.iter}: subproblem {cand.status.value}: {cand.message}", state.history
        )
    if cand.status is SolverStatus.NEAR_OPTIMAL:
        log.warning("iteration %d: subproblem solved to reduced accuracy", state.iter)

    res_ref = nonlinear_residuals(ref_z, spec)
    res_new = nonlinear_residuals(cand, spec)
    J_ref, _ = merit_values(ref_z, res_ref, state, spec)
    J_new, L_new = merit_values(cand, res_new, state, spec)
    dJ = J_ref - J_new
    dL = J_ref - L_new
    g, h = res_new
    chi = float(np.linalg.norm(np.concatenate([g, np.maximum(h, 0.0)])))
    rho = 1.0 if abs(dL) < DELTA_L_ZERO else dJ / dL
    if dL < -1e-9:
        log.warning("iteration %d: predicted decrease is negative (%.3e)", state.iter, dL)

    accepted = rho >= p.rho0
    state.cand_model = dm
    state.cand_offsets = program.covariance_offset(cand.sigma)
    if accepted:
        ref_z = cand
        state.ref_model = dm
        state.ref_offsets = state.cand_offsets
        if abs(dJ) < state.delta:
            state.mu = state.mu + state.w * g
            state.lam = np.maximum(state.lam + state.w * h, 0.0)
            state.w = min(p.beta * state.w, p.w_max)
            state.delta = abs(dJ) if math.isinf(state.delta) else p.gamma * state.delta
    state.tr_radius = update_trust_region(state.tr_radius, rho, p)

    rec = IterationRecord(
        iteration=state.iter, DeltaJ=float(dJ), DeltaL=float(dL), chi=chi, rho=float(rho),
        accepted=bool(accepted), objective=float(regularized_cost(spec, cand)),
        t_f=cand.final_time(spec.delta_tau), w=float(state.w), delta=float(state.delta),
        tr_radius=float(state.tr_radius), status=cand.status.value,
        wall_ms=1e3 * (time.perf_counter() - t0),
    )
    state.history.append(rec)
    state.iter += 1
    return state, ref_z, rec, cand


def run(spec, backend=None, threads=1, callback=None):
    """Warm start, then iterate until convergence or the iteration cap.

    On convergence the certified candidate is returned; otherwise the last
    accepted reference.
    """
    p = spec.scp
    backend = backend or CvxpyBackend()
    ws = warm_start(spec, backend, threads)
    state = ScpState.initial(spec)
    ref_z = ws.reference
    template = SubproblemTemplate(spec)
    converged = False
    while state.iter < p.ell_max:
        state, ref_z, rec, cand = scvx_iterate(spec, state, ref_z, backend, threads, template)
        if callback is not None:
            callback(rec)
        log.info("iter %3d  dJ=%.3e  dL=%.3e  chi=%.3e  rho=%.3f  tr=%.2e  w=%.1e  tf=%.4f",
                 rec.iteration, rec.DeltaJ, rec.DeltaL, rec.chi, rec.rho, rec.tr_radius, rec.w, rec.t_f)
        if abs(rec.DeltaJ) <= p.eps_opt and rec.chi <= p.eps_feas:
            ref_z = cand
            converged = True
            break
    sol = ref_z
    dm = state.cand_model if converged else state.ref_model
    offsets = state.cand_offsets if converged else state.ref_offsets
    return RunResult(
        solution=sol, gains=sol.gains(), history=list(state.history), converged=converged,
        iterations=state.iter, t_f=sol.final_time(spec.delta_tau), warm_start=ws, state=state,
        model_data=dm, covariance_offsets=offsets,
    )

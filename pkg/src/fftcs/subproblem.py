"""One convex penalty covariance-steering subproblem.

The program is assembled with cvxpy; any conic backend cvxpy can drive
(zero, nonnegative, second-order and PSD cones) solves it. The decision
variables follow the lifted formulation: moments ``xbar, Sigma_x``,
feedforward ``v, sigma``, the feedback lift ``U = K~ Sigma_x`` with its
Schur relaxation ``Y``, the outer-product relaxations ``Sigma_tilde`` and
the chance-constraint lifts ``kappa``. Mean dynamics carry virtual controls
``xi``; the linearized chance surrogates carry slacks ``zeta``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Protocol

import cvxpy as cp
import numpy as np

from .errors import MalformedReference, SingularCovariance
from .linearize import ReferenceTrajectory
from .moments import Policy

__all__ = [
    "SolverStatus",
    "ConicBackend",
    "CvxpyBackend",
    "Subproblem",
    "SubproblemSolution",
    "tightening_factor",
    "build_subproblem",
    "SubproblemTemplate",
    "covariance_map",
    "solve_subproblem",
    "check_losslessness",
    "LosslessnessReport",
    "regularized_cost",
    "penalty_value",
    "export_conic_program",
    "KAPPA_FLOOR",
    "SIGMA_FLOOR",
]

KAPPA_FLOOR = 1e-6
SIGMA_FLOOR = 1e-8


class SolverStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    NEAR_OPTIMAL = "NearOptimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"

    @property
    def usable(self):
        return self in (SolverStatus.OPTIMAL, SolverStatus.NEAR_OPTIMAL)


_STATUS_MAP = {
    cp.OPTIMAL: SolverStatus.OPTIMAL,
    cp.OPTIMAL_INACCURATE: SolverStatus.NEAR_OPTIMAL,
    cp.INFEASIBLE: SolverStatus.INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: SolverStatus.INFEASIBLE,
    cp.UNBOUNDED: SolverStatus.UNBOUNDED,
    cp.UNBOUNDED_INACCURATE: SolverStatus.UNBOUNDED,
}


class ConicBackend(Protocol):
    def solve(self, problem: cp.Problem) -> tuple[SolverStatus, str]:
        ...


@dataclass
class CvxpyBackend:
    """Solve through cvxpy with the named conic solver (Clarabel by default)."""

    solver: str = "CLARABEL"
    options: dict = field(default_factory=lambda: {
        "tol_feas": 1e-8, "tol_gap_abs": 1e-8, "tol_gap_rel": 1e-8, "max_iter": 500,
    })
    verbose: bool = False

    def solve(self, problem):
        try:
            problem.solve(solver=self.solver, verbose=self.verbose, **self.options)
        except cp.error.SolverError as exc:
            return SolverStatus.NUMERICAL_FAILURE, str(exc)
        status = _STATUS_MAP.get(problem.status, SolverStatus.NUMERICAL_FAILURE)
        return status, str(problem.status)


def tightening_factor(delta):
    """Distributionally robust one-sided quantile ``sqrt((1 - delta) / delta)``."""
    return float(np.sqrt((1.0 - delta) / delta))


@dataclass(frozen=True)
class SubproblemSolution:
    xbar: np.ndarray         # (N+1, n)
    Sigma_x: np.ndarray      # (N+1, n, n)
    v: np.ndarray            # (N, m)
    sigma: np.ndarray        # (N,)
    U: np.ndarray            # (N, m+1, n)
    Y: np.ndarray            # (N, m+1, m+1)
    Sigma_tilde: np.ndarray  # (d, N, n, n)
    kappa_x: np.ndarray      # (N, N_x), node k+1
    kappa_u: np.ndarray      # (N, N_u), node k
    xi: np.ndarray           # (N, n)
    zeta_x: np.ndarray       # (N, N_x)
    zeta_u: np.ndarray       # (N, N_u)
    objective_value: float
    status: SolverStatus
    message: str = ""

    @property
    def N(self):
        return self.sigma.shape[0]

    def final_time(self, delta_tau):
        return float(np.dot(delta_tau, self.sigma))

    def gains(self):
        """Feedback gains ``K_k = U_k[:m] Sigma_x[k]^-1``."""
        m = self.v.shape[1]
        return np.stack([
            np.linalg.solve(self.Sigma_x[k].T, self.U[k, :m].T).T for k in range(self.N)
        ])

    def policy(self):
        return Policy(self.v, self.sigma, self.gains())

    def as_reference(self, kappa_x=None, kappa_u=None):
        return ReferenceTrajectory(
            self.xbar, self.v, self.sigma,
            self.kappa_x if kappa_x is None else kappa_x,
            self.kappa_u if kappa_u is None else kappa_u,
        )

    def replace(self, **changes):
        from dataclasses import replace
        return replace(self, **changes)


@dataclass
class Subproblem:
    problem: cp.Problem
    variables: dict
    census: dict
    chance: bool
    spec: object = None
    sigma_slopes: np.ndarray = None  # (N, n, n) covariance sensitivity to the dilation
    sigma_ref: np.ndarray = None

    def covariance_offset(self, sigma):
        """Affine dilation term the covariance recursion adds at ``sigma``, ``(N, n, n)``."""
        if self.sigma_slopes is None:
            return None
        return (np.asarray(sigma) - self.sigma_ref)[:, None, None] * self.sigma_slopes


def _sym_count(n):
    return n * (n + 1) // 2


def regularized_cost(spec, sol):
    """``eta * t_f`` plus the covariance/relaxation regularizer, evaluated numerically."""
    dt = spec.delta_tau
    Rbar = _control_weight(spec)
    cost = spec.eta * float(dt @ sol.sigma)
    for k in range(sol.N):
        cost += dt[k] * (np.trace(spec.Q @ sol.Sigma_x[k]) + np.trace(Rbar @ sol.Y[k]))
    cost += spec.eps_tilde_sigma * float(np.einsum("ij,skji->", spec.W_tilde_sigma, sol.Sigma_tilde))
    return cost


def penalty_value(xi, zeta, w, lam, mu):
    """Augmented-Lagrangian penalty ``mu.xi + w/2|xi|^2 + lam.zeta + w/2|[zeta]+|^2``."""
    xi = np.ravel(xi)
    zeta = np.ravel(zeta)
    zp = np.maximum(zeta, 0.0)
    return float(mu @ xi + 0.5 * w * xi @ xi + lam @ zeta + 0.5 * w * zp @ zp)


def _control_weight(spec):
    m = spec.dynamics.control_dim
    Rbar = np.zeros((m + 1, m + 1))
    Rbar[:m, :m] = spec.R
    Rbar[m, m] = spec.sigma_row_weight
    return Rbar


def _sym_rows(n):
    """Selector of the upper-triangular entries of a column-major ``vec``."""
    rows = [i + j * n for j in range(n) for i in range(j + 1)]
    P = np.zeros((len(rows), n * n))
    P[np.arange(len(rows)), rows] = 1.0
    return P


def _commutation(r, c):
    """``T`` with ``T vec(X) = vec(X')`` for ``X`` of shape ``(r, c)``."""
    T = np.zeros((r * c, r * c))
    for i in range(r):
        for j in range(c):
            T[i * c + j, j * r + i] = 1.0
    return T


def covariance_map(A, F, At, Ft, dtau):
    """Matrix of ``(Sigma, U, Y) -> Sigma+`` on column-major vecs.

    Implements ``A S A' + A U'F' + F U A' + F Y F'`` plus ``dtau`` times the
    same terms for every noise channel (the ``Sigma_tilde`` terms are added
    separately).
    """
    n = A.shape[0]
    m1 = F.shape[1]
    T = _commutation(m1, n)

    def blocks(Ai, Fi):
        return (np.kron(Ai, Ai),
                np.kron(Fi, Ai) @ T + np.kron(Ai, Fi),
                np.kron(Fi, Fi))

    S, U, Y = blocks(A, F)
    for i in range(At.shape[0]):
        s, u, y = blocks(At[i], Ft[i])
        S, U, Y = S + dtau * s, U + dtau * u, Y + dtau * y
    return np.hstack([S, U, Y])


def _map_derivative(dm, dm_sigma, k):
    """Directional derivative of :func:`covariance_map` along ``dm_sigma``."""
    A, F, At, Ft = dm.A[k], dm.F[k], dm.At[k], dm.Ft[k]
    dA, dF, dAt, dFt = dm_sigma.A[k], dm_sigma.F[k], dm_sigma.At[k], dm_sigma.Ft[k]
    n, m1 = A.shape[0], F.shape[1]
    T = _commutation(m1, n)
    dtau = dm.delta_tau[k]

    def dblocks(Ai, Fi, dAi, dFi):
        return (np.kron(dAi, Ai) + np.kron(Ai, dAi),
                (np.kron(dFi, Ai) + np.kron(Fi, dAi)) @ T + np.kron(dAi, Fi) + np.kron(Ai, dFi),
                np.kron(dFi, Fi) + np.kron(Fi, dFi))

    S, U, Y = dblocks(A, F, dA, dF)
    for i in range(At.shape[0]):
        s, u, y = dblocks(At[i], Ft[i], dAt[i], dFt[i])
        S, U, Y = S + dtau * s, U + dtau * u, Y + dtau * y
    return np.hstack([S, U, Y])


class SubproblemTemplate:
    """Parametrized subproblem, compiled once and re-bound every iteration.

    All iteration-dependent data (discrete model, reference, multipliers,
    trust-region radius) enter as cvxpy parameters, so the canonicalization
    is reused across solves.
    """

    def __init__(self, spec, chance=True, trust_region=True):
        self.spec = spec
        n = spec.dynamics.state_dim
        m = spec.dynamics.control_dim
        nd = spec.dynamics.noise_dim
        N, Nx, Nu = spec.N, spec.N_x, spec.N_u
        m1 = m + 1
        dtau = spec.delta_tau
        self.chance = chance = chance and (Nx + Nu) > 0
        self.trust_region = trust_region

        xbar = cp.Variable((N + 1, n), name="xbar")
        Sx = [cp.Variable((n, n), symmetric=True, name=f"Sigma_x{k}") for k in range(N + 1)]
        v = cp.Variable((N, m), name="v")
        sig = cp.Variable(N, name="sigma")
        Uu = [cp.Variable((m, n), name=f"U{k}") for k in range(N)]
        Y = [cp.Variable((m1, m1), symmetric=True, name=f"Y{k}") for k in range(N)]
        St = [[cp.Variable((n, n), symmetric=True, name=f"Sigma_tilde{i}_{k}") for k in range(N)]
              for i in range(nd)]
        xi = cp.Variable((N, n), name="xi")

        P = self.params = {
            "M": [cp.Parameter((_sym_count(n), n * n + m1 * n + m1 * m1), name=f"M{k}") for k in range(N)],
            "A": [cp.Parameter((n, n), name=f"A{k}") for k in range(N)],
            "F": [cp.Parameter((n, m1), name=f"F{k}") for k in range(N)],
            "d": cp.Parameter((N, n), name="d"),
            "At": [[cp.Parameter((n, n), name=f"At{i}_{k}") for k in range(N)] for i in range(nd)],
            "Ft": [[cp.Parameter((n, m1), name=f"Ft{i}_{k}") for k in range(N)] for i in range(nd)],
            "dt": [cp.Parameter((N, n), name=f"dt{i}") for i in range(nd)],
            "G": [cp.Parameter(_sym_count(n), name=f"G{k}") for k in range(N)],
            "Gs": [cp.Parameter(_sym_count(n), name=f"Gs{k}") for k in range(N)],
            "mu": cp.Parameter((N, n), name="mu"),
            "w": cp.Parameter(nonneg=True, name="w"),
        }

        census = {"variables": {}, "equalities": {}, "inequalities": {}, "psd_cones": {}}
        census["variables"].update({
            "xbar": (N + 1) * n, "Sigma_x": (N + 1) * _sym_count(n), "v": N * m, "sigma": N,
            "U": N * m * n, "Y": N * _sym_count(m1), "Sigma_tilde": nd * N * _sym_count(n),
            "xi": N * n,
        })
        eq = census["equalities"]
        ineq = census["inequalities"]
        psd = census["psd_cones"]
        cons = []

        sel = _sym_rows(n)
        zero_row = np.zeros((1, n))
        for k in range(N):
            U = cp.vstack([Uu[k], zero_row])
            vt = cp.hstack([v[k], sig[k]])
            lifted = cp.hstack([cp.vec(Sx[k], order="F"), cp.vec(U, order="F"), cp.vec(Y[k], order="F")])
            rhs = P["M"][k] @ lifted
            for i in range(nd):
                rhs = rhs + dtau[k] * (sel @ cp.vec(St[i][k], order="F"))
                q = cp.reshape(P["At"][i][k] @ xbar[k] + P["Ft"][i][k] @ vt + P["dt"][i][k], (n, 1), order="C")
                cons.append(cp.bmat([[St[i][k], q], [q.T, np.ones((1, 1))]]) >> 0)
            if spec.sigma_sensitivity:
                # first-order effect of the dilation on the covariance map
                rhs = rhs + P["G"][k] * sig[k] - P["Gs"][k]
            cons.append(sel @ cp.vec(Sx[k + 1], order="F") == rhs)
            cons.append(cp.bmat([[Y[k], U], [U.T, Sx[k]]]) >> 0)
            # soft mean dynamics
            cons.append(xbar[k + 1] - P["A"][k] @ xbar[k] - P["F"][k] @ vt - P["d"][k] == xi[k])
        eq["covariance"] = N * _sym_count(n)
        eq["mean_dynamics"] = N * n
        psd["schur_Y"] = [m1 + n] * N
        psd["schur_Sigma_tilde"] = [n + 1] * (N * nd)

        for k in range(N + 1):
            cons.append(Sx[k] >> SIGMA_FLOOR * np.eye(n))
        psd["Sigma_floor"] = [n] * (N + 1)

        cons += [xbar[0] == spec.mu_i, xbar[N] == spec.mu_f, Sx[0] == spec.Sigma_i]
        if spec.terminal_covariance == "equality":
            cons.append(Sx[N] == spec.Sigma_f)
            eq["boundary"] = 2 * n + 2 * _sym_count(n)
        else:
            cons.append(spec.Sigma_f - Sx[N] >> 0)
            eq["boundary"] = 2 * n + _sym_count(n)
            psd["terminal"] = [n]

        cons += [sig >= spec.sigma_min, sig <= spec.sigma_max]
        ineq["sigma_box"] = 2 * N

        cost = spec.eta * (dtau @ sig)
        Rbar = _control_weight(spec)
        for k in range(N):
            cost = cost + dtau[k] * (cp.trace(spec.Q @ Sx[k]) + cp.trace(Rbar @ Y[k]))
        for i in range(nd):
            for k in range(N):
                cost = cost + spec.eps_tilde_sigma * cp.trace(spec.W_tilde_sigma @ St[i][k])
        pen = cp.sum(cp.multiply(P["mu"], xi)) + 0.5 * P["w"] * cp.sum_squares(xi)

        V = dict(xbar=xbar, Sigma_x=Sx, v=v, sigma=sig, U=Uu, Y=Y, Sigma_tilde=St, xi=xi)
        kx = ku = None
        if chance:
            qx = tightening_factor(spec.delta_x) if Nx else 0.0
            qu = tightening_factor(spec.delta_u) if Nu else 0.0
            if Nx:
                kx = cp.Variable((N, Nx), nonneg=True, name="kappa_x")
                zx = cp.Variable((N, Nx), nonneg=True, name="zeta_x")
                P["kx_hat"] = cp.Parameter((N, Nx), nonneg=True, name="kx_hat")
                P["kx_hat2"] = cp.Parameter((N, Nx), nonneg=True, name="kx_hat2")
                P["lam_x"] = cp.Parameter((N, Nx), nonneg=True, name="lam_x")
                quad = cp.reshape(cp.hstack([spec.alpha[j] @ Sx[k + 1] @ spec.alpha[j]
                                             for k in range(N) for j in range(Nx)]), (N, Nx), order="C")
                cons.append(xbar[1:] @ spec.alpha.T + spec.beta[None, :] + qx * kx <= 0)
                cons.append(quad - 2 * cp.multiply(P["kx_hat"], kx) + P["kx_hat2"] <= zx)
                pen = pen + cp.sum(cp.multiply(P["lam_x"], zx)) + 0.5 * P["w"] * cp.sum_squares(zx)
                V.update(kappa_x=kx, zeta_x=zx)
            if Nu:
                ku = cp.Variable((N, Nu), nonneg=True, name="kappa_u")
                zu = cp.Variable((N, Nu), nonneg=True, name="zeta_u")
                P["ku_hat"] = cp.Parameter((N, Nu), nonneg=True, name="ku_hat")
                P["ku_hat2"] = cp.Parameter((N, Nu), nonneg=True, name="ku_hat2")
                P["lam_u"] = cp.Parameter((N, Nu), nonneg=True, name="lam_u")
                quad = cp.reshape(cp.hstack([spec.a[j] @ Y[k][:m, :m] @ spec.a[j]
                                             for k in range(N) for j in range(Nu)]), (N, Nu), order="C")
                cons.append(v @ spec.a.T + spec.b[None, :] + qu * ku <= 0)
                cons.append(quad - 2 * cp.multiply(P["ku_hat"], ku) + P["ku_hat2"] <= zu)
                pen = pen + cp.sum(cp.multiply(P["lam_u"], zu)) + 0.5 * P["w"] * cp.sum_squares(zu)
                V.update(kappa_u=ku, zeta_u=zu)
            n_cc = N * (Nx + Nu)
            census["variables"].update({"kappa_x": N * Nx, "kappa_u": N * Nu, "zeta_x": N * Nx, "zeta_u": N * Nu})
            ineq["chance_linear"] = n_cc
            ineq["chance_surrogate"] = n_cc
            ineq["kappa_nonneg"] = n_cc
            ineq["zeta_nonneg"] = n_cc

        if trust_region:
            wx, wu, wk = spec.tr_weights
            P["r"] = cp.Parameter(nonneg=True, name="tr_radius")
            P["x_hat"] = cp.Parameter((N + 1, n), name="x_hat")
            P["u_hat"] = cp.Parameter((N, m), name="u_hat")
            P["s_hat"] = cp.Parameter(N, name="sigma_hat")
            cons += [wx * cp.abs(xbar - P["x_hat"]) <= P["r"], wu * cp.abs(v - P["u_hat"]) <= P["r"],
                     wu * cp.abs(sig - P["s_hat"]) <= P["r"]]
            rows = 2 * ((N + 1) * n + N * m + N)
            if kx is not None:
                P["kx_ref"] = cp.Parameter((N, Nx), name="kx_ref")
                cons.append(wk * cp.abs(kx - P["kx_ref"]) <= P["r"])
                rows += 2 * N * Nx
            if ku is not None:
                P["ku_ref"] = cp.Parameter((N, Nu), name="ku_ref")
                cons.append(wk * cp.abs(ku - P["ku_ref"]) <= P["r"])
                rows += 2 * N * Nu
            ineq["trust_region"] = rows

        self.problem = cp.Problem(cp.Minimize(cost + pen), cons)
        V["_reg_cost"] = cost
        self.variables = V
        self.census = census

    def bind(self, dm, ref, scp_state, dm_sigma=None, ref_moments=None):
        """Load iteration data into the parameters; returns a :class:`Subproblem`.

        With ``spec.sigma_sensitivity`` set, ``dm_sigma`` holds the
        derivatives of the blocks with respect to ``sigma_hat`` and
        ``ref_moments`` the reference ``(Sigma_x, U, Y)`` they act on.
        """
        spec = self.spec
        n = spec.dynamics.state_dim
        N, Nx, Nu = spec.N, spec.N_x, spec.N_u
        if dm.N != N or ref.N != N:
            raise ValueError("discrete model, reference and spec disagree on N")
        P = self.params
        sel = _sym_rows(n)
        for k in range(N):
            P["M"][k].value = sel @ covariance_map(dm.A[k], dm.F[k], dm.At[k], dm.Ft[k], dm.delta_tau[k])
            P["A"][k].value = dm.A[k]
            P["F"][k].value = dm.F[k]
            for i in range(dm.noise_dim):
                P["At"][i][k].value = dm.At[k, i]
                P["Ft"][i][k].value = dm.Ft[k, i]
        P["d"].value = dm.d
        slopes = np.zeros((N, n, n))
        for k in range(N):
            G = np.zeros(_sym_count(n))
            if spec.sigma_sensitivity and dm_sigma is not None and ref_moments is not None:
                S, U, Y = (np.asarray(a[k], dtype=float) for a in ref_moments)
                full = _map_derivative(dm, dm_sigma, k) @ np.concatenate(
                    [S.ravel("F"), U.ravel("F"), Y.ravel("F")])
                slopes[k] = full.reshape(n, n, order="F")
                G = sel @ full
            P["G"][k].value = G
            P["Gs"][k].value = G * ref.sigma_hat[k]
        for i in range(dm.noise_dim):
            P["dt"][i].value = dm.dt[:, i]
        P["mu"].value = np.asarray(scp_state.mu, dtype=float).reshape(N, n)
        P["w"].value = float(scp_state.w)
        if self.chance:
            if ref.kappa_x_hat.shape != (N, Nx) or ref.kappa_u_hat.shape != (N, Nu):
                raise MalformedReference("kappa reference has the wrong shape")
            lam = np.asarray(scp_state.lam, dtype=float)
            if Nx:
                kh = np.maximum(ref.kappa_x_hat, KAPPA_FLOOR)
                P["kx_hat"].value = kh
                P["kx_hat2"].value = kh ** 2
                P["lam_x"].value = lam[:N * Nx].reshape(N, Nx)
            if Nu:
                kh = np.maximum(ref.kappa_u_hat, KAPPA_FLOOR)
                P["ku_hat"].value = kh
                P["ku_hat2"].value = kh ** 2
                P["lam_u"].value = lam[N * Nx:].reshape(N, Nu)
        if self.trust_region:
            P["r"].value = float(scp_state.tr_radius)
            P["x_hat"].value = ref.x_hat
            P["u_hat"].value = ref.u_hat
            P["s_hat"].value = ref.sigma_hat
            if "kx_ref" in P:
                P["kx_ref"].value = ref.kappa_x_hat
            if "ku_ref" in P:
                P["ku_ref"].value = ref.kappa_u_hat
        return Subproblem(self.problem, self.variables, self.census, self.chance, spec,
                          sigma_slopes=slopes, sigma_ref=np.array(ref.sigma_hat, dtype=float))


def build_subproblem(spec, dm, ref, scp_state, chance=True, trust_region=True, template=None,
                     dm_sigma=None, ref_moments=None):
    """Assemble the penalized convex subproblem about ``ref``.

    ``scp_state`` supplies ``mu`` (length ``N n``), ``lam`` (length
    ``(N_x + N_u) N``, state rows first), the weight ``w`` and the trust-region
    radius ``tr_radius``. With ``chance=False`` the chance constraints and their
    lifts are omitted (the warm-start program). Passing a matching
    ``template`` reuses its compiled form.
    """
    if template is None:
        template = SubproblemTemplate(spec, chance=chance, trust_region=trust_region)
    return template.bind(dm, ref, scp_state, dm_sigma, ref_moments)


def _value(var, shape):
    if var is None:
        return np.zeros(shape)
    return np.asarray(var.value, dtype=float).reshape(shape)


def solve_subproblem(program, backend=None):
    """Solve ``program`` and map the backend result onto named arrays."""
    backend = backend or CvxpyBackend()
    status, message = backend.solve(program.problem)
    spec = program.spec
    n = spec.dynamics.state_dim
    m = spec.dynamics.control_dim
    nd = spec.dynamics.noise_dim
    N, Nx, Nu = spec.N, spec.N_x, spec.N_u
    V = program.variables
    if not status.usable or V["xbar"].value is None:
        nan = np.full
        return SubproblemSolution(
            nan((N + 1, n), np.nan), nan((N + 1, n, n), np.nan), nan((N, m), np.nan),
            nan(N, np.nan), nan((N, m + 1, n), np.nan), nan((N, m + 1, m + 1), np.nan),
            nan((nd, N, n, n), np.nan), nan((N, Nx), np.nan), nan((N, Nu), np.nan),
            nan((N, n), np.nan), nan((N, Nx), np.nan), nan((N, Nu), np.nan),
            float("nan"), status if not status.usable else SolverStatus.NUMERICAL_FAILURE, message,
        )

    def sym(val):
        val = np.asarray(val, dtype=float)
        return 0.5 * (val + val.T)

    U = np.stack([np.vstack([np.asarray(u.value).reshape(m, n), np.zeros((1, n))]) for u in V["U"]])
    return SubproblemSolution(
        xbar=_value(V["xbar"], (N + 1, n)),
        Sigma_x=np.stack([sym(S.value) for S in V["Sigma_x"]]),
        v=_value(V["v"], (N, m)),
        sigma=_value(V["sigma"], (N,)),
        U=U,
        Y=np.stack([sym(Yk.value) for Yk in V["Y"]]),
        Sigma_tilde=np.stack([np.stack([sym(S.value) for S in row]) for row in V["Sigma_tilde"]]),
        kappa_x=_value(V.get("kappa_x"), (N, Nx)),
        kappa_u=_value(V.get("kappa_u"), (N, Nu)),
        xi=_value(V["xi"], (N, n)),
        zeta_x=_value(V.get("zeta_x"), (N, Nx)),
        zeta_u=_value(V.get("zeta_u"), (N, Nu)),
        objective_value=float(program.problem.value),
        status=status,
        message=message,
    )


@dataclass(frozen=True)
class LosslessnessReport:
    y_residuals: np.ndarray            # (N,)
    sigma_tilde_residuals: np.ndarray  # (d, N)
    tol: float

    @property
    def max_residual(self):
        return float(max(self.y_residuals.max(initial=0.0), self.sigma_tilde_residuals.max(initial=0.0)))

    @property
    def passed(self):
        return self.max_residual <= self.tol


def check_losslessness(sol, dm, tol=1e-4):
    """Relative gaps of the two Schur relaxations at a solution."""
    res_y = []
    res_s = np.zeros((dm.noise_dim, sol.N))
    vt = np.concatenate([sol.v, sol.sigma[:, None]], axis=1)
    for k in range(sol.N):
        S = sol.Sigma_x[k]
        if np.min(np.linalg.eigvalsh(S)) <= 1e-9:
            raise SingularCovariance(f"Sigma_x[{k}] is numerically singular")
        tight = sol.U[k] @ np.linalg.solve(S, sol.U[k].T)
        res_y.append(np.linalg.norm(sol.Y[k] - tight) / max(1.0, np.linalg.norm(sol.Y[k])))
        for i in range(dm.noise_dim):
            q = dm.At[k, i] @ sol.xbar[k] + dm.Ft[k, i] @ vt[k] + dm.dt[k, i]
            St = sol.Sigma_tilde[i, k]
            res_s[i, k] = np.linalg.norm(St - np.outer(q, q)) / max(1.0, np.linalg.norm(St))
    return LosslessnessReport(np.array(res_y), res_s, tol)


def export_conic_program(program, path, solver="CLARABEL"):
    """Write the canonical conic form ``min c'x + x'Px/2 s.t. Ax + s = b, s in K``.

    Layout: a header block of ``key value`` lines (``n_vars``, ``n_rows``,
    ``zero``, ``nonneg``, ``soc``, ``psd``, ``offset``), then sections
    ``# c``, ``# b`` (one ``index value`` per line), ``# A`` and ``# P``
    (``row col value`` COO triplets). Numbers use 17 significant digits.
    PSD cones use cvxpy's scaled lower-triangular vectorization.
    """
    data, _, _ = program.problem.get_problem_data(solver)
    A = data["A"].tocoo()
    dims = data["dims"]
    lines = [
        f"n_vars {A.shape[1]}",
        f"n_rows {A.shape[0]}",
        f"zero {dims.zero}",
        f"nonneg {dims.nonneg}",
        "soc " + " ".join(str(s) for s in dims.soc),
        "psd " + " ".join(str(s) for s in dims.psd),
        f"offset {float(data.get('offset', 0.0)):.17g}",
        "# c",
    ]
    c = np.asarray(data["c"], dtype=float)
    lines += [f"{i} {val:.17g}" for i, val in enumerate(c) if val != 0.0]
    lines.append("# b")
    b = np.asarray(data["b"], dtype=float)
    lines += [f"{i} {val:.17g}" for i, val in enumerate(b) if val != 0.0]
    lines.append("# A")
    lines += [f"{r} {cc} {val:.17g}" for r, cc, val in zip(A.row, A.col, A.data)]
    lines.append("# P")
    if data.get("P") is not None:
        P = data["P"].tocoo()
        lines += [f"{r} {cc} {val:.17g}" for r, cc, val in zip(P.row, P.col, P.data)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return {"n_vars": A.shape[1], "n_rows": A.shape[0], "zero": dims.zero, "nonneg": dims.nonneg,
            "soc": list(dims.soc), "psd": list(dims.psd)}

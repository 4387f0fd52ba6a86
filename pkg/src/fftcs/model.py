"""Problem definition: dynamics, boundary moments, polytopes and weights.

All evaluable maps broadcast over leading batch axes, so ``f(x, u)`` with
``x`` of shape ``(..., n)`` and ``u`` of shape ``(..., m)`` returns
``(..., n)``. The Monte Carlo module relies on this to simulate all rollouts
at once; models that cannot broadcast should set ``batched=False``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonFiniteEvaluation, SpecValidationError

__all__ = [
    "DynamicsModel",
    "ScpParams",
    "McParams",
    "ProblemSpec",
    "JacobianReport",
    "make_double_integrator",
    "make_linear_model",
    "finite_difference_model",
    "check_jacobians",
    "double_integrator_spec",
    "uniform_mesh",
]

Array = np.ndarray


@dataclass(frozen=True)
class DynamicsModel:
    """Drift ``f``, diffusion ``g`` (columns are noise channels) and Jacobians.

    Shapes for a single point: ``drift -> (n,)``, ``diffusion -> (n, d)``,
    ``drift_jac_x -> (n, n)``, ``drift_jac_u -> (n, m)``,
    ``diffusion_jac_x -> (d, n, n)``, ``diffusion_jac_u -> (d, n, m)``.
    """

    state_dim: int
    control_dim: int
    noise_dim: int
    drift: Callable[[Array, Array], Array]
    diffusion: Callable[[Array, Array], Array]
    drift_jac_x: Callable[[Array, Array], Array]
    drift_jac_u: Callable[[Array, Array], Array]
    diffusion_jac_x: Callable[[Array, Array], Array]
    diffusion_jac_u: Callable[[Array, Array], Array]
    name: str = "custom"
    jacobian_source: str = "analytic"
    batched: bool = True
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for attr in ("state_dim", "control_dim", "noise_dim"):
            if int(getattr(self, attr)) < 1:
                raise SpecValidationError(f"dynamics.{attr}", "must be a positive integer")

    def diffusion_column(self, i, x, u):
        return self.diffusion(x, u)[..., i]


def make_double_integrator(C_D=0.15, g0=0.2, g1=0.0):
    """Double integrator with quadratic drag and velocity-dependent noise.

    State ``[r, v]``, control ``a``, one noise channel::

        f = [v, a - C_D v|v|],   g = [0, g0 + g1 |v|]

    ``v|v|`` has derivative ``2|v|``, which is continuous and zero at the
    origin; the noise gain ``|v|`` uses the subgradient 0 at ``v = 0``.
    """
    if C_D < 0 or g0 < 0 or g1 < 0:
        raise SpecValidationError("dynamics", "C_D, g0 and g1 must be nonnegative")

    def drift(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        v = x[..., 1]
        return np.stack([v, u[..., 0] - C_D * v * np.abs(v)], axis=-1)

    def diffusion(x, u):
        x = np.asarray(x, dtype=float)
        v = x[..., 1]
        col = np.stack([np.zeros_like(v), g0 + g1 * np.abs(v)], axis=-1)
        return col[..., None]

    def drift_jac_x(x, u):
        x = np.asarray(x, dtype=float)
        v = x[..., 1]
        J = np.zeros(v.shape + (2, 2))
        J[..., 0, 1] = 1.0
        J[..., 1, 1] = -2.0 * C_D * np.abs(v)
        return J

    def drift_jac_u(x, u):
        x = np.asarray(x, dtype=float)
        J = np.zeros(x.shape[:-1] + (2, 1))
        J[..., 1, 0] = 1.0
        return J

    def diffusion_jac_x(x, u):
        x = np.asarray(x, dtype=float)
        v = x[..., 1]
        J = np.zeros(v.shape + (1, 2, 2))
        J[..., 0, 1, 1] = g1 * np.sign(v)
        return J

    def diffusion_jac_u(x, u):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (1, 2, 1))

    return DynamicsModel(
        2, 1, 1, drift, diffusion, drift_jac_x, drift_jac_u,
        diffusion_jac_x, diffusion_jac_u,
        name="double_integrator", params={"C_D": C_D, "g0": g0, "g1": g1},
    )


def make_linear_model(A, B, G=None, Gx=None, Gu=None):
    """Linear SDE ``dx = (Ax + Bu) dt + sum_i (G_i + Gx_i x + Gu_i u) dw_i``.

    ``G`` is ``(n, d)``; ``Gx`` is ``(d, n, n)`` and ``Gu`` is ``(d, n, m)``.
    Mostly useful for tests, where every discretization step has a closed form.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, m = B.shape
    G = np.zeros((n, 1)) if G is None else np.asarray(G, dtype=float)
    d = G.shape[1]
    Gx = np.zeros((d, n, n)) if Gx is None else np.asarray(Gx, dtype=float)
    Gu = np.zeros((d, n, m)) if Gu is None else np.asarray(Gu, dtype=float)

    def drift(x, u):
        return np.einsum("ij,...j->...i", A, x) + np.einsum("ij,...j->...i", B, u)

    def diffusion(x, u):
        cols = G + np.einsum("kij,...j->...ik", Gx, x) + np.einsum("kij,...j->...ik", Gu, u)
        return cols

    def batch(arr, x):
        return np.broadcast_to(arr, np.shape(x)[:-1] + arr.shape).copy()

    return DynamicsModel(
        n, m, d, drift, diffusion,
        lambda x, u: batch(A, x), lambda x, u: batch(B, x),
        lambda x, u: batch(Gx, x), lambda x, u: batch(Gu, x),
        name="linear",
    )


def _fd_jacobian(fun, x, u, wrt, h_rel=1e-6):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    base = x if wrt == "x" else u
    cols = []
    for j in range(base.size):
        h = h_rel * (1.0 + abs(base[j]))
        plus, minus = base.copy(), base.copy()
        plus[j] += h
        minus[j] -= h
        if wrt == "x":
            fp, fm = fun(plus, u), fun(minus, u)
        else:
            fp, fm = fun(x, plus), fun(x, minus)
        cols.append((np.asarray(fp) - np.asarray(fm)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def finite_difference_model(drift, diffusion, state_dim, control_dim, noise_dim, name="fd"):
    """Build a model whose Jacobians come from central differences.

    The result is tagged ``jacobian_source="finite_difference"`` and only
    evaluates single points (``batched=False``).
    """

    def jx(x, u):
        return _fd_jacobian(drift, x, u, "x")

    def ju(x, u):
        return _fd_jacobian(drift, x, u, "u")

    def gjx(x, u):
        # (n, d, n) -> (d, n, n)
        return np.moveaxis(_fd_jacobian(diffusion, x, u, "x"), 1, 0)

    def gju(x, u):
        return np.moveaxis(_fd_jacobian(diffusion, x, u, "u"), 1, 0)

    return DynamicsModel(
        state_dim, control_dim, noise_dim, drift, diffusion, jx, ju, gjx, gju,
        name=name, jacobian_source="finite_difference", batched=False,
    )


@dataclass(frozen=True)
class JacobianReport:
    max_rel_error: dict
    tol: float
    jacobian_source: str

    @property
    def passed(self):
        return all(err <= self.tol for err in self.max_rel_error.values())


def check_jacobians(model, samples, tol=1e-5):
    """Compare analytic Jacobians with central differences at ``samples``.

    The error for each map is ``max|J - J_fd| / max(1, max|J_fd|)`` taken over
    all samples; the check passes when every map is within ``tol``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("samples must be non-empty")
    errors = {"drift_jac_x": 0.0, "drift_jac_u": 0.0, "diffusion_jac_x": 0.0, "diffusion_jac_u": 0.0}
    for x, u in samples:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        for fname in ("drift", "diffusion"):
            val = np.asarray(getattr(model, fname)(x, u))
            if not np.all(np.isfinite(val)):
                raise NonFiniteEvaluation(f"{fname} is not finite at x={x}, u={u}")
        pairs = {
            "drift_jac_x": (model.drift_jac_x(x, u), _fd_jacobian(model.drift, x, u, "x")),
            "drift_jac_u": (model.drift_jac_u(x, u), _fd_jacobian(model.drift, x, u, "u")),
            "diffusion_jac_x": (
                model.diffusion_jac_x(x, u),
                np.moveaxis(_fd_jacobian(model.diffusion, x, u, "x"), 1, 0),
            ),
            "diffusion_jac_u": (
                model.diffusion_jac_u(x, u),
                np.moveaxis(_fd_jacobian(model.diffusion, x, u, "u"), 1, 0),
            ),
        }
        for key, (analytic, numeric) in pairs.items():
            analytic = np.asarray(analytic, dtype=float)
            if not np.all(np.isfinite(analytic)):
                raise NonFiniteEvaluation(f"{key} is not finite at x={x}, u={u}")
            scale = max(1.0, float(np.max(np.abs(numeric), initial=0.0)))
            err = float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale
            errors[key] = max(errors[key], err)
    return JacobianReport(errors, tol, model.jacobian_source)


@dataclass(frozen=True)
class ScpParams:
    """SCvx* loop parameters. Defaults reproduce the additive-noise study."""

    eps_opt: float = 1e-5
    eps_feas: float = 1e-5
    rho0: float = 0.0
    rho1: float = 0.25
    rho2: float = 0.7
    alpha1: float = 2.0
    alpha2: float = 3.0
    beta: float = 2.0
    gamma: float = 0.9
    w0: float = 100.0
    w_max: float = 1e6
    tr0: float = 0.1
    tr_min: float = 1e-10
    tr_max: float = 10.0
    ell_max: int = 100

    def __post_init__(self):
        checks = [
            ("eps_opt", self.eps_opt > 0, "must be > 0"),
            ("eps_feas", self.eps_feas > 0, "must be > 0"),
            ("rho1", self.rho0 < self.rho1 < self.rho2, "requires rho0 < rho1 < rho2"),
            ("alpha1", self.alpha1 > 1, "must be > 1"),
            ("alpha2", self.alpha2 > 1, "must be > 1"),
            ("beta", self.beta > 1, "must be > 1"),
            ("gamma", 0 < self.gamma < 1, "must lie in (0, 1)"),
            ("w0", self.w0 > 0, "must be > 0"),
            ("w_max", self.w_max >= self.w0, "must be >= w0"),
            ("tr_min", 0 < self.tr_min <= self.tr0 <= self.tr_max, "requires 0 < tr_min <= tr0 <= tr_max"),
            ("ell_max", self.ell_max >= 1, "must be >= 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise SpecValidationError(f"scp.{name}", msg)


@dataclass(frozen=True)
class McParams:
    N_mc: int = 1000
    n_sub: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.N_mc < 2:
            raise SpecValidationError("mc.N_mc", "must be >= 2")
        if self.n_sub < 1:
            raise SpecValidationError("mc.n_sub", "must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise SpecValidationError("mc.seed", "must be an unsigned 64-bit integer")


def uniform_mesh(N):
    return np.full(N, 1.0 / N)


def _is_pd(S):
    return np.allclose(S, S.T, atol=1e-12) and np.min(np.linalg.eigvalsh(S)) > 0


def _is_psd(S):
    return np.allclose(S, S.T, atol=1e-12) and np.min(np.linalg.eigvalsh(S)) >= -1e-12


@dataclass(frozen=True)
class ProblemSpec:
    """A complete free-final-time covariance steering instance.

    Half-spaces are stored as stacked arrays: the state polytope is
    ``alpha @ x + beta <= 0`` row-wise, the control polytope
    ``a @ u + b <= 0``. ``mode`` selects the full diffusion linearization or
    the frozen-diffusion baseline.
    """

    dynamics: DynamicsModel
    mu_i: Array
    Sigma_i: Array
    mu_f: Array
    Sigma_f: Array
    alpha: Array
    beta: Array
    a: Array
    b: Array
    Delta_x: float = 0.1
    Delta_u: float = 0.1
    eta: float = 1.0
    Q: Array = None
    R: Array = None
    eps_tilde_sigma: float = 1e-4
    W_tilde_sigma: Array = None
    delta_tau: Array = None
    sigma_min: float = 0.4
    sigma_max: float = 1.6
    scp: ScpParams = field(default_factory=ScpParams)
    mc: McParams = field(default_factory=McParams)
    mode: str = "full"
    ode_steps: int = 10
    reference: str = "flow"
    sigma_row_weight: float = 1e-4
    tr_weights: tuple = (1.0, 1.0, 1.0)  # W_x, W_u, W_kappa
    risk_allocation: str = "uniform"
    sigma_sensitivity: bool = True
    terminal_covariance: str = "upper"

    def __post_init__(self):
        n = self.dynamics.state_dim
        m = self.dynamics.control_dim
        conv = object.__setattr__
        for key in ("mu_i", "mu_f"):
            conv(self, key, np.asarray(getattr(self, key), dtype=float).reshape(-1))
        for key in ("Sigma_i", "Sigma_f"):
            conv(self, key, np.asarray(getattr(self, key), dtype=float))
        conv(self, "alpha", np.asarray(self.alpha, dtype=float).reshape(-1, n))
        conv(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))
        conv(self, "a", np.asarray(self.a, dtype=float).reshape(-1, m))
        conv(self, "b", np.asarray(self.b, dtype=float).reshape(-1))
        conv(self, "Q", np.zeros((n, n)) if self.Q is None else np.atleast_2d(np.asarray(self.Q, dtype=float)))
        conv(self, "R", np.zeros((m, m)) if self.R is None else np.atleast_2d(np.asarray(self.R, dtype=float)))
        conv(self, "W_tilde_sigma",
             np.eye(n) if self.W_tilde_sigma is None else np.asarray(self.W_tilde_sigma, dtype=float))
        conv(self, "delta_tau",
             uniform_mesh(30) if self.delta_tau is None else np.asarray(self.delta_tau, dtype=float).reshape(-1))
        self._validate()

    def _validate(self):
        n = self.dynamics.state_dim
        m = self.dynamics.control_dim
        for key in ("mu_i", "mu_f"):
            if getattr(self, key).shape != (n,):
                raise SpecValidationError(f"boundary.{key}", f"expected length {n}")
        for key in ("Sigma_i", "Sigma_f"):
            S = getattr(self, key)
            if S.shape != (n, n):
                raise SpecValidationError(f"boundary.{key}", f"expected shape ({n}, {n})")
            if not _is_pd(S):
                raise SpecValidationError(f"boundary.{key}", "must be symmetric positive definite")
        if self.alpha.shape[0] != self.beta.shape[0]:
            raise SpecValidationError("constraints.state_halfspaces", "alpha/beta row count mismatch")
        if self.a.shape[0] != self.b.shape[0]:
            raise SpecValidationError("constraints.control_halfspaces", "a/b row count mismatch")
        for key in ("Delta_x", "Delta_u"):
            val = getattr(self, key)
            if not 0 < val <= 0.5:
                raise SpecValidationError(f"constraints.{key}", f"must lie in (0, 0.5], got {val}")
        if self.eta < 0:
            raise SpecValidationError("objective.eta", "must be >= 0")
        if self.Q.shape != (n, n) or not _is_psd(self.Q):
            raise SpecValidationError("objective.Q", f"must be a PSD ({n}, {n}) matrix")
        if self.R.shape != (m, m) or not _is_psd(self.R):
            raise SpecValidationError("objective.R", f"must be a PSD ({m}, {m}) matrix")
        if self.eps_tilde_sigma <= 0:
            raise SpecValidationError("objective.eps_tilde_sigma", "must be > 0")
        if self.W_tilde_sigma.shape != (n, n) or not _is_pd(self.W_tilde_sigma):
            raise SpecValidationError("objective.W_tilde_sigma", "must be positive definite")
        dt = self.delta_tau
        if dt.size < 1 or np.any(dt <= 0):
            raise SpecValidationError("mesh.delta_tau", "interval widths must be positive")
        if abs(dt.sum() - 1.0) > 1e-12:
            raise SpecValidationError("mesh.delta_tau", f"must sum to 1, got {dt.sum()!r}")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise SpecValidationError("dilation", "requires 0 < sigma_min <= sigma_max")
        if self.mode not in ("full", "frozen"):
            raise SpecValidationError("mode", "must be 'full' or 'frozen'")
        if self.reference not in ("nodal", "flow"):
            raise SpecValidationError("reference", "must be 'nodal' or 'flow'")
        w = tuple(float(x) for x in self.tr_weights)
        if len(w) != 3 or min(w) <= 0:
            raise SpecValidationError("scp.tr_weights", "expects three positive weights")
        object.__setattr__(self, "tr_weights", w)
        if self.risk_allocation not in ("uniform", "per_constraint"):
            raise SpecValidationError("constraints.risk_allocation", "must be 'uniform' or 'per_constraint'")
        if self.terminal_covariance not in ("equality", "upper"):
            raise SpecValidationError("boundary.terminal_covariance", "must be 'equality' or 'upper'")
        if self.ode_steps < 1:
            raise SpecValidationError("ode_steps", "must be >= 1")

    @property
    def N(self):
        return self.delta_tau.size

    @property
    def N_x(self):
        return self.alpha.shape[0]

    @property
    def N_u(self):
        return self.a.shape[0]

    @property
    def tau(self):
        return np.concatenate([[0.0], np.cumsum(self.delta_tau)])

    @property
    def delta_x(self):
        """Per-(node, row) state risk.

        ``"uniform"`` splits the joint budget evenly over nodes and rows;
        ``"per_constraint"`` gives every row at every node the full budget.
        """
        if not self.N_x:
            return 0.0
        if self.risk_allocation == "per_constraint":
            return self.Delta_x
        return self.Delta_x / (self.N * self.N_x)

    @property
    def delta_u(self):
        if not self.N_u:
            return 0.0
        if self.risk_allocation == "per_constraint":
            return self.Delta_u
        return self.Delta_u / (self.N * self.N_u)


def double_integrator_spec(eta=1.0, g0=0.2, g1=0.0, C_D=0.15, N=30, u_max=5.0, **overrides):
    """The drag double-integrator transfer from ``[0, 0]`` to ``[1, 0]``."""
    dyn = make_double_integrator(C_D, g0, g1)
    kwargs = dict(
        dynamics=dyn,
        mu_i=[0.0, 0.0],
        Sigma_i=0.15 * np.eye(2),
        mu_f=[1.0, 0.0],
        Sigma_f=0.15 * np.eye(2),
        alpha=np.zeros((0, 2)),
        beta=np.zeros(0),
        a=[[1.0], [-1.0]],
        b=[-u_max, -u_max],
        Delta_x=0.1,
        Delta_u=0.1,
        eta=eta,
        Q=np.diag([10.0, 1.0]),
        R=[[0.1]],
        eps_tilde_sigma=1e-4,
        delta_tau=uniform_mesh(N),
        sigma_min=0.4,
        sigma_max=1.6,
        risk_allocation="per_constraint",
    )
    kwargs.update(overrides)
    return ProblemSpec(**kwargs)

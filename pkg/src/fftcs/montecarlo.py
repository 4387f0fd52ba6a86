"""Monte Carlo validation of a policy on the nonlinear time-scaled SDE.

Rollouts use Milstein's scheme with ``n_sub`` sub-steps per normalized
interval. Control is computed from the state at the interval's left node and
held over its sub-steps. Every rollout draws from its own stream keyed by
``(seed, rollout_index)``, so results do not depend on how rollouts are
grouped or scheduled.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .discretize import OdeSettings, discretize_all, worker_count
from .errors import NonFiniteState
from .moments import propagate_moments

__all__ = [
    "McReport",
    "milstein_rollout",
    "simulate_rollouts",
    "chebyshev_risk",
    "validate",
    "write_report",
    "write_std_csv",
]

CHUNK = 125


def rollout_rng(seed, rollout_index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rollout_index,)))


def _increments(model, mesh, n_sub, seed, index):
    rng = rollout_rng(seed, index)
    z0 = rng.standard_normal(model.state_dim)
    dw = rng.standard_normal((len(mesh), n_sub, model.noise_dim))
    return z0, dw


def _sqrt_factor(S):
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.maximum(w, 0.0))


def _eval(model, name, x, u):
    fun = getattr(model, name)
    if model.batched:
        return fun(x, u)
    return np.stack([np.asarray(fun(xi, ui), dtype=float) for xi, ui in zip(x, u)])


def _batch(model, policy, xbar, mesh, n_sub, z0, dw):
    """Advance a batch of rollouts. ``z0``: (B, n), ``dw``: (B, N, n_sub, d) standard normals.

    Only elementwise operations and fixed-length reductions are used on the
    batch axis, so each row's result is independent of the batch it is in.
    """
    B, n = z0.shape
    L0 = _sqrt_factor(xbar.Sigma0)
    x = xbar.mu0 + (z0[:, None, :] * L0[None, :, :]).sum(axis=2)
    xs = [x]
    us = []
    ok = np.ones(B, dtype=bool)
    for k, dtau in enumerate(mesh):
        s = policy.sigma[k]
        u = policy.v[k] + (policy.K[k][None, :, :] * (x - xbar.nodes[k])[:, None, :]).sum(axis=2)
        us.append(u)
        h = dtau / n_sub
        for j in range(n_sub):
            dW = dw[:, k, j, :] * math.sqrt(h)
            f = _eval(model, "drift", x, u)
            G = _eval(model, "diffusion", x, u)           # (B, n, d)
            Jg = _eval(model, "diffusion_jac_x", x, u)    # (B, d, n, n)
            noise = (G * dW[:, None, :]).sum(axis=2)
            corr = np.zeros_like(x)
            for i in range(model.noise_dim):
                gi = G[:, :, i]
                corr = corr + (Jg[:, i] * gi[:, None, :]).sum(axis=2) * (dW[:, i] ** 2 - h)[:, None]
            x = x + s * f * h + math.sqrt(s) * noise + 0.5 * s * corr
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            ok &= ~bad
            x = np.where(bad[:, None], np.nan, x)
        xs.append(x)
    return np.stack(xs, axis=1), np.stack(us, axis=1), ok


@dataclass(frozen=True)
class _MeanTrajectory:
    nodes: np.ndarray   # (N+1, n) analytic mean
    mu0: np.ndarray
    Sigma0: np.ndarray


def _as_mean(moment_traj):
    return _MeanTrajectory(np.asarray(moment_traj.xbar, dtype=float),
                           np.asarray(moment_traj.xbar[0], dtype=float),
                           np.asarray(moment_traj.Sigma_x[0], dtype=float))


def milstein_rollout(model, policy, moment_traj, mesh, n_sub, seed, rollout_index):
    """One sample path at the nodes, shape ``(N+1, n)``.

    ``moment_traj`` supplies the feedback reference ``xbar`` and the initial
    moments (``xbar[0]``, ``Sigma_x[0]``).
    """
    mesh = np.asarray(mesh, dtype=float)
    z0, dw = _increments(model, mesh, n_sub, seed, rollout_index)
    X, _, ok = _batch(model, policy, _as_mean(moment_traj), mesh, n_sub, z0[None], dw[None])
    if not ok[0]:
        raise NonFiniteState(f"rollout {rollout_index} left the finite range")
    return X[0]


def simulate_rollouts(model, policy, moment_traj, mesh, n_sub, seed, n_rollouts, threads=1):
    """All rollouts in index order: states ``(R, N+1, n)``, controls ``(R, N, m)``, finite mask."""
    mesh = np.asarray(mesh, dtype=float)
    mean = _as_mean(moment_traj)
    chunks = [range(i, min(i + CHUNK, n_rollouts)) for i in range(0, n_rollouts, CHUNK)]

    def one(idx):
        draws = [_increments(model, mesh, n_sub, seed, r) for r in idx]
        z0 = np.stack([d[0] for d in draws])
        dw = np.stack([d[1] for d in draws])
        return _batch(model, policy, mean, mesh, n_sub, z0, dw)

    workers = worker_count(threads)
    if workers == 1:
        parts = [one(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, chunks))
    X = np.concatenate([p[0] for p in parts])
    U = np.concatenate([p[1] for p in parts])
    ok = np.concatenate([p[2] for p in parts])
    return X, U, ok


def chebyshev_risk(mean, std, margin_offset):
    """Worst-case probability of ``c' x + e > 0`` over distributions with the given moments.

    ``mean`` and ``std`` are those of ``c' x``; ``margin_offset`` is ``e``.
    One-sided Chebyshev (Cantelli) bound; 1 when the mean itself violates.
    """
    slack = -(mean + margin_offset)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(std > 0, slack / std, np.inf)
    return np.where(slack <= 0, 1.0, 1.0 / (1.0 + np.where(np.isfinite(t), t, np.inf) ** 2))


@dataclass(frozen=True)
class McReport:
    empirical_mean: np.ndarray   # (N+1, n)
    empirical_cov: np.ndarray    # (N+1, n, n)
    terminal_std: np.ndarray     # (n,)
    worst_case_control_risk: float
    worst_case_state_risk: float
    per_constraint_violation_rates: dict
    n_rollouts: int
    seed: int
    worst_case_control_dr_risk: float = 0.0
    worst_case_state_dr_risk: float = 0.0
    n_failed: int = 0
    mode: str = "full"
    node_tau: np.ndarray = None
    node_time: np.ndarray = None
    analytic_std: np.ndarray = None

    def as_dict(self):
        return {
            "mode": self.mode,
            "n_rollouts": self.n_rollouts,
            "seed": self.seed,
            "n_failed": self.n_failed,
            "terminal_std": self.terminal_std.tolist(),
            "worst_case_control_risk": self.worst_case_control_risk,
            "worst_case_state_risk": self.worst_case_state_risk,
            "worst_case_control_dr_risk": self.worst_case_control_dr_risk,
            "worst_case_state_dr_risk": self.worst_case_state_dr_risk,
            "per_constraint_violation_rates": self.per_constraint_violation_rates,
            "empirical_mean": self.empirical_mean.tolist(),
            "empirical_cov": self.empirical_cov.tolist(),
        }


def _pairwise_mean(X):
    # numpy's add.reduce is pairwise along a contiguous axis, which fixes the order
    return np.add.reduce(X, axis=0) / X.shape[0]


def _sample_cov(X, mean):
    D = X - mean
    outer = D[:, :, :, None] * D[:, :, None, :]
    return np.add.reduce(outer, axis=0) / (X.shape[0] - 1)


def validate(model, run_output, spec, n_rollouts=None, n_sub=None, seed=None, threads=1):
    """Roll the converged policy out on the nonlinear SDE and summarize.

    ``run_output`` is a :class:`~fftcs.scp.RunResult` or a solution object.
    The feedback reference is the analytic mean of the discrete model at the
    solution. Worst-case risks are violation frequencies maximized over
    ``(row, node)``; a row is violated when ``a' u + b > 0`` strictly. The
    ``*_dr_risk`` fields hold the Cantelli bound at the empirical moments,
    maximized the same way.
    """
    sol = getattr(run_output, "solution", run_output)
    n_rollouts = spec.mc.N_mc if n_rollouts is None else int(n_rollouts)
    n_sub = spec.mc.n_sub if n_sub is None else int(n_sub)
    seed = spec.mc.seed if seed is None else int(seed)
    policy = sol.policy()
    ref = sol.as_reference()
    dm = discretize_all(model, ref, spec.delta_tau, OdeSettings(spec.ode_steps),
                        mode=spec.mode, reference=spec.reference, threads=threads)
    traj = propagate_moments(dm, policy, spec.mu_i, spec.Sigma_i)

    X, U, ok = simulate_rollouts(model, policy, traj, spec.delta_tau, n_sub, seed, n_rollouts, threads)
    Xg, Ug = X[ok], U[ok]
    if Xg.shape[0] < 2:
        raise NonFiniteState("fewer than two finite rollouts")
    mean = _pairwise_mean(Xg)
    cov = _sample_cov(Xg, mean)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    u_mean = _pairwise_mean(Ug)
    u_cov = _sample_cov(Ug, u_mean)

    rates = {"control": [], "state": []}
    risk_u = dr_u = 0.0
    for j in range(spec.N_u):
        a, b = spec.a[j], spec.b[j]
        viol = (Ug @ a + b) > 0                              # (R, N)
        freq = _pairwise_mean(viol.astype(float))
        rates["control"].append(freq.tolist())
        risk_u = max(risk_u, float(freq.max()))
        mu = u_mean @ a
        sd = np.sqrt(np.maximum(np.einsum("i,kij,j->k", a, u_cov, a), 0.0))
        dr_u = max(dr_u, float(np.max(chebyshev_risk(mu, sd, b))))
    risk_x = dr_x = 0.0
    for j in range(spec.N_x):
        al, be = spec.alpha[j], spec.beta[j]
        viol = (Xg[:, 1:] @ al + be) > 0
        freq = _pairwise_mean(viol.astype(float))
        rates["state"].append(freq.tolist())
        risk_x = max(risk_x, float(freq.max()))
        mu = mean[1:] @ al
        sd = np.sqrt(np.maximum(np.einsum("i,kij,j->k", al, cov[1:], al), 0.0))
        dr_x = max(dr_x, float(np.max(chebyshev_risk(mu, sd, be))))

    analytic_std = np.sqrt(np.maximum(np.diagonal(traj.Sigma_x, axis1=1, axis2=2), 0.0))
    tau = spec.tau
    t_phys = np.concatenate([[0.0], np.cumsum(spec.delta_tau * sol.sigma)])
    return McReport(
        empirical_mean=mean, empirical_cov=cov,
        terminal_std=np.sqrt(np.maximum(np.diag(cov[-1]), 0.0)),
        worst_case_control_risk=risk_u, worst_case_state_risk=risk_x,
        per_constraint_violation_rates=rates, n_rollouts=n_rollouts, seed=seed,
        worst_case_control_dr_risk=dr_u, worst_case_state_dr_risk=dr_x,
        n_failed=int((~ok).sum()), mode=spec.mode, node_tau=tau, node_time=t_phys,
        analytic_std=analytic_std,
    )


def write_report(report, path):
    with open(path, "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_std_csv(report, path):
    """Per-node empirical mean and std with normalized and physical time."""
    n = report.empirical_mean.shape[1]
    std = np.sqrt(np.maximum(np.diagonal(report.empirical_cov, axis1=1, axis2=2), 0.0))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "tau", "t_phys"] + [f"mean_{i}" for i in range(n)]
                   + [f"std_{i}" for i in range(n)])
        for k in range(report.empirical_mean.shape[0]):
            w.writerow([k, repr(float(report.node_tau[k])), repr(float(report.node_time[k]))]
                       + [repr(float(v)) for v in report.empirical_mean[k]]
                       + [repr(float(v)) for v in std[k]])

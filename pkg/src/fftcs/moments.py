"""Mean/covariance propagation through the discrete multiplicative-noise model.

With the affine policy ``u~_k = [v_k; sigma_k] + [K_k; 0](x_k - xbar_k)`` the
discrete model ``x+ = A x + F u~ + d + sum_i (At_i x + Ft_i u~ + dt_i) dw_i``
has closed-form first and second moments. :func:`simulate_discrete_linear`
is the sampling oracle for them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NegativeCovariance

__all__ = [
    "Policy",
    "MomentTrajectory",
    "EmpiricalMoments",
    "propagate_moments",
    "simulate_discrete_linear",
    "psd_repair",
    "block_rng",
]

PSD_FLOOR = -1e-10
SAMPLE_BLOCK = 8192


@dataclass(frozen=True)
class Policy:
    v: np.ndarray      # (N, m)
    sigma: np.ndarray  # (N,)
    K: np.ndarray      # (N, m, n)

    def __post_init__(self):
        for key in ("v", "sigma", "K"):
            object.__setattr__(self, key, np.asarray(getattr(self, key), dtype=float))
        N = self.sigma.shape[0]
        if self.v.shape[0] != N or self.K.shape[0] != N:
            raise DimensionMismatch("policy arrays must share N")
        if not (np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.K))
                and np.all(np.isfinite(self.sigma))):
            raise ValueError("policy has non-finite entries")

    @property
    def N(self):
        return self.sigma.shape[0]

    def v_tilde(self):
        return np.concatenate([self.v, self.sigma[:, None]], axis=1)

    def K_tilde(self):
        N, m, n = self.K.shape
        return np.concatenate([self.K, np.zeros((N, 1, n))], axis=1)


@dataclass(frozen=True)
class MomentTrajectory:
    xbar: np.ndarray     # (N+1, n)
    Sigma_x: np.ndarray  # (N+1, n, n)


@dataclass(frozen=True)
class EmpiricalMoments:
    mean: np.ndarray
    cov: np.ndarray
    mean_se: np.ndarray
    cov_se: np.ndarray
    n_samples: int


def psd_repair(S):
    """Symmetrize; clamp round-off negative eigenvalues, reject larger ones."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w[0] < PSD_FLOOR:
        raise NegativeCovariance(f"covariance eigenvalue {w[0]:.3e} below {PSD_FLOOR}")
    if w[0] < 0:
        S = (V * np.maximum(w, 0.0)) @ V.T
        S = 0.5 * (S + S.T)
    return S


def _check_dims(dm, policy, mu0, Sigma0):
    n = dm.n
    if policy.N != dm.N:
        raise DimensionMismatch(f"policy N={policy.N} vs model N={dm.N}")
    m1 = dm.F.shape[2]
    if policy.v.shape[1] + 1 != m1 or policy.K.shape[1:] != (m1 - 1, n):
        raise DimensionMismatch("policy control dimension does not match the model")
    if np.shape(mu0) != (n,) or np.shape(Sigma0) != (n, n):
        raise DimensionMismatch("initial moments have the wrong shape")


def propagate_moments(dm, policy, mu0, Sigma0, offsets=None):
    """Closed-form nodal moments under ``policy``.

    ``offsets`` (``(N, n, n)``, optional) are added to each covariance
    update; the SCP subproblem uses them for its dilation-sensitivity term.
    """
    mu0 = np.asarray(mu0, dtype=float)
    Sigma0 = np.asarray(Sigma0, dtype=float)
    _check_dims(dm, policy, mu0, Sigma0)
    vt = policy.v_tilde()
    Kt = policy.K_tilde()
    xbar = [mu0]
    Sig = [psd_repair(Sigma0)]
    for k in range(dm.N):
        x, S = xbar[-1], Sig[-1]
        Acl = dm.A[k] + dm.F[k] @ Kt[k]
        S_next = Acl @ S @ Acl.T
        for i in range(dm.noise_dim):
            Ai = dm.At[k, i] + dm.Ft[k, i] @ Kt[k]
            q = dm.At[k, i] @ x + dm.Ft[k, i] @ vt[k] + dm.dt[k, i]
            S_next = S_next + dm.delta_tau[k] * (Ai @ S @ Ai.T + np.outer(q, q))
        if offsets is not None:
            S_next = S_next + offsets[k]
        xbar.append(dm.A[k] @ x + dm.F[k] @ vt[k] + dm.d[k])
        Sig.append(psd_repair(S_next))
    return MomentTrajectory(np.array(xbar), np.array(Sig))


def block_rng(seed, block):
    """Independent stream for sample block ``block`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))


def _simulate_block(dm, policy, mu0, L0, xbar, count, rng):
    n, nd = dm.n, dm.noise_dim
    vt = policy.v_tilde()
    Kt = policy.K_tilde()
    x = mu0 + rng.standard_normal((count, n)) @ L0.T
    path = [x]
    for k in range(dm.N):
        dw = rng.standard_normal((count, nd)) * np.sqrt(dm.delta_tau[k])
        u = vt[k] + (x - xbar[k]) @ Kt[k].T
        x_next = x @ dm.A[k].T + u @ dm.F[k].T + dm.d[k]
        for i in range(nd):
            col = x @ dm.At[k, i].T + u @ dm.Ft[k, i].T + dm.dt[k, i]
            x_next = x_next + col * dw[:, i:i + 1]
        x = x_next
        path.append(x)
    return np.stack(path, axis=1)  # (count, N+1, n)


def simulate_discrete_linear(dm, policy, mu0, Sigma0, n_samples, seed, block_size=SAMPLE_BLOCK):
    """Sample the discrete recursion directly and return nodal sample moments.

    Samples are drawn in fixed-size blocks, each from its own stream keyed by
    ``(seed, block index)``, so results do not depend on how blocks are
    scheduled. Standard errors of covariance entries use the sample fourth
    moments.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    mu0 = np.asarray(mu0, dtype=float)
    Sigma0 = np.asarray(Sigma0, dtype=float)
    _check_dims(dm, policy, mu0, Sigma0)
    # the policy feeds back on deviations from the analytic mean
    xbar = propagate_moments(dm, policy, mu0, Sigma0).xbar
    w, V = np.linalg.eigh(0.5 * (Sigma0 + Sigma0.T))
    L0 = V * np.sqrt(np.maximum(w, 0.0))
    n_blocks = -(-n_samples // block_size)

    def blocks():
        for b in range(n_blocks):
            count = min(block_size, n_samples - b * block_size)
            yield _simulate_block(dm, policy, mu0, L0, xbar, count, block_rng(seed, b))

    # two passes over regenerated blocks keep memory bounded
    total = sum(X.sum(axis=0) for X in blocks())
    mean = total / n_samples
    s2 = 0.0
    s4 = 0.0
    sq = 0.0
    for X in blocks():
        dev = X - mean
        prod = np.einsum("sli,slj->slij", dev, dev)
        s2 = s2 + prod.sum(axis=0)
        s4 = s4 + (prod ** 2).sum(axis=0)
        sq = sq + (dev ** 2).sum(axis=0)
    cov = s2 / (n_samples - 1)
    m2 = s2 / n_samples
    prod_var = (s4 / n_samples - m2 ** 2) * n_samples / (n_samples - 1)
    cov_se = np.sqrt(np.maximum(prod_var, 0.0) / n_samples)
    mean_se = np.sqrt(sq / (n_samples - 1) / n_samples)
    return EmpiricalMoments(mean, cov, mean_se, cov_se, n_samples)

"""Exact-mild-solution discretization of the linearized SDE.

On each interval the transition matrix and all convolution integrals are
obtained from one stacked linear ODE ``M' = A M + R`` with
``M(tau_k) = [I 0 ... 0]``, integrated with fixed-step RK4. The diffusion
blocks are the interval averages (divided by the interval width).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import IntegrationDiverged
from .linearize import frozen_diffusion_coefficients, linearize_interval

__all__ = [
    "OdeSettings",
    "IntervalBlocks",
    "DiscreteModel",
    "discretize_interval",
    "discretize_all",
    "dump_discrete_model",
    "sigma_derivative",
    "worker_count",
]


@dataclass(frozen=True)
class OdeSettings:
    n_steps: int = 10
    diverge_threshold: float = 1e12


@dataclass(frozen=True)
class IntervalBlocks:
    A: np.ndarray
    F: np.ndarray
    d: np.ndarray
    At: np.ndarray
    Ft: np.ndarray
    dt: np.ndarray
    delta_tau: float
    x_end: np.ndarray  # reference state carried to the right node


@dataclass(frozen=True)
class DiscreteModel:
    """Stacked per-interval blocks; leading axis is the interval index."""

    A: np.ndarray   # (N, n, n)
    F: np.ndarray   # (N, n, m+1)
    d: np.ndarray   # (N, n)
    At: np.ndarray  # (N, d, n, n)
    Ft: np.ndarray  # (N, d, n, m+1)
    dt: np.ndarray  # (N, d, n)
    delta_tau: np.ndarray

    @property
    def N(self):
        return self.A.shape[0]

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def noise_dim(self):
        return self.At.shape[1]

    @classmethod
    def from_blocks(cls, blocks):
        return cls(
            A=np.stack([b.A for b in blocks]),
            F=np.stack([b.F for b in blocks]),
            d=np.stack([b.d for b in blocks]),
            At=np.stack([b.At for b in blocks]),
            Ft=np.stack([b.Ft for b in blocks]),
            dt=np.stack([b.dt for b in blocks]),
            delta_tau=np.array([b.delta_tau for b in blocks]),
        )


def _rhs_blocks(vals):
    """Inhomogeneity ``R`` of the stacked ODE, column layout of ``M``."""
    n = vals.A.shape[0]
    nd = vals.At.shape[0]
    parts = [np.zeros((n, n)), vals.F, vals.d[:, None]]
    parts += [vals.At[i] for i in range(nd)]
    parts += [vals.Ft[i] for i in range(nd)]
    parts += [vals.dt[i][:, None] for i in range(nd)]
    return vals.A, np.concatenate(parts, axis=1)


def discretize_interval(coeffs, tau_k, tau_k1, settings=OdeSettings()):
    """Integrate the stacked ODE over ``[tau_k, tau_k1]`` and extract blocks."""
    if not tau_k1 > tau_k:
        raise ValueError("tau_k1 must exceed tau_k")
    h = (tau_k1 - tau_k) / settings.n_steps
    x = np.array(coeffs.x_node, dtype=float)
    vals0 = coeffs.values(x)
    n = vals0.A.shape[0]
    m1 = vals0.F.shape[1]
    nd = vals0.At.shape[0]
    width = n + m1 + 1 + nd * n + nd * m1 + nd
    M = np.zeros((n, width))
    M[:, :n] = np.eye(n)

    def rate(x_ref, M_cur):
        A, R = _rhs_blocks(coeffs.values(x_ref))
        return coeffs.reference_rate(x_ref), A @ M_cur + R

    for _ in range(settings.n_steps):
        kx1, kM1 = rate(x, M)
        kx2, kM2 = rate(x + 0.5 * h * kx1, M + 0.5 * h * kM1)
        kx3, kM3 = rate(x + 0.5 * h * kx2, M + 0.5 * h * kM2)
        kx4, kM4 = rate(x + h * kx3, M + h * kM3)
        x = x + h / 6.0 * (kx1 + 2 * kx2 + 2 * kx3 + kx4)
        M = M + h / 6.0 * (kM1 + 2 * kM2 + 2 * kM3 + kM4)
        if not np.all(np.isfinite(M)) or np.max(np.abs(M)) > settings.diverge_threshold:
            raise IntegrationDiverged("stacked ODE exceeded the divergence threshold")

    dtau = tau_k1 - tau_k
    col = 0

    def take(width_):
        nonlocal col
        out = M[:, col:col + width_]
        col += width_
        return out

    A_k = take(n).copy()
    F_k = take(m1).copy()
    d_k = take(1)[:, 0].copy()
    At_k = np.stack([take(n) for _ in range(nd)]) / dtau
    Ft_k = np.stack([take(m1) for _ in range(nd)]) / dtau
    dt_k = np.stack([take(1)[:, 0] for _ in range(nd)]) / dtau
    return IntervalBlocks(A_k, F_k, d_k, At_k, Ft_k, dt_k, dtau, x)


def worker_count(threads=None):
    """Worker threads, capped by ``FFTCS_THREADS`` when set."""
    cap = os.environ.get("FFTCS_THREADS")
    n = threads if threads is not None else (os.cpu_count() or 1)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def discretize_all(model, ref, delta_tau, settings=OdeSettings(), mode="full",
                   reference="nodal", threads=1):
    """Discretize every interval of ``ref``. Results are merged by index."""
    delta_tau = np.asarray(delta_tau, dtype=float)
    if delta_tau.size != ref.N:
        raise ValueError("mesh and reference disagree on N")
    tau = np.concatenate([[0.0], np.cumsum(delta_tau)])

    def one(k):
        coeffs = linearize_interval(model, ref, k, tau_k=tau[k], reference=reference)
        if mode == "frozen":
            coeffs = frozen_diffusion_coefficients(coeffs)
        try:
            return discretize_interval(coeffs, tau[k], tau[k] + delta_tau[k], settings)
        except IntegrationDiverged as exc:
            raise IntegrationDiverged(str(exc), interval=k) from exc

    workers = worker_count(threads)
    if workers == 1:
        blocks = [one(k) for k in range(ref.N)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(one, range(ref.N)))
    return DiscreteModel.from_blocks(blocks)


def sigma_derivative(model, ref, delta_tau, settings=OdeSettings(), mode="full",
                     reference="nodal", threads=1, rel_step=1e-5):
    """Central-difference derivative of every block with respect to ``sigma_hat``.

    Intervals are independent, so all dilations are perturbed at once.
    Returns a :class:`DiscreteModel` whose arrays hold the derivatives.
    """
    from .linearize import ReferenceTrajectory

    h = rel_step * np.asarray(ref.sigma_hat)

    def shifted(sign):
        r = ReferenceTrajectory(ref.x_hat, ref.u_hat, ref.sigma_hat + sign * h,
                                ref.kappa_x_hat, ref.kappa_u_hat)
        return discretize_all(model, r, delta_tau, settings, mode, reference, threads)

    up, dn = shifted(1.0), shifted(-1.0)
    scale = 1.0 / (2.0 * h)

    def diff(name):
        a, b = getattr(up, name), getattr(dn, name)
        return (a - b) * scale.reshape((-1,) + (1,) * (a.ndim - 1))

    return DiscreteModel(diff("A"), diff("F"), diff("d"), diff("At"), diff("Ft"), diff("dt"),
                         np.asarray(delta_tau, dtype=float))


def dump_discrete_model(dm, path):
    """Write every block as text, one matrix per block, 17 significant digits.

    Each block starts with ``# <name> k=<k> [i=<i>] <rows> <cols>`` followed by
    its rows.
    """
    lines = [f"# discrete model N={dm.N} n={dm.n} d={dm.noise_dim}"]

    def emit(name, k, mat, i=None):
        mat = np.atleast_2d(mat)
        tag = f"# {name} k={k}" + (f" i={i}" if i is not None else "")
        lines.append(f"{tag} {mat.shape[0]} {mat.shape[1]}")
        for row in mat:
            lines.append(" ".join(f"{v:.17g}" for v in row))

    for k in range(dm.N):
        emit("delta_tau", k, [[dm.delta_tau[k]]])
        emit("A", k, dm.A[k])
        emit("F", k, dm.F[k])
        emit("d", k, dm.d[k][:, None])
        for i in range(dm.noise_dim):
            emit("At", k, dm.At[k, i], i)
            emit("Ft", k, dm.Ft[k, i], i)
            emit("dt", k, dm.dt[k, i][:, None], i)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

"""Single-step accuracy of the diffusion discretization.

Given one interval of the linearized SDE, a start state ``x_k`` and an
extended control ``u_tilde = [u; sigma]``, these routines measure

* the freezing error: the exact mild update keeps the evolving state inside
  the diffusion integrand, the frozen update holds it at ``x_k``;
* the projection error: the frozen integrand ``H(tau)`` is time-varying,
  the projected update replaces it with its interval average ``H_bar``.

Both are estimated on a fine Brownian grid shared between the updates, with
left-point Ito sums, so the discrete errors converge to the continuous ones
as the grid is refined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discretize import OdeSettings, discretize_interval

__all__ = ["FinePath", "fine_path", "one_step_errors", "projection_mse", "fit_slope"]


@dataclass(frozen=True)
class FinePath:
    tau: np.ndarray       # (M+1,) grid points, interval end included
    vals: list            # CoefficientValues at each grid point
    Phi_end: np.ndarray   # (M+1, n, n) transition from each grid point to the interval end
    H_bar: callable       # (x, u_tilde) -> (n, d), from the discretizer's averaged blocks


def fine_path(coeffs, tau_k, delta_tau, n_fine, settings=OdeSettings()):
    """Coefficients and end-point transitions on ``n_fine`` equal sub-steps."""
    h = delta_tau / n_fine
    x = np.array(coeffs.x_node, dtype=float)
    n = x.size
    Phi = np.eye(n)
    taus, vals, Phis = [], [], []

    def rates(x_ref, P):
        return coeffs.reference_rate(x_ref), coeffs.values(x_ref).A @ P

    for j in range(n_fine):
        taus.append(tau_k + j * h)
        vals.append(coeffs.values(x))
        Phis.append(Phi)
        k1x, k1P = rates(x, Phi)
        k2x, k2P = rates(x + 0.5 * h * k1x, Phi + 0.5 * h * k1P)
        k3x, k3P = rates(x + 0.5 * h * k2x, Phi + 0.5 * h * k2P)
        k4x, k4P = rates(x + h * k3x, Phi + h * k3P)
        x = x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        Phi = Phi + h / 6.0 * (k1P + 2 * k2P + 2 * k3P + k4P)
    taus.append(tau_k + delta_tau)
    vals.append(coeffs.values(x))
    Phis.append(Phi)
    Phi_end = np.stack([Phi @ np.linalg.inv(P) for P in Phis])

    blocks = discretize_interval(coeffs, tau_k, tau_k + delta_tau, settings)

    def H_bar(xk, ut):
        return np.stack([blocks.At[i] @ xk + blocks.Ft[i] @ ut + blocks.dt[i]
                         for i in range(blocks.At.shape[0])], axis=1)

    return FinePath(np.array(taus), vals, Phi_end, H_bar)


def _integrand(path, xk, ut):
    """Frozen integrand ``H(t_j)`` at the fine grid points, ``(M+1, n, d)``."""
    out = []
    for v, P in zip(path.vals, path.Phi_end):
        cols = [v.At[i] @ xk + v.Bt[i] @ ut[:-1] + v.ct[i] * ut[-1] + v.dt[i] for i in range(v.At.shape[0])]
        out.append(P @ np.stack(cols, axis=1))
    return np.stack(out)


def projection_mse(path, xk, ut, G, delta_tau):
    """Conditional mean-square error of ``G dw`` against the frozen integral.

    By the Ito isometry this is ``int |H(tau) - G|_F^2 dtau``, evaluated with
    composite Simpson's rule (``n_fine`` must be even).
    """
    H = _integrand(path, np.asarray(xk, float), np.asarray(ut, float))
    M = H.shape[0] - 1
    if M % 2:
        raise ValueError("Simpson's rule needs an even number of sub-steps")
    sq = np.sum((H - np.asarray(G)[None]) ** 2, axis=(1, 2))
    w = np.ones(M + 1)
    w[1:-1:2], w[2:-1:2] = 4.0, 2.0
    return float(delta_tau / (3 * M) * np.dot(w, sq))


def one_step_errors(coeffs, tau_k, delta_tau, xk, u_tilde, n_paths=20000, n_fine=64, seed=0,
                    settings=OdeSettings()):
    """Monte Carlo mean-square freezing and projection errors with standard errors.

    Returns ``(mse_freeze, se_freeze, mse_proj, se_proj)``.
    """
    xk = np.asarray(xk, dtype=float)
    ut = np.asarray(u_tilde, dtype=float)
    path = fine_path(coeffs, tau_k, delta_tau, n_fine, settings)
    h = delta_tau / n_fine
    rng = np.random.default_rng(seed)
    d = path.vals[0].At.shape[0]
    dW = rng.standard_normal((n_paths, n_fine, d)) * np.sqrt(h)

    H = _integrand(path, xk, ut)  # (M+1, n, d)
    Hb = path.H_bar(xk, ut)
    u, s = ut[:-1], ut[-1]

    x = np.broadcast_to(xk, (n_paths, xk.size)).copy()
    e_x = np.zeros_like(x)
    e_p = np.zeros_like(x)
    for j, (v, P) in enumerate(zip(path.vals[:-1], path.Phi_end[:-1])):
        w = dW[:, j, :]
        dev = x - xk
        # e_x picks up the state-dependent part the frozen update drops
        inc = np.zeros_like(x)
        for i in range(d):
            e_x += (dev @ v.At[i].T @ P.T) * w[:, i:i + 1]
            col = x @ v.At[i].T + v.Bt[i] @ u + v.ct[i] * s + v.dt[i]
            inc += col * w[:, i:i + 1]
        e_p += w @ (H[j] - Hb).T
        x = x + h * (x @ v.A.T + v.B @ u + v.c * s + v.d) + inc
    sq_x = np.sum(e_x ** 2, axis=1)
    sq_p = np.sum(e_p ** 2, axis=1)
    se = lambda a: float(a.std(ddof=1) / np.sqrt(a.size))
    return float(sq_x.mean()), se(sq_x), float(sq_p.mean()), se(sq_p)


def fit_slope(steps, errors):
    """Least-squares slope of ``log(errors)`` against ``log(steps)``."""
    return float(np.polyfit(np.log(steps), np.log(errors), 1)[0])

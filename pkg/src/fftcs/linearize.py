"""First-order Ito linearization of the time-scaled SDE about a reference.

The time-scaled dynamics are ``dx = sigma f(x, u) dtau + sqrt(sigma) g(x, u) dw``.
Linearizing in ``(x, u, sigma)`` gives, per channel ``i``::

    dx = (A x + B u + c sigma + d) dtau
         + sum_i (At_i x + Bt_i u + ct_i sigma + dt_i) dw_i

Within an interval the reference control and dilation are held at their
nodal values. The reference state is either held at the left node
(``"nodal"``) or carried along the nonlinear mean flow from that node
(``"flow"``); the discretizer integrates it together with the transition
matrices so the two stay consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import MalformedReference, NonPositiveDilation

__all__ = [
    "ReferenceTrajectory",
    "CoefficientValues",
    "IntervalCoefficients",
    "linearize_interval",
    "frozen_diffusion_coefficients",
]


@dataclass(frozen=True)
class ReferenceTrajectory:
    x_hat: np.ndarray
    u_hat: np.ndarray
    sigma_hat: np.ndarray
    kappa_x_hat: np.ndarray
    kappa_u_hat: np.ndarray

    def __post_init__(self):
        for key in ("x_hat", "u_hat", "sigma_hat", "kappa_x_hat", "kappa_u_hat"):
            arr = np.array(getattr(self, key), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, key, arr)
        N = self.sigma_hat.shape[0]
        if self.x_hat.shape[0] != N + 1 or self.u_hat.shape[0] != N:
            raise MalformedReference("x_hat must have N+1 rows and u_hat N rows")
        if self.kappa_x_hat.shape[0] != N or self.kappa_u_hat.shape[0] != N:
            raise MalformedReference("kappa arrays must have N rows")
        for key in ("x_hat", "u_hat", "sigma_hat", "kappa_x_hat", "kappa_u_hat"):
            if not np.all(np.isfinite(getattr(self, key))):
                raise MalformedReference(f"{key} has non-finite entries")
        if np.any(self.sigma_hat <= 0):
            raise NonPositiveDilation("reference dilations must be strictly positive")
        if np.any(self.kappa_x_hat < 0) or np.any(self.kappa_u_hat < 0):
            raise MalformedReference("kappa references must be nonnegative")

    @property
    def N(self):
        return self.sigma_hat.shape[0]


class CoefficientValues(NamedTuple):
    A: np.ndarray   # (n, n)
    B: np.ndarray   # (n, m)
    c: np.ndarray   # (n,)
    d: np.ndarray   # (n,)
    At: np.ndarray  # (d, n, n)
    Bt: np.ndarray  # (d, n, m)
    ct: np.ndarray  # (d, n)
    dt: np.ndarray  # (d, n)

    @property
    def F(self):
        return np.concatenate([self.B, self.c[:, None]], axis=1)

    @property
    def Ft(self):
        return np.concatenate([self.Bt, self.ct[:, :, None]], axis=2)


@dataclass(frozen=True)
class IntervalCoefficients:
    """Linearization coefficients on one interval, as functions of the reference.

    ``values(x_ref)`` evaluates every coefficient at reference state ``x_ref``
    with the interval's ``u_hat`` and ``sigma_hat``. ``at(tau)`` evaluates them
    along the interval's reference path.
    """

    model: object
    x_node: np.ndarray
    u_hat: np.ndarray
    sigma_hat: float
    tau_k: float = 0.0
    reference: str = "nodal"
    frozen: bool = False

    def reference_rate(self, x_ref):
        if self.reference == "nodal":
            return np.zeros_like(x_ref)
        return self.sigma_hat * self.model.drift(x_ref, self.u_hat)

    def values(self, x_ref=None):
        x_ref = self.x_node if x_ref is None else x_ref
        mdl, u, s = self.model, self.u_hat, self.sigma_hat
        rs = np.sqrt(s)
        f = np.asarray(mdl.drift(x_ref, u), dtype=float)
        A = s * np.asarray(mdl.drift_jac_x(x_ref, u), dtype=float)
        B = s * np.asarray(mdl.drift_jac_u(x_ref, u), dtype=float)
        c = f
        d = -A @ x_ref - B @ u
        g = np.asarray(mdl.diffusion(x_ref, u), dtype=float).T  # (d, n)
        nd = g.shape[0]
        if self.frozen:
            At = np.zeros((nd,) + A.shape)
            Bt = np.zeros((nd,) + B.shape)
            ct = np.zeros_like(g)
            dt = rs * g
        else:
            At = rs * np.asarray(mdl.diffusion_jac_x(x_ref, u), dtype=float)
            Bt = rs * np.asarray(mdl.diffusion_jac_u(x_ref, u), dtype=float)
            ct = g / (2.0 * rs)
            dt = 0.5 * rs * g - At @ x_ref - Bt @ u
        return CoefficientValues(A, B, c, d, At, Bt, ct, dt)

    def reference_state(self, tau, n_steps=100):
        """Reference state at ``tau`` (RK4 along the mean flow in ``"flow"`` mode)."""
        if self.reference == "nodal" or tau == self.tau_k:
            return np.array(self.x_node, dtype=float)
        h = (tau - self.tau_k) / n_steps
        x = np.array(self.x_node, dtype=float)
        for _ in range(n_steps):
            k1 = self.reference_rate(x)
            k2 = self.reference_rate(x + 0.5 * h * k1)
            k3 = self.reference_rate(x + 0.5 * h * k2)
            k4 = self.reference_rate(x + h * k3)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    def at(self, tau):
        return self.values(self.reference_state(tau))


def linearize_interval(model, ref, k, tau_k=0.0, reference="nodal"):
    """Coefficients for interval ``k`` of ``ref``."""
    if not 0 <= k < ref.N:
        raise IndexError(f"interval index {k} outside [0, {ref.N})")
    sigma = float(ref.sigma_hat[k])
    if sigma <= 0:
        raise NonPositiveDilation(f"sigma_hat[{k}] = {sigma} must be > 0")
    return IntervalCoefficients(
        model, np.array(ref.x_hat[k], dtype=float), np.array(ref.u_hat[k], dtype=float),
        sigma, tau_k=tau_k, reference=reference,
    )


def frozen_diffusion_coefficients(coeffs):
    """Drop the diffusion's linear terms, keeping ``sqrt(sigma_hat) g`` as a constant."""
    return replace(coeffs, frozen=True)

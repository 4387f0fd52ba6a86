"""Random discrete models and an independent sampler of the discrete recursion."""

import numpy as np

from fftcs.discretize import DiscreteModel
from fftcs.moments import Policy

# one summary line per acceptance criterion, printed at the end of the session
ACCEPTANCE = []


def record(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def random_system(rng, n=2, m=1, d=1, N=3, noise=0.4):
    dtau = np.full(N, 1.0 / N)
    dm = DiscreteModel(
        A=np.eye(n) + 0.3 * rng.normal(size=(N, n, n)),
        F=rng.normal(size=(N, n, m + 1)),
        d=0.2 * rng.normal(size=(N, n)),
        At=noise * rng.normal(size=(N, d, n, n)),
        Ft=noise * rng.normal(size=(N, d, n, m + 1)),
        dt=rng.normal(size=(N, d, n)),
        delta_tau=dtau,
    )
    pol = Policy(rng.normal(size=(N, m)), rng.uniform(0.5, 1.5, N), 0.3 * rng.normal(size=(N, m, n)))
    L = rng.normal(size=(n, n))
    Sigma0 = 0.1 * (L @ L.T) + 0.05 * np.eye(n)
    return dm, pol, rng.normal(size=n), Sigma0


def sample_recursion(dm, pol, mu0, Sigma0, xbar, n_samples, rng):
    """x_{k+1} = A x + F u~ + d + sum_i (At_i x + Ft_i u~ + dt_i) dw_i with u = v + K (x - xbar)."""
    n = dm.A.shape[1]
    x = rng.multivariate_normal(mu0, Sigma0, size=n_samples)
    out = [x]
    for k in range(dm.A.shape[0]):
        u = pol.v[k] + (x - xbar[k]) @ pol.K[k].T
        ut = np.column_stack([u, np.full(n_samples, pol.sigma[k])])
        nxt = x @ dm.A[k].T + ut @ dm.F[k].T + dm.d[k]
        dw = rng.normal(scale=np.sqrt(dm.delta_tau[k]), size=(n_samples, dm.At.shape[1]))
        for i in range(dm.At.shape[1]):
            nxt += (x @ dm.At[k, i].T + ut @ dm.Ft[k, i].T + dm.dt[k, i]) * dw[:, i:i + 1]
        x = nxt
        out.append(x)
    return np.stack(out, axis=1)


def cov_with_se(X):
    """Sample covariance (n-1 divisor) and per-entry standard errors from fourth moments."""
    D = X - X.mean(axis=0)
    P = D[:, :, None] * D[:, None, :]
    cov = P.sum(axis=0) / (X.shape[0] - 1)
    se = P.std(axis=0, ddof=1) / np.sqrt(X.shape[0])
    return cov, se

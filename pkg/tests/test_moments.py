import numpy as np
import pytest

from fftcs import DimensionMismatch, NegativeCovariance
from fftcs.discretize import DiscreteModel
from fftcs.moments import Policy, propagate_moments, psd_repair, simulate_discrete_linear

from helpers import cov_with_se, random_system, sample_recursion


def _dm(A, F=None, d=None, At=None, Ft=None, dt=None, dtau=0.02):
    A = np.asarray(A, float)[None]
    n = A.shape[1]
    return DiscreteModel(A, np.zeros((1, n, 2)) if F is None else np.asarray(F, float)[None],
                         np.zeros((1, n)) if d is None else np.asarray(d, float)[None],
                         np.zeros((1, 1, n, n)) if At is None else np.asarray(At, float)[None],
                         np.zeros((1, 1, n, 2)) if Ft is None else np.asarray(Ft, float)[None],
                         np.zeros((1, 1, n)) if dt is None else np.asarray(dt, float)[None],
                         np.array([dtau]))


def _pol(N=1, n=2):
    return Policy(np.zeros((N, 1)), np.ones(N), np.zeros((N, 1, n)))


def test_noise_free_recursion_is_lyapunov():
    A = [[1.0, 0.1], [-0.2, 0.9]]
    S0 = np.array([[0.3, 0.1], [0.1, 0.2]])
    tr = propagate_moments(_dm(A), _pol(), np.zeros(2), S0)
    assert np.allclose(tr.Sigma_x[1], np.asarray(A) @ S0 @ np.asarray(A).T, atol=1e-15)


def test_additive_channel_accumulates():
    S0 = 0.15 * np.eye(2)
    tr = propagate_moments(_dm(np.eye(2), dt=[[0.0, 1.0]]), _pol(), np.zeros(2), S0)
    assert np.allclose(tr.Sigma_x[1], S0 + 0.02 * np.diag([0.0, 1.0]), atol=1e-15)


def test_offsets_enter_each_update():
    S0 = 0.15 * np.eye(2)
    off = np.array([[[0.01, 0.0], [0.0, 0.02]]])
    base = propagate_moments(_dm(np.eye(2)), _pol(), np.zeros(2), S0)
    shifted = propagate_moments(_dm(np.eye(2)), _pol(), np.zeros(2), S0, offsets=off)
    assert np.allclose(shifted.Sigma_x[1] - base.Sigma_x[1], off[0])


def test_one_system_against_direct_sampling():
    rng = np.random.default_rng(3)
    dm, pol, mu0, S0 = random_system(rng, d=2)
    tr = propagate_moments(dm, pol, mu0, S0)
    X = sample_recursion(dm, pol, mu0, S0, tr.xbar, 200_000, np.random.default_rng(4))
    cov, se = cov_with_se(X[:, -1])
    assert np.all(np.abs(cov - tr.Sigma_x[-1]) <= 3 * se)
    assert np.all(np.abs(X[:, -1].mean(0) - tr.xbar[-1]) <= 3 * X[:, -1].std(0) / np.sqrt(X.shape[0]))


def test_simulator_deterministic_system_matches_mean():
    rng = np.random.default_rng(0)
    dm, pol, mu0, _ = random_system(rng, noise=0.0)
    dm = DiscreteModel(dm.A, dm.F, dm.d, 0 * dm.At, 0 * dm.Ft, 0 * dm.dt, dm.delta_tau)
    emp = simulate_discrete_linear(dm, pol, mu0, np.zeros((2, 2)), 50, seed=1)
    tr = propagate_moments(dm, pol, mu0, np.zeros((2, 2)))
    assert np.allclose(emp.mean, tr.xbar, atol=1e-12, rtol=0)


def test_simulator_additive_noise_within_three_se():
    rng = np.random.default_rng(1)
    dm, pol, mu0, S0 = random_system(rng, noise=0.0)
    emp = simulate_discrete_linear(dm, pol, mu0, S0, 100_000, seed=2)
    tr = propagate_moments(dm, pol, mu0, S0)
    assert np.all(np.abs(emp.cov[-1] - tr.Sigma_x[-1]) <= 3 * emp.cov_se[-1])


def test_simulator_replays_with_fixed_seed():
    rng = np.random.default_rng(5)
    dm, pol, mu0, S0 = random_system(rng)
    a = simulate_discrete_linear(dm, pol, mu0, S0, 20_000, seed=9, block_size=4096)
    b = simulate_discrete_linear(dm, pol, mu0, S0, 20_000, seed=9, block_size=4096)
    assert np.array_equal(a.cov, b.cov) and np.array_equal(a.mean, b.mean)


def test_psd_repair():
    S = np.array([[1.0, 0.0], [0.0, -1e-13]])
    R = psd_repair(S)
    assert np.min(np.linalg.eigvalsh(R)) >= 0
    with pytest.raises(NegativeCovariance):
        psd_repair(np.diag([1.0, -1e-3]))


def test_dimension_checks():
    with pytest.raises(DimensionMismatch):
        propagate_moments(_dm(np.eye(2)), _pol(N=2), np.zeros(2), np.eye(2))
    with pytest.raises(DimensionMismatch):
        propagate_moments(_dm(np.eye(2)), _pol(), np.zeros(3), np.eye(2))

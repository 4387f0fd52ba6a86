import numpy as np
import pytest

from fftcs import make_linear_model
from fftcs import montecarlo as mc
from fftcs.discretize import OdeSettings, discretize_all
from fftcs.linearize import ReferenceTrajectory
from fftcs.moments import Policy, propagate_moments
from fftcs.montecarlo import chebyshev_risk, milstein_rollout, simulate_rollouts

A = np.array([[0.0, 1.0], [-0.4, -0.3]])
B = np.array([[0.0], [1.0]])
MESH = np.full(4, 0.25)


def _policy(N=4, K=0.0):
    return Policy(np.linspace(-0.5, 0.5, N)[:, None], np.linspace(0.8, 1.2, N), np.full((N, 1, 2), K))


def _traj(N=4, Sigma0=None):
    xbar = np.zeros((N + 1, 2))
    xbar[0] = [0.3, -0.2]
    S = np.zeros((N + 1, 2, 2)) if Sigma0 is None else np.broadcast_to(Sigma0, (N + 1, 2, 2))
    return type("T", (), {"xbar": xbar, "Sigma_x": S})()


def test_zero_diffusion_reduces_to_euler():
    model = make_linear_model(A, B)
    pol, traj, n_sub = _policy(), _traj(), 5
    path = milstein_rollout(model, pol, traj, MESH, n_sub, seed=4, rollout_index=2)
    x = traj.xbar[0].copy()
    expect = [x.copy()]
    for k, dt in enumerate(MESH):
        h = dt / n_sub
        for _ in range(n_sub):
            x = x + pol.sigma[k] * h * (A @ x + B @ pol.v[k])
        expect.append(x.copy())
    assert np.allclose(path, expect, atol=1e-14)


def test_additive_noise_has_no_milstein_correction():
    G = np.array([[0.1], [0.4]])
    model = make_linear_model(A, B, G=G)
    pol, traj, n_sub = _policy(), _traj(), 3
    path = milstein_rollout(model, pol, traj, MESH, n_sub, seed=9, rollout_index=0)
    z0, dw = mc._increments(model, MESH, n_sub, 9, 0)
    x = traj.xbar[0].copy()
    expect = [x.copy()]
    for k, dt in enumerate(MESH):
        h, s = dt / n_sub, pol.sigma[k]
        for j in range(n_sub):
            x = x + s * h * (A @ x + B @ pol.v[k]) + np.sqrt(s * h) * (G @ dw[k, j])
        expect.append(x.copy())
    assert np.allclose(path, expect, atol=1e-13)


def test_strong_order_on_geometric_brownian_motion():
    drift, vol, x0 = 0.5, 0.8, 1.0
    model = make_linear_model([[drift]], [[0.0]], G=[[0.0]], Gx=[[[vol]]])
    pol = Policy(np.zeros((1, 1)), np.ones(1), np.zeros((1, 1, 1)))
    mean = mc._MeanTrajectory(np.full((2, 1), x0), np.array([x0]), np.zeros((1, 1)))
    rng = np.random.default_rng(21)
    paths, fine = 4000, 256
    z = rng.standard_normal((paths, fine))
    W = z.sum(axis=1) / np.sqrt(fine)
    exact = x0 * np.exp((drift - 0.5 * vol ** 2) + vol * W)
    subs = np.array([4, 8, 16, 32, 64])
    errs = []
    for n_sub in subs:
        r = fine // n_sub
        zc = z.reshape(paths, n_sub, r).sum(axis=2) / np.sqrt(r)
        X, _, ok = mc._batch(model, pol, mean, np.ones(1), n_sub, np.zeros((paths, 1)),
                             zc[:, None, :, None])
        assert ok.all()
        errs.append(np.mean(np.abs(X[:, -1, 0] - exact)))
    slope = np.polyfit(np.log(1.0 / subs), np.log(errs), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.2)


def test_rollouts_do_not_depend_on_threads_or_chunking(monkeypatch):
    model = make_linear_model(A, B, G=[[0.1], [0.3]], Gx=0.2 * np.eye(2)[None])
    pol, traj = _policy(K=-0.5), _traj(Sigma0=0.05 * np.eye(2))
    args = (model, pol, traj, MESH, 4, 77, 300)
    X1, U1, _ = simulate_rollouts(*args, threads=1)
    X4, U4, _ = simulate_rollouts(*args, threads=4)
    monkeypatch.setattr(mc, "CHUNK", 7)
    X7, U7, _ = simulate_rollouts(*args, threads=3)
    assert np.array_equal(X1, X4) and np.array_equal(X1, X7)
    assert np.array_equal(U1, U4) and np.array_equal(U1, U7)
    assert np.array_equal(milstein_rollout(model, pol, traj, MESH, 4, 77, 123), X1[123])


def test_linear_rollouts_match_discrete_moments():
    model = make_linear_model(A, B, G=[[0.05], [0.3]])
    N = 6
    mesh = np.full(N, 1.0 / N)
    pol = Policy(np.linspace(-1, 1, N)[:, None], np.full(N, 1.1), np.full((N, 1, 2), -0.4))
    ref = ReferenceTrajectory(np.zeros((N + 1, 2)), pol.v, pol.sigma, np.zeros((N, 0)), np.zeros((N, 0)))
    dm = discretize_all(model, ref, mesh, OdeSettings(), reference="flow")
    S0 = np.diag([0.02, 0.05])
    traj = propagate_moments(dm, pol, np.array([0.2, 0.0]), S0)
    X, _, ok = simulate_rollouts(model, pol, traj, mesh, 40, 5, 20000)
    assert ok.all()
    XT = X[:, -1]
    se_mean = XT.std(axis=0, ddof=1) / np.sqrt(XT.shape[0])
    assert np.all(np.abs(XT.mean(axis=0) - traj.xbar[-1]) <= 3 * se_mean)
    D = (XT - XT.mean(axis=0)) ** 2
    se_var = D.std(axis=0, ddof=1) / np.sqrt(D.shape[0])
    assert np.all(np.abs(D.mean(axis=0) - np.diag(traj.Sigma_x[-1])) <= 3 * se_var)


def test_cantelli_bound():
    assert chebyshev_risk(np.array([0.0]), np.array([1.0]), -2.0)[0] == pytest.approx(0.2)
    assert chebyshev_risk(np.array([0.5]), np.array([1.0]), -0.5)[0] == 1.0
    assert chebyshev_risk(np.array([0.0]), np.array([0.0]), -1.0)[0] == 0.0


def test_report_contents(eta1_spec, eta1_run, eta1_report):
    rep = eta1_report
    N = eta1_spec.N
    assert rep.n_rollouts == eta1_spec.mc.N_mc and rep.n_failed == 0
    se = np.sqrt(np.diag(eta1_spec.Sigma_i) / rep.n_rollouts)
    assert np.all(np.abs(rep.empirical_mean[0] - eta1_spec.mu_i) <= 3 * se)
    rates = rep.per_constraint_violation_rates
    assert len(rates["control"]) == eta1_spec.N_u and rates["state"] == []
    for row in rates["control"]:
        assert len(row) == N and all(0.0 <= r <= 1.0 for r in row)
    assert rep.worst_case_control_risk == pytest.approx(max(max(r) for r in rates["control"]))
    assert 0.0 <= rep.worst_case_control_dr_risk <= 1.0
    assert np.allclose(rep.terminal_std, np.sqrt(np.diag(rep.empirical_cov[-1])))
    assert rep.node_time[-1] == pytest.approx(eta1_run.t_f)

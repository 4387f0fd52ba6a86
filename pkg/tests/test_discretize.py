import numpy as np
import pytest
from scipy.linalg import expm

from fftcs import make_double_integrator, make_linear_model
from fftcs.discretize import (
    OdeSettings,
    discretize_all,
    discretize_interval,
    dump_discrete_model,
    sigma_derivative,
)
from fftcs.errorstudy import fine_path, projection_mse
from fftcs.linearize import IntervalCoefficients, ReferenceTrajectory, linearize_interval
from fftcs.scp import initial_guess


def _initial_reference(spec):
    x, u, s = initial_guess(spec)
    return ReferenceTrajectory(x, u, s, np.zeros((spec.N, spec.N_x)), np.zeros((spec.N, spec.N_u)))


def _coeffs(model, x, u, s=1.0, reference="nodal"):
    return IntervalCoefficients(model, np.asarray(x, float), np.asarray(u, float), s, reference=reference)


def _int_expm(A, T):
    """(expm(A T), int_0^T expm(A r) dr) from one augmented exponential."""
    n = A.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n], M[:n, n:] = A, np.eye(n)
    E = expm(M * T)
    return E[:n, :n], E[:n, n:]


def test_nilpotent_transition_is_exact():
    m = make_linear_model([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]])
    b = discretize_interval(_coeffs(m, [0, 0], [0]), 0.0, 0.02)
    assert np.array_equal(b.A, np.array([[1.0, 0.02], [0.0, 1.0]])) or np.allclose(b.A, [[1, 0.02], [0, 1]], atol=1e-16)


def test_zero_drift_blocks_are_integrals_of_constants():
    G, Gx, Gu = np.array([[0.3], [0.1]]), np.array([[[0.2, 0.0], [0.1, 0.4]]]), np.array([[[0.5], [0.0]]])
    m = make_linear_model(np.zeros((2, 2)), [[1.0], [2.0]], G=G, Gx=Gx, Gu=Gu)
    x, u = np.array([0.4, -0.2]), np.array([0.7])
    c = _coeffs(m, x, u)
    v = c.values()
    b = discretize_interval(c, 0.3, 0.35)
    assert np.allclose(b.A, np.eye(2), atol=1e-15)
    assert np.allclose(b.F, v.F * 0.05, atol=1e-15) and np.allclose(b.d, v.d * 0.05, atol=1e-15)
    assert np.allclose(b.At, v.At, atol=1e-14) and np.allclose(b.Ft, v.Ft, atol=1e-14)
    assert np.allclose(b.dt, v.dt, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_constant_coefficients_match_matrix_exponential(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    m = make_linear_model(A, rng.normal(size=(3, 2)), G=rng.normal(size=(3, 2)),
                          Gx=rng.normal(size=(2, 3, 3)), Gu=rng.normal(size=(2, 3, 2)))
    c = _coeffs(m, rng.normal(size=3), rng.normal(size=2), s=1.0)
    v = c.values()
    dt = 0.02
    b = discretize_interval(c, 0.0, dt)
    Phi, S = _int_expm(v.A, dt)
    rel = lambda X, Y: np.linalg.norm(X - Y) / np.linalg.norm(Y)
    assert rel(b.A, Phi) <= 1e-10
    assert rel(b.F, S @ v.F) <= 1e-10
    assert rel(b.d, S @ v.d) <= 1e-10
    for i in range(2):
        assert rel(b.At[i], S @ v.At[i] / dt) <= 1e-10
        assert rel(b.Ft[i], S @ v.Ft[i] / dt) <= 1e-10
        assert rel(b.dt[i], S @ v.dt[i] / dt) <= 1e-10


def test_transition_composes_across_a_split_interval():
    m = make_double_integrator(0.15, 0.2, 1.0)
    x0, u, s = np.array([0.1, 1.4]), np.array([2.0]), 1.3
    settings = OdeSettings(40)
    whole = discretize_interval(_coeffs(m, x0, u, s, "flow"), 0.0, 0.1, settings)
    first = discretize_interval(_coeffs(m, x0, u, s, "flow"), 0.0, 0.05, settings)
    second = discretize_interval(IntervalCoefficients(m, first.x_end, u, s, tau_k=0.05, reference="flow"),
                                 0.05, 0.1, settings)
    assert np.allclose(second.A @ first.A, whole.A, atol=1e-9)
    assert np.allclose(second.x_end, whole.x_end, atol=1e-9)


def test_discretize_all_example_reference():
    from fftcs import double_integrator_spec
    spec = double_integrator_spec()
    ref = _initial_reference(spec)
    dm = discretize_all(spec.dynamics, ref, spec.delta_tau, reference="flow")
    assert dm.N == 30 and dm.A.shape == (30, 2, 2)
    assert all(abs(np.linalg.det(A)) > 1e-6 for A in dm.A)
    par = discretize_all(spec.dynamics, ref, spec.delta_tau, reference="flow", threads=4)
    for name in ("A", "F", "d", "At", "Ft", "dt"):
        assert np.array_equal(getattr(dm, name), getattr(par, name))


def test_zero_dynamics_give_identity_transitions():
    m = make_linear_model(np.zeros((2, 2)), np.zeros((2, 1)))
    N = 4
    ref = ReferenceTrajectory(np.zeros((N + 1, 2)), np.zeros((N, 1)), np.ones(N), np.zeros((N, 0)), np.zeros((N, 0)))
    dm = discretize_all(m, ref, np.full(N, 0.25))
    assert np.allclose(dm.A, np.eye(2))


def test_sigma_derivative_against_coarser_difference():
    m = make_double_integrator(0.15, 0.2, 1.0)
    N = 3
    ref = ReferenceTrajectory(np.array([[0, 0], [0.1, 0.8], [0.3, 1.0], [0.6, 0.5]]), np.array([[2.0], [0.5], [-1.0]]),
                              np.array([0.8, 1.1, 1.4]), np.zeros((N, 0)), np.zeros((N, 2)))
    mesh = np.full(N, 1 / 3)
    ds = sigma_derivative(m, ref, mesh, reference="flow")
    h = 1e-3
    for k in range(N):
        up = ReferenceTrajectory(ref.x_hat, ref.u_hat, ref.sigma_hat + h * (np.arange(N) == k), ref.kappa_x_hat, ref.kappa_u_hat)
        dn = ReferenceTrajectory(ref.x_hat, ref.u_hat, ref.sigma_hat - h * (np.arange(N) == k), ref.kappa_x_hat, ref.kappa_u_hat)
        a = discretize_all(m, up, mesh, reference="flow")
        b = discretize_all(m, dn, mesh, reference="flow")
        for name in ("A", "F", "At", "dt"):
            fd = (getattr(a, name)[k] - getattr(b, name)[k]) / (2 * h)
            assert np.allclose(getattr(ds, name)[k], fd, rtol=1e-4, atol=1e-6)


def test_projection_average_minimizes_mean_square_error(rng):
    m = make_double_integrator(0.15, 0.2, 1.0)
    c = _coeffs(m, [0.2, 1.5], [3.0], 1.2, "flow")
    xk, ut, dt = np.array([0.25, 1.3]), np.array([3.0, 1.2]), 0.05
    path = fine_path(c, 0.0, dt, 200)
    Hb = path.H_bar(xk, ut)
    base = projection_mse(path, xk, ut, Hb, dt)
    for eps in (1e-1, 1e-2, 1e-3):
        for _ in range(20):
            D = rng.normal(size=Hb.shape)
            assert projection_mse(path, xk, ut, Hb + eps * D, dt) >= base
    assert base > 0


def test_dump_writes_every_block(tmp_path):
    from fftcs import double_integrator_spec
    spec = double_integrator_spec(N=3)
    dm = discretize_all(spec.dynamics, _initial_reference(spec), spec.delta_tau)
    out = tmp_path / "dm.txt"
    dump_discrete_model(dm, out)
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# discrete model N=3")
    headers = [l for l in lines if l.startswith("# A k=")]
    assert len(headers) == 3
    i = lines.index(headers[1])
    assert np.allclose([[float(t) for t in lines[i + 1].split()], [float(t) for t in lines[i + 2].split()]], dm.A[1], rtol=1e-15)

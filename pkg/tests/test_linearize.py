import numpy as np
import pytest

from fftcs import MalformedReference, NonPositiveDilation, make_double_integrator
from fftcs.linearize import (
    IntervalCoefficients,
    ReferenceTrajectory,
    frozen_diffusion_coefficients,
    linearize_interval,
)


def _ref(x, u, s, N=1):
    x = np.atleast_2d(x)
    return ReferenceTrajectory(np.vstack([x, x]), np.atleast_2d(u), [s], np.zeros((N, 0)), np.zeros((N, 2)))


def test_drift_jacobian_scaled_by_dilation():
    m = make_double_integrator(C_D=0.15)
    c = linearize_interval(m, _ref([0.0, 1.0], [0.0], 1.0), 0).values()
    assert np.allclose(c.A, [[0.0, 1.0], [0.0, -0.30]])
    c2 = linearize_interval(m, _ref([0.0, 1.0], [0.0], 1.5), 0).values()
    assert np.allclose(c2.A, 1.5 * c.A) and np.allclose(c2.B, [[0.0], [1.5]])


def test_constant_diffusion_channels():
    m = make_double_integrator(g0=0.2, g1=0.0)
    c = linearize_interval(m, _ref([0.3, 0.7], [1.0], 1.0), 0).values()
    g = np.array([0.0, 0.2])
    assert np.allclose(c.At, 0) and np.allclose(c.Bt, 0)
    assert np.allclose(c.ct[0], g / 2) and np.allclose(c.dt[0], g / 2)


@pytest.mark.parametrize("s", [0.4, 1.0, 1.6])
def test_affine_forms_reproduce_reference_values(s):
    m = make_double_integrator(0.15, 0.2, 1.0)
    x, u = np.array([0.2, -0.8]), np.array([1.3])
    c = linearize_interval(m, _ref(x, u, s), 0).values()
    assert np.allclose(c.A @ x + c.B @ u + c.c * s + c.d, s * m.drift(x, u), atol=1e-14)
    lhs = c.At[0] @ x + c.Bt[0] @ u + c.ct[0] * s + c.dt[0]
    assert np.allclose(lhs, np.sqrt(s) * m.diffusion(x, u)[:, 0], atol=1e-14)


def test_coefficients_are_first_order_taylor_terms():
    m = make_double_integrator(0.15, 0.2, 1.0)
    x, u, s = np.array([0.1, 0.9]), np.array([0.5]), 1.2
    c = linearize_interval(m, _ref(x, u, s), 0).values()
    h = 1e-6
    # drift: d(sigma f)/d sigma = f ; diffusion: d(sqrt(sigma) g)/d sigma = g / (2 sqrt(sigma))
    dfs = ((s + h) * m.drift(x, u) - (s - h) * m.drift(x, u)) / (2 * h)
    dgs = (np.sqrt(s + h) - np.sqrt(s - h)) / (2 * h) * m.diffusion(x, u)[:, 0]
    assert np.allclose(c.c, dfs, atol=1e-8) and np.allclose(c.ct[0], dgs, atol=1e-8)
    e = np.array([h, 0.0])
    dgx = np.sqrt(s) * (m.diffusion(x + e, u) - m.diffusion(x - e, u))[:, 0] / (2 * h)
    assert np.allclose(c.At[0][:, 0], dgx, atol=1e-8)


def test_frozen_channel_values():
    m = make_double_integrator(0.15, 0.2, 1.0)
    x, u = np.array([0.0, 2.0]), np.array([0.0])
    full = linearize_interval(m, _ref(x, u, 1.0), 0)
    fz = frozen_diffusion_coefficients(full)
    cf, cz = full.values(), fz.values()
    assert np.allclose(cf.dt[0], 0.5 * np.array([0.0, 2.2]) - cf.At[0] @ x)
    assert np.allclose(cz.dt[0], [0.0, 2.2])
    assert np.allclose(cz.At, 0) and np.allclose(cz.Bt, 0) and np.allclose(cz.ct, 0)
    assert frozen_diffusion_coefficients(fz) == fz


def test_frozen_matches_full_for_additive_noise():
    m = make_double_integrator(0.15, 0.2, 0.0)
    s = 1.3
    full = linearize_interval(m, _ref([0.5, 0.4], [2.0], s), 0).values()
    fz = frozen_diffusion_coefficients(linearize_interval(m, _ref([0.5, 0.4], [2.0], s), 0)).values()
    assert np.allclose(fz.dt, full.ct * s + full.dt)


def test_flow_reference_follows_mean_drift():
    m = make_double_integrator(0.15, 0.2, 1.0)
    c = IntervalCoefficients(m, np.array([0.0, 1.0]), np.array([0.5]), 1.2, tau_k=0.1, reference="flow")
    assert np.allclose(c.reference_state(0.1), [0.0, 1.0])
    # Euler with a much finer step as an independent integrator
    x = np.array([0.0, 1.0])
    n = 20000
    for _ in range(n):
        x = x + 0.05 / n * 1.2 * m.drift(x, np.array([0.5]))
    assert np.allclose(c.reference_state(0.15), x, atol=1e-5)
    nodal = IntervalCoefficients(m, np.array([0.0, 1.0]), np.array([0.5]), 1.2, reference="nodal")
    assert np.allclose(nodal.reference_state(0.5), [0.0, 1.0])


def test_reference_validation():
    with pytest.raises(NonPositiveDilation):
        _ref([0.0, 0.0], [0.0], 0.0)
    with pytest.raises(MalformedReference):
        ReferenceTrajectory(np.zeros((2, 2)), np.zeros((2, 1)), [1.0], np.zeros((1, 0)), np.zeros((1, 2)))
    with pytest.raises(MalformedReference):
        _ref([np.nan, 0.0], [0.0], 1.0)
    with pytest.raises(IndexError):
        linearize_interval(make_double_integrator(), _ref([0.0, 0.0], [0.0], 1.0), 1)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from powertalk import _kernels
from powertalk.errors import NonConvergence, ZeroVoltageCollapse
from powertalk.grid_model import Topology, droop_slope, pack_theta, uniform_params
from powertalk.steady_state import (
    apply_block_inverse,
    blocks_to_vec_matrix,
    compact_coefficients,
    der_powers,
    jacobian_theta,
    jacobian_voltage,
    line_losses,
    load_powers,
    residual_omega,
    solve_linear,
    solve_steady_state,
    unvec,
    vec,
    voltage_jacobian_blocks,
)

S_NOM = droop_slope(400.0, 15.0)


def _inputs(rng, T, N, spread=10.0):
    X = 400.0 + rng.uniform(-spread, spread, (T, N))
    S = 1.0 / (15.0 * (X - 400.0 + 15.0))
    return X, S


def test_zero_load_fixed_point():
    p = uniform_params(Topology.line(4), 1000.0, 0.0, 0.0, 0.0, 1.0)
    X = np.full((3, 4), 400.0)
    S = np.full((3, 4), S_NOM)
    st_ = solve_steady_state(X, S, p)
    np.testing.assert_allclose(st_.V, 400.0, rtol=0, atol=1e-9)
    np.testing.assert_allclose(residual_omega(np.full((1, 4), 400.0), X[:1], S[:1], p), 0.0)


def test_single_bus_closed_form():
    # v (x - v) s g = d_ca v^2 / x^2  ->  v = x s g / (s g + d_ca / x^2)
    g, dca = 1000.0, 300.0
    p = uniform_params(Topology(1, ()), g, dca, 0.0, 0.0, np.zeros(0))
    V = solve_steady_state([[400.0]], [[S_NOM]], p).V[0, 0]
    expected = 400.0 * S_NOM * g / (S_NOM * g + dca / 400.0**2)
    assert V == pytest.approx(expected, rel=1e-12)


def test_vec_is_column_major():
    M = np.arange(6).reshape(3, 2)
    np.testing.assert_array_equal(vec(M), [0, 2, 4, 1, 3, 5])
    np.testing.assert_array_equal(unvec(vec(M), 3), M)


@given(st.integers(2, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_residual_linear_in_theta(N, T, seed):
    rng = np.random.default_rng(seed)
    V = 400 + rng.uniform(-5, 5, (T, N))
    X, S = _inputs(rng, T, N)
    p = uniform_params(Topology.complete(N), rng.uniform(0, 1000, N), rng.uniform(0, 200, N),
                       rng.uniform(0, 200, N), rng.uniform(0, 50, N), rng.uniform(0.5, 2, N * (N - 1) // 2))
    th = pack_theta(p)
    om = residual_omega(V, X, S, p)
    lin = jacobian_theta(V, X, S) @ th
    np.testing.assert_allclose(lin, vec(om), rtol=1e-12, atol=1e-12 * np.abs(vec(om)).max())


def test_voltage_jacobian_finite_difference(rng):
    N, T = 4, 3
    p = uniform_params(Topology.ring(N), rng.uniform(100, 1000, N), 200.0, 150.0, 40.0, 1.3)
    V = 400 + rng.uniform(-5, 5, (T, N))
    X, S = _inputs(rng, T, N)
    modes = np.array([1, 0, 1, 1.0])
    p_ref = np.array([0, 300.0, 0, 0])
    G = jacobian_voltage(V, X, S, p, modes)
    h = 1e-4
    num = np.zeros_like(G)
    for j in range(N * T):
        e = np.zeros(N * T)
        e[j] = h
        f = lambda dv: vec(residual_omega(V + unvec(dv, T), X, S, p, modes, p_ref))  # noqa: E731
        num[:, j] = (f(e) - f(-e)) / (2 * h)
    np.testing.assert_allclose(G, num, rtol=1e-7, atol=1e-7 * np.abs(G).max())


def test_block_inverse_matches_dense(rng):
    T, N = 5, 3
    G = rng.standard_normal((T, N, N)) + 4 * np.eye(N)
    R = rng.standard_normal((N * T, 4))
    np.testing.assert_allclose(apply_block_inverse(G, R),
                               np.linalg.solve(blocks_to_vec_matrix(G), R), rtol=1e-10)
    np.testing.assert_allclose(apply_block_inverse(G, R[:, 0]),
                               np.linalg.solve(blocks_to_vec_matrix(G), R[:, 0]), rtol=1e-10)


@pytest.mark.parametrize("topo", ["line", "ring", "complete"])
def test_solver_residual_and_conservation(topo, rng):
    N, T = 5, 40
    p = uniform_params(getattr(Topology, topo)(N), rng.uniform(100, 1000, N),
                       rng.uniform(0, 200, N), rng.uniform(0, 200, N), rng.uniform(0, 80, N), 1.0)
    X, S = _inputs(rng, T, N)
    st_ = solve_steady_state(X, S, p)
    assert st_.max_residual < 1e-9 * 400.0
    inj = der_powers(st_.V, X, S, p.g).sum(axis=1)
    cons = load_powers(st_.V, p).sum(axis=1) + line_losses(st_.V, p)
    np.testing.assert_allclose(inj, cons, rtol=1e-9)


def test_linear_case_cross_check(rng):
    N, T = 6, 30
    p = uniform_params(Topology.line(N), rng.uniform(100, 1000, N), rng.uniform(0, 200, N),
                       rng.uniform(0, 200, N), 0.0, 1.0)
    X, S = _inputs(rng, T, N)
    V_newton = solve_steady_state(X, S, p).V
    V_lin = solve_linear(X, S, p)
    np.testing.assert_allclose(V_newton, V_lin, rtol=1e-10)
    with pytest.raises(ValueError):
        solve_linear(X, S, uniform_params(Topology.line(N), 1.0, 0.0, 0.0, 5.0, 1.0))


def test_csc_unit_delivers_reference(rng):
    N = 3
    p = uniform_params(Topology.line(N), 1000.0, 200.0, 200.0, 0.0, 1.0)
    X = np.full((1, N), 400.0)
    S = np.full((1, N), S_NOM)
    modes = np.array([0.0, 1.0, 1.0])
    p_ref = np.array([250.0, 0.0, 0.0])
    V = solve_steady_state(X, S, p, modes, p_ref).V
    P = der_powers(V, X, S, p.g, modes, p_ref)
    assert P[0, 0] == 250.0
    np.testing.assert_allclose(P.sum(), load_powers(V, p).sum() + line_losses(V, p)[0], rtol=1e-9)


def test_collapse_and_nonconvergence_raise():
    # constant-power demand far beyond what the droop units can deliver
    p = uniform_params(Topology.line(2), 10.0, 0.0, 0.0, 1e6, 1.0)
    X = np.full((1, 2), 400.0)
    S = np.full((1, 2), S_NOM)
    with pytest.raises((ZeroVoltageCollapse, NonConvergence)):
        solve_steady_state(X, S, p)


def test_margin_violation_flag():
    p = uniform_params(Topology.line(2), 1000.0, 2000.0, 0.0, 0.0, 1.0)
    X = np.full((1, 2), 400.0)
    S = np.full((1, 2), S_NOM)
    st_ = solve_steady_state(X, S, p, v_min=385.0, v_max=415.0)
    assert st_.margin_violation


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba unavailable")
def test_numba_and_numpy_kernels_agree(rng):
    N, T = 4, 25
    p = uniform_params(Topology.ring(N), rng.uniform(100, 1000, N), 200.0, 200.0, 30.0, 1.0)
    X, S = _inputs(rng, T, N)
    A, B, C = compact_coefficients(X, S, p)
    Y = p.conductance_matrix()
    V0 = np.full((T, N), 400.0)
    Vn, itn, sn = _kernels.newton_slots(A, B, C, Y, V0, 4e-7, use_numba=False)
    Vb, itb, sb = _kernels.newton_slots(A, B, C, Y, V0, 4e-7, use_numba=True)
    np.testing.assert_allclose(Vn, Vb, rtol=1e-12)
    np.testing.assert_array_equal(sn, sb)
    G = voltage_jacobian_blocks(Vn, X, S, p)
    R = rng.standard_normal((T, N, 3))
    np.testing.assert_allclose(_kernels.block_solve(G, R, use_numba=False),
                               _kernels.block_solve(G, R, use_numba=True), rtol=1e-11)


def test_env_flag_disables_numba(monkeypatch):
    monkeypatch.setenv("POWERTALK_NO_NUMBA", "1")
    assert not _kernels._want_numba()
    monkeypatch.setenv("POWERTALK_NO_NUMBA", "0")
    assert _kernels._want_numba()


def test_single_bus_constant_power_root():
    # v (x - v) y = d_cp  ->  v = (x + sqrt(x^2 - 4 d_cp / y)) / 2, about 397.09 V
    p = uniform_params(Topology(1, ()), 1000.0, 0.0, 0.0, 200.0, np.zeros(0))
    y = S_NOM * 1000.0
    assert y == pytest.approx(0.173160, abs=5e-7)
    V = solve_steady_state([[400.0]], [[S_NOM]], p).V[0, 0]
    expected = (400.0 + np.sqrt(400.0**2 - 4 * 200.0 / y)) / 2
    assert V == pytest.approx(expected, rel=1e-12)
    assert V == pytest.approx(397.0913, abs=1e-4)

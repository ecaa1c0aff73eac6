import numpy as np
import pytest

from powertalk.channel import compute_sigma
from powertalk.crlb import (
    aggregate_demand_matrix,
    block_rrmse,
    bound_at_truth,
    closed_form_bounds,
    constrained_crlb,
    fisher_information,
    local_observability_demo,
    rrmse,
    theta_minus_blocks,
)
from powertalk.grid_model import pack_theta, theta_dim
from powertalk.steady_state import jacobian_theta, voltage_jacobian_blocks
from powertalk.training import simulate_epoch


def _setup(plan, params, n=0):
    m = simulate_epoch(params, plan, rng=0, sigma=0.0)
    p = m.plan
    V = m.V_bar
    U = jacobian_theta(V, p.X_bar, p.S_bar, p.x_rated)
    G = voltage_jacobian_blocks(V, p.X_bar, p.S_bar, params)
    cov = compute_sigma(m.V_alpha[:, n], m.V_beta[:, :, n], p, p.sigma, n)
    return np.delete(U, n, axis=1), G, cov


def test_two_routes_agree(small_plan, ref_params):
    Um, G, cov = _setup(small_plan, ref_params(3), n=1)
    bt, bv, _ = closed_form_bounds(Um, G, cov)
    full = constrained_crlb(Um, G, cov)
    k = Um.shape[1]
    np.testing.assert_allclose(full[:k, :k], bt, rtol=1e-8 * np.abs(bt).max() / np.abs(bt).min())
    assert np.linalg.norm(full[:k, :k] - bt) / np.linalg.norm(bt) < 1e-8
    assert np.linalg.norm(full[k:, k:] - bv) / np.linalg.norm(bv) < 1e-8


def test_bound_is_inverse_fisher(small_plan, ref_params):
    Um, G, cov = _setup(small_plan, ref_params(3))
    J = fisher_information(Um, G, cov)
    bt, _, _ = closed_form_bounds(Um, G, cov)
    # compare in the column-scaled basis, where the product is well conditioned
    d = np.sqrt(np.diag(J))
    np.testing.assert_allclose((J / np.outer(d, d)) @ (bt * np.outer(d, d)), np.eye(J.shape[0]),
                               atol=1e-5)


def test_bound_scales_with_noise_variance(small_plan, ref_params):
    Um, G, cov = _setup(small_plan, ref_params(3))
    b1 = closed_form_bounds(Um, G, cov)[0]
    b4 = closed_form_bounds(Um, G, cov.scaled(4.0))[0]
    np.testing.assert_allclose(b4, 4 * b1, rtol=1e-8, atol=1e-12 * np.abs(b1).max())


def test_blocks_and_rrmse(ref_params):
    N = 4
    idx = theta_minus_blocks(N, 2)
    assert sum(len(v) for v in idx.values()) == theta_dim(N) - 1
    tm = np.delete(pack_theta(ref_params(N)), 2)
    mse = np.eye(tm.size)
    out = block_rrmse(mse, tm, N, 2)
    assert out["g"] == pytest.approx(np.sqrt(3) / np.sqrt(3 * 1000.0**2))
    A = aggregate_demand_matrix(N)
    assert out["d_star"] == pytest.approx(np.sqrt(np.trace(A @ A.T)) / np.linalg.norm(A @ tm[3:15]))
    with pytest.raises(ValueError):
        rrmse(np.eye(2), np.zeros(2))


def test_bound_at_truth_report(small_plan, ref_params):
    rep = bound_at_truth(ref_params(3), small_plan, 0, constrained=True)
    assert set(rep.rrmse) == {"g", "d", "psi", "d_star"}
    assert rep.rrmse["d"] > 10 * rep.rrmse["d_star"]
    assert rep.bound_constrained is not None


def test_local_observability_counts():
    rep = local_observability_demo(6, 600)
    assert rep.dim_extended == 3038 and rep.max_rank == 600
    assert not rep.identifiable and rep.deficit == 2438

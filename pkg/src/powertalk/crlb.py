"""Cramer-Rao bounds for one controller's joint parameter and state estimate.

Two equivalent routes are provided: the constrained bound built on a
null-space basis of the constraint Jacobian ``[Upsilon_-n, Gamma]``, and the
closed form obtained by eliminating the voltages with the implicit-function
Jacobian ``-Gamma^-1 Upsilon_-n``.  Both go through whitened, column-scaled
QR factors rather than explicit inverses of the badly conditioned Fisher
information.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from powertalk.channel import CovarianceFactor, compute_sigma
from powertalk.errors import SufficientExcitationViolated
from powertalk.grid_model import theta_dim
from powertalk.steady_state import (
    apply_block_inverse,
    blocks_to_vec_matrix,
    jacobian_theta,
    voltage_jacobian_blocks,
)
from powertalk.training import MeasurementSet, TrainingPlan, simulate_epoch

NULL_RTOL = 1e-10
COND_WARN = 1e12


def _scale_cols(M):
    nrm = np.linalg.norm(M, axis=0)
    nrm[nrm == 0] = 1.0
    return M / nrm, nrm


def _gram_inverse_factor(M):
    """``F`` with ``(M^T M)^-1 = F F^T``, via QR of the column-scaled ``M``."""
    Ms, nrm = _scale_cols(M)
    R = np.linalg.qr(Ms, mode="r")
    Rinv = sla.solve_triangular(R, np.eye(R.shape[0]))
    return Rinv / nrm[:, None], np.linalg.cond(R)


def fisher_information(U_minus, G, sigma: CovarianceFactor) -> np.ndarray:
    """``J = Phi^T Sigma^-1 Phi`` with ``Phi = Gamma^-1 Upsilon_-n``."""
    Phi = apply_block_inverse(G, U_minus)
    Mw = sigma.whiten(Phi)
    return Mw.T @ Mw


def closed_form_bounds(U_minus, G, sigma: CovarianceFactor):
    """Bounds on ``theta_-n`` and on ``vec(V_bar)`` from the reduced Fisher information.

    Parameters
    ----------
    U_minus : (N T_bar, dim - 1) array
    G : (T_bar, N, N) array
        Slot blocks of ``Gamma``.
    sigma : CovarianceFactor

    Returns
    -------
    (bound_theta, bound_V, cond) : tuple
        ``J^-1``, ``Gamma^-1 Upsilon_-n J^-1 Upsilon_-n^T Gamma^-T`` and the
        condition number of the scaled triangular factor.
    """
    try:
        Phi = apply_block_inverse(G, U_minus)
    except np.linalg.LinAlgError as exc:
        raise SufficientExcitationViolated("singular voltage Jacobian") from exc
    F, cond = _gram_inverse_factor(sigma.whiten(Phi))
    bound_theta = F @ F.T
    PF = Phi @ F
    bound_V = PF @ PF.T
    return _sym(bound_theta), _sym(bound_V), cond


def constrained_crlb(U_minus, G, sigma: CovarianceFactor, rtol: float = NULL_RTOL) -> np.ndarray:
    """Bound on the joint vector ``[theta_-n; vec(V_bar)]`` under the power-balance constraint.

    ``O (O^T blockdiag(0, Sigma^-1) O)^-1 O^T`` with ``O`` spanning the null
    space of ``[Upsilon_-n, Gamma]``.  The expression does not depend on which
    basis of the null space is used, so the basis is taken from the SVD of the
    column-scaled constraint Jacobian.

    Raises
    ------
    SufficientExcitationViolated
        The null space does not have dimension ``dim(theta_-n)``.
    """
    U_minus = np.asarray(U_minus, dtype=float)
    k = U_minus.shape[1]
    Gd = blocks_to_vec_matrix(np.asarray(G, dtype=float)) if np.ndim(G) == 3 else np.asarray(G)
    Fc = np.hstack([U_minus, Gd])
    Fs, nrm = _scale_cols(Fc)
    _, sv, Vt = np.linalg.svd(Fs)
    rank = int(np.sum(sv > rtol * sv[0]))
    null_dim = Fc.shape[1] - rank
    if null_dim != k:
        raise SufficientExcitationViolated(
            f"constraint null space has dimension {null_dim}, expected {k}"
        )
    O = Vt[rank:].T / nrm[:, None]  # basis of null([Upsilon_-n, Gamma])
    M = sigma.whiten(O[k:])
    F, _ = _gram_inverse_factor(M)
    OF = O @ F
    return _sym(OF @ OF.T)


def _sym(M):
    return 0.5 * (M + M.T)


def rrmse(block, truth) -> float:
    """``sqrt(trace(block)) / ||truth||``."""
    truth = np.asarray(truth, dtype=float)
    nt = np.linalg.norm(truth)
    if nt == 0:
        raise ValueError("truth has zero norm")
    return float(np.sqrt(max(np.trace(np.atleast_2d(block)), 0.0)) / nt)


def aggregate_demand_matrix(n_bus: int) -> np.ndarray:
    """``[I, I, I]``: per-bus total demand from the three ZIP components."""
    return np.hstack([np.eye(n_bus)] * 3)


def theta_minus_blocks(n_bus: int, n: int) -> dict:
    """Index arrays of the constituent blocks inside ``theta_-n``."""
    N = n_bus
    return {
        "g": np.arange(N - 1),
        "d": np.arange(N - 1, 4 * N - 1),
        "psi": np.arange(4 * N - 1, theta_dim(N) - 1),
    }


def block_rrmse(mse, theta_minus_true, n_bus: int, n: int) -> dict:
    """RRMSE of ``g_-n``, ``d``, the aggregated ``d_star`` and ``psi`` from an MSE matrix."""
    idx = theta_minus_blocks(n_bus, n)
    out = {}
    for key in ("g", "d", "psi"):
        ix = idx[key]
        out[key] = rrmse(mse[np.ix_(ix, ix)], theta_minus_true[ix])
    A = aggregate_demand_matrix(n_bus)
    dix = idx["d"]
    out["d_star"] = rrmse(A @ mse[np.ix_(dix, dix)] @ A.T, A @ theta_minus_true[dix])
    return out


@dataclass
class BoundReport:
    """Bounds for controller ``n`` evaluated at the true parameters."""

    n: int
    fim: np.ndarray
    bound_theta: np.ndarray
    bound_V: np.ndarray
    rrmse: dict
    cond: float
    bound_constrained: Optional[np.ndarray] = None


def bound_at_truth(theta, plan: TrainingPlan, n: int, meas: Optional[MeasurementSet] = None,
                   sigma: Optional[float] = None, cross_block: bool = True,
                   constrained: bool = False) -> BoundReport:
    """Bound for controller ``n`` with Jacobians and covariance at the noiseless epoch."""
    from powertalk.grid_model import pack_theta
    from powertalk.steady_state import as_params

    params = as_params(theta, plan.n_bus)
    tv = pack_theta(params)
    if meas is None:
        meas = simulate_epoch(params, plan, rng=0, sigma=0.0)
    plan = meas.plan
    s = plan.sigma if sigma is None else sigma
    V = meas.V_bar
    U = jacobian_theta(V, plan.X_bar, plan.S_bar, plan.x_rated)
    U_minus = np.delete(U, n, axis=1)
    G = voltage_jacobian_blocks(V, plan.X_bar, plan.S_bar, params, x_rated=plan.x_rated)
    cov = compute_sigma(meas.V_alpha[:, n], meas.V_beta[:, :, n], plan, s, n, cross_block)
    bt, bv, cond = closed_form_bounds(U_minus, G, cov)
    tm = np.delete(tv, n)
    report = BoundReport(
        n=n, fim=fisher_information(U_minus, G, cov), bound_theta=bt, bound_V=bv,
        rrmse=block_rrmse(bt, tm, plan.n_bus, n), cond=cond,
    )
    if constrained:
        report.bound_constrained = constrained_crlb(U_minus, G, cov)
    return report


@dataclass(frozen=True)
class ObservabilityReport:
    n_bus: int
    T: int
    dim_extended: int
    max_rank: int

    @property
    def identifiable(self) -> bool:
        return self.max_rank >= self.dim_extended

    @property
    def deficit(self) -> int:
        return self.dim_extended - self.max_rank


def local_observability_demo(n_bus: int, T: int) -> ObservabilityReport:
    """Dimension count when a controller only sees its own bus voltage.

    Remote voltages become extra unknowns, one per remote bus and slot,
    while the local power balance supplies at most one equation per slot.
    """
    N = n_bus
    dim = theta_dim(N) - 1 + (N - 1) * T
    return ObservabilityReport(N, T, dim, T)


__all__ = [
    "BoundReport",
    "ObservabilityReport",
    "aggregate_demand_matrix",
    "block_rrmse",
    "bound_at_truth",
    "closed_form_bounds",
    "constrained_crlb",
    "fisher_information",
    "local_observability_demo",
    "rrmse",
    "theta_minus_blocks",
]

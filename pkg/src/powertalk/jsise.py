"""Joint system identification and state estimation from one controller's view.

Controller ``n`` knows its own DER capacity ``g_n``, the pre-shared M-phase
inputs and its local copy of the M-phase measurements.  It estimates the
remaining parameters ``theta_-n`` jointly with the M-phase voltages by
constrained maximum likelihood, iterating on the power balance linearised
in the voltages only (it is already linear in the parameters).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from powertalk.channel import CovarianceFactor
from powertalk.errors import MaxIterExceeded, SufficientExcitationViolated
from powertalk.grid_model import GridParameters, theta_dim, unpack_theta
from powertalk.steady_state import (
    apply_block_inverse,
    jacobian_theta,
    residual_omega,
    unvec,
    vec,
    voltage_jacobian_blocks,
)
from powertalk.training import TrainingPlan

PINV_RCOND = 1e-10
MAX_ITER = 100


def insert_own(theta_minus, g_n, n) -> np.ndarray:
    """Full ``theta`` from ``theta_-n`` and the known ``g_n``."""
    tm = np.asarray(theta_minus, dtype=float)
    return np.concatenate((tm[:n], [float(g_n)], tm[n:]))


def drop_own(theta, n) -> np.ndarray:
    return np.delete(np.asarray(theta, dtype=float), n)


@dataclass
class EstimationResult:
    """Outcome of one controller's estimation run."""

    n: int
    theta_minus: np.ndarray
    theta: np.ndarray
    V_bar: np.ndarray
    iterations: int
    converged: bool
    step_norms: list = field(default_factory=list)
    residual: float = float("nan")
    theta_init: Optional[np.ndarray] = None

    @property
    def n_bus(self) -> int:
        return self.V_bar.shape[1]

    def params(self, clamp: bool = True) -> GridParameters:
        """Estimated parameters; negative entries are set to zero when ``clamp``."""
        p = unpack_theta(self.theta, self.n_bus)
        return p.clamped() if clamp else p


def _solve_lstsq_scaled(M, rhs, rcond=PINV_RCOND):
    # column equilibration leaves the solution of a full-rank system unchanged
    nrm = np.linalg.norm(M, axis=0)
    nrm[nrm == 0] = 1.0
    sol, _, rank, _ = sla.lstsq(M / nrm, rhs, cond=rcond, lapack_driver="gelsy",
                                check_finite=False)
    return sol / nrm, rank


def init_estimate(W_bar_n, plan: TrainingPlan, g_n: float, n: int):
    """Least-squares start ``theta^(0)_-n = -pinv(Upsilon_-n) upsilon_n g_n`` at ``V = W_bar_(n)``.

    Returns ``(theta_minus0, V0)`` with ``V0`` the local copy itself.

    Raises
    ------
    SufficientExcitationViolated
        ``Upsilon_-n`` is rank deficient at the local copy.
    """
    W = np.asarray(W_bar_n, dtype=float)
    U = jacobian_theta(W, plan.X_bar, plan.S_bar, plan.x_rated)
    U_minus = np.delete(U, n, axis=1)
    theta_minus, rank = _solve_lstsq_scaled(U_minus, -U[:, n] * g_n)
    if rank < U_minus.shape[1]:
        raise SufficientExcitationViolated(
            f"Upsilon_-n has rank {rank} < {U_minus.shape[1]} at the local copy"
        )
    return theta_minus, W.copy()


def jsise_step(theta_minus, V, W_bar_n, sigma: CovarianceFactor, plan: TrainingPlan,
               g_n: float, n: int):
    """One update of ``(theta_-n, V)`` with the Jacobians at the current iterate.

    With ``Phi = Gamma^-1 Upsilon_-n`` and
    ``phi = Gamma^-1 upsilon_n g_n + vec(W - V)``::

        theta_-n <- -(Phi^T Sigma^-1 Phi)^-1 Phi^T Sigma^-1 phi
        vec(V)   <- vec(V) - Gamma^-1 Upsilon theta

    The first line is solved as the equivalent whitened least-squares problem.
    Returns ``(theta_minus_new, V_new)``.
    """
    V = np.asarray(V, dtype=float)
    theta = insert_own(theta_minus, g_n, n)
    U = jacobian_theta(V, plan.X_bar, plan.S_bar, plan.x_rated)
    G = voltage_jacobian_blocks(V, plan.X_bar, plan.S_bar, theta, x_rated=plan.x_rated)
    try:
        GU = apply_block_inverse(G, U)
    except np.linalg.LinAlgError as exc:
        raise SufficientExcitationViolated("singular voltage Jacobian") from exc
    Phi = np.delete(GU, n, axis=1)
    phi = GU[:, n] * g_n + vec(np.asarray(W_bar_n, dtype=float) - V)
    # whitened, column-equilibrated least squares instead of the normal equations,
    # whose condition number is the square of an already large one
    theta_minus_new, rank = _solve_lstsq_scaled(sigma.whiten(Phi), -sigma.whiten(phi))
    if rank < Phi.shape[1]:
        raise SufficientExcitationViolated("singular information matrix")
    theta_new = insert_own(theta_minus_new, g_n, n)
    V_new = V - unvec(GU @ theta_new, plan.T_bar)
    return theta_minus_new, V_new


def run_jsise(W_bar_n, plan: TrainingPlan, sigma: CovarianceFactor, g_n: float, n: int,
              eps: Optional[float] = None, max_iter: int = MAX_ITER,
              raise_on_max: bool = True, init=None,
              patience: Optional[int] = None) -> EstimationResult:
    """Iterate :func:`jsise_step` from :func:`init_estimate` until the step is small.

    Parameters
    ----------
    W_bar_n : (T_bar, N) array
        Controller ``n``'s local copy of the M-phase measurements.
    plan : TrainingPlan
    sigma : CovarianceFactor
        Covariance of ``vec(W_bar_n)``, held fixed across iterations.
    g_n : float
        Own capacity (known).
    n : int
    eps : float, optional
        Step-norm threshold; default ``1e-6 (1 + ||[theta^(0)_-n; vec(V^(0))]||)``.
    max_iter : int
    raise_on_max : bool
        Raise :class:`MaxIterExceeded` (with the last iterate attached) when
        the budget is exhausted; otherwise return it with ``converged=False``.
    init : tuple, optional
        ``(theta_minus0, V0)`` overriding the least-squares start.
    patience : int, optional
        Give up early once the smallest step norm seen has not improved for
        this many iterations (the run is then reported as not converged).

    Returns
    -------
    EstimationResult
    """
    theta_minus, V = init_estimate(W_bar_n, plan, g_n, n) if init is None else init
    theta0 = theta_minus.copy()
    if eps is None:
        eps = 1e-6 * (1.0 + np.sqrt(theta_minus @ theta_minus + np.sum(V * V)))
    steps = []
    converged = False
    it = 0
    best, best_it = np.inf, 0
    while it < max_iter:
        t_new, V_new = jsise_step(theta_minus, V, W_bar_n, sigma, plan, g_n, n)
        it += 1
        step = np.sqrt(np.sum((t_new - theta_minus) ** 2) + np.sum((V_new - V) ** 2))
        steps.append(float(step))
        theta_minus, V = t_new, V_new
        if not np.all(np.isfinite(theta_minus)):
            break
        if step < eps:
            converged = True
            break
        if step < best:
            best, best_it = step, it
        elif patience is not None and it - best_it >= patience:
            break
    theta = insert_own(theta_minus, g_n, n)
    res = float(np.abs(residual_omega(V, plan.X_bar, plan.S_bar, theta, x_rated=plan.x_rated)).max())
    result = EstimationResult(n, theta_minus, theta, V, it, converged, steps, res, theta0)
    if not converged and raise_on_max:
        raise MaxIterExceeded(f"J-SISE did not converge in {max_iter} iterations", result=result)
    return result


def estimate_all(meas, g, cross_block: bool = True, normalised: bool = False,
                 controllers=None, strict: bool = True, **kw) -> list[EstimationResult]:
    """Run every controller's estimator on one simulated epoch."""
    from powertalk.channel import compute_sigma, local_copies

    plan = meas.plan
    copies = local_copies(meas, strict)
    # only the shape of Sigma matters to the estimator; noiseless runs use sigma = 1
    s = 1.0 if (normalised or meas.sigma == 0) else meas.sigma
    out = []
    idx = range(plan.n_bus) if controllers is None else controllers
    for n in idx:
        cov = compute_sigma(meas.W_alpha[:, n], meas.W_beta[:, :, n], plan, s, n, cross_block, strict)
        if strict:
            out.append(run_jsise(copies[n], plan, cov, float(g[n]), n, **kw))
        else:
            out.append(_run_lenient(copies[n], plan, cov, float(g[n]), n, **kw))
    return out


def _run_lenient(W, plan, cov, g_n, n, **kw):
    # never raise: fall back to the last iterate, then to the initial estimate
    kw = dict(kw, raise_on_max=False)
    try:
        return run_jsise(W, plan, cov, g_n, n, **kw)
    except MaxIterExceeded as exc:
        return exc.result
    except (SufficientExcitationViolated, np.linalg.LinAlgError):
        pass
    try:
        t0, V0 = init_estimate(W, plan, g_n, n)
    except (SufficientExcitationViolated, np.linalg.LinAlgError):
        t0, V0 = np.full(theta_dim(plan.n_bus) - 1, np.nan), np.asarray(W, dtype=float)
    return EstimationResult(n, t0, insert_own(t0, g_n, n), V0, 0, False, [], float("nan"), t0)


def joint_dim(n_bus: int, T_bar: int) -> int:
    return theta_dim(n_bus) + n_bus * T_bar

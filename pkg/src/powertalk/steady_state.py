"""Per-slot power balance: residual, Jacobians and the Newton solver.

Matrices over a training epoch are ``(T, N)`` with one row per slot.  Stacked
vectors use column-major order, i.e. ``vec(V)[m * T + t] = V[t, m]``, which
is also the row order of the Jacobians returned here.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from powertalk import _kernels
from powertalk.errors import NonConvergence, SufficientExcitationViolated, ZeroVoltageCollapse
from powertalk.grid_model import (
    GridParameters,
    laplacian_from_full_psi,
    pair_index,
    theta_dim,
    unpack_theta,
)

ThetaLike = Union[GridParameters, np.ndarray]

#: condition number above which a voltage Jacobian is treated as singular
GAMMA_COND_LIMIT = 1e12


class MarginViolation(UserWarning):
    """Solved voltages left the ``[v_min, v_max]`` band."""


def as_params(theta: ThetaLike, n_bus: int) -> GridParameters:
    if isinstance(theta, GridParameters):
        return theta
    return unpack_theta(theta, n_bus)


@dataclass
class SlotInputs:
    """Droop references and slopes per slot plus the converter modes."""

    X: np.ndarray
    S: np.ndarray
    modes: Optional[np.ndarray] = None
    p_ref: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        if self.X.shape != self.S.shape:
            raise ValueError("X and S must have the same shape")
        N = self.X.shape[1]
        self.modes = (
            np.ones(N, dtype=np.int64) if self.modes is None
            else np.asarray(self.modes, dtype=np.int64)
        )
        self.p_ref = np.zeros(N) if self.p_ref is None else np.asarray(self.p_ref, dtype=float)


@dataclass
class StateMatrix:
    V: np.ndarray
    iterations: np.ndarray
    margin_violation: bool = False
    max_residual: float = 0.0
    extra: dict = field(default_factory=dict)


def _modes(modes, N):
    if modes is None:
        return np.ones(N)
    return np.asarray(modes, dtype=float)


def compact_coefficients(X, S, params: GridParameters, modes=None, p_ref=None, x_rated=400.0):
    """Coefficients ``A, B, C`` of ``omega = A v^2 + v (Y v) - B v + C``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    N = params.n_bus
    zeta = _modes(modes, N)
    p = np.zeros(N) if p_ref is None else np.asarray(p_ref, dtype=float)
    sg = S * (zeta * params.g)
    A = sg + params.d_ca / x_rated**2
    B = X * sg - params.d_cc / x_rated
    C = params.d_cp - (1.0 - zeta) * p
    return A, B, C


def residual_omega(V, X, S, theta: ThetaLike, modes=None, p_ref=None, x_rated=400.0):
    """Power-balance residual ``Omega`` (``(T, N)``, watts) at voltages ``V``.

    ``omega_n(t) = v^2 (zeta s g + d_ca/x^2) + v sum_m y_nm (v_n - v_m)
    - v (zeta x_n s g - d_cc/x) + d_cp - (1 - zeta) p``.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    params = as_params(theta, V.shape[1])
    A, B, C = compact_coefficients(X, S, params, modes, p_ref, x_rated)
    Y = params.conductance_matrix()
    return A * V * V + V * (V @ Y) - B * V + C


def vec(M) -> np.ndarray:
    """Column-major stacking."""
    return np.asarray(M).reshape(-1, order="F")


def unvec(v, n_rows: int) -> np.ndarray:
    v = np.asarray(v)
    return v.reshape((n_rows, -1), order="F")


def jacobian_theta(V, X, S, x_rated=400.0) -> np.ndarray:
    """Coefficient matrix ``Upsilon`` with ``vec(Omega) = Upsilon @ theta`` (all-VSC).

    Columns follow the ``theta`` layout; rows follow ``vec`` order.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    T, N = V.shape
    # (T, N, dim) per-slot rows, then reordered bus-major
    U = np.zeros((N, T, theta_dim(N)))
    bus = np.arange(N)
    Vt = V.T
    U[bus, :, bus] = (S * V * (V - X)).T
    U[bus, :, N + bus] = Vt * Vt / x_rated**2
    U[bus, :, 2 * N + bus] = Vt / x_rated
    U[bus, :, 3 * N + bus] = 1.0
    pairs = pair_index(N)
    if pairs.size:
        a, b = pairs[:, 0], pairs[:, 1]
        col = 4 * N + np.arange(len(pairs))
        va, vb = Vt[a], Vt[b]
        U[a, :, col] = va * (va - vb)
        U[b, :, col] = vb * (vb - va)
    return U.reshape(N * T, -1)


def voltage_jacobian_blocks(V, X, S, theta: ThetaLike, modes=None, x_rated=400.0) -> np.ndarray:
    """Per-slot blocks ``G[t] = d omega(t) / d v(t)``, shape ``(T, N, N)``."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    T, N = V.shape
    params = as_params(theta, N)
    A, B, _ = compact_coefficients(X, S, params, modes, None, x_rated)
    Y = params.conductance_matrix()
    diag = 2.0 * A * V + V @ Y - B
    G = V[:, :, None] * Y[None, :, :]
    idx = np.arange(N)
    G[:, idx, idx] += diag
    return G


def blocks_to_vec_matrix(G: np.ndarray) -> np.ndarray:
    """Dense ``(N T, N T)`` matrix in ``vec`` order from slot blocks."""
    T, N, _ = G.shape
    out = np.zeros((N * T, N * T))
    t = np.arange(T)
    for n in range(N):
        for m in range(N):
            out[n * T + t, m * T + t] = G[:, n, m]
    return out


def jacobian_voltage(V, X, S, theta: ThetaLike, modes=None, x_rated=400.0, check=False) -> np.ndarray:
    """``Gamma = d vec(Omega) / d vec(V)``; block diagonal across slots.

    With ``check=True`` a slot block whose condition number exceeds
    :data:`GAMMA_COND_LIMIT` raises :class:`SufficientExcitationViolated`.
    """
    G = voltage_jacobian_blocks(V, X, S, theta, modes, x_rated)
    if check:
        check_blocks_invertible(G)
    return blocks_to_vec_matrix(G)


def check_blocks_invertible(G: np.ndarray) -> None:
    conds = np.linalg.cond(G)
    if not np.all(np.isfinite(conds)) or np.any(conds > GAMMA_COND_LIMIT):
        raise SufficientExcitationViolated(
            f"voltage Jacobian is singular (max slot condition {np.max(conds):.3g})"
        )


def apply_block_inverse(G: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``Gamma^{-1} R`` for ``R`` of shape ``(N T,)`` or ``(N T, K)`` in vec order."""
    T, N, _ = G.shape
    one_d = R.ndim == 1
    Rm = R.reshape(N * T, -1)
    K = Rm.shape[1]
    # vec order (bus-major) -> slot stacks (T, N, K)
    stacked = Rm.reshape(N, T, K).transpose(1, 0, 2)
    sol = _kernels.block_solve(G, stacked)
    out = sol.transpose(1, 0, 2).reshape(N * T, K)
    return out[:, 0] if one_d else out


def der_powers(V, X, S, g, modes=None, p_ref=None) -> np.ndarray:
    """Converter output powers ``p_n(t)``; VSC: ``v (x - v) s g``, CSC: ``p_ref``."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    N = V.shape[1]
    zeta = _modes(modes, N)
    p = np.zeros(N) if p_ref is None else np.asarray(p_ref, dtype=float)
    vsc = V * (np.asarray(X) - V) * np.asarray(S) * np.asarray(g)
    return zeta * vsc + (1.0 - zeta) * p


def load_powers(V, params: GridParameters, x_rated=400.0) -> np.ndarray:
    V = np.atleast_2d(np.asarray(V, dtype=float))
    return params.d_ca * V**2 / x_rated**2 + params.d_cc * V / x_rated + params.d_cp


def line_losses(V, params: GridParameters) -> np.ndarray:
    """``v^T Y v`` per slot."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    Y = params.conductance_matrix()
    return np.einsum("tn,nm,tm->t", V, Y, V)


def solve_steady_state(
    X,
    S,
    theta: ThetaLike,
    modes=None,
    p_ref=None,
    v_init=None,
    x_rated=400.0,
    v_min=None,
    v_max=None,
    tol=None,
    max_iter=50,
    max_halvings=30,
    margin_eps=1e-6,
    warn=False,
) -> StateMatrix:
    """Solve ``Omega(V) = 0`` slot by slot with damped Newton.

    Parameters
    ----------
    X, S : array_like
        ``(T, N)`` reference voltages and droop slopes.
    theta : GridParameters or ndarray
    modes, p_ref : array_like, optional
        ``1`` for VSC, ``0`` for CSC with power reference ``p_ref``.
    v_init : array_like, optional
        Initial iterate, broadcast to ``(T, N)``; flat start ``x_rated``.
    tol : float, optional
        Absolute residual tolerance, default ``1e-9 * x_rated``.

    Raises
    ------
    NonConvergence, ZeroVoltageCollapse
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    T, N = X.shape
    params = as_params(theta, N)
    A, B, C = compact_coefficients(X, S, params, modes, p_ref, x_rated)
    Y = params.conductance_matrix()
    V0 = np.full((T, N), float(x_rated)) if v_init is None else np.broadcast_to(
        np.asarray(v_init, dtype=float), (T, N)
    )
    if tol is None:
        tol = 1e-9 * x_rated
    V, iters, status = _kernels.newton_slots(A, B, C, Y, V0, tol, max_iter, max_halvings)
    if np.any(status == _kernels.STATUS_COLLAPSE):
        bad = int(np.flatnonzero(status == _kernels.STATUS_COLLAPSE)[0])
        raise ZeroVoltageCollapse(f"non-positive voltage iterate in slot {bad}")
    if np.any(status != _kernels.STATUS_OK):
        bad = int(np.flatnonzero(status != _kernels.STATUS_OK)[0])
        raise NonConvergence(f"slot {bad} did not converge in {max_iter} Newton steps")
    om = A * V * V + V * (V @ Y) - B * V + C
    violation = False
    if v_min is not None and np.any(V < v_min - margin_eps):
        violation = True
    if v_max is not None and np.any(V > v_max + margin_eps):
        violation = True
    if violation and warn:
        warnings.warn("solved voltages outside the rated band", MarginViolation, stacklevel=2)
    return StateMatrix(
        V=V, iterations=iters, margin_violation=violation, max_residual=float(np.abs(om).max())
    )


def solve_linear(X, S, theta: ThetaLike, x_rated=400.0) -> np.ndarray:
    """Direct solve when ``d_cp = 0`` and all converters are VSC.

    Dividing each balance row by ``v_n > 0`` leaves
    ``(diag(s g + d_ca/x^2) + Y) v = x s g - d_cc/x``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    T, N = X.shape
    params = as_params(theta, N)
    if np.any(params.d_cp != 0):
        raise ValueError("linear solve requires d_cp = 0")
    A, B, _ = compact_coefficients(X, S, params, None, None, x_rated)
    Y = params.conductance_matrix()
    M = np.broadcast_to(Y, (T, N, N)).copy()
    idx = np.arange(N)
    M[:, idx, idx] += A
    return np.linalg.solve(M, B[:, :, None])[:, :, 0]


def full_y(theta_vec, n_bus):
    return laplacian_from_full_psi(np.asarray(theta_vec)[4 * n_bus :], n_bus)

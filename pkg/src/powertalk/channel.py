"""Implicit communication channel of the C-phase.

Around the nominal droop setting each bus voltage responds linearly to the
reference-voltage perturbations of every converter::

    w_n(t) = v~_n + sum_m h_{n,m} sqrt(pi_m(t)) dx_m(t) + z_n(t)

Sub-phase alpha estimates the gains ``h_n`` with orthogonal zero-mean codes;
sub-phase beta carries the M-phase measurements as block amplitudes, which
every controller demodulates into a local copy of the M-phase matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from powertalk.errors import NearZeroChannel
from powertalk.training import MeasurementSet, TrainingPlan, modulate_amplitudes

__all__ = [
    "ChannelEstimate",
    "CovarianceFactor",
    "compute_sigma",
    "demodulate",
    "demodulate_all",
    "estimate_channel",
    "linear_channel_response",
    "local_copies",
    "modulate_amplitudes",
]

CHANNEL_FLOOR = 1e-9


def _floor_gains(h, floor):
    # keep the sign, lift the magnitude; the covariance then de-weights the entry
    sgn = np.where(h < 0, -1.0, 1.0)
    return np.where(np.abs(h) < floor, sgn * floor, h)


@dataclass(frozen=True)
class ChannelEstimate:
    """Gains ``h`` seen by one receiver (``(N,)``) or by all receivers (``(N, N)``)."""

    h: np.ndarray

    def check(self) -> None:
        bad = np.abs(self.h) < CHANNEL_FLOOR
        if np.any(bad):
            raise NearZeroChannel(f"channel gain below {CHANNEL_FLOOR:g} at {np.argwhere(bad).tolist()}")


def estimate_channel(w_alpha, dX_alpha, sqrt_pi_alpha) -> ChannelEstimate:
    """Least-squares gains ``(sqrt_pi_alpha delta)^-1 dX^T w``.

    ``w_alpha`` is ``(T_alpha,)`` for one receiver or ``(T_alpha, N)`` for all;
    in the latter case row ``n`` of the result belongs to receiver ``n``.
    """
    dX = np.asarray(dX_alpha, dtype=float)
    delta = float(dX[:, 0] @ dX[:, 0])
    if delta == 0:
        raise ValueError("alpha code has zero energy")
    proj = dX.T @ np.asarray(w_alpha, dtype=float)
    return ChannelEstimate(np.asarray(proj.T / (sqrt_pi_alpha * delta)))


def linear_channel_response(h, v_tilde, dX, amplitudes):
    """Noiseless linear-channel output ``v~ + (dX * amp) h^T`` over the rows of ``dX``.

    ``h`` is the ``(N, N)`` receiver-by-source gain matrix, ``amplitudes``
    broadcasts against ``dX``.
    """
    drive = np.asarray(dX, dtype=float) * amplitudes
    return np.asarray(v_tilde, dtype=float)[None, :] + drive @ np.asarray(h, dtype=float).T


def _projections(W_alpha, W_beta, plan: TrainingPlan):
    # A[n, m] = dX^alpha_m . w^alpha_n ; B[b, n, m] = dX^beta_m . w^{beta;b}_n
    A = (plan.dX_alpha.T @ W_alpha).T
    B = np.einsum("lm,bln->bnm", plan.dX_beta, W_beta)
    return A, B


def demodulate_all(W_alpha, W_beta, plan: TrainingPlan, W_bar_own=None,
                   strict: bool = True) -> np.ndarray:
    """Local copies for every receiver, shape ``(N, T_bar, N)``.

    ``copies[n]`` is the M-phase matrix as reconstructed by controller ``n``.
    When ``W_bar_own`` is given, each controller's own column is replaced by
    its local measurements.  With ``strict=False`` gains below
    :data:`CHANNEL_FLOOR` are lifted to it instead of raising.
    """
    if plan.chi is None:
        raise ValueError("plan has no offsets; call plan.with_offsets first")
    W_beta = np.asarray(W_beta, dtype=float)
    if W_beta.ndim == 2:
        W_beta = W_beta.reshape(plan.T_bar, plan.L, plan.n_bus)
    A, B = _projections(np.asarray(W_alpha, dtype=float), W_beta, plan)
    h = A / (plan.sqrt_pi_alpha * plan.delta_alpha)
    if strict:
        ChannelEstimate(h).check()
    else:
        h = _floor_gains(h, CHANNEL_FLOOR)
    scale = plan.sqrt_pi_beta * plan.delta_beta
    copies = B.transpose(1, 0, 2) / (scale * h[:, None, :]) + plan.chi[None, None, :]
    if W_bar_own is not None:
        own = np.asarray(W_bar_own, dtype=float)
        idx = np.arange(plan.n_bus)
        copies[idx, :, idx] = own.T
    return copies


def demodulate(W_alpha, W_beta, plan: TrainingPlan, n=None, W_bar_own=None,
               strict: bool = True) -> np.ndarray:
    """Local copy ``W_bar_(n)`` (``(T_bar, N)``) held by controller ``n``.

    With ``n=None`` the stack for all controllers is returned.
    """
    copies = demodulate_all(W_alpha, W_beta, plan, W_bar_own, strict)
    return copies if n is None else copies[n]


def local_copies(meas: MeasurementSet, strict: bool = True) -> np.ndarray:
    """Demodulated copies for all controllers from a simulated epoch."""
    return demodulate_all(meas.W_alpha, meas.W_beta, meas.plan, meas.W_bar, strict)


@dataclass(frozen=True)
class CovarianceFactor:
    """Covariance that is block diagonal over buses: ``diag(D) + sum_m u_m u_m^T``.

    ``D`` and ``U`` are ``(N, T_bar)``; ``U[m]`` is supported on bus ``m``'s
    entries only, so each bus block is a diagonal plus a rank-one term.
    Stacking follows ``vec`` order (bus-major).
    """

    D: np.ndarray
    U: np.ndarray

    @property
    def n_bus(self) -> int:
        return self.D.shape[0]

    @property
    def T_bar(self) -> int:
        return self.D.shape[1]

    def dense(self) -> np.ndarray:
        N, T = self.D.shape
        out = np.zeros((N * T, N * T))
        for m in range(N):
            sl = slice(m * T, (m + 1) * T)
            out[sl, sl] = np.diag(self.D[m]) + np.outer(self.U[m], self.U[m])
        return out

    def diagonal(self) -> np.ndarray:
        return (self.D + self.U**2).reshape(-1)

    def scaled(self, factor: float) -> "CovarianceFactor":
        return CovarianceFactor(self.D * factor, self.U * np.sqrt(factor))

    def solve(self, R) -> np.ndarray:
        """``Sigma^{-1} R`` by Sherman-Morrison on each bus block."""
        N, T = self.D.shape
        R = np.asarray(R, dtype=float)
        one_d = R.ndim == 1
        Rb = R.reshape(N, T, -1)
        Dinv = 1.0 / self.D
        DR = Rb * Dinv[:, :, None]
        DU = self.U * Dinv
        denom = 1.0 + np.sum(self.U * DU, axis=1)
        coef = np.einsum("mt,mtk->mk", self.U, DR) / denom[:, None]
        out = DR - DU[:, :, None] * coef[:, None, :]
        out = out.reshape(N * T, -1)
        return out[:, 0] if one_d else out

    def whiten(self, R) -> np.ndarray:
        """``W R`` with ``W^T W = Sigma^-1``, built per bus block.

        For ``D + u u^T`` the factor is
        ``(I - b q q^T) D^{-1/2}`` with ``q = D^{-1/2} u / r``, ``r = |D^{-1/2} u|``
        and ``b = 1 - 1 / sqrt(1 + r^2)``.
        """
        N, T = self.D.shape
        R = np.asarray(R, dtype=float)
        one_d = R.ndim == 1
        Rb = R.reshape(N, T, -1) / np.sqrt(self.D)[:, :, None]
        w = self.U / np.sqrt(self.D)
        r2 = np.sum(w * w, axis=1)
        safe = np.where(r2 > 0, r2, 1.0)
        b = np.where(r2 > 0, (1.0 - 1.0 / np.sqrt(1.0 + r2)) / safe, 0.0)
        proj = np.einsum("mt,mtk->mk", w, Rb)
        out = Rb - (b[:, None] * proj)[:, None, :] * w[:, :, None]
        out = out.reshape(N * T, -1)
        return out[:, 0] if one_d else out

    def logdet(self) -> float:
        Dinv = 1.0 / self.D
        return float(np.sum(np.log(self.D)) + np.sum(np.log1p(np.sum(self.U**2 * Dinv, axis=1))))


def compute_sigma(w_alpha, w_beta, plan: TrainingPlan, sigma: float, n: int,
                  cross_block: bool = True, strict: bool = True) -> CovarianceFactor:
    """First-order covariance of ``vec(W_bar_(n))`` with measured signals plugged in.

    Parameters
    ----------
    w_alpha : (T_alpha,) array
        Receiver ``n``'s alpha-phase measurements.
    w_beta : (T_bar, L) or (T_bar * L,) array
        Receiver ``n``'s beta-phase measurements.
    plan : TrainingPlan
    sigma : float
        Per-slot noise std; ``1.0`` gives the normalised form.
    n : int
        Receiving controller.  Its own column carries only ``sigma^2``.
    cross_block : bool
        Keep the correlation across blocks induced by the shared channel
        estimate (default).  ``False`` drops it and returns a diagonal matrix.
    strict : bool
        Raise :class:`NearZeroChannel` on a vanishing alpha projection;
        otherwise lift it to the floor used by the demodulator.

    Returns
    -------
    CovarianceFactor
    """
    N, Tb = plan.n_bus, plan.T_bar
    w_alpha = np.asarray(w_alpha, dtype=float).reshape(-1)
    w_beta = np.asarray(w_beta, dtype=float).reshape(Tb, plan.L)
    A = plan.dX_alpha.T @ w_alpha  # (N,)
    B = w_beta @ plan.dX_beta  # (T_bar, N)
    floor = CHANNEL_FLOOR * plan.sqrt_pi_alpha * plan.delta_alpha
    if np.any(np.abs(A) < floor):
        if strict:
            raise NearZeroChannel("alpha-phase projection vanishes")
        A = _floor_gains(A, floor)
    c = plan.sqrt_pi_alpha * plan.delta_alpha / (plan.sqrt_pi_beta * plan.delta_beta)
    s2 = sigma**2
    D = s2 * (1.0 + (c**2 * plan.delta_beta) / A[:, None] ** 2) * np.ones((N, Tb))
    spread = c * np.sqrt(plan.delta_alpha) * sigma * B.T / A[:, None] ** 2  # (N, T_bar)
    D[n] = s2
    spread[n] = 0.0
    if cross_block:
        U = spread
    else:
        D = D + spread**2
        U = np.zeros_like(D)
    if np.any(D <= 0) and sigma > 0:
        raise ValueError("non-positive covariance diagonal")
    return CovarianceFactor(D, U)


def sigma_literal_dense(w_alpha, w_beta, plan: TrainingPlan, sigma: float) -> np.ndarray:
    """Dense covariance evaluated term by term in Kronecker form, without the own-column rule.

    Used as a cross-check of :func:`compute_sigma` with ``cross_block=False``.
    """
    N, Tb, L = plan.n_bus, plan.T_bar, plan.L
    w_alpha = np.asarray(w_alpha, dtype=float).reshape(-1)
    w_beta = np.asarray(w_beta, dtype=float).reshape(Tb, L)
    Xa = np.kron(plan.dX_alpha.T, np.ones((Tb, 1)))  # (N T_bar, T_alpha)
    xa = Xa @ w_alpha
    pa, pb = plan.sqrt_pi_alpha**2, plan.sqrt_pi_beta**2
    da, db = plan.delta_alpha, plan.delta_beta
    Dm2 = np.diag(xa**-2.0)
    third = np.zeros((N * Tb, N * Tb))
    ones_blk = np.kron(np.eye(N), np.ones((Tb, Tb)))
    for b in range(Tb):
        eb = np.zeros(Tb)
        eb[b] = 1.0
        Xb = np.kron(plan.dX_beta.T, eb[:, None])  # (N T_bar, L)
        xb = Xb @ w_beta[b]
        third += np.diag(xb) @ ones_blk @ np.diag(xb)
    return sigma**2 * (
        np.eye(N * Tb)
        + pa * da**2 / (pb * db) * Dm2
        + pa * da**3 / (pb * db**2) * Dm2 @ third @ Dm2
    )

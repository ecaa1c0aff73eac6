"""Training epoch: slot layout, perturbation sequences, excitation check, measurements.

Epoch layout (rows of every ``(T, N)`` matrix)::

    [ M-phase: T_bar ][ alpha: T_alpha ][ beta: T_bar blocks of L ][ idle ]

Idle slots run at the nominal droop setting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from powertalk.errors import ExcitationNotFound, TooFewSlots
from powertalk.grid_model import GridParameters, Topology, theta_dim, uniform_params
from powertalk.steady_state import (
    ThetaLike,
    as_params,
    jacobian_theta,
    solve_steady_state,
    voltage_jacobian_blocks,
)

RANK_RTOL = 1e-8
MAX_EXCITATION_ATTEMPTS = 100


def t_min(n_bus: int) -> float:
    """Smallest epoch length admitting unique identification, ``N^2/2 + 5N + 5/2 - 1/N``."""
    N = n_bus
    return 0.5 * N * N + 5 * N + 2.5 - 1.0 / N


def m_phase_length(T: int, T_alpha: int, L: int) -> int:
    return (T - T_alpha) // (1 + L)


def noise_std(tau, tau_transit, phi_s, sigma_s) -> float:
    """Per-slot noise std after averaging ``phi_s (tau - tau_transit)`` samples."""
    if tau <= tau_transit:
        raise ValueError("slot duration must exceed the transient time")
    return math.sqrt(sigma_s**2 / (phi_s * (tau - tau_transit)))


def c_phase_code(n_bus: int) -> np.ndarray:
    """``(2N, N)`` code with column ``n = e_n kron [1, -1]``: zero mean, ``D^T D = 2 I``."""
    D = np.zeros((2 * n_bus, n_bus))
    for n in range(n_bus):
        D[2 * n, n] = 1.0
        D[2 * n + 1, n] = -1.0
    return D


def m_phase_inputs(dX, sqrt_pi, x_rated, delta_v):
    """References ``x + sqrt_pi dx`` and slopes ``1 / (dv (x_n - x + dv))``."""
    X = x_rated + sqrt_pi * np.asarray(dX, dtype=float)
    S = 1.0 / (delta_v * (X - x_rated + delta_v))
    return X, S


@dataclass(frozen=True)
class TrainingPlan:
    """Complete, pre-shared description of one training epoch."""

    n_bus: int
    T: int
    T_bar: int
    T_alpha: int
    L: int
    tau: float
    tau_transit: float
    sqrt_pi: float
    kappa_alpha: float
    kappa_beta: float
    delta_v: float
    x_rated: float
    x_nom: float
    dv_nom: float
    dX_bar: np.ndarray
    dX_alpha: np.ndarray
    dX_beta: np.ndarray
    sigma_s: float = 0.1
    phi_s: float = 50e3
    v_min: float = 385.0
    v_max: float = 415.0
    chi: Optional[np.ndarray] = None
    seed: Optional[int] = None
    attempts: int = 1

    @property
    def T_beta(self) -> int:
        return self.T_bar * self.L

    @property
    def n_used(self) -> int:
        return self.T_bar * (1 + self.L) + self.T_alpha

    @property
    def n_idle(self) -> int:
        return self.T - self.n_used

    @property
    def sqrt_pi_alpha(self) -> float:
        return self.kappa_alpha * self.sqrt_pi

    @property
    def sqrt_pi_beta(self) -> float:
        return self.kappa_beta * self.sqrt_pi

    @property
    def delta_alpha(self) -> float:
        return float(self.dX_alpha[:, 0] @ self.dX_alpha[:, 0])

    @property
    def delta_beta(self) -> float:
        return float(self.dX_beta[:, 0] @ self.dX_beta[:, 0])

    @property
    def s_nom(self) -> float:
        return 1.0 / ((self.x_nom - self.dv_nom) * self.dv_nom)

    @property
    def X_bar(self) -> np.ndarray:
        return m_phase_inputs(self.dX_bar, self.sqrt_pi, self.x_rated, self.delta_v)[0]

    @property
    def S_bar(self) -> np.ndarray:
        return m_phase_inputs(self.dX_bar, self.sqrt_pi, self.x_rated, self.delta_v)[1]

    @property
    def sigma(self) -> float:
        return noise_std(self.tau, self.tau_transit, self.phi_s, self.sigma_s)

    def slices(self) -> dict[str, slice]:
        a0 = self.T_bar
        b0 = a0 + self.T_alpha
        b1 = b0 + self.T_beta
        return {
            "m": slice(0, a0),
            "alpha": slice(a0, b0),
            "beta": slice(b0, b1),
            "idle": slice(b1, self.T),
        }

    def block_slice(self, b: int) -> slice:
        start = self.T_bar + self.T_alpha + b * self.L
        return slice(start, start + self.L)

    def with_offsets(self, chi) -> "TrainingPlan":
        return replace(self, chi=np.asarray(chi, dtype=float))

    def nominal_inputs(self, n_rows: int = 1):
        N = self.n_bus
        return np.full((n_rows, N), self.x_nom), np.full((n_rows, N), self.s_nom)

    def c_phase_inputs(self, W_bar_own=None):
        """References for the alpha and beta slots.

        ``W_bar_own`` holds each controller's own M-phase measurements
        (``(T_bar, N)``); the beta amplitudes are ``sqrt_pi_beta (w_n(b) - chi_n)``.
        """
        X_alpha = self.x_nom + self.sqrt_pi_alpha * self.dX_alpha
        if W_bar_own is None:
            X_beta = np.full((self.T_beta, self.n_bus), self.x_nom)
        else:
            amp = modulate_amplitudes(W_bar_own, self.chi, self.sqrt_pi_beta)
            X_beta = (
                self.x_nom + amp[:, None, :] * self.dX_beta[None, :, :]
            ).reshape(self.T_beta, self.n_bus)
        return X_alpha, X_beta

    def full_inputs(self, W_bar_own=None):
        """``(X, S)`` over all ``T`` slots."""
        X_alpha, X_beta = self.c_phase_inputs(W_bar_own)
        X = np.full((self.T, self.n_bus), self.x_nom)
        S = np.full((self.T, self.n_bus), self.s_nom)
        sl = self.slices()
        X[sl["m"]] = self.X_bar
        S[sl["m"]] = self.S_bar
        X[sl["alpha"]] = X_alpha
        X[sl["beta"]] = X_beta
        return X, S


def modulate_amplitudes(w_bar, chi, sqrt_pi_beta) -> np.ndarray:
    """Per-block amplitudes ``sqrt_pi_beta (w_bar(b) - chi)``; constant inside a block."""
    return sqrt_pi_beta * (np.asarray(w_bar, dtype=float) - np.asarray(chi, dtype=float))


def default_reference(n_bus: int) -> GridParameters:
    return uniform_params(Topology.line(n_bus), 1000.0, 200.0, 200.0, 0.0, 1.0)


@dataclass
class ExcitationReport:
    passed: bool
    rank_upsilon: dict = field(default_factory=dict)
    dim_theta_minus: int = 0
    rank_gamma: int = 0
    dim_gamma: int = 0

    def __bool__(self):
        return self.passed


def numerical_rank(M, rtol=RANK_RTOL) -> int:
    if M.size == 0:
        return 0
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))


def _unit_columns(M):
    nrm = np.linalg.norm(M, axis=0)
    nrm[nrm == 0] = 1.0
    return M / nrm


def check_sufficient_excitation(Upsilon, Gamma, n=None, rtol=RANK_RTOL) -> ExcitationReport:
    """Rank conditions on ``Upsilon_{-n}`` (full column rank) and ``Gamma`` (full rank).

    ``Gamma`` may be the dense matrix or its ``(T, N, N)`` slot blocks.
    ``n`` selects one controller; by default every ``n`` is checked.
    Columns are normalised before the SVD; rank is scale invariant per column.
    """
    Upsilon = np.asarray(Upsilon, dtype=float)
    dim = Upsilon.shape[1]
    # N from dim = N(N+7)/2
    N = int(round((-7 + math.sqrt(49 + 8 * dim)) / 2))
    controllers = range(N) if n is None else [n]
    Un = _unit_columns(Upsilon)
    ranks = {}
    ok = True
    for k in controllers:
        sub = np.delete(Un, k, axis=1)
        r = numerical_rank(sub, rtol) if sub.shape[0] >= sub.shape[1] else numerical_rank(sub, rtol)
        ranks[k] = r
        ok &= r == dim - 1
    Gamma = np.asarray(Gamma, dtype=float)
    if Gamma.ndim == 3:
        rg = int(sum(numerical_rank(Gb, rtol) for Gb in Gamma))
        dg = Gamma.shape[0] * Gamma.shape[1]
    else:
        rg = numerical_rank(Gamma, rtol)
        dg = Gamma.shape[0]
    ok &= rg == dg
    return ExcitationReport(bool(ok), ranks, dim - 1, rg, dg)


def excitation_of(dX_bar, sqrt_pi, x_rated, delta_v, reference: GridParameters) -> ExcitationReport:
    X, S = m_phase_inputs(dX_bar, sqrt_pi, x_rated, delta_v)
    st = solve_steady_state(X, S, reference, x_rated=x_rated)
    Ups = jacobian_theta(st.V, X, S, x_rated)
    G = voltage_jacobian_blocks(st.V, X, S, reference, x_rated=x_rated)
    return check_sufficient_excitation(Ups, G)


def gen_mphase(plan_or_shape, seed=None, sqrt_pi=None, x_rated=400.0, delta_v=15.0,
               reference: Optional[GridParameters] = None, max_attempts=MAX_EXCITATION_ATTEMPTS):
    """Fair-coin ``+-1`` M-phase sequences that pass the excitation check.

    ``plan_or_shape`` is a :class:`TrainingPlan` or a ``(T_bar, N)`` tuple.
    Returns ``(X_bar, S_bar, dX_bar, attempts)``.
    """
    if isinstance(plan_or_shape, TrainingPlan):
        p = plan_or_shape
        shape = (p.T_bar, p.n_bus)
        sqrt_pi = p.sqrt_pi if sqrt_pi is None else sqrt_pi
        x_rated, delta_v = p.x_rated, p.delta_v
        seed = p.seed if seed is None else seed
    else:
        shape = tuple(plan_or_shape)
    if sqrt_pi is None:
        raise ValueError("sqrt_pi required")
    if not (0 <= sqrt_pi < delta_v):
        raise ValueError("need 0 <= sqrt_pi < delta_v")
    N = shape[1]
    ref = default_reference(N) if reference is None else reference
    rng = np.random.default_rng(seed)
    # excitation is checked at a fixed probe amplitude so the sequences do not
    # depend on sqrt_pi (a zero amplitude carries no excitation at all)
    probe = sqrt_pi if sqrt_pi > 0 else 0.5 * delta_v
    for attempt in range(1, max_attempts + 1):
        dX = rng.choice(np.array([-1.0, 1.0]), size=shape)
        if excitation_of(dX, probe, x_rated, delta_v, ref).passed:
            X, S = m_phase_inputs(dX, sqrt_pi, x_rated, delta_v)
            return X, S, dX, attempt
    raise ExcitationNotFound(f"no excited M-phase sequence in {max_attempts} attempts")


def make_plan(
    n_bus: int,
    T: int = 600,
    tau: float = 50e-3,
    sqrt_pi: float = 10.0,
    seed: Optional[int] = 0,
    *,
    T_alpha: Optional[int] = None,
    L: Optional[int] = None,
    tau_transit: float = 2.5e-3,
    kappa_alpha: float = 1.0,
    kappa_beta: float = 1.0,
    delta_v: float = 15.0,
    x_rated: float = 400.0,
    x_nom: float = 400.0,
    dv_nom: float = 15.0,
    sigma_s: float = 0.1,
    phi_s: float = 50e3,
    v_min: float = 385.0,
    v_max: float = 415.0,
    reference: Optional[GridParameters] = None,
    dX_bar=None,
) -> TrainingPlan:
    """Build a training plan with the default layout ``T_alpha = L = 2N``.

    Raises
    ------
    TooFewSlots
        ``T < t_min(N)`` or the layout leaves fewer M-phase slots than the
        dimension count ``dim(theta_-n) / N`` requires.
    """
    N = n_bus
    if T < t_min(N):
        raise TooFewSlots(f"T={T} below the minimum {t_min(N):.2f} for N={N}")
    if tau <= tau_transit:
        raise ValueError("slot duration must exceed the transient time")
    if not (0 <= sqrt_pi < delta_v):
        raise ValueError("need 0 <= sqrt_pi < delta_v")
    if x_rated + delta_v > v_max or x_rated - delta_v < v_min:
        raise ValueError("M-phase swing x +- delta_v must stay inside [v_min, v_max]")
    T_alpha = 2 * N if T_alpha is None else int(T_alpha)
    L = 2 * N if L is None else int(L)
    if T_alpha < 2 * N or L < 2 * N or T_alpha % 2 or L % 2:
        # the shipped C-phase code needs 2N rows; longer layouts pad with idle rows
        raise ValueError("T_alpha and L must be even and at least 2N")
    T_bar = m_phase_length(T, T_alpha, L)
    need = math.ceil((theta_dim(N) - 1) / N)
    if T_bar < need:
        raise TooFewSlots(
            f"T={T} gives {T_bar} M-phase slots; at least {need} needed for N={N}"
        )
    code = c_phase_code(N)
    dX_alpha = np.zeros((T_alpha, N))
    dX_alpha[: 2 * N] = code
    dX_beta = np.zeros((L, N))
    dX_beta[: 2 * N] = code
    if dX_bar is None:
        _, _, dX_bar, attempts = gen_mphase(
            (T_bar, N), seed, sqrt_pi, x_rated, delta_v, reference
        )
    else:
        dX_bar = np.asarray(dX_bar, dtype=float)
        if dX_bar.shape != (T_bar, N):
            raise ValueError(f"dX_bar must have shape {(T_bar, N)}")
        attempts = 0
    return TrainingPlan(
        n_bus=N, T=int(T), T_bar=T_bar, T_alpha=T_alpha, L=L, tau=float(tau),
        tau_transit=float(tau_transit), sqrt_pi=float(sqrt_pi),
        kappa_alpha=float(kappa_alpha), kappa_beta=float(kappa_beta),
        delta_v=float(delta_v), x_rated=float(x_rated), x_nom=float(x_nom),
        dv_nom=float(dv_nom), dX_bar=dX_bar, dX_alpha=dX_alpha, dX_beta=dX_beta,
        sigma_s=float(sigma_s), phi_s=float(phi_s), v_min=float(v_min),
        v_max=float(v_max), seed=seed, attempts=attempts,
    )


def nominal_voltages(theta: ThetaLike, plan: TrainingPlan) -> np.ndarray:
    """Steady state at the unperturbed droop setting (the offsets ``chi``)."""
    X, S = plan.nominal_inputs(1)
    params = as_params(theta, plan.n_bus)
    return solve_steady_state(X, S, params, x_rated=plan.x_rated).V[0]


@dataclass
class MeasurementSet:
    """True and noisy voltages over one epoch plus the inputs that produced them."""

    V: np.ndarray
    W: np.ndarray
    X: np.ndarray
    S: np.ndarray
    sigma: float
    plan: TrainingPlan
    margin_violation: bool = False

    def _rows(self, M, key):
        return M[self.plan.slices()[key]]

    @property
    def W_bar(self):
        return self._rows(self.W, "m")

    @property
    def V_bar(self):
        return self._rows(self.V, "m")

    @property
    def W_alpha(self):
        return self._rows(self.W, "alpha")

    @property
    def V_alpha(self):
        return self._rows(self.V, "alpha")

    @property
    def W_beta(self):
        """``(T_bar, L, N)`` block view."""
        p = self.plan
        return self._rows(self.W, "beta").reshape(p.T_bar, p.L, p.n_bus)

    @property
    def V_beta(self):
        p = self.plan
        return self._rows(self.V, "beta").reshape(p.T_bar, p.L, p.n_bus)


def simulate_epoch(theta: ThetaLike, plan: TrainingPlan, rng=None, sigma=None) -> MeasurementSet:
    """Run one training epoch on the nonlinear model and add measurement noise.

    The beta-phase amplitudes are modulated with each controller's noisy
    own M-phase measurements.  ``rng`` is a ``numpy.random.Generator`` or a
    seed; the whole ``(T, N)`` noise matrix is drawn first, row-major.
    """
    params = as_params(theta, plan.n_bus)
    if plan.chi is None:
        plan = plan.with_offsets(nominal_voltages(params, plan))
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if sigma is None:
        sigma = plan.sigma
    T, N = plan.T, plan.n_bus
    Z = sigma * rng.standard_normal((T, N)) if sigma > 0 else np.zeros((T, N))
    sl = plan.slices()
    V = np.empty((T, N))
    m_state = solve_steady_state(
        plan.X_bar, plan.S_bar, params, x_rated=plan.x_rated,
        v_min=plan.v_min, v_max=plan.v_max,
    )
    V[sl["m"]] = m_state.V
    W_bar = m_state.V + Z[sl["m"]]
    X, S = plan.full_inputs(W_bar)
    rest = slice(plan.T_bar, T)
    c_state = solve_steady_state(
        X[rest], S[rest], params, x_rated=plan.x_rated, v_init=plan.chi,
        v_min=plan.v_min, v_max=plan.v_max,
    )
    V[rest] = c_state.V
    return MeasurementSet(
        V=V, W=V + Z, X=X, S=S, sigma=float(sigma), plan=plan,
        margin_violation=m_state.margin_violation or c_state.margin_violation,
    )

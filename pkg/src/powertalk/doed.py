"""Decentralized economic dispatch driven by the training estimates.

Each controller fills the estimated aggregate demand with the cheapest
capacities (merit order), configures itself as a constant-power source at
capacity, as a droop-regulated member of the marginal group, or off, and a
backup source or storage steps in through DC-bus signaling when the local
decisions leave the grid unbalanced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from powertalk.errors import PowertalkError
from powertalk.grid_model import (
    CSC,
    VSC,
    GridParameters,
    Topology,
    droop_slope,
    uniform_params,
)
from powertalk.steady_state import der_powers, solve_steady_state
from powertalk.training import TrainingPlan, nominal_voltages, simulate_epoch

CAPACITY = "C"
MARGINAL = "V"
ZERO = "Z"

NO_BACKUP = "none"
SOURCE = "source"
STORAGE = "storage"


@dataclass(frozen=True)
class CostModel:
    """Linear generation costs and the backup/OED settings."""

    a: np.ndarray
    c_source: float = 12.0
    c_storage: float = 12.0
    xi: float = 6.25e-4
    tau_oed: float = 300.0
    q_frac: float = 1.0
    backup_capacity: Optional[float] = None

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        object.__setattr__(self, "a", a)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("a must be a non-empty vector")
        if np.any(np.diff(a) < 0):
            raise ValueError("marginal costs must be non-decreasing")
        if not (self.c_source > a.max() and self.c_storage > a.max()):
            raise ValueError("backup costs must exceed every marginal cost")
        if not (0 < self.xi < 1):
            raise ValueError("xi must lie in (0, 1)")
        if not (0 < self.q_frac <= 1):
            raise ValueError("q_frac must lie in (0, 1]")


@dataclass
class DispatchResult:
    p: np.ndarray
    group: np.ndarray  # CAPACITY / MARGINAL / ZERO per unit
    deficit: float

    @property
    def capacity_set(self):
        return np.flatnonzero(self.group == CAPACITY)

    @property
    def marginal_set(self):
        return np.flatnonzero(self.group == MARGINAL)

    @property
    def zero_set(self):
        return np.flatnonzero(self.group == ZERO)


def dispatch(a, g, d_star) -> DispatchResult:
    """Merit-order optimum of ``min a^T p  s.t.  1^T p = d, 0 <= p <= g``.

    Unit ``n`` runs at capacity when ``d`` exceeds the capacity of all units
    no more expensive than it, is off when ``d`` is below the capacity of the
    strictly cheaper units, and otherwise shares the remainder with its
    equal-cost group in proportion to capacity.  Demand beyond ``sum(g)`` is
    reported as ``deficit``.
    """
    a = np.asarray(a, dtype=float)
    g = np.asarray(g, dtype=float)
    if np.any(g < 0) or d_star < 0:
        raise ValueError("capacities and demand must be non-negative")
    # correctly rounded sums: the result does not depend on unit order
    cum_le = np.array([math.fsum(g[a <= an]) for an in a])
    cum_lt = np.array([math.fsum(g[a < an]) for an in a])
    grp = np.array([math.fsum(g[a == an]) for an in a])
    p = np.zeros_like(g)
    group = np.empty(g.size, dtype="<U1")
    for n in range(g.size):
        if d_star > cum_le[n]:
            p[n] = g[n]
            group[n] = CAPACITY
        elif d_star < cum_lt[n]:
            group[n] = ZERO
        else:
            p[n] = g[n] * (d_star - cum_lt[n]) / grp[n] if grp[n] > 0 else 0.0
            group[n] = MARGINAL
    return DispatchResult(p, group, float(max(0.0, d_star - g.sum())))


@dataclass
class UnitConfig:
    """Primary-control configuration of every DER for the operation epoch."""

    modes: np.ndarray
    x_ref: np.ndarray
    delta_v: np.ndarray
    p_ref: np.ndarray
    group: np.ndarray

    def slopes(self) -> np.ndarray:
        s = np.zeros(self.modes.size)
        v = self.modes == VSC
        s[v] = droop_slope(self.x_ref[v], self.delta_v[v])
        return s


def assign_modes(group, g_own, x_rated=400.0, xi=6.25e-4) -> UnitConfig:
    """Configuration from each unit's own dispatch class.

    Capacity units are constant-power at ``g``; the marginal group regulates
    with ``x = (1 + xi) x_rated`` and ``dv = 2 xi x_rated``; zero units are off
    (constant power 0).
    """
    group = np.asarray(group)
    g_own = np.asarray(g_own, dtype=float)
    N = group.size
    modes = np.where(group == MARGINAL, VSC, CSC)
    x_ref = np.where(group == MARGINAL, (1 + xi) * x_rated, x_rated)
    dv = np.where(group == MARGINAL, 2 * xi * x_rated, 0.0)
    p_ref = np.where(group == CAPACITY, g_own, 0.0)
    return UnitConfig(modes.astype(float), x_ref.astype(float), dv.astype(float),
                      p_ref.astype(float), group.copy() if N else group)


@dataclass(frozen=True)
class BackupState:
    kind: str
    x_ref: float = float("nan")
    delta_v: float = float("nan")


def backup_signaling(v, xi=6.25e-4, x_rated=400.0, v_min=385.0, v_max=415.0) -> BackupState:
    """Backup activation from the bus voltage (mean over buses when ``v`` is a vector)."""
    v = float(np.mean(v))
    lo, hi = (1 - xi) * x_rated, (1 + xi) * x_rated
    if v < lo:
        return BackupState(SOURCE, hi, lo - v_min)
    if v > hi:
        return BackupState(STORAGE, v_max, v_max - hi)
    return BackupState(NO_BACKUP)


@dataclass
class RealizedOperation:
    """Power-level outcome of a configuration against the true capacities and demand."""

    p: np.ndarray
    backup: str
    backup_power: float
    cost: float


def realized_operation(config: UnitConfig, g_true, d_star, cost: CostModel) -> RealizedOperation:
    """Powers and cost when the configured units meet the true demand.

    Constant-power units deliver their reference.  A surplus goes to the
    storage.  Otherwise the regulating units share the residual in proportion
    to capacity up to their capacity, and the source covers what is left.
    """
    g_true = np.asarray(g_true, dtype=float)
    a = cost.a
    p = np.where(config.modes == CSC, config.p_ref, 0.0)
    residual = d_star - p.sum()
    vsc = config.modes == VSC
    if residual < 0:
        extra = -residual
        return RealizedOperation(p, STORAGE, -extra, float(a @ p + cost.c_storage * extra))
    cap = g_true[vsc].sum()
    share = min(residual, cap)
    if cap > 0:
        p[vsc] = g_true[vsc] * share / cap
    extra = residual - share
    if extra > 0:
        return RealizedOperation(p, SOURCE, extra, float(a @ p + cost.c_source * extra))
    return RealizedOperation(p, NO_BACKUP, 0.0, float(a @ p))


def optimal_cost(g_true, d_star, cost: CostModel) -> float:
    """``c* = a^T p* + c_extra`` with perfect knowledge."""
    res = dispatch(cost.a, g_true, d_star)
    return float(cost.a @ res.p + cost.c_source * res.deficit)


BACKUP_TIE_CONDUCTANCE = 1e3


def _with_backup_bus(params: GridParameters, host: int, capacity: float, x_rated: float):
    # extra bus tied to the host bus through a stiff line, no load of its own
    from powertalk.grid_model import pair_index

    N = params.n_bus
    old = {(a, b): v for (a, b), v in zip(map(tuple, pair_index(N)), params.full_psi())}
    psi = np.array([
        old.get((a, b), BACKUP_TIE_CONDUCTANCE if (a, b) == (host, N) else 0.0)
        for a, b in map(tuple, pair_index(N + 1))
    ])
    ext = lambda v, fill: np.append(np.asarray(v, dtype=float), fill)  # noqa: E731
    return GridParameters(ext(params.g, capacity), ext(params.d_ca, 0.0), ext(params.d_cc, 0.0),
                          ext(params.d_cp, 0.0), psi)


def operating_state(params: GridParameters, config: UnitConfig, cost: CostModel,
                    x_rated=400.0, v_min=385.0, v_max=415.0, backup_bus: int = 0):
    """Physical steady state of a configuration, with DC-bus signaling.

    The backup is a droop-controlled unit on an extra bus tied to
    ``backup_bus``, with capacity ``cost.backup_capacity`` (default ``N``
    times the largest ``g``).  Signaling uses the mean bus voltage.
    Returns ``(V, BackupState)`` with ``V`` over the original buses, or
    ``None`` when no steady state exists.
    """
    N = params.n_bus
    S = config.slopes()

    def _solve(pp, X, S, modes, p_ref):
        try:
            return solve_steady_state(X[None], S[None], pp, modes, p_ref, x_rated=x_rated).V[0]
        except PowertalkError:
            return None

    V = None
    if np.any(config.modes == VSC):
        V = _solve(params, config.x_ref, S, config.modes, config.p_ref)
    if V is not None:
        state = backup_signaling(V, cost.xi, x_rated, v_min, v_max)
    else:
        # nothing regulates the bus: it drifts to the margin the power balance points at
        v_drift = v_max if config.p_ref.sum() > params.d_star else v_min
        state = backup_signaling(v_drift, cost.xi, x_rated, v_min, v_max)
    if state.kind == NO_BACKUP:
        return V, state
    cap = cost.backup_capacity if cost.backup_capacity is not None else N * max(params.g.max(), 1.0)
    ext = _with_backup_bus(params, backup_bus, cap, x_rated)
    Vb = _solve(
        ext,
        np.append(config.x_ref, state.x_ref),
        np.append(S, droop_slope(state.x_ref, state.delta_v)),
        np.append(config.modes, VSC),
        np.append(config.p_ref, 0.0),
    )
    return (None if Vb is None else Vb[:N]), state


def training_powers(meas, g) -> np.ndarray:
    """``P`` (``T x N``): converter output powers over the training epoch."""
    return der_powers(meas.V, meas.X, meas.S, g)


def nominal_powers(params: GridParameters, plan: TrainingPlan) -> np.ndarray:
    v = nominal_voltages(params, plan)
    X, S = plan.nominal_inputs(1)
    return der_powers(v[None], X, S, params.g)[0]


def rci(P, a, tau, tau_oed, c_hat, c_star) -> float:
    """Relative cost increase of the training-plus-operation epoch over ``c*``."""
    if c_star == 0:
        raise ValueError("optimal cost is zero")
    P = np.atleast_2d(np.asarray(P, dtype=float))
    T = P.shape[0]
    if T * tau > tau_oed:
        raise ValueError("training epoch longer than the OED epoch")
    train = tau / tau_oed * float(np.sum(P @ np.asarray(a, dtype=float))) / c_star
    return train + (tau_oed - T * tau) / tau_oed * c_hat / c_star - 1.0


def q_max(tau, tau_oed, c_star) -> float:
    return tau / (tau_oed * c_star)


def qrci(mu, P, p_nom, q, q_limit=None) -> float:
    """``mu + q * sum((P - p_nom)^2)``."""
    if q <= 0 or (q_limit is not None and q > q_limit * (1 + 1e-12)):
        raise ValueError("q outside (0, q_max]")
    dP = np.asarray(P, dtype=float) - np.asarray(p_nom, dtype=float)[None, :]
    return float(mu + q * np.sum(dP * dP))


def sample_theta(rng: np.random.Generator, topology: Topology, g_max=1000.0, d_ca_max=200.0,
                 d_cc_max=200.0, d_cp_max=0.0, y=1.0) -> GridParameters:
    """Capacities and loads uniform on their boxes; line conductances fixed."""
    N = topology.bus_count
    g = rng.uniform(0.0, g_max, N)
    d_ca = rng.uniform(0.0, d_ca_max, N)
    d_cc = rng.uniform(0.0, d_cc_max, N)
    d_cp = rng.uniform(0.0, d_cp_max, N) if d_cp_max > 0 else np.zeros(N)
    return uniform_params(topology, g, d_ca, d_cc, d_cp, y)


@dataclass
class OEDOutcome:
    """One OED epoch: training, decentralized dispatch and cost accounting."""

    mu: float
    eta: float
    c_star: float
    c_hat: float
    p_star: np.ndarray
    p_hat: np.ndarray
    group_true: np.ndarray
    group_hat: np.ndarray
    backup: str
    d_star_hat: np.ndarray
    failures: int = 0
    iterations: list = field(default_factory=list)
    V_operation: Optional[np.ndarray] = None
    backup_signal: Optional[BackupState] = None


def controller_view(theta_hat, n_bus):
    """``(g_hat, d_star_hat)`` from a full estimated parameter vector."""
    th = np.asarray(theta_hat, dtype=float)
    g_hat = np.clip(th[:n_bus], 0.0, None)
    d_star_hat = max(0.0, float(np.sum(th[n_bus : 4 * n_bus])))
    return g_hat, d_star_hat


def decide(thetas_hat, g_true, cost: CostModel):
    """Each controller's own dispatch class from its own estimate."""
    N = len(thetas_hat)
    group = np.empty(N, dtype="<U1")
    p_hat = np.zeros(N)
    d_hat = np.zeros(N)
    for n, th in enumerate(thetas_hat):
        g_hat, d_star_hat = controller_view(th, N)
        g_hat[n] = g_true[n]
        res = dispatch(cost.a, g_hat, d_star_hat)
        group[n] = res.group[n]
        p_hat[n] = res.p[n]
        d_hat[n] = d_star_hat
    return group, p_hat, d_hat


def run_oed_epoch(theta_true, plan: TrainingPlan, cost: CostModel, rng=None,
                  thetas_hat=None, cross_block: bool = True, solve_network: bool = False,
                  max_iter: int = 100, patience: Optional[int] = 15) -> OEDOutcome:
    """Training epoch, per-controller estimation and dispatch, and the realized costs.

    ``thetas_hat`` (one full parameter vector per controller) bypasses the
    estimation, e.g. for forced-error tests.
    """
    from powertalk.jsise import estimate_all, insert_own

    params = theta_true if isinstance(theta_true, GridParameters) else None
    if params is None:
        from powertalk.grid_model import unpack_theta

        params = unpack_theta(theta_true, plan.n_bus)
    N = params.n_bus
    if cost.a.size != N:
        raise ValueError("cost vector length differs from the bus count")
    if plan.T * plan.tau >= cost.tau_oed:
        raise ValueError("training epoch must be shorter than the OED epoch")
    if plan.chi is None:
        plan = plan.with_offsets(nominal_voltages(params, plan))
    meas = simulate_epoch(params, plan, rng)
    failures = 0
    iters = []
    if thetas_hat is None:
        thetas_hat = []
        results = estimate_all(meas, params.g, cross_block=cross_block, strict=False,
                               raise_on_max=False, max_iter=max_iter,
                               patience=patience)
        for r in results:
            ok = r.converged and np.all(np.isfinite(r.theta))
            failures += int(not ok)
            if ok:
                th = r.theta
            # a stalled iteration can wander far off; the least-squares start is safer
            elif np.all(np.isfinite(r.theta_init)):
                th = insert_own(r.theta_init, params.g[r.n], r.n)
            else:
                # no usable estimate: the controller sees no demand and stays off
                th = insert_own(np.zeros(r.theta_init.size), params.g[r.n], r.n)
            thetas_hat.append(th)
            iters.append(r.iterations)
    g = np.asarray(params.g, dtype=float)
    d_star = params.d_star
    true = dispatch(cost.a, g, d_star)
    c_star = optimal_cost(g, d_star, cost)
    group_hat, p_hat, d_hat = decide(thetas_hat, g, cost)
    config = assign_modes(group_hat, g, plan.x_rated, cost.xi)
    real = realized_operation(config, g, d_star, cost)
    P = training_powers(meas, g)
    mu = rci(P, cost.a, plan.tau, cost.tau_oed, real.cost, c_star)
    p_nom = nominal_powers(params, plan)
    qm = q_max(plan.tau, cost.tau_oed, c_star)
    eta = qrci(mu, P, p_nom, cost.q_frac * qm, qm)
    V_op, signal = (None, None)
    if solve_network:
        V_op, signal = operating_state(params, config, cost, plan.x_rated, plan.v_min, plan.v_max)
    return OEDOutcome(
        mu=mu, eta=eta, c_star=c_star, c_hat=real.cost, p_star=true.p, p_hat=real.p,
        group_true=true.group, group_hat=group_hat, backup=real.backup, d_star_hat=d_hat,
        failures=failures, iterations=iters, V_operation=V_op, backup_signal=signal,
    )


__all__ = [
    "BackupState",
    "CostModel",
    "DispatchResult",
    "OEDOutcome",
    "UnitConfig",
    "assign_modes",
    "backup_signaling",
    "decide",
    "dispatch",
    "nominal_powers",
    "operating_state",
    "optimal_cost",
    "q_max",
    "qrci",
    "rci",
    "realized_operation",
    "run_oed_epoch",
    "sample_theta",
    "training_powers",
]

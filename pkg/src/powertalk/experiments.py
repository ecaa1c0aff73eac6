"""Experiment drivers behind the command line.

Every driver returns a :class:`ResultTable`.  Monte Carlo sweeps split the
work into ``(grid point, trial)`` tasks whose random streams depend only on
the master seed and the task key, so the output does not depend on the
number of worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import multiprocessing as mp
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from powertalk import __version__
from powertalk.rng import SCHEME, derived_int, substream
from powertalk.scenario import Scenario

FLOAT_FMT = "{:.12g}"


@dataclass
class ResultTable:
    """Named columns with a units row and a provenance footer."""

    columns: list
    units: list
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.columns) != len(self.units):
            raise ValueError("one unit per column required")

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(list(values))

    def column(self, name) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows])

    @staticmethod
    def _fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return FLOAT_FMT.format(float(v))
        return str(v)

    def body(self) -> str:
        """Header, units row and data rows (no footer)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerow(self.units)
        for r in self.rows:
            w.writerow([self._fmt(v) for v in r])
        return buf.getvalue()

    def footer(self) -> str:
        return "".join(f"# {k}: {v}\n" for k, v in sorted(self.provenance.items()))

    def to_csv(self) -> str:
        return self.body() + self.footer()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


def read_body(path) -> str:
    """The CSV text of a written table without its provenance footer."""
    return "".join(l for l in Path(path).read_text().splitlines(True) if not l.startswith("#"))


def provenance(scn: Scenario, seed: int, command: str, **extra) -> dict:
    out = {
        "command": command,
        "scenario_hash": scn.digest(),
        "seed": seed,
        "code_version": __version__,
        "rng_scheme": SCHEME,
    }
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# parallel map


def ordered_map(func: Callable, tasks: Sequence, parallel: int = 1, chunksize: int = 1) -> list:
    """``[func(t) for t in tasks]``, optionally over a process pool (order kept)."""
    tasks = list(tasks)
    if parallel is None or parallel <= 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
    with ctx.Pool(min(parallel, len(tasks))) as pool:
        return pool.map(func, tasks, chunksize=chunksize)


def _chunks(n: int, size: int):
    return [(s, min(n, s + size)) for s in range(0, n, size)]


# ---------------------------------------------------------------------------
# single runs


def run_solve(scn: Scenario) -> ResultTable:
    """Steady state of the scenario grid with every DER at nominal droop."""
    from powertalk.grid_model import droop_slope
    from powertalk.steady_state import der_powers, load_powers, solve_steady_state

    N = scn.n_bus
    params = scn.params()
    t, e = scn.training, scn.envelope
    X = np.full((1, N), t.x_nom)
    S = np.full((1, N), droop_slope(t.x_nom, t.dv_nom))
    st = solve_steady_state(X, S, params, x_rated=e.x_rated, v_min=e.v_min, v_max=e.v_max)
    V = st.V
    p_der = der_powers(V, X, S, params.g)[0]
    p_load = load_powers(V, params, x_rated=e.x_rated)[0]
    tab = ResultTable(["bus", "v", "p_der", "p_load"], ["-", "V", "W", "W"],
                      provenance=provenance(scn, scn.seed, "solve"))
    for n in range(N):
        tab.add(n, V[0, n], p_der[n], p_load[n])
    return tab


def run_train(scn: Scenario, seed: int) -> ResultTable:
    """One simulated training epoch: true and measured voltages per slot."""
    from powertalk.training import nominal_voltages, simulate_epoch

    params = scn.params()
    plan = scn.make_plan(seed=derived_int(seed, "plan", 0))
    plan = plan.with_offsets(nominal_voltages(params, plan))
    meas = simulate_epoch(params, plan, substream(seed, "noise", 0))
    N = scn.n_bus
    phase = np.empty(plan.T, dtype=object)
    for name, sl in plan.slices().items():
        phase[sl] = name
    cols = ["slot", "phase"] + [f"v{n}" for n in range(N)] + [f"w{n}" for n in range(N)]
    tab = ResultTable(cols, ["-", "-"] + ["V"] * (2 * N),
                      provenance=provenance(scn, seed, "train", sigma=meas.sigma))
    for t in range(plan.T):
        tab.add(t, phase[t], *meas.V[t], *meas.W[t])
    return tab


def _estimate_errors(res, theta_true, N):
    from powertalk.crlb import theta_minus_blocks
    from powertalk.jsise import drop_own

    idx = theta_minus_blocks(N, res.n)
    tm = drop_own(theta_true, res.n)
    err = res.theta_minus - tm
    out = {}
    for key in ("g", "d", "psi"):
        ix = idx[key]
        out[key] = (float(err[ix] @ err[ix]), float(tm[ix] @ tm[ix]))
    dix = idx["d"]
    ed = err[dix].reshape(3, N).sum(axis=0)
    td = tm[dix].reshape(3, N).sum(axis=0)
    out["d_star"] = (float(ed @ ed), float(td @ td))
    return out


def run_estimate(scn: Scenario, seed: int) -> ResultTable:
    """J-SISE for every controller on one simulated epoch."""
    from powertalk.grid_model import pack_theta
    from powertalk.jsise import estimate_all
    from powertalk.training import nominal_voltages, simulate_epoch

    params = scn.params()
    tv = pack_theta(params)
    plan = scn.make_plan(seed=derived_int(seed, "plan", 0))
    plan = plan.with_offsets(nominal_voltages(params, plan))
    meas = simulate_epoch(params, plan, substream(seed, "noise", 0))
    results = estimate_all(meas, params.g)
    tab = ResultTable(
        ["controller", "iterations", "converged", "rel_err_g", "rel_err_d", "rel_err_psi",
         "rel_err_d_star", "d_star_hat"],
        ["-", "-", "-", "-", "-", "-", "-", "W"],
        provenance=provenance(scn, seed, "estimate"),
    )
    for r in results:
        e = _estimate_errors(r, tv, scn.n_bus)
        rel = {k: np.sqrt(a / b) if b > 0 else np.nan for k, (a, b) in e.items()}
        d_hat = float(np.sum(r.theta[scn.n_bus: 4 * scn.n_bus]))
        tab.add(r.n, r.iterations, r.converged, rel["g"], rel["d"], rel["psi"], rel["d_star"], d_hat)
    return tab


def run_crlb(scn: Scenario) -> ResultTable:
    """Bound RRMSE per controller at the scenario parameters."""
    from powertalk.crlb import bound_at_truth

    params = scn.params()
    plan = _point_plan(scn, scn.seed, scn.training.sqrt_pi, scn.training.tau, params)
    tab = ResultTable(["controller", "crlb_g", "crlb_d", "crlb_psi", "crlb_d_star", "cond"],
                      ["-"] * 6, provenance=provenance(scn, scn.seed, "crlb"))
    for n in range(scn.n_bus):
        b = bound_at_truth(params, plan, n)
        r = b.rrmse
        tab.add(n, r["g"], r["d"], r["psi"], r["d_star"], b.cond)
    return tab


def run_doed(scn: Scenario, seed: int) -> ResultTable:
    """One OED epoch at the scenario parameters: dispatch per unit and the cost report."""
    from powertalk.doed import run_oed_epoch

    params = scn.params()
    plan = _point_plan(scn, seed, scn.training.sqrt_pi, scn.training.tau, params)
    out = run_oed_epoch(params, plan, scn.cost_model(), substream(seed, "noise", 0))
    prov = provenance(scn, seed, "doed", mu=FLOAT_FMT.format(out.mu), eta=FLOAT_FMT.format(out.eta),
                      backup=out.backup, c_star=FLOAT_FMT.format(out.c_star),
                      c_hat=FLOAT_FMT.format(out.c_hat), failures=out.failures)
    tab = ResultTable(["unit", "a", "g", "group_true", "group_hat", "p_star", "p_hat", "d_star_hat",
                       "mu", "eta"],
                      ["-", "1/W", "W", "-", "-", "W", "W", "W", "-", "-"], provenance=prov)
    a = scn.costs()
    for n in range(scn.n_bus):
        tab.add(n, a[n], params.g[n], out.group_true[n], out.group_hat[n], out.p_star[n],
                out.p_hat[n], out.d_star_hat[n], out.mu, out.eta)
    return tab


# ---------------------------------------------------------------------------
# sweeps


@lru_cache(maxsize=64)
def _cached_plan(scn_json: str, seed: int, sqrt_pi: float, tau: float):
    from powertalk.scenario import from_dict

    scn = from_dict(json.loads(scn_json))
    return scn.make_plan(seed=seed, sqrt_pi=sqrt_pi, tau=tau)


def _point_plan(scn: Scenario, seed: int, sqrt_pi: float, tau: float, params=None):
    """Plan for one grid point; its excitation depends only on (seed, sqrt_pi)."""
    from powertalk.training import nominal_voltages

    k = derived_int(seed, "plan", int(round(sqrt_pi * 1e6)))
    plan = _cached_plan(scn.canonical_json(), k, float(sqrt_pi), float(tau))
    if params is not None:
        plan = plan.with_offsets(nominal_voltages(params, plan))
    return plan


def _rrmse_task(args):
    from powertalk.grid_model import pack_theta
    from powertalk.jsise import estimate_all
    from powertalk.training import simulate_epoch

    scn_json, seed, ip, sqrt_pi, lo, hi = args
    from powertalk.scenario import from_dict

    scn = from_dict(json.loads(scn_json))
    params = scn.params()
    tv = pack_theta(params)
    plan = _point_plan(scn, seed, sqrt_pi, scn.training.tau, params)
    n = scn.controller
    rows = []
    for k in range(lo, hi):
        meas = simulate_epoch(params, plan, substream(seed, "noise", ip, k))
        res = estimate_all(meas, params.g, controllers=[n], strict=False, raise_on_max=False)[0]
        e = _estimate_errors(res, tv, scn.n_bus)
        rows.append([e[key][0] for key in ("g", "d", "psi", "d_star")] + [int(not res.converged)])
    return rows


def _rrmse_stats(sq, norm2):
    """RRMSE and its delta-method standard error from per-trial squared errors."""
    sq = np.asarray(sq, dtype=float)
    K = sq.size
    m = sq.mean()
    r = np.sqrt(m / norm2)
    se_m = sq.std(ddof=1) / np.sqrt(K) if K > 1 else np.nan
    se = se_m / (2.0 * np.sqrt(m * norm2)) if m > 0 else 0.0
    return r, se


def sweep_rrmse(scn: Scenario, trials: int, seed: int, parallel: int = 1,
                chunk: int = 25) -> ResultTable:
    """Empirical J-SISE RRMSE of one controller next to its bound, versus ``sqrt_pi``."""
    from powertalk.crlb import bound_at_truth
    from powertalk.grid_model import pack_theta
    from powertalk.jsise import drop_own

    params = scn.params()
    tv = pack_theta(params)
    n = scn.controller
    N = scn.n_bus
    tm = drop_own(tv, n)
    norms = {
        "g": float(tm[: N - 1] @ tm[: N - 1]),
        "d": float(tm[N - 1: 4 * N - 1] @ tm[N - 1: 4 * N - 1]),
        "psi": float(tm[4 * N - 1:] @ tm[4 * N - 1:]),
    }
    ds = tm[N - 1: 4 * N - 1].reshape(3, N).sum(axis=0)
    norms["d_star"] = float(ds @ ds)
    sj = scn.canonical_json()
    grid = list(scn.sweep.sqrt_pi)
    tasks = [(sj, seed, ip, float(sp), lo, hi)
             for ip, sp in enumerate(grid) for lo, hi in _chunks(trials, chunk)]
    results = ordered_map(_rrmse_task, tasks, parallel)
    cols = ["sqrt_pi", "tau", "trials"]
    units = ["V", "s", "-"]
    for key in ("g", "d", "psi", "d_star"):
        cols += [f"rrmse_{key}", f"se_{key}", f"crlb_{key}"]
        units += ["-", "-", "-"]
    cols.append("failures")
    units.append("-")
    tab = ResultTable(cols, units, provenance=provenance(scn, seed, "sweep-rrmse", trials=trials,
                                                         controller=n))
    per_point = {}
    for t, rows in zip(tasks, results):
        per_point.setdefault(t[2], []).extend(rows)
    for ip, sp in enumerate(grid):
        arr = np.asarray(per_point[ip], dtype=float)
        bound = bound_at_truth(params, _point_plan(scn, seed, sp, scn.training.tau, params), n).rrmse
        row = [sp, scn.training.tau, arr.shape[0]]
        for j, key in enumerate(("g", "d", "psi", "d_star")):
            r, se = _rrmse_stats(arr[:, j], norms[key])
            row += [r, se, bound[key]]
        row.append(int(arr[:, 4].sum()))
        tab.add(*row)
    return tab


def _rci_task(args):
    from powertalk.doed import run_oed_epoch, sample_theta
    from powertalk.scenario import from_dict

    scn_json, seed, ip, it, sqrt_pi, tau, lo, hi = args
    scn = from_dict(json.loads(scn_json))
    plan = _point_plan(scn, seed, sqrt_pi, tau)
    cost = scn.cost_model()
    topo = scn.topology()
    sm = scn.sampling
    y = scn.grid.y
    rows = []
    for k in range(lo, hi):
        # the same parameter draw at every grid point (common random numbers)
        theta = sample_theta(substream(seed, "theta", k), topo, sm.g_max, sm.d_ca_max,
                             sm.d_cc_max, sm.d_cp_max, y)
        out = run_oed_epoch(theta, plan, cost, substream(seed, "noise", ip, it, k))
        rows.append((out.mu, out.eta, out.failures))
    return rows


def sweep_rci(scn: Scenario, trials: int, seed: int, parallel: int = 1,
              chunk: int = 50) -> ResultTable:
    """Average RCI and QRCI over random parameter draws on the ``(tau, sqrt_pi)`` grid."""
    sj = scn.canonical_json()
    sps = [float(v) for v in scn.sweep.sqrt_pi]
    taus = [float(v) for v in scn.sweep.tau]
    tasks = [(sj, seed, ip, it, sp, tau, lo, hi)
             for it, tau in enumerate(taus) for ip, sp in enumerate(sps)
             for lo, hi in _chunks(trials, chunk)]
    results = ordered_map(_rci_task, tasks, parallel)
    per_point = {}
    for t, rows in zip(tasks, results):
        per_point.setdefault((t[3], t[2]), []).extend(rows)
    tab = ResultTable(["tau", "sqrt_pi", "mu", "eta", "se_mu", "se_eta", "trials", "failures"],
                      ["s", "V", "-", "-", "-", "-", "-", "-"],
                      provenance=provenance(scn, seed, "sweep-rci", trials=trials))
    for it, tau in enumerate(taus):
        for ip, sp in enumerate(sps):
            arr = np.asarray(per_point[(it, ip)], dtype=float)
            K = arr.shape[0]
            se = arr[:, :2].std(axis=0, ddof=1) / np.sqrt(K) if K > 1 else [np.nan, np.nan]
            tab.add(tau, sp, arr[:, 0].mean(), arr[:, 1].mean(), se[0], se[1], K,
                    int(arr[:, 2].sum()))
    return tab


def argmin_row(tab: ResultTable, column: str) -> dict:
    vals = tab.column(column).astype(float)
    j = int(np.nanargmin(vals))
    return dict(zip(tab.columns, tab.rows[j]))


__all__ = [
    "ResultTable",
    "argmin_row",
    "ordered_map",
    "provenance",
    "read_body",
    "run_crlb",
    "run_doed",
    "run_estimate",
    "run_solve",
    "run_train",
    "sweep_rci",
    "sweep_rrmse",
]

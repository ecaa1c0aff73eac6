"""Scenario configuration: YAML files with every unspecified field at its reference value.

A scenario file is a mapping with the optional sections ``grid``,
``envelope``, ``training``, ``cost``, ``sampling`` and ``sweep`` plus a few
top-level keys.  Only ``n_bus`` is mandatory.  Unknown keys anywhere are
rejected so that a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import yaml

from powertalk.grid_model import GridParameters, Topology, uniform_params


class ConfigError(ValueError):
    """Malformed or inconsistent scenario configuration."""


@dataclass
class GridSection:
    topology: str = "cut_ring"  # line | cut_ring | ring | complete | edges
    edges: Optional[list] = None
    g: Union[float, list] = 1000.0
    d_ca: Union[float, list] = 200.0
    d_cc: Union[float, list] = 200.0
    d_cp: Union[float, list] = 0.0
    y: Union[float, list] = 1.0


@dataclass
class EnvelopeSection:
    x_rated: float = 400.0
    v_min: float = 385.0
    v_max: float = 415.0
    delta_v: float = 15.0


@dataclass
class TrainingSection:
    T: int = 600
    tau: float = 50e-3
    tau_transit: float = 2.5e-3
    sqrt_pi: float = 10.0
    T_alpha: Optional[int] = None
    L: Optional[int] = None
    kappa_alpha: float = 1.0
    kappa_beta: float = 1.0
    x_nom: float = 400.0
    dv_nom: float = 15.0
    sigma_s: float = 0.1
    phi_s: float = 50e3


@dataclass
class CostSection:
    a: Optional[list] = None  # default: 3, 3, 5, 5, 8, 11, ... cycled to N
    c_source: float = 12.0
    c_storage: float = 12.0
    xi: float = 6.25e-4
    tau_oed: float = 300.0
    q_frac: float = 1.0


@dataclass
class SamplingSection:
    g_max: float = 1000.0
    d_ca_max: float = 200.0
    d_cc_max: float = 200.0
    d_cp_max: float = 0.0


@dataclass
class SweepSection:
    sqrt_pi: list = field(default_factory=lambda: [2.0, 5.0, 8.0, 11.0, 14.0])
    tau: list = field(default_factory=lambda: [5e-3, 10e-3, 13e-3, 25e-3, 50e-3])


_SECTIONS = {
    "grid": GridSection,
    "envelope": EnvelopeSection,
    "training": TrainingSection,
    "cost": CostSection,
    "sampling": SamplingSection,
    "sweep": SweepSection,
}

_DEFAULT_COSTS = [3.0, 3.0, 5.0, 5.0, 8.0, 11.0]


@dataclass
class Scenario:
    n_bus: int
    grid: GridSection = field(default_factory=GridSection)
    envelope: EnvelopeSection = field(default_factory=EnvelopeSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    cost: CostSection = field(default_factory=CostSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    trials: int = 100
    seed: int = 0
    controller: int = 0
    output_dir: Optional[str] = None

    def __post_init__(self):
        validate(self)

    # ---- derived objects -------------------------------------------------
    def topology(self) -> Topology:
        kind = self.grid.topology
        N = self.n_bus
        if kind in ("line", "cut_ring"):
            return Topology.line(N)
        if kind == "ring":
            return Topology.ring(N)
        if kind == "complete":
            return Topology.complete(N)
        return Topology(N, tuple(tuple(e) for e in self.grid.edges))

    def params(self) -> GridParameters:
        gs = self.grid
        return uniform_params(self.topology(), gs.g, gs.d_ca, gs.d_cc, gs.d_cp, gs.y)

    def costs(self) -> np.ndarray:
        a = self.cost.a
        if a is None:
            a = [_DEFAULT_COSTS[i % len(_DEFAULT_COSTS)] for i in range(self.n_bus)]
            a = sorted(a)
        return np.asarray(a, dtype=float)

    def cost_model(self):
        from powertalk.doed import CostModel

        c = self.cost
        return CostModel(self.costs(), c.c_source, c.c_storage, c.xi, c.tau_oed, c.q_frac)

    def plan_kwargs(self) -> dict:
        t, e = self.training, self.envelope
        return dict(
            T=t.T, tau=t.tau, sqrt_pi=t.sqrt_pi, T_alpha=t.T_alpha, L=t.L,
            tau_transit=t.tau_transit, kappa_alpha=t.kappa_alpha, kappa_beta=t.kappa_beta,
            delta_v=e.delta_v, x_rated=e.x_rated, x_nom=t.x_nom, dv_nom=t.dv_nom,
            sigma_s=t.sigma_s, phi_s=t.phi_s, v_min=e.v_min, v_max=e.v_max,
        )

    def make_plan(self, seed: Optional[int] = None, **overrides):
        from powertalk.training import make_plan

        kw = self.plan_kwargs()
        kw.update(overrides)
        kw.setdefault("reference", self.params())
        return make_plan(self.n_bus, seed=self.seed if seed is None else seed, **kw)

    # ---- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        """Short hash of the scenario content (seed, trials and output dir excluded)."""
        d = self.to_dict()
        for k in ("seed", "trials", "output_dir"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)


def _build_section(name, cls, raw):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    return cls(**raw)


def from_dict(raw: Optional[dict], **overrides: Any) -> Scenario:
    """Scenario from a parsed mapping; ``overrides`` replace top-level keys."""
    raw = dict(raw or {})
    raw.update({k: v for k, v in overrides.items() if v is not None})
    top = {f.name for f in fields(Scenario)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "n_bus" not in raw:
        raise ConfigError("n_bus is required")
    kw = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kw[key] = _build_section(key, _SECTIONS[key], value)
        else:
            kw[key] = value
    try:
        return Scenario(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_scenario(path, **overrides: Any) -> Scenario:
    """Parse a YAML scenario file.

    Raises
    ------
    ConfigError
        Unreadable file, YAML syntax error, unknown key or invalid value.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML error in {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("scenario file must contain a mapping")
    return from_dict(raw, **overrides)


def _check_vector(name, value, n, allow_zero=True):
    arr = np.asarray(value, dtype=float)
    if arr.ndim > 1 or (arr.ndim == 1 and arr.size != n):
        raise ConfigError(f"{name} must be a scalar or a list of length {n}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be finite")
    if np.any(arr < 0) or (not allow_zero and np.any(arr == 0)):
        raise ConfigError(f"{name} must be {'non-negative' if allow_zero else 'positive'}")


def validate(s: Scenario) -> None:
    if not isinstance(s.n_bus, int) or isinstance(s.n_bus, bool) or s.n_bus < 1:
        raise ConfigError("n_bus must be a positive integer")
    N = s.n_bus
    g = s.grid
    if g.topology not in ("line", "cut_ring", "ring", "complete", "edges"):
        raise ConfigError(f"unknown topology kind {g.topology!r}")
    if g.topology == "edges":
        if not g.edges:
            raise ConfigError("topology 'edges' needs a non-empty edge list")
        try:
            topo = Topology(N, tuple(tuple(int(v) for v in e) for e in g.edges))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad edge list: {exc}") from exc
        n_edges = len(topo.edges)
    else:
        n_edges = len(Topology.line(N).edges) if g.topology in ("line", "cut_ring") else None
    for name in ("g", "d_ca", "d_cc", "d_cp"):
        _check_vector(name, getattr(g, name), N)
    y = np.asarray(g.y, dtype=float)
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise ConfigError("line conductances must be positive")
    if y.ndim == 1 and n_edges is not None and y.size != n_edges:
        raise ConfigError(f"y must be a scalar or a list of length {n_edges}")
    e = s.envelope
    if not (e.v_min < e.x_rated < e.v_max):
        raise ConfigError("envelope needs v_min < x_rated < v_max")
    if e.delta_v <= 0:
        raise ConfigError("delta_v must be positive")
    t = s.training
    if not isinstance(t.T, int) or t.T < 1:
        raise ConfigError("T must be a positive integer")
    if not (t.tau > t.tau_transit >= 0):
        raise ConfigError("need tau > tau_transit >= 0")
    if not (0 <= t.sqrt_pi < e.delta_v):
        raise ConfigError("need 0 <= sqrt_pi < delta_v")
    if t.sigma_s < 0 or t.phi_s <= 0:
        raise ConfigError("sigma_s must be >= 0 and phi_s > 0")
    c = s.cost
    if c.a is not None:
        _check_vector("a", c.a, N)
        if np.asarray(c.a, dtype=float).ndim != 1:
            raise ConfigError("a must be a list of length n_bus")
    try:
        s.cost_model()
    except ValueError as exc:
        raise ConfigError(f"cost: {exc}") from exc
    sm = s.sampling
    for name in ("g_max", "d_ca_max", "d_cc_max", "d_cp_max"):
        if getattr(sm, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    sw = s.sweep
    if not sw.sqrt_pi or not sw.tau:
        raise ConfigError("sweep grids must be non-empty")
    if any(not (0 <= v < e.delta_v) for v in sw.sqrt_pi):
        raise ConfigError("sweep sqrt_pi values must lie in [0, delta_v)")
    if any(v <= t.tau_transit for v in sw.tau):
        raise ConfigError("sweep tau values must exceed tau_transit")
    if not isinstance(s.trials, int) or s.trials < 1:
        raise ConfigError("trials must be a positive integer")
    if not isinstance(s.seed, int) or s.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not (0 <= s.controller < N):
        raise ConfigError("controller index out of range")


__all__ = ["ConfigError", "Scenario", "from_dict", "load_scenario", "validate"]

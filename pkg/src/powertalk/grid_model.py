"""Domain types for a multi-bus DC microgrid.

Bus indices are 0-based throughout. Line conductances are stored either per
edge of a :class:`Topology` or as the full vector over all bus pairs
``(n, m), n < m`` in row-major supra-diagonal order; the full ordering is the
one used inside the parameter vector ``theta = [g, d_ca, d_cc, d_cp, psi]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

VSC = 1
CSC = 0


def pair_list(n_bus: int) -> list[tuple[int, int]]:
    """All unordered bus pairs ``(n, m), n < m`` in row-major order."""
    return [(n, m) for n in range(n_bus) for m in range(n + 1, n_bus)]


def pair_index(n_bus: int) -> np.ndarray:
    """``(P, 2)`` integer array of :func:`pair_list`."""
    pairs = pair_list(n_bus)
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64)


def n_pairs(n_bus: int) -> int:
    return n_bus * (n_bus - 1) // 2


@lru_cache(maxsize=None)
def _upper_indices(n_bus: int):
    iu = np.triu_indices(n_bus, 1)
    for a in iu:
        a.setflags(write=False)
    return iu


def theta_dim(n_bus: int) -> int:
    """Dimension of the full parameter vector, ``N(N+7)/2``."""
    return n_bus * (n_bus + 7) // 2


@dataclass(frozen=True)
class Topology:
    """Undirected distribution network.

    Edges are normalised to ``(min, max)`` and kept in the order given.
    """

    bus_count: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.bus_count < 1:
            raise ValueError("bus_count must be positive")
        norm = []
        seen = set()
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"self-loop at bus {a}")
            if not (0 <= a < self.bus_count and 0 <= b < self.bus_count):
                raise ValueError(f"edge ({a}, {b}) out of range")
            e = (min(a, b), max(a, b))
            if e in seen:
                raise ValueError(f"duplicate edge {e}")
            seen.add(e)
            norm.append(e)
        object.__setattr__(self, "edges", tuple(norm))

    @classmethod
    def line(cls, n_bus: int) -> "Topology":
        """Cut-ring: bus ``n`` connected to ``n+1``."""
        return cls(n_bus, tuple((n, n + 1) for n in range(n_bus - 1)))

    @classmethod
    def ring(cls, n_bus: int) -> "Topology":
        edges = [(n, n + 1) for n in range(n_bus - 1)]
        if n_bus > 2:
            edges.append((0, n_bus - 1))
        return cls(n_bus, tuple(edges))

    @classmethod
    def complete(cls, n_bus: int) -> "Topology":
        return cls(n_bus, tuple(pair_list(n_bus)))

    @property
    def incidence(self) -> np.ndarray:
        """Oriented incidence matrix, ``+1`` at the lower and ``-1`` at the higher bus."""
        A = np.zeros((self.bus_count, len(self.edges)))
        for k, (a, b) in enumerate(self.edges):
            A[a, k] = 1.0
            A[b, k] = -1.0
        return A

    def full_psi(self, psi_edges) -> np.ndarray:
        """Scatter per-edge conductances into the full pair vector (zeros elsewhere)."""
        psi_edges = np.asarray(psi_edges, dtype=float)
        if psi_edges.shape != (len(self.edges),):
            raise ValueError(
                f"psi has length {psi_edges.size}, topology has {len(self.edges)} edges"
            )
        N = self.bus_count
        out = np.zeros(n_pairs(N))
        for k, (a, b) in enumerate(self.edges):
            out[_pair_pos(N, a, b)] = psi_edges[k]
        return out


def _pair_pos(n_bus: int, a: int, b: int) -> int:
    # position of (a, b), a < b, in row-major supra-diagonal order
    return a * n_bus - a * (a + 1) // 2 + (b - a - 1)


def build_conductance_matrix(topology: Topology, psi) -> np.ndarray:
    """Weighted Laplacian ``Y = A diag(psi) A^T``.

    Parameters
    ----------
    topology : Topology
    psi : array_like
        Conductance per edge of ``topology`` (S), non-negative.

    Returns
    -------
    numpy.ndarray
        ``(N, N)`` symmetric matrix with zero row sums.
    """
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (len(topology.edges),):
        raise ValueError(
            f"psi has length {psi.size}, topology has {len(topology.edges)} edges"
        )
    if np.any(psi < 0):
        raise ValueError("line conductances must be non-negative")
    N = topology.bus_count
    Y = np.zeros((N, N))
    # explicit stamping keeps Y exactly symmetric with exact zero row sums
    for k, (a, b) in enumerate(topology.edges):
        y = psi[k]
        Y[a, a] += y
        Y[b, b] += y
        Y[a, b] -= y
        Y[b, a] -= y
    return Y


def laplacian_from_full_psi(psi_full, n_bus: int) -> np.ndarray:
    """Laplacian from the full pair vector (entries may be negative, e.g. estimates)."""
    psi_full = np.asarray(psi_full, dtype=float)
    if psi_full.shape != (n_pairs(n_bus),):
        raise ValueError("psi length does not match N(N-1)/2")
    Y = np.zeros((n_bus, n_bus))
    if n_bus > 1:
        Y[_upper_indices(n_bus)] = -psi_full
        Y = Y + Y.T
        Y[np.diag_indices(n_bus)] = -Y.sum(axis=1)
    return Y


def droop_slope(x_ref, delta_v):
    """Droop slope ``s = 1 / ((x - dv) dv)`` in V^-2."""
    x_ref = np.asarray(x_ref, dtype=float)
    delta_v = np.asarray(delta_v, dtype=float)
    if np.any(delta_v <= 0) or np.any(delta_v >= x_ref):
        raise ValueError("need 0 < delta_v < x_ref")
    return 1.0 / ((x_ref - delta_v) * delta_v)


def droop_from_capacity(x_ref, delta_v, capacity):
    """Slope and virtual conductance for proportional power sharing.

    Returns
    -------
    (s, y_va)
        ``s = 1/((x - dv) dv)`` and ``y_va = s * g``.
    """
    s = droop_slope(x_ref, delta_v)
    g = np.asarray(capacity, dtype=float)
    if np.any(g < 0):
        raise ValueError("capacity must be non-negative")
    y = s * g
    if np.ndim(y) == 0:
        return float(s), float(y)
    return s, y


def cpl_small_signal(d_cp, v):
    """Current-source/conductance equivalent of a constant-power load.

    Returns ``(i_cp, y_cp)`` with ``i_cp = 2 d / v`` and ``y_cp = -d / v**2``,
    the first-order linearization of ``p = d`` about ``v``.  The residual never
    uses this; it keeps the exact constant-power term.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v == 0):
        raise ValueError("linearization point must be non-zero")
    d_cp = np.asarray(d_cp, dtype=float)
    return 2.0 * d_cp / v, -d_cp / v**2


@dataclass(frozen=True)
class RatedEnvelope:
    rated_voltage: float = 400.0
    v_min: float = 385.0
    v_max: float = 415.0
    max_drop: float = 15.0

    def __post_init__(self):
        if not (self.v_min < self.rated_voltage < self.v_max):
            raise ValueError("need v_min < rated_voltage < v_max")
        if not (0 < self.max_drop <= self.rated_voltage - self.v_min):
            raise ValueError("need 0 < max_drop <= rated_voltage - v_min")


@dataclass(frozen=True)
class DroopSetting:
    """Primary-control configuration of one converter."""

    reference_voltage: float = 400.0
    slope: float = 0.0
    capacity: float = 0.0
    mode: int = VSC
    power_reference: float = 0.0

    @property
    def virtual_conductance(self) -> float:
        return self.slope * self.capacity

    def validate(self, envelope: RatedEnvelope) -> None:
        if self.mode == VSC and not (
            envelope.v_min < self.reference_voltage <= envelope.v_max
        ):
            raise ValueError("VSC reference voltage outside (v_min, v_max]")
        if self.virtual_conductance < 0:
            raise ValueError("virtual conductance must be non-negative")


@dataclass(frozen=True)
class GridParameters:
    """Generation capacities, ZIP demands (W at rated voltage), line conductances (S).

    ``psi`` is either the full pair vector (``topology is None``) or one entry
    per edge of ``topology``.
    """

    g: np.ndarray
    d_ca: np.ndarray
    d_cc: np.ndarray
    d_cp: np.ndarray
    psi: np.ndarray
    topology: Optional[Topology] = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("g", "d_ca", "d_cc", "d_cp", "psi"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        N = self.g.size
        for name in ("d_ca", "d_cc", "d_cp"):
            if getattr(self, name).shape != (N,):
                raise ValueError(f"{name} must have length {N}")
        expected = n_pairs(N) if self.topology is None else len(self.topology.edges)
        if self.psi.shape != (expected,):
            raise ValueError(f"psi must have length {expected}")
        if self.topology is not None and self.topology.bus_count != N:
            raise ValueError("topology bus count does not match g")

    @property
    def n_bus(self) -> int:
        return self.g.size

    @property
    def d(self) -> np.ndarray:
        return np.concatenate([self.d_ca, self.d_cc, self.d_cp])

    @property
    def d_star(self) -> float:
        """Total demand at rated voltage."""
        return float(self.d_ca.sum() + self.d_cc.sum() + self.d_cp.sum())

    def full_psi(self) -> np.ndarray:
        if self.topology is None:
            return np.array(self.psi)
        return self.topology.full_psi(self.psi)

    def conductance_matrix(self) -> np.ndarray:
        if self.topology is None:
            return laplacian_from_full_psi(self.psi, self.n_bus)
        return build_conductance_matrix(self.topology, self.psi)

    def check_physical(self) -> None:
        for name in ("g", "d_ca", "d_cc", "d_cp", "psi"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"{name} has negative entries")

    def clamped(self) -> "GridParameters":
        """Copy with negative entries set to zero."""
        return GridParameters(
            *(np.maximum(getattr(self, k), 0.0) for k in ("g", "d_ca", "d_cc", "d_cp", "psi")),
            topology=self.topology,
        )


def pack_theta(params: GridParameters) -> np.ndarray:
    """Flatten to ``[g; d_ca; d_cc; d_cp; psi_full]``."""
    return np.concatenate(
        [params.g, params.d_ca, params.d_cc, params.d_cp, params.full_psi()]
    )


def unpack_theta(theta, n_bus: int) -> GridParameters:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (theta_dim(n_bus),):
        raise ValueError(
            f"theta has length {theta.size}, expected {theta_dim(n_bus)} for N={n_bus}"
        )
    N = n_bus
    return GridParameters(
        g=theta[:N],
        d_ca=theta[N : 2 * N],
        d_cc=theta[2 * N : 3 * N],
        d_cp=theta[3 * N : 4 * N],
        psi=theta[4 * N :],
    )


def theta_blocks(n_bus: int) -> dict[str, slice]:
    """Slices of each constituent block inside ``theta``."""
    N = n_bus
    return {
        "g": slice(0, N),
        "d_ca": slice(N, 2 * N),
        "d_cc": slice(2 * N, 3 * N),
        "d_cp": slice(3 * N, 4 * N),
        "d": slice(N, 4 * N),
        "psi": slice(4 * N, theta_dim(N)),
    }


def uniform_params(
    topology: Topology,
    g: float | Sequence[float],
    d_ca: float | Sequence[float],
    d_cc: float | Sequence[float],
    d_cp: float | Sequence[float],
    y: float | Sequence[float],
) -> GridParameters:
    """Parameters with scalar values broadcast over buses/edges; psi zero-padded to full."""
    N = topology.bus_count

    def bus(v):
        return np.broadcast_to(np.asarray(v, dtype=float), (N,)).copy()

    psi_e = np.broadcast_to(np.asarray(y, dtype=float), (len(topology.edges),)).copy()
    return GridParameters(
        g=bus(g), d_ca=bus(d_ca), d_cc=bus(d_cc), d_cp=bus(d_cp),
        psi=topology.full_psi(psi_e),
    )

"""Decentralized identification and dispatch for droop-controlled DC microgrids.

Training-epoch simulation, implicit power-line signaling, joint parameter/state
estimation, Cramer-Rao analysis and decentralized economic dispatch.
"""

from powertalk.errors import (
    ExcitationNotFound,
    MaxIterExceeded,
    NearZeroChannel,
    NonConvergence,
    PowertalkError,
    SufficientExcitationViolated,
    TooFewSlots,
    ZeroVoltageCollapse,
)
from powertalk.grid_model import (
    DroopSetting,
    GridParameters,
    RatedEnvelope,
    Topology,
    build_conductance_matrix,
    droop_from_capacity,
    pack_theta,
    theta_dim,
    unpack_theta,
)

__version__ = "0.1.0"

__all__ = [
    "DroopSetting",
    "ExcitationNotFound",
    "GridParameters",
    "MaxIterExceeded",
    "NearZeroChannel",
    "NonConvergence",
    "PowertalkError",
    "RatedEnvelope",
    "SufficientExcitationViolated",
    "TooFewSlots",
    "Topology",
    "ZeroVoltageCollapse",
    "build_conductance_matrix",
    "droop_from_capacity",
    "pack_theta",
    "theta_dim",
    "unpack_theta",
]

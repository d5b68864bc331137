"""Locality-enforced EPR-B (Bell test) simulator.

Five isolated roles (source, two randomizers, two stations) exchange one-way
messages; the resulting trial logs are analysed both with the standard
dichotomic CHSH estimator and with the Malus-law intensity estimator.
"""

from eprsim.core import (
    ExperimentConfig,
    RandomStream,
    Role,
    SettingLabel,
    SourceMode,
    TrialRecord,
    canonicalize,
    derive_stream,
    malus_intensity,
    next_uniform,
)

__all__ = [
    "ExperimentConfig",
    "RandomStream",
    "Role",
    "SettingLabel",
    "SourceMode",
    "TrialRecord",
    "canonicalize",
    "derive_stream",
    "malus_intensity",
    "next_uniform",
]

__version__ = "0.1.0"

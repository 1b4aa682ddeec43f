"""Vacuum-stimulated Raman adiabatic passage photon source: 87Rb in a high-finesse cavity."""

__version__ = "0.1.0"

from .levels import AtomicState, Line, LineSpec, Manifold, coupling_amplitude, coupling_table, hyperfine_branching
from .model import (InitialState, PolarizationModes, PulseKind, PulseProfile, SystemParams, build_model,
                    cooperativity, mhz)
from .integrator import evolve_master, evolve_trajectories, stop_when_quiet
from .observables import efficiency, emission_budget, fwhm, wavepacket
from .detection import DetectionChain, chain_efficiency, g2_histogram, synthesize_clicks

__all__ = [
    "AtomicState", "Line", "LineSpec", "Manifold", "coupling_amplitude", "coupling_table", "hyperfine_branching",
    "InitialState", "PolarizationModes", "PulseKind", "PulseProfile", "SystemParams", "build_model",
    "cooperativity", "mhz", "evolve_master", "evolve_trajectories", "stop_when_quiet", "efficiency",
    "emission_budget", "fwhm", "wavepacket", "DetectionChain", "chain_efficiency", "g2_histogram",
    "synthesize_clicks",
]

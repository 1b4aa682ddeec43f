"""Physical quantities derived from master-equation trajectories and jump ensembles."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from .integrator import Ensemble, Trajectory
from .levels import Manifold
from .model import ChannelKind

QUADRATURE_TOL = 1e-6


@dataclass(frozen=True)
class Wavepacket:
    times: np.ndarray
    flux: np.ndarray  # photons / s leaving the cavity, summed over modes

    def __post_init__(self):
        if np.any(self.flux < -1e-9 * max(1.0, float(np.max(np.abs(self.flux), initial=0.0)))):
            raise ValueError("wave-packet flux must be nonnegative")

    @property
    def photons(self) -> float:
        return float(np.trapezoid(self.flux, self.times))

    @property
    def peak_time(self) -> float:
        return float(self.times[int(np.argmax(self.flux))])

    def density(self) -> tuple[np.ndarray, np.ndarray]:
        """Normalized emission-time density on the grid."""
        return self.times, self.flux / self.photons


@dataclass(frozen=True)
class Efficiency:
    value: float
    lower_bound: bool = False
    quadrature_error: float = 0.0

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class EmissionBudget:
    eta_cavity: float
    free_space_F1: float
    free_space_F2: float
    residual_F2_population: float
    recycled_cavity: float | None = None

    @property
    def free_space_total(self) -> float:
        return self.free_space_F1 + self.free_space_F2

    @property
    def free_to_cavity_ratio(self) -> float:
        return self.free_space_total / self.eta_cavity if self.eta_cavity else math.inf

    @property
    def purcell_fraction(self) -> float | None:
        """Share of spontaneously decayed excited population that ends as a cavity photon.

        Counts cavity photons emitted after at least one free-space decay,
        per free-space decay event.
        """
        if self.recycled_cavity is None or self.free_space_total == 0:
            return None
        return self.recycled_cavity / self.free_space_total


def _cavity_series(traj: Trajectory) -> np.ndarray:
    return traj["cavity"]


def _series(traj: Trajectory, name: str) -> np.ndarray:
    return traj[name]


def _integrate_with_error(y: np.ndarray, t: np.ndarray) -> tuple[float, float]:
    """Simpson value with a Richardson error estimate from the every-other-point grid."""
    if len(t) < 5:
        return float(np.trapezoid(y, t)), math.inf
    n = len(t) if len(t) % 2 else len(t) - 1
    fine = float(simpson(y[:n], x=t[:n]))
    coarse = float(simpson(y[:n:2], x=t[:n:2]))
    value = float(simpson(y, x=t))
    return value, abs(fine - coarse) / 15.0


def efficiency(traj: Trajectory) -> Efficiency:
    """2 kappa times the time integral of the intracavity photon number."""
    flux = 2 * traj.kappa * _cavity_series(traj)
    value, err = _integrate_with_error(flux, traj.times)
    return Efficiency(min(max(value, 0.0), 1.0), lower_bound=traj.truncated, quadrature_error=err)


def wavepacket(traj: Trajectory) -> Wavepacket:
    flux = 2 * traj.kappa * _cavity_series(traj)
    return Wavepacket(traj.times.copy(), np.clip(flux, 0.0, None))


def excited_population(traj: Trajectory) -> np.ndarray:
    return np.clip(_series(traj, "excited"), 0.0, 1.0)


def _free_space_rates(traj: Trajectory, manifold: Manifold, prefix: str = "") -> np.ndarray:
    tag = f"->{manifold.value}]"
    keys = [k for k in traj.obs if k.startswith(prefix + "rate:free[") and k.endswith(tag)]
    total = np.zeros_like(traj.times)
    for k in keys:
        total = total + traj[k]
    return total


def emission_budget(source: Trajectory | Ensemble) -> EmissionBudget:
    if isinstance(source, Ensemble):
        return _ensemble_budget(source)
    traj = source
    t = traj.times
    fs = {}
    for m in (Manifold.GROUND_F1, Manifold.GROUND_F2):
        rate = _free_space_rates(traj, m)
        fs[m] = float(np.trapezoid(rate, t))
    recycled = None
    if traj.heralded:
        recycled = float(np.trapezoid(2 * traj.kappa * traj["heralded:cavity"], t))
    return EmissionBudget(float(efficiency(traj).value), fs[Manifold.GROUND_F1], fs[Manifold.GROUND_F2],
                          float(_series(traj, "pop_F2")[-1]), recycled)


def _ensemble_budget(ens: Ensemble) -> EmissionBudget:
    n = ens.n_traj
    cav = fs1 = fs2 = recycled = 0
    for rec in ens.records:
        seen_free = False
        for _t, ch in rec.jumps:
            if ch.kind is ChannelKind.CAVITY:
                cav += 1
                recycled += seen_free
            else:
                seen_free = True
                if ch.manifold is Manifold.GROUND_F1:
                    fs1 += 1
                else:
                    fs2 += 1
    residual = float(ens.mean("pop_F2")[-1])
    return EmissionBudget(cav / n, fs1 / n, fs2 / n, residual, recycled / n)


def fwhm(wp: Wavepacket) -> float:
    """Full width at half maximum with linear interpolation between grid points.

    For a packet peaking at the first grid point the width runs from the peak to
    the half-maximum down-crossing (one-sided convention).
    """
    t, f = wp.times, wp.flux
    peak = float(np.max(f)) if len(f) else 0.0
    if not peak > 0:
        raise ValueError("FWHM undefined for an identically zero wave packet")
    half = 0.5 * peak
    above = np.nonzero(f >= half)[0]
    i0, i1 = int(above[0]), int(above[-1])
    if i0 == 0:
        t_up = t[0]
    else:
        t_up = t[i0 - 1] + (half - f[i0 - 1]) * (t[i0] - t[i0 - 1]) / (f[i0] - f[i0 - 1])
    if i1 == len(f) - 1:
        t_down = t[-1]
    else:
        t_down = t[i1] + (f[i1] - half) * (t[i1 + 1] - t[i1]) / (f[i1] - f[i1 + 1])
    return float(t_down - t_up)

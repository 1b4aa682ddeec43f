"""Parameter scans reproducing the theory curves, with figure presets."""

from __future__ import annotations

import enum
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .integrator import DEFAULT_ATOL, DEFAULT_RTOL, SolverError, Trajectory, evolve_master
from .levels import Line
from .model import DEFAULT_G_MAX, PulseProfile, SystemParams, build_model, mhz
from .observables import QUADRATURE_TOL, Wavepacket, efficiency, excited_population, fwhm, wavepacket

log = logging.getLogger(__name__)


class Axis(enum.Enum):
    COUPLING_G = "g"
    OMEGA_MAX = "omega"
    DELTA = "delta"
    PULSE_STEEPNESS = "steepness"


@dataclass(frozen=True)
class SolverSettings:
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    dt: float = 2e-9
    max_refinements: int = 3


def simulate(params: SystemParams, pulse: PulseProfile, settings: SolverSettings = SolverSettings(),
             **kw) -> Trajectory:
    """Quiet-stopped master-equation solve; the output grid is refined until the
    efficiency quadrature error estimate is below 1e-6."""
    model = build_model(params, pulse)
    dt = settings.dt
    for _ in range(settings.max_refinements + 1):
        traj = evolve_master(model, rtol=settings.rtol, atol=settings.atol, dt=dt, **kw)
        if efficiency(traj).quadrature_error < QUADRATURE_TOL:
            return traj
        dt *= 0.5
    log.warning("quadrature error above %.0e after %d refinements", QUADRATURE_TOL, settings.max_refinements)
    return traj


def truncation_converged(params: SystemParams, pulse: PulseProfile, settings: SolverSettings = SolverSettings(),
                         tol: float = 1e-4) -> tuple[bool, float]:
    """Compare efficiency at n_max and n_max+1."""
    a = efficiency(simulate(params, pulse, settings)).value
    b = efficiency(simulate(params.with_(n_max=params.n_max + 1), pulse, settings)).value
    return abs(a - b) < tol, abs(a - b)


@dataclass(frozen=True)
class SweepSpec:
    axis: Axis
    values: tuple[float, ...]
    base: SystemParams
    pulse: PulseProfile
    keep_wavepackets: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if len(vals) == 0:
            raise ValueError("sweep needs at least one value")
        d = np.diff(vals)
        if len(d) and not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("sweep values must be strictly monotone")

    def point(self, value: float) -> tuple[SystemParams, PulseProfile]:
        if self.axis is Axis.COUPLING_G:
            return self.base.with_(g_max=value, coupling_scale=self.base.coupling_scale or 1.0), self.pulse
        if self.axis is Axis.DELTA:
            return self.base.with_(delta=value), self.pulse
        return self.base, replace(self.pulse, omega_max=value)


@dataclass
class SweepResult:
    axis: Axis
    values: np.ndarray
    eta: np.ndarray
    flags: list[str]
    wavepackets: list[Wavepacket | None] = field(default_factory=list)
    excited_peak: np.ndarray | None = None
    wall_time: np.ndarray | None = None
    spec: SweepSpec | None = None
    markers: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> np.ndarray:
        return np.array([f in ("", "lower_bound") for f in self.flags])


def _run_point(args):
    params, pulse, settings, keep = args
    t0 = time.perf_counter()
    try:
        traj = simulate(params, pulse, settings)
    except (SolverError, ValueError) as exc:
        return math.nan, f"failed: {exc}", None, math.nan, time.perf_counter() - t0
    eff = efficiency(traj)
    flag = "lower_bound" if eff.lower_bound else ""
    wp = wavepacket(traj) if keep else None
    return eff.value, flag, wp, float(excited_population(traj).max()), time.perf_counter() - t0


def run_sweep(spec: SweepSpec, settings: SolverSettings = SolverSettings(), jobs: int = 1) -> SweepResult:
    """Evaluate every point; rows come back in input order regardless of scheduling."""
    work = [(*spec.point(v), settings, spec.keep_wavepackets) for v in spec.values]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_point, work))
    else:
        rows = [_run_point(w) for w in work]
    eta, flags, wps, peak, wall = zip(*rows)
    for v, f in zip(spec.values, flags):
        if f.startswith("failed"):
            log.error("sweep point %s=%g %s", spec.axis.value, v, f)
    return SweepResult(spec.axis, np.asarray(spec.values, dtype=float), np.array(eta), list(flags),
                       list(wps), np.array(peak), np.array(wall), spec)


def sweep_coupling(spec: SweepSpec, settings: SolverSettings = SolverSettings(), jobs: int = 1) -> SweepResult:
    if spec.axis is not Axis.COUPLING_G:
        raise ValueError("sweep_coupling needs axis=COUPLING_G")
    res = run_sweep(spec, settings, jobs)
    res.markers = {line.value: DEFAULT_G_MAX[line] for line in Line}
    return res


def sweep_omega(spec: SweepSpec, settings: SolverSettings = SolverSettings(), jobs: int = 1) -> SweepResult:
    if spec.axis is not Axis.OMEGA_MAX:
        raise ValueError("sweep_omega needs axis=OMEGA_MAX")
    return run_sweep(spec, settings, jobs)


def sweep_delta(spec: SweepSpec, settings: SolverSettings = SolverSettings(), jobs: int = 1) -> SweepResult:
    if spec.axis is not Axis.DELTA:
        raise ValueError("sweep_delta needs axis=DELTA")
    return run_sweep(spec, settings, jobs)


def delta_asymmetry(res: SweepResult) -> list[tuple[float, float]]:
    """|eta(+D) - eta(-D)| for every mirrored pair in the sweep (diagnostic only)."""
    out = []
    lookup = {round(v, 3): e for v, e in zip(res.values, res.eta)}
    for v, e in zip(res.values, res.eta):
        if v > 0 and round(-v, 3) in lookup:
            out.append((float(v), abs(e - lookup[round(-v, 3)])))
    return out


@dataclass
class WavepacketFamily:
    omega_max: np.ndarray
    wavepackets: list[Wavepacket]
    eta: np.ndarray
    fwhm: np.ndarray


def wavepacket_family(spec: SweepSpec, settings: SolverSettings = SolverSettings(), jobs: int = 1) -> WavepacketFamily:
    """One wave packet per pulse steepness (peak Rabi frequency at fixed duration)."""
    if spec.axis is not Axis.PULSE_STEEPNESS:
        raise ValueError("wavepacket_family needs axis=PULSE_STEEPNESS")
    res = run_sweep(replace(spec, keep_wavepackets=True), settings, jobs)
    widths = np.array([fwhm(w) if w is not None else math.nan for w in res.wavepackets])
    return WavepacketFamily(res.values, res.wavepackets, res.eta, widths)


def plateau(res: SweepResult, rel: float = 0.95) -> tuple[float, float]:
    """(onset, plateau level): level is the curve maximum, onset the first value reaching rel * level."""
    eta = np.where(res.ok, res.eta, -np.inf)
    level = float(np.max(eta))
    onset = float(res.values[int(np.argmax(eta >= rel * level))])
    return onset, level


# ---------------------------------------------------------------------------
# Presets for the reference protocols

FIG3_PULSE = PulseProfile.linear(3e-6, mhz(10.0))
FIG4_EXPONENT = 0.75
FIG5_OMEGA = {Line.D1: mhz(15.0), Line.D2: mhz(26.0)}
EFFECTIVE_SCALE = 0.5


def fig3a_spec(line: Line, n_points: int = 25, base: SystemParams | None = None) -> SweepSpec:
    base = base or SystemParams()
    values = tuple(mhz(v) for v in np.geomspace(0.1, 25.0, n_points))
    return SweepSpec(Axis.COUPLING_G, values, base.with_(line=line, g_max=None, coupling_scale=1.0), FIG3_PULSE)


def fig4a_spec(line: Line, n_points: int = 25, base: SystemParams | None = None) -> SweepSpec:
    base = (base or SystemParams()).with_(line=line, g_max=None, coupling_scale=EFFECTIVE_SCALE)
    values = tuple(mhz(v) for v in np.geomspace(0.5, 60.0, n_points))
    return SweepSpec(Axis.OMEGA_MAX, values, base, PulseProfile.power_law(FIG4_EXPONENT, 3e-6, mhz(10.0)))


def fig5_spec(line: Line, n_points: int = 25, base: SystemParams | None = None) -> SweepSpec:
    base = (base or SystemParams()).with_(line=line, g_max=None, coupling_scale=EFFECTIVE_SCALE)
    values = tuple(mhz(v) for v in np.linspace(-60.0, 60.0, n_points))
    return SweepSpec(Axis.DELTA, values, base, PulseProfile.power_law(FIG4_EXPONENT, 3e-6, FIG5_OMEGA[line]))


FIG4B_OMEGAS_MHZ = (2.5, 4.0, 6.5, 10.0, 16.0, 25.0)


def fig4b_spec(base: SystemParams | None = None, omegas_mhz=FIG4B_OMEGAS_MHZ) -> SweepSpec:
    base = (base or SystemParams()).with_(line=Line.D1, g_max=None, coupling_scale=EFFECTIVE_SCALE)
    return SweepSpec(Axis.PULSE_STEEPNESS, tuple(mhz(v) for v in omegas_mhz), base,
                     PulseProfile.power_law(FIG4_EXPONENT, 3e-6, mhz(10.0)), keep_wavepackets=True)


PRESETS = ("fig3a", "fig3b", "fig4a-theory", "fig4b", "fig5-theory")

"""
Atom-cavity Hilbert space, rotating-frame Hamiltonian and labeled collapse operators.

The composite space is atom (11 states) x cavity mode(s), ordered atom-major.
All rates are angular frequencies in rad/s.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .levels import (
    BASIS_SIZE,
    AtomicState,
    Line,
    Manifold,
    as_line,
    build_basis,
    coupling_amplitude,
    manifold_indices,
    state_index,
)

TWO_PI = 2.0 * math.pi


def mhz(nu: float) -> float:
    """Angular frequency (rad/s) from an ordinary frequency in MHz."""
    return TWO_PI * nu * 1e6


DEFAULT_G_MAX = {Line.D1: mhz(2.3), Line.D2: mhz(5.1)}
DEFAULT_KAPPA = mhz(2.8)
DEFAULT_GAMMA = mhz(3.0)


class PolarizationModes(enum.Enum):
    TWO_MODES = "two"
    SINGLE_MODE = "single"

    @property
    def count(self) -> int:
        return 2 if self is PolarizationModes.TWO_MODES else 1


@dataclass(frozen=True)
class InitialState:
    """|2,0> with probability `fidelity`; the remainder evenly over the other F=2 substates."""
    fidelity: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.fidelity <= 1.0:
            raise ValueError(f"preparation fidelity must be in [0, 1], got {self.fidelity}")

    @property
    def is_pure(self) -> bool:
        return self.fidelity == 1.0


@dataclass(frozen=True)
class SystemParams:
    line: Line = Line.D1
    g_max: float | None = None
    coupling_scale: float = 1.0
    kappa: float = DEFAULT_KAPPA
    gamma: float = DEFAULT_GAMMA
    delta: float = 0.0
    two_photon_detuning: float = 0.0
    n_max: int = 2
    polarization_modes: PolarizationModes = PolarizationModes.TWO_MODES
    initial_state: InitialState = field(default_factory=InitialState)

    def __post_init__(self):
        object.__setattr__(self, "line", as_line(self.line))
        if self.g_max is None:
            object.__setattr__(self, "g_max", DEFAULT_G_MAX[self.line])
        if isinstance(self.polarization_modes, str):
            object.__setattr__(self, "polarization_modes", PolarizationModes(self.polarization_modes))
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if not self.g_max > 0:
            out.append(f"g_max must be > 0, got {self.g_max}")
        if not self.kappa > 0:
            out.append(f"kappa must be > 0, got {self.kappa}")
        if not self.gamma > 0:
            out.append(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 <= self.coupling_scale <= 1.0:
            out.append(f"coupling_scale must be in [0, 1], got {self.coupling_scale}")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            out.append(f"n_max must be an integer >= 1 (the photon-number truncation must keep one photon), got {self.n_max}")
        for name in ("delta", "two_photon_detuning"):
            if not math.isfinite(getattr(self, name)):
                out.append(f"{name} must be finite")
        return out

    @property
    def g(self) -> float:
        return self.coupling_scale * self.g_max

    def with_(self, **changes) -> "SystemParams":
        return replace(self, **changes)


class PulseKind(enum.Enum):
    LINEAR_RAMP = "linear"
    POWER_LAW = "power"
    PIECEWISE_LINEAR = "piecewise"
    CONSTANT = "constant"


@dataclass(frozen=True)
class PulseProfile:
    """Control-laser Rabi frequency Omega_c(t) in rad/s; duration in s.

    PIECEWISE_LINEAR knots are (t/duration, Omega/omega_max) pairs.
    """
    kind: PulseKind = PulseKind.LINEAR_RAMP
    duration: float = 3e-6
    omega_max: float = mhz(10.0)
    exponent: float = 1.0
    knots: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", PulseKind(self.kind))
        if not self.duration > 0:
            raise ValueError(f"pulse duration must be > 0, got {self.duration}")
        if not self.omega_max >= 0:
            raise ValueError(f"omega_max must be >= 0, got {self.omega_max}")
        if self.kind is PulseKind.POWER_LAW and not self.exponent > 0:
            raise ValueError(f"power-law exponent must be > 0, got {self.exponent}")
        if self.kind is PulseKind.PIECEWISE_LINEAR:
            xs = [k[0] for k in self.knots]
            if len(xs) < 2 or any(b <= a for a, b in zip(xs, xs[1:])) or min(k[1] for k in self.knots) < 0:
                raise ValueError("piecewise pulse needs >= 2 knots with increasing times and nonnegative values")

    @classmethod
    def linear(cls, duration: float = 3e-6, omega_max: float = mhz(10.0)) -> "PulseProfile":
        return cls(PulseKind.LINEAR_RAMP, duration, omega_max)

    @classmethod
    def power_law(cls, exponent: float, duration: float = 3e-6, omega_max: float = mhz(10.0)) -> "PulseProfile":
        return cls(PulseKind.POWER_LAW, duration, omega_max, exponent=exponent)

    def __call__(self, t: float) -> float:
        if self.kind is PulseKind.CONSTANT:
            return self.omega_max
        if t < 0.0 or t > self.duration:
            return 0.0
        x = t / self.duration
        if self.kind is PulseKind.LINEAR_RAMP:
            return self.omega_max * x
        if self.kind is PulseKind.POWER_LAW:
            return self.omega_max * x ** self.exponent
        xs, ys = zip(*self.knots)
        return self.omega_max * float(np.interp(x, xs, ys, left=0.0, right=0.0))

    @property
    def is_off(self) -> bool:
        return self.omega_max == 0.0

    @property
    def breakpoints(self) -> tuple[float, ...]:
        """Times where Omega(t) is not smooth; integrators must not step across them."""
        if self.kind is PulseKind.CONSTANT:
            return ()
        pts = {self.duration}
        if self.kind is PulseKind.PIECEWISE_LINEAR:
            pts |= {k[0] * self.duration for k in self.knots if 0.0 < k[0] < 1.0}
        return tuple(sorted(pts))


class ChannelKind(enum.Enum):
    CAVITY = "cavity"
    FREE_SPACE = "free_space"


class Channel(NamedTuple):
    kind: ChannelKind
    q: int
    manifold: Manifold | None = None

    def __str__(self) -> str:
        if self.kind is ChannelKind.CAVITY:
            return f"cavity[{self.q:+d}]"
        return f"free[{self.q:+d}->{self.manifold.value}]"


@dataclass(frozen=True)
class CollapseOp:
    op: sp.csr_matrix
    rate: float
    channel: Channel


def mode_polarizations(params: SystemParams) -> tuple[int, ...]:
    """Photon polarization carried by each cavity mode index."""
    if params.polarization_modes is PolarizationModes.TWO_MODES:
        return (1, -1)
    return (0,)


def composite_dimension(params: SystemParams) -> int:
    if params.n_max < 1:
        raise ValueError("n_max must be >= 1")
    return BASIS_SIZE * (params.n_max + 1) ** params.polarization_modes.count


class Operators:
    """Sparse building blocks on the composite space for one parameter set."""

    def __init__(self, params: SystemParams):
        self.params = params
        self.n_modes = params.polarization_modes.count
        self.n_fock = params.n_max + 1
        self.dim = composite_dimension(params)
        self._cavity_dim = self.n_fock ** self.n_modes

    def atom(self, m: np.ndarray | sp.spmatrix) -> sp.csr_matrix:
        return sp.kron(sp.csr_matrix(m), sp.identity(self._cavity_dim, format="csr"), format="csr")

    def transition(self, to: AtomicState, frm: AtomicState) -> sp.csr_matrix:
        m = sp.csr_matrix(([1.0], ([state_index(to)], [state_index(frm)])), shape=(BASIS_SIZE, BASIS_SIZE))
        return self.atom(m)

    def projector(self, manifold: Manifold) -> sp.csr_matrix:
        idx = manifold_indices(manifold)
        m = sp.csr_matrix((np.ones(len(idx)), (idx, idx)), shape=(BASIS_SIZE, BASIS_SIZE))
        return self.atom(m)

    @cached_property
    def annihilators(self) -> list[sp.csr_matrix]:
        a1 = sp.diags(np.sqrt(np.arange(1, self.n_fock, dtype=float)), 1, format="csr")
        eye_f = sp.identity(self.n_fock, format="csr")
        out = []
        for k in range(self.n_modes):
            factors = [eye_f] * self.n_modes
            factors[k] = a1
            cav = factors[0]
            for f in factors[1:]:
                cav = sp.kron(cav, f, format="csr")
            out.append(sp.kron(sp.identity(BASIS_SIZE, format="csr"), cav, format="csr"))
        return out

    @cached_property
    def photon_number(self) -> sp.csr_matrix:
        return sum((a.conj().T @ a for a in self.annihilators), sp.csr_matrix((self.dim, self.dim))).tocsr()

    def basis_index(self, atom: AtomicState, photons: Sequence[int] = ()) -> int:
        photons = tuple(photons) + (0,) * (self.n_modes - len(photons))
        cav = 0
        for n in photons:
            cav = cav * self.n_fock + n
        return state_index(atom) * self._cavity_dim + cav


def _ground_states(manifold: Manifold) -> list[AtomicState]:
    return [s for s in build_basis() if s.manifold is manifold]


EXCITED = _ground_states(Manifold.EXCITED_F1)
GROUND_F1 = _ground_states(Manifold.GROUND_F1)
GROUND_F2 = _ground_states(Manifold.GROUND_F2)
REF_DRIVE = (AtomicState(Manifold.EXCITED_F1, 0), AtomicState(Manifold.GROUND_F2, 0))


def cavity_reference_amplitude(line: Line) -> float:
    """Largest |amplitude| on F=1<->F'=1; g_max is the coupling on that component."""
    return max(abs(coupling_amplitude(e, g, q, line)) for e in EXCITED for g in GROUND_F1 for q in (-1, 0, 1))


def drive_reference_amplitude(line: Line) -> float:
    return coupling_amplitude(*REF_DRIVE, 0, line)


def hamiltonian_parts(params: SystemParams, ops: Operators | None = None) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Return (H_static, H_drive) with H(t) = H_static + Omega(t) * H_drive, hbar = 1.

    H_static holds the detunings and the cavity coupling; H_drive is the pi-polarized
    control coupling on F=2<->F'=1 normalized so that <1',0|H_drive|2,0> = 1/2.
    """
    ops = ops or Operators(params)
    line = params.line
    h0 = params.delta * ops.projector(Manifold.EXCITED_F1)
    if params.two_photon_detuning:
        h0 = h0 + params.two_photon_detuning * ops.projector(Manifold.GROUND_F1)
    g_ref = cavity_reference_amplitude(line)
    pols = mode_polarizations(params)
    coupling = sp.csr_matrix((ops.dim, ops.dim), dtype=complex)
    for e in EXCITED:
        for g in GROUND_F1:
            for q in (-1, 1):
                amp = coupling_amplitude(e, g, q, line)
                if amp == 0.0:
                    continue
                mode = pols.index(q) if q in pols else 0
                coupling = coupling + (params.g * amp / g_ref) * ops.annihilators[mode].conj().T @ ops.transition(g, e)
    h0 = (h0 + coupling + coupling.conj().T).tocsr()

    d_ref = drive_reference_amplitude(line)
    drive = sp.csr_matrix((ops.dim, ops.dim), dtype=complex)
    for e in EXCITED:
        for g in GROUND_F2:
            amp = coupling_amplitude(e, g, 0, line)
            if amp != 0.0:
                drive = drive + (0.5 * amp / d_ref) * ops.transition(e, g)
    drive = (drive + drive.conj().T).tocsr()
    return h0.astype(complex), drive.astype(complex)


def build_hamiltonian(params: SystemParams, pulse: PulseProfile, t: float) -> sp.csr_matrix:
    h0, hd = hamiltonian_parts(params)
    return (h0 + pulse(t) * hd).tocsr()


def collapse_operators(params: SystemParams, ops: Operators | None = None) -> list[CollapseOp]:
    """Cavity decay sqrt(2 kappa) a per mode, then free-space decay per (q, ground manifold)."""
    ops = ops or Operators(params)
    out = []
    for k, q in enumerate(mode_polarizations(params)):
        out.append(CollapseOp((math.sqrt(2 * params.kappa) * ops.annihilators[k]).tocsr(),
                              2 * params.kappa, Channel(ChannelKind.CAVITY, q)))
    for manifold, grounds in ((Manifold.GROUND_F1, GROUND_F1), (Manifold.GROUND_F2, GROUND_F2)):
        for q in (-1, 0, 1):
            op = sp.csr_matrix((ops.dim, ops.dim), dtype=complex)
            for e in EXCITED:
                for g in grounds:
                    amp = coupling_amplitude(e, g, q, params.line)
                    if amp != 0.0:
                        op = op + amp * ops.transition(g, e)
            if op.nnz:
                out.append(CollapseOp((math.sqrt(2 * params.gamma) * op).tocsr(),
                                      2 * params.gamma, Channel(ChannelKind.FREE_SPACE, q, manifold)))
    return out


def cooperativity(params: SystemParams) -> float:
    return params.g ** 2 / (2 * params.kappa * params.gamma)


@dataclass(frozen=True)
class LindbladModel:
    params: SystemParams
    pulse: PulseProfile
    h_static: sp.csr_matrix
    h_drive: sp.csr_matrix
    collapse_ops: tuple[CollapseOp, ...]
    ops: Operators

    @property
    def dim(self) -> int:
        return self.ops.dim

    def hamiltonian(self, t: float) -> sp.csr_matrix:
        return (self.h_static + self.pulse(t) * self.h_drive).tocsr()

    @property
    def drive(self) -> Callable[[float], float]:
        return self.pulse

    def without_dissipation(self) -> "LindbladModel":
        return replace(self, collapse_ops=())

    def initial_density(self) -> np.ndarray:
        rho = np.zeros((self.dim, self.dim), dtype=complex)
        f = self.params.initial_state.fidelity
        rho_idx = self.ops.basis_index(AtomicState(Manifold.GROUND_F2, 0))
        rho[rho_idx, rho_idx] = f
        others = [s for s in GROUND_F2 if s.mF != 0]
        for s in others:
            i = self.ops.basis_index(s)
            rho[i, i] = (1.0 - f) / len(others)
        return rho

    def initial_pure(self) -> np.ndarray:
        if not self.params.initial_state.is_pure:
            raise ValueError("imperfect preparation is a mixture; sample_initial_pure draws from it")
        psi = np.zeros(self.dim, dtype=complex)
        psi[self.ops.basis_index(AtomicState(Manifold.GROUND_F2, 0))] = 1.0
        return psi

    def sample_initial_pure(self, rng: np.random.Generator) -> np.ndarray:
        """One basis state drawn from the preparation mixture."""
        diag = np.real(np.diag(self.initial_density()))
        k = int(np.searchsorted(np.cumsum(diag), rng.random() * diag.sum(), side="right"))
        psi = np.zeros(self.dim, dtype=complex)
        psi[min(k, self.dim - 1)] = 1.0
        return psi


def build_model(params: SystemParams, pulse: PulseProfile) -> LindbladModel:
    ops = Operators(params)
    h0, hd = hamiltonian_parts(params, ops)
    return LindbladModel(params, pulse, h0, hd, tuple(collapse_operators(params, ops)), ops)

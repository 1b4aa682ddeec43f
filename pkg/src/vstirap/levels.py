"""
Atomic level structure of 87Rb for the F=1, F=2 ground and F'=1 excited manifolds.

Dipole amplitudes follow the Condon-Shortley phase convention and are normalized
so that every excited Zeeman state has unit total squared amplitude summed over
all ground states and polarizations. The physical decay rate lives in gamma.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable

from sympy import Rational
from sympy.physics.wigner import wigner_3j, wigner_6j

NUCLEAR_SPIN = Rational(3, 2)
GROUND_J = Rational(1, 2)
POLARIZATIONS = (-1, 0, 1)


class Manifold(enum.Enum):
    GROUND_F1 = "F1"
    GROUND_F2 = "F2"
    EXCITED_F1 = "F1'"

    @property
    def F(self) -> int:
        return 2 if self is Manifold.GROUND_F2 else 1

    @property
    def is_ground(self) -> bool:
        return self is not Manifold.EXCITED_F1


class Line(enum.Enum):
    D1 = "D1"
    D2 = "D2"

    @property
    def excited_J(self) -> Rational:
        return Rational(1, 2) if self is Line.D1 else Rational(3, 2)


@dataclass(frozen=True)
class AtomicState:
    manifold: Manifold
    mF: int

    def __post_init__(self):
        if abs(self.mF) > self.manifold.F:
            raise ValueError(f"|mF|={abs(self.mF)} exceeds F={self.manifold.F} for {self.manifold.value}")

    def __str__(self) -> str:
        return f"|{self.manifold.value},{self.mF:+d}>"


@dataclass(frozen=True)
class LineSpec:
    line: Line

    @property
    def reduced_dipole_ratio(self) -> float:
        """F=1<->F'=1 amplitude relative to the D1 line (1 for D1, sqrt(5) for D2)."""
        return abs(_f1_reference_amplitude(self.line)) / abs(_f1_reference_amplitude(Line.D1))


def as_line(line: Line | LineSpec | str) -> Line:
    if isinstance(line, LineSpec):
        return line.line
    if isinstance(line, Line):
        return line
    return Line(str(line).upper())


BASIS_SIZE = 11


@lru_cache(maxsize=None)
def _basis() -> tuple[AtomicState, ...]:
    states = [AtomicState(Manifold.GROUND_F1, m) for m in (-1, 0, 1)]
    states += [AtomicState(Manifold.GROUND_F2, m) for m in range(-2, 3)]
    states += [AtomicState(Manifold.EXCITED_F1, m) for m in (-1, 0, 1)]
    return tuple(states)


def build_basis(line: Line | LineSpec | str | None = None) -> list[AtomicState]:
    """Ordered atomic basis: F=1 (mF=-1..1), F=2 (mF=-2..2), F'=1 (mF=-1..1).

    The basis does not depend on the line; the argument is accepted for symmetry
    with the coupling functions.
    """
    return list(_basis())


def state_index(state: AtomicState) -> int:
    return _basis().index(state)


def manifold_indices(manifold: Manifold) -> list[int]:
    return [i for i, s in enumerate(_basis()) if s.manifold is manifold]


@lru_cache(maxsize=None)
def _amplitude(line: Line, F_g: int, m_g: int, m_e: int, q: int) -> float:
    if m_e != m_g + q:
        return 0.0
    J, Jp, I = GROUND_J, line.excited_J, NUCLEAR_SPIN
    F_e = 1
    # <F_e m_e| d_q |F_g m_g> by Wigner-Eckart, reduced element decomposed in J and I.
    # |<J'||d||J>|^2 = 2J'+1 normalizes the total decay of each excited state to one.
    zeeman = (-1) ** (F_e - m_e) * float(wigner_3j(F_e, 1, F_g, -m_e, q, m_g))
    reduced = (-1) ** int(F_g + Jp + 1 + I) * math.sqrt((2 * F_g + 1) * (2 * F_e + 1) * float(2 * Jp + 1)) \
        * float(wigner_6j(Jp, J, 1, F_g, F_e, I))
    return zeeman * reduced


def coupling_amplitude(excited: AtomicState, ground: AtomicState, q: int, line: Line | LineSpec | str) -> float:
    """Signed relative dipole amplitude for |excited> -> |ground> emitting polarization q.

    Selection rule: nonzero only if mF(excited) = mF(ground) + q.
    """
    if excited.manifold is not Manifold.EXCITED_F1 or not ground.manifold.is_ground:
        raise ValueError(f"invalid transition {excited} -> {ground}: need excited F'=1 and a ground state")
    if q not in POLARIZATIONS:
        raise ValueError(f"polarization index must be in {POLARIZATIONS}, got {q}")
    return _amplitude(as_line(line), ground.manifold.F, ground.mF, excited.mF, q)


def _f1_reference_amplitude(line: Line) -> float:
    return max((_amplitude(line, 1, m_e - q, m_e, q)
                for m_e in (-1, 0, 1) for q in POLARIZATIONS if abs(m_e - q) <= 1), key=abs)


def coupling_table(line: Line | LineSpec | str) -> dict[tuple[AtomicState, AtomicState, int], float]:
    """All nonzero amplitudes keyed by (excited, ground, q)."""
    basis = _basis()
    table = {}
    for e in basis:
        if e.manifold is not Manifold.EXCITED_F1:
            continue
        for g in basis:
            if not g.manifold.is_ground:
                continue
            for q in POLARIZATIONS:
                amp = coupling_amplitude(e, g, q, line)
                if amp != 0.0:
                    table[(e, g, q)] = amp
    return table


def hyperfine_branching(line: Line | LineSpec | str) -> tuple[float, float]:
    """Fractions of F'=1 spontaneous decay into (F=1, F=2), from the mF'=0 row."""
    e = AtomicState(Manifold.EXCITED_F1, 0)
    into = {Manifold.GROUND_F1: 0.0, Manifold.GROUND_F2: 0.0}
    for (exc, g, _q), amp in coupling_table(line).items():
        if exc == e:
            into[g.manifold] += amp ** 2
    return into[Manifold.GROUND_F1], into[Manifold.GROUND_F2]


def dump_coupling_table(path: str | Path, lines: Iterable[Line | str] = (Line.D1, Line.D2)) -> Path:
    """Write the amplitude table as whitespace-separated text."""
    path = Path(path)
    rows = ["# line  excited_mF  ground_manifold  ground_mF  q  amplitude  amplitude_sq"]
    for line in lines:
        line = as_line(line)
        for (e, g, q), amp in coupling_table(line).items():
            rows.append(f"{line.value}  {e.mF:+d}  {g.manifold.value}  {g.mF:+d}  {q:+d}  "
                        f"{amp:+.15f}  {amp * amp:.15f}")
    path.write_text("\n".join(rows) + "\n")
    return path

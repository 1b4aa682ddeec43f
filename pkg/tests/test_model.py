import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from vstirap.levels import AtomicState, Line, Manifold, coupling_amplitude
from vstirap.model import (DEFAULT_G_MAX, ChannelKind, InitialState, Operators, PolarizationModes, PulseKind,
                           PulseProfile, SystemParams, build_hamiltonian, build_model, collapse_operators,
                           composite_dimension, cooperativity, hamiltonian_parts, mhz)

E0 = AtomicState(Manifold.EXCITED_F1, 0)
G20 = AtomicState(Manifold.GROUND_F2, 0)


def test_mhz():
    assert mhz(1.0) == pytest.approx(2 * math.pi * 1e6)


@pytest.mark.parametrize("modes, n_max, dim", [("two", 2, 99), ("two", 1, 44), ("single", 2, 33), ("single", 1, 22)])
def test_dimension(modes, n_max, dim):
    assert composite_dimension(SystemParams(n_max=n_max, polarization_modes=modes)) == dim


def test_line_default_coupling():
    assert SystemParams(line=Line.D2).g_max == DEFAULT_G_MAX[Line.D2] == mhz(5.1)
    assert SystemParams(coupling_scale=0.5).g == pytest.approx(0.5 * mhz(2.3))


@pytest.mark.parametrize("field, value", [("kappa", -1.0), ("gamma", 0.0), ("coupling_scale", 1.5), ("n_max", 0),
                                          ("g_max", -mhz(1))])
def test_invalid_params(field, value):
    with pytest.raises(ValueError, match=field):
        SystemParams(**{field: value})


def test_cooperativity():
    # C = g^2 / (2 kappa gamma) = 2.3^2 / (2 * 2.8 * 3.0)
    assert cooperativity(SystemParams()) == pytest.approx(2.3 ** 2 / 16.8)


def test_pulse_shapes():
    lin = PulseProfile.linear(3e-6, mhz(10))
    assert lin(0.0) == 0.0 and lin(1.5e-6) == pytest.approx(mhz(5)) and lin(3e-6) == pytest.approx(mhz(10))
    assert lin(-1e-9) == 0.0 and lin(3.1e-6) == 0.0
    pw = PulseProfile.power_law(0.75, 3e-6, mhz(10))
    assert pw(1.5e-6) == pytest.approx(mhz(10) * 0.5 ** 0.75)
    pc = PulseProfile(PulseKind.PIECEWISE_LINEAR, 2e-6, mhz(4), knots=((0, 0), (0.5, 1), (1, 1)))
    assert pc(0.5e-6) == pytest.approx(mhz(2)) and pc(1.5e-6) == pytest.approx(mhz(4))
    assert pc.breakpoints == (1e-6, 2e-6)
    assert PulseProfile(PulseKind.CONSTANT, 1e-6, 3.0)(5e-6) == 3.0
    with pytest.raises(ValueError):
        PulseProfile(duration=0)
    with pytest.raises(ValueError):
        PulseProfile(PulseKind.PIECEWISE_LINEAR, knots=((0.5, 1), (0.2, 1)))


def test_drive_vanishes_at_ramp_start():
    p = SystemParams(n_max=1)
    pulse = PulseProfile.linear()
    h0, _ = hamiltonian_parts(p)
    assert abs(build_hamiltonian(p, pulse, 0.0) - h0).max() == 0.0


@pytest.mark.parametrize("line", list(Line))
def test_drive_matrix_element_reference_convention(line):
    p = SystemParams(line=line, n_max=1)
    pulse = PulseProfile.linear(3e-6, mhz(10))
    ops = Operators(p)
    H = build_hamiltonian(p, pulse, 1.5e-6)
    i, j = ops.basis_index(E0), ops.basis_index(G20)
    assert H[i, j] == pytest.approx(mhz(5) / 2)
    # neighbouring pi channel scaled by its relative amplitude
    e1, g21 = AtomicState(Manifold.EXCITED_F1, 1), AtomicState(Manifold.GROUND_F2, 1)
    ratio = coupling_amplitude(e1, g21, 0, line) / coupling_amplitude(E0, G20, 0, line)
    assert H[ops.basis_index(e1), ops.basis_index(g21)] == pytest.approx(mhz(5) / 2 * ratio)


@pytest.mark.parametrize("line", list(Line))
def test_cavity_matrix_element(line):
    p = SystemParams(line=line, n_max=1)
    ops = Operators(p)
    h0, _ = hamiltonian_parts(p)
    g11 = AtomicState(Manifold.GROUND_F1, -1)
    # |1',0> -> |1,-1> emits sigma+ into mode 0; that component has the largest F=1 amplitude
    elem = h0[ops.basis_index(g11, (1, 0)), ops.basis_index(E0)]
    amp = coupling_amplitude(E0, g11, 1, line)
    assert abs(elem) == pytest.approx(p.g)
    assert np.sign(elem.real) == np.sign(amp)


def test_single_mode_routes_both_polarizations():
    p = SystemParams(n_max=1, polarization_modes=PolarizationModes.SINGLE_MODE)
    ops = Operators(p)
    h0, _ = hamiltonian_parts(p)
    for m in (-1, 1):
        g = AtomicState(Manifold.GROUND_F1, m)
        assert abs(h0[ops.basis_index(g, (1,)), ops.basis_index(E0)]) == pytest.approx(p.g)


def excitation_number(ops: Operators) -> sp.csr_matrix:
    return (ops.photon_number + ops.projector(Manifold.EXCITED_F1) + ops.projector(Manifold.GROUND_F2)).tocsr()


param_strategy = st.builds(
    SystemParams,
    line=st.sampled_from(list(Line)),
    coupling_scale=st.floats(0.0, 1.0),
    delta=st.floats(-mhz(80), mhz(80)),
    two_photon_detuning=st.floats(-mhz(5), mhz(5)),
    n_max=st.integers(1, 2),
    polarization_modes=st.sampled_from(list(PolarizationModes)),
)


@settings(max_examples=25, deadline=None)
@given(param_strategy, st.floats(0, mhz(60)))
def test_hamiltonian_hermitian_and_conserves_excitations(params, omega):
    ops = Operators(params)
    h0, hd = hamiltonian_parts(params, ops)
    H = (h0 + omega * hd).toarray()
    assert np.allclose(H, H.conj().T, atol=1e-6)
    N = excitation_number(ops).toarray()
    scale = max(1.0, np.abs(H).max())
    assert np.abs(H @ N - N @ H).max() <= 1e-12 * scale


@pytest.mark.parametrize("modes, n_ops", [("two", 8), ("single", 7)])
def test_collapse_operators(modes, n_ops):
    p = SystemParams(n_max=1, polarization_modes=modes)
    ops = Operators(p)
    cops = collapse_operators(p, ops)
    assert len(cops) == n_ops
    cav = sum((c.op.conj().T @ c.op for c in cops if c.channel.kind is ChannelKind.CAVITY), sp.csr_matrix((ops.dim,) * 2))
    free = sum((c.op.conj().T @ c.op for c in cops if c.channel.kind is ChannelKind.FREE_SPACE),
               sp.csr_matrix((ops.dim,) * 2))
    assert np.allclose(cav.toarray(), 2 * p.kappa * ops.photon_number.toarray())
    assert np.allclose(free.toarray(), 2 * p.gamma * ops.projector(Manifold.EXCITED_F1).toarray())


def test_initial_state_mixture():
    m = build_model(SystemParams(n_max=1, initial_state=InitialState(0.9)), PulseProfile.linear())
    rho = m.initial_density()
    assert np.trace(rho).real == pytest.approx(1.0)
    assert rho[m.ops.basis_index(G20), m.ops.basis_index(G20)].real == pytest.approx(0.9)
    k = m.ops.basis_index(AtomicState(Manifold.GROUND_F2, 2))
    assert rho[k, k].real == pytest.approx(0.025)
    with pytest.raises(ValueError):
        m.initial_pure()
    with pytest.raises(ValueError):
        InitialState(1.2)


def test_without_dissipation():
    m = build_model(SystemParams(n_max=1), PulseProfile.linear())
    assert m.without_dissipation().collapse_ops == ()
    assert len(m.collapse_ops) == 8

import math

import numpy as np
import pytest

from vstirap.integrator import (SolverError, evolve_master, evolve_trajectories, integrate, liouvillian_parts,
                                stop_when_quiet, trajectory_rng)
from vstirap.levels import AtomicState, Line, Manifold
from vstirap.model import ChannelKind, PulseKind, PulseProfile, SystemParams, build_model, mhz

from oracles import damped_jaynes_cummings, lindblad_rhs_dense, rk4_fixed, solve_reference

KAPPA = mhz(2.8)
G11 = AtomicState(Manifold.GROUND_F1, -1)
G20 = AtomicState(Manifold.GROUND_F2, 0)


def _collect(step_list):
    def on_step(step):
        step_list.append(step)
    return on_step


def test_integrate_exponential_and_dense_output():
    steps = []
    t, y, _ = integrate(lambda t, y: (-1 + 2j) * y, 0.0, np.array([1.0 + 0j]), 2.0, rtol=1e-10, atol=1e-12,
                        on_step=_collect(steps))
    assert t == 2.0
    assert y[0] == pytest.approx(np.exp((-1 + 2j) * 2.0), rel=1e-8)
    mid = steps[len(steps) // 2]
    tm = 0.5 * (mid.t0 + mid.t1)
    assert mid(tm)[0] == pytest.approx(np.exp((-1 + 2j) * tm), rel=1e-8)


def test_integrate_stops_where_requested():
    t, y, _ = integrate(lambda t, y: -y, 0.0, np.array([1.0 + 0j]), 5.0, rtol=1e-9, atol=1e-12,
                        on_step=lambda s: 0.5 * (s.t0 + s.t1) if s.t0 > 1.0 else None)
    assert 1.0 < t < 5.0
    assert y[0] == pytest.approx(np.exp(-t), rel=1e-8)


@pytest.fixture(scope="module")
def jc():
    g, kappa, gamma = mhz(5), mhz(2.8), mhz(3.0)
    H, Ls, A, S = damped_jaynes_cummings(g, kappa, gamma)
    rho0 = np.zeros((4, 4), complex)
    rho0[2, 2] = 1.0  # |e, 0>
    return lindblad_rhs_dense(H, Ls), rho0, A


def test_damped_jaynes_cummings_vs_scipy(jc):
    rhs, rho0, A = jc
    times = np.linspace(0, 1e-6, 51)
    steps = []
    integrate(rhs, 0.0, rho0.ravel().astype(complex), times[-1], rtol=1e-9, atol=1e-12, on_step=_collect(steps))
    ref = solve_reference(rhs, rho0, times)
    n_op = A.conj().T @ A
    for t, r in zip(times[1:], ref[1:]):
        step = next(s for s in steps if s.t0 <= t <= s.t1)
        rho = step(t).reshape(4, 4)
        assert abs(np.trace(n_op @ rho) - np.trace(n_op @ r)) < 1e-7
        assert np.abs(rho - r).max() < 1e-7


def test_damped_jaynes_cummings_vs_fine_fixed_step(jc):
    rhs, rho0, _ = jc
    steps = []
    t1 = 0.5e-6
    _, y, _ = integrate(rhs, 0.0, rho0.ravel().astype(complex), t1, rtol=1e-9, atol=1e-12, on_step=_collect(steps))
    fine = rk4_fixed(rhs, rho0.ravel(), t1, 100 * len(steps))
    assert np.abs(y - fine).max() < 1e-7


def _decay_model(duration=1e-8):
    params = SystemParams(n_max=1, coupling_scale=0.0)
    return build_model(params, PulseProfile(PulseKind.LINEAR_RAMP, duration, 0.0))


def test_pure_cavity_decay():
    m = _decay_model()
    rho0 = np.zeros((m.dim, m.dim), complex)
    k = m.ops.basis_index(G11, (1, 0))
    rho0[k, k] = 1.0
    traj = evolve_master(m, rho0, t_end=2e-6, stop_quiet=True, rtol=1e-10, atol=1e-13, dt=1e-9)
    np.testing.assert_allclose(traj["cavity"], np.exp(-2 * KAPPA * traj.times), rtol=1e-7, atol=1e-12)
    assert stop_when_quiet(traj) == pytest.approx(math.log(1e6) / (2 * KAPPA), rel=1e-8)
    assert not traj.truncated


def test_zero_generator_keeps_state():
    m = _decay_model(duration=1e-6)
    traj = evolve_master(m)
    np.testing.assert_array_equal(traj.final_state, m.initial_density())
    assert traj.quiet_time == pytest.approx(1e-6)
    assert np.all(traj["cavity"] == 0)


def test_truncated_flag_and_error():
    m = build_model(SystemParams(n_max=1), PulseProfile.linear())
    traj = evolve_master(m, t_end=1e-6, stop_quiet=True)
    assert traj.truncated
    with pytest.raises(SolverError):
        stop_when_quiet(traj)
    with pytest.raises(ValueError):
        evolve_master(m, rtol=0.1)


def _densities(traj):
    return [r for _t, r in sorted(traj.samples.items())]


@pytest.mark.parametrize("line, modes, kind", [(Line.D1, "two", "linear"), (Line.D2, "two", "linear"),
                                               (Line.D1, "single", "power"), (Line.D2, "single", "power")])
def test_trace_and_positivity(line, modes, kind):
    pulse = PulseProfile.linear() if kind == "linear" else PulseProfile.power_law(0.75)
    m = build_model(SystemParams(line=line, n_max=1, polarization_modes=modes), pulse)
    traj = evolve_master(m, sample_every=50)
    assert np.max(np.abs(traj["trace"] - 1)) < 1e-6
    for rho in _densities(traj):
        assert np.allclose(rho, rho.conj().T, atol=1e-12)
        assert np.linalg.eigvalsh(rho).min() >= -1e-8


def test_master_vs_independent_dense_lindblad():
    params = SystemParams(line=Line.D1, n_max=1, polarization_modes="single", delta=mhz(4))
    pulse = PulseProfile.linear(2e-6, mhz(12))
    m = build_model(params, pulse)
    t_end = 2e-6
    traj = evolve_master(m, t_end=t_end, dt=4e-8, rtol=1e-10, atol=1e-13)
    h0, hd = m.h_static.toarray(), m.h_drive.toarray()
    Ls = [c.op.toarray() for c in m.collapse_ops]
    static = lindblad_rhs_dense(h0, Ls)
    drive = lindblad_rhs_dense(hd, [])

    def rhs(t, y):
        return static(t, y) + pulse(t) * drive(t, y)

    ref = solve_reference(rhs, m.initial_density(), traj.times)
    n_op = m.ops.photon_number.toarray()
    cav_ref = np.einsum("ij,tji->t", n_op, ref).real
    np.testing.assert_allclose(traj["cavity"], cav_ref, atol=1e-8)
    np.testing.assert_allclose(traj.final_state, ref[-1], atol=1e-8)


def test_liouvillian_preserves_trace():
    m = build_model(SystemParams(n_max=1), PulseProfile.linear())
    L0, L1 = liouvillian_parts(m)
    vec_id = np.eye(m.dim).ravel()
    # d/dt Tr(rho) = vec(I) . L vec(rho) must vanish for every rho
    assert np.abs(vec_id @ L0).max() < 1e-6 * abs(L0).max()
    assert np.abs(vec_id @ L1).max() < 1e-12


def test_photon_number_truncation_exact():
    pulse = PulseProfile.linear()
    etas = []
    for n_max in (1, 2):
        m = build_model(SystemParams(n_max=n_max), pulse)
        traj = evolve_master(m, rtol=1e-11, atol=1e-14)
        etas.append(2 * m.params.kappa * np.trapezoid(traj["cavity"], traj.times))
    assert abs(etas[0] - etas[1]) < 1e-9


def test_herald_totals_match_plain_solve():
    m = build_model(SystemParams(n_max=1), PulseProfile.linear())
    plain = evolve_master(m)
    her = evolve_master(m, herald=ChannelKind.FREE_SPACE)
    n = min(len(plain.times), len(her.times))
    np.testing.assert_allclose(her["cavity"][:n], plain["cavity"][:n], atol=1e-8)
    assert np.all(her["heralded:cavity"] <= her["cavity"] + 1e-10)
    assert her["heralded:trace"][0] == 0.0


# ---------------------------------------------------------------------------
# quantum jumps

@pytest.fixture(scope="module")
def small_model():
    return build_model(SystemParams(n_max=1, polarization_modes="single"), PulseProfile.linear())


def test_trajectory_rng_independent_of_order():
    a = trajectory_rng(7, 3).random(4)
    b = trajectory_rng(7, 3).random(4)
    c = trajectory_rng(7, 4).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_trajectories_deterministic(small_model):
    grid = np.linspace(0, 6e-6, 31)
    e1 = evolve_trajectories(small_model, n_traj=20, seed=11, grid=grid)
    e2 = evolve_trajectories(small_model, n_traj=20, seed=11, grid=grid)
    e3 = evolve_trajectories(small_model, n_traj=20, seed=12, grid=grid)
    np.testing.assert_array_equal(e1.obs["cavity"], e2.obs["cavity"])
    assert [r.jumps for r in e1.records] == [r.jumps for r in e2.records]
    assert [r.jumps for r in e1.records] != [r.jumps for r in e3.records]


def test_trajectories_agree_with_master(small_model):
    grid = np.linspace(0, 6e-6, 61)
    ens = evolve_trajectories(small_model, n_traj=400, seed=3, grid=grid)
    traj = evolve_master(small_model, t_end=6e-6, dt=1e-7)
    # branches rarer than ~1/N are unsampled and invisible to the sample SE
    floor = 5.0 / ens.n_traj
    for name in ("cavity", "excited", "pop_F1"):
        diff = np.abs(ens.mean(name) - traj[name])
        assert np.all(diff <= 3.5 * ens.stderr(name) + floor), name
    for rec in ens.records:
        assert rec.count(ChannelKind.CAVITY) <= 1
        assert np.linalg.norm(rec.final_state) == pytest.approx(1.0, abs=1e-9)

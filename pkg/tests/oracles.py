"""Reference implementations that share no code with the package under test."""

from __future__ import annotations

from fractions import Fraction
from math import factorial, sqrt

import numpy as np
from scipy.integrate import solve_ivp


def _f(x: Fraction) -> int:
    assert x.denominator == 1 and x >= 0, x
    return factorial(int(x))


def clebsch_gordan(j1, m1, j2, m2, J, M) -> float:
    """<j1 m1 j2 m2 | J M> from the Racah closed form, Condon-Shortley phases."""
    j1, m1, j2, m2, J, M = map(Fraction, (j1, m1, j2, m2, J, M))
    if m1 + m2 != M or abs(m1) > j1 or abs(m2) > j2 or abs(M) > J:
        return 0.0
    if J < abs(j1 - j2) or J > j1 + j2 or (j1 + j2 + J).denominator != 1:
        return 0.0
    pre = Fraction((2 * J + 1) * _f(J + j1 - j2) * _f(J - j1 + j2) * _f(j1 + j2 - J), _f(j1 + j2 + J + 1))
    pre *= _f(J + M) * _f(J - M) * _f(j1 - m1) * _f(j1 + m1) * _f(j2 - m2) * _f(j2 + m2)
    total = Fraction(0)
    k = 0
    while True:
        args = [j1 + j2 - J - k, j1 - m1 - k, j2 + m2 - k, J - j2 + m1 + k, J - j1 - m2 + k]
        if min(args[:3]) < 0:
            break
        if min(args[3:]) >= 0:
            den = factorial(k)
            for a in args:
                den *= _f(a)
            total += Fraction((-1) ** k, den)
        k += 1
    return float(total) * sqrt(pre)


def hyperfine_dipole(Jg, Je, I, Fg, mg, Fe, me, q) -> float:
    """<Fe me| d_q |Fg mg> built in the uncoupled |J mJ>|I mI> basis.

    The electronic element is proportional to <Jg mJ 1 q | Je mJ'>; overall
    normalization is left to the caller.
    """
    total = 0.0
    twoI = int(2 * I)
    for two_mI in range(-twoI, twoI + 1, 2):
        mI = Fraction(two_mI, 2)
        mJg, mJe = Fraction(mg) - mI, Fraction(me) - mI
        if abs(mJg) > Jg or abs(mJe) > Je:
            continue
        total += (clebsch_gordan(Je, mJe, I, mI, Fe, me) * clebsch_gordan(Jg, mJg, I, mI, Fg, mg)
                  * clebsch_gordan(Jg, mJg, 1, q, Je, mJe))
    return total


def rb87_table(Je) -> dict[tuple[int, int, int, int], float]:
    """(Fg, mg, me, q) -> amplitude for F'=1, normalized to unit decay per excited state."""
    Jg, I, Fe = Fraction(1, 2), Fraction(3, 2), 1
    raw = {}
    for Fg in (1, 2):
        for mg in range(-Fg, Fg + 1):
            for q in (-1, 0, 1):
                me = mg + q
                if abs(me) <= Fe:
                    raw[(Fg, mg, me, q)] = hyperfine_dipole(Jg, Fraction(Je), I, Fg, mg, Fe, me, q)
    norm = sqrt(sum(v * v for k, v in raw.items() if k[2] == 0))
    return {k: v / norm for k, v in raw.items()}


def lindblad_rhs_dense(H: np.ndarray, Ls: list[np.ndarray]):
    """drho/dt for time-independent H, written directly from the commutator form."""
    d = H.shape[0]
    LdL = [L.conj().T @ L for L in Ls]

    def rhs(t, y):
        rho = y.reshape(d, d)
        out = -1j * (H @ rho - rho @ H)
        for L, M in zip(Ls, LdL):
            out += L @ rho @ L.conj().T - 0.5 * (M @ rho + rho @ M)
        return out.ravel()

    return rhs


def damped_jaynes_cummings(g, kappa, gamma, n_max=1):
    """Two-level atom (|g>, |e>) in one mode; H = g (a^dag sigma + a sigma^dag)."""
    nf = n_max + 1
    a = np.diag(np.sqrt(np.arange(1, nf)), 1)
    sm = np.array([[0, 1], [0, 0]], dtype=complex)  # |g><e| with basis (g, e)
    A = np.kron(np.eye(2), a)
    S = np.kron(sm, np.eye(nf))
    H = g * (A.conj().T @ S + S.conj().T @ A)
    Ls = [np.sqrt(2 * kappa) * A, np.sqrt(2 * gamma) * S]
    return H, Ls, A, S


def solve_reference(rhs, rho0: np.ndarray, times: np.ndarray, rtol=1e-11, atol=1e-13) -> np.ndarray:
    sol = solve_ivp(rhs, (times[0], times[-1]), rho0.ravel().astype(complex), t_eval=times, method="DOP853",
                    rtol=rtol, atol=atol)
    assert sol.success
    d = rho0.shape[0]
    return sol.y.T.reshape(len(times), d, d)


def rk4_fixed(rhs, y0: np.ndarray, t1: float, n_steps: int) -> np.ndarray:
    """Classic fixed-step RK4; the fine-step reference."""
    y = y0.astype(complex).copy()
    h = t1 / n_steps
    t = 0.0
    for _ in range(n_steps):
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return y

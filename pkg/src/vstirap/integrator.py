"""
Time evolution: adaptive Dormand-Prince 5(4) on the vectorized density matrix, and a
batched Monte Carlo wave-function unraveling with per-channel jump records.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .levels import Manifold
from .model import Channel, ChannelKind, LindbladModel

log = logging.getLogger(__name__)

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-11
QUIET_THRESHOLD = 1e-6
HORIZON_FACTOR = 10.0


class SolverError(RuntimeError):
    """Base class for integration failures."""


class StiffnessError(SolverError):
    def __init__(self, t: float, h: float):
        super().__init__(f"step size underflow at t={t:.6e} s (h={h:.3e} s)")
        self.t = t
        self.h = h


class IntegrityError(SolverError):
    pass


# Dormand-Prince 5(4) tableau with Shampine's 4th-order dense output.
_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([71 / 57600, 0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


@dataclass
class Step:
    t0: float
    t1: float
    y0: np.ndarray
    y1: np.ndarray
    k: list

    def __call__(self, t: float, cols=None) -> np.ndarray:
        h = self.t1 - self.t0
        x = (t - self.t0) / h
        weights = _P @ np.array([x, x * x, x ** 3, x ** 4])
        if cols is None:
            acc = self.y0.copy()
            for w, k in zip(weights, self.k):
                if w:
                    acc += (h * w) * k
            return acc
        acc = self.y0[..., cols].copy()
        for w, k in zip(weights, self.k):
            if w:
                acc += (h * w) * k[..., cols]
        return acc


def _dp_step(fun, t, y, f0, h):
    k = [f0]
    for i in range(1, 6):
        dy = sum(a * kj for a, kj in zip(_A[i], k) if a)
        k.append(fun(t + _C[i] * h, y + h * dy))
    y1 = y + h * sum(b * kj for b, kj in zip(_B, k) if b)
    f1 = fun(t + h, y1)
    k.append(f1)
    err = h * sum(e * kj for e, kj in zip(_E, k) if e)
    return y1, f1, err, k


def _rms_norm(err, y0, y1, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean(np.abs(err / scale) ** 2)))


def _column_max_norm(err, y0, y1, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean(np.abs(err / scale) ** 2, axis=0)).max())


def integrate(fun, t0: float, y0: np.ndarray, t1: float, *, rtol: float, atol: float,
              on_step: Callable[[Step], float | None], h0: float | None = None,
              norm=_rms_norm, max_step: float = np.inf) -> tuple[float, np.ndarray, float]:
    """Adaptive DP5(4) from t0 to t1 (no breakpoints inside).

    `on_step` receives each accepted step; returning a time stops integration there
    (the state is taken from the dense output). Returns (t_stop, y_stop, last_h).
    """
    t, y = t0, y0
    f = fun(t, y)
    span = t1 - t0
    if h0 is None:
        d0 = float(np.sqrt(np.mean(np.abs(y) ** 2))) + 1e-300
        d1 = float(np.sqrt(np.mean(np.abs(f) ** 2))) + 1e-300
        h0 = min(0.01 * d0 / d1, span)
    h = min(h0, span, max_step)
    h_floor = 1e-14 * max(abs(t1), abs(t0), 1e-12)
    while t < t1:
        h = min(h, t1 - t, max_step)
        last = t + h >= t1 or (t1 - (t + h)) < h_floor
        if last:
            h = t1 - t
        if h < h_floor:
            raise StiffnessError(t, h)
        y1, f1, err, k = _dp_step(fun, t, y, f, h)
        e = norm(err, y, y1, rtol, atol)
        if not np.isfinite(e):
            raise StiffnessError(t, h)
        if e <= 1.0:
            tn = t1 if last else t + h
            step = Step(t, tn, y, y1, k)
            stop = on_step(step)
            factor = 10.0 if e == 0 else min(10.0, max(0.2, 0.9 * e ** -0.2))
            if stop is not None:
                return stop, step(stop), h * factor
            t, y, f = tn, y1, f1
            h *= factor
        else:
            h *= max(0.2, 0.9 * e ** -0.2)
    return t, y, h


def _segments(t_end: float, breakpoints: Iterable[float]) -> list[float]:
    pts = sorted({0.0, t_end, *[b for b in breakpoints if 0.0 < b < t_end]})
    return pts


# ---------------------------------------------------------------------------
# Master equation


def _spre(a):
    return sp.kron(a, sp.identity(a.shape[0], format="csr"), format="csr")


def _spost(a):
    return sp.kron(sp.identity(a.shape[0], format="csr"), a.T, format="csr")


def liouvillian_parts(model: LindbladModel, *, collapse=None) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Row-major superoperators (static, drive): d vec(rho)/dt = (L0 + Omega(t) L1) vec(rho)."""
    h0, hd = model.h_static, model.h_drive
    L0 = -1j * (_spre(h0) - _spost(h0))
    L1 = -1j * (_spre(hd) - _spost(hd))
    for c in (model.collapse_ops if collapse is None else collapse):
        L = c.op
        LdL = (L.conj().T @ L).tocsr()
        L0 = L0 + sp.kron(L, L.conj(), format="csr") - 0.5 * (_spre(LdL) + _spost(LdL))
    return L0.tocsr(), L1.tocsr()


def _jump_super(ops) -> sp.csr_matrix:
    out = None
    for c in ops:
        term = sp.kron(c.op, c.op.conj(), format="csr")
        out = term if out is None else out + term
    return out


def observable_set(model: LindbladModel) -> dict[str, sp.spmatrix]:
    """Named operators recorded along every solve."""
    ops = model.ops
    obs = {"trace": sp.identity(model.dim, format="csr"),
           "cavity": ops.photon_number,
           "excited": ops.projector(Manifold.EXCITED_F1),
           "pop_F1": ops.projector(Manifold.GROUND_F1),
           "pop_F2": ops.projector(Manifold.GROUND_F2)}
    for k, a in enumerate(ops.annihilators):
        obs[f"cavity_mode{k}"] = (a.conj().T @ a).tocsr()
    for c in model.collapse_ops:
        obs[f"rate:{c.channel}"] = (c.op.conj().T @ c.op).tocsr()
    return obs


def _expect_matrix(ops: Sequence[sp.spmatrix]) -> sp.csr_matrix:
    # Tr(O rho) = vec(O^T) . vec(rho) for row-major vec
    rows = [sp.csr_matrix(o.T.reshape(1, -1)) for o in ops]
    return sp.vstack(rows, format="csr")


@dataclass
class Trajectory:
    """Master-equation solve: uniform output grid plus recorded expectation values."""
    times: np.ndarray
    obs: dict[str, np.ndarray]
    final_state: np.ndarray
    params: object
    pulse: object
    rtol: float
    atol: float
    quiet_time: float | None = None
    truncated: bool = False
    n_steps: int = 0
    samples: dict[float, np.ndarray] = field(default_factory=dict)
    heralded: bool = False

    @property
    def kappa(self) -> float:
        return self.params.kappa

    @property
    def gamma(self) -> float:
        return self.params.gamma

    def __getitem__(self, name: str) -> np.ndarray:
        return self.obs[name]


def evolve_master(model: LindbladModel, rho0: np.ndarray | None = None, t_end: float | None = None, *,
                  rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL, dt: float = 2e-9,
                  stop_quiet: bool | None = None, quiet_threshold: float = QUIET_THRESHOLD,
                  horizon_factor: float = HORIZON_FACTOR, sample_every: int = 0,
                  herald: ChannelKind | None = None, trace_budget: float = 1e-6) -> Trajectory:
    """Integrate the Lindblad equation on a uniform output grid of spacing `dt`.

    With `t_end=None` the run stops at the quiet time: the first instant after the
    pulse at which cavity photons plus excited population drop below
    `quiet_threshold`, capped at `horizon_factor` pulse durations (then the
    trajectory is flagged `truncated`).

    `herald` splits the state into "no jump of this kind yet" and "at least one"
    sectors; observables of the second sector are stored with a `heralded:` prefix.
    `sample_every=k` keeps the full density matrix at every k-th grid point.
    """
    if not 0 < rtol <= 1e-4:
        raise ValueError(f"tolerance must be in (0, 1e-4], got {rtol}")
    dim = model.dim
    rho0 = model.initial_density() if rho0 is None else np.asarray(rho0, dtype=complex)
    if rho0.shape != (dim, dim):
        raise ValueError(f"rho0 must be {dim}x{dim}")
    pulse = model.pulse
    if stop_quiet is None:
        stop_quiet = t_end is None
    horizon = t_end if t_end is not None else horizon_factor * pulse.duration
    if not horizon > 0:
        raise ValueError("t_end must be > 0")

    names_ops = observable_set(model)
    names = list(names_ops)
    M = _expect_matrix([names_ops[n] for n in names])
    n2 = dim * dim
    L0, L1 = liouvillian_parts(model)
    if herald is not None:
        jumps = [c for c in model.collapse_ops if c.channel.kind is herald]
        J = _jump_super(jumps)
        zero = sp.csr_matrix((n2, n2))
        L0 = sp.bmat([[L0 - J, zero], [J, L0]], format="csr")
        L1 = sp.bmat([[L1, zero], [zero, L1]], format="csr")
        M = sp.bmat([[M, M], [None, M]], format="csr")
        names = names + ["heralded:" + n for n in names]
        y0 = np.concatenate([rho0.ravel(), np.zeros(n2, complex)])
    else:
        y0 = rho0.ravel().copy()
    # plain names are totals over both sectors; "heralded:" rows hold the second sector only
    i_trace, i_cav, i_exc = names.index("trace"), names.index("cavity"), names.index("excited")

    def total_trace(v):
        return v[i_trace].real

    def excitation(v):
        return v[i_cav].real + v[i_exc].real

    def fun(t, y):
        om = pulse(t)
        out = L0 @ y
        if om:
            out += om * (L1 @ y)
        return out

    n_grid_max = int(math.floor(horizon / dt + 1e-9)) + 1
    times = []
    values = []
    samples = {}
    state = {"next": 0, "steps": 0, "quiet": None}

    def record(t, v, y=None):
        times.append(t)
        values.append(v)
        if sample_every and y is not None and (len(times) - 1) % sample_every == 0:
            samples[t] = y[:n2].reshape(dim, dim).copy()

    record(0.0, M @ y0, y0)
    state["next"] = 1

    def on_step(step: Step):
        state["steps"] += 1
        tr = total_trace(M @ step.y1)
        if abs(tr - total_trace(M @ y0)) > 10 * trace_budget:
            raise IntegrityError(f"trace drift {tr - 1:.3e} at t={step.t1:.6e} s")
        stop = None
        if stop_quiet and step.t1 >= pulse.duration - 1e-15 and excitation(M @ step.y1).real < quiet_threshold:
            stop = _bisect_quiet(step, lambda v: excitation(M @ v), quiet_threshold, max(step.t0, pulse.duration))
        end = stop if stop is not None else step.t1
        while state["next"] < n_grid_max and state["next"] * dt <= end * (1 + 1e-12):
            tg = state["next"] * dt
            y = step(tg)
            record(tg, M @ y, y)
            state["next"] += 1
        if stop is not None:
            state["quiet"] = stop
        return stop

    y = y0
    h = None
    t_stop = horizon
    for a, b in zip(_segments(horizon, pulse.breakpoints), _segments(horizon, pulse.breakpoints)[1:]):
        t_reached, y, h = integrate(fun, a, y, b, rtol=rtol, atol=atol, on_step=on_step, h0=h)
        if state["quiet"] is not None:
            t_stop = state["quiet"]
            break
    if not times or times[-1] < t_stop - 1e-15:
        record(t_stop, M @ y, y)

    truncated = False
    if stop_quiet and state["quiet"] is None:
        truncated = True
        log.warning("excitation still above %.1e at horizon %.3e s; efficiency is a lower bound",
                    quiet_threshold, horizon)
    vals = np.array(values)
    obs = {n: vals[:, i].real.copy() for i, n in enumerate(names)}
    final = y[:n2].reshape(dim, dim)
    if herald is not None:
        final = final + y[n2:].reshape(dim, dim)
    drift = np.max(np.abs(obs["trace"] - 1.0))
    if drift > trace_budget * 10 and abs(np.trace(rho0).real - 1.0) < 1e-12:
        raise IntegrityError(f"trace drift {drift:.3e} exceeds budget")
    return Trajectory(np.array(times), obs, final, model.params, pulse, rtol, atol,
                      quiet_time=state["quiet"], truncated=truncated, n_steps=state["steps"],
                      samples=samples, heralded=herald is not None)


def _bisect_quiet(step: Step, excitation, threshold: float, lo: float) -> float:
    if excitation(step(lo)) < threshold:
        return lo
    hi = step.t1
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if excitation(step(mid)) < threshold:
            hi = mid
        else:
            lo = mid
    return hi


def stop_when_quiet(traj: Trajectory) -> float:
    """Integration horizon of a quiet-stopped solve (raises if it was capped)."""
    if traj.quiet_time is None:
        raise SolverError("trajectory did not reach the quiet threshold (truncated horizon)")
    return traj.quiet_time


# ---------------------------------------------------------------------------
# Quantum jumps


@dataclass
class JumpRecord:
    jumps: list[tuple[float, Channel]]
    final_state: np.ndarray

    def count(self, kind: ChannelKind | None = None, manifold: Manifold | None = None) -> int:
        return sum(1 for _t, c in self.jumps
                   if (kind is None or c.kind is kind) and (manifold is None or c.manifold is manifold))


@dataclass
class Ensemble:
    times: np.ndarray
    records: list[JumpRecord]
    obs: dict[str, np.ndarray]  # name -> (n_times, n_traj)
    params: object
    pulse: object
    seed: int
    rtol: float
    atol: float

    @property
    def n_traj(self) -> int:
        return len(self.records)

    def mean(self, name: str) -> np.ndarray:
        return self.obs[name].mean(axis=1)

    def stderr(self, name: str) -> np.ndarray:
        x = self.obs[name]
        return x.std(axis=1, ddof=1) / math.sqrt(x.shape[1]) if x.shape[1] > 1 else np.zeros(x.shape[0])


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based substream for one trajectory, independent of execution order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


class _JumpSolver:
    def __init__(self, model: LindbladModel, grid: np.ndarray, rtol: float, atol: float,
                 obs_ops: dict[str, sp.spmatrix], jump_tol: float):
        self.model = model
        self.pulse = model.pulse
        self.grid = grid
        self.rtol, self.atol = rtol, atol
        self.jump_tol = jump_tol
        self.c_ops = [c.op for c in model.collapse_ops]
        self.channels = [c.channel for c in model.collapse_ops]
        damp = sum((L.conj().T @ L for L in self.c_ops), sp.csr_matrix((model.dim, model.dim)))
        self.heff0 = (-1j * (model.h_static - 0.5j * damp)).tocsr()
        self.heff1 = (-1j * model.h_drive).tocsr()
        self.obs_names = list(obs_ops)
        self.obs_ops = [obs_ops[n] for n in self.obs_names]

    def fun(self, t, y):
        om = self.pulse(t)
        out = self.heff0 @ y
        if om:
            out += om * (self.heff1 @ y)
        return out

    def expect(self, psi: np.ndarray) -> np.ndarray:
        """(n_obs, n_cols) normalized expectation values."""
        nrm = np.sum(np.abs(psi) ** 2, axis=0)
        return np.array([np.real(np.sum(psi.conj() * (o @ psi), axis=0)) for o in self.obs_ops]) / nrm

    def run(self, Y, cols, t0, t1, out, rngs, thresholds, records):
        """Evolve columns `cols` (states Y, shape (dim, len(cols))) from t0 to t1.

        Grid points in (t0, t1] are written to out[:, grid_index, col].
        """
        grid = self.grid
        g_lo = int(np.searchsorted(grid, t0, side="right"))
        g_hi = int(np.searchsorted(grid, t1 * (1 + 1e-12), side="right"))
        pending = {"next": g_lo}
        cols = np.asarray(cols)
        thr = thresholds[cols]

        def on_step(step: Step):
            y1 = step.y1
            norms = np.sum(np.abs(y1) ** 2, axis=0)
            crossed = np.nonzero(norms < thr)[0]
            # grid points for the whole batch from the interpolant (jumping columns fixed below)
            jt = {}
            for j in crossed:
                jt[j] = self._bisect(step, j, thr[j])
            while pending["next"] < g_hi and grid[pending["next"]] <= step.t1 * (1 + 1e-12):
                gi = pending["next"]
                vals = self.expect(step(grid[gi]))
                for j in crossed:
                    if grid[gi] > jt[j]:
                        vals[:, j] = np.nan
                keep = ~np.isnan(vals[0])
                out[:, gi, cols[keep]] = vals[:, keep]
                pending["next"] += 1
            if len(crossed):
                y1 = y1.copy()
                for j in crossed:
                    col = int(cols[j])
                    psi = step(jt[j], cols=[j])
                    psi = self._jump(psi, jt[j], col, rngs[col], records)
                    thresholds[col] = rngs[col].random()
                    if jt[j] < step.t1:
                        psi = self.run(psi, [col], jt[j], step.t1, out, rngs, thresholds, records)
                    y1[:, j] = psi[:, 0]
                thr[crossed] = thresholds[cols[crossed]]
                step.y1 = y1
                raise _Restart(step.t1, y1, step.t1 - step.t0)
            return None

        t, Y_cur, h = t0, Y, None
        while True:
            try:
                t_end, Y_cur, h = integrate(self.fun, t, Y_cur, t1, rtol=self.rtol, atol=self.atol,
                                            on_step=on_step, h0=h, norm=_column_max_norm)
                return Y_cur
            except _Restart as r:
                t, Y_cur, h = r.t, r.y, r.h
                if t >= t1:
                    return Y_cur

    def _bisect(self, step: Step, j: int, target: float) -> float:
        lo, hi = step.t0, step.t1
        while hi - lo > self.jump_tol:
            mid = 0.5 * (lo + hi)
            if np.sum(np.abs(step(mid, cols=[j])) ** 2) < target:
                hi = mid
            else:
                lo = mid
        return hi

    def _jump(self, psi, t, col, rng, records):
        psi = psi.reshape(-1)
        candidates = [L @ psi for L in self.c_ops]
        weights = np.array([np.real(np.vdot(v, v)) for v in candidates])
        total = weights.sum()
        if total <= 0:
            raise IntegrityError(f"jump requested with zero collapse weight at t={t:.6e}")
        k = int(np.searchsorted(np.cumsum(weights), rng.random() * total, side="right"))
        k = min(k, len(candidates) - 1)
        new = candidates[k] / math.sqrt(weights[k])
        records[col].append((t, self.channels[k]))
        return new.reshape(-1, 1)


class _Restart(Exception):
    def __init__(self, t, y, h):
        self.t, self.y, self.h = t, y, h


def evolve_trajectories(model: LindbladModel, psi0: np.ndarray | None = None, t_end: float | None = None,
                        n_traj: int = 1, seed: int = 0, *, grid: np.ndarray | None = None,
                        rtol: float = 1e-7, atol: float = 1e-9, batch_size: int = 1000,
                        jump_tol: float = 1e-10) -> Ensemble:
    """Monte Carlo wave-function ensemble with norm-threshold jumps.

    Each trajectory draws its thresholds, channel choices and (for imperfect
    preparation) its initial basis state from its own (seed, index) substream.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    pulse = model.pulse
    if t_end is None:
        t_end = 3.0 * pulse.duration
    if grid is None:
        grid = np.linspace(0.0, t_end, 301)
    grid = np.asarray(grid, dtype=float)
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0) or grid[-1] > t_end * (1 + 1e-12):
        raise ValueError("grid must start at 0, increase strictly and end within t_end")
    obs_ops = {k: v for k, v in observable_set(model).items() if not k.startswith("rate:") and k != "trace"}
    solver = _JumpSolver(model, grid, rtol, atol, obs_ops, jump_tol)
    n_obs = len(solver.obs_names)
    out = np.full((n_obs, len(grid), n_traj), np.nan)
    rngs = [trajectory_rng(seed, i) for i in range(n_traj)]
    states = []
    for i in range(n_traj):
        if psi0 is not None:
            states.append(np.asarray(psi0, dtype=complex))
        elif model.params.initial_state.is_pure:
            states.append(model.initial_pure())
        else:
            states.append(model.sample_initial_pure(rngs[i]))
    thresholds = np.array([r.random() for r in rngs])
    records: list[list] = [[] for _ in range(n_traj)]
    finals = [None] * n_traj
    bounds = _segments(t_end, pulse.breakpoints)
    for start in range(0, n_traj, batch_size):
        cols = np.arange(start, min(start + batch_size, n_traj))
        Y = np.stack([states[i] for i in cols], axis=1)
        out[:, 0, cols] = solver.expect(Y)
        for a, b in zip(bounds, bounds[1:]):
            Y = solver.run(Y, cols, a, b, out, rngs, thresholds, records)
        for j, i in enumerate(cols):
            finals[i] = Y[:, j] / np.linalg.norm(Y[:, j])
    if np.isnan(out).any():
        raise IntegrityError("trajectory grid not fully populated")
    obs = {n: out[k] for k, n in enumerate(solver.obs_names)}
    recs = [JumpRecord(records[i], finals[i]) for i in range(n_traj)]
    return Ensemble(grid, recs, obs, model.params, pulse, seed, rtol, atol)

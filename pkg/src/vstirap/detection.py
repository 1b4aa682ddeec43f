"""
Detection chain model: lossy output path, Hanbury Brown-Twiss splitting onto two
counters with dark counts, and the pulsed-source g2(tau) coincidence histogram.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .observables import Wavepacket

DIRECTIONALITY = 0.89
DETECTION_D2 = 0.278
DETECTION_D1 = 0.16


@dataclass(frozen=True)
class DetectionChain:
    directionality: float = DIRECTIONALITY
    path_transmission: float = DETECTION_D2 / DIRECTIONALITY
    quantum_efficiency: float = 1.0
    dark_count_rate: float = 0.0  # Hz per detector
    repetition_rate: float = 10e3  # Hz
    attempt_window: float = 5e-6  # s

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        for name in ("directionality", "path_transmission", "quantum_efficiency"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                out.append(f"{name} must be a probability, got {v}")
        if not self.dark_count_rate >= 0:
            out.append(f"dark_count_rate must be >= 0, got {self.dark_count_rate}")
        if not self.repetition_rate > 0:
            out.append(f"repetition_rate must be > 0, got {self.repetition_rate}")
        if not self.attempt_window > 0 or self.attempt_window * self.repetition_rate > 1:
            out.append("attempt_window must be > 0 and fit inside one repetition period")
        return out

    @classmethod
    def for_line(cls, line: str, **kw) -> "DetectionChain":
        total = DETECTION_D1 if str(line).upper().endswith("D1") else DETECTION_D2
        return cls(directionality=DIRECTIONALITY, path_transmission=total / DIRECTIONALITY, **kw)


def chain_efficiency(chain: DetectionChain) -> float:
    return chain.directionality * chain.path_transmission * chain.quantum_efficiency


@dataclass(frozen=True)
class ClickStream:
    clicks: tuple[np.ndarray, np.ndarray]
    duration: float
    repetition_rate: float
    attempt_window: float
    n_attempts: int

    @property
    def n_clicks(self) -> int:
        return int(sum(len(c) for c in self.clicks))

    def to_text(self, path: str | Path) -> Path:
        path = Path(path)
        rows = ["# detector,timestamp_s"]
        for det, ts in enumerate(self.clicks):
            rows.extend(f"{det},{t:.12e}" for t in ts)
        path.write_text("\n".join(rows) + "\n")
        return path


def _emission_sampler(wp: Wavepacket, window: float):
    t, f = wp.times, np.clip(wp.flux, 0.0, None)
    mask = t <= window
    t, f = t[mask], f[mask]
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(t))])
    if cdf[-1] <= 0:
        raise ValueError("wave packet carries no photons inside the attempt window")
    cdf /= cdf[-1]
    return lambda u: np.interp(u, cdf, t)


def synthesize_clicks(wp: Wavepacket | None, eta: float, chain: DetectionChain, n_attempts: int,
                      seed: int = 0) -> ClickStream:
    """Click timestamps for `n_attempts` photon-generation attempts at the repetition rate."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    if n_attempts < 1:
        raise ValueError("n_attempts must be >= 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x6732])))
    period = 1.0 / chain.repetition_rate
    duration = n_attempts * period
    p = eta * chain_efficiency(chain)
    hit = rng.random(n_attempts) < p
    k = np.nonzero(hit)[0]
    if len(k):
        if wp is None:
            raise ValueError("a wave packet is needed when photons can be detected")
        offsets = _emission_sampler(wp, chain.attempt_window)(rng.random(len(k)))
    else:
        offsets = np.zeros(0)
    times = k * period + offsets
    route = rng.random(len(k)) < 0.5
    streams = []
    for det in (0, 1):
        real = times[route if det == 0 else ~route]
        n_dark = rng.poisson(chain.dark_count_rate * duration)
        dark = rng.random(n_dark) * duration
        streams.append(np.unique(np.concatenate([real, dark])))
    return ClickStream((streams[0], streams[1]), duration, chain.repetition_rate, chain.attempt_window, n_attempts)


def poisson_clicks(rate: float, duration: float, repetition_rate: float, attempt_window: float,
                   seed: int = 0) -> ClickStream:
    """Two independent stationary Poisson streams (coherent-light control)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x9015])))
    streams = tuple(np.sort(rng.random(rng.poisson(rate * duration)) * duration) for _ in range(2))
    n = int(round(duration * repetition_rate))
    return ClickStream(streams, duration, repetition_rate, attempt_window, n)


@dataclass(frozen=True)
class CorrelationHistogram:
    edges: np.ndarray
    counts: np.ndarray
    g2: np.ndarray
    normalization: float
    g2_zero: float
    side_peaks: np.ndarray
    side_peak_stderr: float

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def to_text(self, path: str | Path) -> Path:
        path = Path(path)
        rows = ["# tau_s,counts,g2"]
        rows.extend(f"{t:.9e},{int(c)},{g:.6f}" for t, c, g in zip(self.centers, self.counts, self.g2))
        Path(path).write_text("\n".join(rows) + "\n")
        return path


def _pair_delays(a: np.ndarray, b: np.ndarray, tau_max: float) -> np.ndarray:
    """All t_b - t_a with |t_b - t_a| <= tau_max (both inputs sorted)."""
    lo = np.searchsorted(b, a - tau_max, side="left")
    hi = np.searchsorted(b, a + tau_max, side="right")
    n = hi - lo
    if n.sum() == 0:
        return np.zeros(0)
    idx_a = np.repeat(np.arange(len(a)), n)
    offs = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
    return b[np.repeat(lo, n) + offs] - a[idx_a]


def g2_histogram(streams: ClickStream, bin_width: float, tau_max: float) -> CorrelationHistogram:
    """Cross-correlation histogram between the two detectors.

    Coincidences are integrated over windows of the attempt width centered on
    tau = k / repetition_rate; g2(0) is the central window divided by the mean of
    the side windows (k != 0) inside +-tau_max.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    a, b = streams.clicks
    if len(a) == 0 or len(b) == 0:
        raise ValueError("g2 needs clicks on both detectors")
    period = 1.0 / streams.repetition_rate
    k_max = int(math.floor((tau_max - 0.5 * streams.attempt_window) / period))
    if k_max < 1:
        raise ValueError("tau_max must reach at least one side peak")
    delays = _pair_delays(a, b, tau_max)
    n_bins = int(math.ceil(tau_max / bin_width))
    edges = np.linspace(-n_bins * bin_width, n_bins * bin_width, 2 * n_bins + 1)
    counts, _ = np.histogram(delays, bins=edges)
    half = 0.5 * streams.attempt_window

    def window(k):
        return int(np.count_nonzero(np.abs(delays - k * period) < half))

    side = np.array([window(k) for k in range(-k_max, k_max + 1) if k != 0], dtype=float)
    norm = float(side.mean())
    if norm <= 0:
        raise ValueError("no side-peak coincidences; cannot normalize")
    per_bin = norm * bin_width / streams.attempt_window
    g2 = counts / per_bin
    stderr = float(side.std(ddof=1) / math.sqrt(len(side)) / norm) if len(side) > 1 else math.inf
    return CorrelationHistogram(edges, counts, g2, norm, window(0) / norm, side / norm, stderr)


def calibrate_dark_rate(target_g2: float, eta: float, chain: DetectionChain) -> float:
    """Dark-count rate per detector giving an expected g2(0) of `target_g2`.

    Per attempt with click probability p split evenly, the central window holds
    photon-dark and dark-dark coincidences, side windows additionally hold the
    photon-photon pairs p^2/4.
    """
    p = eta * chain_efficiency(chain)
    w = chain.attempt_window
    period = 1.0 / chain.repetition_rate
    if not 0 < target_g2 < 1 or p <= 0:
        raise ValueError("need 0 < target < 1 and a nonzero detection probability")
    # background per attempt b(r) = p r w + r^2 w period; g2 = b / (p^2/4 + b)
    b = target_g2 * p * p / 4 / (1 - target_g2)
    qa, qb, qc = w * period, p * w, -b
    return (-qb + math.sqrt(qb * qb - 4 * qa * qc)) / (2 * qa)

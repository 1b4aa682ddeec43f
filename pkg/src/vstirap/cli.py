"""Command-line front end: ``vstirap <command> [--config FILE] [--set section.key=value ...]``."""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .detection import DetectionChain, calibrate_dark_rate, g2_histogram, synthesize_clicks
from .integrator import SolverError
from .levels import Line
from .model import ChannelKind, InitialState, PolarizationModes, PulseKind, PulseProfile, SystemParams, mhz
from .observables import efficiency, emission_budget, fwhm, wavepacket
from . import sweeps
from .sweeps import Axis, SolverSettings, SweepSpec

log = logging.getLogger("vstirap")

EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 2, 3, 4
COMMANDS = ("simulate", "sweep", "wavepacket", "g2", "budget", "preset", "validate")
US = 1e-6


class ConfigError(Exception):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def default_config_text() -> str:
    return resources.files("vstirap").joinpath("data/default.ini").read_text()


def _parser() -> configparser.ConfigParser:
    return configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> configparser.ConfigParser:
    """Shipped defaults, then the file, then ``section.key=value`` overrides."""
    cfg = _parser()
    cfg.read_string(default_config_text())
    problems = []
    if path is not None:
        text = Path(path).read_text()
        user = _parser()
        try:
            user.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError([f"cannot parse {path}: {exc}"]) from None
        for sec in user.sections():
            if not cfg.has_section(sec):
                problems.append(f"unknown section [{sec}]")
                continue
            for key, val in user.items(sec, raw=True):
                if key not in cfg[sec]:
                    problems.append(f"{sec}.{key}: unknown key")
                else:
                    cfg[sec][key] = val
    for item in overrides:
        name, sep, val = item.partition("=")
        sec, dot, key = name.strip().partition(".")
        if not sep or not dot:
            problems.append(f"--set expects section.key=value, got {item!r}")
        elif not cfg.has_section(sec) or key not in cfg[sec]:
            problems.append(f"{sec}.{key}: unknown key")
        else:
            cfg[sec][key] = val.strip()
    if problems:
        raise ConfigError(problems)
    return cfg


# ---------------------------------------------------------------------------
# typed views of the configuration

class _Reader:
    """Collects conversion errors as section.key messages instead of failing on the first."""

    def __init__(self, cfg, section):
        self.cfg, self.section, self.problems = cfg, section, []

    def raw(self, key):
        return self.cfg[self.section][key].strip()

    def _get(self, key, conv, what, default=None):
        s = self.raw(key)
        if s == "":
            return default
        try:
            return conv(s)
        except ValueError:
            self.problems.append(f"{self.section}.{key}: expected {what}, got {s!r}")
            return default

    def float(self, key, default=math.nan):
        return self._get(key, float, "a number", default)

    def int(self, key, default=0):
        return self._get(key, int, "an integer", default)

    def bool(self, key):
        s = self.raw(key).lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off", ""):
            return False
        self.problems.append(f"{self.section}.{key}: expected a boolean, got {s!r}")
        return False

    def choice(self, key, enum_cls, default):
        s = self.raw(key)
        for member in enum_cls:
            if s.lower() in (member.value.lower(), member.name.lower()):
                return member
        self.problems.append(f"{self.section}.{key}: expected one of "
                             f"{', '.join(m.value for m in enum_cls)}, got {s!r}")
        return default

    def attribute(self, messages, keys):
        """Prefix validation messages with the config key they mention."""
        for msg in messages:
            hit = next((k for k in keys if msg.startswith(k)), None) or next((k for k in keys if k in msg), None)
            self.problems.append(f"{self.section}.{hit}: {msg}" if hit else f"{self.section}: {msg}")


def _split_violations(exc: ValueError) -> list[str]:
    return [m.strip() for m in str(exc).split(";") if m.strip()]


@dataclass
class RunConfig:
    system: SystemParams | None
    pulse: PulseProfile | None
    sweep: SweepSpec | None
    chain: DetectionChain | None
    detection: dict
    solver: SolverSettings | None
    check_truncation: bool
    out_dir: Path
    prefix: str
    seed: int
    parsed: configparser.ConfigParser

    @classmethod
    def from_parser(cls, cfg: configparser.ConfigParser) -> "RunConfig":
        problems: list[str] = []
        system = _system(cfg, problems)
        pulse = _pulse(cfg, problems)
        spec = _sweep(cfg, system, pulse, problems)
        chain, det = _detection(cfg, system, problems)
        r = _Reader(cfg, "solver")
        rtol, atol, dt = r.float("rtol"), r.float("atol"), r.float("dt")
        check = r.bool("check_truncation")
        solver = None
        if not r.problems:
            if not 0 < rtol <= 1e-4:
                r.problems.append(f"solver.rtol: must be in (0, 1e-4], got {rtol}")
            if not atol > 0:
                r.problems.append(f"solver.atol: must be > 0, got {atol}")
            if not dt > 0:
                r.problems.append(f"solver.dt: must be > 0, got {dt}")
            solver = SolverSettings(rtol=rtol, atol=atol, dt=dt * US)
        problems += r.problems
        r = _Reader(cfg, "seed")
        seed = r.int("value")
        if seed < 0:
            r.problems.append(f"seed.value: must be >= 0, got {seed}")
        problems += r.problems
        out = cfg["output"]
        if problems:
            raise ConfigError(problems)
        return cls(system, pulse, spec, chain, det, solver, check, Path(out["directory"].strip() or "."),
                   out["prefix"].strip() or "vstirap", seed, cfg)


def _system(cfg, problems) -> SystemParams | None:
    r = _Reader(cfg, "system")
    line = r.choice("line", Line, Line.D1)
    g = r.float("g_max", None)
    fields = dict(line=line, g_max=None if g is None else mhz(g), coupling_scale=r.float("coupling_scale"),
                  kappa=mhz(r.float("kappa")), gamma=mhz(r.float("gamma")), delta=mhz(r.float("delta")),
                  two_photon_detuning=mhz(r.float("two_photon_detuning")), n_max=r.int("n_max"),
                  polarization_modes=r.choice("polarization_modes", PolarizationModes, PolarizationModes.TWO_MODES))
    fid = r.float("preparation_fidelity")
    out = None
    if not r.problems:
        try:
            fields["initial_state"] = InitialState(fid)
        except ValueError as exc:
            r.attribute(_split_violations(exc), ["preparation_fidelity"])
        try:
            out = SystemParams(**fields)
        except ValueError as exc:
            r.attribute(_split_violations(exc), list(cfg["system"]))
            out = None
    problems += r.problems
    return out


def _parse_knots(s: str) -> tuple[tuple[float, float], ...]:
    if not s:
        return ()
    pts = []
    for item in s.split(","):
        x, _, y = item.partition(":")
        pts.append((float(x), float(y)))
    return tuple(pts)


def _pulse(cfg, problems) -> PulseProfile | None:
    r = _Reader(cfg, "pulse")
    kind = r.choice("kind", PulseKind, PulseKind.LINEAR_RAMP)
    knots = r._get("knots", _parse_knots, "t:omega pairs", ())
    fields = dict(kind=kind, duration=r.float("duration") * US, omega_max=mhz(r.float("omega_max")),
                  exponent=r.float("exponent", 1.0), knots=knots)
    out = None
    if not r.problems:
        try:
            out = PulseProfile(**fields)
        except ValueError as exc:
            r.attribute(_split_violations(exc), ["omega_max", "duration", "exponent", "knots"])
    problems += r.problems
    return out


_SWEEP_AXES = {"g": Axis.COUPLING_G, "omega": Axis.OMEGA_MAX, "delta": Axis.DELTA,
               "steepness": Axis.PULSE_STEEPNESS}


def _sweep(cfg, system, pulse, problems) -> SweepSpec | None:
    r = _Reader(cfg, "sweep")
    axis = _SWEEP_AXES.get(r.raw("axis").lower())
    if axis is None:
        r.problems.append(f"sweep.axis: expected one of {', '.join(_SWEEP_AXES)}, got {r.raw('axis')!r}")
    start, stop, n = r.float("start"), r.float("stop"), r.int("points")
    spacing = r.raw("spacing").lower()
    if spacing not in ("log", "linear"):
        r.problems.append(f"sweep.spacing: expected log or linear, got {spacing!r}")
    if n < 1:
        r.problems.append(f"sweep.points: must be >= 1, got {n}")
    out = None
    if not r.problems:
        if spacing == "log" and not (start > 0 and stop > 0):
            r.problems.append("sweep.start: log spacing needs positive start and stop")
        elif system is not None and pulse is not None:
            grid = np.geomspace(start, stop, n) if spacing == "log" else np.linspace(start, stop, n)
            try:
                out = SweepSpec(axis, tuple(mhz(v) for v in grid), system, pulse)
            except ValueError as exc:
                r.problems.append(f"sweep.points: {exc}")
    problems += r.problems
    return out


def _detection(cfg, system, problems):
    r = _Reader(cfg, "detection")
    line = system.line if system is not None else Line.D1
    path = r.float("path_transmission", None)
    kw = dict(quantum_efficiency=r.float("quantum_efficiency"), dark_count_rate=r.float("dark_count_rate"),
              repetition_rate=r.float("repetition_rate"), attempt_window=r.float("attempt_window") * US)
    directionality = r.float("directionality")
    det = dict(n_attempts=r.int("n_attempts"), bin_width=r.float("bin_width") * US,
               tau_max=r.float("tau_max") * US, target_g2=r.float("target_g2", None))
    if det["n_attempts"] < 1:
        r.problems.append(f"detection.n_attempts: must be >= 1, got {det['n_attempts']}")
    if not det["bin_width"] > 0:
        r.problems.append("detection.bin_width: must be > 0")
    if det["target_g2"] is not None and not 0 < det["target_g2"] < 1:
        r.problems.append(f"detection.target_g2: must be in (0, 1), got {det['target_g2']}")
    chain = None
    if not r.problems:
        try:
            if path is None:
                chain = DetectionChain.for_line(line.value, **kw)
                if directionality != chain.directionality:
                    total = chain.directionality * chain.path_transmission
                    chain = DetectionChain(directionality, total / directionality, **kw)
            else:
                chain = DetectionChain(directionality, path, **kw)
        except ValueError as exc:
            r.attribute(_split_violations(exc), list(cfg["detection"]))
        except ZeroDivisionError:
            r.problems.append("detection.directionality: must be > 0 when path_transmission is derived")
    problems += r.problems
    return chain, det


def validate(cfg: configparser.ConfigParser) -> list[str]:
    """Every violated invariant, keyed by section.key; no solver code runs."""
    try:
        RunConfig.from_parser(cfg)
    except ConfigError as exc:
        return exc.problems
    return []


# ---------------------------------------------------------------------------
# output

def _header(run: RunConfig, command: str) -> str:
    lines = [f"# vstirap {__version__}", f"# command: {command}"]
    for sec in run.parsed.sections():
        lines.append(f"# [{sec}]")
        lines.extend(f"#   {k} = {v}" for k, v in run.parsed.items(sec, raw=True))
    return "\n".join(lines) + "\n"


def write_table(path: Path, header: str, columns: list[str], rows) -> Path:
    body = [",".join(columns)]
    for row in rows:
        body.append(",".join(f"{v:.9g}" if isinstance(v, float) else str(v) for v in row))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(header + "\n".join(body) + "\n")
    return path


def _out(run: RunConfig, name: str) -> Path:
    return run.out_dir / f"{run.prefix}_{name}.csv"


def _simulate(run: RunConfig, params=None, pulse=None, **kw):
    params = params or run.system
    pulse = pulse or run.pulse
    traj = sweeps.simulate(params, pulse, run.solver, **kw)
    if run.check_truncation:
        ok, diff = sweeps.truncation_converged(params, pulse, run.solver)
        if not ok:
            log.warning("efficiency changes by %.2e between n_max=%d and %d", diff, params.n_max, params.n_max + 1)
    return traj


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(run: RunConfig, args) -> str:
    traj = _simulate(run)
    eff = efficiency(traj)
    rows = zip(traj.times / US, traj["cavity"], traj["excited"], traj["pop_F1"], traj["pop_F2"])
    write_table(_out(run, "simulate"), _header(run, "simulate"),
                ["t_us", "cavity_photons", "excited_population", "pop_F1", "pop_F2"],
                ([float(x) for x in r] for r in rows))
    tag = " (lower bound)" if eff.lower_bound else ""
    return f"eta={eff.value:.6f}{tag}"


def cmd_sweep(run: RunConfig, args) -> str:
    spec = run.sweep
    if spec.axis is Axis.PULSE_STEEPNESS:
        fam = sweeps.wavepacket_family(spec, run.solver, args.jobs)
        rows = ((float(v / mhz(1)), float(e), float(w / US)) for v, e, w in zip(fam.omega_max, fam.eta, fam.fwhm))
        write_table(_out(run, "sweep"), _header(run, "sweep"), ["omega_max_over_2pi_MHz", "eta", "fwhm_us"], rows)
        return f"points={len(fam.eta)} eta_span={np.ptp(fam.eta):.6f}"
    res = sweeps.run_sweep(spec, run.solver, args.jobs)
    col = {Axis.COUPLING_G: "g_over_2pi_MHz", Axis.OMEGA_MAX: "omega_max_over_2pi_MHz",
           Axis.DELTA: "delta_over_2pi_MHz"}[spec.axis]
    rows = ((float(v / mhz(1)), float(e), f or "ok", float(p), float(w))
            for v, e, f, p, w in zip(res.values, res.eta, res.flags, res.excited_peak, res.wall_time))
    write_table(_out(run, "sweep"), _header(run, "sweep"), [col, "eta", "flag", "excited_peak", "wall_s"], rows)
    n_failed = sum(f.startswith("failed") for f in res.flags)
    if n_failed == len(res.flags):
        raise SolverError("every sweep point failed")
    return f"points={len(res.eta)} eta_max={np.nanmax(res.eta):.6f} failed={n_failed}"


def cmd_wavepacket(run: RunConfig, args) -> str:
    traj = _simulate(run)
    wp = wavepacket(traj)
    write_table(_out(run, "wavepacket"), _header(run, "wavepacket"), ["t_us", "flux_per_us"],
                ((float(t / US), float(f * US)) for t, f in zip(wp.times, wp.flux)))
    width = fwhm(wp) if wp.photons > 0 else math.nan
    return f"eta={efficiency(traj).value:.6f} fwhm_us={width / US:.6f} peak_us={wp.peak_time / US:.6f}"


def cmd_budget(run: RunConfig, args) -> str:
    traj = _simulate(run, herald=ChannelKind.FREE_SPACE)
    b = emission_budget(traj)
    rows = [("eta_cavity", b.eta_cavity), ("free_space_F1", b.free_space_F1), ("free_space_F2", b.free_space_F2),
            ("free_to_cavity_ratio", b.free_to_cavity_ratio), ("residual_F2_population", b.residual_F2_population),
            ("recycled_cavity", b.recycled_cavity), ("purcell_fraction", b.purcell_fraction)]
    write_table(_out(run, "budget"), _header(run, "budget"), ["quantity", "value"],
                ((k, math.nan if v is None else float(v)) for k, v in rows))
    return f"eta={b.eta_cavity:.6f} free_to_cavity={b.free_to_cavity_ratio:.6f}"


def cmd_g2(run: RunConfig, args) -> str:
    traj = _simulate(run)
    eta, wp = efficiency(traj).value, wavepacket(traj)
    det, chain = run.detection, run.chain
    if det["target_g2"] is not None:
        try:
            rate = calibrate_dark_rate(det["target_g2"], eta, chain)
        except ValueError as exc:
            raise ConfigError([f"detection.target_g2: {exc}"]) from None
        chain = DetectionChain(chain.directionality, chain.path_transmission, chain.quantum_efficiency,
                               rate, chain.repetition_rate, chain.attempt_window)
    stream = synthesize_clicks(wp if eta > 0 else None, eta, chain, det["n_attempts"], run.seed)
    hist = g2_histogram(stream, det["bin_width"], det["tau_max"])
    header = _header(run, "g2") + f"# dark_count_rate_hz = {chain.dark_count_rate:.9g}\n"
    write_table(_out(run, "g2"), header, ["tau_us", "counts", "g2"],
                ((float(t / US), int(c), float(g)) for t, c, g in zip(hist.centers, hist.counts, hist.g2)))
    stream.to_text(run.out_dir / f"{run.prefix}_clicks.txt")
    return f"g2_zero={hist.g2_zero:.6f} side_stderr={hist.side_peak_stderr:.6f} clicks={stream.n_clicks}"


def cmd_preset(run: RunConfig, args) -> str:
    name = args.name
    base = run.system
    s, jobs = run.solver, args.jobs
    hdr = _header(run, f"preset {name}")
    out = []
    if name == "fig3a":
        for line in Line:
            res = sweeps.sweep_coupling(sweeps.fig3a_spec(line, base=base), s, jobs)
            out.append(write_table(_out(run, f"fig3a_{line.value}"), hdr, ["g_over_2pi_MHz", "eta"],
                                   ((float(v / mhz(1)), float(e)) for v, e in zip(res.values, res.eta))))
    elif name == "fig3b":
        for line in Line:
            traj = sweeps.simulate(base.with_(line=line, g_max=None, coupling_scale=1.0), sweeps.FIG3_PULSE, s)
            wp = wavepacket(traj)
            out.append(write_table(_out(run, f"fig3b_{line.value}"), hdr,
                                   ["t_us", "cavity_photons", "excited_population", "flux_per_us"],
                                   ((float(t / US), float(c), float(e), float(f * US)) for t, c, e, f in
                                    zip(traj.times, traj["cavity"], traj["excited"], wp.flux))))
    elif name == "fig4a-theory":
        for line in Line:
            res = sweeps.sweep_omega(sweeps.fig4a_spec(line, base=base), s, jobs)
            out.append(write_table(_out(run, f"fig4a_{line.value}"), hdr, ["omega_max_over_2pi_MHz", "eta"],
                                   ((float(v / mhz(1)), float(e)) for v, e in zip(res.values, res.eta))))
    elif name == "fig5-theory":
        for line in Line:
            res = sweeps.sweep_delta(sweeps.fig5_spec(line, base=base), s, jobs)
            out.append(write_table(_out(run, f"fig5_{line.value}"), hdr, ["delta_over_2pi_MHz", "eta"],
                                   ((float(v / mhz(1)), float(e)) for v, e in zip(res.values, res.eta))))
    elif name == "fig4b":
        fam = sweeps.wavepacket_family(sweeps.fig4b_spec(base=base), s, jobs)
        out.append(write_table(_out(run, "fig4b_family"), hdr, ["omega_max_over_2pi_MHz", "eta", "fwhm_us"],
                               ((float(v / mhz(1)), float(e), float(w / US))
                                for v, e, w in zip(fam.omega_max, fam.eta, fam.fwhm))))
        for v, wp in zip(fam.omega_max, fam.wavepackets):
            out.append(write_table(_out(run, f"fig4b_{v / mhz(1):g}MHz"), hdr, ["t_us", "flux_per_us"],
                                   ((float(t / US), float(f * US)) for t, f in zip(wp.times, wp.flux))))
    else:
        raise ConfigError([f"unknown preset {name!r}; choose from {', '.join(sweeps.PRESETS)}"])
    return f"preset={name} files={len(out)}"


HANDLERS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "wavepacket": cmd_wavepacket, "g2": cmd_g2,
            "budget": cmd_budget, "preset": cmd_preset}


def build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vstirap", description="Single-photon generation by vSTIRAP in a cavity.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (defaults are built in)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value; repeatable")
    common.add_argument("--seed", type=int, help="random seed (overrides seed.value)")
    common.add_argument("--jobs", type=int, default=1, help="maximum concurrent sweep points")
    common.add_argument("--out-dir", help="output directory (overrides output.directory)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp_ = sub.add_parser(name, parents=[common])
        if name == "preset":
            sp_.add_argument("name", choices=sweeps.PRESETS)
    sub.add_parser("default-config", help="print the built-in configuration")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    if args.command == "default-config":
        sys.stdout.write(default_config_text())
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed.value={args.seed}")
    if args.out_dir is not None:
        overrides.append(f"output.directory={args.out_dir}")
    try:
        cfg = load_config(args.config, overrides)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        for msg in exc.problems:
            print(f"error[config]: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        problems = validate(cfg)
        for msg in problems:
            print(msg)
        print(f"violations={len(problems)}")
        return EXIT_CONFIG if problems else 0
    try:
        run = RunConfig.from_parser(cfg)
        summary = HANDLERS[args.command](run, args)
    except ConfigError as exc:
        for msg in exc.problems:
            print(f"error[config]: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"error[solver]: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())

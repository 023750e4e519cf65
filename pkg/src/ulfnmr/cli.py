"""Command-line front end.

    ulfnmr simulate    --molecule formic_acid --bz 29
    ulfnmr sweep       --molecule formic_acid --bz-grid=-200:200:40
    ulfnmr magic-field --sensor default
    ulfnmr light-shift --powers 3,4,5,6,7,8 --alpha -10

Fields are given in nT, frequencies in Hz, times in s and pump powers in
mW.  Every invocation writes a fresh ``<command>_NNN`` directory under
``--out`` holding its outputs and ``config.json``.  Exit status is 0 on
success, 1 for invalid input and 2 when a solver or fit fails.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .analysis import (
    AnalysisError,
    AnalysisReport,
    SweepSettings,
    analyze,
    eta_point,
    eta_sweep,
    power_sweep,
)
from .pipeline import (
    AcquisitionConfig,
    CouplingConfig,
    PipelineError,
    analytic_spectrum,
    sensor_signal_lines,
    spectrum_fft,
    synthesize_time_signal,
)
from .sensor import SensorError, amplitude_response, magic_field
from .spin_system import EigensolverError, FieldConfig, SpinSystemError, molecule_lines

NANO = 1e-9
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_grid(text: str) -> np.ndarray:
    """``start:stop:n`` (inclusive linspace) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, n = text.split(":")
            n = int(n)
            if n < 1:
                raise UsageError("grid needs at least one point")
            grid = np.linspace(float(start), float(stop), n)
        else:
            grid = np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError as exc:
        raise UsageError(f"cannot parse grid {text!r}: {exc}") from None
    if grid.size == 0:
        raise UsageError("grid is empty")
    if not np.all(np.isfinite(grid)):
        raise UsageError("grid values must be finite")
    if np.any(np.diff(grid) <= 0):
        raise UsageError("grid must be strictly increasing")
    return grid


def _add_common(p: argparse.ArgumentParser, molecule: bool = True) -> None:
    if molecule:
        p.add_argument("--molecule", default="formic_acid", help="molecule TOML file or built-in name")
    p.add_argument("--sensor", default="default", help="sensor TOML file or built-in name")
    p.add_argument("--kappa", type=float, default=1.0, help="y-channel coupling weight")
    p.add_argument("--field-scale", type=float, default=1.0)
    p.add_argument("--t2", type=float, default=3.0, help="coherence time T2 (s)")
    p.add_argument("--duration", type=float, default=None, help="record length (s), default 10*T2")
    p.add_argument("--rate", type=float, default=1000.0, help="sample rate (Hz)")
    p.add_argument("--window", choices=("none", "exponential-match"), default="none")
    p.add_argument("--noise", type=float, default=0.0, help="white-noise rms added to the time signal")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--center", type=float, default=None, help="doublet center (Hz), default from molecule file")
    p.add_argument("--window-hz", type=float, default=None, help="half-width of the fit window (Hz)")
    p.add_argument("--out", default="runs", help="parent directory for run directories")


def _add_sweep(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bz-grid", default="-200:200:40", help="bias fields in nT, start:stop:n or a,b,c")
    p.add_argument("--method", choices=("analytic", "fft"), default="analytic")
    p.add_argument("--dead-zone", type=float, default=3.0, help="exclude splittings below this many linewidths")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--k", type=int, default=4, help="points per local linear fit at a crossing")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ulfnmr", description="Ultralow-field NMR doublet asymmetry simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="spectra and line table at one bias field")
    _add_common(p)
    p.add_argument("--bz", type=float, required=True, help="bias field (nT)")

    p = sub.add_parser("sweep", help="eta versus bias field, cross points and g sign")
    _add_common(p)
    _add_sweep(p)
    p.add_argument("--powers", default=None, help="also run a light-shift fit over these pump powers (mW)")
    p.add_argument("--alpha", type=float, default=None, help="light shift per pump power (nT/mW)")

    p = sub.add_parser("magic-field", help="bias that cancels the light shift, and eta there")
    _add_common(p)
    p.add_argument("--no-eta", action="store_true", help="skip the spectrum at the magic field")

    p = sub.add_parser("light-shift", help="magic field versus pump power and a linear fit")
    _add_common(p)
    _add_sweep(p)
    p.add_argument("--powers", required=True, help="pump powers in mW, comma-separated")
    p.add_argument("--alpha", type=float, required=True, help="light shift per pump power (nT/mW)")
    return parser


# --------------------------------------------------------------------------
# Run setup
# --------------------------------------------------------------------------


def next_run_dir(parent: Path, command: str) -> Path:
    parent.mkdir(parents=True, exist_ok=True)
    n = 1
    while True:
        candidate = parent / f"{command}_{n:03d}"
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            n += 1


def _molecule_dict(mol) -> dict:
    return {
        "name": mol.name,
        "nuclei": [[n.label, n.gyromagnetic_ratio] for n in mol.nuclei],
        "couplings": [[i, j, J] for (i, j), J in sorted(mol.j_couplings.items())],
    }


class _Run:
    """Resolved configuration of one invocation."""

    def __init__(self, args):
        self.args = args
        for name in ("t2", "rate", "field_scale"):
            if not getattr(args, name) > 0:
                raise UsageError(f"--{name.replace('_', '-')} must be positive")
        if args.kappa < 0:
            raise UsageError("--kappa must be non-negative")
        self.sensor = io.load_sensor(args.sensor)
        self.mcfg = io.load_molecule(args.molecule) if hasattr(args, "molecule") else None
        duration = args.duration if args.duration is not None else 10.0 * args.t2
        self.acq = AcquisitionConfig(duration, args.rate, args.t2, args.window, args.noise, args.seed)
        self.coupling = CouplingConfig(args.kappa, args.field_scale)
        self.settings = None
        if self.mcfg is not None:
            center = args.center if args.center is not None else self.mcfg.doublet_center_hz
            if center is None:
                raise UsageError("no doublet center: pass --center or set analysis.doublet_center_hz")
            window = args.window_hz if args.window_hz is not None else self.mcfg.window_hz
            self.settings = SweepSettings(
                center, window, getattr(args, "method", "analytic"), getattr(args, "dead_zone", 3.0)
            )
        self.params = {
            k: v
            for k, v in sorted(vars(args).items())
            if k not in ("molecule", "sensor", "out", "workers") and v is not None
        }

    @property
    def molecule(self):
        return self.mcfg.molecule

    def config(self) -> dict:
        return {
            "command": self.args.command,
            "molecule": None if self.mcfg is None else _molecule_dict(self.molecule),
            "sensor": asdict(self.sensor),
            "coupling": asdict(self.coupling),
            "acquisition": asdict(self.acq),
            "settings": None if self.settings is None else asdict(self.settings),
            "params": self.params,
        }

    def start(self) -> tuple[Path, dict]:
        cfg = self.config()
        digest = io.config_hash(cfg)
        try:
            out = next_run_dir(Path(self.args.out), self.args.command)
        except OSError as exc:
            raise UsageError(f"output directory {self.args.out!r} is not writable ({exc.strerror})") from None
        (out / "config.json").write_text(
            json.dumps({"config_sha256": digest, "config": io.to_jsonable(cfg)}, indent=2, sort_keys=True) + "\n"
        )
        return out, {"config_sha256": digest}


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_simulate(run: _Run) -> dict:
    bz = run.args.bz * NANO
    lines = molecule_lines(run.molecule, FieldConfig.along_z(bz), label=True)
    sig = sensor_signal_lines(lines, run.sensor.with_bias(bz), run.coupling)
    out, header = run.start()
    t, s = synthesize_time_signal(sig, run.acq)
    io.write_time_series(out / "time_series.tsv", t, s, header)
    io.write_spectrum(out / "spectrum_fft.tsv", spectrum_fft(s, run.acq), header)
    hi = float(np.max(sig.frequency_hz)) + 20.0 if len(sig) else 20.0
    grid = np.arange(0.0, hi, min(run.acq.linewidth_hz / 10.0, 1.0 / run.acq.duration))
    io.write_spectrum(out / "spectrum_analytic.tsv", analytic_spectrum(sig, run.acq, grid), header)
    io.write_line_table(out / "lines.tsv", sig, header)
    return {"run_dir": str(out), "lines": len(sig)}


def _sweep_curve(run: _Run, grid_nT: np.ndarray, sensor=None):
    curve = eta_sweep(
        run.molecule, sensor or run.sensor, run.coupling, run.acq, grid_nT * NANO, run.settings, workers=run.args.workers
    )
    if not curve.valid.any():
        raise AnalysisError("no valid points: every bias field failed or fell in the dead zone")
    return curve


def _parse_powers(text: str) -> list[float]:
    try:
        powers = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse --powers: {exc}") from None
    if len(powers) < 3:
        raise UsageError("--powers needs at least three values")
    if any(not math.isfinite(p) or p < 0 for p in powers):
        raise UsageError("--powers must be finite and non-negative")
    return powers


def _power_fit(run: _Run, grid_nT, powers, alpha_nT):
    return power_sweep(
        run.molecule,
        run.sensor,
        run.coupling,
        run.acq,
        powers,
        alpha_nT * NANO,
        grid_nT * NANO,
        run.settings,
        workers=run.args.workers,
        k=run.args.k,
    )


def cmd_sweep(run: _Run) -> dict:
    grid = parse_grid(run.args.bz_grid)
    powers = None
    if run.args.powers is not None:
        if run.args.alpha is None:
            raise UsageError("--powers requires --alpha")
        powers = _parse_powers(run.args.powers)
    curve = _sweep_curve(run, grid)
    report = analyze(curve, k=run.args.k)
    if powers is not None:
        points, fit = _power_fit(run, grid, powers, run.args.alpha)
        report = replace(report, light_shift_fit=fit, power_points=tuple(points))
    out, header = run.start()
    io.write_eta_curve(out / "eta_curve.tsv", curve, header)
    io.write_report(out / "report.json", report, header)
    return {"run_dir": str(out), **report.to_dict()}


def cmd_light_shift(run: _Run) -> dict:
    grid = parse_grid(run.args.bz_grid)
    points, fit = _power_fit(run, grid, _parse_powers(run.args.powers), run.args.alpha)
    report = AnalysisReport((), (), None, 0, (0, 0, 0), (0, 0, 0), fit, tuple(points), "light-shift power sweep")
    out, header = run.start()
    io.write_report(out / "report.json", report, header)
    return {"run_dir": str(out), "alpha_nT_per_mW": fit.alpha / NANO, **report.to_dict()}


def cmd_magic_field(run: _Run) -> dict:
    b_magic = magic_field(run.sensor)
    result = {"magic_field_nT": b_magic / NANO, "light_shift_nT": run.sensor.light_shift / NANO}
    grid = np.linspace(0.0, 1000.0, 101)
    result["max_x_response"] = float(np.max(amplitude_response(run.sensor.with_bias(b_magic), "x", grid)))
    if not run.args.no_eta:
        sample = eta_point(run.molecule, run.sensor, run.coupling, run.acq, b_magic, run.settings)
        result["eta_at_magic_field"] = sample.eta if sample.valid else None
        result["eta_note"] = sample.reason
    out, header = run.start()
    (out / "magic_field.json").write_text(
        json.dumps({"provenance": header, "result": result}, indent=2, sort_keys=True) + "\n"
    )
    return {"run_dir": str(out), **result}


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "magic-field": cmd_magic_field,
    "light-shift": cmd_light_shift,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            run = _Run(args)
        summary = COMMANDS[args.command](run)
    except (UsageError, io.ConfigError, PipelineError, SensorError, SpinSystemError) as exc:
        print(f"ulfnmr: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (AnalysisError, EigensolverError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"ulfnmr: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(io.to_jsonable(summary), indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

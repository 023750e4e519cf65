"""Configuration files and result serialization.

Molecule and sensor definitions are TOML.  Results are tab-delimited
text (spectra, time series, line tables, eta curves) or JSON (analysis
reports).  Each output starts with ``#`` header lines carrying the
sha256 of the run configuration; numbers are written with ``%.17g`` so
every file reparses to the exact values that produced it.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .analysis import AnalysisReport, EtaCurve, EtaSample
from .pipeline import SignalLines, Spectrum
from .sensor import GAMMA_ELECTRON, SensorModel
from .spin_system import MoleculeSpec, Nucleus, SpinSystemError

NANO = 1e-9
PathLike = Union[str, Path]


class ConfigError(ValueError):
    """Invalid configuration, located by file and field."""

    def __init__(self, file: Any, field: str, reason: str):
        super().__init__(f"{file}: {field}: {reason}")
        self.file = str(file)
        self.field = field
        self.reason = reason


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------


def builtin_path(kind: str, name: str) -> Path:
    """Path of a shipped ``molecules`` or ``sensors`` file."""
    return Path(str(resources.files("ulfnmr") / "data" / kind / f"{name}.toml"))


def builtin_names(kind: str) -> list[str]:
    root = resources.files("ulfnmr") / "data" / kind
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def resolve_config_path(source: PathLike, kind: str) -> Path:
    """A file path as given, or the name of a shipped file."""
    p = Path(source)
    if p.is_file():
        return p
    if p.suffix == "" and str(source) in builtin_names(kind):
        return builtin_path(kind, str(source))
    raise ConfigError(source, "-", f"no such file or built-in {kind[:-1]}")


def _read_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(path, "-", f"cannot read file ({exc.strerror})") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(path, "-", f"invalid TOML: {exc}") from None


def _number(path, fld: str, value, *, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, fld, f"expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(path, fld, "must be finite")
    if positive and value <= 0:
        raise ConfigError(path, fld, "must be positive")
    return value


@dataclass(frozen=True)
class MoleculeConfig:
    molecule: MoleculeSpec
    doublet_center_hz: Optional[float] = None
    window_hz: float = 15.0
    placeholders: tuple[tuple[int, int], ...] = ()
    source: str = ""


def parse_molecule(data: dict, path: Any = "<molecule>") -> MoleculeConfig:
    nuclei_tab = data.get("nuclei")
    if not nuclei_tab:
        raise ConfigError(path, "nuclei", "missing section [[nuclei]]")
    if not isinstance(nuclei_tab, list):
        raise ConfigError(path, "nuclei", "must be an array of tables")
    nuclei = []
    for i, entry in enumerate(nuclei_tab):
        fld = f"nuclei[{i}]"
        if not isinstance(entry, dict) or "label" not in entry:
            raise ConfigError(path, f"{fld}.label", "missing isotope label")
        gamma = None
        if "gyromagnetic_ratio" in entry:
            gamma = _number(path, f"{fld}.gyromagnetic_ratio", entry["gyromagnetic_ratio"])
        elif "gamma_mhz_per_t" in entry:
            gamma = 2 * math.pi * 1e6 * _number(path, f"{fld}.gamma_mhz_per_t", entry["gamma_mhz_per_t"])
        try:
            nuclei.append(Nucleus.from_isotope(str(entry["label"]), gamma))
        except SpinSystemError as exc:
            raise ConfigError(path, fld, str(exc)) from None

    couplings, placeholders = {}, []
    for c, entry in enumerate(data.get("couplings", [])):
        fld = f"couplings[{c}]"
        for key in ("i", "j", "J_hz"):
            if key not in entry:
                raise ConfigError(path, f"{fld}.{key}", "missing")
        i, j = entry["i"], entry["j"]
        if not (isinstance(i, int) and isinstance(j, int)):
            raise ConfigError(path, fld, "indices i, j must be integers")
        couplings[(i, j)] = _number(path, f"{fld}.J_hz", entry["J_hz"])
        if entry.get("placeholder", False):
            placeholders.append((min(i, j), max(i, j)))
    try:
        molecule = MoleculeSpec(tuple(nuclei), couplings, str(data.get("name", "")))
    except SpinSystemError as exc:
        raise ConfigError(path, "couplings", str(exc)) from None
    if placeholders:
        warnings.warn(f"{path}: couplings {placeholders} are placeholder values, supply measured J", UserWarning)

    analysis = data.get("analysis", {})
    center = analysis.get("doublet_center_hz")
    return MoleculeConfig(
        molecule,
        None if center is None else _number(path, "analysis.doublet_center_hz", center, positive=True),
        _number(path, "analysis.window_hz", analysis.get("window_hz", 15.0), positive=True),
        tuple(placeholders),
        str(path),
    )


def load_molecule(source: PathLike) -> MoleculeConfig:
    """Molecule from a TOML file path or a built-in name such as ``formic_acid``."""
    path = resolve_config_path(source, "molecules")
    return parse_molecule(_read_toml(path), path)


def parse_sensor(data: dict, path: Any = "<sensor>") -> SensorModel:
    if "sensor" not in data:
        raise ConfigError(path, "sensor", "missing section [sensor]")
    s = data["sensor"]
    if "gamma_eff" in s:
        gamma_eff = _number(path, "sensor.gamma_eff", s["gamma_eff"], positive=True)
    else:
        q = _number(path, "sensor.slowing_factor", s.get("slowing_factor", 6.0), positive=True)
        gamma_e = _number(path, "sensor.gamma_e", s.get("gamma_e", GAMMA_ELECTRON), positive=True)
        gamma_eff = gamma_e / q
    if "light_shift_nT" in s and ("alpha_nT_per_mW" in s or "pump_power_mW" in s):
        raise ConfigError(path, "sensor.light_shift_nT", "give either light_shift_nT or alpha_nT_per_mW with pump_power_mW")
    if "alpha_nT_per_mW" in s or "pump_power_mW" in s:
        for key in ("alpha_nT_per_mW", "pump_power_mW"):
            if key not in s:
                raise ConfigError(path, f"sensor.{key}", "missing (alpha and pump power go together)")
        light_shift = _number(path, "sensor.alpha_nT_per_mW", s["alpha_nT_per_mW"]) * _number(
            path, "sensor.pump_power_mW", s["pump_power_mW"]
        )
    else:
        light_shift = _number(path, "sensor.light_shift_nT", s.get("light_shift_nT", 0.0))
    P0 = _number(path, "sensor.P0", s.get("P0", 0.5), positive=True)
    if P0 > 1:
        raise ConfigError(path, "sensor.P0", "must not exceed 1")
    return SensorModel(
        gamma_eff=gamma_eff,
        Gamma=2 * math.pi * _number(path, "sensor.Gamma_hz", s.get("Gamma_hz", 50.0), positive=True),
        P0=P0,
        light_shift=light_shift * NANO,
        bias_Bz=_number(path, "sensor.bias_nT", s.get("bias_nT", 0.0)) * NANO,
    )


def load_sensor(source: PathLike = "default") -> SensorModel:
    path = resolve_config_path(source, "sensors")
    return parse_sensor(_read_toml(path), path)


# --------------------------------------------------------------------------
# Provenance
# --------------------------------------------------------------------------


def to_jsonable(obj):
    if isinstance(obj, dict) or hasattr(obj, "items"):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config) -> str:
    """sha256 of the canonical JSON form of a configuration mapping."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


# --------------------------------------------------------------------------
# Delimited text
# --------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, str):
        return x
    return "%.17g" % float(x)


def _write_table(path: PathLike, kind: str, columns: list[str], rows, header: Optional[dict] = None) -> Path:
    path = Path(path)
    lines = [f"# ulfnmr {kind}"]
    for key, value in sorted((header or {}).items()):
        lines.append(f"# {key}: {value}")
    lines.append("\t".join(columns))
    for row in rows:
        lines.append("\t".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _read_table(path: PathLike, kind: str) -> tuple[dict, list[str], list[list[str]]]:
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text or text[0] != f"# ulfnmr {kind}":
        raise ConfigError(path, "header", f"not a {kind} file")
    header, i = {}, 1
    while i < len(text) and text[i].startswith("#"):
        key, _, value = text[i][2:].partition(": ")
        header[key] = value
        i += 1
    if i >= len(text):
        raise ConfigError(path, "columns", "missing column header")
    columns = text[i].split("\t")
    rows = [line.split("\t") for line in text[i + 1 :] if line]
    for r, row in enumerate(rows):
        if len(row) != len(columns):
            raise ConfigError(path, f"row {r}", f"expected {len(columns)} columns, got {len(row)}")
    return header, columns, rows


def write_spectrum(path: PathLike, spectrum: Spectrum, header: Optional[dict] = None) -> Path:
    meta = {f"meta.{k}": _fmt(v) for k, v in spectrum.metadata.items()}
    meta["spectrum_kind"] = spectrum.kind
    rows = zip(spectrum.grid, spectrum.values.real, spectrum.values.imag, np.abs(spectrum.values))
    return _write_table(path, "spectrum", ["frequency_hz", "real", "imag", "magnitude"], rows, {**meta, **(header or {})})


def read_spectrum(path: PathLike) -> tuple[Spectrum, dict]:
    header, _, rows = _read_table(path, "spectrum")
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    meta = {k[5:]: float(v) for k, v in header.items() if k.startswith("meta.")}
    spec = Spectrum(arr[:, 0], arr[:, 1] + 1j * arr[:, 2], header.get("spectrum_kind", "analytic"), meta)
    return spec, header


def write_time_series(path: PathLike, t, values, header: Optional[dict] = None) -> Path:
    return _write_table(path, "time_series", ["t", "value"], zip(t, values), header)


def read_time_series(path: PathLike):
    header, _, rows = _read_table(path, "time_series")
    arr = np.array(rows, dtype=float).reshape(-1, 2)
    return arr[:, 0], arr[:, 1], header


def write_line_table(path: PathLike, lines: SignalLines, header: Optional[dict] = None) -> Path:
    def split(label: str):
        upper, _, lower = label.partition("<->")
        return upper or "-", lower or "-"

    rows = (
        (f, S.real, S.imag, abs(S), *split(lab))
        for f, S, lab in zip(lines.frequency_hz, lines.amplitude, lines.labels)
    )
    cols = ["frequency_hz", "S_real", "S_imag", "S_abs", "upper", "lower"]
    return _write_table(path, "line_table", cols, rows, header)


def read_line_table(path: PathLike) -> tuple[SignalLines, dict]:
    header, _, rows = _read_table(path, "line_table")
    f = np.array([float(r[0]) for r in rows])
    S = np.array([complex(float(r[1]), float(r[2])) for r in rows])
    labels = tuple(f"{r[4]}<->{r[5]}" for r in rows)
    return SignalLines(f, S, labels), header


def write_eta_curve(path: PathLike, curve: EtaCurve, header: Optional[dict] = None) -> Path:
    rows = (
        (s.bz / NANO, s.eta, s.amp1, s.amp2, s.valid, s.raw_eta, s.reason.replace("\t", " ") or "-")
        for s in curve.samples
    )
    cols = ["Bz_nT", "eta", "amp1", "amp2", "valid", "raw_eta", "reason"]
    return _write_table(path, "eta_curve", cols, rows, header)


def read_eta_curve(path: PathLike) -> tuple[EtaCurve, dict]:
    header, _, rows = _read_table(path, "eta_curve")
    samples = tuple(
        EtaSample(
            bz=float(r[0]) * NANO,
            eta=float(r[1]),
            amp1=float(r[2]),
            amp2=float(r[3]),
            raw_eta=float(r[5]),
            valid=r[4] == "1",
            reason="" if r[6] == "-" else r[6],
        )
        for r in rows
    )
    return EtaCurve(samples), header


def write_report(path: PathLike, report: AnalysisReport, header: Optional[dict] = None) -> Path:
    doc = {"provenance": dict(header or {}), "report": report.to_dict()}
    path = Path(path)
    path.write_text(json.dumps(to_jsonable(doc), indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    return path


def read_report(path: PathLike) -> tuple[AnalysisReport, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return AnalysisReport.from_dict(doc["report"]), doc.get("provenance", {})

"""Doublet asymmetry analysis.

Peak magnitudes come from least-squares fits of complex Lorentzians;
``eta = (Amp1 - Amp2) / (Amp1 + Amp2)`` with Amp1 the lower-frequency
peak.  Sweeping eta over the bias field gives the curve whose zero
crossings locate the magic field and whose region-wise signs reveal the
sign of the manifold's Lande g factor.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import find_peaks

from .pipeline import (
    AcquisitionConfig,
    CouplingConfig,
    Spectrum,
    analytic_spectrum,
    lorentzian,
    sensor_signal_lines,
    spectrum_fft,
    synthesize_time_signal,
)
from .sensor import SensorModel
from .spin_system import FieldConfig, MoleculeSpec, PolarizationConfig, molecule_lines

NANO = 1e-9


class AnalysisError(RuntimeError):
    pass


class UnresolvedDoubletError(AnalysisError):
    pass


class FitError(AnalysisError):
    def __init__(self, message: str, residual_norm: float = float("nan")):
        super().__init__(f"{message} (relative residual {residual_norm:.3g})")
        self.residual_norm = residual_norm


class NoCrossingError(AnalysisError):
    pass


class InsufficientCoverageError(AnalysisError):
    pass


@dataclass(frozen=True)
class PeakFit:
    center_hz: float
    magnitude: float
    width_hz: float
    residual_norm: float
    amplitude: complex = 0j
    raw_peak: float = float("nan")


def _fit_width_guess(spectrum: Spectrum, nu, mag) -> float:
    width = spectrum.metadata.get("linewidth_hz")
    if width:
        return float(width)
    # half-maximum estimate around the tallest point
    i = int(np.argmax(mag))
    half = mag[i] / 2
    lo, hi = i, i
    while lo > 0 and mag[lo] > half:
        lo -= 1
    while hi < len(mag) - 1 and mag[hi] > half:
        hi += 1
    return max(float(nu[hi] - nu[lo]), 2 * float(np.median(np.diff(nu))))


def fit_doublet(
    spectrum: Spectrum,
    center_hz: float,
    search_window_hz: float,
    *,
    min_separation_widths: float = 2.0,
) -> tuple[PeakFit, PeakFit]:
    """Fit two complex Lorentzians plus a constant to a spectral window.

    Returns (lower, upper) peak fits.  ``magnitude`` is the fitted
    Lorentzian magnitude at its own center.
    """
    mask = np.abs(spectrum.grid - center_hz) <= search_window_hz
    nu = spectrum.grid[mask]
    data = spectrum.values[mask]
    if nu.size < 8:
        raise UnresolvedDoubletError("too few spectral points in the search window")
    scale = float(np.max(np.abs(data)))
    if scale == 0.0:
        raise UnresolvedDoubletError("spectrum is zero in the search window")
    y = data / scale
    mag = np.abs(y)
    width = _fit_width_guess(spectrum, nu, mag)

    idx, props = find_peaks(mag, height=0.0)
    if len(idx) < 2:
        raise UnresolvedDoubletError("fewer than two maxima in the search window")
    top = np.sort(idx[np.argsort(props["peak_heights"])[-2:]])
    guess_centers = nu[top]
    if guess_centers[1] - guess_centers[0] <= min_separation_widths * width:
        raise UnresolvedDoubletError(
            f"peaks {guess_centers[1] - guess_centers[0]:.4g} Hz apart, linewidth {width:.4g} Hz"
        )

    def design(p):
        c1, c2, lw1, lw2 = p
        cols = [
            np.ones_like(nu, dtype=complex),
            lorentzian(nu, c1, math.pi * math.exp(lw1)),
            lorentzian(nu, c2, math.pi * math.exp(lw2)),
        ]
        return np.stack(cols, axis=1)

    def solve(p):
        A = design(p)
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        return coef, y - A @ coef

    def residual(p):
        r = solve(p)[1]
        return np.concatenate([r.real, r.imag])

    p0 = np.array([guess_centers[0], guess_centers[1], math.log(width), math.log(width)])
    try:
        res = least_squares(residual, p0, method="lm", xtol=1e-13, ftol=1e-13, gtol=1e-13, max_nfev=4000)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise FitError(f"doublet fit failed: {exc}") from exc
    coef, r = solve(res.x)
    rel = float(np.linalg.norm(r) / np.linalg.norm(y))
    c1, c2, lw1, lw2 = res.x
    if not res.success or not np.all(np.isfinite(res.x)):
        raise FitError(f"doublet fit did not converge: {res.message}", rel)
    if not (abs(c1 - center_hz) <= search_window_hz and abs(c2 - center_hz) <= search_window_hz):
        raise FitError("fitted peak left the search window", rel)

    fits = []
    for center, logw, amp in ((c1, lw1, coef[1]), (c2, lw2, coef[2])):
        w = math.exp(logw)
        near = np.abs(nu - center) <= max(w, float(np.median(np.diff(nu))))
        raw = float(np.max(np.abs(data[near]))) if np.any(near) else float("nan")
        fits.append(
            PeakFit(
                center_hz=float(center),
                magnitude=float(abs(amp) * scale / (math.pi * w)),
                width_hz=w,
                residual_norm=rel,
                amplitude=complex(amp * scale),
                raw_peak=raw,
            )
        )
    fits.sort(key=lambda f: f.center_hz)
    return fits[0], fits[1]


def asymmetry_ratio(fit1, fit2) -> float:
    """eta = (Amp1 - Amp2) / (Amp1 + Amp2); accepts PeakFits or magnitudes."""
    a1 = fit1.magnitude if isinstance(fit1, PeakFit) else float(fit1)
    a2 = fit2.magnitude if isinstance(fit2, PeakFit) else float(fit2)
    if a1 < 0 or a2 < 0:
        raise ValueError("peak magnitudes must be non-negative")
    if a1 + a2 == 0:
        raise ValueError("both peak magnitudes are zero")
    return (a1 - a2) / (a1 + a2)


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EtaSample:
    bz: float
    eta: float
    amp1: float = float("nan")
    amp2: float = float("nan")
    raw_eta: float = float("nan")
    valid: bool = True
    reason: str = ""
    fits: Optional[tuple[PeakFit, PeakFit]] = field(default=None, compare=False)


@dataclass(frozen=True)
class EtaCurve:
    samples: tuple[EtaSample, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    @property
    def fields(self) -> np.ndarray:
        return np.array([s.bz for s in self.samples])

    @property
    def etas(self) -> np.ndarray:
        return np.array([s.eta for s in self.samples])

    @property
    def valid(self) -> np.ndarray:
        return np.array([s.valid for s in self.samples], dtype=bool)

    def valid_points(self) -> tuple[np.ndarray, np.ndarray]:
        ok = self.valid
        B, e = self.fields[ok], self.etas[ok]
        order = np.argsort(B, kind="stable")
        return B[order], e[order]


@dataclass(frozen=True)
class SweepSettings:
    center_hz: float
    window_hz: float = 15.0
    method: str = "analytic"
    dead_zone_linewidths: float = 3.0
    magnetization_scale: float = 1.0

    def __post_init__(self):
        if self.method not in ("analytic", "fft"):
            raise ValueError(f"unknown spectrum method {self.method!r}")
        if not self.window_hz > 0:
            raise ValueError("window_hz must be positive")


def _point_seed(seed: Optional[int], index: int) -> Optional[int]:
    if seed is None:
        return None
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def eta_point(
    molecule: MoleculeSpec,
    sensor: SensorModel,
    coupling: CouplingConfig,
    acq: AcquisitionConfig,
    bz: float,
    settings: SweepSettings,
    pol: PolarizationConfig = PolarizationConfig(),
) -> EtaSample:
    """Run the full pipeline at one bias field and extract eta."""
    try:
        lines = molecule_lines(molecule, FieldConfig.along_z(bz), pol, scale=settings.magnetization_scale)
        sig = sensor_signal_lines(lines, sensor.with_bias(bz), coupling)
        lo, hi = settings.center_hz - settings.window_hz, settings.center_hz + settings.window_hz
        local = sig.select(lo, hi)
        if len(local) < 2:
            return EtaSample(bz, float("nan"), valid=False, reason="fewer than two lines in window")
        strongest = np.sort(local.frequency_hz[np.argsort(np.abs(local.amplitude))[-2:]])
        splitting = float(strongest[1] - strongest[0])
        if splitting < settings.dead_zone_linewidths * acq.linewidth_hz:
            return EtaSample(bz, float("nan"), valid=False, reason=f"dead zone (splitting {splitting:.4g} Hz)")
        # fit only the doublet plus generous Lorentzian tails
        half = min(settings.window_hz, float(np.max(np.abs(strongest - settings.center_hz))) + 50 * acq.linewidth_hz)
        if settings.method == "analytic":
            step = acq.linewidth_hz / 10.0
            grid = np.arange(settings.center_hz - half, settings.center_hz + half + step / 2, step)
            spectrum = analytic_spectrum(sig, acq, grid)
        else:
            _, s = synthesize_time_signal(sig, acq)
            spectrum = spectrum_fft(s, acq)
        f1, f2 = fit_doublet(spectrum, settings.center_hz, half)
        eta = asymmetry_ratio(f1, f2)
        raw = asymmetry_ratio(f1.raw_peak, f2.raw_peak) if np.isfinite(f1.raw_peak + f2.raw_peak) else float("nan")
        return EtaSample(bz, eta, f1.magnitude, f2.magnitude, raw, True, "", (f1, f2))
    except (AnalysisError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return EtaSample(bz, float("nan"), valid=False, reason=f"{type(exc).__name__}: {exc}")


def _eta_point_star(args):
    return eta_point(*args)


def eta_sweep(
    molecule: MoleculeSpec,
    sensor: SensorModel,
    coupling: CouplingConfig,
    acq: AcquisitionConfig,
    bz_grid: Sequence[float],
    settings: SweepSettings,
    pol: PolarizationConfig = PolarizationConfig(),
    workers: Optional[int] = None,
) -> EtaCurve:
    """eta at every bias field of ``bz_grid`` (tesla).

    ``sensor`` is a template: its bias is replaced by each grid value.
    Points are independent; with ``workers > 1`` they run in a process
    pool and are reassembled in grid order, so the result does not depend
    on scheduling.  Failed points are kept and marked invalid.
    """
    grid = [float(b) for b in bz_grid]
    jobs = [
        (molecule, sensor, coupling, replace(acq, seed=_point_seed(acq.seed, i)), bz, settings, pol)
        for i, bz in enumerate(grid)
    ]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_eta_point_star, jobs))
    else:
        samples = [eta_point(*job) for job in jobs]
    meta = {
        "molecule": molecule.name,
        "sensor": asdict(sensor),
        "coupling": asdict(coupling),
        "acquisition": asdict(acq),
        "settings": asdict(settings),
        "polarization": asdict(pol),
    }
    return EtaCurve(tuple(samples), meta)


# --------------------------------------------------------------------------
# Cross points, g sign, light shift
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossPoint:
    field: float
    trivial: bool = False
    slope: float = float("nan")  # d eta / dB in 1/T


def find_cross_points(curve: EtaCurve, k: int = 4) -> list[CrossPoint]:
    """Zero crossings of eta from local linear fits.

    Every sign change between neighbouring valid samples is refined by a
    straight-line fit through the ``k`` valid samples nearest the bracket.
    A crossing whose bracket straddles B = 0 is flagged trivial: there the
    doublet collapses into the single zero-field line.
    """
    if k < 2:
        raise ValueError("need at least two points per linear fit")
    B, e = curve.valid_points()
    if len(B) < 2:
        raise NoCrossingError("fewer than two valid samples")
    x = B / NANO
    out = []
    for i in range(len(B) - 1):
        if e[i] == 0.0:
            out.append(CrossPoint(float(B[i]), bool(abs(B[i]) == 0.0)))
            continue
        if np.sign(e[i]) * np.sign(e[i + 1]) >= 0:
            continue
        mid = 0.5 * (x[i] + x[i + 1])
        nearest = np.sort(np.argsort(np.abs(x - mid), kind="stable")[: min(k, len(x))])
        slope, intercept = np.polyfit(x[nearest], e[nearest], 1)
        if slope == 0.0:
            continue
        root = -intercept / slope
        trivial = bool(B[i] < 0.0 < B[i + 1] or B[i + 1] < 0.0 < B[i])
        out.append(CrossPoint(float(root * NANO), trivial, float(slope / NANO)))
    if e[-1] == 0.0:
        out.append(CrossPoint(float(B[-1]), bool(B[-1] == 0.0)))
    if not out:
        raise NoCrossingError("eta does not change sign on this grid")
    out.sort(key=lambda c: c.field)
    return out


@dataclass(frozen=True)
class GSignResult:
    sign: int
    region_signs: tuple[int, int, int] = (0, 0, 0)
    region_counts: tuple[int, int, int] = (0, 0, 0)
    cross_points: tuple[float, ...] = ()
    reason: str = ""

    @property
    def label(self) -> str:
        return {1: "+1", -1: "-1"}.get(self.sign, "undetermined")


def _region_sign(values: np.ndarray, agreement: float) -> int:
    if len(values) == 0:
        return 0
    if np.mean(values > 0) >= agreement:
        return 1
    if np.mean(values < 0) >= agreement:
        return -1
    return 0


def infer_g_sign(
    curve: EtaCurve,
    *,
    k: int = 4,
    agreement: float = 0.8,
    min_points: int = 3,
    strict: bool = False,
) -> GSignResult:
    """Sign of the Lande g factor from the region-wise asymmetry pattern.

    Regions I/II/III are delimited by the two cross points.  Negative
    asymmetry in I and III with positive in II means g > 0; the mirrored
    pattern means g < 0; anything else is undetermined (0).  A region's
    sign needs ``agreement`` of its valid points to agree.  When coverage
    is insufficient the result is undetermined, or an
    InsufficientCoverageError with ``strict=True``.
    """

    def undetermined(reason, **kw):
        if strict:
            raise InsufficientCoverageError(reason)
        return GSignResult(0, reason=reason, **kw)

    try:
        cps = find_cross_points(curve, k)
    except NoCrossingError as exc:
        return undetermined(f"no cross points: {exc}")
    fields = tuple(c.field for c in cps)
    if len(cps) != 2:
        return undetermined(f"expected two cross points, found {len(cps)}", cross_points=fields)
    lo, hi = fields
    B, e = curve.valid_points()
    regions = (e[B < lo], e[(B > lo) & (B < hi)], e[B > hi])
    counts = tuple(len(r) for r in regions)
    if min(counts) < min_points:
        return undetermined(f"region point counts {counts} below {min_points}", region_counts=counts, cross_points=fields)
    signs = tuple(_region_sign(r, agreement) for r in regions)
    if signs == (-1, 1, -1):
        sign, reason = 1, ""
    elif signs == (1, -1, 1):
        sign, reason = -1, ""
    else:
        sign, reason = 0, f"inconsistent region signs {signs}"
    return GSignResult(sign, signs, counts, fields, reason)


@dataclass(frozen=True)
class LightShiftFit:
    """Least-squares line magic_field = slope * power + intercept."""

    slope: float
    intercept: float
    residual: float

    @property
    def alpha(self) -> float:
        """Light shift per unit pump power (B_magic = -L)."""
        return -self.slope

    def light_shift(self, power: float) -> float:
        return -(self.slope * power + self.intercept)


def light_shift_from_power(points: Sequence[tuple[float, float]]) -> LightShiftFit:
    """Fit magic field versus pump power; ``points`` are (power, B_magic)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("need at least three (power, magic_field) points")
    P, B = pts[:, 0], pts[:, 1]
    if np.ptp(P) == 0:
        raise ValueError("degenerate abscissae: all pump powers are equal")
    A = np.stack([P, np.ones_like(P)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, B, rcond=None)
    resid = B - (slope * P + intercept)
    return LightShiftFit(float(slope), float(intercept), float(np.sqrt(np.mean(resid**2))))


def magic_field_from_curve(curve: EtaCurve, k: int = 4) -> float:
    """The single nontrivial cross point of a sweep."""
    nontrivial = [c.field for c in find_cross_points(curve, k) if not c.trivial]
    if len(nontrivial) != 1:
        raise NoCrossingError(f"expected one nontrivial cross point, found {len(nontrivial)}")
    return nontrivial[0]


def power_sweep(
    molecule: MoleculeSpec,
    sensor: SensorModel,
    coupling: CouplingConfig,
    acq: AcquisitionConfig,
    powers: Sequence[float],
    alpha: float,
    bz_grid: Sequence[float],
    settings: SweepSettings,
    pol: PolarizationConfig = PolarizationConfig(),
    workers: Optional[int] = None,
    k: int = 4,
) -> tuple[list[tuple[float, float]], LightShiftFit]:
    """Magic field per pump power (light shift alpha * P), then a linear fit."""
    points = []
    for P in powers:
        curve = eta_sweep(molecule, sensor.with_light_shift(alpha * P), coupling, acq, bz_grid, settings, pol, workers)
        points.append((float(P), magic_field_from_curve(curve, k)))
    return points, light_shift_from_power(points)


@dataclass(frozen=True)
class AnalysisReport:
    cross_points: tuple[float, ...]
    trivial: tuple[bool, ...]
    magic_field_estimate: Optional[float]
    g_sign: int
    region_signs: tuple[int, int, int]
    region_counts: tuple[int, int, int]
    light_shift_fit: Optional[LightShiftFit] = None
    power_points: tuple[tuple[float, float], ...] = ()
    notes: str = ""

    def to_dict(self) -> dict:
        """JSON-compatible form with fields in nT."""
        d = {
            "cross_points_nT": [c / NANO for c in self.cross_points],
            "cross_point_trivial": list(self.trivial),
            "magic_field_estimate_nT": None if self.magic_field_estimate is None else self.magic_field_estimate / NANO,
            "g_sign": {1: "+1", -1: "-1"}.get(self.g_sign, "undetermined"),
            "region_signs": list(self.region_signs),
            "region_counts": list(self.region_counts),
            "light_shift_fit": None,
            "power_points": [[p, b / NANO] for p, b in self.power_points],
            "notes": self.notes,
        }
        if self.light_shift_fit is not None:
            f = self.light_shift_fit
            d["light_shift_fit"] = {
                "slope_nT_per_power": f.slope / NANO,
                "intercept_nT": f.intercept / NANO,
                "residual_rms_nT": f.residual / NANO,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisReport":
        fit = d.get("light_shift_fit")
        magic = d.get("magic_field_estimate_nT")
        return cls(
            cross_points=tuple(c * NANO for c in d["cross_points_nT"]),
            trivial=tuple(bool(t) for t in d["cross_point_trivial"]),
            magic_field_estimate=None if magic is None else magic * NANO,
            g_sign={"+1": 1, "-1": -1}.get(d["g_sign"], 0),
            region_signs=tuple(d["region_signs"]),
            region_counts=tuple(d["region_counts"]),
            light_shift_fit=None
            if fit is None
            else LightShiftFit(fit["slope_nT_per_power"] * NANO, fit["intercept_nT"] * NANO, fit["residual_rms_nT"] * NANO),
            power_points=tuple((p, b * NANO) for p, b in d.get("power_points", [])),
            notes=d.get("notes", ""),
        )


def analyze(curve: EtaCurve, k: int = 4, light_shift_fit: Optional[LightShiftFit] = None) -> AnalysisReport:
    """Cross points, magic-field estimate and g sign of one sweep."""
    try:
        cps = find_cross_points(curve, k)
    except NoCrossingError:
        cps = []
    nontrivial = [c.field for c in cps if not c.trivial]
    g = infer_g_sign(curve, k=k)
    return AnalysisReport(
        cross_points=tuple(c.field for c in cps),
        trivial=tuple(c.trivial for c in cps),
        magic_field_estimate=nontrivial[0] if len(nontrivial) == 1 else None,
        g_sign=g.sign,
        region_signs=g.region_signs,
        region_counts=g.region_counts,
        light_shift_fit=light_shift_fit,
        notes=g.reason,
    )

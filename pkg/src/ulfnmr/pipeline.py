"""From molecular magnetization lines to magnetometer signals and spectra.

Each line's field phasors along x and y are weighted by ``diag(1, kappa)``
and passed through the sensor transfer functions; the two channels add
coherently, so a line's detected amplitude is

    S_i = field_scale * (H_x(nu_i) amp_x,i + kappa H_y(nu_i) amp_y,i).

Time signals use ``s(t) = sum_i 2 Re[S_i exp(+2 pi i nu_i t)] exp(-t/T2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .sensor import SensorModel, response
from .spin_system import LineSet


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class CouplingConfig:
    kappa: float = 1.0
    field_scale: float = 1.0

    def __post_init__(self):
        if not (self.kappa >= 0 and math.isfinite(self.kappa)):
            raise PipelineError("kappa must be a finite non-negative number")
        if not (self.field_scale > 0 and math.isfinite(self.field_scale)):
            raise PipelineError("field_scale must be positive")


@dataclass(frozen=True)
class AcquisitionConfig:
    """Sampling, decay and (optional) noise settings.

    ``window="exponential-match"`` multiplies the record by exp(-t/T2)
    before transforming (doubles the linewidth, improves SNR).
    """

    duration: float = 30.0
    sample_rate: float = 1000.0
    t2: float = 3.0
    window: str = "none"
    noise_rms: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.duration > 0 or not self.t2 > 0:
            raise PipelineError("duration and t2 must be positive")
        if not self.sample_rate > 0:
            raise PipelineError("sample_rate must be positive")
        if self.window not in ("none", "exponential-match"):
            raise PipelineError(f"unknown window {self.window!r}")
        if self.noise_rms < 0:
            raise PipelineError("noise_rms must be non-negative")

    @property
    def decay_rate(self) -> float:
        """Total decay rate of the recorded (windowed) signal, s^-1."""
        return (2.0 if self.window == "exponential-match" else 1.0) / self.t2

    @property
    def linewidth_hz(self) -> float:
        """Full width at half maximum of the absorption line, 1/(pi T2)."""
        return self.decay_rate / math.pi

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    def check_nyquist(self, max_frequency: float) -> None:
        if not self.sample_rate > 2 * max_frequency:
            raise PipelineError(
                f"sample rate {self.sample_rate} Hz violates Nyquist for a {max_frequency:.6g} Hz line"
            )


@dataclass(frozen=True)
class SignalLines:
    """Sensor-domain lines: frequency and complex detected amplitude S_i."""

    frequency_hz: NDArray[np.float64]
    amplitude: NDArray[np.complex128]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        f = np.asarray(self.frequency_hz, dtype=float).reshape(-1)
        a = np.asarray(self.amplitude, dtype=complex).reshape(-1)
        if f.shape != a.shape:
            raise PipelineError("frequency and amplitude arrays differ in length")
        object.__setattr__(self, "frequency_hz", f)
        object.__setattr__(self, "amplitude", a)
        if not self.labels:
            object.__setattr__(self, "labels", tuple("" for _ in f))

    def __len__(self) -> int:
        return len(self.frequency_hz)

    def select(self, fmin: float, fmax: float) -> "SignalLines":
        keep = (self.frequency_hz >= fmin) & (self.frequency_hz <= fmax)
        return SignalLines(
            self.frequency_hz[keep],
            self.amplitude[keep],
            tuple(lab for lab, k in zip(self.labels, keep) if k),
        )

    def scaled(self, factor: complex) -> "SignalLines":
        return SignalLines(self.frequency_hz, self.amplitude * factor, self.labels)


@dataclass(frozen=True)
class Spectrum:
    grid: NDArray[np.float64]
    values: NDArray[np.complex128]
    kind: str = "analytic"
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=complex)
        if g.shape != v.shape or g.ndim != 1:
            raise PipelineError("grid and values must be 1-D arrays of equal length")
        if len(g) > 1 and np.any(np.diff(g) <= 0):
            raise PipelineError("spectrum grid must be strictly increasing")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    @property
    def magnitude(self) -> NDArray[np.float64]:
        return np.abs(self.values)


def _line_labels(lines: LineSet) -> tuple[str, ...]:
    return tuple(f"{ln.bra_label}<->{ln.ket_label}" for ln in lines)


def combine_channels(hx, hy, bx, by, kappa: float):
    """Detected phasor of one line: ``[H_x, H_y] . diag(1, kappa) . [b_x, b_y]``."""
    return hx * bx + kappa * hy * by


def interference_magnitude(a, b, delta):
    """``|a exp(i delta) + b|`` for real magnitudes a, b and relative phase delta."""
    return np.abs(a * np.exp(1j * np.asarray(delta)) + b)


def sensor_signal_lines(lines: LineSet, sensor: SensorModel, coupling: CouplingConfig = CouplingConfig()) -> SignalLines:
    """Apply geometry weighting and the x/y transfer functions line by line."""
    nu = lines.frequencies
    if len(nu) and np.any(nu <= 0):
        raise PipelineError("line frequencies must be positive")
    bx = coupling.field_scale * lines.amplitudes("x")
    by = coupling.field_scale * lines.amplitudes("y")
    S = combine_channels(response(sensor, "x", nu), response(sensor, "y", nu), bx, by, coupling.kappa)
    return SignalLines(nu, S, _line_labels(lines))


def _rotated_line_amplitude(lines: LineSet, observable, angles_per_dm, index: int) -> complex:
    """Line amplitude of ``R(phi) O R(phi)^dagger`` summed over the line's coherences.

    R(phi) = exp(-i phi F_z).  The rotation angle of each coherence follows
    its coherence order dm = m_upper - m_lower (+-1 for transverse
    observables), phi = -dm * Phi, so that every component picks up the
    same response phase Phi.
    """
    src = lines.source
    U = src.eigenvectors
    rho_e = U.conj().T @ (src.rho0 - np.trace(src.rho0) / len(U) * np.eye(len(U))) @ U
    mz = np.real(np.einsum("xa,xy,ya->a", U.conj(), src.fz, U))
    total = 0j
    for upper, lower in lines.lines[index].coherences:
        dm = mz[upper] - mz[lower]
        if abs(abs(dm) - 1.0) > 1e-6:
            # a transverse observable has no matrix element here
            continue
        phi = -round(dm) * angles_per_dm
        w, v = np.linalg.eigh(src.fz)
        R = (v * np.exp(-1j * phi * w)) @ v.conj().T
        rotated = R @ observable @ R.conj().T
        element = U[:, upper].conj() @ rotated @ U[:, lower]
        total += rho_e[lower, upper] * element
    return total


def rotated_observable_signal(lines: LineSet, sensor: SensorModel, coupling: CouplingConfig = CouplingConfig()) -> SignalLines:
    """Detected amplitudes from rotated observables instead of phasor products.

    For each line, the x and y magnetization observables are rotated about
    z by the sensor phase responses Phi_x(nu), Phi_y(nu) and scaled by the
    amplitude responses A_x(nu), A_y(nu).  Requires an axial field, i.e.
    eigenstates with definite m_f.
    """
    if lines.source is None:
        raise PipelineError("line set carries no eigenbasis source")
    src = lines.source
    nu = lines.frequencies
    hx = response(sensor, "x", nu)
    hy = response(sensor, "y", nu)
    out = np.zeros(len(nu), dtype=complex)
    for i in range(len(nu)):
        ax = _rotated_line_amplitude(lines, src.observables[0], np.angle(hx[i]), i)
        ay = _rotated_line_amplitude(lines, src.observables[1], np.angle(hy[i]), i)
        out[i] = coupling.field_scale * (abs(hx[i]) * ax + coupling.kappa * abs(hy[i]) * ay)
    return SignalLines(nu, out, _line_labels(lines))


def synthesize_time_signal(lines: SignalLines, acq: AcquisitionConfig = AcquisitionConfig()):
    """Sampled real signal ``(t, s)`` with a single global T2 decay.

    When ``acq.noise_rms > 0`` white Gaussian noise from
    ``numpy.random.default_rng(acq.seed)`` is added.
    """
    if len(lines):
        acq.check_nyquist(float(np.max(lines.frequency_hz)))
    t = np.arange(acq.n_samples) / acq.sample_rate
    s = np.zeros_like(t)
    for nu, S in zip(lines.frequency_hz, lines.amplitude):
        s += 2.0 * np.real(S * np.exp(2j * np.pi * nu * t))
    s *= np.exp(-t / acq.t2)
    if acq.noise_rms > 0:
        rng = np.random.default_rng(acq.seed)
        s = s + rng.normal(scale=acq.noise_rms, size=s.shape)
    return t, s


def spectrum_fft(samples: Sequence[float], acq: AcquisitionConfig = AcquisitionConfig()) -> Spectrum:
    """One-sided spectrum approximating the continuous transform of the record.

    The first sample is halved (trapezoid rule) and the DFT is scaled by
    1/sample_rate, so a line's peak reads |S| T2 like the analytic form.
    """
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise PipelineError("no samples to transform")
    s = s.copy()
    if acq.window == "exponential-match":
        s *= np.exp(-np.arange(s.size) / acq.sample_rate / acq.t2)
    s[0] *= 0.5
    values = np.fft.rfft(s) / acq.sample_rate
    grid = np.fft.rfftfreq(s.size, d=1.0 / acq.sample_rate)
    return Spectrum(grid, values, "fft", {"t2": acq.t2, "linewidth_hz": acq.linewidth_hz, "sample_rate": acq.sample_rate})


def lorentzian(nu, center: float, decay_rate: float):
    """Complex Lorentzian ``1 / (R + 2 pi i (nu - center))``; FWHM R/pi."""
    return 1.0 / (decay_rate + 2j * np.pi * (np.asarray(nu, dtype=float) - center))


def analytic_spectrum(lines: SignalLines, acq: AcquisitionConfig, grid) -> Spectrum:
    """Closed-form transform of :func:`synthesize_time_signal` (noise-free).

    Includes the negative-frequency partner of each line so that it is the
    exact transform of the real, infinitely long decaying signal.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise PipelineError("empty frequency grid")
    R = acq.decay_rate
    values = np.zeros(grid.shape, dtype=complex)
    for nu, S in zip(lines.frequency_hz, lines.amplitude):
        values += S * lorentzian(grid, nu, R) + np.conj(S) * lorentzian(grid, -nu, R)
    return Spectrum(grid, values, "analytic", {"t2": acq.t2, "linewidth_hz": acq.linewidth_hz})

"""Frequency response of a SERF atomic magnetometer.

The alkali polarization is linearized about ``P ~ P0 z`` in an effective
longitudinal field ``B'_z = bias + light_shift``.  Driving with a field
``b exp(+i w t)`` along x or y and reading P_x gives closed-form transfer
functions (``a = Gamma + i w``, ``b = gamma_eff B'_z``)::

    H_y = -gamma_eff P0 a / (a^2 + b^2)
    H_x = +gamma_eff P0 b / (a^2 + b^2)

Amplitude and phase responses are ``|H|`` and ``arg H``.  The e^{+iwt}
phasor convention matches :mod:`ulfnmr.spin_system`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import constants as sc

#: Free-electron gyromagnetic ratio magnitude, rad s^-1 T^-1.
GAMMA_ELECTRON = sc.physical_constants["electron gyromag. ratio"][0]
DEFAULT_SLOWING_FACTOR = 6.0

_RESPONSE_AXES = ("x", "y")


class SensorError(ValueError):
    pass


@dataclass(frozen=True)
class SensorModel:
    """Magnetometer parameters; fields in tesla, rates in s^-1."""

    gamma_eff: float = GAMMA_ELECTRON / DEFAULT_SLOWING_FACTOR
    Gamma: float = 2 * math.pi * 50.0
    P0: float = 0.5
    light_shift: float = 0.0
    bias_Bz: float = 0.0

    pump_axis = "z"
    probe_axis = "x"

    def __post_init__(self):
        if not self.gamma_eff > 0:
            raise SensorError("gamma_eff must be positive")
        if not self.Gamma > 0:
            raise SensorError("Gamma must be positive")
        if not 0 < self.P0 <= 1:
            raise SensorError("P0 must lie in (0, 1]")
        for name in ("gamma_eff", "Gamma", "P0", "light_shift", "bias_Bz"):
            if not math.isfinite(getattr(self, name)):
                raise SensorError(f"{name} must be finite")

    @classmethod
    def from_slowing_factor(cls, q: float = DEFAULT_SLOWING_FACTOR, gamma_e: float = GAMMA_ELECTRON, **kwargs) -> "SensorModel":
        if not q > 0:
            raise SensorError("slowing factor must be positive")
        return cls(gamma_eff=gamma_e / q, **kwargs)

    def with_bias(self, bias_Bz: float) -> "SensorModel":
        return replace(self, bias_Bz=float(bias_Bz))

    def with_light_shift(self, light_shift: float) -> "SensorModel":
        return replace(self, light_shift=float(light_shift))


@dataclass(frozen=True)
class ComplexResponse:
    axis: str
    frequency_hz: float
    value: complex

    @property
    def amplitude(self) -> float:
        return abs(self.value)

    @property
    def phase(self) -> float:
        return float(np.angle(self.value))


def effective_field(sensor: SensorModel) -> float:
    """Longitudinal field seen by the atoms: bias plus light shift."""
    return sensor.bias_Bz + sensor.light_shift


def response(sensor: SensorModel, axis: str, nu):
    """Vectorized transfer function H_axis(nu); nu in Hz (may be an array)."""
    if axis not in _RESPONSE_AXES:
        raise SensorError(f"axis must be 'x' or 'y', got {axis!r}")
    nu = np.asarray(nu, dtype=float)
    a = sensor.Gamma + 2j * np.pi * nu
    b = sensor.gamma_eff * effective_field(sensor)
    denom = a * a + b * b
    scale = sensor.gamma_eff * sensor.P0
    if axis == "y":
        return -scale * a / denom
    return scale * b / denom + 0j * a


def transfer_function(sensor: SensorModel, axis: str, nu: float) -> ComplexResponse:
    if nu < 0:
        raise SensorError("frequency must be non-negative")
    return ComplexResponse(axis, float(nu), complex(response(sensor, axis, nu)))


def amplitude_response(sensor: SensorModel, axis: str, nu):
    return np.abs(response(sensor, axis, nu))


def phase_response(sensor: SensorModel, axis: str, nu):
    return np.angle(response(sensor, axis, nu))


def magic_field(sensor: SensorModel, check_grid=None) -> float:
    """Bias field that cancels the light shift, B_magic = -light_shift.

    At that bias the x response vanishes identically; this is checked on
    ``check_grid`` (Hz, default 0..1 kHz).
    """
    b_magic = -sensor.light_shift
    grid = np.linspace(0.0, 1000.0, 101) if check_grid is None else np.asarray(check_grid, dtype=float)
    at_magic = sensor.with_bias(b_magic)
    ax = amplitude_response(at_magic, "x", grid)
    ay = amplitude_response(at_magic, "y", grid)
    if np.any(ax >= 1e-15 * ay):
        raise AssertionError("x response does not vanish at the magic field")
    return b_magic


def light_shift_linear(alpha: float, pump_power: float) -> float:
    """Light shift L = alpha * P (alpha in T per pump-power unit)."""
    return alpha * pump_power

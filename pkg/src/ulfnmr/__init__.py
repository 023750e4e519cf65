"""Ultralow-field NMR doublet asymmetry simulator.

Exact spin dynamics of small J-coupled networks, a SERF magnetometer
transfer-function model, and the asymmetry analysis built on them.
"""

from .analysis import (
    AnalysisReport,
    CrossPoint,
    EtaCurve,
    EtaSample,
    GSignResult,
    LightShiftFit,
    PeakFit,
    SweepSettings,
    analyze,
    asymmetry_ratio,
    eta_sweep,
    find_cross_points,
    fit_doublet,
    infer_g_sign,
    light_shift_from_power,
    power_sweep,
)
from .pipeline import (
    AcquisitionConfig,
    CouplingConfig,
    SignalLines,
    Spectrum,
    analytic_spectrum,
    rotated_observable_signal,
    sensor_signal_lines,
    spectrum_fft,
    synthesize_time_signal,
)
from .sensor import SensorModel, magic_field, transfer_function
from .spin_system import (
    FieldConfig,
    LineSet,
    MoleculeSpec,
    Nucleus,
    PolarizationConfig,
    build_hamiltonian,
    eigendecompose,
    line_decomposition,
    molecule_lines,
    perturbative_frequencies,
    thermal_initial_state,
)

__version__ = "0.1.0"

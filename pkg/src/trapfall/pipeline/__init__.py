"""Detector-side analysis: traces, spectra, calibration, state estimation."""

from .duffing import DuffingTensor, HardeningWarning, duffing_frequency, fit_duffing, tensor_row
from .estimation import (
    BandpassFilter,
    ExpansionResult,
    bandpass_estimate,
    design_bandpass,
    ensemble_expansion,
    initial_scales,
    readout_state,
    variance_with_se,
)
from .spectral import (
    FitError,
    PeakFit,
    Spectrum,
    calibrate,
    effective_temperature,
    fit_psd_peaks,
    mass_from_damping,
    metres_to_volts,
    oscillator_lineshape,
    radius_from_damping,
    volts_to_metres,
    welch_psd,
)
from .trace import (
    ModeSpec,
    SyntheticRecord,
    Trace,
    read_trace_binary,
    read_trace_csv,
    sinusoidal_transduction,
    synthesize_trace,
    thermal_mode,
    write_trace_binary,
    write_trace_csv,
)

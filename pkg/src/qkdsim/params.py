"""Physical and protocol constants shared across the pipeline."""

from dataclasses import dataclass

# Gaussian FWHM -> standard deviation
FWHM_TO_SIGMA = 1.0 / 2.3548200450309493

# Measured wrong-bit rates of the four receiver channels (0/45/90/135 deg),
# taken during key exchange with the current hardware.
MEASURED_CHANNEL_BER = (0.0132, 0.0254, 0.0220, 0.0475)

STATE_ANGLES_DEG = (0, 45, 90, 135)


@dataclass(frozen=True)
class SystemParams:
    """Transmitter, channel and receiver constants.

    ``background_rate_cps`` follows the per-channel convention used for
    all reported rates: it is the rate seen on each of the two multiplexed
    input lines, which is twice the rate of a single physical detector
    (see :mod:`qkdsim.runner`).
    """

    repetition_rate_hz: float = 5e6
    mean_photon_number: float = 0.3
    channel_transmission: float = 1.0
    detection_efficiency: float = 0.045
    gate_width_s: float = 5e-9
    pulse_period_s: float = 0.0  # 0 means "derive from repetition rate"
    pulse_jitter_rms_s: float = 2.4e-9 * FWHM_TO_SIGMA  # 2.4 ns FWHM optical pulse
    background_rate_cps: float = 0.0
    base_ber_per_channel: tuple = MEASURED_CHANNEL_BER
    safety_margin_bits: int = 100
    dead_time_s: float = 0.0
    clock_skew_ppm: float = 10.0
    injected_error_rate: float = 0.0  # extra disturbance knob (eavesdropper-style)

    def __post_init__(self):
        if self.pulse_period_s == 0.0:
            object.__setattr__(self, "pulse_period_s", 1.0 / self.repetition_rate_hz)
        if not self.mean_photon_number > 0:
            raise ValueError("mean photon number must be positive")
        if not 0 < self.channel_transmission <= 1:
            raise ValueError("channel transmission must be in (0, 1]")
        if not 0 < self.detection_efficiency <= 1:
            raise ValueError("detection efficiency must be in (0, 1]")
        if not self.gate_width_s > 0:
            raise ValueError("gate width must be positive")
        if self.gate_width_s > self.pulse_period_s:
            raise ValueError("gate width cannot exceed the pulse period")
        if self.background_rate_cps < 0:
            raise ValueError("background rate cannot be negative")
        if len(self.base_ber_per_channel) != 4:
            raise ValueError("need one base BER per channel")
        for ber in self.base_ber_per_channel:
            if not 0 <= ber < 0.5:
                raise ValueError("each base BER must lie in [0, 0.5)")
        if not 0 <= self.injected_error_rate < 0.5:
            raise ValueError("injected error rate must lie in [0, 0.5)")

    @property
    def base_error_rate(self) -> float:
        """Expected sifted error rate with no background: channel BER average."""
        return float(sum(self.base_ber_per_channel)) / 4.0

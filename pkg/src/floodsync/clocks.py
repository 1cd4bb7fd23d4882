"""Per-node hardware and logical clock models.

Every node owns a free-running hardware clock (an integer microsecond tick
counter with a small frequency error, never adjusted by any protocol) and a
software logical clock derived from it through a rate multiplier ``phi`` and
accumulated offset corrections. Simulation time and all tick values are
integer microseconds.

Sub-tick phase is tracked exactly: rates and multipliers are quantized onto a
fixed 1e-12 grid (micro-PPM resolution, far below every tolerance in play)
and anchors are carried as exact integer numerators over that denominator, so
arbitrarily long runs lose no fractional phase. Reads round the exact value
half-away-from-zero; that is the single rounding rule used everywhere in this
package.
"""

import math
from dataclasses import dataclass

# One tick value is num / PICO with num an exact integer.
PICO = 10**12
_PPM_TO_PICO = 10**6  # 1 ppm == 1e6 pico-units per tick

DRIFT_CONSTANT = "constant"
DRIFT_RANDOM_WALK = "bounded-random-walk"


class EstimateOutOfBandError(ValueError):
    """A proposed rate multiplier fell outside the configured sanity band."""


def round_half_away(x: float) -> int:
    """Round to the nearest integer, ties away from zero."""
    if x >= 0:
        return int(math.floor(x + 0.5))
    return -int(math.floor(-x + 0.5))


def div_round_half_away(num: int, den: int) -> int:
    """Exact integer num/den rounded half-away-from-zero. den must be > 0."""
    if num >= 0:
        return (2 * num + den) // (2 * den)
    return -((-2 * num + den) // (2 * den))


@dataclass
class OscillatorModel:
    """Hardware frequency error of one node's crystal.

    rate_ppm is the deviation from nominal frequency in parts per million;
    initial_offset_us is the tick count already on the counter at simulation
    start (models staggered power-on). Under the random-walk mode the rate
    takes one bounded step per synchronization period; under the constant
    mode it never changes.
    """

    rate_ppm: float = 0.0
    initial_offset_us: int = 0
    drift_mode: str = DRIFT_CONSTANT
    walk_step_ppm_per_period: float = 0.0
    rate_bound_ppm: float = 100.0

    def __post_init__(self):
        if self.drift_mode not in (DRIFT_CONSTANT, DRIFT_RANDOM_WALK):
            raise ValueError(f"unknown drift_mode {self.drift_mode!r}")
        if self.walk_step_ppm_per_period < 0:
            raise ValueError("walk_step_ppm_per_period must be >= 0")
        if self.drift_mode == DRIFT_CONSTANT and self.walk_step_ppm_per_period:
            raise ValueError("constant drift mode requires walk step 0")
        if abs(self.rate_ppm) > self.rate_bound_ppm:
            raise ValueError("rate_ppm exceeds rate_bound_ppm")


class HardwareClock:
    """Free-running tick counter: read-only for protocols, exact internally."""

    def __init__(self, osc: OscillatorModel):
        self.osc = osc
        self.rate_ppm = osc.rate_ppm
        self._rate_num = PICO + round(osc.rate_ppm * _PPM_TO_PICO)
        self._anchor_true = 0
        self._anchor_num = osc.initial_offset_us * PICO

    def read(self, now_us: int) -> int:
        """Tick count at true time now_us (microseconds since sim start)."""
        if now_us < self._anchor_true:
            raise ValueError("hardware clock read before its anchor")
        num = self._anchor_num + (now_us - self._anchor_true) * self._rate_num
        return div_round_half_away(num, PICO)

    def step_rate(self, now_us: int, rng) -> None:
        """Apply one bounded random-walk step (no-op in constant mode)."""
        if self.osc.drift_mode != DRIFT_RANDOM_WALK:
            return
        step = rng.uniform(-self.osc.walk_step_ppm_per_period,
                           self.osc.walk_step_ppm_per_period)
        bound = self.osc.rate_bound_ppm
        new_ppm = min(bound, max(-bound, self.rate_ppm + step))
        # Re-anchor so the tick count is continuous across the rate change.
        self._anchor_num += (now_us - self._anchor_true) * self._rate_num
        self._anchor_true = now_us
        self.rate_ppm = new_ppm
        self._rate_num = PICO + round(new_ppm * _PPM_TO_PICO)


class LogicalClock:
    """Software clock over a hardware tick stream.

    Between corrections the logical value advances at ``phi`` ticks per
    hardware tick from exact anchors. ``apply_correction`` re-anchors so that
    the value at the correction instant jumps by exactly theta_step_us and
    then advances at the new rate. ``theta_total_us`` accumulates the applied
    steps for bookkeeping; it never feeds back into reads.
    """

    def __init__(self, phi: float = 1.0, phi_band_ppm: float = 1000.0):
        self.phi = phi
        self.phi_band_ppm = phi_band_ppm
        self.theta_total_us = 0
        self.corrections = 0
        self._phi_num = round(phi * PICO)
        self._anchor_hw = 0
        self._anchor_num = 0

    def read(self, hw_now: int) -> int:
        """Logical tick value when the hardware counter shows hw_now."""
        if hw_now < self._anchor_hw:
            raise ValueError("logical clock read before its anchor")
        num = self._anchor_num + (hw_now - self._anchor_hw) * self._phi_num
        return div_round_half_away(num, PICO)

    def apply_correction(self, phi_new: float, theta_step_us: int,
                         hw_now: int) -> None:
        """Re-anchor at hw_now: step the value by theta_step_us, rate phi_new.

        Raises EstimateOutOfBandError when phi_new strays more than the
        sanity band from 1 (an estimator blow-up signal; callers log and
        skip, nothing is clamped).
        """
        band = self.phi_band_ppm * 1e-6
        if not (1.0 - band <= phi_new <= 1.0 + band):
            raise EstimateOutOfBandError(
                f"phi {phi_new!r} outside 1 +/- {self.phi_band_ppm} ppm band")
        self._anchor_num += (hw_now - self._anchor_hw) * self._phi_num
        self._anchor_num += theta_step_us * PICO
        self._anchor_hw = hw_now
        self.phi = phi_new
        self._phi_num = round(phi_new * PICO)
        self.theta_total_us += theta_step_us
        self.corrections += 1


class NodeClock:
    """Convenience pairing of one node's hardware and logical clocks."""

    def __init__(self, osc: OscillatorModel, phi_band_ppm: float = 1000.0):
        self.hardware = HardwareClock(osc)
        self.logical = LogicalClock(phi_band_ppm=phi_band_ppm)

    def hw(self, now_us: int) -> int:
        return self.hardware.read(now_us)

    def logical_at(self, now_us: int) -> int:
        return self.logical.read(self.hardware.read(now_us))

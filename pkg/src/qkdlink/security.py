"""Analytic click-rate, error-rate and secret-key model.

Rates are per second before basis sifting unless noted.  The signal rate is

    S = clock * (1 - exp(-mu * eta_total)) * capture(window)

where ``eta_total`` folds fiber, components, detector efficiency and the
time-multiplexing protocol efficiency.  Flat backgrounds are accepted through
two windows per clock period; Raman light only reaches the Early window.
Dead time and double clicks are neglected here (the Monte Carlo keeps them).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import photonics
from .errors import DomainError, ThresholdError
from .photonics import DetectorModel, FilterSpec, LinkBudget, SourceModel
from .protocol import InterferometerModel
from .timing import window_capture_fraction


class SyncMode(str, Enum):
    OPTICAL = "optical"
    ELECTRICAL = "electrical"
    IMPROVED_FILTER = "improved_filter"


@dataclass(frozen=True)
class Scenario:
    source: SourceModel
    budget: LinkBudget
    interferometer: InterferometerModel
    detector: DetectorModel
    window: float = 72e-9
    sync_mode: SyncMode = SyncMode.ELECTRICAL

    def __post_init__(self):
        if not (self.window > 0):
            raise DomainError("window must be > 0")
        if 2 * self.window > 1.0 / self.source.clock_rate:
            raise DomainError("two windows must fit inside one clock period")
        if not math.isclose(self.budget.detector_efficiency, self.detector.efficiency):
            raise DomainError("budget and detector disagree on detector efficiency")
        if self.intrinsic_error >= 0.5:
            raise DomainError("intrinsic error must be < 0.5")
        object.__setattr__(self, "sync_mode", SyncMode(self.sync_mode))

    @property
    def intrinsic_error(self):
        return self.interferometer.intrinsic_error

    @property
    def eta_total(self):
        return photonics.transmittance(self.budget) * self.interferometer.protocol_efficiency

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_mu(self, mu):
        return self.replace(source=SourceModel(mu, self.source.clock_rate))

    def with_length(self, fiber_length):
        return self.replace(budget=self.budget.with_length(fiber_length))

    def with_window(self, window):
        return self.replace(window=window)

    def with_detector(self, **changes):
        det = dataclasses.replace(self.detector, **changes)
        budget = self.budget
        if "efficiency" in changes:
            budget = LinkBudget(budget.fiber_length, budget.attenuation, budget.component_losses,
                                det.efficiency)
        return self.replace(detector=det, budget=budget)


@dataclass(frozen=True)
class SecurityParams:
    qber_limit: float = 0.11
    ec_inefficiency: float = 1.2
    target_mu: float = 0.1

    def __post_init__(self):
        if not (0 < self.qber_limit < 0.5):
            raise DomainError("qber_limit must lie in (0, 0.5)")
        if not self.ec_inefficiency >= 1:
            raise DomainError("ec_inefficiency must be >= 1")
        if not self.target_mu > 0:
            raise DomainError("target_mu must be > 0")


# --- canonical scenarios ------------------------------------------------------

@dataclass(frozen=True)
class Calibration:
    """Link-budget parameters not reported with the measurements.

    Defaults were produced by :func:`qkdlink.experiment.calibrate` on the two
    50 km threshold targets.
    """

    attenuation: float = 0.2  # dB/km
    receiver_loss_db: float = 2.6528
    blackbody_rate: float = 40.165  # Hz, detected, flat in time


DEFAULT_CALIBRATION = Calibration()

OPTICAL_FILTER_LOSS_DB = 3.2
RAMAN_RATE_IN_WINDOW = 30.3
IMPROVED_FILTER = FilterSpec(1550.0, 10.0, insertion_loss=3.0, out_of_band_rejection=40.0)
IMPROVED_EFFICIENCY = 0.89
UNFILTERED_BACKGROUND = 400.0
IN_BAND_THERMAL_RATE = 0.03


def improved_background_rate():
    return photonics.filtered_background_rate(UNFILTERED_BACKGROUND, IN_BAND_THERMAL_RATE,
                                              IMPROVED_FILTER, IMPROVED_EFFICIENCY)


def make_scenario(mode, *, mu=0.1, fiber_length=50.0, window=72e-9, intrinsic_error=0.01,
                  calibration=DEFAULT_CALIBRATION, clock_rate=photonics.DEFAULT_CLOCK_RATE,
                  protocol_efficiency=0.5):
    """Build one of the three receiver configurations."""
    mode = SyncMode(mode)
    losses = {"receiver": calibration.receiver_loss_db}
    if mode is SyncMode.OPTICAL:
        losses["bandpass_1nm"] = OPTICAL_FILTER_LOSS_DB
        detector = DetectorModel(efficiency=0.65, blackbody_rate=calibration.blackbody_rate,
                                 raman_rate_in_window=RAMAN_RATE_IN_WINDOW)
    elif mode is SyncMode.ELECTRICAL:
        detector = DetectorModel(efficiency=0.65, blackbody_rate=calibration.blackbody_rate)
    else:
        losses["bandpass_10nm"] = IMPROVED_FILTER.insertion_loss
        detector = DetectorModel(efficiency=IMPROVED_EFFICIENCY,
                                 blackbody_rate=improved_background_rate())
    budget = LinkBudget(fiber_length, calibration.attenuation, losses, detector.efficiency)
    interferometer = InterferometerModel.from_intrinsic_error(
        intrinsic_error, protocol_efficiency=protocol_efficiency)
    return Scenario(SourceModel(mu, clock_rate), budget, interferometer, detector, window, mode)


CANONICAL = {
    "optical_sync_50km": SyncMode.OPTICAL,
    "electrical_sync_50km": SyncMode.ELECTRICAL,
    "improved_filter": SyncMode.IMPROVED_FILTER,
}


def canonical_scenario(name, **kwargs):
    try:
        mode = CANONICAL[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(CANONICAL)}") from None
    return make_scenario(mode, **kwargs)


# --- rate model ---------------------------------------------------------------

def signal_rate(scenario):
    mu = scenario.source.mean_photon_number
    p = -math.expm1(-mu * scenario.eta_total)
    return (scenario.source.clock_rate * p
            * window_capture_fraction(scenario.window, scenario.detector.jitter_fwhm))


def background_rate(scenario):
    duty = min(1.0, 2.0 * scenario.window * scenario.source.clock_rate)
    return scenario.detector.blackbody_rate * duty + scenario.detector.raman_rate(scenario.window)


def click_rates(scenario):
    """Signal and background click rates (Hz) accepted by the timing windows."""
    return signal_rate(scenario), background_rate(scenario)


def qber_model(S, B, e_int):
    """Error rate when signal errs at ``e_int`` and background at random."""
    if S < 0 or B < 0:
        raise DomainError("rates must be >= 0")
    if S + B <= 0:
        raise DomainError("QBER undefined with no clicks")
    return (e_int * S + 0.5 * B) / (S + B)


def scenario_qber(scenario):
    S, B = click_rates(scenario)
    return qber_model(S, B, scenario.intrinsic_error)


def sifted_rate(scenario):
    S, B = click_rates(scenario)
    return 0.5 * (S + B)


def _bisect(f, lo, hi, done):
    flo = f(lo)
    while not done(lo, hi):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def min_mu(scenario, params=SecurityParams(), lo=1e-8, hi=1.0, rtol=1e-4):
    """Smallest mean photon number whose sifted QBER reaches the limit."""
    limit = params.qber_limit

    def excess(log_mu):
        return scenario_qber(scenario.with_mu(math.exp(log_mu))) - limit

    a, b = math.log(lo), math.log(hi)
    fa, fb = excess(a), excess(b)
    if fa <= 0 or fb > 0:
        raise ThresholdError(
            f"threshold unattainable: QBER spans [{fb + limit:.4g}, {fa + limit:.4g}] "
            f"for mu in [{lo:g}, {hi:g}]")
    log_mu = _bisect(excess, a, b, lambda x, y: y - x < math.log1p(rtol))
    return math.exp(log_mu)


def max_distance(scenario, params=SecurityParams(), tol=0.1, l_max=10_000.0):
    """Longest fiber (km) at ``params.target_mu`` with QBER below the limit."""
    sc = scenario.with_mu(params.target_mu)
    limit = params.qber_limit

    def excess(length):
        return scenario_qber(sc.with_length(length)) - limit

    if excess(0.0) >= 0:
        raise ThresholdError("QBER already exceeds the limit at zero length")
    hi = 100.0
    while excess(hi) <= 0:
        hi *= 2
        if hi > l_max:
            raise ThresholdError(f"QBER stays below the limit beyond {l_max:g} km")
    return _bisect(excess, 0.0, hi, lambda x, y: y - x < tol)


def secure_mu_bound(eta):
    """Largest mean photon number allowed by the photon-number-splitting bound."""
    if not (0 < eta <= 1):
        raise DomainError(f"transmittance must be in (0, 1], got {eta!r}")
    return eta


def binary_entropy(p):
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -p * np.log2(p) - (1 - p) * np.log2(1 - p)
    h = np.where((p <= 0) | (p >= 1), 0.0, h)
    return float(h) if h.ndim == 0 else h


def secret_fraction(e, delta, params=SecurityParams(), with_flag=False):
    """Secret bits per sifted bit, GLLP form with multi-photon fraction ``delta``.

    Returns 0 (and ``saturated=True`` with ``with_flag``) when the single-photon
    error rate ``e / (1 - delta)`` reaches 1/2 or ``delta >= 1``.
    """
    if not (0 <= e < 0.5):
        raise DomainError(f"QBER must lie in [0, 0.5), got {e!r}")
    if delta < 0:
        raise DomainError("multi-photon fraction must be >= 0")
    saturated = delta >= 1 or e / (1 - delta) >= 0.5
    if saturated:
        r = 0.0
    else:
        single = 1 - delta
        r = max(0.0, single * (1 - binary_entropy(e / single))
                - params.ec_inefficiency * binary_entropy(e))
    return (r, saturated) if with_flag else r


def multiphoton_fraction(scenario):
    """Upper bound on the fraction of clicks caused by multi-photon pulses."""
    S, B = click_rates(scenario)
    p_click = (S + B) / scenario.source.clock_rate
    if p_click == 0:
        return math.inf
    return photonics.multi_photon_prob(scenario.source.mean_photon_number) / p_click


def secret_rate(scenario, params=SecurityParams()):
    """Secret bits per second after sifting, correction and amplification."""
    S, B = click_rates(scenario)
    if S + B == 0:
        return 0.0
    e = qber_model(S, B, scenario.intrinsic_error)
    delta = multiphoton_fraction(scenario)
    if e >= 0.5:
        return 0.0
    return 0.5 * (S + B) * secret_fraction(e, delta, params)

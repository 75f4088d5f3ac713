"""Physical-layer models for the attenuated-laser link.

Covers the Poisson source, dB link budgets, thermal and Raman background
rates, and a stochastic single-photon detector with Gaussian timing jitter
and a latching dead time.

Time convention: a click's ``time_offset`` is measured from the nominal
arrival time of the Early (bit 0) path in its slot; the Late path arrives
``bit_delay`` later.  A slot's time frame is centred half-way between the two
bins, i.e. it spans ``[bit_delay/2 - T/2, bit_delay/2 + T/2)`` with
``T = 1/clock_rate``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import special, stats

from . import _rng
from .errors import DomainError

PLANCK = 6.62607015e-34  # J s
BOLTZMANN = 1.380649e-23  # J/K
SPEED_OF_LIGHT = 299_792_458.0  # m/s

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

DEFAULT_CLOCK_RATE = 1.0e6
DEFAULT_BIT_DELAY = 320e-9


class Provenance(IntEnum):
    SIGNAL = 0
    BLACKBODY = 1
    RAMAN = 2


class OutputBin(IntEnum):
    EARLY = 0
    LATE = 1


def _check_positive(name, value):
    if not (math.isfinite(value) and value > 0):
        raise DomainError(f"{name} must be finite and > 0, got {value!r}")


def _check_nonneg(name, value):
    if not (math.isfinite(value) and value >= 0):
        raise DomainError(f"{name} must be finite and >= 0, got {value!r}")


@dataclass(frozen=True)
class SourceModel:
    mean_photon_number: float
    clock_rate: float = DEFAULT_CLOCK_RATE

    def __post_init__(self):
        # mu == 0 is allowed: a dark source is a valid limiting case
        _check_nonneg("mean_photon_number", self.mean_photon_number)
        _check_positive("clock_rate", self.clock_rate)

    @property
    def period(self):
        return 1.0 / self.clock_rate


@dataclass(frozen=True)
class LinkBudget:
    """Fiber plus itemised component losses (dB) and detector efficiency."""

    fiber_length: float
    attenuation: float = 0.2
    component_losses: dict = field(default_factory=dict)
    detector_efficiency: float = 1.0

    def __post_init__(self):
        _check_nonneg("fiber_length", self.fiber_length)
        _check_nonneg("attenuation", self.attenuation)
        for name, db in self.component_losses.items():
            _check_nonneg(f"component_losses[{name}]", db)
        if not (0 < self.detector_efficiency <= 1):
            raise DomainError(
                f"detector_efficiency must be in (0, 1], got {self.detector_efficiency!r}"
            )
        object.__setattr__(self, "component_losses", dict(self.component_losses))

    @property
    def total_loss_db(self):
        return self.attenuation * self.fiber_length + sum(self.component_losses.values())

    def with_component(self, name, loss_db):
        losses = dict(self.component_losses)
        losses[name] = loss_db
        return LinkBudget(self.fiber_length, self.attenuation, losses, self.detector_efficiency)

    def without_component(self, name):
        losses = {k: v for k, v in self.component_losses.items() if k != name}
        return LinkBudget(self.fiber_length, self.attenuation, losses, self.detector_efficiency)

    def with_length(self, fiber_length):
        return LinkBudget(fiber_length, self.attenuation, self.component_losses,
                          self.detector_efficiency)

    def concatenate(self, other):
        """Budget of ``self`` followed by ``other``.

        When attenuations differ, the second fiber is folded in as a component.
        """
        losses = dict(self.component_losses)
        for name, db in other.component_losses.items():
            key = name
            while key in losses:
                key += "'"
            losses[key] = db
        if math.isclose(self.attenuation, other.attenuation):
            length = self.fiber_length + other.fiber_length
        else:
            length = self.fiber_length
            losses["fiber'"] = other.attenuation * other.fiber_length
        return LinkBudget(length, self.attenuation, losses,
                          self.detector_efficiency * other.detector_efficiency)


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 0.65
    dead_time: float = 4e-6
    jitter_fwhm: float = 72e-9
    blackbody_rate: float = 27.0
    raman_rate_in_window: float = 0.0
    raman_reference_window: float = 72e-9

    def __post_init__(self):
        if not (0 < self.efficiency <= 1):
            raise DomainError(f"efficiency must be in (0, 1], got {self.efficiency!r}")
        _check_nonneg("dead_time", self.dead_time)
        _check_positive("jitter_fwhm", self.jitter_fwhm)
        _check_nonneg("blackbody_rate", self.blackbody_rate)
        _check_nonneg("raman_rate_in_window", self.raman_rate_in_window)
        _check_positive("raman_reference_window", self.raman_reference_window)

    @property
    def jitter_sigma(self):
        return self.jitter_fwhm * FWHM_TO_SIGMA

    def raman_rate(self, window):
        """Raman click rate accepted by an Early window of width ``window``."""
        return self.raman_rate_in_window * window / self.raman_reference_window


@dataclass(frozen=True)
class FilterSpec:
    passband_center: float  # nm
    passband_width: float  # nm
    insertion_loss: float = 0.0  # dB
    out_of_band_rejection: float = 0.0  # dB

    def __post_init__(self):
        _check_positive("passband_center", self.passband_center)
        _check_positive("passband_width", self.passband_width)
        _check_nonneg("insertion_loss", self.insertion_loss)
        if not (self.out_of_band_rejection >= 0):
            raise DomainError("out_of_band_rejection must be >= 0")


@dataclass(frozen=True)
class ClickEvent:
    slot_index: int
    time_offset: float
    provenance: Provenance
    output_bin: OutputBin


@dataclass
class ClickLog:
    """Columnar store of click events, ordered by absolute time."""

    slot_index: np.ndarray
    time_offset: np.ndarray
    provenance: np.ndarray
    output_bin: np.ndarray

    @classmethod
    def empty(cls):
        return cls(np.empty(0, np.int64), np.empty(0), np.empty(0, np.int8),
                   np.empty(0, np.int8))

    def __len__(self):
        return len(self.slot_index)

    def __iter__(self):
        for s, t, p, b in zip(self.slot_index, self.time_offset, self.provenance,
                              self.output_bin):
            yield ClickEvent(int(s), float(t), Provenance(int(p)), OutputBin(int(b)))

    def __getitem__(self, i):
        return ClickEvent(int(self.slot_index[i]), float(self.time_offset[i]),
                          Provenance(int(self.provenance[i])), OutputBin(int(self.output_bin[i])))

    def select(self, mask):
        return ClickLog(self.slot_index[mask], self.time_offset[mask],
                        self.provenance[mask], self.output_bin[mask])


# --- source statistics -----------------------------------------------------

def poisson_pmf(mu, n):
    """Probability of exactly ``n`` photons in a pulse of mean ``mu``."""
    if not (math.isfinite(mu) and mu > 0):
        raise DomainError(f"mean photon number must be finite and > 0, got {mu!r}")
    if int(n) != n or n < 0:
        raise DomainError(f"photon number must be a nonnegative integer, got {n!r}")
    n = int(n)
    return math.exp(-mu + n * math.log(mu) - math.lgamma(n + 1))


def multi_photon_prob(mu):
    """Exact P(n >= 2) for a Poisson pulse.

    Agrees with ``mu**2 / 2`` to within 7 % for ``mu <= 0.1``.
    """
    if not math.isfinite(mu) or mu < 0:
        raise DomainError(f"mean photon number must be finite and >= 0, got {mu!r}")
    if mu == 0:
        return 0.0
    # regularised lower incomplete gamma P(2, mu) == P(N >= 2), no cancellation
    return float(special.gammainc(2, mu))


def transmittance(budget):
    """End-to-end detection probability of a launched photon."""
    return 10.0 ** (-budget.total_loss_db / 10.0) * budget.detector_efficiency


def db_to_fraction(loss_db):
    return 10.0 ** (-loss_db / 10.0)


# --- backgrounds ------------------------------------------------------------

def blackbody_in_band_rate(temperature, band, polarization_modes=1):
    """Thermal photon rate (Hz) in one spatial mode of single-mode fiber.

    Evaluated at the band centre with ``dnu = c * dlambda / lambda**2``.
    """
    if polarization_modes not in (1, 2):
        raise DomainError("polarization_modes must be 1 or 2")
    if not math.isfinite(temperature) or temperature < 0:
        raise DomainError(f"temperature must be >= 0, got {temperature!r}")
    if temperature == 0:
        return 0.0
    lam = band.passband_center * 1e-9
    if lam < 700e-9 or lam > 5000e-9:
        raise DomainError("band centre must lie in the near infrared (700-5000 nm)")
    nu = SPEED_OF_LIGHT / lam
    dnu = SPEED_OF_LIGHT * band.passband_width * 1e-9 / lam**2
    x = PLANCK * nu / (BOLTZMANN * temperature)
    occupation = math.exp(-x) / -math.expm1(-x)
    return polarization_modes * dnu * occupation


def filtered_background_rate(raw_detected_rate, in_band_rate, filt, detector_efficiency):
    """Background after a bandpass filter.

    Out-of-band counts (already detected) are suppressed by the rejection;
    in-band thermal photons pay the insertion loss and the detector efficiency.
    """
    _check_nonneg("raw_detected_rate", raw_detected_rate)
    _check_nonneg("in_band_rate", in_band_rate)
    rejection = db_to_fraction(filt.out_of_band_rejection) if math.isfinite(
        filt.out_of_band_rejection) else 0.0
    return (raw_detected_rate * rejection
            + in_band_rate * db_to_fraction(filt.insertion_loss) * detector_efficiency)


# --- sampling ---------------------------------------------------------------

def _poisson_cdf(mu):
    n_max = int(mu + 12.0 * math.sqrt(mu) + 30)
    return np.cumsum(stats.poisson.pmf(np.arange(n_max + 1), mu))


def poisson_inverse_cdf(mu, u):
    """Map uniforms ``u`` to Poisson(mu) counts by table lookup."""
    if mu <= 0:
        return np.zeros(np.shape(u), dtype=np.int64)
    cdf = _poisson_cdf(mu)
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, len(cdf) - 1).astype(np.int64)


def photon_counts(mu, seed, batch, size):
    """Photon numbers for one batch of slots."""
    u = _rng.batch_rng(seed, batch, _rng.Stream.PHOTONS).random(size)
    return poisson_inverse_cdf(mu, u)


def sample_emission(source, slot, seed):
    """Photon count emitted in ``slot``; identical to the batched draw."""
    batch, pos = divmod(int(slot), _rng.BATCH_SLOTS)
    return int(photon_counts(source.mean_photon_number, seed, batch, pos + 1)[pos])


# --- detector ---------------------------------------------------------------

@dataclass
class Arrivals:
    """Photons reaching the detector, per slot and output bin."""

    slot_index: np.ndarray
    early: np.ndarray
    late: np.ndarray

    def __post_init__(self):
        self.slot_index = np.asarray(self.slot_index, dtype=np.int64)
        self.early = np.asarray(self.early, dtype=np.int64)
        self.late = np.asarray(self.late, dtype=np.int64)


@dataclass
class RawClicks:
    """Physical clicks before dead time and window gating."""

    time: np.ndarray  # absolute, seconds
    provenance: np.ndarray

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        if not parts:
            return cls(np.empty(0), np.empty(0, np.int8))
        return cls(np.concatenate([p.time for p in parts]),
                   np.concatenate([p.provenance for p in parts]))


def raw_clicks(arrivals, detector, window, rng, *, slot_range, clock_rate=DEFAULT_CLOCK_RATE,
               bit_delay=DEFAULT_BIT_DELAY):
    """Candidate clicks from signal photons and backgrounds over ``slot_range``."""
    period = 1.0 / clock_rate
    start, stop = slot_range
    n = stop - start
    sigma = detector.jitter_sigma

    times, prov = [], []
    for counts, nominal in ((arrivals.early, 0.0), (arrivals.late, bit_delay)):
        p_click = -np.expm1(counts * math.log1p(-detector.efficiency)) if detector.efficiency < 1 \
            else (counts > 0).astype(float)
        fired = rng.random(len(counts)) < p_click
        slots = arrivals.slot_index[fired]
        t = slots * period + nominal + rng.normal(0.0, sigma, len(slots))
        times.append(t)
        prov.append(np.full(len(slots), Provenance.SIGNAL, np.int8))

    t_lo = bit_delay / 2 - period / 2
    n_bb = rng.poisson(detector.blackbody_rate * n * period)
    times.append(start * period + t_lo + rng.random(n_bb) * n * period)
    prov.append(np.full(n_bb, Provenance.BLACKBODY, np.int8))

    n_raman = rng.poisson(detector.raman_rate(window) * n * period)
    r_slots = rng.integers(start, stop, n_raman)
    times.append(r_slots * period + (rng.random(n_raman) - 0.5) * window)
    prov.append(np.full(n_raman, Provenance.RAMAN, np.int8))

    return RawClicks(np.concatenate(times), np.concatenate(prov))


def dead_time_mask(times, dead_time):
    """Keep-mask for time-sorted clicks under a non-paralysable dead time.

    A click is suppressed when it falls within ``dead_time`` of the last
    *recorded* click.
    """
    n = len(times)
    keep = np.ones(n, dtype=bool)
    if n < 2 or dead_time <= 0:
        return keep
    if np.all(np.diff(times) >= dead_time):
        return keep
    last = -math.inf
    for i, t in enumerate(times.tolist()):
        if t - last < dead_time:
            keep[i] = False
        else:
            last = t
    return keep


def gate_clicks(raw, detector, window, *, clock_rate=DEFAULT_CLOCK_RATE,
                bit_delay=DEFAULT_BIT_DELAY):
    """Apply dead time, window gating, and the one-click-per-bin rule."""
    if window <= 0:
        raise DomainError("window must be > 0")
    period = 1.0 / clock_rate
    order = np.argsort(raw.time, kind="stable")
    t = raw.time[order]
    prov = raw.provenance[order]
    keep = dead_time_mask(t, detector.dead_time)
    t, prov = t[keep], prov[keep]

    t_lo = bit_delay / 2 - period / 2
    slot = np.floor((t - t_lo) / period).astype(np.int64)
    offset = t - slot * period
    half = window / 2
    early = np.abs(offset) <= half
    late = np.abs(offset - bit_delay) <= half
    in_window = early | late
    out_bin = np.where(early, OutputBin.EARLY, OutputBin.LATE).astype(np.int8)

    slot, offset, prov, out_bin = (slot[in_window], offset[in_window], prov[in_window],
                                   out_bin[in_window])
    # first click per (slot, bin)
    key = slot * 2 + out_bin
    _, first = np.unique(key, return_index=True)
    first.sort()
    return ClickLog(slot[first], offset[first], prov[first], out_bin[first])


def detect(arrivals, detector, window, rng, *, n_slots=None, clock_rate=DEFAULT_CLOCK_RATE,
           bit_delay=DEFAULT_BIT_DELAY):
    """Detector response to ``arrivals`` plus backgrounds over ``n_slots`` slots."""
    if n_slots is None:
        n_slots = int(arrivals.slot_index.max()) + 1 if len(arrivals.slot_index) else 0
    raw = raw_clicks(arrivals, detector, window, rng, slot_range=(0, n_slots),
                     clock_rate=clock_rate, bit_delay=bit_delay)
    return gate_clicks(raw, detector, window, clock_rate=clock_rate, bit_delay=bit_delay)

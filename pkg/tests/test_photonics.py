import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdlink import photonics
from qkdlink.errors import DomainError
from qkdlink.photonics import (Arrivals, DetectorModel, FilterSpec, LinkBudget, OutputBin,
                               Provenance, RawClicks, SourceModel)

BAND_1550 = FilterSpec(1550.0, 10.0)


def planck_oracle(T, lo_nm, hi_nm):
    """Mode occupation integrated over the band, independent of the code path."""
    h, k, c = mpmath.mpf("6.62607015e-34"), mpmath.mpf("1.380649e-23"), mpmath.mpf(299792458)

    def occ(nu):
        return 1 / (mpmath.exp(h * nu / (k * T)) - 1)

    return float(mpmath.quad(occ, [c / (hi_nm * mpmath.mpf(1e-9)), c / (lo_nm * mpmath.mpf(1e-9))]))


# --- source statistics --------------------------------------------------------

@pytest.mark.parametrize("mu,n", [(0.1, 0), (0.1, 1), (0.5, 3), (2.0, 7)])
def test_poisson_pmf_matches_arbitrary_precision(mu, n):
    exact = mpmath.exp(-mpmath.mpf(mu)) * mpmath.mpf(mu) ** n / mpmath.factorial(n)
    assert photonics.poisson_pmf(mu, n) == pytest.approx(float(exact), rel=1e-13)


def test_poisson_pmf_reference_values():
    assert photonics.poisson_pmf(0.1, 0) == pytest.approx(0.9048374, abs=5e-8)
    assert photonics.poisson_pmf(0.1, 1) == pytest.approx(0.0904837, abs=5e-8)
    assert photonics.poisson_pmf(1e-300, 0) == 1.0


@pytest.mark.parametrize("mu", [0.0, -0.1, math.nan, math.inf])
def test_poisson_pmf_rejects_bad_mu(mu):
    with pytest.raises(DomainError):
        photonics.poisson_pmf(mu, 0)


def test_poisson_pmf_rejects_bad_n():
    with pytest.raises(DomainError):
        photonics.poisson_pmf(0.1, -1)
    with pytest.raises(DomainError):
        photonics.poisson_pmf(0.1, 1.5)


@given(st.floats(1e-6, 5.0))
def test_poisson_pmf_normalised(mu):
    n_max = int(mu + 40 * math.sqrt(mu) + 40)
    total = math.fsum(photonics.poisson_pmf(mu, n) for n in range(n_max))
    assert abs(total - 1.0) < 1e-12


def series_multi(mu, terms=40):
    mu = mpmath.mpf(mu)
    return float(mpmath.exp(-mu) * mpmath.nsum(lambda n: mu**n / mpmath.factorial(n), [2, terms]))


@pytest.mark.parametrize("mu", [0.1, 0.02, 1e-4, 0.7])
def test_multi_photon_prob_series_oracle(mu):
    assert photonics.multi_photon_prob(mu) == pytest.approx(series_multi(mu), rel=1e-12)


def test_multi_photon_prob_reference():
    assert photonics.multi_photon_prob(0.1) == pytest.approx(0.0046788, abs=5e-8)
    assert photonics.multi_photon_prob(0.0) == 0.0
    # mu**2/2 agrees within 7 % up to mu = 0.1
    for mu in (0.02, 0.05, 0.1):
        assert abs(photonics.multi_photon_prob(mu) / (mu**2 / 2) - 1) < 0.07


def test_multi_photon_prob_small_mu_limit_and_monotone():
    mus = np.geomspace(1e-8, 1.0, 200)
    p = np.array([photonics.multi_photon_prob(m) for m in mus])
    assert np.all(np.diff(p) > 0)
    assert p[0] / (mus[0] ** 2 / 2) == pytest.approx(1.0, rel=1e-6)


def test_multi_photon_prob_rejects_negative():
    with pytest.raises(DomainError):
        photonics.multi_photon_prob(-1e-3)


# --- link budget ------------------------------------------------------------------

def test_transmittance_examples():
    assert photonics.transmittance(LinkBudget(50, 0.2)) == pytest.approx(0.1)
    assert photonics.transmittance(LinkBudget(0, 5.0, detector_efficiency=0.65)) == pytest.approx(0.65)
    base = LinkBudget(50, 0.2)
    filtered = base.with_component("bandpass", 3.2)
    ratio = photonics.transmittance(base) / photonics.transmittance(filtered)
    assert ratio == pytest.approx(10**0.32)
    assert ratio == pytest.approx(2.089, abs=5e-4)


db = st.floats(0.0, 30.0)


@given(db, db, db, db, st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_transmittance_multiplicative(l1, l2, c1, c2, e1, e2):
    a = LinkBudget(l1, 0.2, {"x": c1}, e1)
    b = LinkBudget(l2, 0.2, {"x": c2}, e2)
    joined = a.concatenate(b)
    assert photonics.transmittance(joined) == pytest.approx(
        photonics.transmittance(a) * photonics.transmittance(b), rel=1e-12)


@given(st.floats(0.1, 200.0), st.floats(0.05, 1.0), db, st.floats(0.01, 5.0))
def test_transmittance_decreasing_in_every_db_field(length, att, comp, bump):
    b = LinkBudget(length, att, {"c": comp}, 0.5)
    eta = photonics.transmittance(b)
    assert photonics.transmittance(b.with_length(length + bump)) < eta
    assert photonics.transmittance(LinkBudget(length, att + bump / 10, {"c": comp}, 0.5)) < eta
    assert photonics.transmittance(b.with_component("c", comp + bump)) < eta


@pytest.mark.parametrize("kwargs", [
    dict(fiber_length=-1), dict(fiber_length=1, attenuation=-0.1),
    dict(fiber_length=1, component_losses={"x": -1}), dict(fiber_length=1, detector_efficiency=0),
    dict(fiber_length=1, detector_efficiency=1.2)])
def test_link_budget_invariants(kwargs):
    with pytest.raises(DomainError):
        LinkBudget(**kwargs)


def test_model_invariants():
    with pytest.raises(DomainError):
        SourceModel(0.1, clock_rate=0)
    with pytest.raises(DomainError):
        DetectorModel(jitter_fwhm=0)
    with pytest.raises(DomainError):
        DetectorModel(dead_time=-1e-6)
    with pytest.raises(DomainError):
        FilterSpec(1550, 0)
    d = DetectorModel()
    assert (d.efficiency, d.dead_time, d.jitter_fwhm, d.blackbody_rate) == (0.65, 4e-6, 72e-9, 27.0)
    assert SourceModel(0.1).clock_rate == 1e6


# --- backgrounds ------------------------------------------------------------------

def test_blackbody_300k_matches_planck_integral():
    rate = photonics.blackbody_in_band_rate(300.0, BAND_1550, 1)
    # band-centre evaluation vs the integral differs by ~0.1 %
    assert rate == pytest.approx(planck_oracle(300.0, 1545, 1555), rel=3e-3)
    assert rate == pytest.approx(0.045, rel=0.02)


def test_blackbody_limits_and_modes():
    assert photonics.blackbody_in_band_rate(0.0, BAND_1550) == 0.0
    assert photonics.blackbody_in_band_rate(1.0, BAND_1550) == 0.0
    one = photonics.blackbody_in_band_rate(300.0, BAND_1550, 1)
    assert photonics.blackbody_in_band_rate(300.0, BAND_1550, 2) == pytest.approx(2 * one)
    with pytest.raises(DomainError):
        photonics.blackbody_in_band_rate(-1.0, BAND_1550)
    with pytest.raises(DomainError):
        photonics.blackbody_in_band_rate(300.0, FilterSpec(100.0, 10.0))


@given(st.floats(150, 400), st.floats(1, 50), st.floats(1.001, 1.5))
def test_blackbody_monotone_in_temperature_and_width(T, width, factor):
    band = FilterSpec(1550.0, width)
    r = photonics.blackbody_in_band_rate(T, band)
    assert photonics.blackbody_in_band_rate(T * factor, band) > r
    assert photonics.blackbody_in_band_rate(T, FilterSpec(1550.0, width * factor)) > r


def test_filtered_background_examples():
    filt = FilterSpec(1550.0, 10.0, insertion_loss=3.0, out_of_band_rejection=40.0)
    expected = 400 * 1e-4 + 0.03 * 10**-0.3 * 0.89
    rate = photonics.filtered_background_rate(400.0, 0.03, filt, 0.89)
    assert rate == pytest.approx(expected, rel=1e-12)
    assert rate == pytest.approx(0.0534, abs=1e-4)
    assert photonics.filtered_background_rate(0.0, 0.0, filt, 0.89) == 0.0
    perfect = FilterSpec(1550.0, 10.0, 3.0, math.inf)
    assert photonics.filtered_background_rate(400.0, 0.0, perfect, 0.89) == 0.0
    with pytest.raises(DomainError):
        photonics.filtered_background_rate(-1.0, 0.0, filt, 0.89)


# --- sampling ---------------------------------------------------------------------

def test_photon_counts_mean_and_distribution():
    n = 1 << 20
    counts = np.concatenate([photonics.photon_counts(0.1, 7, b, n >> 4) for b in range(16)])
    se = math.sqrt(0.1 / n)
    assert abs(counts.mean() - 0.1) < 3 * se
    assert 0.099 <= counts.mean() <= 0.101
    freq = np.bincount(counts, minlength=3)[:3] / n
    for k in range(3):
        p = photonics.poisson_pmf(0.1, k)
        assert abs(freq[k] - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_sample_emission_deterministic_and_consistent_with_batches():
    src = SourceModel(0.3)
    batch = photonics.photon_counts(0.3, 11, 2, 100)
    slot0 = 2 * (1 << 16)
    assert [photonics.sample_emission(src, slot0 + i, 11) for i in range(100)] == batch.tolist()
    assert photonics.sample_emission(src, 5, 11) == photonics.sample_emission(src, 5, 11)
    assert np.array_equal(photonics.photon_counts(0.3, 11, 0, 1000),
                          photonics.photon_counts(0.3, 11, 0, 1000))
    assert not np.array_equal(photonics.photon_counts(0.3, 11, 0, 1000),
                              photonics.photon_counts(0.3, 12, 0, 1000))
    assert photonics.photon_counts(0.0, 11, 0, 1000).sum() == 0
    assert photonics.photon_counts(1e-12, 11, 0, 100_000).sum() == 0


@given(st.floats(1e-4, 5.0), st.floats(0.0, 1.0, exclude_max=True))
def test_poisson_inverse_cdf_is_quantile(mu, u):
    k = int(photonics.poisson_inverse_cdf(mu, np.array([u]))[0])
    cdf_k = math.fsum(photonics.poisson_pmf(mu, j) for j in range(k + 1))
    cdf_km1 = cdf_k - photonics.poisson_pmf(mu, k)
    assert cdf_km1 <= u + 1e-12
    assert u < cdf_k + 1e-12


# --- detector ---------------------------------------------------------------------

def quiet(**kw):
    base = dict(efficiency=1.0, blackbody_rate=0.0, raman_rate_in_window=0.0)
    base.update(kw)
    return DetectorModel(**base)


def clicks_at(times, provenance=Provenance.SIGNAL):
    times = np.asarray(times, float)
    return RawClicks(times, np.full(len(times), provenance, np.int8))


def test_dead_time_suppresses_second_click():
    det = quiet()
    log = photonics.gate_clicks(clicks_at([0.0, 2e-6]), det, 72e-9)
    assert log.slot_index.tolist() == [0]
    log = photonics.gate_clicks(clicks_at([0.0, 5e-6]), det, 72e-9)
    assert log.slot_index.tolist() == [0, 5]


def test_dead_time_via_detect_uses_photons():
    det = quiet(jitter_fwhm=1e-12)
    arr = Arrivals([0, 2], [1, 1], [0, 0])
    log = photonics.detect(arr, det, 72e-9, np.random.default_rng(0), n_slots=3)
    assert log.slot_index.tolist() == [0]


def test_one_click_per_nonempty_slot_without_noise():
    det = quiet(dead_time=0.0)
    rng = np.random.default_rng(3)
    slots = np.sort(rng.choice(10_000, 2_000, replace=False))
    early = rng.integers(0, 3, len(slots))
    late = np.where(early == 0, rng.integers(1, 3, len(slots)), 0)
    log = photonics.detect(Arrivals(slots, early, late), det, 72e-9 * 4, rng, n_slots=10_000)
    assert log.slot_index.tolist() == slots.tolist()
    assert np.array_equal(log.output_bin, np.where(early > 0, OutputBin.EARLY, OutputBin.LATE))


def test_one_click_per_nonempty_slot_with_dead_time_spacing():
    det = quiet()
    slots = np.arange(0, 50_000, 5)
    log = photonics.detect(Arrivals(slots, np.ones(len(slots)), np.zeros(len(slots))), det,
                           72e-9, np.random.default_rng(1))
    assert len(log) == np.count_nonzero(np.abs(log.time_offset) <= 36e-9)
    assert set(log.slot_index.tolist()) <= set(slots.tolist())


def test_jitter_fwhm_recovered():
    det = quiet(dead_time=0.0)
    n = 200_000
    slots = np.arange(n)
    log = photonics.detect(Arrivals(slots, np.ones(n), np.zeros(n)), det, 300e-9,
                           np.random.default_rng(5))
    assert len(log) >= 0.99 * n
    fwhm = log.time_offset.std() * 2 * math.sqrt(2 * math.log(2))
    assert fwhm == pytest.approx(72e-9, abs=3e-9)
    assert np.all(log.provenance == Provenance.SIGNAL)


def test_efficiency_thins_photons():
    det = quiet(efficiency=0.65, dead_time=0.0)
    n = 100_000
    log = photonics.detect(Arrivals(np.arange(n), np.ones(n), np.zeros(n)), det, 300e-9,
                           np.random.default_rng(8))
    assert abs(len(log) / n - 0.65) < 3 * math.sqrt(0.65 * 0.35 / n)


def test_blackbody_in_window_rate():
    det = DetectorModel(blackbody_rate=27.0, dead_time=0.0)
    n_slots = 200_000_000
    log = photonics.detect(Arrivals([], [], []), det, 72e-9, np.random.default_rng(9),
                           n_slots=n_slots)
    seconds = n_slots / 1e6
    per_bin = 27.0 * 72e-9 * 1e6
    assert per_bin == pytest.approx(1.944)
    for b in OutputBin:
        k = np.count_nonzero(log.output_bin == b)
        assert abs(k / seconds - per_bin) < 3 * math.sqrt(per_bin * seconds) / seconds
    assert np.all(log.provenance == Provenance.BLACKBODY)


def test_raman_only_in_early_window():
    det = DetectorModel(blackbody_rate=0.0, raman_rate_in_window=30.3, dead_time=0.0)
    n_slots = 50_000_000
    log = photonics.detect(Arrivals([], [], []), det, 72e-9, np.random.default_rng(2),
                           n_slots=n_slots)
    assert np.all(log.output_bin == OutputBin.EARLY)
    assert np.all(log.provenance == Provenance.RAMAN)
    seconds = n_slots / 1e6
    assert abs(len(log) / seconds - 30.3) < 3 * math.sqrt(30.3 * seconds) / seconds


def test_click_log_records():
    log = photonics.gate_clicks(clicks_at([1e-6, 3e-6 + 320e-9]), quiet(dead_time=0.0), 72e-9)
    events = list(log)
    assert events[0] == photonics.ClickEvent(1, pytest.approx(0.0, abs=1e-15), Provenance.SIGNAL,
                                             OutputBin.EARLY)
    assert events[1].output_bin == OutputBin.LATE
    assert log[1].slot_index == 3
    assert len(photonics.ClickLog.empty()) == 0


def test_clicks_outside_windows_dropped_and_first_click_kept():
    det = quiet(dead_time=0.0)
    log = photonics.gate_clicks(clicks_at([100e-9, 10e-9, 20e-9]), det, 72e-9)
    assert log.time_offset.tolist() == pytest.approx([10e-9])
    with pytest.raises(DomainError):
        photonics.gate_clicks(clicks_at([0.0]), det, 0.0)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1e-4), max_size=40), st.floats(0, 1e-5))
def test_dead_time_mask_property(times, dead):
    t = np.sort(np.array(times))
    keep = photonics.dead_time_mask(t, dead)
    kept = t[keep]
    assert np.all(np.diff(kept) >= dead)
    # every dropped click lies within the dead time of the preceding kept click
    for i in np.flatnonzero(~keep):
        prior = kept[kept <= t[i]]
        assert len(prior) and t[i] - prior[-1] < dead

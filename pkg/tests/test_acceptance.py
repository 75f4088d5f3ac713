"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a one-line outcome that the terminal summary prints as
``[PASS]`` or ``[FAIL]``.
"""

import itertools
import math
import time

import numpy as np

from qkdlink import experiment, photonics, postproc, security, simulate, timing
from qkdlink.experiment import FIT_PARAMETERS, calibrate, load_config, load_targets
from qkdlink.photonics import DetectorModel, FilterSpec, Provenance, RawClicks
from qkdlink.security import SecurityParams, binary_entropy

NS = 1e-9
US = 1e-6


def calibrated_configs():
    targets, params = load_targets(experiment.canonical_config_path("targets_50km"))
    result = calibrate(targets, params)
    configs = {t.config.name: result.apply(t.config) for t in targets}
    # the improved receiver shares the optics but keeps its own detector
    set_receiver = FIT_PARAMETERS["receiver_loss_db"][1]
    configs["improved_filter"] = set_receiver(load_config("improved_filter"),
                                              result.parameters["receiver_loss_db"])
    return result, targets, configs


def test_criterion_1_min_mu_after_calibration(criterion):
    t0 = time.perf_counter()
    result, targets, configs = calibrated_configs()
    got = {t.config.name: security.min_mu(configs[t.config.name].scenario) for t in targets}
    elapsed = time.perf_counter() - t0
    res = {t.config.name: got[t.config.name] / t.value - 1 for t in targets}
    passed = all(abs(r) < 0.05 for r in res.values()) and elapsed < 1.0
    detail = (f"optical {got['optical_sync_50km']:.4g} ({100 * res['optical_sync_50km']:+.2f}%), "
              f"electrical {got['electrical_sync_50km']:.4g} "
              f"({100 * res['electrical_sync_50km']:+.2f}%), {elapsed:.2f} s")
    assert criterion(1, "min_mu reproduction after calibration", passed, detail)


def test_criterion_2_max_distance_held_out(criterion):
    t0 = time.perf_counter()
    _, _, configs = calibrated_configs()
    expected = {"optical_sync_50km": 83.0, "electrical_sync_50km": 138.0,
                "improved_filter": 271.0}
    got = {k: security.max_distance(configs[k].scenario) for k in expected}
    elapsed = time.perf_counter() - t0
    passed = all(abs(got[k] / v - 1) <= 0.10 for k, v in expected.items()) and elapsed < 1.0
    detail = ", ".join(f"{k.split('_')[0]} {got[k]:.1f} km (want {v:.0f})"
                       for k, v in expected.items()) + f", {elapsed:.2f} s"
    assert criterion(2, "max distance held-out check", passed, detail)


def test_criterion_3_filter_removal_factor(criterion):
    mu = 1e-4
    s_opt = security.signal_rate(security.canonical_scenario("optical_sync_50km", mu=mu))
    s_el = security.signal_rate(security.canonical_scenario("electrical_sync_50km", mu=mu))
    ratio = s_el / s_opt
    passed = abs(ratio / 2.1 - 1) <= 0.01 and abs(ratio / 10 ** 0.32 - 1) <= 1e-3
    assert criterion(3, "filter-removal factor", passed,
                     f"ratio {ratio:.4f} vs 2.1 ({100 * (ratio / 2.1 - 1):+.2f}%)")


def test_criterion_4_background_bookkeeping(criterion):
    filt = FilterSpec(1550.0, 10.0, insertion_loss=3.0, out_of_band_rejection=40.0)
    rate = photonics.filtered_background_rate(400.0, 0.03, filt, 0.89)
    passed = abs(rate - 0.053) <= 0.001
    assert criterion(4, "filtered background", passed, f"{rate:.4f} Hz (want 0.053 +/- 0.001)")


def test_criterion_5_blackbody(criterion):
    rate = photonics.blackbody_in_band_rate(300.0, FilterSpec(1550.0, 10.0), 1)
    passed = 0.01 <= rate <= 0.10
    assert criterion(5, "Planck in-band rate at 300 K", passed,
                     f"{rate:.4f} Hz in [0.01, 0.10]")


def test_criterion_6_histogram_fit_round_trip(criterion):
    t0 = time.perf_counter()
    ok = 0
    seeds = range(100)
    for seed in seeds:
        h = timing.synthetic_histogram(np.random.default_rng(seed), 1_000_000,
                                       fwhm=72 * NS, bit_delay=320 * NS,
                                       raman_delay=319.5 * NS, ratio=1.04)
        try:
            fit = timing.fit_peaks(h, bit_delay=320 * NS)
        except Exception:
            continue
        ok += bool(fit.raman_detected
                   and abs(fit.raman_delay / NS - 319.5) <= 1.0
                   and abs(fit.raman_ratio - 1.04) <= 0.02
                   and abs(fit.shared_fwhm / NS - 72.0) <= 2.0)
    elapsed = time.perf_counter() - t0
    passed = ok >= 95 and elapsed < 30
    assert criterion(6, "histogram fit round trip", passed,
                     f"{ok}/100 seeds within tolerance, 10^6 counts each, {elapsed:.1f} s")


def test_criterion_7_window_tradeoff_shape(criterion):
    fwhm = 72 * NS
    widths = np.linspace(4, 320, 80) * NS
    checks = []
    for name in ("optical_sync_50km", "electrical_sync_50km"):
        sc = security.canonical_scenario(name)
        rows = timing.window_tradeoff(sc, widths)
        signal = np.array([security.signal_rate(sc.with_window(w)) for w in widths])
        rate = np.array([r[1] for r in rows])
        qber = np.array([r[2] for r in rows])
        increasing = bool(np.all(np.diff(rate) > 0))
        # signal capture saturates: marginal gain shrinks past the FWHM
        past = widths[1:] > fwhm
        gains = np.diff(signal)[past]
        saturating = bool(np.all(np.diff(gains) < 0)) and signal[-1] / signal[-2] < 1.001
        qber_up = bool(np.all(np.diff(qber[widths >= fwhm]) > 0))
        checks.append((name, increasing, saturating, qber_up))
    capture = timing.window_capture_fraction(fwhm, fwhm)
    passed = all(all(c[1:]) for c in checks) and abs(capture - 0.761) <= 0.001
    detail = "; ".join(f"{n.split('_')[0]}: rate up {i}, saturating {s}, qber up {q}"
                       for n, i, s, q in checks) + f"; capture {capture:.4f}"
    assert criterion(7, "window trade-off shape", passed, detail)


def test_criterion_8_end_to_end_monte_carlo(criterion):
    cfg = load_config("electrical_sync_50km")
    sc = cfg.scenario
    assert sc.budget.fiber_length == 50 and sc.source.mean_photon_number == 0.1
    n_slots, seed = 1_000_000, cfg.run.seed
    t0 = time.perf_counter()
    r = simulate.run_session(sc, n_slots, seed, sample_fraction=cfg.run.sample_fraction,
                             margin=cfg.run.security_margin, n_passes=cfg.run.passes)
    elapsed = time.perf_counter() - t0

    half = r.n_detections / 2
    sift_ok = abs(r.n_sifted - half) <= 3 * math.sqrt(r.n_detections * 0.25)
    e_model = security.scenario_qber(sc)
    qber_ok = abs(r.qber - e_model) <= 3 * math.sqrt(e_model * (1 - e_model) / r.n_sifted)
    n = r.reconciled_length
    e = r.errors_corrected / n
    lo, hi = binary_entropy(e) * n, (1.25 * binary_entropy(e) + 0.02) * n
    leak_ok = r.keys_identical and lo <= r.leakage <= hi
    m = postproc.pa_output_length(n, e, r.delta, r.leakage, cfg.run.security_margin)
    pa_ok = r.pa_length == m and len(r.alice_key) == len(r.bob_key) == m
    passed = sift_ok and qber_ok and leak_ok and pa_ok and elapsed < 60
    detail = (f"seed {seed}: sifted {r.n_sifted}/{r.n_detections} ({sift_ok}), "
              f"qber {r.qber:.4f} vs {e_model:.4f} ({qber_ok}), "
              f"leakage {r.leakage} in [{lo:.1f}, {hi:.1f}] with identical keys ({leak_ok}), "
              f"PA length {r.pa_length} = {m} ({pa_ok}), {elapsed:.2f} s")
    assert criterion(8, "end-to-end Monte Carlo consistency", passed, detail)


def brute_force_dead_time(times, dead):
    kept, last = [], None
    for t in sorted(times):
        if last is None or t - last >= dead:
            kept.append(t)
            last = t
    return kept


def test_criterion_9_dead_time(criterion):
    det = DetectorModel(efficiency=1.0, blackbody_rate=0.0, dead_time=4 * US)
    # early-bin times in slots 0..8 plus late-bin times in three slots
    candidates = sorted([k * US for k in range(9)] + [k * US + 320 * NS for k in (0, 3, 4)])
    mismatches, cases = 0, 0
    for r in range(0, 5):
        for subset in itertools.combinations(candidates, r):
            cases += 1
            times = np.array(subset)
            log = photonics.gate_clicks(
                RawClicks(times, np.full(len(times), Provenance.SIGNAL, np.int8)), det, 72 * NS)
            got = (log.slot_index * US + log.time_offset).tolist()
            again = photonics.gate_clicks(
                RawClicks(times, np.full(len(times), Provenance.SIGNAL, np.int8)), det, 72 * NS)
            want = brute_force_dead_time(subset, 4 * US)
            mismatches += not (np.allclose(got, want, atol=1e-15) and len(got) == len(want)
                               and np.array_equal(again.slot_index, log.slot_index))
    pair_gaps = np.arange(0, 9) * 0.5 * US
    pairs_ok = all(
        len(photonics.gate_clicks(RawClicks(np.array([0.0, g]), np.zeros(2, np.int8)), det,
                                  72 * NS)) == (1 if g < 4 * US else 2)
        for g in pair_gaps[1:])
    passed = mismatches == 0 and pairs_ok
    assert criterion(9, "dead-time suppression", passed,
                     f"{cases} click sets, {mismatches} mismatches; pairs by gap ok {pairs_ok}")


def test_criterion_10_two_universal_hash(criterion):
    rng = np.random.default_rng(2024)
    x, y = rng.integers(0, 2, (2, 32), dtype=np.uint8)
    trials, m = 100_000, 16
    hits = 0
    for _ in range(trials):
        spec = postproc.AmplificationSpec.random(32, m, rng)
        hits += np.array_equal(postproc.privacy_amplify(x, spec),
                               postproc.privacy_amplify(y, spec))
    p = 2.0**-m
    sigma = math.sqrt(trials * p * (1 - p))
    passed = abs(hits - trials * p) <= 3 * sigma
    assert criterion(10, "2-universal amplification hash", passed,
                     f"{hits} collisions in {trials} seeds (expect {trials * p:.2f} "
                     f"+/- {3 * sigma:.2f})")


def test_criterion_11_secret_fraction_boundary(criterion):
    r = security.secret_fraction(0.11, 0.0, SecurityParams(ec_inefficiency=1.0))
    h = binary_entropy(0.11)
    passed = r <= 1e-3 and abs(h - 0.4999) < 1e-4
    assert criterion(11, "secret fraction at 11% QBER", passed, f"r = {r:.2e}, h2(0.11) = {h:.4f}")

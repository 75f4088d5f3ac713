import math

import numpy as np
import pytest

from qkdlink import postproc, security, simulate
from qkdlink.errors import DomainError
from qkdlink.security import binary_entropy


def three_sigma(observed, n, p):
    return abs(observed - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_zero_slots():
    r = simulate.run_session(security.canonical_scenario("electrical_sync_50km"), 0, 1)
    assert (r.n_detections, r.n_sifted, r.pa_length, r.leakage) == (0, 0, 0, 0)
    assert math.isnan(r.qber) and r.detection_rate == 0.0 and r.secret_rate == 0.0
    assert r.keys_identical
    with pytest.raises(DomainError):
        simulate.run_session(security.canonical_scenario("electrical_sync_50km"), -1, 1)


@pytest.mark.parametrize("name", sorted(security.CANONICAL))
def test_monte_carlo_matches_analytic(name):
    sc = security.canonical_scenario(name, mu=0.1)
    n_slots = 2_000_000
    r = simulate.run_session(sc, n_slots, 11)
    a = simulate.analytic_point(sc)
    p_det = a["detection_rate"] / sc.source.clock_rate
    assert three_sigma(r.n_detections, n_slots, p_det)
    assert three_sigma(r.n_sifted, r.n_detections, 0.5)
    assert three_sigma(r.n_errors, r.n_sifted, a["qber"])
    assert r.keys_identical


def test_session_is_deterministic():
    sc = security.canonical_scenario("electrical_sync_50km")
    r1 = simulate.run_session(sc, 500_000, 5)
    r2 = simulate.run_session(sc, 500_000, 5)
    assert r1.transcripts == r2.transcripts
    assert np.array_equal(r1.bob_key, r2.bob_key)
    r3 = simulate.run_session(sc, 500_000, 6)
    assert r3.transcripts != r1.transcripts


def test_socket_and_pipe_agree():
    sc = security.canonical_scenario("electrical_sync_50km")
    r1 = simulate.run_session(sc, 300_000, 8)
    r2 = simulate.run_session(sc, 300_000, 8, transport="socket")
    assert r1.transcripts == r2.transcripts
    assert r1.leakage == r2.leakage and r1.pa_length == r2.pa_length


def test_bookkeeping():
    sc = security.canonical_scenario("electrical_sync_50km", mu=0.1)
    r = simulate.run_session(sc, 1_000_000, 3)
    assert r.sample_size == round(0.1 * r.n_sifted)
    assert r.reconciled_length == r.n_sifted - r.sample_size
    assert r.errors_corrected <= r.n_errors
    assert r.duration == pytest.approx(1.0)
    assert r.block_size_schedule[0] >= 2
    assert len(r.block_size_schedule) == postproc.DEFAULT_PASSES
    assert r.delta == pytest.approx(
        security.photonics.multi_photon_prob(0.1) / (r.n_detections / 1_000_000))


def test_pa_length_follows_observed_values():
    sc = security.canonical_scenario("electrical_sync_50km", mu=0.01)
    r = simulate.run_session(sc, 4_000_000, 2)
    n = r.reconciled_length
    expected = postproc.pa_output_length(n, r.errors_corrected / n, r.delta, r.leakage,
                                         postproc.DEFAULT_MARGIN)
    assert r.pa_length == expected
    assert len(r.alice_key) == len(r.bob_key) == r.pa_length
    assert r.keys_identical


def test_positive_key_at_low_mu_over_long_run():
    sc = security.canonical_scenario("electrical_sync_50km", mu=0.01)
    r = simulate.run_session(sc, 20_000_000, 4)
    assert r.pa_length > 0 and r.keys_identical
    assert r.secret_rate == r.pa_length / r.duration


def test_correction_failure_aborts_cleanly():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 2, 400, dtype=np.uint8)
    b = a.copy()
    b[::2] ^= 1  # half the key wrong; one pass cannot fix it
    out = simulate.postprocess(a, b, session_id=1, p_click=0.01, mu=0.1, seed=0, n_passes=1)
    assert out["correction_failed"]
    assert out["alice_key"] is None and out["bob_key"] is None
    assert out["leakage"] > 0 and out["pa_length"] == 0


def test_postprocess_rejects_unequal_keys():
    with pytest.raises(DomainError):
        simulate.postprocess(np.zeros(3), np.zeros(4), session_id=0, p_click=0.1, mu=0.1, seed=0)


def test_leakage_band_in_long_session():
    # long keys: sample estimate of e is tight, so the reconciliation band holds
    sc = security.canonical_scenario("electrical_sync_50km", mu=0.1)
    r = simulate.run_session(sc, 20_000_000, 9)
    n = r.reconciled_length
    e = r.errors_corrected / n
    assert r.keys_identical
    assert binary_entropy(e) * n <= r.leakage <= (1.25 * binary_entropy(e) + 0.02) * n


def test_analytic_point_fields():
    a = simulate.analytic_point(security.canonical_scenario("electrical_sync_50km"))
    assert a["detection_rate"] == pytest.approx(a["signal_rate"] + a["background_rate"])
    assert a["sifted_rate"] == pytest.approx(0.5 * a["detection_rate"])
    assert 0 < a["qber"] < 0.11
    assert a["secret_rate"] == 0.0 and a["multiphoton_fraction"] > 1

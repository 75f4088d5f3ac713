"""End-to-end Monte Carlo session: quantum phase, sifting, QBER sampling,
reconciliation and privacy amplification.

Every classical step runs over the framed public channel, so a session's
transcripts can be replayed byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _rng, photonics, postproc, protocol, security, wire
from .errors import CorrectionFailure, DomainError, PeerAbort
from .wire import AbortReason

DEFAULT_SAMPLE_FRACTION = 0.1
# block-size guess when the sample shows no errors
FALLBACK_QBER = 0.01


@dataclass
class SessionResult:
    """Observables of one simulated session.

    Rates are per second of simulated clock time.  ``qber`` compares the
    full sifted keys and is only known to the simulator; ``qber_estimate``
    is what Bob learns from the disclosed sample.
    """

    n_slots: int
    duration: float
    n_detections: int
    n_sifted: int
    n_errors: int
    sample_size: int
    sample_errors: int
    reconciled_length: int
    errors_corrected: int
    leakage: int
    block_size_schedule: list
    keys_identical: bool
    correction_failed: bool
    delta: float
    pa_length: int
    alice_key: np.ndarray = field(repr=False)
    bob_key: np.ndarray = field(repr=False)
    transcripts: tuple = field(default=(b"", b""), repr=False)

    @property
    def qber(self):
        return self.n_errors / self.n_sifted if self.n_sifted else math.nan

    @property
    def qber_estimate(self):
        return self.sample_errors / self.sample_size if self.sample_size else math.nan

    @property
    def sift_fraction(self):
        return self.n_sifted / self.n_detections if self.n_detections else math.nan

    @property
    def detection_rate(self):
        return self.n_detections / self.duration if self.duration else 0.0

    @property
    def sifted_rate(self):
        return self.n_sifted / self.duration if self.duration else 0.0

    @property
    def secret_rate(self):
        return self.pa_length / self.duration if self.duration else 0.0

    @property
    def leakage_per_bit(self):
        return self.leakage / self.reconciled_length if self.reconciled_length else math.nan


def _sample_positions(n, fraction, rng):
    k = int(round(n * fraction))
    return np.sort(rng.choice(n, size=k, replace=False)) if k else np.empty(0, np.int64)


def postprocess(alice_bits, bob_bits, *, session_id, p_click, mu, seed,
                sample_fraction=DEFAULT_SAMPLE_FRACTION, margin=postproc.DEFAULT_MARGIN,
                n_passes=postproc.DEFAULT_PASSES, transport="pipe"):
    """Run the classical stage on sifted keys; returns a dict of outcomes.

    A correction failure is reported through ``correction_failed`` after
    Bob aborts the session; no key is produced in that case.
    """
    alice_bits = np.asarray(alice_bits, np.uint8)
    bob_bits = np.asarray(bob_bits, np.uint8)
    if len(alice_bits) != len(bob_bits):
        raise DomainError("sifted keys must have equal length")
    rng = _rng.batch_rng(seed, 0, _rng.Stream.POSTPROC)
    delta = photonics.multi_photon_prob(mu) / p_click if p_click > 0 else 0.0

    def alice(ep):
        responder = postproc.ParityResponder(ep, alice_bits, session_id)
        responder.serve_until_digest()
        try:
            key = postproc.amplify_alice(ep, responder.key)
        except PeerAbort as exc:
            if exc.reason != AbortReason.CORRECTION_FAILED:
                raise
            key = None
        return key

    def bob(ep):
        pos = _sample_positions(len(bob_bits), sample_fraction, rng)
        sample, pos = postproc.request_sample(ep, bob_bits, pos)
        sample_errors = int(np.count_nonzero(sample != bob_bits[pos]))
        key = np.delete(bob_bits, pos)
        e_est = sample_errors / len(pos) if len(pos) else 0.0
        k1 = postproc.initial_block_size(e_est or FALLBACK_QBER, len(key) or None)
        out = dict(sample_size=len(pos), sample_errors=sample_errors,
                   reconciled_length=len(key), delta=delta)
        try:
            sess = postproc.cascade_bob(ep, key, session_id, k1, n_passes)
        except CorrectionFailure as exc:
            ep.send(wire.abort(AbortReason.CORRECTION_FAILED))
            out.update(correction_failed=True, leakage=exc.leakage, errors_corrected=0,
                       block_size_schedule=[], pa_length=0, key=None)
            return out
        n = len(sess.corrected_key)
        e = sess.errors_corrected / n if n else 0.0
        m = postproc.pa_output_length(n, e, delta, sess.parity_bits_disclosed, margin)
        final = postproc.amplify_bob(ep, sess.corrected_key, m, rng, margin)
        out.update(correction_failed=False, leakage=sess.parity_bits_disclosed,
                   errors_corrected=sess.errors_corrected,
                   block_size_schedule=sess.block_size_schedule, pa_length=m, key=final)
        return out

    key_a, out, ea, eb = wire.run_parties(alice, bob, transport=transport)
    out["alice_key"] = key_a
    out["bob_key"] = out.pop("key")
    out["transcripts"] = (ea.transcript, eb.transcript)
    return out


def run_session(scenario, n_slots, seed, *, sample_fraction=DEFAULT_SAMPLE_FRACTION,
                margin=postproc.DEFAULT_MARGIN, n_passes=postproc.DEFAULT_PASSES,
                transport="pipe"):
    """Simulate one complete key-generation session for ``scenario``."""
    if n_slots < 0:
        raise DomainError("n_slots must be >= 0")
    emissions, measurements = protocol.run_quantum_phase(
        scenario.source, scenario.budget, scenario.interferometer, scenario.detector,
        n_slots, seed, window=scenario.window)
    sifted, _, _ = protocol.sift(emissions, measurements, transport=transport)
    n_det = len(measurements)
    p_click = n_det / n_slots if n_slots else 0.0
    post = postprocess(sifted.alice_bits, sifted.bob_bits,
                       session_id=emissions.session_id, p_click=p_click,
                       mu=scenario.source.mean_photon_number, seed=seed,
                       sample_fraction=sample_fraction, margin=margin, n_passes=n_passes,
                       transport=transport)
    empty = np.empty(0, np.uint8)
    ka = post["alice_key"] if post["alice_key"] is not None else empty
    kb = post["bob_key"] if post["bob_key"] is not None else empty
    return SessionResult(
        n_slots=n_slots,
        duration=n_slots * scenario.source.period,
        n_detections=n_det,
        n_sifted=len(sifted),
        n_errors=int(np.count_nonzero(sifted.alice_bits != sifted.bob_bits)),
        sample_size=post["sample_size"],
        sample_errors=post["sample_errors"],
        reconciled_length=post["reconciled_length"],
        errors_corrected=post["errors_corrected"],
        leakage=post["leakage"],
        block_size_schedule=post["block_size_schedule"],
        keys_identical=not post["correction_failed"] and np.array_equal(ka, kb),
        correction_failed=post["correction_failed"],
        delta=post["delta"],
        pa_length=post["pa_length"],
        alice_key=ka,
        bob_key=kb,
        transcripts=post["transcripts"],
    )


def analytic_point(scenario, params=security.SecurityParams()):
    """Model predictions matching the fields of :class:`SessionResult`."""
    S, B = security.click_rates(scenario)
    return dict(
        detection_rate=S + B,
        signal_rate=S,
        background_rate=B,
        sifted_rate=security.sifted_rate(scenario),
        qber=security.scenario_qber(scenario),
        multiphoton_fraction=security.multiphoton_fraction(scenario),
        secret_rate=security.secret_rate(scenario, params),
    )

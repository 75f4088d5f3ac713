"""BB84 phase-encoding engines for Alice and Bob.

The quantum phase runs in batches of ``BATCH_SLOTS`` slots.  Alice's bits,
bases and photon numbers, the channel thinning, Bob's basis choices and the
detector response each come from their own seeded stream, so a run is
reproducible and batch order does not matter.

Sifting is done over the framed public channel in :mod:`qkdlink.wire`; only
slot indices and basis values cross it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import _rng, photonics, wire
from .errors import DomainError, ProtocolError
from .wire import AbortReason, FrameType


class Basis(IntEnum):
    A = 0
    B = 1


# phase in units of pi/2: bit * 2 + basis
QUARTER_TURN = math.pi / 2
_COS_QUARTER = np.array([1.0, 0.0, -1.0, 0.0])


@dataclass(frozen=True)
class InterferometerModel:
    visibility: float = 1.0
    protocol_efficiency: float = 0.5
    bit_delay: float = photonics.DEFAULT_BIT_DELAY

    def __post_init__(self):
        if not (0 <= self.visibility <= 1):
            raise DomainError(f"visibility must be in [0, 1], got {self.visibility!r}")
        if not (0 < self.protocol_efficiency <= 1):
            raise DomainError("protocol_efficiency must be in (0, 1]")
        if not self.bit_delay > 0:
            raise DomainError("bit_delay must be > 0")

    @property
    def intrinsic_error(self):
        return (1.0 - self.visibility) / 2.0

    @classmethod
    def from_intrinsic_error(cls, e_int, **kwargs):
        return cls(visibility=1.0 - 2.0 * e_int, **kwargs)


@dataclass(frozen=True)
class EmissionRecord:
    slot_index: int
    bit: int
    basis: Basis
    phase: float
    photon_count: int


@dataclass(frozen=True)
class MeasurementRecord:
    slot_index: int
    bob_basis: Basis
    bob_phase: float
    outcome_bit: int
    click_time_offset: float


@dataclass
class EmissionLog:
    """Alice's per-slot records, stored column-wise."""

    session_id: int
    bits: np.ndarray
    bases: np.ndarray
    photon_count: np.ndarray

    @property
    def n_slots(self):
        return len(self.bits)

    @property
    def phase(self):
        return (2 * self.bits + self.bases) * QUARTER_TURN

    def __len__(self):
        return self.n_slots

    def __getitem__(self, i):
        return EmissionRecord(i, int(self.bits[i]), Basis(int(self.bases[i])),
                              alice_prepare(int(self.bits[i]), Basis(int(self.bases[i]))),
                              int(self.photon_count[i]))


@dataclass
class MeasurementLog:
    """Bob's detection records plus his basis choice for every slot."""

    session_id: int
    n_slots: int
    slot_index: np.ndarray
    outcome_bit: np.ndarray
    click_time_offset: np.ndarray
    bases: np.ndarray  # all slots, Bob's own choice

    def __len__(self):
        return len(self.slot_index)

    def __getitem__(self, i):
        slot = int(self.slot_index[i])
        basis = Basis(int(self.bases[slot]))
        return MeasurementRecord(slot, basis, basis * QUARTER_TURN, int(self.outcome_bit[i]),
                                 float(self.click_time_offset[i]))


@dataclass
class PartyKey:
    slot_indices: np.ndarray
    bits: np.ndarray


@dataclass
class SiftedKey:
    slot_indices: np.ndarray
    alice_bits: np.ndarray
    bob_bits: np.ndarray

    def __post_init__(self):
        if not (len(self.slot_indices) == len(self.alice_bits) == len(self.bob_bits)):
            raise ValueError("sifted key columns differ in length")

    def __len__(self):
        return len(self.slot_indices)


def alice_prepare(bit, basis):
    """Phase-modulator setting for ``bit`` in ``basis``."""
    if bit not in (0, 1):
        raise DomainError(f"bit must be 0 or 1, got {bit!r}")
    return bit * math.pi + (QUARTER_TURN if Basis(basis) == Basis.B else 0.0)


def early_probability(delta_phi, visibility):
    return (1.0 + visibility * np.cos(delta_phi)) / 2.0


def interference_outcome(delta_phi, interferometer, rng):
    """Output bin of a photon given the Alice-Bob phase difference."""
    p_early = early_probability(delta_phi, interferometer.visibility)
    return photonics.OutputBin.EARLY if rng.random() < p_early else photonics.OutputBin.LATE


def _bob_measurements(clicks, bob_bases, session_id, n_slots):
    """Bob's engine: keep single-bin detections; double clicks are dropped."""
    slots, counts = np.unique(clicks.slot_index, return_counts=True)
    single = np.isin(clicks.slot_index, slots[counts == 1])
    c = clicks.select(single)
    return MeasurementLog(session_id, n_slots, c.slot_index, c.output_bin.astype(np.uint8),
                          c.time_offset, bob_bases)


def run_quantum_phase(source, budget, interferometer, detector, n_slots, seed, *,
                      window=72e-9, session_id=None, return_clicks=False):
    """Simulate ``n_slots`` clock periods of the quantum channel.

    ``budget.detector_efficiency`` is ignored here; the detector's own
    efficiency is applied in :func:`photonics.detect`.
    """
    if session_id is None:
        session_id = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
    mu = source.mean_photon_number
    p_channel = (10.0 ** (-budget.total_loss_db / 10.0)) * interferometer.protocol_efficiency
    V = interferometer.visibility

    bits = np.empty(n_slots, np.uint8)
    bases = np.empty(n_slots, np.uint8)
    photons = np.empty(n_slots, np.int64)
    bob_bases = np.empty(n_slots, np.uint8)
    raw = []
    for b, start, stop in _rng.batch_ranges(n_slots):
        nb = stop - start
        bits[start:stop] = _rng.batch_rng(seed, b, _rng.Stream.ALICE_BITS).integers(0, 2, nb)
        bases[start:stop] = _rng.batch_rng(seed, b, _rng.Stream.ALICE_BASES).integers(0, 2, nb)
        photons[start:stop] = photonics.photon_counts(mu, seed, b, nb)
        bob_bases[start:stop] = _rng.batch_rng(seed, b, _rng.Stream.BOB_BASES).integers(0, 2, nb)

        ch = _rng.batch_rng(seed, b, _rng.Stream.CHANNEL)
        arrived = ch.binomial(photons[start:stop], p_channel)
        hit = np.flatnonzero(arrived)
        quarter = (2 * bits[start:stop][hit].astype(np.int64) + bases[start:stop][hit]
                   - bob_bases[start:stop][hit]) % 4
        p_early = (1.0 + V * _COS_QUARTER[quarter]) / 2.0
        early = ch.binomial(arrived[hit], p_early)
        arrivals = photonics.Arrivals(hit + start, early, arrived[hit] - early)
        raw.append(photonics.raw_clicks(
            arrivals, detector, window, _rng.batch_rng(seed, b, _rng.Stream.DETECTOR),
            slot_range=(start, stop), clock_rate=source.clock_rate,
            bit_delay=interferometer.bit_delay))

    clicks = photonics.gate_clicks(photonics.RawClicks.concat(raw), detector, window,
                                   clock_rate=source.clock_rate,
                                   bit_delay=interferometer.bit_delay)
    emissions = EmissionLog(session_id, bits, bases, photons)
    measurements = _bob_measurements(clicks, bob_bases, session_id, n_slots)
    if return_clicks:
        return emissions, measurements, clicks
    return emissions, measurements


# --- sifting over the public channel ----------------------------------------

def alice_sift(endpoint, emissions):
    """Alice's side of sifting; returns her :class:`PartyKey`."""
    endpoint.send(wire.session_start(emissions.session_id, emissions.n_slots))
    detected = wire.unpack_indices(endpoint.expect(FrameType.DETECTIONS))
    if len(detected) and (detected[-1] >= emissions.n_slots or np.any(np.diff(detected) <= 0)):
        endpoint.send(wire.abort(AbortReason.SLOT_RANGE))
        raise ProtocolError("detection indices out of range or unsorted")
    endpoint.send(wire.Frame(FrameType.BASES, wire.pack_bits(emissions.bases[detected])))
    bob_bases = wire.unpack_bits(endpoint.expect(FrameType.BASES))
    if len(bob_bases) != len(detected):
        endpoint.send(wire.abort(AbortReason.LENGTH_MISMATCH))
        raise ProtocolError("basis list length does not match detections")
    keep = detected[emissions.bases[detected] == bob_bases]
    endpoint.send(wire.sift_ack(emissions.session_id, len(keep)))
    sid, n = wire.parse_sift_ack(endpoint.expect(FrameType.SIFT_ACK))
    if sid != emissions.session_id or n != len(keep):
        raise ProtocolError("sift acknowledgement mismatch")
    return PartyKey(keep, emissions.bits[keep].copy())


def bob_sift(endpoint, measurements):
    """Bob's side of sifting; returns his :class:`PartyKey`."""
    sid, n_slots = wire.parse_session_start(endpoint.expect(FrameType.SESSION_START))
    if sid != measurements.session_id:
        endpoint.send(wire.abort(AbortReason.SESSION_MISMATCH))
        raise ProtocolError(f"session id {sid} does not match {measurements.session_id}")
    if n_slots != measurements.n_slots:
        endpoint.send(wire.abort(AbortReason.SLOT_RANGE))
        raise ProtocolError("slot range mismatch")
    detected = np.asarray(measurements.slot_index, dtype=np.int64)
    endpoint.send(wire.Frame(FrameType.DETECTIONS, wire.pack_indices(detected)))
    alice_bases = wire.unpack_bits(endpoint.expect(FrameType.BASES))
    if len(alice_bases) != len(detected):
        endpoint.send(wire.abort(AbortReason.LENGTH_MISMATCH))
        raise ProtocolError("basis list length does not match detections")
    own = measurements.bases[detected]
    endpoint.send(wire.Frame(FrameType.BASES, wire.pack_bits(own)))
    match = own == alice_bases
    sid_a, n = wire.parse_sift_ack(endpoint.expect(FrameType.SIFT_ACK))
    if sid_a != measurements.session_id or n != int(match.sum()):
        endpoint.send(wire.abort(AbortReason.LENGTH_MISMATCH))
        raise ProtocolError("sift acknowledgement mismatch")
    endpoint.send(wire.sift_ack(sid_a, n))
    return PartyKey(detected[match], measurements.outcome_bit[match].astype(np.uint8))


def sift(emissions, measurements, transport="pipe"):
    """Run both sifting engines over a fresh channel.

    Returns ``(SiftedKey, alice_endpoint, bob_endpoint)``; the endpoints keep
    the transcripts.
    """
    ka, kb, ea, eb = wire.run_parties(lambda ep: alice_sift(ep, emissions),
                                      lambda ep: bob_sift(ep, measurements),
                                      transport=transport)
    if not np.array_equal(ka.slot_indices, kb.slot_indices):
        raise ProtocolError("parties disagree on the sifted slot set")
    return SiftedKey(ka.slot_indices, ka.bits, kb.bits), ea, eb


def qber_measure(key_a, key_b):
    """Fraction of positions where the two bit strings differ."""
    a = np.asarray(key_a, dtype=np.uint8)
    b = np.asarray(key_b, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError(f"key lengths differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("cannot measure QBER of empty keys")
    return float(np.count_nonzero(a != b)) / a.size

"""Classical postprocessing: parity-based reconciliation, verification and
privacy amplification.

Reconciliation follows the Cascade scheme.  Bob drives it; Alice only answers
parity requests.  Pass 0 uses the sifted order; later passes use public
permutations derived from the session id, with the block size doubling each
pass.  Whenever Bob flips a bit, every earlier block containing it changes
parity and is bisected again.  The leakage is the number of parity bits
Alice discloses.

All traffic uses the frames of :mod:`qkdlink.wire`.  Parity requests with pass
index ``SAMPLE_PASS`` ask for raw bit values; those positions are then dropped
by both sides.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from . import wire
from .errors import CorrectionFailure, DomainError, PeerAbort, ProtocolError
from .security import binary_entropy
from .wire import AbortReason, FrameType

SAMPLE_PASS = 0xFF
DIGEST_BYTES = 4
DEFAULT_PASSES = 5
DEFAULT_MARGIN = 30
MIN_BLOCKS = 4


def _as_bits(key):
    return np.ascontiguousarray(key, dtype=np.uint8)


def initial_block_size(qber, n=None):
    """First-pass block size ``ceil(0.73 / e)``, clamped to ``[2, n]``."""
    k = math.ceil(0.73 / qber) if qber > 0 else (n or 1 << 30)
    k = max(k, 2)
    return min(k, n) if n else k


def pass_permutation(session_id, pass_index, n):
    if pass_index == 0:
        return np.arange(n)
    ss = np.random.SeedSequence([int(session_id), int(pass_index), n])
    return np.random.Generator(np.random.PCG64(ss)).permutation(n)


def key_digest(key):
    """Unkeyed 32-bit digest; for simulation bookkeeping, not authentication."""
    bits = _as_bits(key)
    h = hashlib.blake2b(struct.pack("<Q", len(bits)) + np.packbits(bits).tobytes(),
                        digest_size=DIGEST_BYTES)
    return h.digest()


@dataclass
class CorrectionSession:
    block_size_schedule: list
    parity_bits_disclosed: int = 0
    passes: int = 0
    corrected_key: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint8))
    errors_corrected: int = 0
    verified: bool = False


# --- Alice ----------------------------------------------------------------------

class ParityResponder:
    """Alice's side: answers parity and sample requests, checks digests."""

    def __init__(self, endpoint, key, session_id):
        self.ep = endpoint
        self.key = _as_bits(key).copy()
        self.session_id = session_id
        self._perms = {}
        self.disclosed = 0
        self.digest_match = None

    def _perm(self, p):
        if p not in self._perms:
            self._perms[p] = pass_permutation(self.session_id, p, len(self.key))
        return self._perms[p]

    def _answer(self, blocks):
        if blocks and all(p == SAMPLE_PASS for p, _, _ in blocks):
            pos = np.array([s for _, s, _ in blocks], dtype=np.int64)
            if np.any(pos >= len(self.key)):
                raise ProtocolError("sample position out of range")
            bits = self.key[pos]
            self.key = np.delete(self.key, pos)
            self._perms.clear()
            return bits
        out = np.empty(len(blocks), np.uint8)
        n = len(self.key)
        for i, (p, s, e) in enumerate(blocks):
            if p == SAMPLE_PASS or not (0 <= s < e <= n):
                self.ep.send(wire.abort(AbortReason.SLOT_RANGE))
                raise ProtocolError(f"bad parity block {(p, s, e)}")
            out[i] = self.key[self._perm(p)[s:e]].sum() & 1
        self.disclosed += len(blocks)
        return out

    def handle(self, frame):
        """Process one frame; returns the frame type handled."""
        if frame.type == FrameType.PARITY_REQUEST:
            bits = self._answer(wire.parse_parity_request(frame.payload))
            self.ep.send(wire.Frame(FrameType.PARITY_RESPONSE, wire.pack_bits(bits)))
        elif frame.type == FrameType.KEY_DIGEST:
            length, digest = wire.parse_key_digest(frame.payload)
            self.digest_match = length == len(self.key) and digest == key_digest(self.key)
            self.ep.send(wire.key_digest(len(self.key), key_digest(self.key)))
        elif frame.type == FrameType.ABORT:
            raise PeerAbort(wire.abort_reason(frame.payload))
        else:
            self.ep.send(wire.abort(AbortReason.UNEXPECTED_FRAME))
            raise ProtocolError(f"unexpected frame {frame.type.name}")
        return frame.type

    def serve_until_digest(self):
        while self.handle(self.ep.recv()) != FrameType.KEY_DIGEST:
            pass
        return self.digest_match


# --- Bob ------------------------------------------------------------------------

def _request(ep, blocks):
    if not blocks:
        return np.empty(0, np.uint8)
    ep.send(wire.parity_request(blocks))
    bits = wire.unpack_bits(ep.expect(FrameType.PARITY_RESPONSE))
    if len(bits) != len(blocks):
        raise ProtocolError("parity response length mismatch")
    return bits


def request_sample(ep, key, positions):
    """Bob asks for Alice's bits at ``positions``.

    Both sides drop the sampled positions afterwards.  Returns
    ``(alice_bits, sorted_positions)``.
    """
    positions = np.sort(np.asarray(positions, dtype=np.int64))
    alice = _request(ep, [(SAMPLE_PASS, int(s), int(s) + 1) for s in positions])
    return alice, positions


def verify_digest_bob(ep, key):
    ep.send(wire.key_digest(len(key), key_digest(key)))
    length, digest = wire.parse_key_digest(ep.expect(FrameType.KEY_DIGEST))
    return length == len(key) and digest == key_digest(key)


def cascade_bob(ep, key, session_id, first_block_size, n_passes=DEFAULT_PASSES):
    """Bob's reconciliation; returns a :class:`CorrectionSession`.

    Raises :class:`CorrectionFailure` if the final digests differ.
    """
    key = _as_bits(key).copy()
    n = len(key)
    # at least MIN_BLOCKS blocks per pass, else short keys hide error pairs
    cap = n // MIN_BLOCKS or 1
    sizes = [max(1, min(first_block_size * 2**p, cap)) for p in range(n_passes)]
    session = CorrectionSession(block_size_schedule=sizes)
    if n == 0:
        session.corrected_key = key
        session.verified = verify_digest_bob(ep, key)
        return session

    perms, inv, alice_par, bob_par = [], [], [], []
    known = {}
    leak = 0

    def bob_parity(p, s, e):
        return int(key[perms[p][s:e]].sum() & 1)

    def flip(pos):
        key[pos] ^= 1
        for q in range(len(perms)):
            bob_par[q][inv[q][pos] // sizes[q]] ^= 1

    def ask(blocks):
        nonlocal leak
        todo = [b for b in blocks if b not in known]
        bits = _request(ep, todo)
        leak += len(todo)
        for b, v in zip(todo, bits):
            known[b] = int(v)

    def bisect(q, starts):
        active = [(s, min(s + sizes[q], n)) for s in starts]
        while active:
            ask([(q, s, (s + e) // 2) for s, e in active if e - s > 1])
            nxt = []
            for s, e in active:
                if e - s == 1:
                    flip(int(perms[q][s]))
                    session.errors_corrected += 1
                    continue
                mid = (s + e) // 2
                if known[(q, s, mid)] != bob_parity(q, s, mid):
                    nxt.append((s, mid))
                else:
                    nxt.append((mid, e))
            active = nxt

    for p in range(n_passes):
        perm = pass_permutation(session_id, p, n)
        perms.append(perm)
        inv.append(np.argsort(perm))
        k = sizes[p]
        starts = np.arange(0, n, k)
        blocks = [(p, int(s), int(min(s + k, n))) for s in starts]
        ask(blocks)
        alice_par.append(np.array([known[b] for b in blocks], dtype=np.uint8))
        bob_par.append(np.add.reduceat(key[perm], starts).astype(np.uint8) & 1)
        session.passes = p + 1
        while True:
            odd = [np.flatnonzero(alice_par[q] != bob_par[q]) for q in range(p + 1)]
            q = next((q for q in range(p + 1) if len(odd[q])), None)
            if q is None:
                break
            bisect(q, [int(i) * sizes[q] for i in odd[q]])

    session.parity_bits_disclosed = leak
    session.corrected_key = key
    session.verified = verify_digest_bob(ep, key)
    if not session.verified:
        raise CorrectionFailure(f"keys differ after {n_passes} passes", leakage=leak)
    return session


def reconcile(key_a, key_b, initial_block_size, *, session_id=0, n_passes=DEFAULT_PASSES,
              transport="pipe"):
    """Run both reconciliation parties; returns ``(bob_session, alice_responder)``."""
    key_a, key_b = _as_bits(key_a), _as_bits(key_b)
    if len(key_a) != len(key_b):
        raise DomainError("keys must have equal length")

    def alice(ep):
        r = ParityResponder(ep, key_a, session_id)
        r.serve_until_digest()
        return r

    def bob(ep):
        return cascade_bob(ep, key_b, session_id, initial_block_size, n_passes)

    responder, session, _, _ = wire.run_parties(alice, bob, transport=transport)
    return session, responder


def correct_errors(key_a, key_b, initial_block_size, *, session_id=0, n_passes=DEFAULT_PASSES,
                   transport="pipe"):
    """Reconcile Bob's key to Alice's; returns ``(corrected_key_b, leakage_bits)``."""
    session, _ = reconcile(key_a, key_b, initial_block_size, session_id=session_id,
                           n_passes=n_passes, transport=transport)
    return session.corrected_key, session.parity_bits_disclosed


def verify_digest(key_a, key_b, transport="pipe"):
    """Exchange 32-bit digests over a channel; True iff they agree.

    Distinct keys collide with probability about 2**-32.
    """
    key_a, key_b = _as_bits(key_a), _as_bits(key_b)

    def alice(ep):
        r = ParityResponder(ep, key_a, 0)
        return r.serve_until_digest()

    ok_a, ok_b, _, _ = wire.run_parties(alice, lambda ep: verify_digest_bob(ep, key_b),
                                        transport=transport)
    return bool(ok_a and ok_b)


# --- privacy amplification --------------------------------------------------------

@dataclass(frozen=True)
class AmplificationSpec:
    input_length: int
    output_length: int
    seed: np.ndarray
    security_margin: int = DEFAULT_MARGIN

    def __post_init__(self):
        object.__setattr__(self, "seed", _as_bits(self.seed))
        if not (0 <= self.output_length <= self.input_length):
            raise DomainError("output length must satisfy 0 <= m <= n")
        if self.output_length and len(self.seed) != self.input_length + self.output_length - 1:
            raise DomainError(
                f"seed must have n + m - 1 = {self.input_length + self.output_length - 1} bits, "
                f"got {len(self.seed)}")

    @classmethod
    def random(cls, n, m, rng, security_margin=DEFAULT_MARGIN):
        seed = rng.integers(0, 2, max(n + m - 1, 0), dtype=np.uint8) if m else np.empty(0, np.uint8)
        return cls(n, m, seed, security_margin)


def pa_output_length(n, e, delta, leakage, margin=DEFAULT_MARGIN):
    """Secret key length after amplification (bits)."""
    if n <= 0:
        return 0
    if delta >= 1 or e / (1 - delta) >= 0.5:
        return 0
    single = 1 - delta
    raw = math.floor(n * single * (1 - binary_entropy(e / single)))
    return max(0, raw - int(leakage) - int(margin))


def privacy_amplify(key, spec):
    """Toeplitz hash: bit ``i`` is the parity of ``key AND seed[i : i + n]``."""
    key = _as_bits(key)
    n, m = spec.input_length, spec.output_length
    if len(key) != n:
        raise DomainError(f"key has {len(key)} bits, spec expects {n}")
    if m == 0:
        return np.empty(0, np.uint8)
    seed = spec.seed
    if n * m <= 20_000_000:
        acc = np.convolve(seed.astype(np.int64), key[::-1].astype(np.int64), mode="valid")
    else:
        acc = np.rint(signal.fftconvolve(seed.astype(float), key[::-1].astype(float),
                                         mode="valid")).astype(np.int64)
    return (acc & 1).astype(np.uint8)


def amplify_bob(ep, key, m, rng, margin=DEFAULT_MARGIN):
    spec = AmplificationSpec.random(len(key), m, rng, margin)
    ep.send(wire.pa_seed(spec.input_length, spec.output_length, spec.seed))
    return privacy_amplify(key, spec)


def amplify_alice(ep, key):
    n, m, seed = wire.parse_pa_seed(ep.expect(FrameType.PA_SEED))
    if n != len(key):
        ep.send(wire.abort(AbortReason.LENGTH_MISMATCH))
        raise ProtocolError(f"PA input length {n} does not match key length {len(key)}")
    return privacy_amplify(key, AmplificationSpec(n, m, seed))

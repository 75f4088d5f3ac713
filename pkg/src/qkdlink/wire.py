"""Framed public-channel protocol.

Frame layout (little-endian)::

    0x51 0x4B | version 0x01 | type | u32 payload length | payload

Any reliable ordered byte stream works as transport; an in-process pipe and a
loopback socket pair are provided.  Bit vectors are packed MSB-first behind a
u32 bit count.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ChannelClosed, PeerAbort, ProtocolError

MAGIC = b"QK"
VERSION = 0x01
HEADER = struct.Struct("<2sBBI")
MAX_PAYLOAD = 1 << 28


class FrameType(IntEnum):
    SESSION_START = 0x01
    DETECTIONS = 0x02
    BASES = 0x03
    SIFT_ACK = 0x04
    PARITY_REQUEST = 0x10
    PARITY_RESPONSE = 0x11
    PA_SEED = 0x20
    KEY_DIGEST = 0x21
    ABORT = 0x7F


class AbortReason(IntEnum):
    UNSPECIFIED = 0
    SESSION_MISMATCH = 1
    SLOT_RANGE = 2
    LENGTH_MISMATCH = 3
    CORRECTION_FAILED = 4
    UNEXPECTED_FRAME = 5


@dataclass(frozen=True)
class Frame:
    type: FrameType
    payload: bytes = b""

    def encode(self):
        return HEADER.pack(MAGIC, VERSION, int(self.type), len(self.payload)) + self.payload


def decode_header(header):
    magic, version, ftype, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        ftype = FrameType(ftype)
    except ValueError:
        raise ProtocolError(f"unknown frame type 0x{ftype:02x}") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds limit")
    return ftype, length


def decode_frames(data):
    """Split a transcript byte string into frames."""
    frames, pos = [], 0
    while pos < len(data):
        if len(data) - pos < HEADER.size:
            raise ProtocolError("truncated header")
        ftype, length = decode_header(data[pos:pos + HEADER.size])
        pos += HEADER.size
        if len(data) - pos < length:
            raise ProtocolError("truncated payload")
        frames.append(Frame(ftype, bytes(data[pos:pos + length])))
        pos += length
    return frames


# --- payload codecs ---------------------------------------------------------

def pack_bits(bits):
    bits = np.asarray(bits, dtype=np.uint8)
    return struct.pack("<I", len(bits)) + np.packbits(bits).tobytes()


def unpack_bits(payload):
    if len(payload) < 4:
        raise ProtocolError("bit vector missing length")
    (n,) = struct.unpack_from("<I", payload)
    body = np.frombuffer(payload, dtype=np.uint8, offset=4)
    if len(body) != (n + 7) // 8:
        raise ProtocolError("bit vector length mismatch")
    return np.unpackbits(body, count=n).astype(np.uint8)


def pack_indices(indices):
    return np.asarray(indices, dtype="<u8").tobytes()


def unpack_indices(payload):
    if len(payload) % 8:
        raise ProtocolError("index list not a multiple of 8 bytes")
    return np.frombuffer(payload, dtype="<u8").astype(np.int64)


def session_start(session_id, n_slots):
    return Frame(FrameType.SESSION_START, struct.pack("<QQ", session_id, n_slots))


def parse_session_start(payload):
    if len(payload) != 16:
        raise ProtocolError("SESSION_START payload must be 16 bytes")
    return struct.unpack("<QQ", payload)


def sift_ack(session_id, n_sifted):
    return Frame(FrameType.SIFT_ACK, struct.pack("<QI", session_id, n_sifted))


def parse_sift_ack(payload):
    if len(payload) != 12:
        raise ProtocolError("SIFT_ACK payload must be 12 bytes")
    return struct.unpack("<QI", payload)


BLOCK = struct.Struct("<BII")


def parity_request(blocks):
    """``blocks`` is a sequence of ``(pass_index, start, stop)``."""
    body = b"".join(BLOCK.pack(p, s, e) for p, s, e in blocks)
    return Frame(FrameType.PARITY_REQUEST, struct.pack("<I", len(blocks)) + body)


def parse_parity_request(payload):
    (n,) = struct.unpack_from("<I", payload)
    if len(payload) != 4 + n * BLOCK.size:
        raise ProtocolError("PARITY_REQUEST length mismatch")
    return [BLOCK.unpack_from(payload, 4 + i * BLOCK.size) for i in range(n)]


def pa_seed(n, m, seed_bits):
    return Frame(FrameType.PA_SEED, struct.pack("<II", n, m) + pack_bits(seed_bits))


def parse_pa_seed(payload):
    n, m = struct.unpack_from("<II", payload)
    return n, m, unpack_bits(payload[8:])


def key_digest(length, digest):
    return Frame(FrameType.KEY_DIGEST, struct.pack("<I", length) + digest)


def parse_key_digest(payload):
    (length,) = struct.unpack_from("<I", payload)
    return length, payload[4:]


def abort_reason(payload):
    try:
        return AbortReason(payload[0]) if payload else AbortReason.UNSPECIFIED
    except ValueError:
        return AbortReason.UNSPECIFIED


def abort(reason):
    return Frame(FrameType.ABORT, bytes([int(reason)]))


# --- transports -------------------------------------------------------------

class PipeStream:
    """One direction of an in-process, thread-safe byte pipe."""

    def __init__(self):
        self._buf = bytearray()
        self._cond = threading.Condition()
        self._closed = False

    def write(self, data):
        with self._cond:
            if self._closed:
                raise ChannelClosed("write on closed pipe")
            self._buf += data
            self._cond.notify_all()

    def read_exact(self, n, timeout=None):
        with self._cond:
            ok = self._cond.wait_for(lambda: len(self._buf) >= n or self._closed, timeout)
            if len(self._buf) < n:
                raise ChannelClosed("pipe closed" if ok else "read timed out")
            out = bytes(self._buf[:n])
            del self._buf[:n]
            return out

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class _PipeTransport:
    def __init__(self, rx, tx):
        self.rx, self.tx = rx, tx

    def send(self, data):
        self.tx.write(data)

    def recv_exact(self, n, timeout):
        return self.rx.read_exact(n, timeout)

    def close(self):
        self.tx.close()
        self.rx.close()


class _SocketTransport:
    def __init__(self, sock):
        self.sock = sock

    def send(self, data):
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc

    def recv_exact(self, n, timeout):
        self.sock.settimeout(timeout)
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(n - got)
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc
            if not chunk:
                raise ChannelClosed("socket closed")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Endpoint:
    """Frame-level view of one party's end of the public channel.

    Every frame sent is appended to ``sent`` so transcripts can be inspected
    or replayed.
    """

    def __init__(self, transport, timeout=60.0):
        self._t = transport
        self.timeout = timeout
        self.sent = []
        self.received = []

    def send(self, frame):
        raw = frame.encode()
        self.sent.append(raw)
        self._t.send(raw)

    def recv(self):
        ftype, length = decode_header(self._t.recv_exact(HEADER.size, self.timeout))
        payload = self._t.recv_exact(length, self.timeout) if length else b""
        frame = Frame(ftype, payload)
        self.received.append(frame.encode())
        return frame

    def expect(self, ftype):
        frame = self.recv()
        if frame.type == FrameType.ABORT:
            raise PeerAbort(abort_reason(frame.payload))
        if frame.type != ftype:
            self.send(abort(AbortReason.UNEXPECTED_FRAME))
            raise ProtocolError(f"expected {ftype.name}, got {frame.type.name}")
        return frame.payload

    def close(self):
        self._t.close()

    @property
    def transcript(self):
        return b"".join(self.sent)


def pipe_pair(timeout=60.0):
    a_to_b, b_to_a = PipeStream(), PipeStream()
    return (Endpoint(_PipeTransport(b_to_a, a_to_b), timeout),
            Endpoint(_PipeTransport(a_to_b, b_to_a), timeout))


def socket_pair(timeout=60.0):
    sa, sb = socket.socketpair()
    return Endpoint(_SocketTransport(sa), timeout), Endpoint(_SocketTransport(sb), timeout)


def run_parties(alice, bob, transport="pipe", timeout=60.0):
    """Run ``alice(endpoint)`` and ``bob(endpoint)`` concurrently.

    Returns ``(alice_result, bob_result, alice_endpoint, bob_endpoint)``.
    The first exception raised by either party is re-raised after both
    threads stop.
    """
    if transport == "pipe":
        ea, eb = pipe_pair(timeout)
    elif transport == "socket":
        ea, eb = socket_pair(timeout)
    else:
        raise ValueError(f"unknown transport {transport!r}")

    results, errors = [None, None], [None, None]

    def target(i, fn, ep):
        try:
            results[i] = fn(ep)
        except BaseException as exc:  # noqa: BLE001 - re-raised in caller
            errors[i] = exc
            ep.close()

    threads = [threading.Thread(target=target, args=(0, alice, ea), daemon=True),
               threading.Thread(target=target, args=(1, bob, eb), daemon=True)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    ea.close()
    eb.close()
    # prefer the root cause over a secondary ChannelClosed or PeerAbort
    errs = [e for e in errors if e is not None]
    if errs:
        primary = [e for e in errs if not isinstance(e, (ChannelClosed, PeerAbort))]
        raise (primary or errs)[0]
    return results[0], results[1], ea, eb

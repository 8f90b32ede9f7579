"""Stateless QUIC capability probe and per-protocol RTT probes.

The QUIC probe is a 1200-byte long-header Initial carrying version 0. A QUIC
stack on the far side answers with Version Negotiation without creating any
state, and so does the probe sender: nothing is kept beyond the connection
IDs needed to match the reply.
"""

from __future__ import annotations

import enum
import os
import select
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .errors import (
    CidMismatch,
    MeasurementError,
    NetworkUnreachable,
    NotVersionNegotiation,
    Refused,
    Timeout,
)
from . import netpath

MIN_INITIAL_DATAGRAM = 1200
MAX_CID_LENGTH = 20
DEFAULT_TIMEOUT = 5.0

LONG_HEADER_BIT = 0x80
FIXED_BIT = 0x40

# long-header packet types for QUIC v1 and the drafts
PACKET_INITIAL = 0
PACKET_0RTT = 1
PACKET_HANDSHAKE = 2
PACKET_RETRY = 3


class ProbeKind(str, enum.Enum):
    QUIC_VN = "QuicVN"
    TCP_SYN = "TcpSyn"
    UDP_PAYLOAD = "UdpPayload"


@dataclass(frozen=True)
class Target:
    ip: str
    port: int
    transport: str = "udp"

    def __str__(self) -> str:
        return f"{self.transport}/{self.ip}:{self.port}"


@dataclass
class ProbeResult:
    target: Target
    kind: ProbeKind
    rtt: Optional[float] = None  # milliseconds
    vn_versions: list[int] = field(default_factory=list)
    error: Optional[str] = None
    source_port: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.rtt is not None and self.error is None


@dataclass(frozen=True)
class QuicProbePacket:
    first_byte: int
    version: int
    dcid: bytes
    scid: bytes
    datagram: bytes


@dataclass(frozen=True)
class LongHeader:
    packet_type: Optional[int]  # None for Version Negotiation
    version: int
    dcid: bytes
    scid: bytes
    token: bytes
    size: int  # bytes this packet occupies in the datagram


def _encode_varint(value: int) -> bytes:
    if value < 0x40:
        return bytes([value])
    if value < 0x4000:
        return struct.pack("!H", 0x4000 | value)
    if value < 0x40000000:
        return struct.pack("!I", 0x80000000 | value)
    return struct.pack("!Q", 0xC000000000000000 | value)


def _decode_varint(data: bytes, offset: int) -> tuple[int, int]:
    if offset >= len(data):
        raise ValueError("varint past end of datagram")
    first = data[offset]
    length = 1 << (first >> 6)
    if offset + length > len(data):
        raise ValueError("varint past end of datagram")
    value = first & 0x3F
    for b in data[offset + 1 : offset + length]:
        value = (value << 8) | b
    return value, offset + length


def build_quic_probe(dcid_len: int = 8, scid_len: int = 8) -> QuicProbePacket:
    """Craft the version-0 Initial probe with random connection IDs."""
    for name, value in (("dcid_len", dcid_len), ("scid_len", scid_len)):
        if not 0 <= value <= MAX_CID_LENGTH:
            raise ValueError(f"{name} must be within 0..{MAX_CID_LENGTH}, got {value}")
    dcid = os.urandom(dcid_len)
    scid = os.urandom(scid_len)
    # Initial type bits with 4-byte packet number encoding
    first = LONG_HEADER_BIT | FIXED_BIT | (PACKET_INITIAL << 4) | 0x03
    head = (
        bytes([first])
        + struct.pack("!I", 0)
        + bytes([dcid_len])
        + dcid
        + bytes([scid_len])
        + scid
        + _encode_varint(0)  # token length
    )
    remaining = MIN_INITIAL_DATAGRAM - len(head) - 2
    datagram = head + struct.pack("!H", 0x4000 | remaining) + os.urandom(remaining)
    assert len(datagram) == MIN_INITIAL_DATAGRAM
    return QuicProbePacket(first, 0, dcid, scid, datagram)


def parse_long_header(data: bytes, offset: int = 0) -> LongHeader:
    """Parse one long-header packet starting at ``offset``."""
    if offset + 7 > len(data):
        raise ValueError("too short for a long header")
    first = data[offset]
    if not first & LONG_HEADER_BIT:
        raise ValueError("short header packet")
    version = struct.unpack_from("!I", data, offset + 1)[0]
    pos = offset + 5
    dcid_len = data[pos]
    pos += 1
    dcid = data[pos : pos + dcid_len]
    pos += dcid_len
    if pos >= len(data):
        raise ValueError("truncated connection IDs")
    scid_len = data[pos]
    pos += 1
    scid = data[pos : pos + scid_len]
    pos += scid_len
    if pos > len(data) or len(dcid) != dcid_len or len(scid) != scid_len:
        raise ValueError("truncated connection IDs")
    if version == 0:
        return LongHeader(None, 0, dcid, scid, b"", len(data) - offset)
    packet_type = (first >> 4) & 0x03
    token = b""
    if packet_type == PACKET_RETRY:
        return LongHeader(packet_type, version, dcid, scid, data[pos:-16], len(data) - offset)
    if packet_type == PACKET_INITIAL:
        token_len, pos = _decode_varint(data, pos)
        token = data[pos : pos + token_len]
        pos += token_len
    length, pos = _decode_varint(data, pos)
    return LongHeader(packet_type, version, dcid, scid, token, pos + length - offset)


def iter_long_headers(datagram: bytes) -> Iterator[LongHeader]:
    """Walk the coalesced long-header packets of a datagram; stops at a short header."""
    offset = 0
    while offset < len(datagram) and datagram[offset] & LONG_HEADER_BIT:
        try:
            header = parse_long_header(datagram, offset)
        except ValueError:
            return
        yield header
        if header.size <= 0:
            return
        offset += header.size


def parse_version_negotiation(datagram: bytes, sent: QuicProbePacket) -> list[int]:
    """Supported versions from a Version Negotiation reply to ``sent``."""
    if datagram == sent.datagram:
        # a UDP echo service reflects the probe; that is not a QUIC stack
        raise NotVersionNegotiation("datagram is the reflected probe")
    try:
        header = parse_long_header(datagram)
    except ValueError as exc:
        raise NotVersionNegotiation(str(exc)) from exc
    if header.version != 0:
        raise NotVersionNegotiation(f"version 0x{header.version:08x} is not 0")
    if header.dcid != sent.scid or header.scid != sent.dcid:
        raise CidMismatch("connection IDs do not echo the probe")
    body = datagram[7 + len(header.dcid) + len(header.scid) :]
    if not body or len(body) % 4:
        raise NotVersionNegotiation("version list missing or misaligned")
    return [v for (v,) in struct.iter_unpack("!I", body)]


def _udp_socket(target: Target) -> tuple[socket.socket, int]:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    port = netpath.bind_random_port(sock)
    sock.connect((target.ip, target.port))
    return sock, port


def _recv_until(sock: socket.socket, deadline: float) -> tuple[bytes, float]:
    """Wait for one datagram; returns (data, arrival perf_counter)."""
    remaining = deadline - time.perf_counter()
    if remaining <= 0:
        raise Timeout("no response before timeout")
    ready, _, _ = select.select([sock], [], [], remaining)
    if not ready:
        raise Timeout("no response before timeout")
    try:
        data = sock.recv(65535)
    except OSError as exc:
        raise _udp_error(exc) from exc
    return data, time.perf_counter()


def _udp_error(exc: OSError) -> MeasurementError:
    err = netpath.map_os_error(exc)
    # an ICMP port-unreachable on a connected UDP socket surfaces as ECONNREFUSED
    if isinstance(err, Refused):
        return NetworkUnreachable(str(exc))
    return err if isinstance(err, MeasurementError) else NetworkUnreachable(str(exc))


def rtt_probe_udp(target: Target, timeout: float = DEFAULT_TIMEOUT, payload_size: int = 32) -> ProbeResult:
    """Random payload from a random source port; rtt to the first datagram back."""
    result = ProbeResult(target, ProbeKind.UDP_PAYLOAD)
    sock, result.source_port = _udp_socket(target)
    try:
        start = time.perf_counter()
        sock.send(os.urandom(payload_size))
        _, arrived = _recv_until(sock, start + timeout)
        result.rtt = (arrived - start) * 1000
    except MeasurementError as exc:
        result.error = exc.error_class
    except OSError as exc:
        result.error = _udp_error(exc).error_class
    finally:
        sock.close()
    return result


def rtt_probe_tcp(target: Target, timeout: float = DEFAULT_TIMEOUT) -> ProbeResult:
    """SYN -> SYN/ACK time via connect-then-abort; the connection is reset at once."""
    result = ProbeResult(target, ProbeKind.TCP_SYN)
    try:
        sock, elapsed = netpath.tcp_connect(target.ip, target.port, timeout)
    except Refused as exc:
        result.error = exc.error_class
        if exc.rtt is not None:
            result.rtt = exc.rtt * 1000
        return result
    except MeasurementError as exc:
        result.error = exc.error_class
        return result
    except OSError as exc:
        err = netpath.map_os_error(exc)
        result.error = getattr(err, "error_class", "NetworkUnreachable")
        return result
    result.source_port = sock.getsockname()[1]
    result.rtt = elapsed * 1000
    netpath.abort(sock)
    return result


def rtt_probe_quic(
    target: Target,
    timeout: float = DEFAULT_TIMEOUT,
    dcid_len: int = 8,
    scid_len: int = 8,
) -> ProbeResult:
    """Send the version-0 probe; rtt to the matching Version Negotiation reply.

    Replies whose connection IDs do not match are ignored; if only such
    replies arrive the result is CidMismatch instead of Timeout.
    """
    result = ProbeResult(target, ProbeKind.QUIC_VN)
    probe = build_quic_probe(dcid_len, scid_len)
    sock, result.source_port = _udp_socket(target)
    mismatched = False
    try:
        start = time.perf_counter()
        sock.send(probe.datagram)
        deadline = start + timeout
        while True:
            try:
                data, arrived = _recv_until(sock, deadline)
            except Timeout:
                if mismatched:
                    raise CidMismatch("only unrelated replies received")
                raise
            try:
                versions = parse_version_negotiation(data, probe)
            except CidMismatch:
                mismatched = True
                continue
            result.rtt = (arrived - start) * 1000
            result.vn_versions = versions
            break
    except MeasurementError as exc:
        result.error = exc.error_class
    except OSError as exc:
        result.error = _udp_error(exc).error_class
    finally:
        sock.close()
    return result


def probe(target: Target, kind: ProbeKind, timeout: float = DEFAULT_TIMEOUT) -> ProbeResult:
    if kind is ProbeKind.QUIC_VN:
        return rtt_probe_quic(target, timeout)
    if kind is ProbeKind.TCP_SYN:
        return rtt_probe_tcp(target, timeout)
    return rtt_probe_udp(target, timeout)

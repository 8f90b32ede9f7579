"""DNS over QUIC client with a per-connection event log.

The QUIC state machine is aioquic's sans-IO ``QuicConnection``; this module
drives it over a plain UDP socket so that every datagram can be timestamped
and classified on the wire (Initial, Version Negotiation, Retry, Handshake).
The resulting :class:`ConnectionEventLog` is what the analyzer uses to count
handshake round trips.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import select
import socket
import ssl
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Optional

from aioquic.quic import events as qevents
from aioquic.quic.configuration import QuicConfiguration
from aioquic.quic.connection import QuicConnection
from aioquic.tls import SessionTicket
from cryptography import x509
from cryptography.hazmat.primitives.serialization import Encoding
from cryptography.x509.oid import NameOID

from . import dns_codec, netpath, quic_versions
from .errors import (
    AlpnMismatch,
    ConnectionClosed,
    DnsError,
    DoqProtocolError,
    MeasurementError,
    PreconditionError,
    Refused,
    Timeout,
    TlsFailure,
    VersionMismatch,
)
from .probe_core import (
    PACKET_HANDSHAKE,
    PACKET_INITIAL,
    PACKET_RETRY,
    iter_long_headers,
)
from .quic_versions import (
    DEFAULT_DOQ_ALPNS,
    DEFAULT_QUIC_VERSIONS,
    frame_message,
    negotiate_preference,
    unframe_message,
)

logger = logging.getLogger(__name__)

__all__ = [
    "CertificateInfo",
    "ConnectionEventLog",
    "DoqSessionConfig",
    "DoqSessionResult",
    "EventKind",
    "TokenCache",
    "doq_connect",
    "doq_query",
    "negotiate_preference",
]

# TLS alert no_application_protocol (120) carried as a QUIC crypto error
_CRYPTO_ERROR_BASE = 0x100
_ALERT_NO_APPLICATION_PROTOCOL = 120
DOQ_NO_ERROR = 0x0
MAX_DATAGRAM = 1200


class EventKind(str, enum.Enum):
    INITIAL_SENT = "InitialSent"
    VERSION_NEGOTIATION_RCVD = "VersionNegotiationRcvd"
    RETRY_RCVD = "RetryRcvd"
    INITIAL_RESENT = "InitialResent"
    HANDSHAKE_KEYS_AVAILABLE = "HandshakeKeysAvailable"
    NEW_TOKEN_RCVD = "NewTokenRcvd"
    CERTIFICATE_RCVD = "CertificateRcvd"
    AMPLIFICATION_STALL_DETECTED = "AmplificationStallDetected"
    HANDSHAKE_CONFIRMED = "HandshakeConfirmed"
    STREAM_OPENED = "StreamOpened"
    DNS_RESPONSE_RCVD = "DnsResponseRcvd"
    CONNECTION_CLOSED = "ConnectionClosed"


@dataclass(frozen=True)
class Event:
    timestamp: int  # monotonic microseconds
    kind: EventKind
    data: dict = field(default_factory=dict, compare=True, hash=False)


class ConnectionEventLog:
    """Ordered connection events, exportable as qlog-style JSON."""

    QLOG_PREFIX = "doqscope:"

    def __init__(self, events: Optional[list[Event]] = None):
        self.events: list[Event] = list(events or [])

    def add(self, kind: EventKind, timestamp: Optional[float] = None, **data) -> Event:
        ts = int((time.monotonic() if timestamp is None else timestamp) * 1_000_000)
        if self.events and ts < self.events[-1].timestamp:
            ts = self.events[-1].timestamp
        event = Event(ts, kind, data)
        self.events.append(event)
        return event

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConnectionEventLog) and self.events == other.events

    def kinds(self) -> list[EventKind]:
        return [e.kind for e in self.events]

    def has(self, kind: EventKind) -> bool:
        return any(e.kind == kind for e in self.events)

    def count(self, kind: EventKind) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def first(self, kind: EventKind) -> Optional[Event]:
        return next((e for e in self.events if e.kind == kind), None)

    def to_qlog(self, title: str = "", vantage_point: str = "client") -> dict:
        start = self.events[0].timestamp if self.events else 0
        return {
            "qlog_version": "0.3",
            "qlog_format": "JSON",
            "title": title,
            "traces": [
                {
                    "vantage_point": {"type": vantage_point},
                    "common_fields": {
                        "time_format": "relative",
                        "reference_time": start / 1000.0,
                    },
                    "events": [
                        {
                            "time": (e.timestamp - start) / 1000.0,
                            "name": self.QLOG_PREFIX + e.kind.value,
                            "data": e.data,
                        }
                        for e in self.events
                    ],
                }
            ],
        }

    def write_qlog(self, path: str | Path, title: str = "") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_qlog(title), indent=1))
        return path

    @classmethod
    def from_qlog(cls, doc: dict | str | Path) -> "ConnectionEventLog":
        """Rebuild a log from :meth:`to_qlog` output.

        A few standard qlog transport events are understood as well, so that
        traces from other QUIC stacks can be classified too.
        """
        if isinstance(doc, (str, Path)):
            doc = json.loads(Path(doc).read_text())
        trace = doc["traces"][0]
        reference = float(trace.get("common_fields", {}).get("reference_time", 0.0))
        log = cls()
        initial_seen = False
        for raw in trace["events"]:
            name = raw.get("name", "")
            data = raw.get("data", {}) or {}
            ts = int(round((reference + float(raw["time"])) * 1000))
            kind = _kind_from_qlog(name, data, initial_seen)
            if kind is None:
                continue
            if kind is EventKind.INITIAL_SENT:
                initial_seen = True
            log.events.append(Event(ts, kind, dict(data) if name.startswith(cls.QLOG_PREFIX) else {}))
        return log


def _kind_from_qlog(name: str, data: dict, initial_seen: bool) -> Optional[EventKind]:
    if name.startswith(ConnectionEventLog.QLOG_PREFIX):
        return EventKind(name[len(ConnectionEventLog.QLOG_PREFIX) :])
    packet_type = (data.get("header") or {}).get("packet_type")
    if name.endswith("packet_sent") and packet_type == "initial":
        return EventKind.INITIAL_RESENT if initial_seen else EventKind.INITIAL_SENT
    if name.endswith("packet_received"):
        return {
            "version_negotiation": EventKind.VERSION_NEGOTIATION_RCVD,
            "retry": EventKind.RETRY_RCVD,
        }.get(packet_type)
    if name.endswith("connection_closed"):
        return EventKind.CONNECTION_CLOSED
    return None


@dataclass(frozen=True)
class CertificateInfo:
    common_name: str
    subject_alt_names: tuple[str, ...]
    fingerprint: str
    der_size: int
    not_before: str
    not_after: str

    @classmethod
    def from_der(cls, der: bytes) -> "CertificateInfo":
        cert = x509.load_der_x509_certificate(der)
        return cls.from_x509(cert, der)

    @classmethod
    def from_x509(cls, cert: x509.Certificate, der: Optional[bytes] = None) -> "CertificateInfo":
        der = der if der is not None else cert.public_bytes(Encoding.DER)
        names = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
        try:
            san_ext = cert.extensions.get_extension_for_class(x509.SubjectAlternativeName)
            sans = tuple(str(v) for v in san_ext.value.get_values_for_type(x509.DNSName))
        except x509.ExtensionNotFound:
            sans = ()
        return cls(
            common_name=str(names[0].value) if names else "",
            subject_alt_names=sans,
            fingerprint=hashlib.sha256(der).hexdigest(),
            der_size=len(der),
            not_before=_cert_time(cert, "not_valid_before"),
            not_after=_cert_time(cert, "not_valid_after"),
        )

    def to_dict(self) -> dict:
        return {
            "common_name": self.common_name,
            "subject_alt_names": list(self.subject_alt_names),
            "fingerprint": self.fingerprint,
            "der_size": self.der_size,
            "not_before": self.not_before,
            "not_after": self.not_after,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CertificateInfo":
        return cls(
            common_name=d.get("common_name", ""),
            subject_alt_names=tuple(d.get("subject_alt_names", ())),
            fingerprint=d.get("fingerprint", ""),
            der_size=int(d.get("der_size", 0)),
            not_before=d.get("not_before", ""),
            not_after=d.get("not_after", ""),
        )


def _cert_time(cert: x509.Certificate, attr: str) -> str:
    value = getattr(cert, attr + "_utc", None)
    if value is None:
        value = getattr(cert, attr).replace(tzinfo=timezone.utc)
    return value.isoformat()


@dataclass
class DoqSessionConfig:
    target: tuple[str, int]
    quic_versions_offered: list[int] = field(default_factory=lambda: list(DEFAULT_QUIC_VERSIONS))
    doq_alpns_offered: list[str] = field(default_factory=lambda: list(DEFAULT_DOQ_ALPNS))
    token: Optional[bytes] = None
    sni: Optional[str] = None
    timeout: float = 5000.0  # milliseconds
    session_ticket: Optional[SessionTicket] = None

    def __post_init__(self):
        if not self.quic_versions_offered or not self.doq_alpns_offered:
            raise ValueError("offered QUIC versions and ALPNs must be nonempty")
        for name, values in (
            ("quic_versions_offered", self.quic_versions_offered),
            ("doq_alpns_offered", self.doq_alpns_offered),
        ):
            if len(set(values)) != len(values):
                raise ValueError(f"{name} contains duplicates")


@dataclass
class DoqSessionResult:
    target: tuple[str, int]
    negotiated_quic_version: Optional[int] = None
    negotiated_doq_alpn: Optional[str] = None
    handshake_time: Optional[float] = None  # ms
    resolve_time: Optional[float] = None  # ms
    response: Optional[dns_codec.DnsMessage] = None
    new_token: Optional[bytes] = None
    certificate: Optional[CertificateInfo] = None
    event_log: ConnectionEventLog = field(default_factory=ConnectionEventLog)
    token_sent: bool = False
    early_data_accepted: bool = False
    session_ticket: Optional[SessionTicket] = None
    local_port: Optional[int] = None

    @property
    def rcode(self) -> Optional[int]:
        return self.response.rcode if self.response is not None else None


class _Attempt:
    """Byte and timing bookkeeping for one Initial flight and the server's answer."""

    def __init__(self, started: float):
        self.started = started
        self.client_bytes = 0
        self.flight_bytes: Optional[int] = None
        self.server_bytes = 0
        self.first_response: Optional[float] = None
        self.capped_at: Optional[float] = None


class _DoqSession:
    def __init__(self, config: DoqSessionConfig):
        quic_versions.install()
        self.config = config
        self.log = ConnectionEventLog()
        self.result = DoqSessionResult(target=tuple(config.target))
        qconf = QuicConfiguration(
            is_client=True,
            alpn_protocols=list(config.doq_alpns_offered),
            supported_versions=list(config.quic_versions_offered),
            verify_mode=ssl.CERT_NONE,
            server_name=config.sni,
            token=config.token or b"",
            session_ticket=config.session_ticket,
            idle_timeout=max(config.timeout / 1000.0, 1.0),
        )
        self.conn = QuicConnection(
            configuration=qconf,
            token_handler=self._on_new_token,
            session_ticket_handler=self._on_session_ticket,
        )
        self.addr = (config.target[0], int(config.target[1]))
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        netpath.bind_random_port(self.sock)
        self.sock.connect(self.addr)
        self.result.local_port = self.sock.getsockname()[1]
        self.deadline = 0.0
        self.first_initial_at: Optional[float] = None
        self.restart_pending = False
        self.retried = False
        self.attempt: Optional[_Attempt] = None
        self.handshake_done = False
        self.stall_logged = False
        self.keys_logged = False
        self.certificate_logged = False
        self.closed: Optional[qevents.ConnectionTerminated] = None
        self.streams: dict[int, bytearray] = {}
        self.stream_ended: set[int] = set()
        self.stream_reset: set[int] = set()
        self.query_sent_at: Optional[float] = None
        self.pending_query_stream: Optional[int] = None

    # -- callbacks from aioquic
    def _on_new_token(self, token: bytes) -> None:
        self.result.new_token = token
        self.log.add(EventKind.NEW_TOKEN_RCVD, size=len(token))

    def _on_session_ticket(self, ticket: SessionTicket) -> None:
        self.result.session_ticket = ticket

    # -- wire
    def _flush(self) -> None:
        now = time.monotonic()
        for data, _addr in self.conn.datagrams_to_send(now=now):
            sent_at = time.monotonic()
            self._classify_outgoing(data, sent_at)
            try:
                self.sock.send(data)
            except OSError as exc:
                raise _socket_error(exc) from exc
            if self.pending_query_stream is not None and self.query_sent_at is None:
                self.query_sent_at = sent_at

    def _classify_outgoing(self, data: bytes, t: float) -> None:
        headers = list(iter_long_headers(data))
        if any(h.packet_type == PACKET_INITIAL for h in headers):
            initial = next(h for h in headers if h.packet_type == PACKET_INITIAL)
            if self.first_initial_at is None:
                self.first_initial_at = t
                self.attempt = _Attempt(t)
                self.result.token_sent = bool(initial.token)
                self.log.add(
                    EventKind.INITIAL_SENT, t, version=initial.version,
                    token=bool(initial.token), bytes=len(data),
                )
            elif self.restart_pending:
                self.restart_pending = False
                self.attempt = _Attempt(t)
                self.log.add(
                    EventKind.INITIAL_RESENT, t, version=initial.version,
                    token=bool(initial.token), bytes=len(data),
                )
        if self.attempt is not None and self.attempt.first_response is None:
            self.attempt.client_bytes += len(data)

    def _classify_incoming(self, data: bytes, t: float) -> None:
        headers = list(iter_long_headers(data))
        if headers and headers[0].version == 0:
            if not self.log.has(EventKind.VERSION_NEGOTIATION_RCVD) and not self.handshake_done:
                body = data[7 + len(headers[0].dcid) + len(headers[0].scid) :]
                versions = [int.from_bytes(body[i : i + 4], "big") for i in range(0, len(body) - 3, 4)]
                self.log.add(EventKind.VERSION_NEGOTIATION_RCVD, t, versions=versions)
                self.restart_pending = True
            return
        if headers and headers[0].packet_type == PACKET_RETRY:
            if not self.log.has(EventKind.RETRY_RCVD):
                self.retried = True
                self.log.add(EventKind.RETRY_RCVD, t, token_size=len(headers[0].token))
                self.restart_pending = True
            return
        for h in headers:
            if h.version:
                self.result.negotiated_quic_version = h.version
        if not self.keys_logged and any(h.packet_type == PACKET_HANDSHAKE for h in headers):
            self.keys_logged = True
            self.log.add(EventKind.HANDSHAKE_KEYS_AVAILABLE, t)
        self._track_amplification(len(data), t)

    def _track_amplification(self, size: int, t: float) -> None:
        """Spot a server that exhausted 3x our flight and then waited for us."""
        a = self.attempt
        if a is None or self.handshake_done or self.restart_pending:
            return
        if a.first_response is None:
            a.first_response = t
            a.flight_bytes = a.client_bytes
        if a.capped_at is not None and not self.stall_logged:
            rtt_estimate = a.first_response - a.started
            if t - a.capped_at >= rtt_estimate / 2:
                self.stall_logged = True
                self.log.add(
                    EventKind.AMPLIFICATION_STALL_DETECTED, t,
                    server_bytes=a.server_bytes, client_bytes=a.flight_bytes,
                    limit=3 * a.flight_bytes,
                )
            a.capped_at = None
        a.server_bytes += size
        limit = 3 * (a.flight_bytes or 0)
        if limit - MAX_DATAGRAM < a.server_bytes <= limit:
            a.capped_at = t

    def _after_receive(self, t: float) -> None:
        if not self.certificate_logged:
            cert = getattr(self.conn.tls, "_peer_certificate", None)
            if cert is not None:
                self.certificate_logged = True
                info = CertificateInfo.from_x509(cert)
                self.result.certificate = info
                self.log.add(EventKind.CERTIFICATE_RCVD, t, size=info.der_size)

    def _process_events(self, t: float) -> None:
        while True:
            event = self.conn.next_event()
            if event is None:
                return
            if isinstance(event, qevents.HandshakeCompleted):
                self._after_receive(t)
                self.handshake_done = True
                self.result.negotiated_doq_alpn = event.alpn_protocol
                self.result.early_data_accepted = event.early_data_accepted
                self.result.handshake_time = (t - self.first_initial_at) * 1000
                self.log.add(
                    EventKind.HANDSHAKE_CONFIRMED, t, alpn=event.alpn_protocol,
                    early_data=event.early_data_accepted, resumed=event.session_resumed,
                )
            elif isinstance(event, qevents.StreamDataReceived):
                self.streams.setdefault(event.stream_id, bytearray()).extend(event.data)
                if event.end_stream:
                    self.stream_ended.add(event.stream_id)
            elif isinstance(event, qevents.StreamReset):
                self.stream_reset.add(event.stream_id)
            elif isinstance(event, qevents.ConnectionTerminated):
                self.closed = event
                self.log.add(
                    EventKind.CONNECTION_CLOSED, t, code=event.error_code,
                    reason=event.reason_phrase, by="peer",
                )

    def _pump(self, done: Callable[[], bool]) -> None:
        while True:
            self._flush()
            if done():
                return
            if self.closed is not None:
                raise _termination_error(self.closed, self.handshake_done)
            now = time.monotonic()
            if now >= self.deadline:
                raise Timeout("DoQ session timed out")
            timer = self.conn.get_timer()
            wake = self.deadline if timer is None else min(self.deadline, timer)
            ready, _, _ = select.select([self.sock], [], [], max(0.0, wake - now))
            now = time.monotonic()
            if ready:
                try:
                    data = self.sock.recv(65535)
                except OSError as exc:
                    raise _socket_error(exc) from exc
                self._classify_incoming(data, now)
                self.conn.receive_datagram(data, self.addr, now=now)
                self._after_receive(now)
            elif timer is not None and now >= timer:
                self.conn.handle_timer(now=now)
            self._process_events(time.monotonic())

    # -- operations
    def handshake(self) -> None:
        self.deadline = time.monotonic() + self.config.timeout / 1000.0
        self.conn.connect(self.addr, now=time.monotonic())
        self._pump(lambda: self.handshake_done)

    def start_early_query(self, wire: bytes, alpn_guess: str) -> int:
        """Send a query before the handshake finishes (0-RTT probe only)."""
        self.deadline = time.monotonic() + self.config.timeout / 1000.0
        self.conn.connect(self.addr, now=time.monotonic())
        sid = self.conn.get_next_available_stream_id()
        self.conn.send_stream_data(sid, frame_message(alpn_guess, wire), end_stream=True)
        self.pending_query_stream = sid
        return sid

    def query(self, wire: bytes) -> dns_codec.DnsMessage:
        alpn = self.result.negotiated_doq_alpn
        if not quic_versions.is_doq_alpn(alpn):
            raise AlpnMismatch(f"negotiated ALPN {alpn!r} is not DoQ")
        sid = self.conn.get_next_available_stream_id()
        self.pending_query_stream = sid
        self.query_sent_at = None
        self.log.add(EventKind.STREAM_OPENED, stream_id=sid)
        self.conn.send_stream_data(sid, frame_message(alpn, wire), end_stream=True)
        return self.await_response(sid, alpn)

    def await_response(self, sid: int, alpn: str) -> dns_codec.DnsMessage:
        def complete() -> bool:
            if sid in self.stream_reset:
                return True
            data = bytes(self.streams.get(sid, b""))
            if sid in self.stream_ended:
                return True
            return quic_versions.uses_length_prefix(alpn) and unframe_message(alpn, data) is not None

        self._pump(complete)
        received_at = time.monotonic()
        if sid in self.stream_reset:
            raise DoqProtocolError("server reset the query stream")
        data = bytes(self.streams.get(sid, b""))
        message = unframe_message(alpn, data) if data else None
        if not message:
            raise DoqProtocolError("stream closed before a complete DNS response")
        try:
            response = dns_codec.decode_message(message)
        except dns_codec.DnsCodecError as exc:
            raise DoqProtocolError(f"undecodable DNS response: {exc}") from exc
        self.result.resolve_time = (received_at - (self.query_sent_at or received_at)) * 1000
        self.result.response = response
        self.log.add(EventKind.DNS_RESPONSE_RCVD, received_at, rcode=response.rcode, size=len(message))
        return response

    def close(self) -> None:
        if self.closed is None:
            try:
                self.conn.close(error_code=DOQ_NO_ERROR)
                self._flush()
            except (OSError, MeasurementError):
                pass
            self.log.add(EventKind.CONNECTION_CLOSED, code=DOQ_NO_ERROR, by="client")
        self.sock.close()
        self.result.event_log = self.log


def _socket_error(exc: OSError) -> MeasurementError:
    err = netpath.map_os_error(exc)
    return err if isinstance(err, MeasurementError) else Refused(str(exc))


def _termination_error(event: qevents.ConnectionTerminated, handshake_done: bool) -> MeasurementError:
    code = event.error_code
    reason = event.reason_phrase or ""
    if code == _CRYPTO_ERROR_BASE + _ALERT_NO_APPLICATION_PROTOCOL or "ALPN" in reason:
        return AlpnMismatch(reason or "no shared ALPN")
    if "common protocol version" in reason:
        return VersionMismatch(reason)
    if not handshake_done and _CRYPTO_ERROR_BASE <= code < _CRYPTO_ERROR_BASE + 0x100:
        return TlsFailure(reason or f"TLS alert {code - _CRYPTO_ERROR_BASE}")
    if not handshake_done:
        return ConnectionClosed(code, reason)
    return DoqProtocolError(f"connection closed during query: 0x{code:x} {reason}".strip())


def doq_connect(config: DoqSessionConfig) -> DoqSessionResult:
    """Complete the QUIC handshake only; the response fields stay empty."""
    session = _DoqSession(config)
    try:
        session.handshake()
        if not quic_versions.is_doq_alpn(session.result.negotiated_doq_alpn):
            raise AlpnMismatch(f"negotiated {session.result.negotiated_doq_alpn!r}")
    finally:
        session.close()
    return session.result


def doq_query(config: DoqSessionConfig, name: str, rd: bool = True) -> DoqSessionResult:
    """One fresh connection, one stream, one query.

    Raises :class:`DnsError` (with ``result`` attached) when the response
    carries a non-zero RCODE; the timings are valid nonetheless.
    """
    wire = dns_codec.encode_query(name, rd, msg_id=0)
    session = _DoqSession(config)
    try:
        session.handshake()
        response = session.query(wire)
    finally:
        session.close()
    if response.rcode != dns_codec.RCODE_NOERROR:
        raise DnsError(response.rcode, session.result)
    return session.result


def doq_early_data_query(config: DoqSessionConfig, name: str) -> DoqSessionResult:
    """Resume with a stored session ticket and send the query as 0-RTT data."""
    if config.session_ticket is None:
        raise PreconditionError("0-RTT needs a session ticket from an earlier session")
    wire = dns_codec.encode_query(name, True, msg_id=0)
    session = _DoqSession(config)
    # early data is framed before ALPN is confirmed: offer the resumed ALPN first
    alpn = config.doq_alpns_offered[0]
    try:
        sid = session.start_early_query(wire, alpn)
        session.log.add(EventKind.STREAM_OPENED, stream_id=sid, early=True)
        session._pump(lambda: session.handshake_done)
        if session.result.early_data_accepted:
            session.await_response(sid, session.result.negotiated_doq_alpn or alpn)
        else:
            # the server discarded our 0-RTT packets; ask again over 1-RTT
            session.query(wire)
    finally:
        session.close()
    return session.result


@dataclass(frozen=True)
class TokenEntry:
    token: bytes
    quic_version: int
    stored_at: float


class TokenCache:
    """Most recent NEW_TOKEN per resolver endpoint, with expiry."""

    def __init__(self, lifetime: float = 600.0, clock: Callable[[], float] = time.monotonic):
        self.lifetime = lifetime
        self._clock = clock
        self._entries: dict[tuple[str, int], TokenEntry] = {}
        self._lock = threading.Lock()

    def put(self, resolver: tuple[str, int], token: bytes, quic_version: int) -> None:
        with self._lock:
            self._entries[tuple(resolver)] = TokenEntry(token, quic_version, self._clock())

    def get(self, resolver: tuple[str, int]) -> Optional[TokenEntry]:
        with self._lock:
            entry = self._entries.get(tuple(resolver))
            if entry is None:
                return None
            if self._clock() - entry.stored_at > self.lifetime:
                del self._entries[tuple(resolver)]
                return None
            return entry

    def __len__(self) -> int:
        return len(self._entries)


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def result_summary(result: DoqSessionResult) -> dict[str, Any]:
    return {
        "target": list(result.target),
        "quic_version": quic_versions.version_name(result.negotiated_quic_version)
        if result.negotiated_quic_version
        else None,
        "alpn": result.negotiated_doq_alpn,
        "handshake_ms": result.handshake_time,
        "resolve_ms": result.resolve_time,
        "rcode": result.rcode,
        "new_token": result.new_token is not None,
        "events": [e.kind.value for e in result.event_log],
    }

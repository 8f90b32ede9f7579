"""DoQ endpoint of the testbed.

aioquic's ``QuicConnection`` handles the cryptographic handshake; this module
owns everything around it that a measurement cares about: Version
Negotiation, the Retry policy, address tokens, NEW_TOKEN issuance and whether
the anti-amplification limit stays in force once the client's address has
been validated.

aioquic itself only lifts the limit when a Handshake packet arrives, which is
exactly the "enforce after validation" behaviour. Turning enforcement off
means marking the path validated up front whenever a Retry token or a
NEW_TOKEN proved the address.
"""

from __future__ import annotations

import asyncio
import hashlib
import hmac
import itertools
import logging
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

from aioquic.buffer import encode_uint_var
from aioquic.quic import events as qevents
from aioquic.quic.configuration import QuicConfiguration
from aioquic.quic.connection import QuicConnection, QuicNetworkPath
from aioquic.quic.packet import (
    QuicFrameType,
    encode_quic_retry,
    encode_quic_version_negotiation,
)

from .. import quic_versions
from ..probe_core import MIN_INITIAL_DATAGRAM, PACKET_INITIAL, parse_long_header
from .certs import CertificateBundle
from .config import TestbedConfig
from .delay import DelayLine
from .logs import StructuredLog
from .zone import ZoneResponder

logger = logging.getLogger(__name__)

HOST_CID_LENGTH = 8
DOQ_PROTOCOL_ERROR = 0x2
TOKEN_LIFETIME = 600.0

_conn_ids = itertools.count(1)


class AddressTokens:
    """HMAC-protected tokens binding a client IP (and for Retry, the CIDs)."""

    NEW = b"N"
    RETRY = b"R"

    def __init__(self, key: Optional[bytes] = None, lifetime: float = TOKEN_LIFETIME):
        self._key = key or os.urandom(32)
        self.lifetime = lifetime

    def _mac(self, body: bytes, ip: str) -> bytes:
        return hmac.new(self._key, body + ip.encode(), hashlib.sha256).digest()[:16]

    def new_token(self, ip: str) -> bytes:
        body = self.NEW + struct.pack("!d", time.time())
        return body + self._mac(body, ip)

    def retry_token(self, ip: str, odcid: bytes, rscid: bytes) -> bytes:
        body = (
            self.RETRY + struct.pack("!d", time.time())
            + bytes([len(odcid)]) + odcid + bytes([len(rscid)]) + rscid
        )
        return body + self._mac(body, ip)

    def validate(self, token: bytes, ip: str) -> Optional[tuple[bytes, bytes, bytes]]:
        """Return (kind, odcid, rscid) for a genuine unexpired token, else None."""
        if len(token) < 1 + 8 + 16:
            return None
        body, mac = token[:-16], token[-16:]
        if not hmac.compare_digest(mac, self._mac(body, ip)):
            return None
        (issued,) = struct.unpack_from("!d", body, 1)
        if time.time() - issued > self.lifetime:
            return None
        kind = body[:1]
        if kind == self.RETRY:
            pos = 9
            odcid = body[pos + 1 : pos + 1 + body[pos]]
            pos += 1 + body[pos]
            rscid = body[pos + 1 : pos + 1 + body[pos]]
            return kind, odcid, rscid
        return kind, b"", b""


class _TestbedQuicConnection(QuicConnection):
    """Server connection that can hand out a NEW_TOKEN next to HANDSHAKE_DONE."""

    _testbed_new_token: Optional[bytes] = None
    _testbed_token_sent = None  # callback(size)

    def _write_handshake_done_frame(self, builder) -> None:
        token = self._testbed_new_token
        if token:
            buf = builder.start_frame(
                QuicFrameType.NEW_TOKEN, capacity=1 + len(encode_uint_var(len(token))) + len(token)
            )
            buf.push_uint_var(len(token))
            buf.push_bytes(token)
            self._testbed_new_token = None
            if self._testbed_token_sent is not None:
                self._testbed_token_sent(len(token))
        super()._write_handshake_done_frame(builder)


@dataclass
class _ConnState:
    conn: _TestbedQuicConnection
    addr: tuple
    conn_id: int
    version: int
    validated_by: Optional[str]
    token_presented: bool
    cids: set = field(default_factory=set)
    timer: Optional[asyncio.TimerHandle] = None
    bytes_received: int = 0
    bytes_sent: int = 0
    pre_validation_received: int = 0
    pre_validation_sent: int = 0
    new_token_issued: bool = False
    alpn: Optional[str] = None
    handshake_completed: bool = False
    early_data_accepted: bool = False
    streams: dict = field(default_factory=dict)
    answered: set = field(default_factory=set)
    datagrams: list = field(default_factory=list)
    closed: bool = False

    def path_validated(self) -> bool:
        paths = self.conn._network_paths
        return bool(paths) and paths[0].is_validated


class DoqEndpoint(asyncio.DatagramProtocol):
    def __init__(
        self,
        config: TestbedConfig,
        cert: CertificateBundle,
        responder: ZoneResponder,
        tokens: AddressTokens,
        log: StructuredLog,
        loop: asyncio.AbstractEventLoop,
    ):
        quic_versions.install()
        self.config = config
        self.responder = responder
        self.tokens = tokens
        self.log = log
        self.loop = loop
        delay = config.one_way_delay / 1000.0
        jitter = config.jitter / 1000.0
        self.inbound = DelayLine(loop, delay, jitter)
        self.outbound = DelayLine(loop, delay, jitter)
        self.transport: Optional[asyncio.DatagramTransport] = None
        self.port: Optional[int] = None
        self._conns: dict[bytes, _ConnState] = {}
        self._tickets: dict[bytes, object] = {}
        self._quic_config = QuicConfiguration(
            is_client=False,
            alpn_protocols=list(config.doq_alpns_served),
            supported_versions=list(config.quic_versions_served),
            certificate=cert.certificate,
            private_key=cert.private_key,
            connection_id_length=HOST_CID_LENGTH,
            idle_timeout=30.0,
        )

    # -- asyncio plumbing
    def connection_made(self, transport) -> None:
        self.transport = transport
        self.port = transport.get_extra_info("sockname")[1]

    def datagram_received(self, data: bytes, addr) -> None:
        self.inbound.schedule(self._handle, data, addr)

    def error_received(self, exc) -> None:
        logger.debug("doq endpoint socket error: %s", exc)

    def _send(self, data: bytes, addr) -> None:
        self.outbound.schedule(self._sendto, data, addr)

    def _sendto(self, data: bytes, addr) -> None:
        if self.transport is not None and not self.transport.is_closing():
            self.transport.sendto(data, addr)

    # -- session tickets
    def _store_ticket(self, ticket) -> None:
        self._tickets[ticket.ticket] = ticket

    def _fetch_ticket(self, label: bytes):
        if not self.config.zero_rtt:
            return None
        return self._tickets.get(label)

    # -- packet handling
    def _handle(self, data: bytes, addr) -> None:
        if not data:
            return
        if data[0] & 0x80:
            try:
                header = parse_long_header(data)
            except ValueError:
                return
            if header.version not in self.config.quic_versions_served:
                if len(data) >= MIN_INITIAL_DATAGRAM:
                    self._send_version_negotiation(header, addr)
                return
            dcid = header.dcid
        else:
            header = None
            dcid = data[1 : 1 + HOST_CID_LENGTH]

        state = self._conns.get(dcid)
        if state is None:
            if header is None or header.packet_type != PACKET_INITIAL or len(data) < MIN_INITIAL_DATAGRAM:
                return
            state = self._accept(header, data, addr)
            if state is None:
                return
        now = self.loop.time()
        state.bytes_received += len(data)
        if not state.path_validated():
            state.pre_validation_received += len(data)
        state.datagrams.append(("in", round(now, 6), len(data)))
        state.conn.receive_datagram(data, addr, now=now)
        self._process(state)

    def _send_version_negotiation(self, header, addr) -> None:
        packet = encode_quic_version_negotiation(
            source_cid=header.dcid,
            destination_cid=header.scid,
            supported_versions=list(self.config.quic_versions_served),
        )
        self.log.write(
            "doq_version_negotiation", port=self.port, client=f"{addr[0]}:{addr[1]}",
            offered=header.version, bytes=len(packet),
        )
        self._send(packet, addr)

    def _accept(self, header, data: bytes, addr) -> Optional[_ConnState]:
        ip = addr[0]
        checked = self.tokens.validate(header.token, ip) if header.token else None
        kind = checked[0] if checked else None
        mode = self.config.retry_mode
        need_retry = (mode == "always" and kind != AddressTokens.RETRY) or (
            mode == "first_contact_only" and kind is None
        )
        if need_retry:
            rscid = os.urandom(HOST_CID_LENGTH)
            packet = encode_quic_retry(
                version=header.version,
                source_cid=rscid,
                destination_cid=header.scid,
                original_destination_cid=header.dcid,
                retry_token=self.tokens.retry_token(ip, header.dcid, rscid),
            )
            self.log.write(
                "doq_retry", port=self.port, client=f"{ip}:{addr[1]}",
                version=header.version, bytes=len(packet), token_presented=bool(header.token),
            )
            self._send(packet, addr)
            return None

        odcid, rscid = header.dcid, None
        validated_by = None
        if kind == AddressTokens.RETRY:
            odcid, rscid = checked[1], checked[2]
            validated_by = "retry"
        elif kind == AddressTokens.NEW:
            validated_by = "token"

        conn = _TestbedQuicConnection(
            configuration=self._quic_config,
            original_destination_connection_id=odcid,
            retry_source_connection_id=rscid,
            session_ticket_fetcher=self._fetch_ticket,
            session_ticket_handler=self._store_ticket,
        )
        if validated_by and not self.config.enforce_amplification_after_validation:
            # the address is proven: lift the 3x limit from the first packet on
            conn._network_paths = [QuicNetworkPath(addr, is_validated=True)]
        state = _ConnState(
            conn=conn, addr=addr, conn_id=next(_conn_ids), version=header.version,
            validated_by=validated_by, token_presented=bool(header.token),
        )
        if self.config.issue_new_token:
            conn._testbed_new_token = self.tokens.new_token(ip)

            def sent(size, state=state):
                state.new_token_issued = True

            conn._testbed_token_sent = sent
        for cid in (header.dcid, conn.host_cid):
            self._conns[cid] = state
            state.cids.add(cid)
        return state

    def _process(self, state: _ConnState) -> None:
        conn = state.conn
        while True:
            event = conn.next_event()
            if event is None:
                break
            if isinstance(event, qevents.ConnectionIdIssued):
                self._conns[event.connection_id] = state
                state.cids.add(event.connection_id)
            elif isinstance(event, qevents.ConnectionIdRetired):
                self._conns.pop(event.connection_id, None)
                state.cids.discard(event.connection_id)
            elif isinstance(event, qevents.HandshakeCompleted):
                state.handshake_completed = True
                state.alpn = event.alpn_protocol
                state.early_data_accepted = event.early_data_accepted
            elif isinstance(event, qevents.StreamDataReceived):
                self._on_stream_data(state, event)
            elif isinstance(event, qevents.ConnectionTerminated):
                self._finish(state, event.error_code, event.reason_phrase)
        self._transmit(state)

    def _on_stream_data(self, state: _ConnState, event: qevents.StreamDataReceived) -> None:
        sid = event.stream_id
        if sid in state.answered:
            return
        buf = state.streams.setdefault(sid, bytearray())
        buf.extend(event.data)
        alpn = state.alpn or state.conn.tls.alpn_negotiated or self.config.doq_alpns_served[0]
        if not quic_versions.is_doq_alpn(alpn):
            return
        message = quic_versions.unframe_message(alpn, bytes(buf))
        if message is None or (not quic_versions.uses_length_prefix(alpn) and not event.end_stream):
            return
        state.answered.add(sid)
        behaviour = self.config.doq_stream_behaviour
        if behaviour == "reset":
            state.conn.reset_stream(sid, DOQ_PROTOCOL_ERROR)
            return
        if behaviour == "fin_without_answer":
            state.conn.send_stream_data(sid, b"", end_stream=True)
            return
        response = self.responder.respond_wire(message)
        if response is None:
            state.conn.reset_stream(sid, DOQ_PROTOCOL_ERROR)
            return
        state.conn.send_stream_data(sid, quic_versions.frame_message(alpn, response), end_stream=True)

    def _transmit(self, state: _ConnState) -> None:
        conn = state.conn
        now = self.loop.time()
        for data, addr in conn.datagrams_to_send(now=now):
            state.bytes_sent += len(data)
            if not state.path_validated():
                state.pre_validation_sent += len(data)
            state.datagrams.append(("out", round(now, 6), len(data)))
            self._send(data, addr)
        if state.timer is not None:
            state.timer.cancel()
            state.timer = None
        deadline = conn.get_timer()
        if deadline is not None:
            state.timer = self.loop.call_at(deadline, self._on_timer, state)
        elif state.closed:
            self._forget(state)

    def _on_timer(self, state: _ConnState) -> None:
        state.timer = None
        state.conn.handle_timer(now=self.loop.time())
        self._process(state)

    def _finish(self, state: _ConnState, code: int, reason: str) -> None:
        if state.closed:
            return
        state.closed = True
        self.log.write(
            "doq_connection",
            port=self.port,
            conn=state.conn_id,
            client=f"{state.addr[0]}:{state.addr[1]}",
            version=state.version,
            alpn=state.alpn,
            validated_by=state.validated_by,
            token_presented=state.token_presented,
            new_token_issued=state.new_token_issued,
            early_data_accepted=state.early_data_accepted,
            handshake_completed=state.handshake_completed,
            enforce_after_validation=self.config.enforce_amplification_after_validation,
            bytes_received=state.bytes_received,
            bytes_sent=state.bytes_sent,
            pre_validation_received=state.pre_validation_received,
            pre_validation_sent=state.pre_validation_sent,
            datagrams=state.datagrams,
            close_code=code,
            close_reason=reason,
        )
        for cid in list(state.cids):
            self._conns.pop(cid, None)

    def _forget(self, state: _ConnState) -> None:
        for cid in list(state.cids):
            if self._conns.get(cid) is state:
                del self._conns[cid]

    def shutdown(self) -> None:
        for state in {id(s): s for s in self._conns.values()}.values():
            if state.timer is not None:
                state.timer.cancel()
            self._finish(state, 0, "testbed shutdown")
        self._conns.clear()

"""UDP and stream (TCP, TLS, HTTPS) DNS endpoints with emulated latency.

Stream endpoints run TLS over memory BIOs so that every byte the server
emits, handshake records included, passes through the outbound delay line.
"""

from __future__ import annotations

import asyncio
import base64
import logging
import socket
import ssl
from typing import Optional

import h11

from .certs import CertificateBundle
from .config import TestbedConfig
from .delay import DelayLine
from .logs import StructuredLog
from .zone import ZoneResponder

logger = logging.getLogger(__name__)

TCP_FASTOPEN_QUEUE = 16
_TFO_SYSCTL = "/proc/sys/net/ipv4/tcp_fastopen"
_TFO_SERVER_ENABLE = 0x2


def enable_tfo_server_side() -> bool:
    """Make sure the kernel accepts TFO on listeners; returns success."""
    try:
        with open(_TFO_SYSCTL) as fp:
            value = int(fp.read().strip())
        if not value & _TFO_SERVER_ENABLE:
            with open(_TFO_SYSCTL, "w") as fp:
                fp.write(str(value | _TFO_SERVER_ENABLE))
        return True
    except (OSError, ValueError) as exc:
        logger.warning("cannot enable server-side TCP Fast Open: %s", exc)
        return False


class UdpDnsEndpoint(asyncio.DatagramProtocol):
    def __init__(self, config: TestbedConfig, responder: ZoneResponder, loop, echo: bool = False):
        self.responder = responder
        self.echo = echo
        delay, jitter = config.one_way_delay / 1000.0, config.jitter / 1000.0
        self.inbound = DelayLine(loop, delay, jitter)
        self.outbound = DelayLine(loop, delay, jitter)
        self.transport = None

    def connection_made(self, transport) -> None:
        self.transport = transport

    def datagram_received(self, data: bytes, addr) -> None:
        self.inbound.schedule(self._handle, data, addr)

    def error_received(self, exc) -> None:
        logger.debug("udp endpoint error: %s", exc)

    def _handle(self, data: bytes, addr) -> None:
        reply = data if self.echo else self.responder.respond_wire(data)
        if reply is not None:
            self.outbound.schedule(self._sendto, reply, addr)

    def _sendto(self, data: bytes, addr) -> None:
        if self.transport is not None and not self.transport.is_closing():
            self.transport.sendto(data, addr)


def make_tls_context(config: TestbedConfig, cert: CertificateBundle, alpn: list[str]) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.load_cert_chain(str(cert.cert_path), str(cert.key_path))
    versions = {"1.2": ssl.TLSVersion.TLSv1_2, "1.3": ssl.TLSVersion.TLSv1_3}
    chosen = sorted(versions[v] for v in config.tls_versions)
    ctx.minimum_version = chosen[0]
    ctx.maximum_version = chosen[-1]
    ctx.set_alpn_protocols(alpn)
    # session tickets would only add noise to the byte stream
    ctx.num_tickets = 0
    return ctx


class StreamDnsEndpoint(asyncio.Protocol):
    """One accepted connection of a DoTCP, DoT or DoH listener."""

    def __init__(self, kind: str, config: TestbedConfig, responder: ZoneResponder,
                 tls: Optional[ssl.SSLContext], log: StructuredLog, loop):
        self.kind = kind
        self.config = config
        self.responder = responder
        self.log = log
        delay, jitter = config.one_way_delay / 1000.0, config.jitter / 1000.0
        self.inbound = DelayLine(loop, delay, jitter, ordered=True)
        self.outbound = DelayLine(loop, delay, jitter, ordered=True)
        self.transport = None
        self.peer = None
        self._tls_ctx = tls
        self._ssl: Optional[ssl.SSLObject] = None
        self._in_bio = ssl.MemoryBIO()
        self._out_bio = ssl.MemoryBIO()
        self._handshaken = tls is None
        self._buffer = bytearray()
        self._http = h11.Connection(h11.SERVER) if kind == "doh" else None
        self._http_request = None
        self._http_body = bytearray()
        self.queries = 0

    def connection_made(self, transport) -> None:
        self.transport = transport
        self.peer = transport.get_extra_info("peername")
        if self._tls_ctx is not None:
            self._ssl = self._tls_ctx.wrap_bio(self._in_bio, self._out_bio, server_side=True)

    def data_received(self, data: bytes) -> None:
        self.inbound.schedule(self._on_wire, data)

    def eof_received(self):
        self.inbound.schedule(self._close)
        return True

    def connection_lost(self, exc) -> None:
        self.log.write(
            "stream_connection", proto=self.kind, client=f"{self.peer[0]}:{self.peer[1]}" if self.peer else None,
            queries=self.queries, tls_version=self._ssl.version() if self._ssl and self._handshaken else None,
        )

    # -- byte plumbing
    def _raw_write(self, data: bytes) -> None:
        if data:
            self.outbound.schedule(self._transport_write, data)

    def _transport_write(self, data: bytes) -> None:
        if self.transport is not None and not self.transport.is_closing():
            self.transport.write(data)

    def _close(self) -> None:
        if self.transport is not None and not self.transport.is_closing():
            self.transport.close()

    def _flush_tls(self) -> None:
        self._raw_write(self._out_bio.read())

    def _on_wire(self, data: bytes) -> None:
        if self._ssl is None:
            self._on_app(data)
            return
        self._in_bio.write(data)
        if not self._handshaken:
            try:
                self._ssl.do_handshake()
                self._handshaken = True
            except ssl.SSLWantReadError:
                pass
            except ssl.SSLError as exc:
                logger.debug("%s TLS handshake failed: %s", self.kind, exc)
                self._flush_tls()
                self.outbound.schedule(self._close)
                return
            self._flush_tls()
            if not self._handshaken:
                return
        chunks = []
        while True:
            try:
                chunk = self._ssl.read(65536)
            except (ssl.SSLWantReadError, ssl.SSLZeroReturnError):
                break
            except ssl.SSLError as exc:
                logger.debug("%s TLS read failed: %s", self.kind, exc)
                break
            if not chunk:
                break
            chunks.append(chunk)
        self._flush_tls()
        if chunks:
            self._on_app(b"".join(chunks))

    def _write_app(self, data: bytes) -> None:
        if self._ssl is None:
            self._raw_write(data)
        else:
            self._ssl.write(data)
            self._flush_tls()

    # -- application layer
    def _on_app(self, data: bytes) -> None:
        if self._http is not None:
            self._on_http(data)
            return
        self._buffer.extend(data)
        while len(self._buffer) >= 2:
            length = int.from_bytes(self._buffer[:2], "big")
            if len(self._buffer) < 2 + length:
                break
            wire = bytes(self._buffer[2 : 2 + length])
            del self._buffer[: 2 + length]
            self.queries += 1
            reply = self.responder.respond_wire(wire, stream=True)
            if reply is not None:
                self._write_app(len(reply).to_bytes(2, "big") + reply)

    def _on_http(self, data: bytes) -> None:
        conn = self._http
        conn.receive_data(data)
        while True:
            try:
                event = conn.next_event()
            except h11.RemoteProtocolError:
                self._http_reply(400, b"", "text/plain")
                return
            if event is h11.NEED_DATA or event is h11.PAUSED:
                if event is h11.PAUSED and conn.our_state is h11.DONE and conn.their_state is h11.DONE:
                    conn.start_next_cycle()
                    continue
                return
            if isinstance(event, h11.Request):
                self._http_request = event
                self._http_body = bytearray()
            elif isinstance(event, h11.Data):
                self._http_body.extend(event.data)
            elif isinstance(event, h11.EndOfMessage):
                self._answer_http()
            elif isinstance(event, h11.ConnectionClosed):
                return

    def _answer_http(self) -> None:
        req = self._http_request
        target = req.target.decode("latin-1")
        path, _, query = target.partition("?")
        wire = None
        if path == self.config.doh_path:
            if req.method == b"POST":
                wire = bytes(self._http_body)
            elif req.method == b"GET":
                for part in query.split("&"):
                    if part.startswith("dns="):
                        value = part[4:]
                        wire = base64.urlsafe_b64decode(value + "=" * (-len(value) % 4))
        self.queries += 1
        if wire is None:
            self._http_reply(404, b"", "text/plain")
            return
        if self.config.doh_status != 200:
            self._http_reply(self.config.doh_status, b"", "text/plain")
            return
        reply = self.responder.respond_wire(wire)
        if reply is None:
            self._http_reply(400, b"", "text/plain")
            return
        self._http_reply(200, reply, "application/dns-message")

    def _http_reply(self, status: int, body: bytes, content_type: str) -> None:
        conn = self._http
        try:
            out = conn.send(h11.Response(status_code=status, headers=[
                ("content-type", content_type),
                ("content-length", str(len(body))),
                ("cache-control", "max-age=0"),
            ]))
            out += conn.send(h11.Data(data=body)) if body else b""
            out += conn.send(h11.EndOfMessage())
        except h11.LocalProtocolError as exc:
            logger.debug("cannot send HTTP response: %s", exc)
            return
        self._write_app(out)
        if conn.our_state is h11.DONE and conn.their_state is h11.DONE:
            conn.start_next_cycle()


def stream_listener_socket(host: str, port: int, tfo: bool) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
        if tfo:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_FASTOPEN, TCP_FASTOPEN_QUEUE)
        sock.listen(128)
    except OSError:
        sock.close()
        raise
    sock.setblocking(False)
    return sock

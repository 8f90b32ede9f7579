"""DoUDP, DoTCP, DoT and DoH measurement clients plus feature probes.

All clients open a fresh socket per query and report times in milliseconds:
``handshake_time`` covers TCP (and TLS) establishment, ``resolve_time`` runs
from sending the query to holding the complete response.
"""

from __future__ import annotations

import enum
import http.client
import logging
import select
import socket
import ssl
import time
from dataclasses import dataclass
from typing import Optional
from urllib.parse import urlsplit

from . import dns_codec, netpath
from .doq_client import DoqSessionConfig, doq_early_data_query
from .errors import (
    DnsError,
    HttpError,
    Malformed,
    MeasurementError,
    PreconditionError,
    Refused,
    Timeout,
    TlsFailure,
)

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 5.0
DEFAULT_DOH_PATH = "/dns-query"
DOH_CONTENT_TYPE = "application/dns-message"


class Protocol(str, enum.Enum):
    DOUDP = "DoUDP"
    DOTCP = "DoTCP"
    DOT = "DoT"
    DOH = "DoH"
    DOQ = "DoQ"

    @classmethod
    def parse(cls, text: str) -> "Protocol":
        for p in cls:
            if p.value.lower() == text.lower():
                return p
        raise ValueError(f"unknown protocol {text!r}")


DEFAULT_PORTS = {
    Protocol.DOUDP: 53,
    Protocol.DOTCP: 53,
    Protocol.DOT: 853,
    Protocol.DOH: 443,
    Protocol.DOQ: 853,
}


@dataclass
class DoxSessionResult:
    protocol: Protocol
    target: tuple[str, int]
    resolve_time: Optional[float] = None  # ms
    handshake_time: Optional[float] = None  # ms, absent for DoUDP
    tls_version: Optional[str] = None  # "1.2" / "1.3", absent without TLS
    response: Optional[dns_codec.DnsMessage] = None
    truncated: bool = False
    http_status: Optional[int] = None

    @property
    def rcode(self) -> Optional[int]:
        return self.response.rcode if self.response is not None else None


def _decode(wire: bytes) -> dns_codec.DnsMessage:
    try:
        return dns_codec.decode_message(wire)
    except dns_codec.DnsCodecError as exc:
        raise Malformed(f"undecodable DNS response: {exc}") from exc


def _finish(result: DoxSessionResult, response: dns_codec.DnsMessage) -> DoxSessionResult:
    result.response = response
    result.truncated = response.tc
    if response.rcode != dns_codec.RCODE_NOERROR:
        raise DnsError(response.rcode, result)
    return result


def _io_error(exc: OSError) -> MeasurementError:
    err = netpath.map_os_error(exc)
    if isinstance(err, MeasurementError):
        return err
    return Refused(str(exc)) if isinstance(exc, ConnectionError) else Malformed(str(exc))


def query_doudp(
    target: tuple[str, int],
    name: str,
    rd: bool = True,
    timeout: float = DEFAULT_TIMEOUT,
    edns_options=None,
) -> DoxSessionResult:
    """Single datagram, no retransmission; responses with a foreign ID are ignored."""
    result = DoxSessionResult(Protocol.DOUDP, tuple(target))
    query = dns_codec.build_query(name, rd, edns_options)
    wire = dns_codec.encode_message(query)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        netpath.bind_random_port(sock)
        sock.connect(tuple(target))
        start = time.perf_counter()
        sock.send(wire)
        deadline = start + timeout
        while True:
            remaining = deadline - time.perf_counter()
            if remaining <= 0 or not select.select([sock], [], [], remaining)[0]:
                raise Timeout("no DoUDP response before timeout")
            data = sock.recv(65535)
            arrived = time.perf_counter()
            if len(data) < 2 or int.from_bytes(data[:2], "big") != query.id:
                logger.debug("discarding DoUDP datagram with foreign message ID")
                continue
            response = _decode(data)
            if not response.qr:
                continue
            result.resolve_time = (arrived - start) * 1000
            return _finish(result, response)
    except OSError as exc:
        raise _io_error(exc) from exc
    finally:
        sock.close()


def _stream_exchange(sock, wire: bytes) -> tuple[bytes, float]:
    """Send a length-prefixed query; return (response, seconds)."""
    start = time.perf_counter()
    sock.sendall(len(wire).to_bytes(2, "big") + wire)
    length = int.from_bytes(netpath.recv_exact(sock, 2), "big")
    data = netpath.recv_exact(sock, length)
    return data, time.perf_counter() - start


def _connect(target, timeout: float) -> tuple[socket.socket, float]:
    try:
        return netpath.tcp_connect(target[0], int(target[1]), timeout)
    except OSError as exc:
        raise _io_error(exc) from exc


def query_dotcp(
    target: tuple[str, int],
    name: str,
    rd: bool = True,
    timeout: float = DEFAULT_TIMEOUT,
    edns_options=None,
) -> DoxSessionResult:
    result = DoxSessionResult(Protocol.DOTCP, tuple(target))
    wire = dns_codec.encode_query(name, rd, edns_options)
    sock, elapsed = _connect(target, timeout)
    result.handshake_time = elapsed * 1000
    try:
        data, took = _stream_exchange(sock, wire)
    except OSError as exc:
        raise _io_error(exc) from exc
    finally:
        sock.close()
    result.resolve_time = took * 1000
    return _finish(result, _decode(data))


def client_tls_context(alpn: list[str]) -> ssl.SSLContext:
    """Record-only TLS: no verification, TLS 1.3 preferred, 1.2 accepted."""
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_NONE
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.set_alpn_protocols(alpn)
    return ctx


def _tls_version(sock: ssl.SSLSocket) -> Optional[str]:
    version = sock.version() or ""
    return version[4:] if version.startswith("TLSv") else None


def _tls_connect(target, timeout: float, alpn: list[str]) -> tuple[ssl.SSLSocket, float]:
    raw, tcp_elapsed = _connect(target, timeout)
    start = time.perf_counter()
    try:
        # no SNI: resolvers are addressed by IP and their names are unknown
        tls = client_tls_context(alpn).wrap_socket(raw, server_hostname=None)
    except socket.timeout as exc:
        raw.close()
        raise Timeout("TLS handshake timed out") from exc
    except ssl.SSLError as exc:
        raw.close()
        raise TlsFailure(str(exc)) from exc
    except OSError as exc:
        raw.close()
        raise _io_error(exc) from exc
    return tls, tcp_elapsed + time.perf_counter() - start


def query_dot(
    target: tuple[str, int],
    name: str,
    rd: bool = True,
    timeout: float = DEFAULT_TIMEOUT,
    edns_options=None,
) -> DoxSessionResult:
    result = DoxSessionResult(Protocol.DOT, tuple(target))
    wire = dns_codec.encode_query(name, rd, edns_options)
    sock, elapsed = _tls_connect(target, timeout, ["dot"])
    result.handshake_time = elapsed * 1000
    result.tls_version = _tls_version(sock)
    try:
        data, took = _stream_exchange(sock, wire)
    except OSError as exc:
        raise _io_error(exc) from exc
    finally:
        sock.close()
    result.resolve_time = took * 1000
    return _finish(result, _decode(data))


def doh_path(url_template: Optional[str]) -> str:
    """Path component from a URL template such as ``https://{ip}/dns-query``."""
    if not url_template:
        return DEFAULT_DOH_PATH
    if url_template.startswith("/"):
        return url_template
    parts = urlsplit(url_template.replace("{ip}", "host").replace("{port}", "1"))
    return parts.path or DEFAULT_DOH_PATH


def query_doh(
    target: tuple[str, int],
    name: str,
    rd: bool = True,
    url_template: Optional[str] = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> DoxSessionResult:
    """RFC 8484 POST over HTTP/1.1; the DNS message ID is 0 as the RFC recommends."""
    result = DoxSessionResult(Protocol.DOH, tuple(target))
    wire = dns_codec.encode_query(name, rd, msg_id=0)
    sock, elapsed = _tls_connect(target, timeout, ["http/1.1"])
    result.handshake_time = elapsed * 1000
    result.tls_version = _tls_version(sock)
    conn = http.client.HTTPConnection(target[0], int(target[1]), timeout=timeout)
    conn.sock = sock
    try:
        start = time.perf_counter()
        conn.request(
            "POST",
            doh_path(url_template),
            body=wire,
            headers={"Content-Type": DOH_CONTENT_TYPE, "Accept": DOH_CONTENT_TYPE},
        )
        resp = conn.getresponse()
        body = resp.read()
        took = time.perf_counter() - start
    except http.client.HTTPException as exc:
        raise Malformed(f"bad HTTP response: {exc}") from exc
    except OSError as exc:
        raise _io_error(exc) from exc
    finally:
        conn.close()
    result.http_status = resp.status
    if not 200 <= resp.status < 300:
        raise HttpError(resp.status, resp.reason)
    result.resolve_time = took * 1000
    return _finish(result, _decode(body))


# -- feature probes


def probe_tfo(target: tuple[str, int], name: str = "test.com", timeout: float = DEFAULT_TIMEOUT) -> bool:
    """Whether the server grants TCP Fast Open cookies.

    The first connection asks for a cookie, the second one carries the
    query in its SYN. The kernel reports whether that SYN data was
    acknowledged, which only happens with a valid cookie.
    """
    wire = dns_codec.encode_query(name)
    payload = len(wire).to_bytes(2, "big") + wire
    acked = []
    for _ in range(2):
        try:
            sock, _ = netpath.tcp_connect(target[0], int(target[1]), timeout, fastopen=True)
        except OSError as exc:
            raise _io_error(exc) from exc
        try:
            sock.sendall(payload)
            length = int.from_bytes(netpath.recv_exact(sock, 2), "big")
            netpath.recv_exact(sock, length)
            acked.append(bool(netpath.syn_data_acked(sock)))
        except OSError as exc:
            raise _io_error(exc) from exc
        finally:
            sock.close()
    return any(acked)


def probe_keepalive(
    target: tuple[str, int],
    protocol: Protocol | str = Protocol.DOTCP,
    name: str = "test.com",
    timeout: float = DEFAULT_TIMEOUT,
) -> Optional[int]:
    """Send edns-tcp-keepalive; return the server's timeout (100 ms units) if echoed."""
    protocol = Protocol.parse(protocol) if isinstance(protocol, str) else protocol
    options = [dns_codec.keepalive_option()]
    if protocol is Protocol.DOTCP:
        fn = query_dotcp
    elif protocol is Protocol.DOT:
        fn = query_dot
    else:
        raise ValueError("keepalive applies to DoTCP and DoT only")
    try:
        result = fn(target, name, True, timeout, edns_options=options)
    except DnsError as exc:
        result = exc.result
    return dns_codec.extract_keepalive_timeout(result.response)


def probe_quic_0rtt(
    target: tuple[str, int],
    session_ticket,
    name: str = "test.com",
    quic_version: Optional[int] = None,
    doq_alpn: Optional[str] = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> bool:
    """Resume with ``session_ticket`` and report whether early data was accepted."""
    if session_ticket is None:
        raise PreconditionError("0-RTT probe needs a session ticket from a prior session")
    config = DoqSessionConfig(target=tuple(target), session_ticket=session_ticket, timeout=timeout * 1000)
    if quic_version is not None:
        config.quic_versions_offered = [quic_version]
    if doq_alpn is not None:
        config.doq_alpns_offered = [doq_alpn]
    try:
        result = doq_early_data_query(config, name)
    except DnsError as exc:
        result = exc.result
    return result.early_data_accepted

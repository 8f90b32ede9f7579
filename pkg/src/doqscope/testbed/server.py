"""Start and stop the testbed on a private event loop thread."""

from __future__ import annotations

import asyncio
import errno
import logging
import socket
import threading
from dataclasses import dataclass, field
from typing import Optional

from .. import netpath
from ..errors import BindFailure
from .certs import CertificateBundle, make_certificate
from .config import TestbedConfig
from .endpoints import (
    StreamDnsEndpoint,
    UdpDnsEndpoint,
    enable_tfo_server_side,
    make_tls_context,
    stream_listener_socket,
)
from .logs import StructuredLog
from .quic_server import AddressTokens, DoqEndpoint
from .zone import ZoneResponder

logger = logging.getLogger(__name__)

STREAM_PROTOCOLS = ("dotcp", "dot", "doh")


@dataclass
class TestbedHandle:
    """A running testbed. Use as a context manager or call :meth:`stop`."""

    __test__ = False

    config: TestbedConfig
    certificate: CertificateBundle
    log: StructuredLog
    doq_ports: list[int] = field(default_factory=list)
    ports: dict[str, int] = field(default_factory=dict)
    _loop: Optional[asyncio.AbstractEventLoop] = None
    _thread: Optional[threading.Thread] = None
    _transports: list = field(default_factory=list)
    _servers: list = field(default_factory=list)
    _doq: list = field(default_factory=list)
    _stopped: bool = False

    @property
    def host(self) -> str:
        return self.config.host

    @property
    def doq_addresses(self) -> list[tuple[str, int]]:
        return [(self.host, p) for p in self.doq_ports]

    def address(self, protocol: str) -> tuple[str, int]:
        protocol = protocol.lower()
        if protocol == "doq":
            return self.doq_addresses[0]
        if protocol not in self.ports:
            raise KeyError(f"{protocol} endpoint is not enabled")
        return (self.host, self.ports[protocol])

    def records(self, kind: Optional[str] = None) -> list[dict]:
        return self.log.records(kind)

    def stop(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        for proto in STREAM_PROTOCOLS:
            if proto in self.ports:
                netpath.unregister_tcp_path(self.host, self.ports[proto])
        if self._loop is not None and self._loop.is_running():
            fut = asyncio.run_coroutine_threadsafe(self._shutdown(), self._loop)
            try:
                fut.result(timeout=5)
            except Exception:  # noqa: BLE001 - shutdown is best effort
                logger.exception("testbed shutdown failed")
            self._loop.call_soon_threadsafe(self._loop.stop)
        if self._thread is not None:
            self._thread.join(timeout=5)
        if self._loop is not None and not self._loop.is_running():
            self._loop.close()
        self.log.close()

    async def _shutdown(self) -> None:
        for endpoint in self._doq:
            endpoint.shutdown()
        for transport in self._transports:
            transport.close()
        for server in self._servers:
            server.close()
        for server in self._servers:
            await server.wait_closed()

    def __enter__(self) -> "TestbedHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def _bind_udp(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.bind((host, port))
    except OSError:
        sock.close()
        raise
    sock.setblocking(False)
    return sock


async def _start(handle: TestbedHandle) -> None:
    config = handle.config
    loop = asyncio.get_running_loop()
    responder = ZoneResponder(config.zone, config.keepalive_echo, config.refuse_queries)
    tokens = AddressTokens()

    for port in config.doq_ports:
        endpoint = DoqEndpoint(config, handle.certificate, responder, tokens, handle.log, loop)
        transport, _ = await loop.create_datagram_endpoint(
            lambda endpoint=endpoint: endpoint, sock=_bind_udp(config.host, port)
        )
        handle._transports.append(transport)
        handle._doq.append(endpoint)
        handle.doq_ports.append(transport.get_extra_info("sockname")[1])

    for name, port, echo in (("doudp", config.doudp_port, False), ("udp_echo", config.udp_echo_port, True)):
        if port is None:
            continue
        transport, _ = await loop.create_datagram_endpoint(
            lambda echo=echo: UdpDnsEndpoint(config, responder, loop, echo=echo),
            sock=_bind_udp(config.host, port),
        )
        handle._transports.append(transport)
        handle.ports[name] = transport.get_extra_info("sockname")[1]

    if config.tfo:
        enable_tfo_server_side()
    for name in STREAM_PROTOCOLS:
        port = getattr(config, f"{name}_port")
        if port is None:
            continue
        tls = None
        if name == "dot":
            tls = make_tls_context(config, handle.certificate, ["dot"])
        elif name == "doh":
            tls = make_tls_context(config, handle.certificate, ["http/1.1"])
        sock = stream_listener_socket(config.host, port, config.tfo)
        server = await loop.create_server(
            lambda name=name, tls=tls: StreamDnsEndpoint(name, config, responder, tls, handle.log, loop),
            sock=sock,
        )
        handle._servers.append(server)
        handle.ports[name] = sock.getsockname()[1]


def serve(config: TestbedConfig) -> TestbedHandle:
    """Start every enabled endpoint; returns once all of them are listening.

    Raises :class:`BindFailure` when any port cannot be bound.
    """
    certificate = make_certificate(config.certificate_profile, config.common_name)
    handle = TestbedHandle(config=config, certificate=certificate, log=StructuredLog(config.log_path))
    loop = asyncio.new_event_loop()
    handle._loop = loop
    ready = threading.Event()
    thread = threading.Thread(target=_run_loop, args=(loop, ready), name="doqscope-testbed", daemon=True)
    handle._thread = thread
    thread.start()
    ready.wait()
    try:
        asyncio.run_coroutine_threadsafe(_start(handle), loop).result(timeout=10)
    except OSError as exc:
        handle.stop()
        if exc.errno in (errno.EADDRINUSE, errno.EACCES, errno.EADDRNOTAVAIL):
            raise BindFailure(exc.errno, f"cannot bind testbed endpoint: {exc.strerror}") from exc
        raise
    except BaseException:
        handle.stop()
        raise
    for proto in STREAM_PROTOCOLS:
        if proto in handle.ports:
            netpath.register_tcp_path(config.host, handle.ports[proto], config.one_way_delay / 1000.0)
    logger.info(
        "testbed on %s: doq=%s %s", config.host, handle.doq_ports,
        " ".join(f"{k}={v}" for k, v in sorted(handle.ports.items())),
    )
    return handle


def _run_loop(loop: asyncio.AbstractEventLoop, ready: threading.Event) -> None:
    asyncio.set_event_loop(loop)
    loop.call_soon(ready.set)
    loop.run_forever()

"""Client-side socket helpers and the emulated-path registry.

The testbed delays every datagram and stream segment it handles itself, but
the kernel answers a TCP SYN before user space ever sees the connection. To
keep connection establishment honest on the testbed, TCP endpoints register
their one-way delay here and :func:`tcp_connect` holds the freshly
established socket for one emulated round trip before handing it out.
Unregistered destinations are untouched, so real-world measurements are
unaffected.
"""

from __future__ import annotations

import errno
import random
import socket
import struct
import threading
import time
from typing import Optional

from .errors import NetworkUnreachable, Refused, Timeout

_lock = threading.Lock()
_tcp_paths: dict[tuple[str, int], float] = {}

TCP_FASTOPEN_CONNECT = getattr(socket, "TCP_FASTOPEN_CONNECT", 30)
TCPI_OPT_SYN_DATA = 0x20

_UNREACHABLE = {errno.ENETUNREACH, errno.EHOSTUNREACH, errno.EHOSTDOWN}


def register_tcp_path(host: str, port: int, one_way_delay: float) -> None:
    with _lock:
        _tcp_paths[(host, port)] = one_way_delay


def unregister_tcp_path(host: str, port: int) -> None:
    with _lock:
        _tcp_paths.pop((host, port), None)


def emulated_syn_rtt(host: str, port: int) -> float:
    """Seconds of emulated SYN -> SYN/ACK round trip for a destination."""
    with _lock:
        return 2 * _tcp_paths.get((host, port), 0.0)


def ephemeral_range() -> tuple[int, int]:
    try:
        with open("/proc/sys/net/ipv4/ip_local_port_range") as fp:
            low, high = (int(x) for x in fp.read().split())
            return low, high
    except (OSError, ValueError):
        return 49152, 65535


def bind_random_port(sock: socket.socket, host: str = "0.0.0.0", attempts: int = 16) -> int:
    """Bind to a source port drawn uniformly from the ephemeral range."""
    low, high = ephemeral_range()
    for _ in range(attempts):
        port = random.randint(low, high)
        try:
            sock.bind((host, port))
            return port
        except OSError as exc:
            if exc.errno != errno.EADDRINUSE:
                raise
    sock.bind((host, 0))
    return sock.getsockname()[1]


def map_os_error(exc: OSError):
    """Translate socket errors into toolkit errors."""
    if isinstance(exc, socket.timeout):
        return Timeout(str(exc) or "timed out")
    if isinstance(exc, ConnectionRefusedError) or exc.errno == errno.ECONNREFUSED:
        return Refused(str(exc))
    if exc.errno in _UNREACHABLE:
        return NetworkUnreachable(str(exc))
    return exc


def tcp_connect(
    host: str,
    port: int,
    timeout: float,
    fastopen: bool = False,
) -> tuple[socket.socket, float]:
    """Open a TCP connection, returning (socket, seconds from SYN to established).

    On refusal the raised :class:`Refused` carries ``rtt`` (seconds) since a
    RST is still an answer from the path.
    """
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.settimeout(timeout)
    if fastopen:
        sock.setsockopt(socket.IPPROTO_TCP, TCP_FASTOPEN_CONNECT, 1)
    extra = emulated_syn_rtt(host, port)
    start = time.perf_counter()
    try:
        sock.connect((host, port))
    except OSError as exc:
        elapsed = time.perf_counter() - start
        sock.close()
        err = map_os_error(exc)
        if isinstance(err, Refused):
            if extra:
                time.sleep(extra)
            err.rtt = elapsed + extra
        raise err from exc
    if extra:
        time.sleep(extra)
    return sock, time.perf_counter() - start


def abort(sock: socket.socket) -> None:
    """Close with RST instead of FIN."""
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
    except OSError:
        pass
    sock.close()


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionResetError("connection closed mid-message")
        buf += chunk
    return bytes(buf)


def syn_data_acked(sock: socket.socket) -> Optional[bool]:
    """Whether the kernel saw data in our SYN acknowledged (Linux TCP_INFO)."""
    try:
        info = sock.getsockopt(socket.IPPROTO_TCP, socket.TCP_INFO, 104)
    except OSError:
        return None
    return bool(info[5] & TCPI_OPT_SYN_DATA)

"""Response-time campaign: cache-warming query, measurement query, RTT probe.

Each pair runs an identical query twice over fresh sessions. For DoQ the
measurement session offers only the QUIC version negotiated by the warming
session and presents the NEW_TOKEN it received, so neither Version
Negotiation nor a Retry can inflate the measured handshake.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import random
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Optional

from . import dox_clients, probe_core
from .config import load_toml
from .doq_client import (
    ConnectionEventLog,
    DoqSessionConfig,
    TokenCache,
    doq_query,
)
from .dox_clients import Protocol
from .errors import DnsError, MeasurementError
from .probe_core import ProbeKind, Target
from .quic_versions import DEFAULT_DOQ_ALPNS, DEFAULT_QUIC_VERSIONS

logger = logging.getLogger(__name__)

ALL_PROTOCOLS = (Protocol.DOUDP, Protocol.DOTCP, Protocol.DOT, Protocol.DOH, Protocol.DOQ)
DEFAULT_QNAME = "test.com"
DEFAULT_MAX_GAP = 1.0  # seconds between warming and measurement


@dataclass
class Resolver:
    """One resolver and the port it uses for each protocol."""

    ip: str
    ports: dict = field(default_factory=dict)  # Protocol -> port
    doq_ports: list[int] = field(default_factory=list)
    doh_path: str = dox_clients.DEFAULT_DOH_PATH

    def __post_init__(self):
        self.ports = {Protocol.parse(k) if isinstance(k, str) else k: int(v) for k, v in self.ports.items()}
        if not self.doq_ports and Protocol.DOQ in self.ports:
            self.doq_ports = [self.ports[Protocol.DOQ]]

    def port(self, protocol: Protocol) -> int:
        return self.ports.get(protocol, dox_clients.DEFAULT_PORTS[protocol])


@dataclass
class MeasurementRecord:
    correlation_id: str
    timestamp: str
    resolver_ip: str
    port: int
    protocol: str
    qname: str
    warming: bool
    handshake_time: Optional[float] = None
    resolve_time: Optional[float] = None
    rtt: Optional[float] = None
    rtt_error: Optional[str] = None
    tls_version: Optional[str] = None
    quic_version: Optional[int] = None
    doq_alpn: Optional[str] = None
    token_reused: bool = False
    rcode: Optional[int] = None
    error: Optional[str] = None
    started: Optional[float] = None  # monotonic seconds, for gap checks
    finished: Optional[float] = None
    event_log: Optional[dict] = None  # qlog document, DoQ only

    @property
    def success(self) -> bool:
        return self.error is None and self.resolve_time is not None

    def connection_log(self) -> Optional[ConnectionEventLog]:
        return ConnectionEventLog.from_qlog(self.event_log) if self.event_log else None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementRecord":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _record(cid, resolver: Resolver, protocol: Protocol, port: int, qname: str, warming: bool) -> MeasurementRecord:
    return MeasurementRecord(
        correlation_id=cid, timestamp=_now_iso(), resolver_ip=resolver.ip, port=port,
        protocol=protocol.value, qname=qname, warming=warming,
    )


def _run_dox(rec: MeasurementRecord, resolver: Resolver, protocol: Protocol, timeout: float) -> None:
    target = (resolver.ip, rec.port)
    try:
        if protocol is Protocol.DOUDP:
            res = dox_clients.query_doudp(target, rec.qname, timeout=timeout)
        elif protocol is Protocol.DOTCP:
            res = dox_clients.query_dotcp(target, rec.qname, timeout=timeout)
        elif protocol is Protocol.DOT:
            res = dox_clients.query_dot(target, rec.qname, timeout=timeout)
        else:
            res = dox_clients.query_doh(target, rec.qname, url_template=resolver.doh_path, timeout=timeout)
    except DnsError as exc:
        # the transport worked: timings stand, the record is flagged via rcode
        res = exc.result
    rec.handshake_time = res.handshake_time
    rec.resolve_time = res.resolve_time
    rec.tls_version = res.tls_version
    rec.rcode = res.rcode


def _run_doq(rec: MeasurementRecord, config: DoqSessionConfig):
    try:
        res = doq_query(config, rec.qname)
    except DnsError as exc:
        res = exc.result
    rec.handshake_time = res.handshake_time
    rec.resolve_time = res.resolve_time
    rec.quic_version = res.negotiated_quic_version
    rec.doq_alpn = res.negotiated_doq_alpn
    rec.rcode = res.rcode
    rec.token_reused = bool(config.token) and res.token_sent
    rec.event_log = res.event_log.to_qlog(title=rec.correlation_id)
    return res


def _execute(rec: MeasurementRecord, fn: Callable[[], object]):
    rec.started = time.monotonic()
    try:
        return fn()
    except MeasurementError as exc:
        rec.error = exc.error_class
    except OSError as exc:
        rec.error = type(exc).__name__
    finally:
        rec.finished = time.monotonic()
    return None


def run_pair(
    resolver: Resolver,
    protocol: Protocol | str,
    qname: str = DEFAULT_QNAME,
    port: Optional[int] = None,
    timeout: float = probe_core.DEFAULT_TIMEOUT,
    token_cache: Optional[TokenCache] = None,
    quic_versions: Optional[list[int]] = None,
    doq_alpns: Optional[list[str]] = None,
) -> tuple[MeasurementRecord, Optional[MeasurementRecord]]:
    """Warming query followed immediately by the measurement query.

    Returns (warming, None) when the warming query failed.
    """
    protocol = Protocol.parse(protocol) if isinstance(protocol, str) else protocol
    port = port if port is not None else resolver.port(protocol)
    cid = uuid.uuid4().hex
    warm = _record(cid, resolver, protocol, port, qname, warming=True)

    if protocol is not Protocol.DOQ:
        _execute(warm, lambda: _run_dox(warm, resolver, protocol, timeout))
        if warm.error is not None:
            return warm, None
        meas = _record(cid, resolver, protocol, port, qname, warming=False)
        _execute(meas, lambda: _run_dox(meas, resolver, protocol, timeout))
        return warm, meas

    warm_config = DoqSessionConfig(
        target=(resolver.ip, port),
        quic_versions_offered=list(quic_versions or DEFAULT_QUIC_VERSIONS),
        doq_alpns_offered=list(doq_alpns or DEFAULT_DOQ_ALPNS),
        timeout=timeout * 1000,
    )
    warm_result = _execute(warm, lambda: _run_doq(warm, warm_config))
    if warm.error is not None or warm_result is None:
        return warm, None
    version = warm_result.negotiated_quic_version
    token = warm_result.new_token
    if token_cache is not None:
        if token is not None:
            token_cache.put((resolver.ip, port), token, version)
        else:
            cached = token_cache.get((resolver.ip, port))
            if cached is not None and cached.quic_version == version:
                token = cached.token
    meas_config = DoqSessionConfig(
        target=(resolver.ip, port),
        quic_versions_offered=[version],
        doq_alpns_offered=[warm_result.negotiated_doq_alpn],
        token=token,
        timeout=timeout * 1000,
    )
    meas = _record(cid, resolver, protocol, port, qname, warming=False)
    _execute(meas, lambda: _run_doq(meas, meas_config))
    return warm, meas


_RTT_KIND = {
    Protocol.DOUDP: ProbeKind.UDP_PAYLOAD,
    Protocol.DOTCP: ProbeKind.TCP_SYN,
    Protocol.DOT: ProbeKind.TCP_SYN,
    Protocol.DOH: ProbeKind.TCP_SYN,
    Protocol.DOQ: ProbeKind.QUIC_VN,
}


def attach_rtt(record: MeasurementRecord, timeout: float = probe_core.DEFAULT_TIMEOUT) -> MeasurementRecord:
    """Probe the path RTT with the protocol's own probe kind, same port."""
    protocol = Protocol.parse(record.protocol)
    kind = _RTT_KIND[protocol]
    transport = "tcp" if kind is ProbeKind.TCP_SYN else "udp"
    result = probe_core.probe(Target(record.resolver_ip, record.port, transport), kind, timeout)
    record.rtt = result.rtt
    record.rtt_error = result.error
    return record


def select_dox_verified(records: Iterable[MeasurementRecord], protocols: Iterable = ALL_PROTOCOLS) -> set[str]:
    """Resolvers with at least one successful measurement on every protocol."""
    wanted = {Protocol.parse(p).value if isinstance(p, str) else p.value for p in protocols}
    ok: dict[str, set[str]] = {}
    for r in records:
        if r.warming or not r.success:
            continue
        ok.setdefault(r.resolver_ip, set()).add(r.protocol)
    return {ip for ip, protos in ok.items() if wanted <= protos}


@dataclass
class CampaignConfig:
    interval: float = 3600.0  # seconds between ticks
    ticks: int = 168
    qname: str = DEFAULT_QNAME
    timeout: float = probe_core.DEFAULT_TIMEOUT
    workers: int = 16
    jitter: float = 0.0  # max random start offset per pair, seconds
    max_gap: float = DEFAULT_MAX_GAP
    protocols: list = field(default_factory=lambda: [p.value for p in ALL_PROTOCOLS])
    out_dir: str = "results"
    token_lifetime: float = 600.0

    @classmethod
    def from_mapping(cls, values: dict) -> "CampaignConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown campaign settings: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path) -> "CampaignConfig":
        data = load_toml(path)
        return cls.from_mapping(data.get("campaign", data))


class RecordStore:
    """Append-only JSON-lines store, one file per tick under results/<run>/."""

    def __init__(self, out_dir: str | Path, run_label: Optional[str] = None):
        label = run_label or datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        self.directory = Path(out_dir) / label
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, tick: int, records: Iterable[MeasurementRecord]) -> Path:
        path = self.directory / f"tick-{tick:04d}.jsonl"
        with self._lock, path.open("a", encoding="utf-8") as fp:
            for r in records:
                fp.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        return path


def load_records(path: str | Path) -> list[MeasurementRecord]:
    """Read every record below ``path`` (a file or a results directory)."""
    path = Path(path)
    files = sorted(path.rglob("*.jsonl")) if path.is_dir() else [path]
    out = []
    for f in files:
        with f.open(encoding="utf-8") as fp:
            out.extend(MeasurementRecord.from_dict(json.loads(line)) for line in fp if line.strip())
    return out


def _pairs_for(resolver: Resolver, protocols: list[Protocol]) -> list[tuple[Protocol, int]]:
    jobs = []
    for protocol in protocols:
        if protocol is Protocol.DOQ:
            for port in resolver.doq_ports or [resolver.port(Protocol.DOQ)]:
                jobs.append((protocol, port))
        else:
            jobs.append((protocol, resolver.port(protocol)))
    return jobs


def run_campaign(
    resolvers: list[Resolver],
    config: CampaignConfig = CampaignConfig(),
    store: Optional[RecordStore] = None,
    clock: Callable[[], float] = time.monotonic,
    sleep: Callable[[float], None] = time.sleep,
    rng: Optional[random.Random] = None,
    stop: Optional[threading.Event] = None,
) -> list[MeasurementRecord]:
    """Measure every resolver x protocol x DoQ port once per tick.

    Failures are recorded, never raised. Successful measurements are
    followed by an RTT probe. If a tick overruns the interval, the next
    one starts as soon as it finishes.
    """
    rng = rng or random.Random()
    protocols = [Protocol.parse(p) if isinstance(p, str) else p for p in config.protocols]
    store = store or RecordStore(config.out_dir)
    tokens = TokenCache(config.token_lifetime)
    all_records: list[MeasurementRecord] = []
    start = clock()
    for tick in range(config.ticks):
        if stop is not None and stop.is_set():
            break
        due = start + tick * config.interval
        if clock() < due:
            sleep(due - clock())
        jobs = [(r, p, port) for r in resolvers for p, port in _pairs_for(r, protocols)]
        offsets = [rng.uniform(0, config.jitter) if config.jitter else 0.0 for _ in jobs]

        def one(args):
            (resolver, protocol, port), offset = args
            if offset:
                sleep(offset)
            warm, meas = run_pair(
                resolver, protocol, config.qname, port=port, timeout=config.timeout, token_cache=tokens,
            )
            if meas is not None and meas.success:
                attach_rtt(meas, config.timeout)
            if meas is not None and warm.finished and meas.started and meas.started - warm.finished > config.max_gap:
                logger.warning("warming gap exceeded for %s %s", resolver.ip, protocol.value)
            return [warm] if meas is None else [warm, meas]

        tick_records: list[MeasurementRecord] = []
        with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
            for recs in pool.map(one, zip(jobs, offsets)):
                tick_records.extend(recs)
        store.append(tick, tick_records)
        all_records.extend(tick_records)
        logger.info("tick %d: %d records", tick, len(tick_records))
    return all_records

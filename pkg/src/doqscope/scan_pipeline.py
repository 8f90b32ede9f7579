"""Target lists, blocklist, the scan -> verify pipeline and weekly snapshots."""

from __future__ import annotations

import csv
import datetime
import ipaddress
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

from . import probe_core
from .doq_client import CertificateInfo, DoqSessionConfig, doq_connect
from .errors import MeasurementError, UnknownWeek
from .probe_core import ProbeResult, Target
from .quic_versions import DEFAULT_DOQ_ALPNS, DEFAULT_QUIC_VERSIONS, DOQ_PORTS

logger = logging.getLogger(__name__)

DEFAULT_RATE = 1000.0  # probes per second
DEFAULT_WORKERS = 64


def _read_lines(path: str | Path) -> list[str]:
    out = []
    with open(path, encoding="utf-8") as fp:
        for line in fp:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(line)
    return out


@dataclass
class TargetList:
    entries: list[str]
    source: str = "generator"

    def __post_init__(self):
        seen = set()
        clean = []
        for entry in self.entries:
            ip = str(ipaddress.IPv4Address(entry.strip()))
            if ip not in seen:
                seen.add(ip)
                clean.append(ip)
        self.entries = clean

    @classmethod
    def from_file(cls, path: str | Path) -> "TargetList":
        return cls(_read_lines(path), source=str(path))

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


class Blocklist:
    """Excluded networks. File-backed lists are re-read by :meth:`reload`."""

    def __init__(self, networks: Iterable[str] = (), path: Optional[str | Path] = None):
        self.path = Path(path) if path is not None else None
        self._static = [ipaddress.IPv4Network(n, strict=False) for n in networks]
        self.networks = list(self._static)
        self.reload()

    def reload(self) -> None:
        nets = list(self._static)
        if self.path is not None:
            nets += [ipaddress.IPv4Network(n, strict=False) for n in _read_lines(self.path)]
        self.networks = nets

    def __contains__(self, ip: str) -> bool:
        addr = ipaddress.IPv4Address(ip)
        return any(addr in net for net in self.networks)


class RateLimiter:
    """Token bucket shared by all sweep workers; keeps a timestamped send log."""

    def __init__(
        self,
        rate: float = DEFAULT_RATE,
        burst: int = 1,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.burst = max(1, burst)
        self._clock = clock
        self._sleep = sleep
        self._tokens = float(self.burst)
        self._last = clock()
        self._lock = threading.Lock()
        self.send_log: list[float] = []

    def acquire(self) -> float:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.burst, self._tokens + (now - self._last) * self.rate)
                self._last = now
                # tolerance: refill arithmetic can land a hair below one token
                if self._tokens >= 1 - 1e-9:
                    self._tokens = max(0.0, self._tokens - 1)
                    self.send_log.append(now)
                    return now
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)

    def max_rate(self, window: float = 1.0) -> float:
        """Highest number of sends observed in any ``window`` seconds, per second."""
        log = sorted(self.send_log)
        best = 0
        j = 0
        for i, t in enumerate(log):
            while log[j] <= t - window:
                j += 1
            best = max(best, i - j + 1)
        return best / window


@dataclass
class SweepReport:
    capable: list[tuple[str, int]] = field(default_factory=list)
    vn_versions: dict[tuple[str, int], list[int]] = field(default_factory=dict)
    errors: dict[tuple[str, int], str] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    probed: int = 0


def _check_ports(ports: Iterable[int], extra_ports: Iterable[int]) -> list[int]:
    allowed = set(DOQ_PORTS) | set(extra_ports)
    ports = sorted(set(ports))
    bad = [p for p in ports if p not in allowed]
    if bad:
        raise ValueError(f"ports {bad} are neither DoQ ports nor configured extras")
    return ports


def sweep(
    targets: TargetList | Iterable[str],
    ports: Iterable[int] = DOQ_PORTS,
    blocklist: Optional[Blocklist] = None,
    limiter: Optional[RateLimiter] = None,
    extra_ports: Iterable[int] = (),
    timeout: float = probe_core.DEFAULT_TIMEOUT,
    workers: int = DEFAULT_WORKERS,
    probe: Callable[[Target, float], ProbeResult] = probe_core.rtt_probe_quic,
) -> SweepReport:
    """Send the version-0 probe to every (target, port); never raises per target."""
    if not isinstance(targets, TargetList):
        targets = TargetList(list(targets))
    ports = _check_ports(ports, extra_ports)
    if blocklist is not None:
        blocklist.reload()
    limiter = limiter or RateLimiter(DEFAULT_RATE)
    report = SweepReport()
    queue = []
    for ip in targets:
        if blocklist is not None and ip in blocklist:
            report.skipped.append(ip)
            continue
        queue.extend((ip, port) for port in ports)

    def one(item):
        limiter.acquire()
        try:
            return item, probe(Target(item[0], item[1], "udp"), timeout)
        except Exception as exc:  # noqa: BLE001 - a sweep must survive any target
            logger.debug("probe of %s failed: %s", item, exc)
            return item, ProbeResult(Target(item[0], item[1]), probe_core.ProbeKind.QUIC_VN, error=type(exc).__name__)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for item, result in pool.map(one, queue):
            report.probed += 1
            if result.ok:
                report.capable.append(item)
                report.vn_versions[item] = result.vn_versions
            else:
                report.errors[item] = result.error or "Unknown"
    return report


def scan_quic_capable(
    targets: TargetList | Iterable[str],
    ports: Iterable[int] = DOQ_PORTS,
    **kwargs,
) -> list[tuple[str, int]]:
    """(ip, port) pairs that answered the probe with Version Negotiation."""
    return sweep(targets, ports, **kwargs).capable


@dataclass
class VerifiedResolver:
    ip: str
    ports_verified: list[int]
    negotiated_quic_version: int
    negotiated_doq_alpn: str
    certificate: Optional[CertificateInfo]
    week: str
    port_details: dict[int, dict] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.ports_verified:
            raise ValueError("a verified resolver needs at least one port")
        self.ports_verified = sorted(set(self.ports_verified))

    def identity(self) -> tuple:
        """Fields that must not change between two runs against the same server."""
        return (self.ip, tuple(self.ports_verified), self.negotiated_quic_version, self.negotiated_doq_alpn)

    def to_dict(self) -> dict:
        return {
            "ip": self.ip,
            "ports_verified": self.ports_verified,
            "negotiated_quic_version": self.negotiated_quic_version,
            "negotiated_doq_alpn": self.negotiated_doq_alpn,
            "certificate": self.certificate.to_dict() if self.certificate else None,
            "week": self.week,
            "port_details": {str(k): v for k, v in self.port_details.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerifiedResolver":
        return cls(
            ip=d["ip"],
            ports_verified=list(d["ports_verified"]),
            negotiated_quic_version=int(d["negotiated_quic_version"]),
            negotiated_doq_alpn=d["negotiated_doq_alpn"],
            certificate=CertificateInfo.from_dict(d["certificate"]) if d.get("certificate") else None,
            week=d["week"],
            port_details={int(k): v for k, v in (d.get("port_details") or {}).items()},
        )


def iso_week(when: Optional[datetime.date] = None) -> str:
    when = when or datetime.date.today()
    year, week, _ = when.isocalendar()
    return f"{year}-W{week:02d}"


def verify_doq(
    candidates: Iterable[tuple[str, int]],
    ports: Optional[Iterable[int]] = None,
    week: Optional[str] = None,
    timeout: float = probe_core.DEFAULT_TIMEOUT,
    workers: int = 16,
    quic_versions: Optional[list[int]] = None,
    doq_alpns: Optional[list[str]] = None,
    errors: Optional[dict] = None,
) -> list[VerifiedResolver]:
    """Complete a DoQ handshake on every proposed port of each QUIC-capable IP.

    A resolver is kept when at least one port negotiates a doq ALPN.
    Failures per (ip, port) are written into ``errors`` when given.
    """
    week = week or iso_week()
    candidates = list(candidates)
    by_ip: dict[str, set[int]] = {}
    for ip, port in candidates:
        by_ip.setdefault(ip, set()).add(int(port))
    base_ports = set(DOQ_PORTS) if ports is None else set(ports)
    jobs = [(ip, port) for ip in sorted(by_ip) for port in sorted(base_ports | by_ip[ip])]

    def attempt(job):
        ip, port = job
        config = DoqSessionConfig(
            target=(ip, port),
            quic_versions_offered=list(quic_versions or DEFAULT_QUIC_VERSIONS),
            doq_alpns_offered=list(doq_alpns or DEFAULT_DOQ_ALPNS),
            timeout=timeout * 1000,
        )
        try:
            return job, doq_connect(config), None
        except MeasurementError as exc:
            return job, None, exc.error_class
        except Exception as exc:  # noqa: BLE001
            logger.debug("verification of %s:%s failed: %s", ip, port, exc)
            return job, None, type(exc).__name__

    found: dict[str, dict[int, object]] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for (ip, port), result, error in pool.map(attempt, jobs):
            if result is None:
                if errors is not None:
                    errors[(ip, port)] = error
                continue
            found.setdefault(ip, {})[port] = result

    verified = []
    for ip in sorted(found):
        results = found[ip]
        first = results[min(results)]
        verified.append(
            VerifiedResolver(
                ip=ip,
                ports_verified=sorted(results),
                negotiated_quic_version=first.negotiated_quic_version,
                negotiated_doq_alpn=first.negotiated_doq_alpn,
                certificate=first.certificate,
                week=week,
                port_details={
                    port: {
                        "quic_version": r.negotiated_quic_version,
                        "doq_alpn": r.negotiated_doq_alpn,
                    }
                    for port, r in sorted(results.items())
                },
            )
        )
    return verified


@dataclass
class PipelineResult:
    targets: list[str]
    quic_capable: list[tuple[str, int]]
    doq_capable: list[tuple[str, int]]
    verified: list[VerifiedResolver]
    skipped: list[str] = field(default_factory=list)

    @property
    def monotonic(self) -> bool:
        """verified ⊆ doq-capable ⊆ quic-capable ⊆ targets, compared by ip."""
        t = set(self.targets)
        q = {ip for ip, _ in self.quic_capable}
        d = {ip for ip, _ in self.doq_capable}
        v = {r.ip for r in self.verified}
        return v <= d <= q <= t


def run_pipeline(
    targets: TargetList,
    ports: Iterable[int] = DOQ_PORTS,
    blocklist: Optional[Blocklist] = None,
    limiter: Optional[RateLimiter] = None,
    extra_ports: Iterable[int] = (),
    timeout: float = probe_core.DEFAULT_TIMEOUT,
    week: Optional[str] = None,
    verify_ports: Optional[Iterable[int]] = None,
) -> PipelineResult:
    report = sweep(targets, ports, blocklist, limiter, extra_ports, timeout)
    verified = verify_doq(report.capable, ports=verify_ports, week=week, timeout=timeout)
    doq_capable = [(r.ip, p) for r in verified for p in r.ports_verified]
    return PipelineResult(
        targets=list(targets),
        quic_capable=report.capable,
        doq_capable=doq_capable,
        verified=verified,
        skipped=report.skipped,
    )


# -- snapshots


@dataclass(frozen=True)
class SnapshotDiff:
    week_a: str
    week_b: str
    retained: frozenset
    gained: frozenset
    lost: frozenset
    size_a: int

    @property
    def retention(self) -> float:
        return len(self.retained) / self.size_a if self.size_a else 1.0


class SnapshotStore:
    """Verified-resolver snapshots stored as ``<root>/snapshots/<week>.jsonl``."""

    def __init__(self, root: str | Path = "."):
        self.root = Path(root)
        self.directory = self.root / "snapshots"
        self._lock = threading.Lock()

    def path(self, week: str) -> Path:
        return self.directory / f"{week}.jsonl"

    def store(self, resolvers: Iterable[VerifiedResolver], week: str) -> Path:
        resolvers = list(resolvers)
        for r in resolvers:
            if r.week != week:
                raise ValueError(f"resolver {r.ip} is labelled {r.week}, not {week}")
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            path = self.path(week)
            tmp = path.with_suffix(".jsonl.tmp")
            with tmp.open("w", encoding="utf-8") as fp:
                for r in sorted(resolvers, key=lambda r: ipaddress.IPv4Address(r.ip)):
                    fp.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
            tmp.replace(path)
        return path

    def load(self, week: str) -> list[VerifiedResolver]:
        path = self.path(week)
        if not path.exists():
            raise UnknownWeek(week)
        with path.open(encoding="utf-8") as fp:
            return [VerifiedResolver.from_dict(json.loads(line)) for line in fp if line.strip()]

    def weeks(self) -> list[str]:
        if not self.directory.exists():
            return []
        return sorted(p.name[: -len(".jsonl")] for p in self.directory.glob("*.jsonl"))

    def diff(self, week_a: str, week_b: str) -> SnapshotDiff:
        a = {r.ip for r in self.load(week_a)}
        b = {r.ip for r in self.load(week_b)}
        return SnapshotDiff(week_a, week_b, frozenset(a & b), frozenset(b - a), frozenset(a - b), len(a))


def snapshot_store(resolvers: Iterable[VerifiedResolver], week: str, root: str | Path = ".") -> Path:
    return SnapshotStore(root).store(resolvers, week)


def snapshot_diff(week_a: str, week_b: str, root: str | Path = ".") -> SnapshotDiff:
    return SnapshotStore(root).diff(week_a, week_b)


class GeoLookup:
    """Offline enrichment from a CSV with columns network,country,asn,as_name."""

    def __init__(self, path: str | Path):
        self._rows = []
        with open(path, newline="", encoding="utf-8") as fp:
            for row in csv.DictReader(fp):
                net = ipaddress.IPv4Network(row["network"], strict=False)
                self._rows.append((net, {k: v for k, v in row.items() if k != "network"}))
        # most specific prefix first
        self._rows.sort(key=lambda item: -item[0].prefixlen)

    def lookup(self, ip: str) -> Optional[dict]:
        addr = ipaddress.IPv4Address(ip)
        for net, info in self._rows:
            if addr in net:
                return dict(info)
        return None

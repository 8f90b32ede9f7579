"""Handshake RTT accounting, per-protocol distributions and adoption tallies."""

from __future__ import annotations

import csv
import enum
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

from .doq_client import ConnectionEventLog, EventKind
from .errors import EmptySelection, IncompleteLog, IoFailure, MissingRtt
from .measure import MeasurementRecord
from .quic_versions import version_name
from .scan_pipeline import VerifiedResolver

MIN_RATIO_RTT = 1.0  # ms; below this the ratio is a loopback artefact


class Cause(str, enum.Enum):
    VERSION_NEGOTIATION = "VersionNegotiation"
    RETRY = "Retry"
    AMPLIFICATION_STALL = "AmplificationStall"
    IMPLICIT_VALIDATION = "ImplicitValidation"


@dataclass(frozen=True)
class HandshakeAnalysis:
    rtt_count: int
    causes: tuple[Cause, ...]
    handshake_time: Optional[float] = None  # ms
    ratio: Optional[float] = None


def classify_handshake(log: ConnectionEventLog, rtt: Optional[float] = None) -> HandshakeAnalysis:
    """Attribute every round trip beyond the first to its cause.

    Version Negotiation and Retry each restart the handshake. A stall on
    the amplification limit costs one more round trip; it counts as
    AmplificationStall when a token or Retry had already validated the
    address, and as ImplicitValidation when the server had no choice but
    to wait for the client's Handshake packet.
    """
    events = sorted(log.events, key=lambda e: e.timestamp)
    initial = next((e for e in events if e.kind == EventKind.INITIAL_SENT), None)
    confirmed = next((e for e in events if e.kind == EventKind.HANDSHAKE_CONFIRMED), None)
    if initial is None or confirmed is None:
        raise IncompleteLog("log lacks InitialSent or HandshakeConfirmed")
    causes: list[Cause] = []
    validated = bool(initial.data.get("token"))
    for e in events:
        if e.timestamp > confirmed.timestamp:
            break
        if e.kind == EventKind.VERSION_NEGOTIATION_RCVD:
            causes.append(Cause.VERSION_NEGOTIATION)
        elif e.kind == EventKind.RETRY_RCVD:
            causes.append(Cause.RETRY)
            validated = True
        elif e.kind == EventKind.INITIAL_RESENT and e.data.get("token"):
            validated = True
        elif e.kind == EventKind.AMPLIFICATION_STALL_DETECTED:
            causes.append(Cause.AMPLIFICATION_STALL if validated else Cause.IMPLICIT_VALIDATION)
    handshake_time = (confirmed.timestamp - initial.timestamp) / 1000.0
    ratio = handshake_time / rtt if rtt and rtt >= MIN_RATIO_RTT else None
    return HandshakeAnalysis(1 + len(causes), tuple(causes), handshake_time, ratio)


def handshake_to_rtt(record: MeasurementRecord) -> float:
    if record.handshake_time is None:
        raise MissingRtt("record has no handshake time")
    if record.rtt is None or record.rtt <= 0:
        raise MissingRtt("record has no usable RTT sample")
    return record.handshake_time / record.rtt


def expected_rtts(
    protocol: str,
    tls_version: Optional[str] = None,
    token: bool = True,
    stall: bool = False,
    restarts: int = 0,
) -> int:
    """Round trips a handshake needs by construction of the protocol."""
    p = protocol.lower()
    if p == "doudp":
        return 0
    if p == "dotcp":
        return 1
    if p in ("dot", "doh"):
        return 1 + (1 if tls_version == "1.3" else 2)
    if p == "doq":
        return 1 + restarts + (1 if stall else 0)
    raise ValueError(f"unknown protocol {protocol!r}")


def lower_median(samples: list[float]) -> float:
    s = sorted(samples)
    return s[(len(s) - 1) // 2]


def exact_mean(samples: list[float]) -> float:
    # fsum over sorted input: the result does not depend on record order
    return math.fsum(sorted(samples)) / len(samples)


@dataclass(frozen=True)
class Distribution:
    n: int
    median: float
    mean: float
    cdf: tuple[float, ...]

    @classmethod
    def of(cls, samples: Iterable[float]) -> Optional["Distribution"]:
        s = sorted(samples)
        if not s:
            return None
        return cls(len(s), lower_median(s), exact_mean(s), tuple(s))


@dataclass(frozen=True)
class ProtocolSummary:
    protocol: str
    n: int
    median: float  # resolve time, ms
    mean: float
    cdf: tuple[float, ...]
    handshake: Optional[Distribution] = None
    ratio_cdf: tuple[float, ...] = ()
    ratio_mean: Optional[float] = None
    ratio_median: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "n": self.n,
            "median": self.median,
            "mean": self.mean,
            "cdf": list(self.cdf),
            "handshake": None if self.handshake is None else {
                "n": self.handshake.n, "median": self.handshake.median,
                "mean": self.handshake.mean, "cdf": list(self.handshake.cdf),
            },
            "ratio_cdf": list(self.ratio_cdf),
            "ratio_mean": self.ratio_mean,
            "ratio_median": self.ratio_median,
        }


def default_filter(record: MeasurementRecord) -> bool:
    return not record.warming and record.success and record.rcode == 0


def summarize(
    records: Iterable[MeasurementRecord],
    protocol: str,
    record_filter: Callable[[MeasurementRecord], bool] = default_filter,
) -> ProtocolSummary:
    selected = [r for r in records if r.protocol.lower() == protocol.lower() and record_filter(r)]
    if not selected:
        raise EmptySelection(f"no {protocol} records pass the filter")
    resolve = Distribution.of(r.resolve_time for r in selected)
    handshake = Distribution.of(r.handshake_time for r in selected if r.handshake_time is not None)
    ratios = sorted(
        r.handshake_time / r.rtt
        for r in selected
        if r.handshake_time is not None and r.rtt is not None and r.rtt >= MIN_RATIO_RTT
    )
    return ProtocolSummary(
        protocol=selected[0].protocol,
        n=resolve.n,
        median=resolve.median,
        mean=resolve.mean,
        cdf=resolve.cdf,
        handshake=handshake,
        ratio_cdf=tuple(ratios),
        ratio_mean=exact_mean(ratios) if ratios else None,
        ratio_median=lower_median(ratios) if ratios else None,
    )


@dataclass
class AdoptionReport:
    weeks: list[str]
    verified: dict[str, int]
    version_tallies: dict[str, dict[tuple[str, str], int]]
    common_names: dict[str, dict[str, int]]
    retention: dict[str, float] = field(default_factory=dict)  # week -> share of first week retained

    def share(self, week: str, alpn: str, quic_version: str) -> float:
        total = self.verified.get(week, 0)
        return self.version_tallies[week].get((alpn, quic_version), 0) / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "weeks": self.weeks,
            "verified": self.verified,
            "version_tallies": {
                w: [[a, v, n] for (a, v), n in sorted(t.items())] for w, t in self.version_tallies.items()
            },
            "common_names": {w: sorted(c.items()) for w, c in self.common_names.items()},
            "retention": self.retention,
        }


def adoption_report(snapshots: dict[str, list[VerifiedResolver]]) -> AdoptionReport:
    """Per-week (doq ALPN, QUIC version) tallies, CN groups and retention vs. the first week."""
    if not snapshots:
        raise EmptySelection("no snapshots given")
    weeks = sorted(snapshots)
    first = {r.ip for r in snapshots[weeks[0]]}
    verified, tallies, names, retention = {}, {}, {}, {}
    for week in weeks:
        resolvers = sorted(snapshots[week], key=lambda r: r.ip)
        verified[week] = len(resolvers)
        tallies[week] = dict(sorted(Counter(
            (r.negotiated_doq_alpn, version_name(r.negotiated_quic_version)) for r in resolvers
        ).items()))
        names[week] = dict(sorted(Counter(
            (r.certificate.common_name if r.certificate else "") for r in resolvers
        ).items()))
        ips = {r.ip for r in resolvers}
        retention[week] = len(first & ips) / len(first) if first else 1.0
    return AdoptionReport(weeks, verified, tallies, names, retention)


CSV_COLUMNS = [
    "protocol", "kind", "index", "resolve_ms", "handshake_ms", "ratio",
    "n", "median_ms", "mean_ms", "handshake_median_ms", "handshake_mean_ms", "ratio_median", "ratio_mean",
]


def _cell(value) -> str:
    return "" if value is None else repr(value)


def emit_report(summaries: Iterable[ProtocolSummary], out_dir: str | Path) -> list[Path]:
    """Write ``summary.csv`` and ``plots.json``.

    Per protocol the CSV has one ``sample`` row per resolve-time sample
    (index = rank in the sorted sample; handshake_ms and ratio hold the
    same-rank entries of their own sorted samples, empty when shorter)
    followed by one ``summary`` row carrying the statistics.
    """
    summaries = list(summaries)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "summary.csv"
        with csv_path.open("w", newline="", encoding="utf-8") as fp:
            w = csv.writer(fp)
            w.writerow(CSV_COLUMNS)
            for s in summaries:
                hs = s.handshake.cdf if s.handshake else ()
                for i, v in enumerate(s.cdf):
                    w.writerow([
                        s.protocol, "sample", i, repr(v),
                        _cell(hs[i] if i < len(hs) else None),
                        _cell(s.ratio_cdf[i] if i < len(s.ratio_cdf) else None),
                        "", "", "", "", "", "", "",
                    ])
                w.writerow([
                    s.protocol, "summary", "", "", "", "",
                    s.n, repr(s.median), repr(s.mean),
                    _cell(s.handshake.median if s.handshake else None),
                    _cell(s.handshake.mean if s.handshake else None),
                    _cell(s.ratio_median), _cell(s.ratio_mean),
                ])
        plot_path = out / "plots.json"
        plot_path.write_text(json.dumps(plot_spec(summaries), indent=1, sort_keys=True))
    except OSError as exc:
        raise IoFailure(exc.errno, f"cannot write report to {out}: {exc.strerror}") from exc
    return [csv_path, plot_path]


def _cdf_points(samples: tuple[float, ...]) -> list[list[float]]:
    n = len(samples)
    return [[v, (i + 1) / n] for i, v in enumerate(samples)]


def plot_spec(summaries: list[ProtocolSummary]) -> dict:
    """Declarative chart description: each chart has axes and named series of points."""
    def cdf_chart(title, xlabel, pick):
        return {
            "type": "cdf",
            "title": title,
            "x": {"label": xlabel, "scale": "linear"},
            "y": {"label": "CDF", "scale": "linear", "domain": [0, 1]},
            "series": [
                {"name": s.protocol, "points": _cdf_points(pick(s))} for s in summaries if pick(s)
            ],
        }

    return {
        "version": 1,
        "charts": [
            cdf_chart("Resolve time", "ms", lambda s: s.cdf),
            cdf_chart("Handshake time", "ms", lambda s: s.handshake.cdf if s.handshake else ()),
            cdf_chart("Handshake / RTT", "ratio", lambda s: s.ratio_cdf),
        ],
    }


def adoption_plot_spec(report: AdoptionReport) -> dict:
    keys = sorted({k for t in report.version_tallies.values() for k in t})
    return {
        "version": 1,
        "charts": [{
            "type": "stacked_bar",
            "title": "Verified resolvers by DoQ and QUIC version",
            "x": {"label": "week", "scale": "ordinal", "values": report.weeks},
            "y": {"label": "resolvers", "scale": "linear"},
            "series": [
                {"name": f"{alpn}/{qv}", "values": [report.version_tallies[w].get((alpn, qv), 0) for w in report.weeks]}
                for alpn, qv in keys
            ],
        }],
    }

"""``doqscope`` command line: scan, verify, measure, rtt, analyze, report, serve.

Settings come from (lowest to highest precedence) built-in defaults, the
subcommand's table in ``--config``, ``DOQSCOPE_<NAME>`` environment
variables and command-line flags.

Exit status: 0 on success, 1 when some targets or measurements failed,
2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Any, Optional

from . import analyzer, measure, probe_core, scan_pipeline
from .config import load_toml
from .dox_clients import Protocol
from .errors import EmptySelection, IoFailure, UnknownWeek

logger = logging.getLogger("doqscope")

ENV_PREFIX = "DOQSCOPE_"
EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _ports(text: str) -> list[int]:
    try:
        return [int(p) for p in str(text).split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a port list: {text!r}") from None


def _hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected ip:port, got {text!r}")
    return host, int(port)


class Settings:
    """Flag > environment > config file > default lookup for one subcommand."""

    def __init__(self, args: argparse.Namespace, section: str):
        self.args = args
        self.file: dict[str, Any] = {}
        if getattr(args, "config", None):
            data = load_toml(args.config)
            self.file = data.get(section, {})

    def get(self, name: str, default=None, convert=None):
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        env = os.environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            return convert(env) if convert else env
        if name in self.file:
            return self.file[name]
        return default


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file; the table named after the subcommand is used")
    p.add_argument("--timeout", type=float, help="per-operation timeout in seconds (default 5)")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doqscope", description="DNS over QUIC discovery and response-time measurement"
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="probe targets with the version-0 packet, verify DoQ, store a snapshot")
    _common(p)
    p.add_argument("--targets", help="file with one IPv4 address per line")
    p.add_argument("--ports", type=_ports, help="comma-separated UDP ports (default 784,853,8853)")
    p.add_argument("--extra-ports", type=_ports, help="additional ports allowed besides the DoQ ports")
    p.add_argument("--blocklist", help="file of excluded addresses/CIDRs, re-read per sweep")
    p.add_argument("--rate", type=float, help="probes per second (default 1000)")
    p.add_argument("--workers", type=int)
    p.add_argument("--week", help="ISO week label, default: current week")

    p = sub.add_parser("verify", help="DoQ handshake against QUIC-capable candidates")
    _common(p)
    p.add_argument("--candidates", help="file of ip:port lines")
    p.add_argument("--ports", type=_ports, help="ports tried per address (default 784,853,8853)")
    p.add_argument("--week")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("measure", help="run the warming + measurement campaign")
    _common(p)
    p.add_argument("--resolvers", help="TOML file with [[resolver]] entries")
    p.add_argument("--snapshot", help="snapshot .jsonl; all protocols are tried on default ports")
    p.add_argument("--protocols", help="comma-separated subset of DoUDP,DoTCP,DoT,DoH,DoQ")
    p.add_argument("--interval", type=float, help="seconds between ticks (default 3600)")
    p.add_argument("--ticks", type=int, help="number of ticks (default 168)")
    p.add_argument("--qname")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("rtt", help="one RTT probe")
    _common(p)
    p.add_argument("target", type=_hostport, help="ip:port")
    p.add_argument("--kind", choices=["quic", "tcp", "udp"], default="quic")

    p = sub.add_parser("analyze", help="summaries, CSV and plot specs from measurement records")
    _common(p)
    p.add_argument("--in", dest="input", help="results directory or .jsonl file")

    p = sub.add_parser("report", help="adoption tallies and retention from snapshots")
    _common(p)
    p.add_argument("--snapshots", help="directory containing snapshots/<week>.jsonl")
    p.add_argument("--diff", nargs=2, metavar=("WEEK_A", "WEEK_B"))

    p = sub.add_parser("serve", help="run the local testbed")
    _common(p)
    p.add_argument("--host")
    p.add_argument("--doq-ports", type=_ports)
    p.add_argument("--doudp-port", type=int)
    p.add_argument("--dotcp-port", type=int)
    p.add_argument("--dot-port", type=int)
    p.add_argument("--doh-port", type=int)
    p.add_argument("--udp-echo-port", type=int)
    p.add_argument("--delay-ms", type=float, help="one-way delay applied in each direction")
    p.add_argument("--jitter-ms", type=float)
    p.add_argument("--retry", choices=["never", "always", "first_contact_only"])
    p.add_argument("--amp-enforce", action="store_const", const=True,
                   help="keep the 3x amplification limit after address validation")
    p.add_argument("--no-new-token", action="store_const", const=True)
    p.add_argument("--cert", choices=["small", "large"])
    p.add_argument("--tls", help="comma-separated TLS versions, e.g. 1.2,1.3")
    p.add_argument("--tfo", action="store_const", const=True)
    p.add_argument("--keepalive", type=int, help="edns-tcp-keepalive timeout to echo (100 ms units)")
    p.add_argument("--zero-rtt", action="store_const", const=True)
    p.add_argument("--alpn", help="comma-separated DoQ ALPNs served")
    p.add_argument("--versions", help="comma-separated QUIC versions served, e.g. QUICv1,draft-29")
    p.add_argument("--log", help="JSON-lines log path")
    p.add_argument("--duration", type=float, help="seconds to run; default until interrupted")
    return parser


def _cmd_scan(args, s: Settings) -> int:
    targets_path = s.get("targets")
    if not targets_path:
        raise UsageError("scan needs --targets")
    targets = scan_pipeline.TargetList.from_file(targets_path)
    blocklist_path = s.get("blocklist")
    blocklist = scan_pipeline.Blocklist(path=blocklist_path) if blocklist_path else None
    timeout = float(s.get("timeout", probe_core.DEFAULT_TIMEOUT, float))
    limiter = scan_pipeline.RateLimiter(float(s.get("rate", scan_pipeline.DEFAULT_RATE, float)))
    ports = s.get("ports", list(scan_pipeline.DOQ_PORTS), _ports)
    extra = s.get("extra_ports", [], _ports)
    report = scan_pipeline.sweep(
        targets, ports, blocklist, limiter, extra, timeout,
        workers=int(s.get("workers", scan_pipeline.DEFAULT_WORKERS, int)),
    )
    week = s.get("week") or scan_pipeline.iso_week()
    verified = scan_pipeline.verify_doq(report.capable, week=week, timeout=timeout)
    out = Path(s.get("out", "."))
    path = scan_pipeline.snapshot_store(verified, week, out)
    print(json.dumps({
        "targets": len(targets), "skipped": len(report.skipped), "quic_capable": len(report.capable),
        "verified": len(verified), "snapshot": str(path),
    }))
    return EXIT_PARTIAL if report.errors and not report.capable else EXIT_OK


def _cmd_verify(args, s: Settings) -> int:
    path = s.get("candidates")
    if not path:
        raise UsageError("verify needs --candidates")
    candidates = [_hostport(line) for line in scan_pipeline._read_lines(path)]
    week = s.get("week") or scan_pipeline.iso_week()
    errors: dict = {}
    verified = scan_pipeline.verify_doq(
        candidates, ports=s.get("ports", None, _ports), week=week,
        timeout=float(s.get("timeout", probe_core.DEFAULT_TIMEOUT, float)), errors=errors,
    )
    snap = scan_pipeline.snapshot_store(verified, week, Path(s.get("out", ".")))
    print(json.dumps({"candidates": len(candidates), "verified": len(verified), "snapshot": str(snap)}))
    verified_ips = {r.ip for r in verified}
    return EXIT_PARTIAL if any(ip not in verified_ips for ip, _ in candidates) else EXIT_OK


def _load_resolvers(s: Settings) -> list[measure.Resolver]:
    resolvers = []
    if s.get("resolvers"):
        data = load_toml(s.get("resolvers"))
        for entry in data.get("resolver", []):
            resolvers.append(measure.Resolver(
                ip=entry["ip"], ports=entry.get("ports", {}), doq_ports=entry.get("doq_ports", []),
                doh_path=entry.get("doh_path", "/dns-query"),
            ))
    if s.get("snapshot"):
        with open(s.get("snapshot"), encoding="utf-8") as fp:
            for line in fp:
                if line.strip():
                    r = scan_pipeline.VerifiedResolver.from_dict(json.loads(line))
                    resolvers.append(measure.Resolver(ip=r.ip, doq_ports=r.ports_verified))
    if not resolvers:
        raise UsageError("measure needs --resolvers or --snapshot")
    return resolvers


def _cmd_measure(args, s: Settings) -> int:
    resolvers = _load_resolvers(s)
    base = measure.CampaignConfig.from_mapping(s.file) if s.file else measure.CampaignConfig()
    protocols = s.get("protocols")
    if isinstance(protocols, str):
        protocols = [Protocol.parse(p.strip()).value for p in protocols.split(",") if p.strip()]
    config = measure.CampaignConfig(
        interval=float(s.get("interval", base.interval, float)),
        ticks=int(s.get("ticks", base.ticks, int)),
        qname=s.get("qname", base.qname),
        timeout=float(s.get("timeout", base.timeout, float)),
        workers=int(s.get("workers", base.workers, int)),
        jitter=base.jitter,
        max_gap=base.max_gap,
        protocols=protocols or base.protocols,
        out_dir=s.get("out", base.out_dir),
        token_lifetime=base.token_lifetime,
    )
    stop = threading.Event()
    previous = signal.signal(signal.SIGINT, lambda *_: stop.set())
    try:
        records = measure.run_campaign(resolvers, config, stop=stop)
    finally:
        signal.signal(signal.SIGINT, previous)
    failed = sum(1 for r in records if r.error)
    print(json.dumps({"records": len(records), "failed": failed}))
    return EXIT_PARTIAL if failed else EXIT_OK


def _cmd_rtt(args, s: Settings) -> int:
    kind = {"quic": probe_core.ProbeKind.QUIC_VN, "tcp": probe_core.ProbeKind.TCP_SYN,
            "udp": probe_core.ProbeKind.UDP_PAYLOAD}[args.kind]
    ip, port = args.target
    result = probe_core.probe(
        probe_core.Target(ip, port, "tcp" if args.kind == "tcp" else "udp"), kind,
        float(s.get("timeout", probe_core.DEFAULT_TIMEOUT, float)),
    )
    print(json.dumps({"target": f"{ip}:{port}", "kind": result.kind.value, "rtt_ms": result.rtt,
                      "vn_versions": result.vn_versions, "error": result.error}))
    return EXIT_OK if result.ok else EXIT_PARTIAL


def _cmd_analyze(args, s: Settings) -> int:
    source = s.get("input")
    if not source:
        raise UsageError("analyze needs --in")
    records = measure.load_records(source)
    summaries = []
    for protocol in measure.ALL_PROTOCOLS:
        try:
            summaries.append(analyzer.summarize(records, protocol.value))
        except EmptySelection:
            logger.info("no usable %s records", protocol.value)
    out = Path(s.get("out", "report"))
    paths = analyzer.emit_report(summaries, out)
    causes: dict[str, int] = {}
    for r in records:
        if r.protocol == Protocol.DOQ.value and not r.warming and r.event_log:
            try:
                analysis = analyzer.classify_handshake(r.connection_log(), r.rtt)
            except ValueError:
                continue
            key = "+".join(c.value for c in analysis.causes) or "none"
            causes[key] = causes.get(key, 0) + 1
    (out / "doq_handshakes.json").write_text(json.dumps(causes, indent=1, sort_keys=True))
    print(json.dumps({"summaries": [x.protocol for x in summaries], "files": [str(p) for p in paths]}))
    return EXIT_OK if summaries else EXIT_PARTIAL


def _cmd_report(args, s: Settings) -> int:
    store = scan_pipeline.SnapshotStore(s.get("snapshots", "."))
    weeks = store.weeks()
    if not weeks:
        raise UsageError(f"no snapshots under {store.directory}")
    report = analyzer.adoption_report({w: store.load(w) for w in weeks})
    out = Path(s.get("out", "report"))
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "adoption.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
        (out / "adoption_plot.json").write_text(json.dumps(analyzer.adoption_plot_spec(report), indent=1))
    except OSError as exc:
        raise IoFailure(exc.errno, str(exc)) from exc
    summary = {"weeks": weeks, "verified": report.verified}
    if args.diff:
        d = store.diff(*args.diff)
        summary["diff"] = {"retained": sorted(d.retained), "gained": sorted(d.gained),
                           "lost": sorted(d.lost), "retention": d.retention}
    print(json.dumps(summary))
    return EXIT_OK


def _testbed_config(s: Settings):
    from .quic_versions import parse_version
    from .testbed import TestbedConfig

    values = dict(s.file)
    mapping = {
        "host": "host", "doq_ports": "doq_ports", "doudp_port": "doudp_port", "dotcp_port": "dotcp_port",
        "dot_port": "dot_port", "doh_port": "doh_port", "udp_echo_port": "udp_echo_port",
        "delay_ms": "one_way_delay", "jitter_ms": "jitter", "retry": "retry_mode", "cert": "certificate_profile",
        "keepalive": "keepalive_echo", "log": "log_path",
    }
    for flag, key in mapping.items():
        value = getattr(s.args, flag, None)
        if value is not None:
            values[key] = value
    if s.args.amp_enforce:
        values["enforce_amplification_after_validation"] = True
    if s.args.no_new_token:
        values["issue_new_token"] = False
    if s.args.tfo:
        values["tfo"] = True
    if s.args.zero_rtt:
        values["zero_rtt"] = True
    if s.args.tls:
        values["tls_versions"] = [v.strip() for v in s.args.tls.split(",")]
    if s.args.alpn:
        values["doq_alpns_served"] = [v.strip() for v in s.args.alpn.split(",")]
    if s.args.versions:
        values["quic_versions_served"] = [parse_version(v.strip()) for v in s.args.versions.split(",")]
    env_delay = os.environ.get(ENV_PREFIX + "DELAY_MS")
    if env_delay is not None and s.args.delay_ms is None:
        values["one_way_delay"] = float(env_delay)
    return TestbedConfig.from_mapping(values)


def _cmd_serve(args, s: Settings) -> int:
    from .testbed import serve

    try:
        config = _testbed_config(s)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    stop = threading.Event()
    previous = signal.signal(signal.SIGINT, lambda *_: stop.set())
    try:
        with serve(config) as handle:
            print(json.dumps({"host": handle.host, "doq": handle.doq_ports, **handle.ports}), flush=True)
            stop.wait(args.duration)
    finally:
        signal.signal(signal.SIGINT, previous)
    return EXIT_OK


COMMANDS = {
    "scan": _cmd_scan,
    "verify": _cmd_verify,
    "measure": _cmd_measure,
    "rtt": _cmd_rtt,
    "analyze": _cmd_analyze,
    "report": _cmd_report,
    "serve": _cmd_serve,
}

_SECTIONS = {"measure": "campaign", "serve": "testbed"}


def run(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = Settings(args, _SECTIONS.get(args.command, args.command))
        return COMMANDS[args.command](args, settings)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"doqscope {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, UnknownWeek, ValueError) as exc:
        print(f"doqscope {args.command}: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

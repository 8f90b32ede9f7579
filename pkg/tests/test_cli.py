import json
import subprocess
import sys

import pytest

from doqscope import cli
from doqscope.doq_client import CertificateInfo
from doqscope.quic_versions import QUIC_V1
from doqscope.scan_pipeline import SnapshotStore, VerifiedResolver

import oracles

NO_DOX = dict(doudp_port=None, dotcp_port=None, dot_port=None, doh_port=None)


def snapshot_resolver(ip, week):
    return VerifiedResolver(ip, [853], QUIC_V1, "doq-i02", CertificateInfo("cn", (), "", 0, "", ""), week)


def _json_out(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_usage_errors(capsys):
    assert cli.run([]) == 2
    assert cli.run(["scan", "--no-such-flag"]) == 2
    assert cli.run(["scan"]) == 2  # missing --targets
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert cli.run(["--help"]) == 0


def test_scan_writes_snapshot(testbed, tmp_path, capsys):
    tb = testbed(doq_ports=[5853], **NO_DOX)
    targets = tmp_path / "t.txt"
    targets.write_text(f"{tb.host}\n")
    code = cli.run(["scan", "--targets", str(targets), "--ports", "5853", "--extra-ports", "5853",
                    "--timeout", "1", "--week", "2022-W03", "--out", str(tmp_path)])
    assert code == 0
    assert _json_out(capsys)["verified"] == 1
    assert [r.ip for r in SnapshotStore(tmp_path).load("2022-W03")] == [tb.host]


def test_verify_partial(testbed, tmp_path, capsys):
    tb = testbed(doq_ports=[784], **NO_DOX)
    h3 = testbed(doq_ports=[853], doq_alpns_served=["h3"], **NO_DOX)
    cands = tmp_path / "c.txt"
    cands.write_text(f"{tb.host}:784\n{h3.host}:853\n")
    code = cli.run(["verify", "--candidates", str(cands), "--timeout", "1", "--week", "2022-W03",
                    "--out", str(tmp_path)])
    assert code == 1
    assert _json_out(capsys)["verified"] == 1


def test_rtt(testbed, capsys):
    tb = testbed(one_way_delay=10)
    assert cli.run(["rtt", f"{tb.host}:{tb.doq_ports[0]}"]) == 0
    out = _json_out(capsys)
    assert out["vn_versions"] == [oracles.QUIC_V1] and out["rtt_ms"] >= 20
    assert cli.run(["rtt", f"{tb.host}:{tb.ports['dotcp']}", "--kind", "tcp"]) == 0
    assert cli.run(["rtt", "not-a-target"]) == 2


def test_measure_then_analyze(testbed, tmp_path, capsys):
    tb = testbed()
    resolvers = tmp_path / "r.toml"
    resolvers.write_text(
        f'[[resolver]]\nip = "{tb.host}"\n'
        f'ports = {{ DoUDP = {tb.ports["doudp"]}, DoTCP = {tb.ports["dotcp"]}, DoT = {tb.ports["dot"]}, '
        f'DoH = {tb.ports["doh"]}, DoQ = {tb.doq_ports[0]} }}\n'
    )
    results = tmp_path / "results"
    assert cli.run(["measure", "--resolvers", str(resolvers), "--ticks", "1", "--out", str(results)]) == 0
    assert _json_out(capsys) == {"records": 10, "failed": 0}
    report = tmp_path / "report"
    assert cli.run(["analyze", "--in", str(results), "--out", str(report)]) == 0
    assert len(_json_out(capsys)["summaries"]) == 5
    assert (report / "summary.csv").exists() and (report / "plots.json").exists()
    assert json.loads((report / "doq_handshakes.json").read_text()) == {"none": 1}


def test_report_and_diff(tmp_path, capsys):
    store = SnapshotStore(tmp_path)
    for week, ips in oracles.SNAPSHOT_WEEKS.items():
        store.store([snapshot_resolver(ip, week) for ip in ips], week)
    out = tmp_path / "out"
    assert cli.run(["report", "--snapshots", str(tmp_path), "--out", str(out),
                    "--diff", "2021-W27", "2021-W28"]) == 0
    summary = _json_out(capsys)
    assert summary["diff"]["lost"] == sorted(oracles.SNAPSHOT_DIFFS[("2021-W27", "2021-W28")]["lost"])
    assert (out / "adoption.json").exists()
    assert cli.run(["report", "--snapshots", str(tmp_path), "--out", str(out), "--diff", "2021-W27", "1999-W01"]) == 1


def test_settings_precedence(tmp_path, monkeypatch):
    config = tmp_path / "c.toml"
    config.write_text('[scan]\nrate = 10.0\ntimeout = 3.0\nworkers = 4\n')
    args = cli.build_parser().parse_args(["scan", "--config", str(config), "--timeout", "1.5"])
    s = cli.Settings(args, "scan")
    monkeypatch.setenv("DOQSCOPE_RATE", "20")
    assert s.get("timeout", convert=float) == 1.5  # flag beats file
    assert s.get("rate", convert=float) == 20.0  # env beats file
    assert s.get("workers", convert=int) == 4  # file beats default
    assert s.get("blocklist", "none") == "none"


def test_serve_runs_for_duration(tmp_path):
    log = tmp_path / "serve.jsonl"
    proc = subprocess.run(
        [sys.executable, "-m", "doqscope.cli", "serve", "--host", "127.0.250.1", "--delay-ms", "50",
         "--retry", "always", "--amp-enforce", "--cert", "large", "--duration", "0.5", "--log", str(log)],
        capture_output=True, text=True, timeout=30,
    )
    assert proc.returncode == 0, proc.stderr
    started = json.loads(proc.stdout.splitlines()[0])
    assert started["host"] == "127.0.250.1" and started["doq"]


def test_serve_rejects_bad_config():
    assert cli.run(["serve", "--retry", "sometimes"]) == 2
    assert cli.run(["serve", "--versions", "draft-29,QUICv1", "--tls", "1.0", "--duration", "0"]) == 2

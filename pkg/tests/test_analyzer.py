import csv
import json

import pytest

from doqscope import analyzer
from doqscope.analyzer import Cause, classify_handshake, expected_rtts, handshake_to_rtt, summarize
from doqscope.doq_client import CertificateInfo, ConnectionEventLog, DoqSessionConfig, EventKind, doq_query
from doqscope.errors import EmptySelection, IncompleteLog, IoFailure, MissingRtt
from doqscope.measure import MeasurementRecord
from doqscope.quic_versions import QUIC_DRAFT_29, QUIC_V1
from doqscope.scan_pipeline import VerifiedResolver

import oracles

NO_DOX = dict(doudp_port=None, dotcp_port=None, dot_port=None, doh_port=None)


def _log(*events):
    log = ConnectionEventLog()
    for i, (kind, data) in enumerate(events):
        log.add(kind, 1.0 + i * 0.1, **data)
    return log


def test_classify_token_no_restarts():
    log = _log((EventKind.INITIAL_SENT, {"token": True}), (EventKind.HANDSHAKE_CONFIRMED, {}))
    a = classify_handshake(log, rtt=100.0)
    assert a.rtt_count == 1 and a.causes == ()
    assert a.handshake_time == pytest.approx(100.0)
    assert a.ratio == pytest.approx(1.0)


def test_classify_implicit_validation_without_token():
    log = _log((EventKind.INITIAL_SENT, {}), (EventKind.AMPLIFICATION_STALL_DETECTED, {}),
               (EventKind.HANDSHAKE_CONFIRMED, {}))
    assert classify_handshake(log).causes == (Cause.IMPLICIT_VALIDATION,)


def test_classify_orders_causes_and_ignores_later_events():
    log = _log((EventKind.INITIAL_SENT, {}), (EventKind.VERSION_NEGOTIATION_RCVD, {}), (EventKind.RETRY_RCVD, {}),
               (EventKind.INITIAL_RESENT, {"token": True}), (EventKind.AMPLIFICATION_STALL_DETECTED, {}),
               (EventKind.HANDSHAKE_CONFIRMED, {}), (EventKind.RETRY_RCVD, {}))
    a = classify_handshake(log)
    assert a.causes == (Cause.VERSION_NEGOTIATION, Cause.RETRY, Cause.AMPLIFICATION_STALL)
    assert a.rtt_count == 4
    assert classify_handshake(log) == a  # pure


def test_classify_incomplete():
    with pytest.raises(IncompleteLog):
        classify_handshake(_log((EventKind.INITIAL_SENT, {})))


def test_tiny_rtt_gives_no_ratio():
    log = _log((EventKind.INITIAL_SENT, {}), (EventKind.HANDSHAKE_CONFIRMED, {}))
    assert classify_handshake(log, rtt=0.2).ratio is None


def test_retry_and_stall_from_testbed(testbed):
    # a stall is a pause of one round trip, so the path needs some delay
    tb = testbed(one_way_delay=20, retry_mode="always", enforce_amplification_after_validation=True,
                 certificate_profile="large", **NO_DOX)
    r = doq_query(DoqSessionConfig(tb.doq_addresses[0]), "test.com")
    a = classify_handshake(r.event_log)
    assert a.causes == (Cause.RETRY, Cause.AMPLIFICATION_STALL)
    records = oracles.await_connection_record(tb, r.local_port)
    assert oracles.server_side_rtt_count(records, r.local_port) == a.rtt_count == 3


def test_qlog_ingestion_classifies_identically(testbed, tmp_path):
    tb = testbed(quic_versions_served=[QUIC_DRAFT_29], **NO_DOX)
    r = doq_query(DoqSessionConfig(tb.doq_addresses[0]), "test.com")
    path = r.event_log.write_qlog(tmp_path / "x.qlog")
    again = classify_handshake(ConnectionEventLog.from_qlog(path))
    assert again.causes == classify_handshake(r.event_log).causes == (Cause.VERSION_NEGOTIATION,)


def _rec(proto, resolve, handshake=None, rtt=None, **kw):
    base = dict(correlation_id="c", timestamp="t", resolver_ip="192.0.2.1", port=853, protocol=proto,
                qname="test.com", warming=False, handshake_time=handshake, resolve_time=resolve, rtt=rtt, rcode=0)
    base.update(kw)
    return MeasurementRecord(**base)


def test_handshake_to_rtt():
    assert handshake_to_rtt(_rec("DoT", 1, 200.0, 100.0)) == 2.0
    assert handshake_to_rtt(_rec("DoT", 1, 100.0, 100.0)) == 1.0
    with pytest.raises(MissingRtt):
        handshake_to_rtt(_rec("DoT", 1, 100.0, None))


@pytest.mark.parametrize("args,expected", [
    (("DoTCP",), 1), (("DoH", "1.3"), 2), (("DoT", "1.2"), 3), (("DoUDP",), 0),
    (("DoQ", None, True, True, 0), 2), (("DoQ", None, False, True, 2), 4),
])
def test_expected_rtts(args, expected):
    assert expected_rtts(*args) == expected
    if args[0] != "DoUDP" and args[0] != "DoQ":
        assert expected == oracles.expected_handshake_rtts(*args)


def test_summarize_small():
    s = summarize([_rec("DoQ", 100.0), _rec("DoQ", 300.0), _rec("DoQ", 200.0)], "DoQ")
    assert s.median == 200 and s.mean == 200 and s.cdf == (100.0, 200.0, 300.0)


def test_summarize_matches_oracle_and_filters():
    values = [101.5, 99.25, 180.0, 120.125, 100.0, 250.5]
    recs = [_rec("DoT", v, v * 2, v) for v in values]
    recs += [_rec("DoT", 1.0, warming=True), _rec("DoT", 2.0, rcode=2), _rec("DoT", None, error="Timeout"),
             _rec("DoH", 5.0), _rec("DoT", 50.0, 100.0, 0.5)]
    s = summarize(recs, "dot")
    sample = values + [50.0]
    assert s.n == 7
    assert s.median == oracles.lower_median(sample)
    assert s.mean == pytest.approx(float(oracles.exact_mean(sample)), rel=1e-15)
    # stored statistics agree with the stored samples
    assert s.median == oracles.lower_median(list(s.cdf))
    assert s.ratio_cdf == (2.0,) * 6  # rtt 0.5 excluded
    with pytest.raises(EmptySelection):
        summarize(recs, "DoQ")


def _vr(ip, week, alpn="doq-i02", version=QUIC_V1, cn="dns.example"):
    return VerifiedResolver(ip, [853], version, alpn, CertificateInfo(cn, (), "", 0, "", ""), week)


def test_adoption_report():
    snaps = {
        "2022-W02": [_vr("192.0.2.1", "2022-W02"), _vr("192.0.2.2", "2022-W02")],
        "2022-W03": [_vr("192.0.2.2", "2022-W03"), _vr("192.0.2.3", "2022-W03", cn="other"),
                     _vr("192.0.2.4", "2022-W03", "doq-i00", QUIC_DRAFT_29)],
    }
    rep = analyzer.adoption_report(snaps)
    assert rep.weeks == ["2022-W02", "2022-W03"]
    assert rep.version_tallies["2022-W02"] == {("doq-i02", "QUICv1"): 2}
    assert rep.share("2022-W03", "doq-i02", "QUICv1") == pytest.approx(2 / 3)
    assert rep.common_names["2022-W03"] == {"dns.example": 2, "other": 1}
    assert rep.retention == {"2022-W02": 1.0, "2022-W03": 0.5}
    spec = analyzer.adoption_plot_spec(rep)
    assert {s["name"] for s in spec["charts"][0]["series"]} == {"doq-i02/QUICv1", "doq-i00/draft-29"}
    with pytest.raises(EmptySelection):
        analyzer.adoption_report({})


def test_single_group():
    rep = analyzer.adoption_report({"w": [_vr(f"192.0.2.{i}", "w") for i in range(3)]})
    assert rep.version_tallies["w"] == {("doq-i02", "QUICv1"): 3}


def test_emit_report(tmp_path):
    summaries = [summarize([_rec(p, 100.0 + i, 150.0, 100.0) for i in range(4)], p)
                 for p in ("DoUDP", "DoTCP", "DoT", "DoH", "DoQ")]
    csv_path, plot_path = analyzer.emit_report(summaries, tmp_path)
    with csv_path.open() as fp:
        rows = list(csv.DictReader(fp))
    assert list(rows[0]) == analyzer.CSV_COLUMNS
    doq = [r for r in rows if r["protocol"] == "DoQ"]
    assert [r["kind"] for r in doq] == ["sample"] * 4 + ["summary"]
    assert float(doq[-1]["median_ms"]) == 101.0
    assert float(doq[0]["ratio"]) == 1.5
    spec = json.loads(plot_path.read_text())
    resolve = spec["charts"][0]
    assert resolve["type"] == "cdf" and len(resolve["series"]) == 5
    assert resolve["series"][0]["points"][-1][1] == 1.0


def test_emit_empty(tmp_path):
    csv_path, _ = analyzer.emit_report([], tmp_path)
    assert csv_path.read_text().strip() == ",".join(analyzer.CSV_COLUMNS)


def test_emit_io_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoFailure):
        analyzer.emit_report([], blocker / "sub")

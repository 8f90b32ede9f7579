import random

import pytest

from doqscope import measure
from doqscope.dox_clients import Protocol
from doqscope.measure import CampaignConfig, MeasurementRecord, RecordStore, Resolver, run_campaign, run_pair

from conftest import next_host


def _resolver(tb):
    return Resolver(tb.host, ports={"DoUDP": tb.ports["doudp"], "DoTCP": tb.ports["dotcp"], "DoT": tb.ports["dot"],
                                    "DoH": tb.ports["doh"], "DoQ": tb.doq_ports[0]})


def test_resolver_ports():
    r = Resolver("192.0.2.1", ports={"doq": 8853})
    assert r.doq_ports == [8853]
    assert r.port(Protocol.DOT) == 853 and r.port(Protocol.DOH) == 443


def test_doq_pair_reuses_token(testbed):
    tb = testbed(retry_mode="first_contact_only")
    warm, meas = run_pair(_resolver(tb), "DoQ")
    assert warm.warming and not meas.warming
    assert warm.correlation_id == meas.correlation_id
    assert meas.token_reused and meas.success
    kinds = [e.kind.value for e in meas.connection_log()]
    assert "RetryRcvd" not in kinds
    assert meas.started - warm.finished < measure.DEFAULT_MAX_GAP


def test_doudp_has_no_handshake(testbed):
    tb = testbed()
    _, meas = run_pair(_resolver(tb), Protocol.DOUDP)
    assert meas.handshake_time is None and meas.resolve_time > 0


def test_stream_pairs_record_tls(testbed):
    tb = testbed(tls_versions=["1.2"])
    _, meas = run_pair(_resolver(tb), Protocol.DOT)
    assert meas.tls_version == "1.2" and meas.handshake_time > 0


def test_warming_failure_aborts_pair():
    r = Resolver(next_host(), ports={"DoTCP": 9})
    warm, meas = run_pair(r, "DoTCP", timeout=0.5)
    assert meas is None and warm.error == "Refused"


def test_rcode_is_recorded(testbed):
    tb = testbed(zone={})
    _, meas = run_pair(_resolver(tb), Protocol.DOTCP)
    # the transport worked: the rcode is data, not an error
    assert meas.rcode == 3 and meas.error is None


def test_record_round_trip():
    rec = MeasurementRecord("c", "t", "192.0.2.1", 853, "DoQ", "test.com", False, 1.0, 2.0, event_log={"x": 1})
    assert MeasurementRecord.from_dict({**rec.to_dict(), "unknown": 1}) == rec


def test_select_dox_verified():
    def rec(ip, proto, ok=True, warming=False):
        return MeasurementRecord("c", "t", ip, 1, proto, "q", warming, resolve_time=1.0, error=None if ok else "Timeout")

    records = [rec("a", p.value) for p in Protocol] + [rec("b", p.value) for p in Protocol if p is not Protocol.DOH]
    records += [rec("b", "DoH", ok=False), rec("c", "DoQ", warming=True)]
    assert measure.select_dox_verified(records) == {"a"}


def test_campaign_config_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[campaign]\ninterval = 60\nticks = 2\nprotocols = ["DoQ"]\n')
    cfg = CampaignConfig.from_file(path)
    assert cfg.interval == 60 and cfg.ticks == 2 and cfg.protocols == ["DoQ"]
    with pytest.raises(ValueError):
        CampaignConfig.from_mapping({"bogus": 1})


def test_campaign_cardinality(testbed, tmp_path):
    tb = testbed(doq_ports=[0, 0])
    resolver = _resolver(tb)
    resolver.doq_ports = list(tb.doq_ports)
    now = [0.0]
    slept = []

    def sleep(s):
        slept.append(s)
        now[0] += s

    cfg = CampaignConfig(interval=3600, ticks=2, out_dir=str(tmp_path), timeout=2.0)
    store = RecordStore(tmp_path, "run")
    records = run_campaign([resolver], cfg, store, clock=lambda: now[0], sleep=sleep, rng=random.Random(1))
    # 4 DoX protocols + 2 DoQ ports, warming + measurement, per tick
    assert len(records) == 2 * 6 * 2
    assert all(r.success for r in records)
    measured = [r for r in records if not r.warming]
    # a DNS server drops the random UDP payload; every other protocol gets a sample
    assert all(r.rtt is not None for r in measured if r.protocol != "DoUDP")
    assert all(r.rtt is not None or r.rtt_error for r in measured)
    assert slept == [3600]
    assert sorted(p.name for p in store.directory.iterdir()) == ["tick-0000.jsonl", "tick-0001.jsonl"]
    assert len(measure.load_records(tmp_path)) == len(records)


def test_doq_only_resolver(testbed, tmp_path):
    tb = testbed(doudp_port=None, dotcp_port=None, dot_port=None, doh_port=None)
    # DoX ports point at a closed port on the same host
    r = Resolver(tb.host, ports={"DoUDP": 9, "DoTCP": 9, "DoT": 9, "DoH": 9, "DoQ": tb.doq_ports[0]})
    cfg = CampaignConfig(ticks=1, out_dir=str(tmp_path), timeout=0.5)
    records = run_campaign([r], cfg, RecordStore(tmp_path, "x"))
    measured = [x for x in records if not x.warming]
    failed_warmups = [x for x in records if x.warming and x.error]
    assert [x.protocol for x in measured if x.success] == ["DoQ"]
    assert len(failed_warmups) == 4
    assert measure.select_dox_verified(records) == set()


def test_campaign_stops_on_event(tmp_path):
    import threading

    stop = threading.Event()
    stop.set()
    assert run_campaign([Resolver("192.0.2.1")], CampaignConfig(ticks=3, out_dir=str(tmp_path)), stop=stop) == []

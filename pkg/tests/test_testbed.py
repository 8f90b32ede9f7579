import json
import socket
import statistics
from concurrent.futures import ThreadPoolExecutor

import pytest

from doqscope import dns_codec, probe_core
from doqscope.doq_client import DoqSessionConfig, doq_query
from doqscope.errors import BindFailure
from doqscope.probe_core import Target
from doqscope.testbed import TestbedConfig, serve
from doqscope.testbed.certs import make_certificate
from doqscope.testbed.config import LARGE_CERTIFICATE_DER_SIZE
from doqscope.testbed.zone import ZoneResponder

import oracles
from conftest import next_host

NO_DOX = dict(doudp_port=None, dotcp_port=None, dot_port=None, doh_port=None)


@pytest.mark.parametrize("bad", [
    {"retry_mode": "sometimes"}, {"certificate_profile": "huge"}, {"tls_versions": ["1.1"]},
    {"one_way_delay": -1}, {"doq_stream_behaviour": "ignore"}, {"quic_versions_served": []},
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TestbedConfig(**bad)


def test_config_from_file(tmp_path):
    path = tmp_path / "tb.toml"
    path.write_text('[testbed]\none_way_delay = 25\nquic_versions_served = ["draft-29", "QUICv1"]\n')
    cfg = TestbedConfig.from_file(path)
    assert cfg.one_way_delay == 25
    assert cfg.quic_versions_served == [oracles.QUIC_DRAFT_29, oracles.QUIC_V1]
    with pytest.raises(ValueError):
        TestbedConfig.from_mapping({"no_such_setting": 1})


def test_certificate_profiles():
    small = make_certificate("small", "a.invalid")
    large = make_certificate("large", "a.invalid")
    assert len(small.der) < 1200
    # the chain alone must exceed the 3x budget of one 1200-byte Initial
    assert len(large.der) >= LARGE_CERTIFICATE_DER_SIZE > 3 * 1200


def test_zone_responder():
    z = ZoneResponder({"Test.com.": "192.0.2.9"})
    ok = z.respond(dns_codec.build_query("TEST.com"))
    assert ok.rcode == 0 and ok.answers[0].address == "192.0.2.9" and ok.aa and ok.qr
    assert z.respond(dns_codec.build_query("other.com")).rcode == 3
    assert ZoneResponder({}, refuse=True).respond(dns_codec.build_query("test.com")).rcode == 5
    assert z.respond_wire(b"\x00\x01") is None


def test_delay_is_applied(testbed):
    tb = testbed(one_way_delay=40, udp_echo_port=0)
    r = probe_core.rtt_probe_udp(Target(tb.host, tb.ports["udp_echo"]), 2.0)
    assert 80 <= r.rtt < 100


def test_jitter_bounds(testbed):
    tb = testbed(one_way_delay=50, jitter=5, udp_echo_port=0, **NO_DOX)
    target = Target(tb.host, tb.ports["udp_echo"])
    with ThreadPoolExecutor(10) as pool:
        rtts = [r.rtt for r in pool.map(lambda _: probe_core.rtt_probe_udp(target, 2.0), range(100))]
    assert all(90 <= x <= 115 for x in rtts)
    assert statistics.pstdev(rtts) > 1  # jitter is actually there
    assert 95 <= statistics.mean(rtts) <= 108


def _records_for(tb, port):
    return oracles.await_connection_record(tb, port)


def test_new_token_every_handshake(testbed):
    tb = testbed(**NO_DOX)
    results = [doq_query(DoqSessionConfig(tb.doq_addresses[0]), "test.com") for _ in range(3)]
    assert all(r.new_token for r in results)
    assert len({r.new_token for r in results}) == 3
    conns = [_records_for(tb, r.local_port) for r in results][-1]
    assert sum(1 for c in conns if c["kind"] == "doq_connection" and c["new_token_issued"]) == 3


def test_no_new_token(testbed):
    tb = testbed(issue_new_token=False, **NO_DOX)
    assert doq_query(DoqSessionConfig(tb.doq_addresses[0]), "test.com").new_token is None


@pytest.mark.parametrize("mode,retries_with_token", [("always", 1), ("first_contact_only", 0), ("never", 0)])
def test_retry_modes(testbed, mode, retries_with_token):
    tb = testbed(retry_mode=mode, **NO_DOX)
    first = doq_query(DoqSessionConfig(tb.doq_addresses[0]), "test.com")
    second = doq_query(DoqSessionConfig(tb.doq_addresses[0], token=first.new_token), "test.com")
    records = _records_for(tb, second.local_port)
    mine = [r for r in records if r["kind"] == "doq_retry" and r["client"].endswith(f":{second.local_port}")]
    assert len(mine) == retries_with_token
    first_retry = [r for r in records if r["kind"] == "doq_retry" and r["client"].endswith(f":{first.local_port}")]
    assert len(first_retry) == (0 if mode == "never" else 1)


@pytest.mark.parametrize("enforce", [True, False])
def test_amplification_invariant(testbed, enforce):
    # before validation the server never sends more than 3x what it received
    tb = testbed(certificate_profile="large", enforce_amplification_after_validation=enforce, **NO_DOX)
    first = doq_query(DoqSessionConfig(tb.doq_addresses[0]), "test.com")
    second = doq_query(DoqSessionConfig(tb.doq_addresses[0], token=first.new_token), "test.com")
    _records_for(tb, second.local_port)
    conns = tb.records("doq_connection")
    assert len(conns) == 2
    for c in conns:
        assert c["pre_validation_sent"] <= 3 * c["pre_validation_received"]
    token_conn = [c for c in conns if c["token_presented"]][0]
    if enforce:
        assert token_conn["pre_validation_sent"] > 0
    else:
        assert token_conn["pre_validation_sent"] == 0  # validated by the token before any byte


def test_version_negotiation_only_for_full_initials(testbed):
    tb = testbed(**NO_DOX)
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.settimeout(0.3)
    try:
        small = build_small_probe()
        s.sendto(small, tb.doq_addresses[0])
        with pytest.raises(socket.timeout):
            s.recv(2048)
    finally:
        s.close()


def build_small_probe():
    p = probe_core.build_quic_probe()
    return p.datagram[:600]


def test_bind_failure(testbed):
    tb = testbed(**NO_DOX)
    with pytest.raises(BindFailure):
        serve(TestbedConfig(host=tb.host, doq_ports=tb.doq_ports, **NO_DOX))
    with pytest.raises(BindFailure):
        serve(TestbedConfig(host="192.0.2.77", **NO_DOX))


def test_log_file(tmp_path, testbed):
    path = tmp_path / "tb.jsonl"
    tb = testbed(log_path=str(path), **NO_DOX)
    r = doq_query(DoqSessionConfig(tb.doq_addresses[0]), "test.com")
    _records_for(tb, r.local_port)
    tb.stop()
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert any(l["kind"] == "doq_connection" for l in lines)


def test_context_manager_stops():
    host = next_host()
    with serve(TestbedConfig(host=host, **NO_DOX)) as tb:
        port = tb.doq_ports[0]
    # port is free again
    again = serve(TestbedConfig(host=host, doq_ports=[port], **NO_DOX))
    again.stop()

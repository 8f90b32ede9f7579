import socket

import pytest

from doqscope import dox_clients
from doqscope.dox_clients import Protocol, query_doh, query_dot, query_dotcp, query_doudp
from doqscope.errors import DnsError, HttpError, PreconditionError, Refused, Timeout

from conftest import next_host


def test_protocol_parse():
    assert Protocol.parse("doq") is Protocol.DOQ
    assert Protocol.parse("DoH") is Protocol.DOH
    with pytest.raises(ValueError):
        Protocol.parse("dns-over-carrier-pigeon")


def test_doh_path():
    assert dox_clients.doh_path(None) == "/dns-query"
    assert dox_clients.doh_path("https://{ip}/resolve") == "/resolve"
    assert dox_clients.doh_path("/q") == "/q"


def test_all_protocols_answer(testbed):
    tb = testbed()
    udp = query_doudp(tb.address("doudp"), "test.com")
    assert udp.handshake_time is None and udp.resolve_time > 0
    tcp = query_dotcp(tb.address("dotcp"), "test.com")
    assert tcp.handshake_time > 0 and tcp.tls_version is None
    dot = query_dot(tb.address("dot"), "test.com")
    doh = query_doh(tb.address("doh"), "test.com")
    assert dot.tls_version == doh.tls_version == "1.3"
    assert doh.http_status == 200
    for r in (udp, tcp, dot, doh):
        assert r.rcode == 0
        assert r.response.answers[0].address == "192.0.2.1"


def test_tls12(testbed):
    tb = testbed(tls_versions=["1.2"])
    assert query_dot(tb.address("dot"), "test.com").tls_version == "1.2"
    assert query_doh(tb.address("doh"), "test.com").tls_version == "1.2"


def test_handshake_costs_follow_delay(testbed):
    tb = testbed(one_way_delay=25)
    tcp = query_dotcp(tb.address("dotcp"), "test.com")
    dot = query_dot(tb.address("dot"), "test.com")
    assert 45 <= tcp.handshake_time < 75
    assert 95 <= dot.handshake_time < 140
    assert 45 <= tcp.resolve_time < 75


def test_doh_error_status(testbed):
    tb = testbed(doh_status=503)
    with pytest.raises(HttpError) as info:
        query_doh(tb.address("doh"), "test.com")
    assert info.value.status == 503


def test_doh_wrong_path(testbed):
    tb = testbed()
    with pytest.raises(HttpError):
        query_doh(tb.address("doh"), "test.com", url_template="/elsewhere")


def test_rcode_errors_carry_result(testbed):
    tb = testbed(refuse_queries=True)
    for fn, proto in ((query_doudp, "doudp"), (query_dotcp, "dotcp"), (query_dot, "dot"), (query_doh, "doh")):
        with pytest.raises(DnsError) as info:
            fn(tb.address(proto), "test.com")
        assert info.value.rcode == 5
        assert info.value.result.resolve_time is not None


def test_refused_and_udp_timeout():
    host = next_host()
    with pytest.raises(Refused):
        query_dotcp((host, 9), "test.com", timeout=1.0)
    silent = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    silent.bind((host, 0))
    try:
        with pytest.raises(Timeout):
            query_doudp(silent.getsockname(), "test.com", timeout=0.3)
    finally:
        silent.close()


@pytest.mark.parametrize("echo", [None, 0, 10])
def test_keepalive(testbed, echo):
    tb = testbed(keepalive_echo=echo)
    assert dox_clients.probe_keepalive(tb.address("dotcp"), "DoTCP") == echo
    assert dox_clients.probe_keepalive(tb.address("dot"), Protocol.DOT) == echo
    with pytest.raises(ValueError):
        dox_clients.probe_keepalive(tb.address("doh"), Protocol.DOH)


def test_keepalive_not_echoed_over_udp(testbed):
    tb = testbed(keepalive_echo=10)
    r = query_doudp(tb.address("doudp"), "test.com", edns_options=[(11, b"")])
    assert r.response.edns_options == []


@pytest.mark.parametrize("enabled", [True, False])
def test_tfo(testbed, enabled):
    tb = testbed(tfo=enabled)
    assert dox_clients.probe_tfo(tb.address("dotcp")) is enabled


def test_quic_0rtt_needs_ticket():
    with pytest.raises(PreconditionError):
        dox_clients.probe_quic_0rtt(("127.0.0.1", 853), None)

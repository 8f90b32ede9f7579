import struct

import pytest

from doqscope import probe_core
from doqscope.errors import CidMismatch, NotVersionNegotiation
from doqscope.probe_core import ProbeKind, Target, build_quic_probe, parse_version_negotiation
from doqscope.quic_versions import QUIC_DRAFT_29, QUIC_V1

import oracles
from conftest import next_host


@pytest.mark.parametrize("dcid,scid", [(8, 8), (0, 0), (20, 8)])
def test_probe_layout(dcid, scid):
    p = build_quic_probe(dcid, scid)
    d = p.datagram
    assert len(d) == 1200
    assert d[0] == 0xC3
    assert struct.unpack("!I", d[1:5])[0] == 0
    assert d[5] == dcid and d[6 : 6 + dcid] == p.dcid
    assert d[6 + dcid] == scid and d[7 + dcid : 7 + dcid + scid] == p.scid


def test_probe_rejects_long_cid():
    with pytest.raises(ValueError):
        build_quic_probe(21, 8)


def test_probes_are_random():
    a, b = build_quic_probe(), build_quic_probe()
    assert a.dcid != b.dcid and a.datagram != b.datagram


def _vn(dcid, scid, versions):
    return bytes([0x80]) + b"\x00" * 4 + bytes([len(dcid)]) + dcid + bytes([len(scid)]) + scid + b"".join(
        struct.pack("!I", v) for v in versions
    )


def test_parse_vn():
    p = build_quic_probe()
    assert parse_version_negotiation(_vn(p.scid, p.dcid, [1, 0xFF00001D]), p) == [1, 0xFF00001D]


def test_parse_vn_errors():
    p = build_quic_probe()
    with pytest.raises(CidMismatch):
        parse_version_negotiation(_vn(p.dcid, p.scid, [1]), p)
    with pytest.raises(NotVersionNegotiation):
        parse_version_negotiation(p.datagram, p)
    with pytest.raises(NotVersionNegotiation):
        parse_version_negotiation(b"\x40hello", p)
    with pytest.raises(NotVersionNegotiation):
        parse_version_negotiation(_vn(p.scid, p.dcid, []) + b"\x01", p)


def test_version_negotiation_from_testbed(testbed):
    tb = testbed(quic_versions_served=[QUIC_V1, QUIC_DRAFT_29], doudp_port=None, dot_port=None, doh_port=None)
    host, port = tb.doq_addresses[0]
    r = probe_core.rtt_probe_quic(Target(host, port), timeout=2.0)
    assert r.ok
    assert r.vn_versions == [oracles.QUIC_V1, oracles.QUIC_DRAFT_29]


def test_rtt_probes_follow_delay(testbed):
    tb = testbed(one_way_delay=30, udp_echo_port=0)
    host = tb.host
    quic = probe_core.probe(Target(host, tb.doq_ports[0]), ProbeKind.QUIC_VN, 2.0)
    tcp = probe_core.probe(Target(host, tb.ports["dotcp"], "tcp"), ProbeKind.TCP_SYN, 2.0)
    udp = probe_core.probe(Target(host, tb.ports["udp_echo"]), ProbeKind.UDP_PAYLOAD, 2.0)
    for r in (quic, tcp, udp):
        assert r.ok, r.error
        assert 60 <= r.rtt < 90


def test_echo_is_not_quic(testbed):
    tb = testbed(doq_ports=[], udp_echo_port=0)
    r = probe_core.rtt_probe_quic(Target(tb.host, tb.ports["udp_echo"]), timeout=1.0)
    assert r.error == "NotVersionNegotiation"


def test_closed_ports():
    host = next_host()
    assert probe_core.rtt_probe_quic(Target(host, 9), timeout=0.5).error in ("NetworkUnreachable", "Timeout")
    r = probe_core.rtt_probe_tcp(Target(host, 9, "tcp"), timeout=0.5)
    assert r.error == "Refused"


def test_silent_target_times_out():
    # a bound socket that never answers
    import socket

    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.bind((next_host(), 0))
    try:
        r = probe_core.rtt_probe_quic(Target(*s.getsockname()), timeout=0.3)
        assert r.error == "Timeout"
    finally:
        s.close()


def test_distinct_source_ports(testbed):
    tb = testbed()
    ports = {probe_core.rtt_probe_quic(Target(tb.host, tb.doq_ports[0]), 1.0).source_port for _ in range(5)}
    assert len(ports) == 5

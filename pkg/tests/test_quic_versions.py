import pytest

from doqscope import quic_versions as qv
from doqscope.errors import NoSharedVersion, VersionMismatch


@pytest.mark.parametrize("version,name", [
    (qv.QUIC_V1, "QUICv1"), (qv.QUIC_DRAFT_29, "draft-29"), (0xFF00001B, "draft-27"), (0x1A2A3A4A, "0x1a2a3a4a"),
])
def test_names_round_trip(version, name):
    assert qv.version_name(version) == name
    assert qv.parse_version(name) == version


def test_negotiation_follows_client_order():
    assert qv.negotiate_preference([3, 2, 1], [1, 2]) == 2
    with pytest.raises(NoSharedVersion):
        qv.negotiate_preference([3], [1])
    assert issubclass(NoSharedVersion, VersionMismatch)
    with pytest.raises(ValueError):
        qv.negotiate_preference([], [1])


def test_alpn_framing():
    wire = b"\x12\x34abc"
    for alpn in ("doq", "doq-i03", "doq-i06"):
        framed = qv.frame_message(alpn, wire)
        assert framed == b"\x00\x05" + wire
        assert qv.unframe_message(alpn, framed) == wire
        assert qv.unframe_message(alpn, framed[:3]) is None
    for alpn in ("doq-i00", "doq-i02"):
        assert qv.frame_message(alpn, wire) == wire
    assert qv.is_doq_alpn("doq-i02") and not qv.is_doq_alpn("h3")
    with pytest.raises(ValueError):
        qv.doq_draft("h3")


def test_install_is_idempotent():
    qv.install()
    qv.install()
    from aioquic.quic import crypto

    # draft-29 Initial keys now derive without error
    pair = crypto.CryptoPair()
    pair.setup_initial(b"\x83\x94\xc8\xf0\x3e\x51\x57\x08", is_client=True, version=qv.QUIC_DRAFT_29)
    assert pair.send.is_valid()

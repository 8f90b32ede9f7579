"""QUIC version numbers, DoQ ALPN identifiers and framing rules.

aioquic only ships QUIC v1 and v2 key schedules. Drafts 33 and 34 are wire
identical to v1 apart from the version number; drafts 29 to 32 use a
different Initial salt and Retry integrity key, which :func:`install` adds
to aioquic. The transport-parameters TLS extension codepoint (0xffa5 in
drafts up to 32) is not switched per connection.
"""

from __future__ import annotations

import binascii
from typing import Iterable, Sequence

from .errors import NoSharedVersion

QUIC_V1 = 0x00000001
QUIC_V2 = 0x6B3343CF
QUIC_DRAFT_29 = 0xFF00001D
QUIC_DRAFT_32 = 0xFF000020
QUIC_DRAFT_34 = 0xFF000022

# highest preference first
DEFAULT_QUIC_VERSIONS = [QUIC_V1, QUIC_DRAFT_34, QUIC_DRAFT_32, QUIC_DRAFT_29]

_VERSION_NAMES = {
    QUIC_V1: "QUICv1",
    QUIC_V2: "QUICv2",
    QUIC_DRAFT_29: "draft-29",
    QUIC_DRAFT_32: "draft-32",
    QUIC_DRAFT_34: "draft-34",
}

DOQ_ALPN_FINAL = "doq"
# drafts -00 .. -06 of the DoQ Internet-Draft series
DOQ_DRAFT_ALPNS = [f"doq-i{n:02d}" for n in range(6, -1, -1)]
DEFAULT_DOQ_ALPNS = [DOQ_ALPN_FINAL, *DOQ_DRAFT_ALPNS]
# bare "doq" gets the semantics of the newest draft we implement
_FINAL_DRAFT = 6
# first draft whose streams carry a 2-octet length prefix
LENGTH_PREFIX_SINCE_DRAFT = 3

DOQ_PORTS = (784, 853, 8853)

_DRAFT_SALT_29_32 = binascii.unhexlify("afbfec289993d24c9e9786f19c6111e04390a899")
_DRAFT_RETRY_KEY_29_32 = binascii.unhexlify("ccce187ed09a09d05728155a6cb96be1")
_DRAFT_RETRY_NONCE_29_32 = binascii.unhexlify("e54930f97f2136f0530a8c1c")


def version_name(version: int) -> str:
    if version in _VERSION_NAMES:
        return _VERSION_NAMES[version]
    if version & 0xFFFFFF00 == 0xFF000000:
        return f"draft-{version & 0xFF}"
    return f"0x{version:08x}"


def parse_version(text: str) -> int:
    """Inverse of :func:`version_name`; also accepts hex literals."""
    for number, name in _VERSION_NAMES.items():
        if text.lower() == name.lower():
            return number
    if text.lower().startswith("draft-"):
        return 0xFF000000 | int(text[6:])
    return int(text, 0)


def is_doq_alpn(alpn: str | None) -> bool:
    return alpn == DOQ_ALPN_FINAL or (alpn in DOQ_DRAFT_ALPNS)


def doq_draft(alpn: str) -> int:
    if alpn == DOQ_ALPN_FINAL:
        return _FINAL_DRAFT
    if alpn in DOQ_DRAFT_ALPNS:
        return int(alpn[5:])
    raise ValueError(f"not a DoQ ALPN: {alpn!r}")


def uses_length_prefix(alpn: str) -> bool:
    return doq_draft(alpn) >= LENGTH_PREFIX_SINCE_DRAFT


def frame_message(alpn: str, wire: bytes) -> bytes:
    if uses_length_prefix(alpn):
        return len(wire).to_bytes(2, "big") + wire
    return wire


def unframe_message(alpn: str, data: bytes) -> bytes | None:
    """Return the DNS message carried by stream bytes, or None if incomplete.

    Unframed drafts rely on the stream FIN to delimit the message, so any
    buffered data counts as complete once the caller has seen FIN.
    """
    if not uses_length_prefix(alpn):
        return data
    if len(data) < 2:
        return None
    length = int.from_bytes(data[:2], "big")
    if len(data) < 2 + length:
        return None
    return data[2 : 2 + length]


def negotiate_preference(client_list: Sequence, server_list: Iterable):
    """First entry of the client's ordered list that the server also supports."""
    if not client_list:
        raise ValueError("client preference list is empty")
    server = set(server_list)
    if not server:
        raise ValueError("server list is empty")
    for candidate in client_list:
        if candidate in server:
            return candidate
    raise NoSharedVersion(f"no shared version between {list(client_list)} and {sorted(server)}")


_installed = False


def install() -> None:
    """Teach aioquic the draft-29..32 Initial salt and Retry integrity key."""
    global _installed
    if _installed:
        return
    from aioquic.quic import connection as qconn
    from aioquic.quic import crypto as qcrypto
    from aioquic.quic import packet as qpacket
    from cryptography.hazmat.primitives.ciphers.aead import AESGCM

    original_setup = qcrypto.CryptoPair.setup_initial
    original_tag = qpacket.get_retry_integrity_tag

    def setup_initial(self, cid: bytes, is_client: bool, version: int) -> None:
        if not QUIC_DRAFT_29 <= version <= QUIC_DRAFT_32:
            return original_setup(self, cid, is_client, version)
        recv_label, send_label = (
            (b"server in", b"client in") if is_client else (b"client in", b"server in")
        )
        algorithm = qcrypto.cipher_suite_hash(qcrypto.INITIAL_CIPHER_SUITE)
        secret = qcrypto.hkdf_extract(algorithm, _DRAFT_SALT_29_32, cid)
        for direction, label in ((self.recv, recv_label), (self.send, send_label)):
            direction.setup(
                cipher_suite=qcrypto.INITIAL_CIPHER_SUITE,
                secret=qcrypto.hkdf_expand_label(
                    algorithm, secret, label, b"", algorithm.digest_size
                ),
                version=version,
            )

    def get_retry_integrity_tag(packet_without_tag, original_destination_cid, version):
        if not QUIC_DRAFT_29 <= version <= QUIC_DRAFT_32:
            return original_tag(packet_without_tag, original_destination_cid, version)
        pseudo = (
            bytes([len(original_destination_cid)])
            + original_destination_cid
            + packet_without_tag
        )
        return AESGCM(_DRAFT_RETRY_KEY_29_32).encrypt(_DRAFT_RETRY_NONCE_29_32, b"", pseudo)

    qcrypto.CryptoPair.setup_initial = setup_initial
    qpacket.get_retry_integrity_tag = get_retry_integrity_tag
    qconn.get_retry_integrity_tag = get_retry_integrity_tag
    _installed = True

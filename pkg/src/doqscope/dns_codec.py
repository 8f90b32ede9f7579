"""DNS wire-format encoding and decoding (RFC 1035, EDNS0 per RFC 6891).

Only what the measurement toolkit needs is decoded structurally: A records
and the OPT pseudo-record. Every other record type keeps its rdata opaque.
Name compression is understood when decoding but never emitted.
"""

from __future__ import annotations

import secrets
import struct
from dataclasses import dataclass, field
from typing import Optional

HEADER = struct.Struct("!HHHHHH")

TYPE_A = 1
TYPE_OPT = 41
CLASS_IN = 1

OPT_TCP_KEEPALIVE = 11

RCODE_NOERROR = 0
RCODE_FORMERR = 1
RCODE_SERVFAIL = 2
RCODE_NXDOMAIN = 3
RCODE_REFUSED = 5

FLAG_QR = 0x8000
FLAG_AA = 0x0400
FLAG_TC = 0x0200
FLAG_RD = 0x0100
FLAG_RA = 0x0080

MAX_LABEL = 63
MAX_NAME = 255
_MAX_POINTER_HOPS = 128


class DnsCodecError(ValueError):
    """Base class for wire-format problems."""


class InvalidName(DnsCodecError):
    pass


class Truncated(DnsCodecError):
    pass


class MalformedPointerLoop(DnsCodecError):
    pass


@dataclass(frozen=True)
class Question:
    name: str
    qtype: int = TYPE_A
    qclass: int = CLASS_IN


@dataclass(frozen=True)
class ResourceRecord:
    name: str
    rtype: int
    rclass: int
    ttl: int
    rdata: bytes

    @property
    def address(self) -> Optional[str]:
        """Dotted quad for A/IN records, None otherwise."""
        if self.rtype == TYPE_A and len(self.rdata) == 4:
            return ".".join(str(b) for b in self.rdata)
        return None


@dataclass(frozen=True)
class Edns:
    udp_size: int = 1232
    extended_rcode: int = 0
    version: int = 0
    flags: int = 0
    options: tuple[tuple[int, bytes], ...] = ()


@dataclass
class DnsMessage:
    id: int
    flags: int
    questions: list[Question] = field(default_factory=list)
    answers: list[ResourceRecord] = field(default_factory=list)
    authority: list[ResourceRecord] = field(default_factory=list)
    additional: list[ResourceRecord] = field(default_factory=list)
    edns: Optional[Edns] = None
    # bytes left over after the last section; reported, never fatal
    trailing: bytes = field(default=b"", compare=False)

    @property
    def qr(self) -> bool:
        return bool(self.flags & FLAG_QR)

    @property
    def opcode(self) -> int:
        return (self.flags >> 11) & 0xF

    @property
    def aa(self) -> bool:
        return bool(self.flags & FLAG_AA)

    @property
    def tc(self) -> bool:
        return bool(self.flags & FLAG_TC)

    @property
    def rd(self) -> bool:
        return bool(self.flags & FLAG_RD)

    @property
    def ra(self) -> bool:
        return bool(self.flags & FLAG_RA)

    @property
    def rcode(self) -> int:
        """Full response code, extended with the OPT upper bits when present."""
        low = self.flags & 0xF
        if self.edns is not None:
            return (self.edns.extended_rcode << 4) | low
        return low

    @property
    def edns_options(self) -> list[tuple[int, bytes]]:
        return list(self.edns.options) if self.edns is not None else []

    @property
    def question(self) -> Optional[Question]:
        return self.questions[0] if self.questions else None


def make_flags(
    qr: bool = False,
    opcode: int = 0,
    aa: bool = False,
    tc: bool = False,
    rd: bool = False,
    ra: bool = False,
    rcode: int = 0,
) -> int:
    return (
        (FLAG_QR if qr else 0)
        | ((opcode & 0xF) << 11)
        | (FLAG_AA if aa else 0)
        | (FLAG_TC if tc else 0)
        | (FLAG_RD if rd else 0)
        | (FLAG_RA if ra else 0)
        | (rcode & 0xF)
    )


def encode_name(name: str) -> bytes:
    """Encode a dot-separated name as uncompressed labels.

    A single trailing dot is accepted; "." alone is the root. The empty
    string is rejected since a query for it is always an operator mistake.
    """
    if name == ".":
        return b"\x00"
    if not name:
        raise InvalidName("empty name")
    if name.endswith("."):
        name = name[:-1]
    out = bytearray()
    for label in name.split("."):
        raw = label.encode("latin-1") if label else b""
        if not raw:
            raise InvalidName(f"empty label in {name!r}")
        if len(raw) > MAX_LABEL:
            raise InvalidName(f"label longer than {MAX_LABEL} bytes in {name!r}")
        out.append(len(raw))
        out += raw
    out.append(0)
    if len(out) > MAX_NAME:
        raise InvalidName(f"name longer than {MAX_NAME} bytes")
    return bytes(out)


def _encode_rr(rr: ResourceRecord) -> bytes:
    return (
        encode_name(rr.name)
        + struct.pack("!HHIH", rr.rtype, rr.rclass, rr.ttl, len(rr.rdata))
        + rr.rdata
    )


def _encode_opt(edns: Edns) -> bytes:
    rdata = b"".join(
        struct.pack("!HH", code, len(value)) + value for code, value in edns.options
    )
    ttl = (edns.extended_rcode << 24) | (edns.version << 16) | edns.flags
    return b"\x00" + struct.pack("!HHIH", TYPE_OPT, edns.udp_size, ttl, len(rdata)) + rdata


def encode_message(m: DnsMessage) -> bytes:
    additional_count = len(m.additional) + (1 if m.edns is not None else 0)
    out = bytearray(
        HEADER.pack(
            m.id,
            m.flags,
            len(m.questions),
            len(m.answers),
            len(m.authority),
            additional_count,
        )
    )
    for q in m.questions:
        out += encode_name(q.name) + struct.pack("!HH", q.qtype, q.qclass)
    for rr in (*m.answers, *m.authority, *m.additional):
        out += _encode_rr(rr)
    if m.edns is not None:
        out += _encode_opt(m.edns)
    return bytes(out)


def new_message_id() -> int:
    return secrets.randbelow(0x10000)


def build_query(
    name: str,
    rd: bool = True,
    edns_options: Optional[list[tuple[int, bytes]]] = None,
    msg_id: Optional[int] = None,
    qtype: int = TYPE_A,
) -> DnsMessage:
    """Build an A/IN query message. An OPT record is only added when options are given."""
    encode_name(name)
    edns = Edns(options=tuple(edns_options)) if edns_options else None
    return DnsMessage(
        id=new_message_id() if msg_id is None else msg_id,
        flags=make_flags(rd=rd),
        questions=[Question(name.rstrip(".") or ".", qtype, CLASS_IN)],
        edns=edns,
    )


def encode_query(
    name: str,
    rd: bool = True,
    edns_options: Optional[list[tuple[int, bytes]]] = None,
    msg_id: Optional[int] = None,
) -> bytes:
    return encode_message(build_query(name, rd, edns_options, msg_id))


def _read_name(data: bytes, offset: int) -> tuple[str, int]:
    """Return (name, offset after the name in the original position)."""
    labels: list[str] = []
    end = None
    hops = 0
    total = 1
    while True:
        if offset >= len(data):
            raise Truncated("name runs past end of message")
        length = data[offset]
        kind = length & 0xC0
        if kind == 0xC0:
            if offset + 1 >= len(data):
                raise Truncated("compression pointer cut short")
            hops += 1
            if hops > _MAX_POINTER_HOPS:
                raise MalformedPointerLoop("compression pointer loop")
            target = ((length & 0x3F) << 8) | data[offset + 1]
            if end is None:
                end = offset + 2
            if target >= len(data):
                raise Truncated("compression pointer past end of message")
            offset = target
            continue
        if kind != 0:
            raise DnsCodecError(f"unsupported label type 0x{kind:02x}")
        offset += 1
        if length == 0:
            break
        if offset + length > len(data):
            raise Truncated("label runs past end of message")
        total += length + 1
        if total > MAX_NAME:
            raise DnsCodecError("decoded name longer than 255 bytes")
        labels.append(data[offset : offset + length].decode("latin-1"))
        offset += length
    return (".".join(labels) if labels else "."), (end if end is not None else offset)


def _read_rr(data: bytes, offset: int) -> tuple[ResourceRecord, int]:
    name, offset = _read_name(data, offset)
    if offset + 10 > len(data):
        raise Truncated("resource record header cut short")
    rtype, rclass, ttl, rdlength = struct.unpack_from("!HHIH", data, offset)
    offset += 10
    if offset + rdlength > len(data):
        raise Truncated("rdata runs past end of message")
    rdata = data[offset : offset + rdlength]
    return ResourceRecord(name, rtype, rclass, ttl, rdata), offset + rdlength


def _parse_opt(rr: ResourceRecord) -> Edns:
    options = []
    pos = 0
    while pos < len(rr.rdata):
        if pos + 4 > len(rr.rdata):
            raise Truncated("EDNS option header cut short")
        code, length = struct.unpack_from("!HH", rr.rdata, pos)
        pos += 4
        if pos + length > len(rr.rdata):
            raise Truncated("EDNS option value cut short")
        options.append((code, rr.rdata[pos : pos + length]))
        pos += length
    return Edns(
        udp_size=rr.rclass,
        extended_rcode=(rr.ttl >> 24) & 0xFF,
        version=(rr.ttl >> 16) & 0xFF,
        flags=rr.ttl & 0xFFFF,
        options=tuple(options),
    )


def decode_message(data: bytes) -> DnsMessage:
    """Decode a complete DNS message.

    Raises Truncated when the buffer ends early and MalformedPointerLoop for
    cyclic compression pointers. Surplus bytes are kept in ``trailing``.
    """
    if len(data) < HEADER.size:
        raise Truncated(f"{len(data)} bytes is shorter than the DNS header")
    msg_id, flags, qd, an, ns, ar = HEADER.unpack_from(data, 0)
    offset = HEADER.size
    questions = []
    for _ in range(qd):
        name, offset = _read_name(data, offset)
        if offset + 4 > len(data):
            raise Truncated("question cut short")
        qtype, qclass = struct.unpack_from("!HH", data, offset)
        offset += 4
        questions.append(Question(name, qtype, qclass))
    sections: list[list[ResourceRecord]] = [[], [], []]
    for idx, count in enumerate((an, ns, ar)):
        for _ in range(count):
            rr, offset = _read_rr(data, offset)
            sections[idx].append(rr)
    edns = None
    additional = []
    for rr in sections[2]:
        if rr.rtype == TYPE_OPT and edns is None:
            edns = _parse_opt(rr)
        else:
            additional.append(rr)
    return DnsMessage(
        id=msg_id,
        flags=flags,
        questions=questions,
        answers=sections[0],
        authority=sections[1],
        additional=additional,
        edns=edns,
        trailing=data[offset:],
    )


def extract_keepalive_timeout(m: DnsMessage) -> Optional[int]:
    """edns-tcp-keepalive timeout in units of 100 ms, or None if not present.

    An option without a value (as clients send it) also yields None.
    """
    for code, value in m.edns_options:
        if code == OPT_TCP_KEEPALIVE and len(value) == 2:
            return struct.unpack("!H", value)[0]
    return None


def keepalive_option(timeout: Optional[int] = None) -> tuple[int, bytes]:
    """Keepalive option: empty in queries, carrying the timeout in responses."""
    return (OPT_TCP_KEEPALIVE, b"" if timeout is None else struct.pack("!H", timeout))


def a_record(name: str, address: str, ttl: int = 300) -> ResourceRecord:
    rdata = bytes(int(part) for part in address.split("."))
    if len(rdata) != 4:
        raise ValueError(f"not an IPv4 address: {address!r}")
    return ResourceRecord(name, TYPE_A, CLASS_IN, ttl, rdata)

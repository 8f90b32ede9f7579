"""Static authoritative answers for the testbed."""

from __future__ import annotations

import logging
from types import MappingProxyType
from typing import Optional

from .. import dns_codec
from ..dns_codec import DnsMessage, Edns

logger = logging.getLogger(__name__)


class ZoneResponder:
    """Answer A queries from an immutable name -> IPv4 map.

    ``keepalive_echo`` (units of 100 ms) is returned in an edns-tcp-keepalive
    option when the query asked for it over a stream transport.
    """

    def __init__(self, zone: dict[str, str], keepalive_echo: Optional[int] = None, refuse: bool = False):
        self.zone = MappingProxyType({k.lower().rstrip("."): v for k, v in zone.items()})
        self.keepalive_echo = keepalive_echo
        self.refuse = refuse

    def respond(self, query: DnsMessage, stream: bool = False) -> DnsMessage:
        rcode = dns_codec.RCODE_NOERROR
        answers = []
        if self.refuse:
            rcode = dns_codec.RCODE_REFUSED
        elif len(query.questions) != 1 or query.opcode != 0:
            rcode = dns_codec.RCODE_FORMERR
        else:
            q = query.questions[0]
            address = self.zone.get(q.name.lower().rstrip("."))
            if address is None:
                rcode = dns_codec.RCODE_NXDOMAIN
            elif q.qtype == dns_codec.TYPE_A:
                answers.append(dns_codec.a_record(q.name, address))
        edns = None
        if query.edns is not None:
            options = ()
            asked = any(code == dns_codec.OPT_TCP_KEEPALIVE for code, _ in query.edns.options)
            if stream and asked and self.keepalive_echo is not None:
                options = (dns_codec.keepalive_option(self.keepalive_echo),)
            edns = Edns(options=options)
        return DnsMessage(
            id=query.id,
            flags=dns_codec.make_flags(qr=True, aa=True, rd=query.rd, ra=True, rcode=rcode),
            questions=list(query.questions),
            answers=answers,
            edns=edns,
        )

    def respond_wire(self, wire: bytes, stream: bool = False) -> Optional[bytes]:
        """Wire-level wrapper; undecodable queries get no answer."""
        try:
            query = dns_codec.decode_message(wire)
        except dns_codec.DnsCodecError as exc:
            logger.debug("dropping undecodable query: %s", exc)
            return None
        if query.qr:
            return None
        return dns_codec.encode_message(self.respond(query, stream))

"""Hypothesis strategies for DNS messages."""

from hypothesis import strategies as st

from doqscope.dns_codec import DnsMessage, Edns, Question, ResourceRecord

# any latin-1 character except the label separator
_label_chars = st.characters(min_codepoint=0x21, max_codepoint=0xFF, blacklist_characters=".")
labels = st.text(_label_chars, min_size=1, max_size=63)
# hostname-style labels, printable by any presentation-format parser
ascii_labels = st.text(st.sampled_from("abcdefghijklmnopqrstuvwxyz0123456789-_"), min_size=1, max_size=63)


@st.composite
def names(draw, label=labels):
    parts = draw(st.lists(label, min_size=0, max_size=4))
    # keep the wire form within 255 bytes
    while parts and sum(len(p) + 1 for p in parts) + 1 > 255:
        parts.pop()
    return ".".join(parts) if parts else "."


u16 = st.integers(0, 0xFFFF)
u32 = st.integers(0, 0xFFFFFFFF)
# OPT (41) is reserved for the edns field
rtypes = u16.filter(lambda t: t != 41)


# RFC 6895 private-use types carry opaque rdata in every decoder
private_rtypes = st.integers(65280, 65534)


def message_strategy(label=labels, edns_versions=st.integers(0, 0xFF), rtype=rtypes, rclass=u16, flags=u16):
    questions = st.builds(Question, names(label), u16, u16)
    records = st.builds(ResourceRecord, names(label), rtype, rclass, u32, st.binary(max_size=64))
    edns = st.builds(
        Edns,
        udp_size=u16,
        extended_rcode=st.integers(0, 0xFF),
        version=edns_versions,
        flags=u16,
        options=st.lists(st.tuples(u16, st.binary(max_size=16)), max_size=3).map(tuple),
    )
    return st.builds(
        DnsMessage,
        id=u16,
        flags=flags,
        questions=st.lists(questions, max_size=3),
        answers=st.lists(records, max_size=3),
        authority=st.lists(records, max_size=2),
        additional=st.lists(records, max_size=2),
        edns=st.none() | edns,
    )


messages = message_strategy()
# what a validating decoder such as dnspython accepts: standard QUERY opcode,
# class IN and opaque record types
ascii_messages = message_strategy(
    ascii_labels, st.just(0), private_rtypes, st.just(1), u16.map(lambda f: f & ~0x7800)
)

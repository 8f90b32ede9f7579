"""Self-signed certificates sized to trigger (or avoid) the amplification limit."""

from __future__ import annotations

import datetime
import functools
import tempfile
from dataclasses import dataclass
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID, ObjectIdentifier

from .config import LARGE_CERTIFICATE_DER_SIZE

# private-enterprise arc used for the padding extension
_PADDING_OID = ObjectIdentifier("1.3.6.1.4.1.58888.1.1")


@dataclass(frozen=True)
class CertificateBundle:
    certificate: x509.Certificate
    private_key: ec.EllipticCurvePrivateKey
    cert_path: Path
    key_path: Path

    @property
    def der(self) -> bytes:
        return self.certificate.public_bytes(serialization.Encoding.DER)


def _build(key, common_name: str, padding: int) -> x509.Certificate:
    now = datetime.datetime.now(datetime.timezone.utc)
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])
    builder = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(days=1))
        .not_valid_after(now + datetime.timedelta(days=30))
        .add_extension(x509.SubjectAlternativeName([x509.DNSName(common_name)]), critical=False)
    )
    if padding > 0:
        # DER OCTET STRING with a two-byte length
        value = b"\x04\x82" + padding.to_bytes(2, "big") + bytes(padding)
        builder = builder.add_extension(
            x509.UnrecognizedExtension(_PADDING_OID, value), critical=False
        )
    return builder.sign(key, hashes.SHA256())


@functools.lru_cache(maxsize=None)
def make_certificate(profile: str, common_name: str) -> CertificateBundle:
    """Generate a certificate for ``profile`` ("small" or "large").

    "large" is padded so that its DER encoding is about
    LARGE_CERTIFICATE_DER_SIZE bytes, comfortably above three client
    Initial datagrams.
    """
    key = ec.generate_private_key(ec.SECP256R1())
    cert = _build(key, common_name, 0)
    if profile == "large":
        base = len(cert.public_bytes(serialization.Encoding.DER))
        # extension framing (OID, OCTET STRING wrappers) costs about 25 bytes
        cert = _build(key, common_name, max(LARGE_CERTIFICATE_DER_SIZE - base - 25, 16))
    elif profile != "small":
        raise ValueError(f"unknown certificate profile {profile!r}")
    directory = Path(tempfile.mkdtemp(prefix="doqscope-cert-"))
    cert_path = directory / "cert.pem"
    key_path = directory / "key.pem"
    cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    key_path.write_bytes(
        key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
    )
    return CertificateBundle(cert, key, cert_path, key_path)

"""Testbed configuration: endpoints, injected behaviours and emulated latency."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..quic_versions import QUIC_V1, parse_version

RETRY_MODES = ("never", "always", "first_contact_only")
CERTIFICATE_PROFILES = ("small", "large")
DOQ_STREAM_BEHAVIOURS = ("answer", "fin_without_answer", "reset")
TLS_VERSIONS = ("1.2", "1.3")

# one DoQ client Initial datagram is 1200 bytes; "large" must exceed 3x that
LARGE_CERTIFICATE_DER_SIZE = 4800


@dataclass
class TestbedConfig:
    """Behaviour switches for a local DoQ/DoX server.

    Ports set to ``None`` disable the endpoint; ``0`` picks a free port.
    Delays are in milliseconds and applied to each direction.
    """

    __test__ = False  # keep pytest from collecting this class

    host: str = "127.0.0.1"
    doq_ports: list[int] = field(default_factory=lambda: [0])
    doudp_port: Optional[int] = 0
    dotcp_port: Optional[int] = 0
    dot_port: Optional[int] = 0
    doh_port: Optional[int] = 0
    udp_echo_port: Optional[int] = None
    one_way_delay: float = 0.0
    jitter: float = 0.0
    quic_versions_served: list[int] = field(default_factory=lambda: [QUIC_V1])
    doq_alpns_served: list[str] = field(default_factory=lambda: ["doq"])
    retry_mode: str = "never"
    issue_new_token: bool = True
    enforce_amplification_after_validation: bool = False
    certificate_profile: str = "small"
    tls_versions: list[str] = field(default_factory=lambda: ["1.3"])
    tfo: bool = False
    keepalive_echo: Optional[int] = None
    zero_rtt: bool = False
    zone: dict[str, str] = field(
        default_factory=lambda: {"test.com": "192.0.2.1", "www.google.com": "192.0.2.2"}
    )
    refuse_queries: bool = False
    doq_stream_behaviour: str = "answer"
    doh_path: str = "/dns-query"
    doh_status: int = 200
    common_name: str = "doq.testbed.invalid"
    log_path: Optional[str] = None

    def __post_init__(self):
        if self.one_way_delay < 0 or self.jitter < 0:
            raise ValueError("delay and jitter must be non-negative")
        if self.retry_mode not in RETRY_MODES:
            raise ValueError(f"retry_mode must be one of {RETRY_MODES}")
        if self.certificate_profile not in CERTIFICATE_PROFILES:
            raise ValueError(f"certificate_profile must be one of {CERTIFICATE_PROFILES}")
        if self.doq_stream_behaviour not in DOQ_STREAM_BEHAVIOURS:
            raise ValueError(f"doq_stream_behaviour must be one of {DOQ_STREAM_BEHAVIOURS}")
        bad = set(self.tls_versions) - set(TLS_VERSIONS)
        if bad or not self.tls_versions:
            raise ValueError(f"tls_versions must be a nonempty subset of {TLS_VERSIONS}")
        if not self.quic_versions_served or not self.doq_alpns_served:
            raise ValueError("served QUIC versions and ALPNs must be nonempty")
        self.zone = {k.lower().rstrip("."): v for k, v in self.zone.items()}

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "TestbedConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown testbed settings: {sorted(unknown)}")
        values = dict(values)
        if "quic_versions_served" in values:
            values["quic_versions_served"] = [
                parse_version(v) if isinstance(v, str) else int(v)
                for v in values["quic_versions_served"]
            ]
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path) -> "TestbedConfig":
        from ..config import load_toml

        data = load_toml(path)
        return cls.from_mapping(data.get("testbed", data))

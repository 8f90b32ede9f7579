"""Discovery, verification and response-time measurement of DNS over QUIC resolvers."""

__version__ = "0.1.0"

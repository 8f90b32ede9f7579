"""Local DoQ/DoUDP/DoTCP/DoT/DoH server with latency emulation and behaviour switches."""

from .config import TestbedConfig
from .server import TestbedHandle, serve

__all__ = ["TestbedConfig", "TestbedHandle", "serve"]

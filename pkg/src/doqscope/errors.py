"""Exception classes shared across the toolkit.

Measurement records store ``error_class``, which is the class name of the
exception that ended an operation. Keep the names stable.
"""


class MeasurementError(Exception):
    @property
    def error_class(self) -> str:
        return type(self).__name__


class Timeout(MeasurementError, TimeoutError):
    pass


class NetworkUnreachable(MeasurementError):
    pass


class Refused(MeasurementError):
    rtt = None  # seconds until the RST arrived, when known


class Malformed(MeasurementError):
    pass


class NotVersionNegotiation(MeasurementError):
    pass


class CidMismatch(MeasurementError):
    pass


class AlpnMismatch(MeasurementError):
    pass


class VersionMismatch(MeasurementError):
    pass


class NoSharedVersion(VersionMismatch):
    pass


class TlsFailure(MeasurementError):
    pass


class DoqProtocolError(MeasurementError):
    pass


class HttpError(MeasurementError):
    def __init__(self, status: int, reason: str = ""):
        super().__init__(f"HTTP {status} {reason}".strip())
        self.status = status


class DnsError(MeasurementError):
    """Transport worked but the response carried RCODE != 0.

    ``result`` holds the fully populated session result so callers can still
    use the timings.
    """

    def __init__(self, rcode: int, result=None):
        super().__init__(f"DNS response code {rcode}")
        self.rcode = rcode
        self.result = result


class PreconditionError(MeasurementError):
    pass


class ConnectionClosed(MeasurementError):
    def __init__(self, code: int, reason: str = ""):
        super().__init__(f"connection closed with code 0x{code:x} {reason}".strip())
        self.code = code


class BindFailure(OSError):
    pass


class UnknownWeek(LookupError):
    pass


class IncompleteLog(ValueError):
    pass


class MissingRtt(ValueError):
    pass


class EmptySelection(ValueError):
    pass


class IoFailure(OSError):
    pass

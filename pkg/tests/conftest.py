import itertools
import logging

import pytest

from doqscope.testbed import TestbedConfig, serve

# every testbed gets its own loopback address so that real DoQ ports can be
# bound repeatedly and TFO cookies (cached per destination IP) never leak
_hosts = (f"127.0.{a}.{b}" for a, b in itertools.product(range(10, 250), range(1, 250)))

ACCEPTANCE_LINES: list[str] = []

# aioquic logs every refused ALPN/version at ERROR level; tests provoke those on purpose
logging.getLogger("quic").setLevel(logging.CRITICAL)


def next_host() -> str:
    return next(_hosts)


@pytest.fixture
def testbed():
    """Factory: testbed(**config_fields) -> running handle, stopped at teardown."""
    handles = []

    def start(**fields):
        fields.setdefault("host", next_host())
        handle = serve(TestbedConfig(**fields))
        handles.append(handle)
        return handle

    yield start
    for h in handles:
        h.stop()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

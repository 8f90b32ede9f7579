"""Delayed delivery queues used inside the testbed's socket layer."""

from __future__ import annotations

import asyncio
import random
from typing import Callable, Optional


class DelayLine:
    """Run callbacks after a one-way delay (seconds) with optional uniform jitter.

    With ``ordered=True`` release times never decrease, which stream
    transports need: jitter must not reorder bytes of a TCP connection.
    """

    def __init__(
        self,
        loop: asyncio.AbstractEventLoop,
        delay: float,
        jitter: float = 0.0,
        ordered: bool = False,
        rng: Optional[random.Random] = None,
    ):
        self.loop = loop
        self.delay = delay
        self.jitter = jitter
        self.ordered = ordered
        self._rng = rng or random.Random()
        self._last_release = 0.0

    def sample(self) -> float:
        if not self.jitter:
            return self.delay
        return max(0.0, self.delay + self._rng.uniform(-self.jitter, self.jitter))

    def schedule(self, fn: Callable, *args) -> None:
        delay = self.sample()
        if delay <= 0 and not (self.ordered and self._last_release > self.loop.time()):
            fn(*args)
            return
        when = self.loop.time() + delay
        if self.ordered:
            when = max(when, self._last_release)
            self._last_release = when
        self.loop.call_at(when, fn, *args)

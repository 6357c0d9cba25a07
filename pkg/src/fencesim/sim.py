"""Deterministic discrete-event engine.

Time is integer nanoseconds. Events with the same fire time run in the order
they were scheduled.
"""

from __future__ import annotations

import gc
import heapq
from typing import Any, Callable, NamedTuple

import numpy as np


class CausalityError(RuntimeError):
    """Raised when something is scheduled before the current clock."""


class ModelError(RuntimeError):
    """Raised when a protocol or transport invariant is broken by the model."""


class ConfigError(ValueError):
    """Raised for invalid workload, protocol or experiment configuration."""


class Event(NamedTuple):
    fire_time: int
    sequence: int
    payload: Any


class Simulator:
    """Min-heap event loop with a virtual clock.

    ``payload`` is either a zero-argument callable or an ``(fn, *args)``
    tuple. Handlers may schedule further events at or after ``now``.
    """

    def __init__(self, seed: int = 0):
        self.now = 0
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._queue: list[tuple] = []
        self._seq = 0
        self.processed = 0

    def schedule(self, fire_time: int, payload: Any) -> int:
        fire_time = int(fire_time)
        if fire_time < self.now:
            raise CausalityError(
                f"cannot schedule at t={fire_time} when clock is at t={self.now}"
            )
        self._seq += 1
        heapq.heappush(self._queue, (fire_time, self._seq, payload))
        return self._seq

    def after(self, delay: int, payload: Any) -> int:
        return self.schedule(self.now + int(delay), payload)

    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> Event:
        # (time, seq) is unique, so tuple comparison never reaches the payload
        ev = Event(*heapq.heappop(self._queue))
        self.now = ev.fire_time
        self.processed += 1
        _dispatch(ev.payload)
        return ev

    def run_until_idle(self) -> int:
        # the loop allocates many short-lived objects but builds no cycles,
        # so pausing the cyclic collector is safe and noticeably faster
        was_enabled = gc.isenabled()
        gc.disable()
        queue, pop = self._queue, heapq.heappop
        try:
            last = 0
            while queue:
                last, _, payload = pop(queue)
                self.now = last
                self.processed += 1
                if type(payload) is tuple and payload and callable(payload[0]):
                    payload[0](*payload[1:])
                else:
                    _dispatch(payload)
            return last
        finally:
            if was_enabled:
                gc.enable()


def _dispatch(payload: Any) -> None:
    if callable(payload):
        payload()
    elif isinstance(payload, tuple) and payload and callable(payload[0]):
        fn: Callable = payload[0]
        fn(*payload[1:])
    # anything else is an inert marker event

"""Small concurrency helpers shared by the HTTP clients."""
from __future__ import annotations

import os
import threading
import time
from contextlib import contextmanager


class TokenBucket:
    """Thread-safe token bucket: ``rate`` tokens per second, up to ``burst``."""

    def __init__(self, rate: float, burst: int = 1, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0 or burst < 1:
            raise ValueError("rate must be positive and burst >= 1")
        self.rate = float(rate)
        self.burst = int(burst)
        self._tokens = float(burst)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.burst, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


class InFlightGate:
    """Caps the number of concurrent requests and remembers the observed peak."""

    def __init__(self, limit: int):
        if limit < 1:
            raise ValueError("in-flight limit must be >= 1")
        self.limit = limit
        self._sem = threading.BoundedSemaphore(limit)
        self._lock = threading.Lock()
        self.active = 0
        self.peak = 0

    @contextmanager
    def slot(self):
        self._sem.acquire()
        with self._lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        try:
            yield
        finally:
            with self._lock:
                self.active -= 1
            self._sem.release()


def api_key_headers(env_var: str | None) -> dict[str, str]:
    if not env_var:
        return {}
    key = os.environ.get(env_var)
    return {"Authorization": f"Bearer {key}"} if key else {}

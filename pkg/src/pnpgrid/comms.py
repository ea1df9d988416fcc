"""Deterministic simulated broadcast network for the coordination layer.

Every connected unit periodically publishes its PoL estimate, reactive
power, and clock phase to all others. Delivery is delayed by a uniform
latency; consumers read the most recent delivered value per peer, so a
latency above one period simply makes them use an older tick.
"""

import bisect
import math
from dataclasses import dataclass


@dataclass(frozen=True)
class NetConfig:
    period_s: float = 0.01  # secondary sample interval
    latency_s: float = 0.0  # uniform delivery delay

    def __post_init__(self):
        if not (self.period_s > 0.0 and math.isfinite(self.period_s)):
            raise ValueError("period_s must be positive")
        if not (self.latency_s >= 0.0 and math.isfinite(self.latency_s)):
            raise ValueError("latency_s must be >= 0")


@dataclass(frozen=True)
class Payload:
    v_pol: float  # V amplitude estimate
    phi_pol: float  # rad phase estimate
    q: float  # var, reactive power of the sender
    theta: float  # rad, sender clock phase

    def __post_init__(self):
        vals = (self.v_pol, self.phi_pol, self.q, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("payload fields must be finite")


@dataclass(frozen=True)
class Broadcast:
    sender: int
    timestamp: float  # s, emission time
    payload: Payload


class BroadcastNetwork:
    """All-to-all broadcast with uniform latency and plug lifecycle.

    Disconnected senders are suppressed at publish time; a departed peer
    stays visible until its in-flight messages age out (one latency), then
    vanishes from snapshots. Receivers may listen while disconnected.
    """

    def __init__(self, config=NetConfig()):
        self.config = config
        self._connected = set()
        self._left_at = {}
        self._deliveries = {}  # sender -> ([delivery times], [broadcasts])

    @property
    def connected(self):
        return frozenset(self._connected)

    def is_connected(self, dgu_id):
        return dgu_id in self._connected

    def connect(self, dgu_id, t=0.0):
        # a rejoining unit starts with a clean slate; pre-departure values
        # must not reappear as fresh
        self._connected.add(dgu_id)
        self._left_at.pop(dgu_id, None)
        self._deliveries.pop(dgu_id, None)

    def disconnect(self, dgu_id, t):
        if dgu_id in self._connected:
            self._connected.discard(dgu_id)
            self._left_at[dgu_id] = t

    def publish(self, broadcast):
        if broadcast.sender not in self._connected:
            return
        times, items = self._deliveries.setdefault(broadcast.sender, ([], []))
        delivery = broadcast.timestamp + self.config.latency_s
        if times and delivery < times[-1]:
            raise ValueError("publishes must be time-ordered per sender")
        times.append(delivery)
        items.append(broadcast)

    def snapshot(self, receiver, t):
        """Most recent delivered payload per visible peer at time t."""
        out = {}
        for sender, (times, items) in self._deliveries.items():
            if sender == receiver:
                continue
            left = self._left_at.get(sender)
            if left is not None and t > left + self.config.latency_s:
                continue
            pos = bisect.bisect_right(times, t)
            if pos:
                out[sender] = items[pos - 1].payload
        return out

    def prune(self, t):
        """Drop history that no snapshot at time >= t can ever return."""
        for sender in list(self._deliveries):
            times, items = self._deliveries[sender]
            left = self._left_at.get(sender)
            if left is not None and t > left + self.config.latency_s:
                del self._deliveries[sender]
                continue
            pos = bisect.bisect_right(times, t)
            if pos > 1:
                del times[:pos - 1]
                del items[:pos - 1]

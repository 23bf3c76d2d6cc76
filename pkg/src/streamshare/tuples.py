"""Tuple carrier for the data plane.

Every record flowing through a shared plan is annotated with a *query set*:
a bitmask over query indices naming the queries the record still contributes
to.  Shared operators intersect and route by these sets, which is what lets
one plan serve many queries without mixing up their results.
"""

from __future__ import annotations

MAX_QUERY_WIDTH = 256


class QueryRegistry:
    """Maps query identifiers to bit positions of the query-set bitmask."""

    def __init__(self, max_width: int = MAX_QUERY_WIDTH):
        self.max_width = max_width
        self._bit_of: dict[str, int] = {}
        self._name_of: list[str] = []

    def register(self, query_id: str) -> int:
        if query_id in self._bit_of:
            return self._bit_of[query_id]
        if len(self._name_of) >= self.max_width:
            raise ValueError(
                f"query-set width exhausted ({self.max_width} queries)")
        bit = len(self._name_of)
        self._bit_of[query_id] = bit
        self._name_of.append(query_id)
        return bit

    def bit(self, query_id: str) -> int:
        return self._bit_of[query_id]

    def mask(self, query_ids) -> int:
        m = 0
        for qid in query_ids:
            m |= 1 << self._bit_of[qid]
        return m

    def names(self, mask: int) -> list[str]:
        out = []
        i = 0
        while mask:
            if mask & 1:
                out.append(self._name_of[i])
            mask >>= 1
            i += 1
        return out

    def __len__(self) -> int:
        return len(self._name_of)


def bits_of(mask: int) -> list[int]:
    """Bit positions set in ``mask``, ascending."""
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return out


def popcount(mask: int) -> int:
    return bin(mask).count("1")


class TaggedTuple:
    """A payload with event time, owning-query bitmask and control flags.

    ``monitor`` marks records forwarded solely for statistics collection;
    they carry an empty (or reduced) owner set and must never reach a
    query's sink.  ``sampled`` marks records selected by the continuous
    per-query sample used for throughput estimation.
    """

    __slots__ = ("payload", "event_time", "query_set", "stream", "monitor",
                 "sampled")

    def __init__(self, payload: dict, event_time: int, query_set: int,
                 stream: str, monitor: bool = False, sampled: bool = False):
        self.payload = payload
        self.event_time = event_time
        self.query_set = query_set
        self.stream = stream
        self.monitor = monitor
        self.sampled = sampled

    def __repr__(self):  # debugging aid only
        return (f"TaggedTuple(et={self.event_time}, qs={self.query_set:b}, "
                f"stream={self.stream!r}, payload={self.payload!r})")


def canonical_payload(payload: dict) -> tuple:
    """Stable, hashable rendering of a payload for output comparison."""
    return tuple(sorted(payload.items()))

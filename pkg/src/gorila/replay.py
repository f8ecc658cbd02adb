"""Experience replay: per-bundle ring buffers and a sharded global store."""

from __future__ import annotations

import struct
import threading
import zlib
from typing import Sequence

import numpy as np

from .rl import Transition
from .transport import (
    ERR_NOT_READY,
    Ack,
    Connection,
    ProtocolError,
    PutExp,
    RemoteError,
    SampleReq,
    SampleResp,
    StatsReq,
    StatsResp,
    TransportError,
)


class ReplayNotReady(RuntimeError):
    """Sampling was requested before the memory holds enough transitions."""


class LocalReplay:
    """Fixed-capacity FIFO ring of transitions with uniform sampling.

    One writer and one reader may use it concurrently; each operation is
    serialized by an internal lock.
    """

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("replay capacity must be positive")
        self.capacity = int(capacity)
        self._storage: list[Transition | None] = [None] * self.capacity
        self._cursor = 0
        self._size = 0
        self._inserted = 0
        self._lock = threading.Lock()

    def __len__(self):
        return self._size

    @property
    def inserted(self) -> int:
        return self._inserted

    @property
    def evicted(self) -> int:
        return self._inserted - self._size

    def insert(self, t: Transition) -> None:
        with self._lock:
            self._storage[self._cursor] = t
            self._cursor = (self._cursor + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
            self._inserted += 1

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition]:
        """``batch`` independent uniform draws with replacement."""
        with self._lock:
            if self._size == 0:
                raise ReplayNotReady("replay memory is empty")
            idx = rng.integers(0, self._size, size=batch)
            return [self._storage[self._physical(i)] for i in idx]

    def _physical(self, logical: int) -> int:
        # logical index 0 is the oldest live entry
        if self._size < self.capacity:
            return int(logical)
        return int((self._cursor + logical) % self.capacity)

    def get(self, logical: int) -> Transition:
        with self._lock:
            if not 0 <= logical < self._size:
                raise IndexError(logical)
            return self._storage[self._physical(logical)]

    def contents(self) -> list[Transition]:
        """Live transitions, oldest first."""
        with self._lock:
            return [self._storage[self._physical(i)] for i in range(self._size)]


def sample_minibatch(r: LocalReplay, batch: int, rng: np.random.Generator) -> list[Transition]:
    return r.sample(batch, rng)


def aggregate_capacity(buffers: Sequence[LocalReplay]) -> int:
    return sum(b.capacity for b in buffers)


def shard_for(actor_id: int, step: int, n_shards: int) -> int:
    key = struct.pack("<qq", int(actor_id), int(step))
    return zlib.crc32(key) % n_shards


class GlobalReplay:
    """Transitions spread over ``n_shards`` FIFO rings by a hash of (actor, step).

    Sampling picks a shard with probability proportional to its size and then
    an item uniformly within it, which is uniform over everything stored.
    """

    def __init__(self, n_shards: int, shard_capacity: int):
        if n_shards <= 0:
            raise ValueError("need at least one shard")
        self.shards = [LocalReplay(shard_capacity) for _ in range(n_shards)]
        self._sample_lock = threading.Lock()

    @property
    def n_shards(self) -> int:
        return len(self.shards)

    def __len__(self):
        return sum(len(s) for s in self.shards)

    @property
    def capacity(self) -> int:
        return aggregate_capacity(self.shards)

    def put(self, t: Transition) -> int:
        shard_id = shard_for(t.actor_id, t.step, self.n_shards)
        self.shards[shard_id].insert(t)
        return shard_id

    def insert(self, t: Transition) -> None:
        self.put(t)

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition]:
        with self._sample_lock:
            # shard sizes never shrink, so indices drawn against this snapshot
            # stay valid even if puts land in between
            sizes = np.array(self.sizes(), dtype=np.float64)
            total = sizes.sum()
            if total == 0:
                raise ReplayNotReady("global replay store is empty")
            shard_ids = rng.choice(len(sizes), size=batch, p=sizes / total)
            out = []
            for k in shard_ids:
                out.append(self.shards[k].get(int(rng.integers(int(sizes[k])))))
            return out

    def sizes(self) -> list[int]:
        return [len(s) for s in self.shards]

    def evicted(self) -> int:
        return sum(s.evicted for s in self.shards)


def global_put(store: GlobalReplay, t: Transition) -> int:
    return store.put(t)


def global_sample(store: GlobalReplay, batch: int, rng: np.random.Generator) -> list[Transition]:
    return store.sample(batch, rng)


class ReplayService:
    """Wire handler for a :class:`GlobalReplay` (PUT_EXP, SAMPLE_REQ, STATS_REQ).

    Sampling is refused with a not-ready error until ``warmup`` transitions
    are stored.
    """

    def __init__(self, store: GlobalReplay, seed: int | None = None, warmup: int = 1):
        self.store = store
        self.warmup = max(1, warmup)
        self._rng = np.random.default_rng(seed)
        self._puts = 0

    def handle(self, msg):
        if isinstance(msg, PutExp):
            self._puts += 1
            return Ack(0, self.store.put(msg.transition))
        if isinstance(msg, SampleReq):
            if len(self.store) < self.warmup:
                raise RemoteError(ERR_NOT_READY, f"{len(self.store)} of {self.warmup} transitions")
            return SampleResp(self.store.sample(msg.batch, self._rng))
        if isinstance(msg, StatsReq):
            return StatsResp({"sizes": self.store.sizes(), "total": len(self.store),
                              "puts": self._puts, "evicted": self.store.evicted()})
        raise ProtocolError(f"replay store cannot handle {msg.kind.name}")


class RemoteReplay:
    """Client side of :class:`ReplayService`; looks like a replay memory.

    ``rng`` arguments are accepted for interface parity but sampling
    randomness lives in the service.
    """

    def __init__(self, conn: Connection, reconnect=None, retries: int = 6):
        self.conn = conn
        self.reconnect = reconnect
        self.retries = retries

    def _call(self, msg):
        attempts = 0
        while True:
            try:
                return self.conn.request(msg)
            except RemoteError as exc:
                if exc.code == ERR_NOT_READY:
                    raise ReplayNotReady(exc.message) from None
                raise
            except TransportError:
                if self.reconnect is None or attempts >= self.retries:
                    raise
                attempts += 1
                self.conn = self.reconnect()

    def put(self, t: Transition) -> int:
        return self._call(PutExp(t)).value

    def insert(self, t: Transition) -> None:
        self.put(t)

    def sample(self, batch: int, rng=None) -> list[Transition]:
        return self._call(SampleReq(batch)).transitions

    def stats(self) -> dict:
        return self._call(StatsReq()).stats

"""Sharded asynchronous parameter server holding the master Q-network weights."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .nn import AdaGradState, ParamVector, adagrad_apply
from .transport import (
    ERR_UNAVAILABLE,
    Ack,
    Connection,
    GradPush,
    Message,
    ParamFetchReq,
    ParamFetchResp,
    ProtocolError,
    RemoteError,
    ShardSlice,
    StatsReq,
    StatsResp,
    TransportError,
)

log = logging.getLogger(__name__)

ACK_ACCEPTED = 0
ACK_STALE = 1


class PartialFetchError(RuntimeError):
    def __init__(self, missing: Iterable[int]):
        self.missing = sorted(missing)
        super().__init__(f"shards unavailable: {self.missing}")


@dataclass
class ApplyResult:
    accepted: bool
    version: int


@dataclass
class ServerStats:
    applied: int
    discarded_stale: int
    per_shard_apply_counts: list[int]
    version: int

    def as_dict(self) -> dict:
        return {
            "applied": self.applied,
            "discarded_stale": self.discarded_stale,
            "per_shard_apply_counts": list(self.per_shard_apply_counts),
            "version": self.version,
        }


@dataclass
class Shard:
    shard_id: int
    offset: int
    length: int
    values: np.ndarray
    adagrad: AdaGradState
    apply_count: int = 0
    available: bool = True
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


def shard_ranges(total: int, n_shards: int) -> list[tuple[int, int]]:
    """Contiguous equal blocks; the last shard takes the remainder.

    ``n_shards`` is clamped to ``total`` so no shard is empty.
    """
    if total <= 0:
        raise ValueError("nothing to shard")
    n = max(1, min(n_shards, total))
    size = total // n
    ranges = [(i * size, size) for i in range(n - 1)]
    ranges.append(((n - 1) * size, total - (n - 1) * size))
    return ranges


class ParameterServer:
    """Holds theta+ split disjointly over shards, each with its own AdaGrad state.

    ``max_delay=None`` disables the staleness filter.
    """

    def __init__(
        self,
        initial: ParamVector,
        n_shards: int = 31,
        lr: float = 0.05,
        eps: float = 1e-8,
        max_delay: int | None = 50,
        record_log: bool = False,
    ):
        if max_delay is not None and max_delay < 0:
            raise ValueError("max_delay must be >= 0")
        self.layout = initial.layout
        self.max_delay = max_delay
        self._theta = np.array(initial.values, dtype=np.float64, copy=True)
        self.shards = [
            Shard(i, off, n, self._theta[off:off + n], AdaGradState.zeros(n, lr, eps))
            for i, (off, n) in enumerate(shard_ranges(self.layout.total, n_shards))
        ]
        self._check_coverage()
        self._accept_lock = threading.Lock()
        self._version = 0
        self._applied = 0
        self._discarded = 0
        # (base_version, version_at_validation, accepted) in validation order
        self.accept_log: list[tuple[int, int, bool]] | None = [] if record_log else None

    def _check_coverage(self):
        pos = 0
        for shard in self.shards:
            if shard.offset != pos or shard.length <= 0:
                raise ValueError("shards must be contiguous, disjoint and non-empty")
            pos += shard.length
        if pos != self.layout.total:
            raise ValueError("shards do not cover the parameter vector")

    @property
    def n_shards(self) -> int:
        return len(self.shards)

    @property
    def version(self) -> int:
        return self._version

    def shard_map(self) -> list[tuple[int, int, int]]:
        return [(s.shard_id, s.offset, s.length) for s in self.shards]

    def set_available(self, shard_id: int, available: bool) -> None:
        self.shards[shard_id].available = available

    def _validate(self, slices) -> list[tuple[Shard, np.ndarray]]:
        items = slices.items() if isinstance(slices, Mapping) else slices
        seen = set()
        out = []
        for shard_id, data in items:
            if not 0 <= shard_id < len(self.shards):
                raise ProtocolError(f"unknown shard {shard_id}")
            if shard_id in seen:
                raise ProtocolError(f"shard {shard_id} appears twice")
            seen.add(shard_id)
            shard = self.shards[shard_id]
            data = np.asarray(data, dtype=np.float64)
            if data.shape != (shard.length,):
                raise ProtocolError(
                    f"shard {shard_id} expects {shard.length} values, got {data.shape}"
                )
            out.append((shard, data))
        missing = [s.shard_id for s, _ in out if not s.available]
        if missing:
            raise PartialFetchError(missing)
        return out

    def apply_gradient(self, base_version: int, slices) -> ApplyResult:
        """Validate, run the staleness filter, then apply every slice with AdaGrad.

        ``slices`` maps shard id to that shard's gradient block.
        """
        checked = self._validate(slices)
        with self._accept_lock:
            current = self._version
            if self.max_delay is not None and current - base_version > self.max_delay:
                self._discarded += 1
                if self.accept_log is not None:
                    self.accept_log.append((base_version, current, False))
                return ApplyResult(False, current)
            self._version += 1
            self._applied += 1
            new_version = self._version
            if self.accept_log is not None:
                self.accept_log.append((base_version, current, True))
        for shard, grad in checked:
            with shard.lock:
                adagrad_apply(shard.values, grad, shard.adagrad)
                shard.apply_count += 1
        return ApplyResult(True, new_version)

    def split(self, grad: np.ndarray) -> list[tuple[int, np.ndarray]]:
        return [(s.shard_id, grad[s.offset:s.offset + s.length]) for s in self.shards]

    def fetch(self, shards: Iterable[int] | None = None) -> tuple[list[ShardSlice], int]:
        wanted = range(len(self.shards)) if shards is None else sorted(set(shards))
        missing = [i for i in wanted if not 0 <= i < len(self.shards) or not self.shards[i].available]
        if missing:
            raise PartialFetchError(missing)
        out = []
        for i in wanted:
            shard = self.shards[i]
            with shard.lock:
                out.append(ShardSlice(shard.shard_id, shard.offset, shard.values.copy()))
        return out, self._version

    def snapshot(self) -> tuple[ParamVector, int]:
        slices, version = self.fetch()
        values = np.concatenate([s.data for s in slices])
        return ParamVector(values, self.layout), version

    def adagrad_accumulators(self) -> np.ndarray:
        parts = []
        for shard in self.shards:
            with shard.lock:
                parts.append(shard.adagrad.accumulators.copy())
        return np.concatenate(parts)

    def stats(self) -> ServerStats:
        with self._accept_lock:
            return ServerStats(
                applied=self._applied,
                discarded_stale=self._discarded,
                per_shard_apply_counts=[s.apply_count for s in self.shards],
                version=self._version,
            )

    def handle(self, msg: Message) -> Message:
        """Wire-level dispatch for GRAD_PUSH, PARAM_FETCH_REQ and STATS_REQ."""
        try:
            if isinstance(msg, GradPush):
                result = self.apply_gradient(msg.base_version, msg.slices)
                return Ack(ACK_ACCEPTED if result.accepted else ACK_STALE, result.version)
            if isinstance(msg, ParamFetchReq):
                slices, version = self.fetch(msg.shards)
                return ParamFetchResp(version, slices)
            if isinstance(msg, StatsReq):
                return StatsResp(self.stats().as_dict())
        except PartialFetchError as exc:
            raise RemoteError(ERR_UNAVAILABLE, ",".join(map(str, exc.missing))) from None
        raise ProtocolError(f"parameter server cannot handle {msg.kind.name}")


class ServerClient:
    """Typed parameter-server calls over a :class:`Connection`.

    The shard map is learned from the first full fetch and used to split
    flat gradients into per-shard slices.
    """

    def __init__(
        self,
        conn: Connection,
        reconnect: Callable[[], Connection] | None = None,
        retries: int = 6,
    ):
        self.conn = conn
        self.reconnect = reconnect
        self.retries = retries
        self.shard_map: list[tuple[int, int, int]] | None = None
        self.total: int | None = None
        self.fetch_count = 0
        self.push_count = 0

    def _call(self, msg: Message) -> Message:
        attempts = 0
        while True:
            try:
                return self.conn.request(msg)
            except RemoteError as exc:
                if exc.code == ERR_UNAVAILABLE:
                    raise PartialFetchError(int(x) for x in exc.message.split(",") if x) from None
                raise
            except TransportError:
                if self.reconnect is None or attempts >= self.retries:
                    raise
                attempts += 1
                log.warning("parameter server connection lost, reconnecting (%d)", attempts)
                self.conn = self.reconnect()

    def fetch(self) -> tuple[np.ndarray, int]:
        """Full parameter vector and the server version at response time."""
        self.fetch_count += 1
        resp = self._call(ParamFetchReq(None))
        if self.shard_map is None:
            self.shard_map = [(s.shard_id, s.offset, s.data.shape[0]) for s in resp.slices]
            self.total = sum(n for _, _, n in self.shard_map)
        flat = np.empty(self.total, dtype=np.float64)
        for sl in resp.slices:
            flat[sl.offset:sl.offset + sl.data.shape[0]] = sl.data
        return flat, resp.version

    def fetch_shards(self, shards: Iterable[int]) -> tuple[list[ShardSlice], int]:
        self.fetch_count += 1
        resp = self._call(ParamFetchReq(frozenset(shards)))
        return resp.slices, resp.version

    def push(self, base_version: int, grad: np.ndarray) -> ApplyResult:
        if self.shard_map is None:
            self.fetch()
        grad = np.asarray(grad, dtype=np.float64)
        slices = [(sid, grad[off:off + n]) for sid, off, n in self.shard_map]
        self.push_count += 1
        ack = self._call(GradPush(base_version, slices))
        return ApplyResult(ack.code == ACK_ACCEPTED, ack.value)

    def stats(self) -> dict:
        return self._call(StatsReq()).stats

    def version(self) -> int:
        return int(self.stats()["version"])

    def close(self) -> None:
        self.conn.close()

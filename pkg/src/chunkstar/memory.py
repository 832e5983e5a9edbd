"""Device pools, chunk fetch/eviction, and eviction-optimality oracles.

The manager tracks byte-level usage of a CPU pool and a GPU pool:
resident chunk copies, dedicated model allocations (the embedding),
transient staging buffers, and the moment's non-chunk footprint
(activations and runtime context, GPU only).  Chunks move between the
two tiers; a fetch copies the payload (the source copy stays valid) and
a write invalidates every other copy, so eviction of a chunk that still
has a twin on the other tier is free.

Eviction strategies: LIST_ORDER walks ascending chunk ids (used while
profiling), LATEST_NEXT_USE picks the resident chunk whose next recorded
access lies furthest in the future (optimal for uniform-size read-only
caching), and ORACLE is an exhaustive-search reference usable only on
tiny instances — the live manager refuses it.
"""

import bisect
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from .chunks import Chunk, Movability, chunk_movability
from .model import CPU, GPU

ChunkId = Union[int, str]  # str for non-chunk rows (the embedding) in ledgers

OTHER_TIER = {CPU: GPU, GPU: CPU}


class EvictionStrategy(str, Enum):
    LIST_ORDER = "list_order"
    LATEST_NEXT_USE = "latest_next_use"
    ORACLE = "oracle"


class OOMError(RuntimeError):
    def __init__(self, device: str, moment: int, needed: int, available: int):
        super().__init__("out of memory on %s at moment %d: need %d bytes, %d free"
                         % (device, moment, needed, available))
        self.device = device
        self.moment = moment
        self.needed = needed
        self.available = available


class InstanceTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class TransferEvent:
    moment: int
    chunk_id: ChunkId
    src: Optional[str]
    dst: Optional[str]
    bytes: int
    reason: str  # fetch | evict | adam_copy | collective


@dataclass
class DevicePool:
    device: str
    capacity_bytes: int
    chunk_bytes: int = 0          # resident chunk copies
    extra_model_bytes: int = 0    # dedicated allocations (embedding)
    temp_bytes: int = 0           # staging buffers, charged transiently
    non_model_bytes: int = 0      # activations + context, set per moment
    peak_bytes: int = 0
    window_peak_bytes: int = 0

    @property
    def used_bytes(self) -> int:
        return (self.chunk_bytes + self.extra_model_bytes
                + self.temp_bytes + self.non_model_bytes)

    @property
    def free_bytes(self) -> int:
        return self.capacity_bytes - self.used_bytes

    def touch(self) -> None:
        used = self.used_bytes
        if used > self.peak_bytes:
            self.peak_bytes = used
        if used > self.window_peak_bytes:
            self.window_peak_bytes = used

    def reset_window(self) -> int:
        """Return the peak usage since the previous reset and restart it."""
        peak = self.window_peak_bytes
        self.window_peak_bytes = self.used_bytes
        return peak


def victim_sort_key(next_use: Optional[int], ident: int) -> Tuple[int, int, int]:
    """Shared eviction ordering: never-used-again first (lowest id), then
    latest next use, ties broken by lowest id."""
    if next_use is None:
        return (0, 0, ident)
    return (1, -next_use, ident)


class MemoryManager:
    """Owns all chunk residency mutations and the transfer ledger."""

    def __init__(self, pools: Dict[str, DevicePool],
                 strategy: EvictionStrategy = EvictionStrategy.LIST_ORDER):
        if strategy is EvictionStrategy.ORACLE:
            raise ValueError("the oracle strategy is an offline reference; "
                             "use oracle_min_transfers instead")
        self.pools = pools
        self.strategy = strategy
        self.chunks: Dict[int, Chunk] = {}
        self.transfers: List[TransferEvent] = []
        self.cpu_to_gpu_bytes = 0
        self.gpu_to_cpu_bytes = 0
        self.pins: Dict[int, str] = {}
        self.recording = False
        self.access_moments: Dict[Tuple[str, int], List[int]] = {}

    # -- registration ------------------------------------------------------

    def register_chunks(self, chunks: Iterable[Chunk]) -> None:
        for chunk in chunks:
            self.chunks[chunk.chunk_id] = chunk
            for dev in chunk.copies:
                self.pools[dev].chunk_bytes += chunk.bytes
        for pool in self.pools.values():
            pool.touch()

    def add_extra_model_bytes(self, device: str, nbytes: int) -> None:
        pool = self.pools[device]
        pool.extra_model_bytes += nbytes
        pool.touch()

    # -- copy bookkeeping ---------------------------------------------------

    def _add_copy(self, chunk: Chunk, device: str) -> None:
        if not chunk.is_resident_on(device):
            chunk.add_copy(device)
            pool = self.pools[device]
            pool.chunk_bytes += chunk.bytes
            pool.touch()

    def _drop_copy(self, chunk: Chunk, device: str) -> None:
        if chunk.is_resident_on(device):
            chunk.drop_copy(device)
            self.pools[device].chunk_bytes -= chunk.bytes

    def note_write(self, chunk: Chunk, device: str) -> None:
        """Payload written on `device`: every other copy becomes stale."""
        for dev in list(chunk.copies):
            if dev != device:
                self._drop_copy(chunk, dev)
        self._add_copy(chunk, device)

    def release_chunk(self, chunk: Chunk) -> None:
        for dev in list(chunk.copies):
            self._drop_copy(chunk, dev)

    # -- pins (collective protocol) ----------------------------------------

    def pin(self, chunk: Chunk, device: str) -> None:
        self.pins[chunk.chunk_id] = device

    def unpin(self, chunk: Chunk) -> None:
        self.pins.pop(chunk.chunk_id, None)

    def pinned_bytes(self, device: str) -> int:
        return sum(self.chunks[cid].bytes for cid, dev in self.pins.items()
                   if dev == device)

    # -- access recording / next use ----------------------------------------

    def record_access(self, chunk: Chunk, device: str, moment: int) -> None:
        if self.recording:
            self.access_moments.setdefault((device, chunk.chunk_id), []).append(moment)

    def next_use(self, chunk_id: int, moment: int, device: str) -> Optional[int]:
        """Smallest recorded access moment strictly after `moment`."""
        moments = self.access_moments.get((device, chunk_id))
        if not moments:
            return None
        i = bisect.bisect_right(moments, moment)
        return moments[i] if i < len(moments) else None

    # -- transfers ----------------------------------------------------------

    def _record_transfer(self, moment: int, chunk_id: ChunkId, src: str, dst: str,
                         nbytes: int, reason: str) -> TransferEvent:
        ev = TransferEvent(moment, chunk_id, src, dst, nbytes, reason)
        self.transfers.append(ev)
        if src == CPU and dst == GPU:
            self.cpu_to_gpu_bytes += nbytes
        elif src == GPU and dst == CPU:
            self.gpu_to_cpu_bytes += nbytes
        return ev

    def record_extra_transfer(self, moment: int, chunk_id: ChunkId, src: str,
                              dst: str, nbytes: int, reason: str = "fetch") -> TransferEvent:
        """Ledger a non-chunk payload move (embedding weights/activations)."""
        return self._record_transfer(moment, chunk_id, src, dst, nbytes, reason)

    # -- fetch / evict ------------------------------------------------------

    def fetch_chunk(self, chunk: Chunk, device: str, moment: int,
                    reason: str = "fetch") -> List[TransferEvent]:
        """Bring a valid copy of `chunk` onto `device` (no-op if present)."""
        if chunk.is_resident_on(device):
            return []
        src = chunk.resident_device
        if src is None:
            raise RuntimeError("chunk %d has no valid copy to fetch from"
                               % chunk.chunk_id)
        events = self.ensure_free(chunk.bytes, device, moment,
                                  exclude={chunk.chunk_id})
        self._add_copy(chunk, device)
        events.append(self._record_transfer(moment, chunk.chunk_id, src, device,
                                            chunk.bytes, reason))
        return events

    def place_payload(self, chunk: Chunk, device: str, moment: int) -> List[TransferEvent]:
        """Make room and mark a payload that materializes on `device`
        without a tiered transfer (collective arrival, local copy-back)."""
        if chunk.is_resident_on(device):
            return []
        events = self.ensure_free(chunk.bytes, device, moment,
                                  exclude={chunk.chunk_id})
        self._add_copy(chunk, device)
        return events

    def charge_temp(self, device: str, nbytes: int, moment: int) -> List[TransferEvent]:
        events = self.ensure_free(nbytes, device, moment)
        pool = self.pools[device]
        pool.temp_bytes += nbytes
        pool.touch()
        return events

    def release_temp(self, device: str, nbytes: int) -> None:
        pool = self.pools[device]
        pool.temp_bytes -= nbytes
        if pool.temp_bytes < 0:
            raise AssertionError("temp byte accounting went negative on %s" % device)

    def set_non_model(self, device: str, nbytes: int, moment: int) -> List[TransferEvent]:
        pool = self.pools[device]
        pool.non_model_bytes = nbytes
        pool.touch()
        return self.ensure_free(0, device, moment)

    # -- eviction core ------------------------------------------------------

    def _candidates(self, device: str, exclude: Set[int]) -> List[Chunk]:
        out = []
        for chunk in self.chunks.values():
            if chunk.chunk_id in exclude or not chunk.is_resident_on(device):
                continue
            if self.pins.get(chunk.chunk_id) == device:
                continue
            if chunk_movability(chunk) is Movability.PINNED:
                continue
            out.append(chunk)
        return out

    def select_victim(self, candidates: Sequence[Chunk], device: str,
                      moment: int) -> Chunk:
        releasable = [c for c in candidates
                      if chunk_movability(c) is Movability.RELEASABLE]
        if releasable:
            return min(releasable, key=lambda c: c.chunk_id)
        if self.strategy is EvictionStrategy.LIST_ORDER:
            return min(candidates, key=lambda c: c.chunk_id)
        return min(candidates, key=lambda c: victim_sort_key(
            self.next_use(c.chunk_id, moment, device), c.chunk_id))

    def _evict_one(self, chunk: Chunk, device: str, moment: int) -> Optional[TransferEvent]:
        if chunk_movability(chunk) is Movability.RELEASABLE:
            self.release_chunk(chunk)
            return None
        if not chunk.dirty:
            self._drop_copy(chunk, device)  # twin copy elsewhere: free eviction
            return None
        target = OTHER_TIER[device]
        pool = self.pools[target]
        if pool.free_bytes < chunk.bytes:
            # Only free drops on the target tier; anything deeper is an OOM.
            for cand in sorted(self._candidates(target, {chunk.chunk_id}),
                               key=lambda c: c.chunk_id):
                if pool.free_bytes >= chunk.bytes:
                    break
                if chunk_movability(cand) is Movability.RELEASABLE:
                    self.release_chunk(cand)
                elif not cand.dirty:
                    self._drop_copy(cand, target)
            if pool.free_bytes < chunk.bytes:
                raise OOMError(target, moment, chunk.bytes, pool.free_bytes)
        self._drop_copy(chunk, device)
        self._add_copy(chunk, target)
        return self._record_transfer(moment, chunk.chunk_id, device, target,
                                     chunk.bytes, "evict")

    def ensure_free(self, needed: int, device: str, moment: int,
                    exclude: Optional[Set[int]] = None) -> List[TransferEvent]:
        pool = self.pools[device]
        exclude = exclude or set()
        events: List[TransferEvent] = []
        while pool.free_bytes < needed:
            candidates = self._candidates(device, exclude)
            if not candidates:
                raise OOMError(device, moment, needed, pool.free_bytes)
            victim = self.select_victim(candidates, device, moment)
            ev = self._evict_one(victim, device, moment)
            if ev is not None:
                events.append(ev)
        return events

    def enforce_soft_limit(self, device: str, limit_bytes: int, moment: int) -> None:
        """Best-effort: evict in list order until under the limit; never errors.

        Physical capacity remains the only hard bound — a warm-up whose
        non-evictable usage exceeds the soft limit simply proceeds.
        """
        pool = self.pools[device]
        while pool.used_bytes > limit_bytes:
            candidates = self._candidates(device, set())
            if not candidates:
                return
            victim = min(candidates, key=lambda c: c.chunk_id)
            self._evict_one(victim, device, moment)


# -- offline eviction references ------------------------------------------


def oracle_min_transfers(access_sequence: Sequence[int], capacity_in_chunks: int,
                         max_chunks: int = 6, max_accesses: int = 12) -> int:
    """Minimum fetch count over all eviction decision trees (exhaustive).

    Read-only, uniform-size accesses; intended for tiny instances only.
    """
    if capacity_in_chunks < 1:
        raise ValueError("capacity must be >= 1")
    distinct = len(set(access_sequence))
    if distinct > max_chunks or len(access_sequence) > max_accesses:
        raise InstanceTooLargeError(
            "oracle limited to %d chunks / %d accesses" % (max_chunks, max_accesses))
    seq = tuple(access_sequence)

    @lru_cache(maxsize=None)
    def best(pos: int, cache: frozenset) -> int:
        if pos == len(seq):
            return 0
        x = seq[pos]
        if x in cache:
            return best(pos + 1, cache)
        if len(cache) < capacity_in_chunks:
            return 1 + best(pos + 1, cache | {x})
        return 1 + min(best(pos + 1, (cache - {v}) | {x}) for v in cache)

    result = best(0, frozenset())
    best.cache_clear()
    return result


def simulate_cache_fetches(access_sequence: Sequence[int], capacity_in_chunks: int,
                           strategy: EvictionStrategy) -> int:
    """Standalone uniform-size cache simulation with the manager's victim
    ordering, used to check greedy eviction against the oracle."""
    if capacity_in_chunks < 1:
        raise ValueError("capacity must be >= 1")
    seq = list(access_sequence)
    cache: Set[int] = set()
    fetches = 0
    for pos, x in enumerate(seq):
        if x in cache:
            continue
        fetches += 1
        if len(cache) >= capacity_in_chunks:
            if strategy is EvictionStrategy.LIST_ORDER:
                victim = min(cache)
            else:
                def nxt(c: int) -> Optional[int]:
                    for j in range(pos + 1, len(seq)):
                        if seq[j] == c:
                            return j
                    return None
                victim = min(cache, key=lambda c: victim_sort_key(nxt(c), c))
            cache.discard(victim)
        cache.add(x)
    return fetches

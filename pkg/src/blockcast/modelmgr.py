"""Tiered model residency: device memory, host memory, local SSD.

Tracks which blocks of which model live where on every node, classifies
scale-out targets as hot/warm/cold, picks multicast sources by tier, applies
LRU plus keep-alive eviction, and lays out contiguous per-block device
memory regions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import CapacityError, InvalidArgumentError, UnsatisfiableScalingError
from .multicast import BlockPlan

GPU = "gpu"
MEMORY = "memory"
SSD = "ssd"

HOT = "hot"
WARM = "warm"
COLD = "cold"


@dataclass
class TierState:
    """Residency of one model on one node, per tier."""

    node: int
    model_id: str
    gpu_blocks: set[int] = field(default_factory=set)
    mem_blocks: set[int] = field(default_factory=set)
    ssd: bool = False
    last_use_s: float = 0.0
    pinned: bool = False      # mid-multicast source; immune to eviction


@dataclass(frozen=True)
class EvictionRecord:
    node: int
    model_id: str
    tier: str


@dataclass(frozen=True)
class TierCapacity:
    gpu_models: int | None = None      # None = unbounded
    memory_models: int | None = None


@dataclass
class StartupPlan:
    classes: dict[int, str]            # demand node -> hot|warm|cold
    sources: list[int]
    bootstrap_node: int | None = None  # source that must load from SSD first


class TierMap:
    """All TierState records for a cluster, keyed by (node, model)."""

    def __init__(self):
        self._states: dict[tuple[int, str], TierState] = {}

    def get(self, node: int, model_id: str) -> TierState | None:
        return self._states.get((node, model_id))

    def ensure(self, node: int, model_id: str) -> TierState:
        st = self._states.get((node, model_id))
        if st is None:
            st = TierState(node, model_id)
            self._states[(node, model_id)] = st
        return st

    def states(self) -> list[TierState]:
        return [self._states[k] for k in sorted(self._states)]

    def full_nodes(self, model_id: str, tier: str, block_count: int) -> list[int]:
        """Nodes holding every block of the model in the given tier."""
        want = block_count
        out = []
        for (node, mid), st in sorted(self._states.items()):
            if mid != model_id:
                continue
            if tier == GPU and len(st.gpu_blocks) >= want:
                out.append(node)
            elif tier == MEMORY and len(st.mem_blocks) >= want:
                out.append(node)
            elif tier == SSD and st.ssd:
                out.append(node)
        return out

    def to_lines(self) -> list[str]:
        """One line per (node, model, tier): node,model,tier,blocks_resident,last_use_s."""
        out = []
        for st in self.states():
            rows = []
            if st.gpu_blocks:
                rows.append((GPU, len(st.gpu_blocks)))
            if st.mem_blocks:
                rows.append((MEMORY, len(st.mem_blocks)))
            if st.ssd:
                rows.append((SSD, -1))
            for tier, blocks in rows:
                out.append(f"{st.node},{st.model_id},{tier},{blocks},{st.last_use_s:.6f}")
        return out


def startup_plan(model_id: str, block_count: int, demand_nodes: list[int],
                 tiers: TierMap, k_max: int = 1) -> StartupPlan:
    """Classify demand nodes and choose multicast sources.

    hot: full model already on the node's devices.  warm: full copy in host
    memory, loadable locally.  cold: nothing local, fed over the network.
    Sources prefer device-resident copies, then host-memory copies, up to
    k_max; with neither anywhere, a single SSD copy bootstraps the spread.
    """
    if k_max < 1:
        raise InvalidArgumentError("k_max must be >= 1")
    classes: dict[int, str] = {}
    for n in demand_nodes:
        st = tiers.get(n, model_id)
        if st is not None and len(st.gpu_blocks) >= block_count:
            classes[n] = HOT
        elif st is not None and len(st.mem_blocks) >= block_count:
            classes[n] = WARM
        else:
            classes[n] = COLD
    gpu_nodes = tiers.full_nodes(model_id, GPU, block_count)
    mem_nodes = [n for n in tiers.full_nodes(model_id, MEMORY, block_count)
                 if n not in gpu_nodes]
    sources = (gpu_nodes + mem_nodes)[:k_max]
    bootstrap = None
    if not sources:
        ssd_nodes = tiers.full_nodes(model_id, SSD, block_count)
        if not ssd_nodes:
            raise UnsatisfiableScalingError(
                f"no copy of model {model_id} exists on any node in any tier")
        bootstrap = ssd_nodes[0]
        sources = [bootstrap]
    return StartupPlan(classes, sources, bootstrap)


def evict(tiers: TierMap, now_s: float, keep_alive_s: float,
          capacity: TierCapacity) -> list[EvictionRecord]:
    """Expire idle device copies and squeeze tiers back under capacity.

    Device-tier copies idle for at least keep_alive_s are released.  Then,
    per node and tier, least recently used models are dropped until the
    model count fits the tier capacity.  Pinned entries (active multicast
    sources) are never touched; SSD copies persist.
    """
    out: list[EvictionRecord] = []
    for st in tiers.states():
        if st.pinned:
            continue
        if st.gpu_blocks and now_s - st.last_use_s >= keep_alive_s:
            st.gpu_blocks.clear()
            out.append(EvictionRecord(st.node, st.model_id, GPU))
    by_node: dict[int, list[TierState]] = {}
    for st in tiers.states():
        by_node.setdefault(st.node, []).append(st)
    for node in sorted(by_node):
        for tier, cap in ((GPU, capacity.gpu_models), (MEMORY, capacity.memory_models)):
            if cap is None:
                continue
            resident = [st for st in by_node[node]
                        if (st.gpu_blocks if tier == GPU else st.mem_blocks)]
            resident.sort(key=lambda st: (st.last_use_s, st.model_id))
            excess = len(resident) - cap
            for st in resident:
                if excess <= 0:
                    break
                if st.pinned:
                    continue
                (st.gpu_blocks if tier == GPU else st.mem_blocks).clear()
                out.append(EvictionRecord(st.node, st.model_id, tier))
                excess -= 1
    return out


@dataclass(frozen=True)
class ReplayConfig:
    memory_capacity_models: int = 3
    keep_alive_s: float = 15.0


def miss_ratio(accesses: list[tuple[float, str]], config: ReplayConfig) -> dict[str, float]:
    """Replay one node's request stream and report start-class fractions.

    Each access is (arrival_s, model_id).  A model served within the last
    keep_alive_s is hot; otherwise it loads from host memory if the LRU
    cache (memory_capacity_models slots) still holds it, else from SSD.
    SSD loads insert into the memory cache, evicting the LRU model.
    """
    if config.memory_capacity_models < 1:
        raise InvalidArgumentError("memory_capacity_models must be >= 1")
    counts = {HOT: 0, MEMORY: 0, SSD: 0}
    live: dict[str, float] = {}              # model -> last served time
    lru: dict[str, float] = {}               # model -> last touch; insertion-ordered
    prev_t = None
    for t, model in accesses:
        if prev_t is not None and t < prev_t:
            raise InvalidArgumentError("accesses must be time-ordered")
        prev_t = t
        for m in [m for m, at in live.items() if t - at >= config.keep_alive_s]:
            del live[m]
        if model in live:
            counts[HOT] += 1
        elif model in lru:
            counts[MEMORY] += 1
        else:
            counts[SSD] += 1
            if len(lru) >= config.memory_capacity_models:
                victim = min(lru, key=lambda m: (lru[m], m))
                del lru[victim]
        live[model] = t
        lru[model] = t
    total = max(1, len(accesses))
    return {k: v / total for k, v in counts.items()}


@dataclass(frozen=True)
class Region:
    block_id: int
    offset: int
    length: int


@dataclass
class MemoryLayout:
    regions: tuple[Region, ...]
    activation_buffer_bytes: int
    staging_buffer_bytes: int
    total_bytes: int


def pack_layout(plan: BlockPlan, working_set_bytes: int,
                capacity_bytes: int | None = None) -> MemoryLayout:
    """Contiguous per-block regions plus pre-sized working buffers.

    Blocks are packed back to back in block order so a whole block lands
    with one copy; the staging buffer holds one in-flight block.  Raises
    CapacityError naming the deficit when the device cannot fit it all.
    """
    if working_set_bytes < 0:
        raise InvalidArgumentError("working_set_bytes must be >= 0")
    regions = []
    offset = 0
    for blk in plan.blocks:
        regions.append(Region(blk.block_id, offset, blk.size_bytes))
        offset += blk.size_bytes
    staging = max(blk.size_bytes for blk in plan.blocks)
    total = offset + working_set_bytes + staging
    if capacity_bytes is not None and total > capacity_bytes:
        raise CapacityError(
            f"layout needs {total} bytes, device offers {capacity_bytes} "
            f"(deficit {total - capacity_bytes})")
    return MemoryLayout(tuple(regions), working_set_bytes, staging, total)

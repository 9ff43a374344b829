"""Execution pipelines over partially loaded nodes.

Turns multicast sub-groups into pipelined serving units: nodes that so far
hold only a slice of the model serve together, each stage executing its
resident block range, so serving starts well before any single node is
fully loaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InvalidArgumentError, UnsupportedConfigurationError
from .multicast import ModelSpec, MulticastSchedule, SubGroup

CROSS_NODE_SINGLE_GPU = "cross_node_single_gpu"
CROSS_NODE_MULTI_GPU = "cross_node_multi_gpu"
INTRA_NODE_REPLICATE = "intra_node_replicate"


@dataclass(frozen=True)
class Stage:
    node: int
    device: int
    block_lo: int
    block_hi: int      # inclusive
    group_id: int = -1

    @property
    def block_count(self) -> int:
        return self.block_hi - self.block_lo + 1


@dataclass
class ExecutionPipeline:
    pipeline_id: int
    stages: tuple[Stage, ...]
    activation_step: int = -1     # 0-indexed multicast step after which all stages are loaded
    mode: str = "pipeline"        # pipeline | local
    warnings: list[str] = field(default_factory=list)

    @property
    def capacity(self) -> int:
        """Concurrent in-flight batches the cyclic schedule admits."""
        return len(self.stages)

    @property
    def nodes(self) -> tuple[int, ...]:
        return tuple(s.node for s in self.stages)


@dataclass(frozen=True)
class ModeSwitchAssignment:
    request_id: str
    node: int
    recompute_cost_s: float


@dataclass
class ModeSwitchPlan:
    assignments: tuple[ModeSwitchAssignment, ...]
    mode: str = "local"


def completion_ordered_groups(groups: list[SubGroup],
                              schedule: MulticastSchedule) -> list[SubGroup]:
    """Reorder each group's receivers by first-chunk completion, ties by node id.

    The first chunk is the leading ceil(b/k) blocks of the group's transfer
    order; its completion step is read off the schedule.
    """
    arrivals = schedule.arrival_steps()
    k = max(1, len(groups))
    out = []
    for g in groups:
        b = len(g.transfer_order)
        l = math.ceil(b / k)
        chunk = g.transfer_order[:l]

        def done_at(node: int) -> int:
            have = arrivals.get(node, {})
            if not all(blk in have for blk in chunk):
                return schedule.step_count  # never completed inside the schedule
            return max(have[blk] for blk in chunk)

        ordered = sorted(g.receivers, key=lambda n: (done_at(n), n))
        out.append(SubGroup(g.group_id, (g.source, *ordered), g.transfer_order))
    return out


def generate_pipelines(groups: list[SubGroup]) -> list[list[tuple[int, int]]]:
    """Assign every receiver to exactly one pipeline.

    While several groups still have unassigned receivers, take a = the
    smallest remaining count and form a pipelines, the t-th holding receiver
    t of each group.  A single remaining group contributes its receivers, in
    order, as one pipeline.  Entries are (node, group_id) pairs.
    """
    if not groups:
        raise InvalidArgumentError("no sub-groups given")
    remaining = [[(n, g.group_id) for n in g.receivers] for g in groups]
    remaining = [r for r in remaining if r]
    pipelines: list[list[tuple[int, int]]] = []
    while remaining:
        if len(remaining) == 1:
            pipelines.append(remaining[0])
            break
        a = min(len(r) for r in remaining)
        for t in range(a):
            pipelines.append([r[t] for r in remaining])
        remaining = [r[a:] for r in remaining if len(r) > a]
    return pipelines


def _balanced_ranges(block_count: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous near-even [lo, hi] ranges covering all blocks."""
    base, extra = divmod(block_count, parts)
    out = []
    lo = 0
    for i in range(parts):
        span = base + (1 if i < extra else 0)
        out.append((lo, lo + span - 1))
        lo += span
    return out


def assign_blocks_to_stages(stage_nodes: list[tuple[int, int]],
                            orders: list[tuple[int, ...]],
                            block_count: int,
                            schedule: MulticastSchedule | None = None,
                            pipeline_id: int = 0,
                            devices: dict[int, int] | None = None) -> ExecutionPipeline:
    """Give each stage its block range and compute the activation step.

    Cross-group stages take the leading ceil(b/k) blocks of their group's
    transfer order (each group's first chunk); single-group pipelines split
    all blocks contiguously and near-evenly across their stages.  Stages are
    ordered by block range so execution runs in model order.  The activation
    step is the earliest schedule step by which every stage holds its range.
    """
    if not stage_nodes:
        raise InvalidArgumentError("pipeline needs at least one stage")
    b = block_count
    k = len(orders)
    l = math.ceil(b / k)
    warnings: list[str] = []
    group_ids = [gid for _, gid in stage_nodes]
    devices = devices or {}
    single_group = len(set(group_ids)) == 1

    raw: list[Stage] = []
    if single_group:
        for (node, gid), (lo, hi) in zip(stage_nodes, _balanced_ranges(b, len(stage_nodes))):
            raw.append(Stage(node, devices.get(node, 0), lo, hi, gid))
    else:
        if len(set(group_ids)) != len(group_ids):
            raise InvalidArgumentError("cross-group stages must come from distinct sub-groups")
        last_nonempty = None
        for node, gid in stage_nodes:
            if gid < 0 or gid >= k:
                raise InvalidArgumentError(f"stage group id {gid} out of range for k={k}")
            lo, hi = l * gid, min(l * (gid + 1), b) - 1
            if lo > hi:
                # chunk past the block range (k > b): cover with the last real chunk
                lo, hi = last_nonempty
                warnings.append(
                    f"stage on node {node} (group {gid}) has an empty chunk; "
                    f"overlapping blocks [{lo}, {hi}]")
            else:
                last_nonempty = (lo, hi)
            raw.append(Stage(node, devices.get(node, 0), lo, hi, gid))
    raw.sort(key=lambda st: (st.block_lo, st.block_hi, st.node))

    activation = -1
    if schedule is not None:
        arrivals = schedule.arrival_steps()
        for st in raw:
            have = arrivals.get(st.node, {})
            for blk in range(st.block_lo, st.block_hi + 1):
                at = have.get(blk)
                if at is None:
                    raise InvalidArgumentError(
                        f"schedule never delivers block {blk} to node {st.node}")
                activation = max(activation, at)
    return ExecutionPipeline(pipeline_id, tuple(raw), activation, "pipeline", warnings)


@dataclass
class ActivityTable:
    """Cyclic per-tick stage occupancy for a pipeline."""

    stage_count: int
    batch_count: int
    ticks: list[list[int | None]]       # ticks[t][stage] -> batch id or None
    waiting: list[list[int]]            # per tick, batches not on any stage

    def utilization(self, tick: int) -> float:
        busy = sum(1 for x in self.ticks[tick] if x is not None)
        return busy / self.stage_count


def plan_2d_schedule(stage_count: int, batch_count: int,
                     n_ticks: int | None = None) -> ActivityTable:
    """Cyclic stage walk: batch j enters stage 0 at tick j and wraps around.

    At most stage_count batches circulate; extras wait.  Every batch appears
    exactly once per tick, on a stage or waiting.
    """
    if stage_count < 1:
        raise InvalidArgumentError("stage_count must be >= 1")
    if batch_count < 0:
        raise InvalidArgumentError("batch_count must be >= 0")
    if n_ticks is None:
        n_ticks = 3 * stage_count
    admitted = min(batch_count, stage_count)
    ticks: list[list[int | None]] = []
    waiting: list[list[int]] = []
    for t in range(n_ticks):
        row: list[int | None] = [None] * stage_count
        out: list[int] = []
        for j in range(batch_count):
            if j < admitted and t >= j:
                row[(t - j) % stage_count] = j
            else:
                out.append(j)
        ticks.append(row)
        waiting.append(out)
    return ActivityTable(stage_count, batch_count, ticks, waiting)


def select_multi_gpu_strategy(model: ModelSpec, node_gpus: int,
                              free_local_gpus: int) -> str:
    """Placement for scaled replicas given the node's device shape.

    Single-device models spread across nodes; once a node has spare local
    devices they are filled by device-to-device replication instead.  Models
    needing several devices split their blocks across one node's devices and
    still pipeline across nodes.
    """
    g = model.gpus_per_replica
    if g > node_gpus:
        raise UnsupportedConfigurationError(
            f"model {model.model_id} needs {g} devices per replica, nodes have {node_gpus}")
    if g > 1:
        return CROSS_NODE_MULTI_GPU
    if free_local_gpus >= 1:
        return INTRA_NODE_REPLICATE
    return CROSS_NODE_SINGLE_GPU


def plan_mode_switch(pipeline: ExecutionPipeline,
                     incomplete_requests: list[tuple[str, int]],
                     prefill_ms_per_token: float) -> ModeSwitchPlan:
    """Spread a dissolving pipeline's in-flight requests over its member nodes.

    Requests go round-robin across stage nodes, so per-node counts differ by
    at most one.  Each request pays a state-rebuild delay proportional to
    the tokens it has generated so far.
    """
    nodes = pipeline.nodes
    if not nodes:
        raise InvalidArgumentError("pipeline has no stages")
    assignments = []
    for i, (req_id, tokens_generated) in enumerate(incomplete_requests):
        if tokens_generated < 0:
            raise InvalidArgumentError(f"negative token count for request {req_id}")
        cost = tokens_generated * prefill_ms_per_token / 1000.0
        assignments.append(ModeSwitchAssignment(req_id, nodes[i % len(nodes)], cost))
    return ModeSwitchPlan(tuple(assignments))


def pipelines_to_lines(pipelines: list[ExecutionPipeline]) -> list[str]:
    """One line per stage: pipeline_id,stage_index,node,device,block_lo,block_hi,activation_step."""
    out = []
    for p in pipelines:
        for i, st in enumerate(p.stages):
            out.append(f"{p.pipeline_id},{i},{st.node},{st.device},"
                       f"{st.block_lo},{st.block_hi},{p.activation_step}")
    return out

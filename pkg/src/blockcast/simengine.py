"""Deterministic discrete-event simulation of replica scaling strategies.

Replays a request trace against a cluster model: requests queue per model,
an autoscaler claims idle nodes, and the chosen distribution strategy
decides how model bytes reach them and when they start serving.  The
lambda_scale strategy serves through execution pipelines while blocks are
still in flight; baselines serve a node only once it holds the full model.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

from . import modelmgr
from .errors import InvalidArgumentError
from .modelmgr import COLD, HOT, WARM, TierMap
from .multicast import (BlockPlan, ModelSpec, MulticastSchedule, SubGroup, Transfer,
                        attach_orders, compose_schedule, k_way_orders,
                        partition_blocks, partition_subgroups, select_block_count)
from .pipeline import (ExecutionPipeline, assign_blocks_to_stages,
                       completion_ordered_groups, generate_pipelines,
                       plan_mode_switch, select_multi_gpu_strategy,
                       INTRA_NODE_REPLICATE)
from .workload import MetricsReport, SimEvent, TraceRecord, aggregate

STRATEGIES = ("lambda_scale", "binary_tree", "broadcast_groups", "ssd_only", "ideal")

_KIND_RANK = {
    "request_arrival": 0, "transfer_step_done": 1, "load_chunk_done": 2,
    "stage_tick_done": 3, "token_emitted": 4, "request_done": 5, "eviction": 6,
    "scale_out": 7, "scale_in": 8, "mode_switch": 9,
    # engine-internal kinds, never logged
    "unit_ready": 20, "scale_in_check": 21, "autoscale_eval": 22,
}


@dataclass(frozen=True)
class ClusterSpec:
    """Hardware shape and cost constants for the simulated cluster."""

    node_count: int = 8
    gpus_per_node: int = 1
    gpu_mem_bytes: float = 80e9
    host_mem_bytes: float = 1e12
    nic_Bps: float = 50e9          # 400 Gb/s fabric
    nvlink_Bps: float = 400e9
    h2d_Bps: float = 64e9
    ssd_Bps: float = 5e9
    step_fixed_overhead_s: float = 0.005
    baseline_group_init_s: float = 0.6

    def __post_init__(self):
        if self.node_count < 1 or self.gpus_per_node < 1:
            raise InvalidArgumentError("cluster needs at least one node and one device")
        for name in ("nic_Bps", "nvlink_Bps", "h2d_Bps", "ssd_Bps"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")


@dataclass(frozen=True)
class AutoscalePolicy:
    threshold_hi: float = 2.0          # queued requests per replica that trigger growth
    keep_alive_s: float = 15.0
    min_replicas: int = 0
    capacity_per_replica: int = 4      # backlog one replica is expected to absorb
    eval_interval_s: float = 0.1       # control loop period


@dataclass(frozen=True)
class ScaleDecision:
    scale_out: int = 0
    scale_in: int = 0


def autoscale(policy: AutoscalePolicy, queue_depth: int, active_replicas: int,
              idle_s: float = 0.0) -> ScaleDecision:
    """Pure scaling rule: grow on backlog per replica, shrink on idleness."""
    out = 0
    cap = max(1, policy.capacity_per_replica)
    if active_replicas == 0:
        if queue_depth > 0:
            out = math.ceil(queue_depth / cap)
    elif queue_depth / active_replicas > policy.threshold_hi:
        out = max(0, math.ceil((queue_depth - active_replicas * cap) / cap))
    shrink = 0
    if queue_depth == 0 and idle_s >= policy.keep_alive_s and \
            active_replicas > policy.min_replicas:
        shrink = 1
    return ScaleDecision(out, shrink)


def transfer_step_time(schedule: MulticastSchedule, plan: BlockPlan,
                       cluster: ClusterSpec) -> float:
    """Seconds per lockstep schedule step.

    Charges the mean block size (layer rounding averages out along the
    pipeline) times the schedule's sender degree, plus fixed overhead.
    """
    payload = plan.mean_block_bytes() * schedule.max_send_degree
    return cluster.step_fixed_overhead_s + payload / cluster.nic_Bps


def baseline_schedule(strategy: str, nodes: list[int], plan: BlockPlan,
                      cluster: ClusterSpec) -> MulticastSchedule:
    """Transfer schedule for a comparison strategy (nodes[0] is the source)."""
    b = plan.block_count
    if strategy == "binary_tree":
        # static breadth-first tree; blocks pipelined one hop per step, both
        # children fed in the same step at half the per-link rate
        order = tuple(bl.block_id for bl in plan.blocks)
        group = SubGroup(0, tuple(nodes), order)
        depth = {0: 0}
        for i in range(1, len(nodes)):
            depth[i] = depth[(i - 1) // 2] + 1
        steps: list[list[Transfer]] = []
        max_depth = max(depth.values()) if len(nodes) > 1 else 0
        for s in range(b + max_depth - 1 if len(nodes) > 1 else 0):
            row = []
            for i in range(1, len(nodes)):
                j = s - (depth[i] - 1)           # block index crossing into node i now
                if 0 <= j < b:
                    row.append(Transfer(s, nodes[(i - 1) // 2], nodes[i], order[j]))
            steps.append(row)
        return MulticastSchedule((group,), steps, max_send_degree=2, label=strategy)
    if strategy == "broadcast_groups":
        # per-block doubling broadcast behind a one-time group-formation delay
        order = tuple(bl.block_id for bl in plan.blocks)
        group = SubGroup(0, tuple(nodes), order)
        n = len(nodes)
        rounds = max(1, math.ceil(math.log2(n))) if n > 1 else 0
        steps = []
        for blk in order:
            for d in range(rounds):
                row = []
                for p in range(1 << d):
                    q = p + (1 << d)
                    if q < n:
                        row.append(Transfer(len(steps), nodes[p], nodes[q], blk))
                steps.append(row)
        return MulticastSchedule((group,), steps, enforce_step_bound=False,
                                 initial_delay_s=cluster.baseline_group_init_s,
                                 label=strategy)
    if strategy in ("ssd_only", "ideal"):
        # no network plan: every node is its own group
        order = tuple(bl.block_id for bl in plan.blocks)
        groups = tuple(SubGroup(i, (n,), order) for i, n in enumerate(nodes))
        return MulticastSchedule(groups, [], label=strategy)
    raise InvalidArgumentError(f"unknown strategy {strategy!r}")


# ---------------------------------------------------------------------------


@dataclass
class _Request:
    rec: TraceRecord
    epoch: int = 0                 # bumped when the request moves between units
    tokens_done: int = 0
    first_token_s: float | None = None
    completion_s: float | None = None
    unit_id: int | None = None


@dataclass
class _Unit:
    """One serving instance: a local replica or an execution pipeline."""

    unit_id: int
    model_id: str
    kind: str                      # local | pipeline
    nodes: tuple[int, ...]
    slots: int
    prefill_extra_s: float         # pipeline fill cost on top of prompt prefill
    token_period_s: float
    cold: bool                     # capacity created from a cold start
    active: bool = False
    retired: bool = False
    busy: set = field(default_factory=set)
    pipeline: ExecutionPipeline | None = None

    @property
    def emit_node(self) -> int:
        return self.nodes[-1]


@dataclass
class _ScaleOp:
    model_id: str
    strategy: str
    nodes: tuple[int, ...]         # nodes claimed by this operation
    expected_units: int
    ready_units: int = 0
    source_nodes: tuple[int, ...] = ()
    done: bool = False


@dataclass
class SimResult:
    strategy: str
    seed: int
    events: list[SimEvent]
    allocation_samples: list[tuple[float, int]]
    request_rows: list[tuple[str, float, float | None, float | None]]
    report: MetricsReport
    end_s: float


class _Engine:
    def __init__(self, cluster: ClusterSpec, models: list[ModelSpec], strategy: str,
                 trace: list[TraceRecord], policy: AutoscalePolicy, seed: int, *,
                 k: int, block_count, initial_memory, initial_gpu, initial_ssd,
                 working_set_bytes: float, activation_bytes: float,
                 batch_slots: int, horizon_s: float | None):
        if strategy not in STRATEGIES:
            raise InvalidArgumentError(
                f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        if k < 1:
            raise InvalidArgumentError("k must be >= 1")
        self.cluster = cluster
        self.models = {m.model_id: m for m in models}
        if len(self.models) != len(models):
            raise InvalidArgumentError("duplicate model ids")
        for rec in trace:
            if rec.model_id not in self.models:
                raise InvalidArgumentError(
                    f"trace references unknown model {rec.model_id!r}")
        self.strategy = strategy
        self.trace = sorted(trace, key=lambda r: (r.arrival_s, r.request_id))
        self.policy = policy
        self.seed = seed
        self.k = k
        self.horizon_s = horizon_s
        self.batch_slots = max(1, batch_slots)
        self.activation_bytes = activation_bytes
        self.working_set_bytes = working_set_bytes

        self.plans: dict[str, BlockPlan] = {}
        for m in models:
            if isinstance(block_count, dict):
                b = block_count.get(m.model_id, "auto")
            else:
                b = block_count
            if b == "auto":
                b = select_block_count(m, cluster.node_count,
                                       cluster.step_fixed_overhead_s, cluster.nic_Bps)
            self.plans[m.model_id] = partition_blocks(m, int(b))
            # layout sanity: the model plus working buffers must fit one replica
            modelmgr.pack_layout(self.plans[m.model_id], int(working_set_bytes),
                                 int(cluster.gpu_mem_bytes * m.gpus_per_replica))

        self.tiers = TierMap()
        node_ids = list(range(cluster.node_count))
        for i, m in enumerate(models):
            homes = (initial_memory or {}).get(m.model_id, [i % cluster.node_count])
            blocks = {bl.block_id for bl in self.plans[m.model_id].blocks}
            for n in homes:
                st = self.tiers.ensure(n, m.model_id)
                st.mem_blocks = set(blocks)
            for n in (initial_gpu or {}).get(m.model_id, []):
                st = self.tiers.ensure(n, m.model_id)
                st.gpu_blocks = set(blocks)
            ssd_nodes = node_ids if initial_ssd == "all" else \
                (initial_ssd or {}).get(m.model_id, [])
            for n in ssd_nodes:
                self.tiers.ensure(n, m.model_id).ssd = True

        self.now = 0.0
        self.seq = 0
        self.heap: list = []
        self.events: list[SimEvent] = []
        self.requests: dict[str, _Request] = {}
        self.queues: dict[str, deque[str]] = {m.model_id: deque() for m in models}
        self.units: dict[int, _Unit] = {}
        self.next_unit = 0
        self.node_owner: dict[int, str] = {}       # node -> model holding its devices
        self.node_last_busy: dict[int, float] = {}
        self.pinned_nodes: dict[int, int] = {}     # node -> pin count (multicast source)
        self.ops: list[_ScaleOp] = []
        self.eval_pending: dict[str, bool] = {m.model_id: False for m in models}
        self.allocated_gpus = 0
        self.alloc_samples: list[tuple[float, int]] = [(0.0, 0)]

    # -- event plumbing ----------------------------------------------------

    def push(self, t: float, kind: str, **payload):
        self.seq += 1
        heapq.heappush(self.heap, (t, _KIND_RANK[kind], self.seq, kind, payload))

    def log(self, kind: str, **payload):
        self.events.append(SimEvent(self.now, kind, payload))

    def sample_alloc(self):
        self.events.append(SimEvent(self.now, "allocation",
                                    {"allocated_gpus": self.allocated_gpus}))
        self.alloc_samples.append((self.now, self.allocated_gpus))

    # -- capacity bookkeeping ----------------------------------------------

    def _active_replicas(self, model_id: str) -> int:
        n = sum(1 for u in self.units.values()
                if u.model_id == model_id and u.active and not u.retired)
        return n

    def _pending_replicas(self, model_id: str) -> int:
        return sum(op.expected_units - op.ready_units for op in self.ops
                   if op.model_id == model_id and not op.done)

    def _idle_nodes(self) -> list[int]:
        return [n for n in range(self.cluster.node_count)
                if n not in self.node_owner]

    # -- serving -----------------------------------------------------------

    def _model(self, model_id: str) -> ModelSpec:
        return self.models[model_id]

    def _prefill_s(self, rec: TraceRecord) -> float:
        return rec.prompt_tokens * self._model(rec.model_id).prefill_ms_per_token / 1000.0

    def _local_period_s(self, model_id: str) -> float:
        m, plan = self._model(model_id), self.plans[model_id]
        return m.per_block_compute_ms * plan.block_count / 1000.0

    def _mk_local_unit(self, node: int, model_id: str, cold: bool) -> _Unit:
        u = _Unit(self.next_unit, model_id, "local", (node,), self.batch_slots,
                  0.0, self._local_period_s(model_id), cold)
        self.next_unit += 1
        self.units[u.unit_id] = u
        return u

    def _mk_pipeline_unit(self, ep: ExecutionPipeline, model_id: str) -> _Unit:
        m = self._model(model_id)
        hop = self.activation_bytes / self.cluster.nic_Bps
        c_max = max(st.block_count for st in ep.stages)
        period = len(ep.stages) * (m.per_block_compute_ms * c_max / 1000.0 + hop)
        u = _Unit(self.next_unit, model_id, "pipeline", ep.nodes, len(ep.stages),
                  len(ep.stages) * hop, period, cold=True, pipeline=ep)
        self.next_unit += 1
        self.units[u.unit_id] = u
        return u

    def _activate_unit(self, u: _Unit, op: _ScaleOp | None):
        if u.retired or u.active:
            return
        u.active = True
        if op is not None:
            op.ready_units += 1
        for n in u.nodes:
            self.node_last_busy[n] = self.now
        self._admit(u.model_id)
        self._schedule_idle_check(u)

    def _admit(self, model_id: str):
        q = self.queues[model_id]
        if not q:
            return
        units = sorted((u for u in self.units.values()
                        if u.model_id == model_id and u.active and not u.retired),
                       key=lambda u: u.unit_id)
        for u in units:
            while q and len(u.busy) < u.slots:
                rid = q.popleft()
                self._start_request(u, rid)
            if not q:
                break

    def _start_request(self, u: _Unit, rid: str):
        req = self.requests[rid]
        req.unit_id = u.unit_id
        u.busy.add(rid)
        for n in u.nodes:
            self.node_last_busy[n] = self.now
        first = self.now + self._prefill_s(req.rec) + u.prefill_extra_s
        req.epoch += 1
        self.push(first, "token_emitted", request=rid, epoch=req.epoch)

    def _finish_request(self, req: _Request, u: _Unit):
        req.completion_s = self.now
        u.busy.discard(req.rec.request_id)
        for n in u.nodes:
            self.node_last_busy[n] = self.now
        self.log("request_done", request=req.rec.request_id, node=u.emit_node)
        self._admit(u.model_id)
        self._arm_eval(u.model_id)
        if not u.busy:
            self._schedule_idle_check(u)

    # -- autoscaling -------------------------------------------------------

    def _schedule_idle_check(self, u: _Unit):
        self.push(self.now + self.policy.keep_alive_s, "scale_in_check",
                  unit=u.unit_id)

    def _eval_scaling(self, model_id: str):
        depth = len(self.queues[model_id])
        active = self._active_replicas(model_id) + self._pending_replicas(model_id)
        decision = autoscale(self.policy, depth, active)
        if decision.scale_out > 0:
            self._scale_out(model_id, decision.scale_out)

    def _release_node(self, node: int, model_id: str):
        for u in list(self.units.values()):
            if not u.retired and node in u.nodes and u.model_id == model_id:
                u.retired = True
                u.active = False
        self.node_owner.pop(node, None)
        st = self.tiers.get(node, model_id)
        if st is not None and st.gpu_blocks:
            st.gpu_blocks.clear()
            self.log("eviction", node=node, model=model_id, tier=modelmgr.GPU)
        self.allocated_gpus -= self.cluster.gpus_per_node
        self.log("scale_in", node=node, model=model_id)
        self.sample_alloc()

    def _on_scale_in_check(self, unit_id: int):
        u = self.units.get(unit_id)
        if u is None or u.retired or not u.active or u.busy:
            return
        if self.queues[u.model_id]:
            return
        idle_since = max(self.node_last_busy.get(n, 0.0) for n in u.nodes)
        idle = self.now - idle_since
        if idle + 1e-9 < self.policy.keep_alive_s:
            self.push(idle_since + self.policy.keep_alive_s, "scale_in_check",
                      unit=unit_id)
            return
        if self._active_replicas(u.model_id) <= self.policy.min_replicas:
            return
        for n in u.nodes:
            if n in self.pinned_nodes:
                self.push(self.now + 1.0, "scale_in_check", unit=unit_id)
                return
        for n in sorted(set(u.nodes)):
            if self.node_owner.get(n) == u.model_id:
                self._release_node(n, u.model_id)

    # -- scale-out per strategy ---------------------------------------------

    def _scale_out(self, model_id: str, replicas: int):
        m = self._model(model_id)
        per_node = max(1, self.cluster.gpus_per_node // m.gpus_per_replica)
        want_nodes = math.ceil(replicas / per_node)
        free = self._idle_nodes()
        nodes = free[:want_nodes]
        if not nodes:
            return
        plan = self.plans[model_id]
        sp = modelmgr.startup_plan(model_id, plan.block_count, nodes, self.tiers,
                                   k_max=self.k)
        select_multi_gpu_strategy(m, self.cluster.gpus_per_node,
                                  self.cluster.gpus_per_node - m.gpus_per_replica)
        for n in nodes:
            self.node_owner[n] = model_id
            self.node_last_busy[n] = self.now
        self.allocated_gpus += len(nodes) * self.cluster.gpus_per_node
        op = _ScaleOp(model_id, self.strategy, tuple(nodes),
                      expected_units=len(nodes) * per_node,
                      source_nodes=tuple(sp.sources))
        self.ops.append(op)
        self.log("scale_out", model=model_id, nodes=list(nodes),
                 classes={n: sp.classes[n] for n in nodes},
                 sources=list(sp.sources), strategy=self.strategy)
        self.sample_alloc()
        getattr(self, f"_launch_{self.strategy}")(op, sp)

    def _spawn_local_units(self, op: _ScaleOp, node: int, cold: bool, at: float):
        """One unit now, further same-node replicas after a device-to-device copy."""
        m = self._model(op.model_id)
        per_node = max(1, self.cluster.gpus_per_node // m.gpus_per_replica)
        lag = self._model(op.model_id).size_bytes / self.cluster.nvlink_Bps
        for r in range(per_node):
            u = self._mk_local_unit(node, op.model_id, cold)
            delay = 0.0 if r == 0 else r * lag
            self.push(at + delay, "unit_ready", unit=u.unit_id, op=id(op))
            if r > 0:
                strat = select_multi_gpu_strategy(
                    m, self.cluster.gpus_per_node, self.cluster.gpus_per_node - 1)
                assert strat == INTRA_NODE_REPLICATE

    def _gpu_load_events(self, node: int, model_id: str, start: float,
                         rate_Bps: float, source: str) -> float:
        """Block-granular local load; returns the completion time."""
        plan = self.plans[model_id]
        t = start
        for bl in plan.blocks:
            t += bl.size_bytes / rate_Bps
            self.push(t, "load_chunk_done", node=node, model=model_id,
                      block=bl.block_id, source=source)
        return t

    def _launch_ideal(self, op: _ScaleOp, sp: modelmgr.StartupPlan):
        plan = self.plans[op.model_id]
        for n in op.nodes:
            st = self.tiers.ensure(n, op.model_id)
            st.gpu_blocks = {bl.block_id for bl in plan.blocks}
            st.last_use_s = self.now
            self._spawn_local_units(op, n, cold=sp.classes[n] == COLD, at=self.now)

    def _launch_ssd_only(self, op: _ScaleOp, sp: modelmgr.StartupPlan):
        for n in op.nodes:
            done = self._gpu_load_events(n, op.model_id, self.now,
                                         self.cluster.ssd_Bps, "ssd")
            self._spawn_local_units(op, n, cold=True, at=done)

    def _warm_and_hot(self, op: _ScaleOp, sp: modelmgr.StartupPlan) -> list[int]:
        """Handle hot/warm demand nodes; return the cold remainder."""
        cold = []
        for n in op.nodes:
            cls = sp.classes[n]
            if cls == HOT:
                self._spawn_local_units(op, n, cold=False, at=self.now)
            elif cls == WARM:
                done = self._gpu_load_events(n, op.model_id, self.now,
                                             self.cluster.h2d_Bps, "h2d")
                self._spawn_local_units(op, n, cold=False, at=done)
            else:
                cold.append(n)
        return cold

    def _launch_binary_tree(self, op: _ScaleOp, sp: modelmgr.StartupPlan):
        self._launch_baseline_tree_or_bcast(op, sp)

    def _launch_broadcast_groups(self, op: _ScaleOp, sp: modelmgr.StartupPlan):
        self._launch_baseline_tree_or_bcast(op, sp)

    def _launch_baseline_tree_or_bcast(self, op: _ScaleOp, sp: modelmgr.StartupPlan):
        cold = self._warm_and_hot(op, sp)
        if not cold:
            op.expected_units = op.ready_units + sum(
                1 for u in self.units.values() if not u.active and not u.retired
                and u.model_id == op.model_id)
            return
        source = sp.sources[0]
        start = self.now
        if sp.bootstrap_node is not None:
            start = self._mem_load_events(source, op.model_id, self.now,
                                          self.cluster.ssd_Bps)
        plan = self.plans[op.model_id]
        sched = baseline_schedule(self.strategy, [source] + cold, plan, self.cluster)
        step_s = transfer_step_time(sched, plan, self.cluster)
        start += sched.initial_delay_s
        self._pin(source, until_steps=sched.step_count)
        comp = sched.completion_steps()
        for i in range(sched.step_count):
            self.push(start + (i + 1) * step_s, "transfer_step_done",
                      op=id(op), step=i, sched=sched, start=start, step_s=step_s)
        for n in cold:
            ready = start + (comp[n] + 1) * step_s
            self._spawn_local_units(op, n, cold=True, at=ready)

    def _mem_load_events(self, node: int, model_id: str, start: float,
                         rate_Bps: float) -> float:
        plan = self.plans[model_id]
        t = start + plan.total_bytes / rate_Bps
        self.push(t, "load_chunk_done", node=node, model=model_id,
                  block=-1, source="ssd_bootstrap")
        st = self.tiers.ensure(node, model_id)
        st.mem_blocks = {bl.block_id for bl in plan.blocks}
        return t

    def _launch_lambda_scale(self, op: _ScaleOp, sp: modelmgr.StartupPlan):
        cold = self._warm_and_hot(op, sp)
        if not cold:
            return
        plan = self.plans[op.model_id]
        sources = [s for s in sp.sources if s not in cold]
        if not sources:
            sources = sp.sources[:1]
            cold = [n for n in cold if n not in sources]
            if not cold:
                return
        start = self.now
        if sp.bootstrap_node is not None:
            start = self._mem_load_events(sources[0], op.model_id, self.now,
                                          self.cluster.ssd_Bps)
        k_eff = min(len(sources), len(cold), self.k)
        sources = sources[:k_eff]
        groups = attach_orders(partition_subgroups(sources + cold, sources),
                               k_way_orders(plan.block_count, k_eff))
        sched = compose_schedule(groups, plan, self.cluster.step_fixed_overhead_s,
                                 self.cluster.nic_Bps)
        step_s = transfer_step_time(sched, plan, self.cluster)
        ordered = completion_ordered_groups(groups, sched)
        orders = [g.transfer_order for g in ordered]
        pipes = generate_pipelines(ordered)
        eps = [assign_blocks_to_stages(pn, orders, plan.block_count, sched, i)
               for i, pn in enumerate(pipes)]
        for s in sources:
            self._pin(s, until_steps=sched.step_count)
        op.expected_units += len(eps)
        for i in range(sched.step_count):
            self.push(start + (i + 1) * step_s, "transfer_step_done",
                      op=id(op), step=i, sched=sched, start=start, step_s=step_s)
        for ep in eps:
            u = self._mk_pipeline_unit(ep, op.model_id)
            self.push(start + (ep.activation_step + 1) * step_s, "unit_ready",
                      unit=u.unit_id, op=id(op))
        self.push(start + sched.step_count * step_s, "mode_switch",
                  op=id(op), sched=sched)

    def _pin(self, node: int, until_steps: int):
        self.pinned_nodes[node] = self.pinned_nodes.get(node, 0) + 1
        for state in self.tiers.states():
            if state.node == node:
                state.pinned = True

    def _unpin(self, node: int):
        c = self.pinned_nodes.get(node, 0) - 1
        if c <= 0:
            self.pinned_nodes.pop(node, None)
            for state in self.tiers.states():
                if state.node == node:
                    state.pinned = False
        else:
            self.pinned_nodes[node] = c

    # -- event handlers ------------------------------------------------------

    def _op_by_id(self, token: int) -> _ScaleOp | None:
        for op in self.ops:
            if id(op) == token:
                return op
        return None

    def _on_transfer_step(self, payload):
        sched: MulticastSchedule = payload["sched"]
        step = payload["step"]
        op = self._op_by_id(payload["op"])
        if op is None:
            return
        for t in sched.steps[step]:
            st = self.tiers.ensure(t.receiver, op.model_id)
            st.gpu_blocks.add(t.block_id)
            st.last_use_s = self.now
        self.log("transfer_step_done", step=step, transfers=len(sched.steps[step]),
                 strategy=self.strategy)
        if step == sched.step_count - 1 and self.strategy != "lambda_scale":
            for g in sched.groups:
                self._unpin(g.source)
            if op:
                op.done = True

    def _on_mode_switch(self, payload):
        op = self._op_by_id(payload["op"])
        sched: MulticastSchedule = payload["sched"]
        if op is None or op.done:
            return
        op.done = True
        for g in sched.groups:
            self._unpin(g.source)
        m = self._model(op.model_id)
        switched = []
        for u in sorted(self.units.values(), key=lambda u: u.unit_id):
            if u.kind != "pipeline" or u.retired or u.model_id != op.model_id:
                continue
            if u.pipeline is None or not set(u.nodes) <= set(op.nodes):
                continue
            u.retired = True
            inflight = sorted(u.busy)
            plan_rows = plan_mode_switch(
                u.pipeline, [(rid, self.requests[rid].tokens_done) for rid in inflight],
                m.prefill_ms_per_token)
            locals_by_node: dict[int, _Unit] = {}
            for n in u.nodes:
                nu = self._mk_local_unit(n, op.model_id, cold=True)
                nu.active = True
                locals_by_node[n] = nu
                self._schedule_idle_check(nu)
            for row in plan_rows.assignments:
                req = self.requests[row.request_id]
                target = locals_by_node[row.node]
                target.busy.add(row.request_id)
                req.unit_id = target.unit_id
                req.epoch += 1
                if req.first_token_s is None:
                    nxt = self.now + row.recompute_cost_s + self._prefill_s(req.rec)
                else:
                    nxt = self.now + row.recompute_cost_s + target.token_period_s
                self.push(nxt, "token_emitted", request=row.request_id,
                          epoch=req.epoch)
            switched.extend(u.nodes)
        if switched:
            self.log("mode_switch", model=op.model_id, nodes=sorted(switched),
                     mode="local")
        self._admit(op.model_id)

    def _on_token(self, payload):
        rid = payload["request"]
        req = self.requests[rid]
        if payload["epoch"] != req.epoch or req.completion_s is not None:
            return
        u = self.units.get(req.unit_id) if req.unit_id is not None else None
        if u is None or u.retired:
            return
        req.tokens_done += 1
        if req.first_token_s is None:
            req.first_token_s = self.now
        self.log("token_emitted", request=rid, node=u.emit_node,
                 cold_capacity=u.cold)
        for n in u.nodes:
            self.node_last_busy[n] = self.now
        st = self.tiers.get(u.emit_node, u.model_id)
        if st is not None:
            st.last_use_s = self.now
        if req.tokens_done >= req.rec.output_tokens:
            self._finish_request(req, u)
        else:
            self.push(self.now + u.token_period_s, "token_emitted",
                      request=rid, epoch=req.epoch)

    def _on_arrival(self, payload):
        rec: TraceRecord = payload["rec"]
        req = _Request(rec)
        self.requests[rec.request_id] = req
        self.queues[rec.model_id].append(rec.request_id)
        self.log("request_arrival", request=rec.request_id, model=rec.model_id)
        self._admit(rec.model_id)
        self._arm_eval(rec.model_id)

    def _arm_eval(self, model_id: str):
        if self.queues[model_id] and not self.eval_pending[model_id]:
            self.eval_pending[model_id] = True
            self.push(self.now + self.policy.eval_interval_s, "autoscale_eval",
                      model=model_id)

    def _on_autoscale_eval(self, payload):
        # re-armed by arrivals and completions, not self-perpetuating
        model_id = payload["model"]
        self.eval_pending[model_id] = False
        if self.queues[model_id]:
            self._eval_scaling(model_id)

    def _on_unit_ready(self, payload):
        u = self.units.get(payload["unit"])
        if u is None or u.retired:
            return
        op = self._op_by_id(payload["op"])
        self._activate_unit(u, op)

    # -- main loop -----------------------------------------------------------

    def run(self) -> SimResult:
        for rec in self.trace:
            self.push(rec.arrival_s, "request_arrival", rec=rec)
        handlers = {
            "request_arrival": self._on_arrival,
            "token_emitted": self._on_token,
            "transfer_step_done": self._on_transfer_step,
            "mode_switch": self._on_mode_switch,
            "unit_ready": self._on_unit_ready,
            "load_chunk_done": lambda p: self.log("load_chunk_done", **p),
            "scale_in_check": lambda p: self._on_scale_in_check(p["unit"]),
            "autoscale_eval": self._on_autoscale_eval,
        }
        while self.heap:
            t, _, _, kind, payload = heapq.heappop(self.heap)
            if self.horizon_s is not None and t > self.horizon_s:
                break
            self.now = max(self.now, t)
            handlers[kind](payload)
        end = self.horizon_s if self.horizon_s is not None else self.now
        rows = []
        for rid in sorted(self.requests, key=lambda r: (self.requests[r].rec.arrival_s, r)):
            req = self.requests[rid]
            ttft = None if req.first_token_s is None else req.first_token_s - req.rec.arrival_s
            rows.append((rid, req.rec.arrival_s, ttft, req.completion_s))
        report = aggregate(self.events, label=self.strategy, horizon_s=end)
        return SimResult(self.strategy, self.seed, self.events,
                         list(self.alloc_samples), rows, report, end)


def run(cluster: ClusterSpec, models: list[ModelSpec], strategy: str,
        trace: list[TraceRecord], policy: AutoscalePolicy, seed: int = 0, *,
        k: int = 1, block_count="auto", initial_memory: dict | None = None,
        initial_gpu: dict | None = None, initial_ssd="all",
        working_set_bytes: float = 0.0, activation_bytes: float = 8e6,
        batch_slots: int = 1, horizon_s: float | None = None) -> SimResult:
    """Simulate one strategy over one trace; identical inputs give identical output."""
    eng = _Engine(cluster, models, strategy, trace, policy, seed,
                  k=k, block_count=block_count, initial_memory=initial_memory,
                  initial_gpu=initial_gpu, initial_ssd=initial_ssd,
                  working_set_bytes=working_set_bytes,
                  activation_bytes=activation_bytes, batch_slots=batch_slots,
                  horizon_s=horizon_s)
    return eng.run()

"""Block-granular multicast planning.

Splits a model into near-even contiguous blocks, picks how many blocks are
worth having, carves a node set into per-source sub-groups, and builds the
per-step transfer schedule that fans blocks out from each source to its
group.  Power-of-two groups finish in exactly b + log2(L) - 1 steps; other
sizes run a paired-node variant of the same exchange pattern.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InvalidArgumentError, ScheduleInvalidError


@dataclass(frozen=True)
class ModelSpec:
    """Static description of one deployable model."""

    model_id: str
    size_bytes: int
    layer_count: int
    gpus_per_replica: int = 1
    per_block_compute_ms: float = 1.5
    prefill_ms_per_token: float = 0.5

    def __post_init__(self):
        if self.size_bytes <= 0:
            raise InvalidArgumentError(f"size_bytes must be positive, got {self.size_bytes}")
        if self.layer_count < 1:
            raise InvalidArgumentError(f"layer_count must be >= 1, got {self.layer_count}")
        if self.gpus_per_replica < 1:
            raise InvalidArgumentError("gpus_per_replica must be >= 1")


@dataclass(frozen=True)
class Block:
    block_id: int
    layer_lo: int        # inclusive
    layer_hi: int        # inclusive
    size_bytes: int


@dataclass(frozen=True)
class BlockPlan:
    """Contiguous layer partition of one model into transferable blocks."""

    model_id: str
    total_bytes: int
    blocks: tuple[Block, ...]

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    def mean_block_bytes(self) -> float:
        return self.total_bytes / len(self.blocks)


@dataclass(frozen=True)
class SubGroup:
    """One multicast source plus the destinations it feeds.

    member_nodes[0] is the source.  transfer_order lists block ids in the
    order the source injects them.
    """

    group_id: int
    member_nodes: tuple[int, ...]
    transfer_order: tuple[int, ...]

    @property
    def source(self) -> int:
        return self.member_nodes[0]

    @property
    def receivers(self) -> tuple[int, ...]:
        return self.member_nodes[1:]


@dataclass(frozen=True)
class Transfer:
    step: int
    sender: int
    receiver: int
    block_id: int


@dataclass
class MulticastSchedule:
    """Step-synchronous transfer schedule over one or more sub-groups."""

    groups: tuple[SubGroup, ...]
    steps: list[list[Transfer]]
    fixed_overhead_s: float = 0.0
    bytes_per_second: float | None = None
    initial_delay_s: float = 0.0
    max_send_degree: int = 1
    enforce_step_bound: bool = True
    label: str = "binomial"

    @property
    def step_count(self) -> int:
        return len(self.steps)

    def block_count(self) -> int:
        return len(self.groups[0].transfer_order) if self.groups else 0

    def arrival_steps(self) -> dict[int, dict[int, int]]:
        """node -> {block_id -> step index at which the block arrived}."""
        out: dict[int, dict[int, int]] = {}
        for g in self.groups:
            for n in g.member_nodes:
                out.setdefault(n, {})
            for blk in g.transfer_order:
                out[g.source][blk] = -1  # held before step 0
        for s, transfers in enumerate(self.steps):
            for t in transfers:
                out.setdefault(t.receiver, {})
                if t.block_id not in out[t.receiver]:
                    out[t.receiver][t.block_id] = s
        return out

    def completion_steps(self) -> dict[int, int]:
        """node -> step index after which the node holds every block (source: -1)."""
        need = {g: set(g.transfer_order) for g in self.groups}
        done: dict[int, int] = {}
        arr = self.arrival_steps()
        for g in self.groups:
            want = need[g]
            for n in g.member_nodes:
                have = arr.get(n, {})
                if want <= set(have):
                    done[n] = max((have[b] for b in want), default=-1)
        return done


@dataclass(frozen=True)
class Violation:
    kind: str
    step: int
    node: int
    block_id: int
    detail: str


# ---------------------------------------------------------------------------
# block partitioning and block-count selection


def partition_blocks(model: ModelSpec, block_count: int) -> BlockPlan:
    """Split the model's layers into block_count contiguous, near-even blocks.

    Blocks differ by at most one layer; byte sizes are proportional to layer
    counts and conserve the exact total.
    """
    b = block_count
    if b < 1 or b > model.layer_count:
        raise InvalidArgumentError(
            f"block_count must be in [1, layer_count={model.layer_count}], got {b}")
    base, extra = divmod(model.layer_count, b)
    blocks = []
    layer = 0
    cum_bytes = 0
    for i in range(b):
        span = base + (1 if i < extra else 0)
        hi_layers = layer + span
        hi_bytes = model.size_bytes * hi_layers // model.layer_count
        blocks.append(Block(i, layer, hi_layers - 1, hi_bytes - cum_bytes))
        layer, cum_bytes = hi_layers, hi_bytes
    return BlockPlan(model.model_id, model.size_bytes, tuple(blocks))


def predicted_transfer_s(model_bytes: float, block_count: int, node_count: int,
                         fixed_overhead_s: float, bytes_per_second: float) -> float:
    """Modeled 1-to-N multicast time: (b + ceil(log2 N) - 1) * per-step time."""
    b = block_count
    steps = b + max(0, math.ceil(math.log2(node_count))) - 1 if node_count > 1 else b
    steps = max(steps, 1) if b >= 1 else 0
    return steps * (fixed_overhead_s + model_bytes / (b * bytes_per_second))


def select_block_count(model: ModelSpec, node_count: int, fixed_overhead_s: float,
                       bytes_per_second: float, improvement_threshold: float = 0.01) -> int:
    """Pick the block count at the elbow of the modeled transfer-time curve.

    Walks b upward while each step still improves the modeled time by at
    least improvement_threshold (relative).  A final step that improves by
    less than the threshold but is still a real improvement is taken; a step
    that improves nothing is not, so flat curves settle on the smaller b.
    Capped at layer_count.
    """
    if node_count < 1:
        raise InvalidArgumentError("node_count must be >= 1")
    if not (0.0 < improvement_threshold < 1.0):
        raise InvalidArgumentError("improvement_threshold must be in (0, 1)")
    cap = model.layer_count
    b = 1
    cur = predicted_transfer_s(model.size_bytes, b, node_count,
                               fixed_overhead_s, bytes_per_second)
    while b < cap:
        nxt = predicted_transfer_s(model.size_bytes, b + 1, node_count,
                                   fixed_overhead_s, bytes_per_second)
        gain = (cur - nxt) / cur
        if gain >= improvement_threshold:
            b, cur = b + 1, nxt
            continue
        if gain > 0.0:
            b = b + 1  # elbow point itself: last, sub-threshold improvement
        break
    return b


# ---------------------------------------------------------------------------
# sub-group partitioning and per-source transfer orders


def partition_subgroups(nodes: list[int], sources: list[int]) -> list[SubGroup]:
    """Carve nodes into one sub-group per source.

    Non-source nodes are dealt out in input order as contiguous runs, one run
    per source, sized so group sizes differ by at most one.  Transfer orders
    are attached separately (k_way_orders).
    """
    if len(set(nodes)) != len(nodes):
        raise InvalidArgumentError("duplicate node ids")
    if not sources:
        raise InvalidArgumentError("need at least one source")
    node_set = set(nodes)
    if len(set(sources)) != len(sources) or not set(sources) <= node_set:
        raise InvalidArgumentError("sources must be distinct nodes drawn from the node list")
    dests = [n for n in nodes if n not in set(sources)]
    k = len(sources)
    base, extra = divmod(len(dests), k)
    groups = []
    at = 0
    for i, src in enumerate(sources):
        take = base + (1 if i < extra else 0)
        groups.append(SubGroup(i, (src, *dests[at:at + take]), ()))
        at += take
    return groups


def k_way_orders(block_count: int, k: int) -> list[tuple[int, ...]]:
    """Per-source block injection orders: circular shifts of l-sized chunks.

    Chunk i holds blocks [l*i, min(l*(i+1), b)) with l = ceil(b/k); source i
    injects chunk i first, then the following chunks cyclically.  Chunks past
    the block range (k > b) are empty and skipped.
    """
    if block_count < 1:
        raise InvalidArgumentError("block_count must be >= 1")
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    l = math.ceil(block_count / k)
    chunks = [tuple(range(l * i, min(l * (i + 1), block_count))) for i in range(k)]
    orders = []
    for i in range(k):
        order: list[int] = []
        for j in range(k):
            order.extend(chunks[(i + j) % k])
        orders.append(tuple(order))
    return orders


def attach_orders(groups: list[SubGroup], orders: list[tuple[int, ...]]) -> list[SubGroup]:
    """Pair each sub-group with its transfer order by position."""
    if len(groups) != len(orders):
        raise InvalidArgumentError("one transfer order per sub-group required")
    return [SubGroup(g.group_id, g.member_nodes, tuple(o)) for g, o in zip(groups, orders)]


# ---------------------------------------------------------------------------
# schedule construction

# Node roles inside one dimension-paired exchange step:
#  - every group member sends at most one block and receives at most one;
#  - the source walks its transfer order, one new block per step;
#  - everyone else forwards its most recently received block the partner
#    lacks, falling back to the earliest-in-order block the partner lacks.
# Group sizes that are not powers of two share hypercube positions: two
# physical nodes act as one logical slot and trade one catch-up block
# between themselves each step alongside the slot's outward exchange.


def _slot_members(group_size: int) -> list[list[int]]:
    """Map virtual member indices onto 2^h hypercube slots (slot 0 = source)."""
    h = max(1, int(math.floor(math.log2(group_size))))
    width = 1 << h
    extra = group_size - width
    slots = [[i] for i in range(width)]
    for j in range(extra):
        slots[1 + j].append(width + j)
    return slots


def _best_forward(held_by: dict[int, int], pos: dict[int, int],
                  partner_has: set[int]) -> int | None:
    """Most recently received block the partner lacks; ties by injection order."""
    best = None
    best_key = None
    for blk, at in held_by.items():
        if blk in partner_has:
            continue
        key = (at, pos[blk])
        if best_key is None or key > best_key:
            best, best_key = blk, key
    return best


def build_binomial_schedule(group: SubGroup, plan: BlockPlan) -> list[list[Transfer]]:
    """Build the per-step transfer list spreading all blocks over one group.

    Steps pair hypercube positions along dimension (step mod d).  For
    power-of-two group sizes the result takes exactly b + log2(L) - 1 steps.
    """
    members = group.member_nodes
    order = group.transfer_order
    if not order:
        raise InvalidArgumentError("transfer_order is empty")
    if sorted(order) != sorted(set(order)) or not set(order) <= {bl.block_id for bl in plan.blocks}:
        raise InvalidArgumentError("transfer_order must be distinct block ids from the plan")
    L = len(members)
    if L == 1:
        return []
    b = len(order)
    pos = {blk: i for i, blk in enumerate(order)}
    slots = _slot_members(L)
    h = int(math.log2(len(slots)))
    slot_of = {m: si for si, ms in enumerate(slots) for m in ms}

    held: list[dict[int, int]] = [dict() for _ in range(L)]
    held[0] = {blk: -1 for blk in order}
    all_blocks = set(order)

    def union_has(si: int) -> set[int]:
        out: set[int] = set()
        for m in slots[si]:
            out |= held[m].keys()
        return out

    steps: list[list[Transfer]] = []
    cap = 2 * (b + h) + 8  # convergence guard; the pattern finishes well inside this
    s = 0
    while any(set(held[m]) != all_blocks for m in range(L)):
        if s >= cap:
            raise ScheduleInvalidError([Violation("no-progress", s, -1, -1,
                                                  "builder failed to converge")])
        dim = s % h
        # pass 1: per-slot outward block choice, from pre-step state
        outgoing: dict[int, tuple[int, int]] = {}   # slot -> (partner slot, block)
        incoming: dict[int, tuple[int, int]] = {}   # slot -> (partner slot, block)
        for a in range(len(slots)):
            p = a ^ (1 << dim)
            if p >= len(slots):
                continue
            u_a, u_p = union_has(a), union_has(p)
            if a == 0:
                tgt = order[min(s, b - 1)]
                if tgt in u_p:
                    missing = [blk for blk in order if blk in u_a and blk not in u_p]
                    tgt = missing[0] if missing else None
            else:
                merged: dict[int, int] = {}
                for m in slots[a]:
                    for blk, at in held[m].items():
                        if blk not in merged or at > merged[blk]:
                            merged[blk] = at
                tgt = _best_forward(merged, pos, u_p)
            if tgt is not None:
                outgoing[a] = (p, tgt)
                incoming[p] = (a, tgt)

        # pass 2: pick member roles per slot, then emit transfers
        recv_member: dict[int, int] = {}
        sync_sends: list[tuple[int, int, int]] = []  # (from_member, to_member, block)
        out_member: dict[int, int] = {}
        for si, ms in enumerate(slots):
            out = outgoing.get(si)
            inc = incoming.get(si)
            if len(ms) == 1:
                m = ms[0]
                if out:
                    out_member[si] = m
                if inc:
                    recv_member[si] = m
                continue
            m0, m1 = ms
            if out:
                holders = [m for m in ms if out[1] in held[m]]
                best = None
                for mo in holders:
                    mi = m1 if mo == m0 else m0
                    sync = _best_forward(held[mi], pos, set(held[mo]))
                    cand = (sync is not None, -ms.index(mo), mo, mi, sync)
                    if best is None or cand[:2] > best[:2]:
                        best = cand
                _, _, mo, mi, sync = best
                out_member[si] = mo
                if inc:
                    recv_member[si] = mi
                if sync is not None:
                    sync_sends.append((mi, mo, sync))
            elif inc:
                best = None
                for mi in ms:
                    other = m1 if mi == m0 else m0
                    sync = _best_forward(held[mi], pos, set(held[other]))
                    cand = (sync is not None, -ms.index(mi), mi, other, sync)
                    if best is None or cand[:2] > best[:2]:
                        best = cand
                _, _, mi, other, sync = best
                recv_member[si] = mi
                if sync is not None:
                    sync_sends.append((mi, other, sync))
            else:
                # no outward traffic this step: pure intra-slot catch-up
                s01 = _best_forward(held[m0], pos, set(held[m1]))
                s10 = _best_forward(held[m1], pos, set(held[m0]))
                if s01 is not None and (s10 is None or
                                        (held[m0][s01], pos[s01]) >= (held[m1][s10], pos[s10])):
                    sync_sends.append((m0, m1, s01))
                elif s10 is not None:
                    sync_sends.append((m1, m0, s10))

        transfers: list[Transfer] = []
        arrivals: list[tuple[int, int]] = []
        for si, (p, blk) in sorted(outgoing.items()):
            rm = recv_member.get(p)
            if rm is None:
                continue
            transfers.append(Transfer(s, members[out_member[si]], members[rm], blk))
            arrivals.append((rm, blk))
        for fm, tm, blk in sync_sends:
            transfers.append(Transfer(s, members[fm], members[tm], blk))
            arrivals.append((tm, blk))
        for m, blk in arrivals:
            held[m].setdefault(blk, s)
        steps.append(transfers)
        s += 1
    return steps


def compose_schedule(groups: list[SubGroup], plan: BlockPlan,
                     fixed_overhead_s: float = 0.0,
                     bytes_per_second: float | None = None) -> MulticastSchedule:
    """Run every sub-group's schedule in lockstep and merge per step index.

    Validates all structural invariants before returning.
    """
    seen: set[int] = set()
    for g in groups:
        dup = seen & set(g.member_nodes)
        if dup:
            raise InvalidArgumentError(f"node(s) {sorted(dup)} appear in more than one sub-group")
        seen |= set(g.member_nodes)
    per_group = [build_binomial_schedule(g, plan) for g in groups]
    depth = max((len(s) for s in per_group), default=0)
    merged: list[list[Transfer]] = []
    for s in range(depth):
        row: list[Transfer] = []
        for gsched in per_group:
            if s < len(gsched):
                row.extend(gsched[s])
        merged.append(row)
    sched = MulticastSchedule(tuple(groups), merged, fixed_overhead_s, bytes_per_second)
    violations = validate_schedule(sched)
    if violations:
        raise ScheduleInvalidError(violations)
    return sched


def validate_schedule(schedule: MulticastSchedule) -> list[Violation]:
    """Re-derive holdings step by step and report every invariant breach.

    Checks causality (senders hold what they send), per-step send/receive
    degree limits, membership (transfers stay inside one sub-group), final
    residency, and the step-count bound for power-of-two group sizes.
    """
    out: list[Violation] = []
    group_of: dict[int, SubGroup] = {}
    for g in schedule.groups:
        for n in g.member_nodes:
            group_of[n] = g
    held: dict[int, set[int]] = {n: set() for n in group_of}
    for g in schedule.groups:
        held[g.source] = set(g.transfer_order)
        if len(set(g.transfer_order)) != len(g.transfer_order):
            out.append(Violation("order-not-permutation", -1, g.source, -1,
                                 f"group {g.group_id} transfer_order has duplicates"))
    last_useful: dict[int, int] = {}
    for s, transfers in enumerate(schedule.steps):
        sends: dict[int, int] = {}
        recvs: dict[int, int] = {}
        staged: list[Transfer] = []
        for t in transfers:
            if t.step != s:
                out.append(Violation("step-index", s, t.sender, t.block_id,
                                     f"transfer tagged step {t.step} found in step {s}"))
            gs, gr = group_of.get(t.sender), group_of.get(t.receiver)
            if gs is None or gr is None or gs is not gr:
                out.append(Violation("membership", s, t.sender, t.block_id,
                                     f"{t.sender}->{t.receiver} crosses sub-group boundaries"))
                continue
            if t.block_id not in held[t.sender]:
                out.append(Violation("causality", s, t.sender, t.block_id,
                                     f"node {t.sender} sent block {t.block_id} it does not hold"))
            sends[t.sender] = sends.get(t.sender, 0) + 1
            recvs[t.receiver] = recvs.get(t.receiver, 0) + 1
            staged.append(t)
            last_useful[group_of[t.sender].group_id] = s
        for n, c in sends.items():
            if c > schedule.max_send_degree:
                out.append(Violation("send-degree", s, n, -1,
                                     f"node {n} sent {c} blocks in one step (max {schedule.max_send_degree})"))
        for n, c in recvs.items():
            if c > 1:
                out.append(Violation("receive-degree", s, n, -1,
                                     f"node {n} received {c} blocks in one step"))
        for t in staged:
            held[t.receiver].add(t.block_id)
    for g in schedule.groups:
        want = set(g.transfer_order)
        for n in g.member_nodes:
            missing = want - held[n]
            if missing:
                out.append(Violation("incomplete-residency", schedule.step_count, n,
                                     min(missing),
                                     f"node {n} ended without block(s) {sorted(missing)}"))
        L = len(g.member_nodes)
        if schedule.enforce_step_bound and L > 1 and L & (L - 1) == 0:
            bound = len(g.transfer_order) + int(math.log2(L)) - 1
            took = last_useful.get(g.group_id, -1) + 1
            if took > bound:
                out.append(Violation("step-count-bound", took - 1, g.source, -1,
                                     f"group {g.group_id} used {took} steps, bound {bound}"))
    return out


# ---------------------------------------------------------------------------
# serialization


def schedule_to_lines(schedule: MulticastSchedule) -> list[str]:
    """One line per transfer: step,sender,receiver,block_id, sorted by (step, sender)."""
    rows = [(t.step, t.sender, t.receiver, t.block_id)
            for step in schedule.steps for t in step]
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return [f"{s},{snd},{rcv},{blk}" for s, snd, rcv, blk in rows]


def schedule_summary(schedule: MulticastSchedule) -> dict:
    """Step count plus per-node completion step, for summaries and fixtures."""
    return {
        "step_count": schedule.step_count,
        "completion_step": dict(sorted(schedule.completion_steps().items())),
    }

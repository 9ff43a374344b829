import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockcast.errors import InvalidArgumentError, ScheduleInvalidError
from blockcast.multicast import (Block, BlockPlan, ModelSpec, MulticastSchedule,
                                 SubGroup, Transfer, attach_orders,
                                 build_binomial_schedule, compose_schedule,
                                 k_way_orders, partition_blocks,
                                 partition_subgroups, predicted_transfer_s,
                                 schedule_to_lines, schedule_summary,
                                 select_block_count, validate_schedule)

from oracles import arrivals_by_replay, balanced_contiguous_sizes

GB = int(1e9)


def model(size=26 * GB, layers=80, **kw):
    return ModelSpec("m0", size, layers, **kw)


# -- block partitioning -------------------------------------------------------


def test_partition_blocks_forty_layers_sixteen_blocks():
    plan = partition_blocks(model(layers=40), 16)
    widths = [b.layer_hi - b.layer_lo + 1 for b in plan.blocks]
    assert widths == balanced_contiguous_sizes(40, 16)
    assert widths == [3] * 8 + [2] * 8
    assert plan.blocks[0].layer_lo == 0
    assert plan.blocks[-1].layer_hi == 39


def test_partition_blocks_conserves_bytes_exactly():
    plan = partition_blocks(model(size=26 * GB + 13, layers=37), 7)
    assert sum(b.size_bytes for b in plan.blocks) == 26 * GB + 13


@given(st.integers(1, 400), st.integers(1, 64), st.integers(1, 10**13))
@settings(max_examples=60, deadline=None)
def test_partition_blocks_properties(layers, blocks, size):
    if blocks > layers:
        with pytest.raises(InvalidArgumentError):
            partition_blocks(model(size=size, layers=layers), blocks)
        return
    plan = partition_blocks(model(size=size, layers=layers), blocks)
    assert plan.block_count == blocks
    assert sum(b.size_bytes for b in plan.blocks) == size
    # contiguous, gap-free layer cover
    lo = 0
    for b in plan.blocks:
        assert b.layer_lo == lo
        lo = b.layer_hi + 1
    assert lo == layers
    widths = [b.layer_hi - b.layer_lo + 1 for b in plan.blocks]
    assert max(widths) - min(widths) <= 1


def test_partition_blocks_rejects_bad_counts():
    with pytest.raises(InvalidArgumentError):
        partition_blocks(model(), 0)


# -- transfer-time model ------------------------------------------------------


def test_predicted_transfer_single_block_two_nodes_is_one_send():
    assert predicted_transfer_s(26 * GB, 1, 2, 0.0, 50 * GB) == pytest.approx(0.52)


def test_predicted_transfer_matches_known_point():
    t = predicted_transfer_s(26 * GB, 16, 8, 0.0, 50 * GB)
    assert t == pytest.approx(18 * 0.0325, abs=1e-6)


def test_select_block_count_flat_curve_stays_at_one():
    # N=2: total time M/BW regardless of b, so no split pays off
    assert select_block_count(model(), 2, 0.0, 50 * GB) == 1


def test_select_block_count_known_point():
    assert select_block_count(model(), 8, 0.0, 50 * GB) == 14


def test_select_block_count_layer_cap():
    assert select_block_count(model(layers=4), 8, 0.0, 50 * GB) <= 4


def test_select_block_count_interior_with_overhead():
    b = select_block_count(model(), 8, 0.005, 50 * GB)
    assert 1 < b < 80


# -- k-way chunk orders -------------------------------------------------------


def test_k_way_orders_two_source_shape():
    assert k_way_orders(4, 2) == [(0, 1, 2, 3), (2, 3, 0, 1)]


def test_k_way_orders_uneven_chunks():
    # l = ceil(8/3) = 3 -> chunks [0..2], [3..5], [6..7]
    assert k_way_orders(8, 3) == [
        (0, 1, 2, 3, 4, 5, 6, 7),
        (3, 4, 5, 6, 7, 0, 1, 2),
        (6, 7, 0, 1, 2, 3, 4, 5),
    ]


@given(st.integers(1, 40), st.integers(1, 8))
@settings(max_examples=80, deadline=None)
def test_k_way_orders_are_permutations(b, k):
    orders = k_way_orders(b, k)
    assert len(orders) == k
    for o in orders:
        assert sorted(o) == list(range(b))


# -- sub-group partitioning ---------------------------------------------------


def test_partition_subgroups_sizes_differ_by_at_most_one():
    groups = partition_subgroups(list(range(1, 8)), [1, 2])
    sizes = sorted(len(g.member_nodes) for g in groups)
    assert sizes == [3, 4]
    for g in groups:
        assert g.member_nodes[0] == g.source
        assert g.source in (1, 2)


def test_partition_subgroups_keeps_receiver_runs_contiguous():
    groups = partition_subgroups([1, 2, 3, 4, 5, 6, 7, 8], [1, 2])
    members = [g.member_nodes for g in groups]
    assert members == [(1, 3, 4, 5), (2, 6, 7, 8)]


def test_partition_subgroups_rejects_bad_sources():
    with pytest.raises(InvalidArgumentError):
        partition_subgroups([1, 2, 3], [9])
    with pytest.raises(InvalidArgumentError):
        partition_subgroups([1, 2, 3], [1, 1])
    with pytest.raises(InvalidArgumentError):
        partition_subgroups([1, 2, 2], [1])


# -- schedule builder ---------------------------------------------------------


def _plan(b):
    return partition_blocks(model(layers=max(b, 80)), b)


def _group(nodes, b):
    return SubGroup(0, tuple(nodes), tuple(range(b)))


def test_builder_power_of_two_exact_bound_spot_checks():
    for size, b in ((2, 1), (4, 3), (8, 16), (16, 5)):
        steps = build_binomial_schedule(_group(range(size), b), _plan(b))
        assert len(steps) == b + int(math.log2(size)) - 1


def test_builder_non_power_within_one_extra_step():
    for size in (3, 5, 6, 7, 11, 13):
        for b in (1, 2, 5, 9):
            steps = build_binomial_schedule(_group(range(size), b), _plan(b))
            bound = b + math.ceil(math.log2(size)) - 1
            assert bound <= len(steps) <= bound + 1, (size, b, len(steps))


def test_builder_single_node_no_steps():
    assert build_binomial_schedule(_group([4], 3), _plan(3)) == []


def test_builder_delivers_in_transfer_order_to_first_receiver():
    order = (3, 1, 0, 2)
    group = SubGroup(0, (0, 1), order)
    steps = build_binomial_schedule(group, _plan(4))
    got = [t.block_id for row in steps for t in row]
    assert got == list(order)


def test_compose_schedule_validates_and_merges():
    plan = _plan(4)
    groups = attach_orders(partition_subgroups(list(range(8)), [0, 1]),
                           k_way_orders(4, 2))
    sched = compose_schedule(groups, plan, 0.001, 50 * GB)
    assert validate_schedule(sched) == []
    assert sched.step_count == 4 + 1  # b + log2(4) - 1
    arr = arrivals_by_replay(sched.steps)
    for g in groups:
        for node in g.receivers:
            assert set(arr[node]) == set(range(4))


@given(st.data())
@settings(max_examples=120, deadline=None)
def test_compose_random_configs_always_valid(data):
    n = data.draw(st.integers(2, 16))
    k = data.draw(st.integers(1, min(4, n - 1)))
    b = data.draw(st.integers(1, 32))
    plan = _plan(b)
    groups = attach_orders(partition_subgroups(list(range(n)), list(range(k))),
                           k_way_orders(b, k))
    sched = compose_schedule(groups, plan)
    assert validate_schedule(sched) == []


def test_validate_catches_tampering():
    plan = _plan(4)
    groups = attach_orders(partition_subgroups(list(range(4)), [0]),
                           k_way_orders(4, 1))
    sched = compose_schedule(groups, plan)

    # causality: forward a block the sender never received
    bad = [list(row) for row in sched.steps]
    bad[0] = bad[0] + [Transfer(0, 3, 2, 3)]
    v = validate_schedule(MulticastSchedule(sched.groups, bad))
    assert any(x.kind in ("causality", "send-degree", "receive-degree") for x in v)

    # residency: drop the last step entirely
    v = validate_schedule(MulticastSchedule(sched.groups, sched.steps[:-1]))
    assert any(x.kind == "incomplete-residency" for x in v)


def test_compose_raises_on_invalid_input_order():
    plan = _plan(4)
    groups = [SubGroup(0, (0, 1), (0, 0, 1, 2))]  # not a permutation
    with pytest.raises((ScheduleInvalidError, InvalidArgumentError)):
        compose_schedule(groups, plan)


def test_schedule_serialization_round_trip_shape():
    plan = _plan(2)
    groups = attach_orders(partition_subgroups([0, 1, 2], [0]),
                           k_way_orders(2, 1))
    sched = compose_schedule(groups, plan)
    lines = schedule_to_lines(sched)
    assert all(len(l.split(",")) == 4 for l in lines)
    parsed = [tuple(int(x) for x in l.split(",")) for l in lines]
    assert parsed == sorted(parsed)
    summary = schedule_summary(sched)
    assert summary["step_count"] == sched.step_count
    assert summary["completion_step"][0] == -1

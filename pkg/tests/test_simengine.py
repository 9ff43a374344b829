import math

import pytest

from blockcast.errors import InvalidArgumentError
from blockcast.multicast import ModelSpec, partition_blocks, validate_schedule
from blockcast.simengine import (STRATEGIES, AutoscalePolicy, ClusterSpec,
                                 autoscale, baseline_schedule, run,
                                 transfer_step_time)
from blockcast.workload import TraceRecord

from oracles import integrate_step_function

GB = int(1e9)


def model13b():
    return ModelSpec("m0", 26 * GB, 80)


def burst(n, dt=0.001, out=16, prompt=128, model="m0"):
    return [TraceRecord(f"r{i}", dt * i, model, prompt, out) for i in range(n)]


# -- autoscale policy ------------------------------------------------------------


def test_autoscale_known_point():
    pol = AutoscalePolicy(threshold_hi=2.0, capacity_per_replica=4)
    assert autoscale(pol, queue_depth=40, active_replicas=2).scale_out == 8


def test_autoscale_below_threshold_is_noop():
    pol = AutoscalePolicy(threshold_hi=2.0, capacity_per_replica=4)
    d = autoscale(pol, queue_depth=3, active_replicas=2)
    assert d.scale_out == 0 and d.scale_in == 0


def test_autoscale_cold_start_sizes_by_capacity():
    pol = AutoscalePolicy(capacity_per_replica=4)
    assert autoscale(pol, queue_depth=9, active_replicas=0).scale_out == 3


def test_autoscale_scale_in_respects_keep_alive_and_floor():
    pol = AutoscalePolicy(keep_alive_s=15.0, min_replicas=1)
    assert autoscale(pol, 0, 2, idle_s=20.0).scale_in == 1
    assert autoscale(pol, 0, 2, idle_s=10.0).scale_in == 0
    assert autoscale(pol, 0, 1, idle_s=100.0).scale_in == 0


# -- step-time model --------------------------------------------------------------


def test_step_time_known_point():
    plan = partition_blocks(model13b(), 16)
    cluster = ClusterSpec(step_fixed_overhead_s=0.0)
    sched = baseline_schedule("ssd_only", [0], plan, cluster)
    assert transfer_step_time(sched, plan, cluster) == pytest.approx(0.0325)


def test_step_time_single_block_two_nodes_is_full_model_send():
    plan = partition_blocks(model13b(), 1)
    cluster = ClusterSpec(step_fixed_overhead_s=0.0)
    sched = baseline_schedule("binary_tree", [0, 1], plan, cluster)
    total = sched.step_count * transfer_step_time(sched, plan, cluster)
    # degree-2 capable tree sends at half rate even for one child
    assert total == pytest.approx(2 * 26 * GB / (50 * GB))


def test_step_time_monotone_in_block_count():
    cluster = ClusterSpec()
    group_nodes = list(range(8))
    prev_steps, prev_payload = 0, float("inf")
    for b in (1, 2, 4, 8, 16):
        plan = partition_blocks(model13b(), b)
        sched = baseline_schedule("broadcast_groups", group_nodes, plan, cluster)
        payload = transfer_step_time(sched, plan, cluster) - cluster.step_fixed_overhead_s
        assert sched.step_count > prev_steps
        assert payload < prev_payload
        prev_steps, prev_payload = sched.step_count, payload


# -- baseline schedules ------------------------------------------------------------


def test_binary_tree_eight_nodes_four_blocks_six_steps():
    plan = partition_blocks(model13b(), 4)
    sched = baseline_schedule("binary_tree", list(range(8)), plan, ClusterSpec())
    assert sched.step_count == 6           # depth 3 + b - 1
    assert sched.max_send_degree == 2
    assert validate_schedule(sched) == []


def test_broadcast_groups_carries_init_delay_and_validates():
    plan = partition_blocks(model13b(), 4)
    cluster = ClusterSpec(baseline_group_init_s=0.6)
    sched = baseline_schedule("broadcast_groups", list(range(8)), plan, cluster)
    assert sched.initial_delay_s == 0.6
    assert sched.step_count == 4 * 3       # per-block doubling rounds
    assert validate_schedule(sched) == []


def test_ssd_and_ideal_have_no_network_steps():
    plan = partition_blocks(model13b(), 4)
    for strat in ("ssd_only", "ideal"):
        sched = baseline_schedule(strat, list(range(4)), plan, ClusterSpec())
        assert sched.step_count == 0
        assert validate_schedule(sched) == []


def test_unknown_strategy_rejected():
    plan = partition_blocks(model13b(), 4)
    with pytest.raises(InvalidArgumentError):
        baseline_schedule("ring", [0, 1], plan, ClusterSpec())
    with pytest.raises(InvalidArgumentError):
        run(ClusterSpec(), [model13b()], "ring", [], AutoscalePolicy())


# -- full simulation ---------------------------------------------------------------


def test_hot_start_ttft_is_prefill_only():
    pol = AutoscalePolicy(eval_interval_s=0.0)
    res = run(ClusterSpec(), [model13b()], "lambda_scale",
              [TraceRecord("r0", 0.0, "m0", 200, 4)], pol, block_count=16,
              initial_gpu={"m0": [0]})
    _, _, ttft, _ = res.request_rows[0]
    assert ttft == pytest.approx(200 * 0.5 / 1000)


def test_empty_trace_zero_cost():
    res = run(ClusterSpec(), [model13b()], "lambda_scale", [], AutoscalePolicy())
    assert res.report.requests_arrived == 0
    assert res.report.gpu_seconds_cumulative == 0.0
    assert res.events == []


def test_unknown_model_in_trace_rejected_before_simulation():
    with pytest.raises(InvalidArgumentError):
        run(ClusterSpec(), [model13b()], "ideal",
            [TraceRecord("r0", 0.0, "zz", 1, 1)], AutoscalePolicy())


def test_lambda_beats_ssd_only_on_cold_burst():
    trace = burst(50)
    a = run(ClusterSpec(), [model13b()], "lambda_scale", trace,
            AutoscalePolicy(), block_count=16)
    b = run(ClusterSpec(), [model13b()], "ssd_only", trace,
            AutoscalePolicy(), block_count=16)
    assert a.report.ramp_first_serve_s < b.report.ramp_first_serve_s
    # ssd waits for a full drive read before any cold token
    assert b.report.ramp_first_serve_s > 26 * GB / (5 * GB)


def test_conservation_across_strategies():
    trace = burst(30, dt=0.01, out=8)
    for strat in STRATEGIES:
        res = run(ClusterSpec(), [model13b()], strat, trace,
                  AutoscalePolicy(), block_count=16)
        rep = res.report
        assert rep.requests_arrived == 30
        assert rep.requests_completed + rep.requests_in_flight == 30
        assert rep.requests_in_flight == 0          # drained run
        assert rep.total_tokens == 30 * 8
        done = {e.payload["request"] for e in res.events
                if e.kind == "request_done"}
        assert len(done) == 30


def test_determinism_identical_event_streams():
    trace = burst(40, out=12)
    key = lambda r: [(e.time_s, e.kind, sorted(e.payload.items())) for e in r.events]
    a = run(ClusterSpec(), [model13b()], "lambda_scale", trace,
            AutoscalePolicy(), seed=7, k=2, block_count=16,
            initial_memory={"m0": [0, 1]})
    b = run(ClusterSpec(), [model13b()], "lambda_scale", trace,
            AutoscalePolicy(), seed=7, k=2, block_count=16,
            initial_memory={"m0": [0, 1]})
    assert key(a) == key(b)
    assert a.request_rows == b.request_rows
    assert a.allocation_samples == b.allocation_samples


def test_scale_in_after_keep_alive_returns_allocation_to_zero():
    pol = AutoscalePolicy(keep_alive_s=2.0)
    res = run(ClusterSpec(), [model13b()], "ideal", burst(8, out=4), pol,
              block_count=16)
    assert any(e.kind == "scale_in" for e in res.events)
    assert any(e.kind == "eviction" for e in res.events)
    assert res.allocation_samples[-1][1] == 0
    last_done = max(e.time_s for e in res.events if e.kind == "request_done")
    first_in = min(e.time_s for e in res.events if e.kind == "scale_in")
    assert first_in >= last_done + 2.0 - 1e-9


def test_gpu_seconds_match_bruteforce_reintegration():
    res = run(ClusterSpec(), [model13b()], "lambda_scale", burst(25, out=8),
              AutoscalePolicy(keep_alive_s=3.0), block_count=16)
    oracle = integrate_step_function(res.allocation_samples, res.end_s)
    assert res.report.gpu_seconds_cumulative == pytest.approx(oracle)


def test_mode_switch_emitted_and_pipeline_requests_finish():
    trace = burst(50, out=24)
    res = run(ClusterSpec(), [model13b()], "lambda_scale", trace,
              AutoscalePolicy(), block_count=16)
    switches = [e for e in res.events if e.kind == "mode_switch"]
    assert switches and switches[0].payload["mode"] == "local"
    assert res.report.requests_completed == 50


def test_cold_tokens_wait_for_capacity():
    # no cold token can precede the first transfer step's completion
    trace = burst(50, out=8)
    res = run(ClusterSpec(), [model13b()], "lambda_scale", trace,
              AutoscalePolicy(), block_count=16)
    first_step = min(e.time_s for e in res.events
                     if e.kind == "transfer_step_done")
    first_cold = min(e.time_s for e in res.events
                     if e.kind == "token_emitted" and e.payload["cold_capacity"])
    assert first_cold > first_step


def test_horizon_truncates_run():
    res = run(ClusterSpec(), [model13b()], "ssd_only", burst(20, out=32),
              AutoscalePolicy(), block_count=16, horizon_s=2.0)
    assert res.end_s == 2.0
    assert res.report.requests_in_flight > 0
    assert all(e.time_s <= 2.0 for e in res.events)

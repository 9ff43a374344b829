"""Command-line front end: planning, simulation, sweeps, and reporting.

Config files are INI-style: one [cluster] section, one [model <id>] section
per model, optional [autoscale], [workload], and [run] sections.  All outputs
are plain text or CSV under the chosen output directory.

Exit codes: 0 success, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import sys
from pathlib import Path

from . import simengine, workload
from .errors import InvalidArgumentError
from .multicast import (ModelSpec, attach_orders, compose_schedule, k_way_orders,
                        partition_blocks, partition_subgroups,
                        predicted_transfer_s, schedule_to_lines, schedule_summary,
                        select_block_count)
from .pipeline import (assign_blocks_to_stages, completion_ordered_groups,
                       generate_pipelines, pipelines_to_lines)
from .simengine import AutoscalePolicy, ClusterSpec, SimResult
from .workload import aggregate, load_trace, synth_burst


class ConfigError(Exception):
    """Invalid or missing configuration; maps to exit code 1."""


# ---------------------------------------------------------------------------
# config parsing


def _sections(cp: configparser.ConfigParser, prefix: str) -> list[str]:
    return [s for s in cp.sections() if s == prefix or s.startswith(prefix + " ")]


def _get(cp, section, key, conv, default=None, required=False):
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(f"missing config key [{section}] {key}")
        return default
    raw = cp.get(section, key).strip()
    if raw == "" and not required:
        return default
    try:
        return conv(raw)
    except (ValueError, TypeError):
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}")


def _int_list(raw: str) -> list[int]:
    return [int(x) for x in raw.split(",") if x.strip() != ""]


def _float_list(raw: str) -> list[float]:
    return [float(x) for x in raw.split(",") if x.strip() != ""]


def _pair(raw: str) -> tuple[int, int]:
    parts = _int_list(raw)
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) == 2:
        return parts[0], parts[1]
    raise ValueError(raw)


def load_config(path: str) -> configparser.ConfigParser:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(p)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config {path}: {exc}")
    return cp


def parse_cluster(cp) -> ClusterSpec:
    s = "cluster"
    if not cp.has_section(s):
        return ClusterSpec()
    kw = {}
    for key, conv in (("node_count", int), ("gpus_per_node", int),
                      ("gpu_mem_bytes", float), ("host_mem_bytes", float),
                      ("nic_Bps", float), ("nvlink_Bps", float),
                      ("h2d_Bps", float), ("ssd_Bps", float),
                      ("step_fixed_overhead_s", float),
                      ("baseline_group_init_s", float)):
        v = _get(cp, s, key, conv)
        if v is not None:
            kw[key] = v
    try:
        return ClusterSpec(**kw)
    except InvalidArgumentError as exc:
        raise ConfigError(f"invalid [cluster] values: {exc}")


def parse_models(cp) -> tuple[list[ModelSpec], dict, dict, object]:
    models, mem, gpu = [], {}, {}
    ssd: object = "all"
    secs = _sections(cp, "model")
    if not secs:
        raise ConfigError("no [model <id>] section found")
    for s in secs:
        parts = s.split(None, 1)
        model_id = parts[1] if len(parts) == 2 else f"m{len(models)}"
        kw = dict(model_id=model_id,
                  size_bytes=_get(cp, s, "size_bytes", lambda r: int(float(r)),
                                  required=True),
                  layer_count=_get(cp, s, "layer_count", int, required=True))
        for key, conv in (("gpus_per_replica", int),
                          ("per_block_compute_ms", float),
                          ("prefill_ms_per_token", float)):
            v = _get(cp, s, key, conv)
            if v is not None:
                kw[key] = v
        try:
            models.append(ModelSpec(**kw))
        except InvalidArgumentError as exc:
            raise ConfigError(f"invalid [{s}]: {exc}")
        nodes = _get(cp, s, "memory_nodes", _int_list)
        if nodes is not None:
            mem[model_id] = nodes
        nodes = _get(cp, s, "gpu_nodes", _int_list)
        if nodes is not None:
            gpu[model_id] = nodes
        raw = _get(cp, s, "ssd_nodes", str)
        if raw is not None and raw != "all":
            if not isinstance(ssd, dict):
                ssd = {}
            ssd[model_id] = _int_list(raw)
    return models, mem, gpu, ssd


def parse_policy(cp) -> AutoscalePolicy:
    s = "autoscale"
    if not cp.has_section(s):
        return AutoscalePolicy()
    kw = {}
    for key, conv in (("threshold_hi", float), ("keep_alive_s", float),
                      ("min_replicas", int), ("capacity_per_replica", int),
                      ("eval_interval_s", float)):
        v = _get(cp, s, key, conv)
        if v is not None:
            kw[key] = v
    return AutoscalePolicy(**kw)


def parse_run(cp) -> dict:
    s = "run"
    out = {
        "strategy": ["lambda_scale"], "k": 1, "block_count": "auto", "seed": 0,
        "activation_bytes": 8e6, "batch_slots": 1, "working_set_bytes": 0.0,
        "horizon_s": None,
    }
    if not cp.has_section(s):
        return out
    raw = _get(cp, s, "strategy", str)
    if raw:
        out["strategy"] = [x.strip() for x in raw.split(",") if x.strip()]
    out["k"] = _get(cp, s, "k", int, out["k"])
    b = _get(cp, s, "block_count", str, "auto")
    out["block_count"] = "auto" if b == "auto" else int(b)
    out["seed"] = _get(cp, s, "seed", int, out["seed"])
    out["activation_bytes"] = _get(cp, s, "activation_bytes", float,
                                   out["activation_bytes"])
    out["batch_slots"] = _get(cp, s, "batch_slots", int, out["batch_slots"])
    out["working_set_bytes"] = _get(cp, s, "working_set_bytes", float,
                                    out["working_set_bytes"])
    out["horizon_s"] = _get(cp, s, "horizon_s", float, None)
    if out["k"] < 1:
        raise ConfigError("[run] k must be >= 1")
    for st in out["strategy"]:
        if st not in simengine.STRATEGIES:
            raise ConfigError(f"[run] unknown strategy {st!r}")
    return out


def build_trace(cp, models, seed: int) -> list[workload.TraceRecord]:
    s = "workload"
    if not cp.has_section(s):
        raise ConfigError("missing [workload] section")
    path = _get(cp, s, "trace", str)
    if path:
        sort = _get(cp, s, "sort", lambda r: r.lower() == "true", False)
        return load_trace(path, sort=sort)
    base = _get(cp, s, "base_rps", float)
    if base is None:
        raise ConfigError("[workload] needs either trace=<path> or base_rps=...")
    ids = _get(cp, s, "model_ids", str)
    model_ids = tuple(x.strip() for x in ids.split(",")) if ids else \
        tuple(m.model_id for m in models)
    return synth_burst(
        base,
        _get(cp, s, "spike_rps", float, required=True),
        _get(cp, s, "spike_times", _float_list, required=True),
        _get(cp, s, "duration_s", float, required=True),
        _get(cp, s, "seed", int, seed),
        spike_duration_s=_get(cp, s, "spike_duration_s", float, 60.0),
        model_ids=model_ids,
        prompt_tokens=_get(cp, s, "prompt_tokens", _pair, (128, 128)),
        output_tokens=_get(cp, s, "output_tokens", _pair, (32, 32)),
    )


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def _write(path: Path, lines: list[str]):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def _event_lines(events) -> list[str]:
    lines = []
    for e in events:
        payload = ";".join(
            f"{k}={json.dumps(v, sort_keys=True, separators=(',', ':'))}"
            for k, v in sorted(e.payload.items()))
        lines.append(f"{e.time_s:.9f},{e.kind},{payload}")
    return lines


def _parse_event_line(line: str) -> workload.SimEvent:
    t, kind, payload = line.split(",", 2)
    d = {}
    if payload:
        for item in payload.split(";"):
            k, v = item.split("=", 1)
            d[k] = json.loads(v)
    return workload.SimEvent(float(t), kind, d)


def _summary_block(r) -> list[str]:
    return [
        f"strategy: {r.label}",
        f"requests_arrived: {r.requests_arrived}",
        f"requests_completed: {r.requests_completed}",
        f"requests_in_flight: {r.requests_in_flight}",
        f"total_tokens: {r.total_tokens}",
        f"ttft_p50_s: {_fmt(r.ttft_p50)}",
        f"ttft_p90_s: {_fmt(r.ttft_p90)}",
        f"ttft_p99_s: {_fmt(r.ttft_p99)}",
        f"first_token_s: {_fmt(r.first_token_s)}",
        f"time_to_first_served_s: {_fmt(r.ramp_first_serve_s)}",
        f"gpu_seconds_total: {_fmt(r.gpu_seconds_cumulative)}",
        f"end_s: {_fmt(r.end_s)}",
    ]


def write_result(outdir: Path, res: SimResult):
    d = outdir / res.strategy
    _write(d / "metrics_requests.csv",
           ["request_id,arrival_s,ttft_s,completion_s"] +
           [f"{rid},{_fmt(a)},{_fmt(t)},{_fmt(c)}"
            for rid, a, t, c in res.request_rows])
    _write(d / "throughput.csv",
           ["time_s,tokens_per_s"] +
           [f"{_fmt(t)},{_fmt(v)}" for t, v in res.report.throughput_timeline])
    _write(d / "allocation.csv",
           ["time_s,allocated_gpus"] +
           [f"{_fmt(t)},{v}" for t, v in res.allocation_samples])
    _write(d / "events.log", _event_lines(res.events))
    _write(d / "summary.txt", _summary_block(res.report))


# ---------------------------------------------------------------------------
# commands


def cmd_plan(cp, outdir: Path, run_cfg: dict) -> int:
    cluster = parse_cluster(cp)
    models, _, _, _ = parse_models(cp)
    model = models[0]
    n, k = cluster.node_count, run_cfg["k"]
    b = run_cfg["block_count"]
    if b == "auto":
        b = select_block_count(model, n, cluster.step_fixed_overhead_s,
                               cluster.nic_Bps)
    plan = partition_blocks(model, b)
    if n == 1:
        _write(outdir / "schedule.txt", [])
        _write(outdir / "pipelines.txt", [])
        _write(outdir / "summary.txt", [
            f"model: {model.model_id}", "nodes: 1",
            "hot path: single node, no transfer schedule needed",
        ])
        return 0
    if k >= n:
        raise ConfigError("[run] k must be smaller than node_count")
    nodes = list(range(n))
    sources = nodes[:k]
    groups = attach_orders(partition_subgroups(nodes, sources),
                           k_way_orders(plan.block_count, k))
    sched = compose_schedule(groups, plan, cluster.step_fixed_overhead_s,
                             cluster.nic_Bps)
    step_s = simengine.transfer_step_time(sched, plan, cluster)
    ordered = completion_ordered_groups(groups, sched)
    pipes = generate_pipelines(ordered)
    eps = [assign_blocks_to_stages(pn, [g.transfer_order for g in ordered],
                                   plan.block_count, sched, i)
           for i, pn in enumerate(pipes)]
    _write(outdir / "schedule.txt", schedule_to_lines(sched))
    _write(outdir / "pipelines.txt", pipelines_to_lines(eps))
    first_act = min(ep.activation_step for ep in eps) if eps else -1
    summary = schedule_summary(sched)
    lines = [
        f"model: {model.model_id}",
        f"model_bytes: {model.size_bytes}",
        f"nodes: {n}", f"sources_k: {k}", f"block_count: {plan.block_count}",
        f"step_count: {sched.step_count}",
        f"step_time_s: {_fmt(step_s)}",
        f"predicted_transfer_s: "
        f"{_fmt(predicted_transfer_s(model.size_bytes, plan.block_count, n, cluster.step_fixed_overhead_s, cluster.nic_Bps))}",
        f"first_pipeline_activation_step: {first_act}",
        f"first_pipeline_activation_s: {_fmt((first_act + 1) * step_s)}",
        f"pipeline_count: {len(eps)}",
    ]
    for node, step in summary["completion_step"].items():
        lines.append(f"completion_step node {node}: {step}")
    _write(outdir / "summary.txt", lines)
    return 0


def _simulate_once(cp, outdir: Path, run_cfg: dict, strategies: list[str],
                   seed: int) -> list[SimResult]:
    cluster = parse_cluster(cp)
    models, mem, gpu, ssd = parse_models(cp)
    policy = parse_policy(cp)
    trace = build_trace(cp, models, seed)
    results = []
    for strat in strategies:
        res = simengine.run(
            cluster, models, strat, trace, policy, seed,
            k=run_cfg["k"], block_count=run_cfg["block_count"],
            initial_memory=mem or None, initial_gpu=gpu or None,
            initial_ssd=ssd, working_set_bytes=run_cfg["working_set_bytes"],
            activation_bytes=run_cfg["activation_bytes"],
            batch_slots=run_cfg["batch_slots"], horizon_s=run_cfg["horizon_s"])
        write_result(outdir, res)
        results.append(res)
    lines = []
    for res in results:
        lines.extend(_summary_block(res.report))
        lines.append("")
    _write(outdir / "summary.txt", lines[:-1] if lines else [])
    return results


def cmd_simulate(cp, outdir: Path, run_cfg: dict) -> int:
    _simulate_once(cp, outdir, run_cfg, run_cfg["strategy"], run_cfg["seed"])
    return 0


def cmd_sweep(cp, outdir: Path, run_cfg: dict, axis: str, values: list[str]) -> int:
    if axis not in ("b", "k", "block_overhead"):
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    cluster = parse_cluster(cp)
    models, _, _, _ = parse_models(cp)
    model = models[0]
    strat = run_cfg["strategy"][0]
    elbow = select_block_count(model, cluster.node_count,
                               cluster.step_fixed_overhead_s, cluster.nic_Bps)
    rows = ["axis,value,elbow_b,predicted_transfer_s,time_to_first_served_s,"
            "ttft_p50_s,gpu_seconds_total"]
    for raw in values:
        sub = dict(run_cfg)
        overhead = cluster.step_fixed_overhead_s
        if axis == "b":
            sub["block_count"] = int(raw)
        elif axis == "k":
            sub["k"] = int(raw)
        else:
            overhead = float(raw)
        if not cp.has_section("cluster"):
            cp.add_section("cluster")
        cp.set("cluster", "step_fixed_overhead_s", repr(overhead))
        b_here = sub["block_count"]
        if b_here == "auto":
            b_here = select_block_count(model, cluster.node_count, overhead,
                                        cluster.nic_Bps)
        pred = predicted_transfer_s(model.size_bytes, int(b_here),
                                    cluster.node_count, overhead, cluster.nic_Bps)
        results = _simulate_once(cp, outdir / f"{axis}_{raw}", sub,
                                 [strat], sub["seed"])
        r = results[0].report
        rows.append(f"{axis},{raw},{elbow},{_fmt(pred)},"
                    f"{_fmt(r.ramp_first_serve_s)},{_fmt(r.ttft_p50)},"
                    f"{_fmt(r.gpu_seconds_cumulative)}")
    _write(outdir / "sweep.csv", rows)
    return 0


def cmd_report(outdir: Path) -> int:
    if not outdir.is_dir():
        raise ConfigError(f"output directory not found: {outdir}")
    blocks = []
    for log in sorted(outdir.glob("*/events.log")):
        events = [_parse_event_line(l) for l in
                  log.read_text().splitlines() if l]
        label = log.parent.name
        try:
            rep = aggregate(events, label=label)
        except Exception:
            horizon = events[-1].time_s if events else 0.0
            rep = aggregate(events, label=label, horizon_s=horizon)
        blocks.extend(_summary_block(rep))
        blocks.append("")
    if not blocks:
        raise ConfigError(f"no events.log found under {outdir}")
    _write(outdir / "report.txt", blocks[:-1])
    sys.stdout.write("\n".join(blocks[:-1]) + "\n")
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blockcast",
                description="Plan block-pipelined model multicasts and simulate "
                            "replica scaling strategies.")
    p.add_argument("command", choices=["plan", "simulate", "sweep", "report"])
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--strategy", help="comma-separated strategy override")
    p.add_argument("--sweep", metavar="AXIS=V1,V2,...",
                   help="sweep axis and values (axis: b | k | block_overhead)")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        outdir = Path(args.out)
        if args.command == "report":
            return cmd_report(outdir)
        if not args.config:
            raise ConfigError(f"{args.command} requires --config")
        cp = load_config(args.config)
        run_cfg = parse_run(cp)
        if args.seed is not None:
            run_cfg["seed"] = args.seed
        if args.strategy:
            run_cfg["strategy"] = [x.strip() for x in args.strategy.split(",")
                                   if x.strip()]
            for st in run_cfg["strategy"]:
                if st not in simengine.STRATEGIES:
                    raise ConfigError(f"unknown strategy {st!r}")
        if args.command == "plan":
            return cmd_plan(cp, outdir, run_cfg)
        if args.command == "simulate":
            return cmd_simulate(cp, outdir, run_cfg)
        if not args.sweep or "=" not in args.sweep:
            raise ConfigError("sweep requires --sweep axis=v1,v2,...")
        axis, _, raw = args.sweep.partition("=")
        values = [v.strip() for v in raw.split(",") if v.strip()]
        return cmd_sweep(cp, outdir, run_cfg, axis.strip(), values)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 1
    except Exception as exc:
        sys.stderr.write(f"runtime error: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())

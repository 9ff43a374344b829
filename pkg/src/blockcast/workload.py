"""Request traces and metric aggregation.

Loads CSV traces, synthesizes bursty arrival processes, and turns simulator
event streams into request latency, throughput, and device-time reports.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field

from .errors import IncompleteLogError, InvalidArgumentError

THROUGHPUT_WINDOW_S = 0.1


@dataclass(frozen=True)
class TraceRecord:
    request_id: str
    arrival_s: float
    model_id: str
    prompt_tokens: int
    output_tokens: int


@dataclass(frozen=True)
class SimEvent:
    time_s: float
    kind: str
    payload: dict


@dataclass
class MetricsReport:
    label: str
    requests_arrived: int = 0
    requests_completed: int = 0
    requests_in_flight: int = 0
    total_tokens: int = 0
    ttft_samples: list[float] = field(default_factory=list)
    ttft_p50: float | None = None
    ttft_p90: float | None = None
    ttft_p99: float | None = None
    throughput_timeline: list[tuple[float, float]] = field(default_factory=list)
    gpu_seconds_cumulative: float = 0.0
    first_token_s: float | None = None
    ramp_first_serve_s: float | None = None   # first token from cold-started capacity
    end_s: float = 0.0


def nearest_rank(samples: list[float], percentile: float) -> float | None:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample."""
    if not samples:
        return None
    if not (0 < percentile <= 100):
        raise InvalidArgumentError("percentile must be in (0, 100]")
    ordered = sorted(samples)
    rank = math.ceil(percentile / 100.0 * len(ordered))
    return ordered[rank - 1]


def load_trace(path: str, columns: dict[str, str] | None = None,
               sort: bool = False) -> list[TraceRecord]:
    """Read a request trace CSV with columns arrival_s,model_id,prompt_tokens,output_tokens.

    columns remaps logical names to the file's header names.  Timestamps are
    normalized to start at zero.  Out-of-order rows are rejected unless
    sort=True.
    """
    colmap = {"arrival_s": "arrival_s", "model_id": "model_id",
              "prompt_tokens": "prompt_tokens", "output_tokens": "output_tokens"}
    if columns:
        colmap.update(columns)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InvalidArgumentError(f"{path}: empty trace file")
        missing = [v for v in colmap.values() if v not in reader.fieldnames]
        if missing:
            raise InvalidArgumentError(f"{path}: missing column(s) {missing}")
        for i, row in enumerate(reader):
            try:
                rec = TraceRecord(
                    request_id=f"r{i}",
                    arrival_s=float(row[colmap["arrival_s"]]),
                    model_id=row[colmap["model_id"]].strip(),
                    prompt_tokens=int(row[colmap["prompt_tokens"]]),
                    output_tokens=int(row[colmap["output_tokens"]]),
                )
            except (TypeError, ValueError) as exc:
                raise InvalidArgumentError(f"{path}: bad row {i + 2}: {exc}") from exc
            if rec.prompt_tokens < 0 or rec.output_tokens < 1:
                raise InvalidArgumentError(
                    f"{path}: bad row {i + 2}: token counts out of range")
            records.append(rec)
    if sort:
        records.sort(key=lambda r: r.arrival_s)
    else:
        for a, b in zip(records, records[1:]):
            if b.arrival_s < a.arrival_s:
                raise InvalidArgumentError(
                    f"{path}: arrivals out of order at {b.request_id} (pass sort=True to sort)")
    if records:
        t0 = records[0].arrival_s
        if t0 != 0.0:
            records = [TraceRecord(r.request_id, r.arrival_s - t0, r.model_id,
                                   r.prompt_tokens, r.output_tokens) for r in records]
    return records


def write_trace(path: str, records: list[TraceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arrival_s", "model_id", "prompt_tokens", "output_tokens"])
        for r in records:
            w.writerow([f"{r.arrival_s:.6f}", r.model_id, r.prompt_tokens, r.output_tokens])


def synth_burst(base_rps: float, spike_rps: float, spike_times: list[float],
                duration_s: float, seed: int, *,
                spike_duration_s: float = 60.0,
                model_ids: tuple[str, ...] = ("m0",),
                prompt_tokens: tuple[int, int] = (128, 128),
                output_tokens: tuple[int, int] = (32, 32)) -> list[TraceRecord]:
    """Seeded arrival process: a base rate plus rectangular spikes.

    Arrivals are a thinned Poisson stream, so identical arguments reproduce
    identical traces.  Token counts draw uniformly from the given inclusive
    ranges; models rotate through model_ids.
    """
    if duration_s <= 0:
        raise InvalidArgumentError("duration_s must be positive")
    if base_rps < 0 or spike_rps < 0:
        raise InvalidArgumentError("rates must be non-negative")

    def rate(t: float) -> float:
        r = base_rps
        for s in spike_times:
            if s <= t < s + spike_duration_s:
                r += spike_rps
        return r

    peak = base_rps + (spike_rps if spike_times else 0.0)
    if peak <= 0:
        return []
    rng = random.Random(seed)
    records = []
    t = 0.0
    i = 0
    while True:
        t += rng.expovariate(peak)
        if t >= duration_s:
            break
        if rng.random() * peak <= rate(t):
            records.append(TraceRecord(
                f"r{i}", t, model_ids[i % len(model_ids)],
                rng.randint(*prompt_tokens), rng.randint(*output_tokens)))
            i += 1
    return records


def aggregate(events: list[SimEvent], label: str = "run",
              horizon_s: float | None = None) -> MetricsReport:
    """Fold an event stream into a MetricsReport.

    Requires a complete log: every request either finishes or is still in
    flight at an explicitly known horizon.  Device seconds come from step
    integration of the allocation samples.
    """
    rep = MetricsReport(label)
    arrivals: dict[str, float] = {}
    first_token: dict[str, float] = {}
    done: set[str] = set()
    token_times: list[float] = []
    alloc_samples: list[tuple[float, int]] = []
    end = horizon_s if horizon_s is not None else 0.0
    for ev in events:
        end = max(end, ev.time_s)
        if ev.kind == "request_arrival":
            arrivals[ev.payload["request"]] = ev.time_s
        elif ev.kind == "token_emitted":
            req = ev.payload["request"]
            token_times.append(ev.time_s)
            if req not in first_token:
                first_token[req] = ev.time_s
                if rep.first_token_s is None:
                    rep.first_token_s = ev.time_s
                if ev.payload.get("cold_capacity") and rep.ramp_first_serve_s is None:
                    rep.ramp_first_serve_s = ev.time_s
        elif ev.kind == "request_done":
            done.add(ev.payload["request"])
        elif ev.kind == "allocation":
            alloc_samples.append((ev.time_s, ev.payload["allocated_gpus"]))
    unfinished = set(arrivals) - done
    if unfinished and horizon_s is None:
        raise IncompleteLogError(
            f"{len(unfinished)} request(s) have no terminal event and no horizon was given")
    rep.requests_arrived = len(arrivals)
    rep.requests_completed = len(done)
    rep.requests_in_flight = len(unfinished)
    rep.total_tokens = len(token_times)
    rep.ttft_samples = sorted(first_token[r] - arrivals[r] for r in first_token
                              if r in arrivals)
    rep.ttft_p50 = nearest_rank(rep.ttft_samples, 50)
    rep.ttft_p90 = nearest_rank(rep.ttft_samples, 90)
    rep.ttft_p99 = nearest_rank(rep.ttft_samples, 99)
    rep.end_s = end
    token_times.sort()
    windows = int(math.ceil(end / THROUGHPUT_WINDOW_S)) if end > 0 else 0
    at = 0
    for w in range(windows):
        hi = (w + 1) * THROUGHPUT_WINDOW_S
        n = 0
        while at < len(token_times) and token_times[at] <= hi:
            n += 1
            at += 1
        rep.throughput_timeline.append((hi, n / THROUGHPUT_WINDOW_S))
    rep.gpu_seconds_cumulative = integrate_allocation(alloc_samples, end)
    return rep


def integrate_allocation(samples: list[tuple[float, int]], end_s: float) -> float:
    """Step-integrate (time, allocated_devices) change samples up to end_s."""
    total = 0.0
    for (t0, v), (t1, _) in zip(samples, samples[1:]):
        total += v * (t1 - t0)
    if samples:
        t_last, v_last = samples[-1]
        total += v_last * max(0.0, end_s - t_last)
    return total

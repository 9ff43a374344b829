"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written with different data structures and
algorithms than the library (brute-force search, linear scans, explicit
loops) so that agreement is meaningful.
"""

from __future__ import annotations

import math
from itertools import combinations


def min_multicast_steps(group_size: int, block_count: int) -> int:
    """Exhaustive breadth-first search for the fewest lockstep steps.

    Rules per step: every node sends at most one block it already held at
    the step start, every node receives at most one block, self-sends are
    banned, exchanges within a pair are allowed.  Node 0 starts with all
    blocks; done when everyone holds everything.
    """
    full = (1 << block_count) - 1
    start = (full,) + (0,) * (group_size - 1)

    def canon(state):
        # non-source nodes are interchangeable
        return (state[0],) + tuple(sorted(state[1:]))

    def expand(state):
        # enumerate all legal step action sets via recursion over senders
        results = set()
        nodes = range(group_size)

        def rec(sender, received, acc):
            if sender == group_size:
                nxt = list(state)
                for s, r, blk in acc:
                    nxt[r] |= 1 << blk
                results.add(canon(tuple(nxt)))
                return
            rec(sender + 1, received, acc)        # sender idles
            if state[sender] == 0:
                return
            for r in nodes:
                if r == sender or r in received:
                    continue
                useful = state[sender] & ~state[r]
                blk = 0
                rem = useful
                while rem:
                    if rem & 1:
                        rec(sender + 1, received | {r}, acc + [(sender, r, blk)])
                    rem >>= 1
                    blk += 1

        rec(0, set(), [])
        return results

    frontier = {canon(start)}
    seen = set(frontier)
    steps = 0
    goal = (full,) * group_size
    while goal not in frontier:
        nxt = set()
        for st in frontier:
            nxt |= expand(st)
        nxt -= seen
        seen |= nxt
        frontier = nxt
        steps += 1
        if steps > block_count * group_size + 8:
            raise RuntimeError("search runaway")
    return steps


def lru_replay_counts(accesses, capacity: int, keep_alive_s: float):
    """List-based tier replay: returns (hot, memory, ssd) counts."""
    hot = mem = ssd = 0
    served = []          # (model, time) most recent last
    cache = []           # model ids, least recent first
    touch = {}
    for t, model in accesses:
        last = None
        for m, at in served:
            if m == model:
                last = at
        if last is not None and t - last < keep_alive_s:
            hot += 1
        elif model in cache:
            mem += 1
        else:
            ssd += 1
            if len(cache) >= capacity:
                victim = sorted(cache, key=lambda m: (touch[m], m))[0]
                cache.remove(victim)
        if model in cache:
            cache.remove(model)
        cache.append(model)
        touch[model] = t
        served.append((model, t))
    return hot, mem, ssd


def integrate_step_function(samples, end_s: float) -> float:
    """Brute-force integral of a piecewise-constant allocation signal."""
    total = 0.0
    for i, (t, v) in enumerate(samples):
        if t >= end_s:
            break
        t_next = samples[i + 1][0] if i + 1 < len(samples) else end_s
        total += v * (min(t_next, end_s) - t)
    return total


def nearest_rank_percentile(values, pct: float) -> float:
    ordered = sorted(values)
    rank = math.ceil(pct / 100.0 * len(ordered))
    return ordered[max(0, rank - 1)]


def balanced_contiguous_sizes(total: int, parts: int) -> list[int]:
    """All valid size multisets differ by at most one; big parts first."""
    base, extra = divmod(total, parts)
    return [base + 1] * extra + [base] * (parts - extra)


def arrivals_by_replay(steps) -> dict:
    """Replay a transfer list into per-node arrival steps, independently."""
    out = {}
    for idx, row in enumerate(steps):
        for t in row:
            out.setdefault(t.receiver, {})[t.block_id] = idx
    return out

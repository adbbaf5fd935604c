"""Seeded slotted simulation of L queues sharing one transmitter.

Slot order: observe, act, charge ``sum C_i x_i + delta * mu_sel f(z)`` on the
pre-transition state, remove departures, add arrivals (dropping overflow),
then step every channel once.

Random numbers come from Philox streams split by ``SeedSequence`` spawn keys
``(queue, purpose)`` with purpose 0 for arrivals and 1 for channel uniforms.
The draws of a queue do not depend on the policy, which gives common random
numbers across policies for a given seed.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .model import QueueSpec
from .policies import Action, Policy, SystemState

ARRIVALS, CHANNEL = 0, 1
REPORT_POINTS = 1000


@dataclass(frozen=True)
class SimConfig:
    queues: tuple[QueueSpec, ...]
    horizon: int
    delta: float = 1.0
    seed: int = 0
    initial: tuple[tuple[int, int], ...] | None = None
    trace: str | None = None
    check_conservation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "queues", tuple(self.queues))
        if self.horizon < 1:
            raise ConfigurationError(f"horizon T={self.horizon} must be at least 1")
        if not self.delta >= 0:
            raise ConfigurationError(f"delta={self.delta} must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed {self.seed} is not a 64-bit unsigned integer")
        if self.initial is not None:
            init = tuple((int(x), int(m)) for x, m in self.initial)
            if len(init) != len(self.queues):
                raise ConfigurationError("initial state needs one (x, mu) pair per queue")
            for q, (x, m) in zip(self.queues, init):
                if not (0 <= x <= q.buffer and 0 <= m < q.channel.n_states):
                    raise ConfigurationError(f"initial state ({x}, {m}) invalid for queue")
            object.__setattr__(self, "initial", init)

    def initial_state(self) -> SystemState:
        if self.initial is None:
            return SystemState((0,) * len(self.queues), (0,) * len(self.queues), 0)
        return SystemState(tuple(x for x, _ in self.initial), tuple(m for _, m in self.initial), 0)

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, seed=seed)


@dataclass
class SimStats:
    slots: np.ndarray
    average_cost: np.ndarray
    cumulative_drops: np.ndarray
    drops: np.ndarray
    selections: np.ndarray
    mean_queue: np.ndarray
    idle_slots: int
    rng_digest: str
    policy: str = ""
    seed: int = 0

    @property
    def final_cost(self) -> float:
        return float(self.average_cost[-1])

    @property
    def total_drops(self) -> int:
        return int(self.drops.sum())

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "seed": self.seed,
            "final_average_cost": self.final_cost,
            "total_drops": self.total_drops,
            "drops": [int(d) for d in self.drops],
            "selections": [int(s) for s in self.selections],
            "idle_slots": self.idle_slots,
            "mean_queue": [float(v) for v in self.mean_queue],
            "rng_digest": self.rng_digest,
        }

    def write_csv(self, path, header: Sequence[str] = ()) -> None:
        L = self.drops.size
        with open(path, "w") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            fh.write(",".join(["slot", "average_cost"] + [f"drops_{i}" for i in range(L)]) + "\n")
            for s, c, d in zip(self.slots, self.average_cost, self.cumulative_drops):
                fh.write(f"{int(s)},{c:.10g}," + ",".join(str(int(v)) for v in d) + "\n")


def queue_streams(seed: int, n_queues: int) -> list[tuple[np.random.Generator, np.random.Generator]]:
    """(arrival, channel) generators per queue, independent of everything else."""
    return [
        tuple(
            np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(i, p))))
            for p in (ARRIVALS, CHANNEL)
        )
        for i in range(n_queues)
    ]


def _plain(o):
    return o.tolist() if isinstance(o, np.ndarray) else int(o)


@dataclass
class Draws:
    """Pregenerated exogenous randomness: arrivals[i, t] and channel uniforms[i, t]."""

    arrivals: np.ndarray
    uniforms: np.ndarray
    digest: str = ""

    @classmethod
    def generate(cls, queues: Sequence[QueueSpec], horizon: int, seed: int) -> "Draws":
        arr = np.empty((len(queues), horizon), dtype=np.int64)
        uni = np.empty((len(queues), horizon))
        h = hashlib.sha256()
        for i, (q, (ga, gc)) in enumerate(zip(queues, queue_streams(seed, len(queues)))):
            arr[i] = ga.poisson(q.arrival_rate, horizon)
            uni[i] = gc.random(horizon)
            for g in (ga, gc):
                h.update(json.dumps(g.bit_generator.state, sort_keys=True, default=_plain).encode())
        return cls(arr, uni, h.hexdigest()[:16])


@lru_cache(maxsize=64)
def _channel_cdf(channel) -> list[list[float]]:
    return np.cumsum(channel.matrix, axis=1).tolist()


def _cdfs(queues: Sequence[QueueSpec]) -> list[list[list[float]]]:
    return [_channel_cdf(q.channel) for q in queues]


def _next_channel(cdf_row, u: float) -> int:
    return min(bisect.bisect_right(cdf_row, u), len(cdf_row) - 1)


def step(
    queues: Sequence[QueueSpec],
    state: SystemState,
    action: Action,
    rng: np.random.Generator,
    delta: float = 1.0,
) -> tuple[SystemState, float, tuple[int, ...]]:
    """One slot; returns the next state, the stage cost and per-queue drops."""
    action.check(state)
    arrivals = [int(rng.poisson(q.arrival_rate)) for q in queues]
    uniforms = [float(rng.random()) for _ in queues]
    nxt, cost, drops, _ = _advance(queues, _cdfs(queues), state, action, arrivals, uniforms, delta)
    return nxt, cost, drops


def _advance(queues, cdfs, state, action, arrivals, uniforms, delta):
    cost = 0.0
    for q, x in zip(queues, state.x):
        cost += q.holding_cost * x
    sel = action.selected
    if sel is not None:
        q = queues[sel]
        cost += delta * q.channel.states[state.mu[sel]] * q.energy(action.z)
    xs, mus, drops, deps = [], [], [], []
    for i, q in enumerate(queues):
        d = action.z if i == sel else 0
        y = state.x[i] - d + arrivals[i]
        xs.append(min(y, q.buffer))
        drops.append(max(0, y - q.buffer))
        deps.append(d)
        mus.append(_next_channel(cdfs[i][state.mu[i]], uniforms[i]))
    return SystemState(tuple(xs), tuple(mus), state.slot + 1), cost, tuple(drops), tuple(deps)


def run(cfg: SimConfig, policy: Policy, draws: Draws | None = None) -> SimStats:
    """Simulate ``cfg.horizon`` slots under ``policy``; bit-reproducible for a given seed."""
    queues = cfg.queues
    L, T = len(queues), cfg.horizon
    if draws is None:
        draws = Draws.generate(queues, T, cfg.seed)
    cdfs = _cdfs(queues)
    arrivals = draws.arrivals.T.tolist()
    uniforms = draws.uniforms.T.tolist()
    every = max(1, T // REPORT_POINTS)
    n_rep = T // every + (1 if T % every else 0)
    slots = np.empty(n_rep, dtype=np.int64)
    avg = np.empty(n_rep)
    cum = np.empty((n_rep, L), dtype=np.int64)
    drops = [0] * L
    sel_counts = [0] * L
    qsum = [0] * L
    idle = 0
    total = 0.0
    r = 0
    policy.reset()
    state = cfg.initial_state()
    trace = open(cfg.trace, "w") if cfg.trace else None
    try:
        if trace:
            trace.write("slot,selected,z," + ",".join(f"index_{i}" for i in range(L)) + "\n")
        for t in range(T):
            action = policy.select(state)
            action.check(state)
            if trace:
                vals = ",".join(f"{v:.10g}" for v in policy.index_values(state))
                sel = "" if action.selected is None else action.selected
                trace.write(f"{t},{sel},{action.z},{vals}\n")
            nxt, cost, dr, deps = _advance(queues, cdfs, state, action, arrivals[t], uniforms[t], cfg.delta)
            if cfg.check_conservation:
                for i in range(L):
                    admitted = arrivals[t][i] - dr[i]
                    if admitted != nxt.x[i] - state.x[i] + deps[i]:
                        raise AssertionError(f"conservation broken at slot {t}, queue {i}")
            total += cost
            for i in range(L):
                drops[i] += dr[i]
                qsum[i] += state.x[i]
            if action.selected is None:
                idle += 1
            else:
                sel_counts[action.selected] += 1
            state = nxt
            if (t + 1) % every == 0 or t + 1 == T:
                slots[r] = t + 1
                avg[r] = total / (t + 1)
                cum[r] = drops
                r += 1
    finally:
        if trace:
            trace.close()
    return SimStats(
        slots=slots[:r],
        average_cost=avg[:r],
        cumulative_drops=cum[:r],
        drops=np.array(drops, dtype=np.int64),
        selections=np.array(sel_counts, dtype=np.int64),
        mean_queue=np.array(qsum, dtype=float) / T,
        idle_slots=idle,
        rng_digest=draws.digest,
        policy=getattr(policy, "name", ""),
        seed=cfg.seed,
    )


@dataclass
class ComparisonRow:
    policy: str
    n: int
    mean_cost: float
    std_cost: float
    mean_drops: float
    std_drops: float

    @property
    def se_cost(self) -> float:
        return self.std_cost / math.sqrt(self.n)

    @property
    def se_drops(self) -> float:
        return self.std_drops / math.sqrt(self.n)


@dataclass
class Comparison:
    rows: dict[str, ComparisonRow]
    runs: dict[tuple[str, int], SimStats] = field(default_factory=dict)

    def costs(self, policy: str) -> list[float]:
        return [s.final_cost for (p, _), s in self.runs.items() if p == policy]

    def drops(self, policy: str) -> list[int]:
        return [s.total_drops for (p, _), s in self.runs.items() if p == policy]


def _std(v):
    return statistics.stdev(v) if len(v) > 1 else 0.0


def _run_seed(cfg: SimConfig, policies, seed: int):
    c = cfg.with_seed(seed)
    draws = Draws.generate(c.queues, c.horizon, seed)
    return [(name, seed, run(c, pol, draws)) for name, pol in policies]


def compare(
    cfg: SimConfig,
    policies: dict[str, Policy],
    seeds: Sequence[int],
    workers: int = 1,
) -> Comparison:
    """Every (policy, seed) pair, sharing each seed's draws across policies.

    Policies are reset before each run. With ``workers > 1`` seeds run in
    separate processes; results do not depend on ``workers``.
    """
    if not seeds:
        raise ConfigurationError("compare needs at least one seed")
    policies_ = list(policies.items())
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            batches = list(ex.map(_run_seed, [cfg] * len(seeds), [policies_] * len(seeds), seeds))
    else:
        batches = [_run_seed(cfg, policies_, s) for s in seeds]
    runs = {(name, seed): st for batch in batches for name, seed, st in batch}
    rows = {}
    for name, _ in policies_:
        c = [runs[(name, s)].final_cost for s in seeds]
        d = [float(runs[(name, s)].total_drops) for s in seeds]
        rows[name] = ComparisonRow(name, len(seeds), statistics.fmean(c), _std(c), statistics.fmean(d), _std(d))
    return Comparison(rows, runs)


def pooled_se(a: Sequence[float], b: Sequence[float]) -> float:
    """Standard error of ``mean(a) - mean(b)`` from the pooled sample variance."""
    na, nb = len(a), len(b)
    if na + nb <= 2:
        return 0.0
    sp2 = ((na - 1) * (_std(a) ** 2) + (nb - 1) * (_std(b) ** 2)) / (na + nb - 2)
    return math.sqrt(sp2 * (1.0 / na + 1.0 / nb))

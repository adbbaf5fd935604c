"""Slot-level scheduling policies: Whittle index, Max-Weight and WFQ.

Every policy picks at most one queue per slot and, for the chosen queue,
the number of packets ``z*(x, mu)`` from its index table. All tie-breaks go
to the lowest queue id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .whittle import WhittleTable


@dataclass(frozen=True)
class SystemState:
    x: tuple[int, ...]
    mu: tuple[int, ...]
    slot: int = 0

    @property
    def n_queues(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class Action:
    selected: int | None = None
    z: int = 0

    @property
    def idle(self) -> bool:
        return self.selected is None

    def check(self, state: SystemState) -> None:
        if self.selected is None:
            if self.z != 0:
                raise ContractViolation("idle action must transmit nothing")
            return
        if not 0 <= self.selected < state.n_queues:
            raise ContractViolation(f"selected queue {self.selected} does not exist")
        if not 0 <= self.z <= state.x[self.selected]:
            raise ContractViolation(
                f"z={self.z} infeasible for queue {self.selected} holding {state.x[self.selected]}"
            )


IDLE = Action()


def _zstar_array(t) -> np.ndarray:
    return t.zstar if isinstance(t, WhittleTable) else np.asarray(t)


def _grid(arr) -> list[list]:
    return np.asarray(arr).tolist()


def _lookup(grid: list[list], x: int, m: int, i: int):
    try:
        if x < 0 or m < 0:
            raise IndexError
        v = grid[x][m]
    except IndexError:
        raise ConfigurationError(f"queue {i}: no table entry for state ({x}, {m})") from None
    if v != v:
        raise ConfigurationError(f"queue {i}: table entry for state ({x}, {m}) is missing")
    return v


def _whittle_pick(state, index, zstar) -> Action:
    best_i, best = -1, math.inf
    for i, (x, m) in enumerate(zip(state.x, state.mu)):
        v = _lookup(index[i], x, m, i)
        if v < best:
            best_i, best = i, v
    if best_i < 0 or not best < 0:
        return IDLE
    return Action(best_i, int(_lookup(zstar[best_i], state.x[best_i], state.mu[best_i], best_i)))


def _longest(state, zstar) -> Action:
    if not any(state.x):
        return IDLE
    x = state.x
    i = x.index(max(x))
    return Action(i, int(_lookup(zstar[i], x[i], state.mu[i], i)))


def whittle_select(state: SystemState, tables: Sequence[WhittleTable]) -> Action:
    """Lowest index transmits if that index is negative; otherwise idle."""
    return _whittle_pick(state, [_grid(t.index) for t in tables], [_grid(t.zstar) for t in tables])


def maxweight_select(state: SystemState, zstar: Sequence) -> Action:
    """Longest queue transmits; channel states only enter through ``z*``."""
    return _longest(state, [_grid(_zstar_array(z)) for z in zstar])


@dataclass(frozen=True)
class WfqState:
    """Virtual finish tags of a slot-granular weighted fair queue.

    ``vtime`` is the tag of the last queue served; a queue that was empty
    restarts from it when it becomes backlogged again, so idling earns no
    credit.
    """

    weights: tuple[float, ...]
    tags: tuple[float, ...]
    backlogged: tuple[bool, ...]
    vtime: float = 0.0

    @classmethod
    def initial(cls, weights: Sequence[float]) -> "WfqState":
        w = tuple(float(v) for v in weights)
        if any(not v > 0 for v in w):
            raise ConfigurationError(f"WFQ weights must be positive, got {w}")
        return cls(w, (0.0,) * len(w), (False,) * len(w), 0.0)


def wfq_select(state: SystemState, wfq: WfqState, zstar: Sequence) -> tuple[Action, WfqState]:
    if any(not v > 0 for v in wfq.weights):
        raise ConfigurationError(f"WFQ weights must be positive, got {wfq.weights}")
    tags = list(wfq.tags)
    backlogged = tuple(x > 0 for x in state.x)
    for i, b in enumerate(backlogged):
        if b and not wfq.backlogged[i]:
            tags[i] = max(tags[i], wfq.vtime)
    if not any(backlogged):
        return IDLE, replace(wfq, backlogged=backlogged)
    i = min((t, j) for j, t in enumerate(tags) if backlogged[j])[1]
    vtime = tags[i]
    tags[i] += 1.0 / wfq.weights[i]
    z = zstar[i] if isinstance(zstar[i], list) else _grid(_zstar_array(zstar[i]))
    action = Action(i, int(_lookup(z, state.x[i], state.mu[i], i)))
    return action, WfqState(wfq.weights, tuple(tags), backlogged, vtime)


class Policy:
    """Stateful wrapper the simulator drives; ``select`` is called once per slot."""

    name = "policy"

    def reset(self) -> None:
        pass

    def select(self, state: SystemState) -> Action:
        raise NotImplementedError

    def index_values(self, state: SystemState) -> tuple[float, ...]:
        return ()


class WhittlePolicy(Policy):
    name = "whittle"

    def __init__(self, tables: Sequence[WhittleTable]):
        self.tables = list(tables)
        self._index = [_grid(t.index) for t in self.tables]
        self._zstar = [_grid(t.zstar) for t in self.tables]

    def select(self, state):
        return _whittle_pick(state, self._index, self._zstar)

    def index_values(self, state):
        return tuple(float(t.index[x, m]) for t, x, m in zip(self.tables, state.x, state.mu))


class MaxWeightPolicy(Policy):
    name = "maxweight"

    def __init__(self, zstar: Sequence):
        self.zstar = [_grid(_zstar_array(z)) for z in zstar]

    def select(self, state):
        return _longest(state, self.zstar)


class WfqPolicy(Policy):
    name = "wfq"

    def __init__(self, weights: Sequence[float], zstar: Sequence):
        self.weights = tuple(weights)
        self.zstar = [_grid(_zstar_array(z)) for z in zstar]
        self.state = WfqState.initial(self.weights)

    def reset(self):
        self.state = WfqState.initial(self.weights)

    def select(self, state):
        action, self.state = wfq_select(state, self.state, self.zstar)
        return action


POLICY_NAMES = ("whittle", "maxweight", "wfq")


def build_policy(name: str, tables: Sequence[WhittleTable]) -> Policy:
    """The named policy for queues whose index tables are ``tables``; WFQ weights are the holding costs."""
    if name == "whittle":
        return WhittlePolicy(tables)
    if name == "maxweight":
        return MaxWeightPolicy(tables)
    if name == "wfq":
        return WfqPolicy([t.spec.holding_cost for t in tables], tables)
    raise ConfigurationError(f"unknown policy {name!r}; choose from {POLICY_NAMES}")

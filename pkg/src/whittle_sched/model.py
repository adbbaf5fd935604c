"""Queues, fading channels, energy functions and their one-step kernels.

A queue holds at most ``M`` packets. In every slot it is either passive
(packets only arrive) or active and transmits ``z`` packets; arrivals are
Poisson and whatever exceeds the buffer is dropped::

    x' = min(x - u*z + K, M),   K ~ Poisson(arrival_rate)

Channel states are carried as integer indices into ``ChannelModel.states``;
the real value is only used to scale the energy cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import stats
from scipy.sparse.csgraph import connected_components

from .errors import DomainError, ValidationError

ENERGY_KINDS = ("exponential", "quadratic", "table")

# Poisson terms are generated until this much mass is covered.
POISSON_MASS = 1.0 - 1e-14


@dataclass(frozen=True)
class EnergyFn:
    """Energy cost ``f(z)`` of transmitting ``z`` packets in one slot.

    ``exponential`` is ``2**z - 1``, ``quadratic`` is ``k*z**2`` and
    ``table`` looks ``f(z)`` up in ``values``.
    """

    kind: str = "exponential"
    k: float = 1.0
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ENERGY_KINDS:
            raise DomainError(f"unknown energy kind {self.kind!r}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def __call__(self, z: int) -> float:
        if z < 0:
            raise DomainError(f"energy evaluated at negative z={z}")
        if self.kind == "exponential":
            return float(2.0**z - 1.0)
        if self.kind == "quadratic":
            return float(self.k * z * z)
        if z >= len(self.values):
            raise DomainError(f"energy table has no entry for z={z}")
        return self.values[z]

    def table(self, n: int) -> np.ndarray:
        """``f(0), ..., f(n)`` as a float array."""
        return np.array([self(z) for z in range(n + 1)], dtype=float)

    def violations(self, n: int) -> list[str]:
        """Invariant violations of ``f`` on ``{0, ..., n}``."""
        out = []
        if self.kind == "quadratic" and not (self.k > 0 and math.isfinite(self.k)):
            out.append(f"energy: quadratic constant k={self.k} must be positive")
        if self.kind == "table" and len(self.values) < n + 1:
            out.append(f"energy: table has {len(self.values)} entries, needs {n + 1}")
            n = len(self.values) - 1
        if n < 0:
            return out
        f = self.table(n)
        if not np.all(np.isfinite(f)):
            out.append("energy: non-finite values")
        if f[0] != 0.0:
            out.append(f"energy: f(0)={f[0]} must be 0")
        d1 = np.diff(f)
        for z in np.flatnonzero(d1 < 0):
            out.append(f"energy: decreasing at z={z}: f({z + 1})-f({z})={d1[z]:.6g}")
        d2 = np.diff(f, 2)
        for z in np.flatnonzero(d2 < 0):
            out.append(f"energy: not convex at z={z + 1}: second difference {d2[z]:.6g}")
        return out


@dataclass(frozen=True)
class ChannelModel:
    """Finite-state Markov channel. Larger state value means a noisier channel."""

    states: tuple[float, ...]
    kernel: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(float(s) for s in self.states))
        object.__setattr__(self, "kernel", tuple(tuple(float(p) for p in row) for row in self.kernel))

    @classmethod
    def constant(cls, value: float = 1.0) -> "ChannelModel":
        return cls(states=(value,), kernel=((1.0,),))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @cached_property
    def mu(self) -> np.ndarray:
        return np.array(self.states, dtype=float)

    @cached_property
    def matrix(self) -> np.ndarray:
        return np.array(self.kernel, dtype=float).reshape(len(self.kernel), -1)

    def is_fsd(self) -> bool:
        return not self._fsd_violations()

    def _fsd_violations(self) -> list[str]:
        q = self.matrix
        # tail[a, m] = P(next index >= m | current a)
        tail = np.cumsum(q[:, ::-1], axis=1)[:, ::-1]
        out = []
        for a in range(1, q.shape[0]):
            for b in range(a):
                bad = np.flatnonzero(tail[a] < tail[b] - 1e-12)
                if bad.size:
                    m = int(bad[0])
                    out.append(
                        f"channel: row {a} does not stochastically dominate row {b} "
                        f"(tail from {m}: {tail[a, m]:.6g} < {tail[b, m]:.6g})"
                    )
        return out

    def violations(self) -> list[str]:
        out = []
        s = np.array(self.states)
        if s.size == 0:
            return ["channel: no states"]
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            out.append("channel: states must be positive and finite")
        if np.any(np.diff(s) <= 0):
            out.append("channel: states must be strictly increasing")
        rows = [len(r) for r in self.kernel]
        if len(rows) != s.size or any(r != s.size for r in rows):
            out.append(f"channel: kernel must be {s.size}x{s.size}")
            return out
        q = self.matrix
        if np.any(q < 0) or np.any(q > 1) or not np.all(np.isfinite(q)):
            out.append("channel: kernel entries must lie in [0, 1]")
        for a, total in enumerate(q.sum(axis=1)):
            if abs(total - 1.0) > 1e-12:
                out.append(f"channel: kernel row {a} sums to {total:.12g}")
        n_comp, _ = connected_components(q > 0, directed=True, connection="strong")
        if n_comp != 1:
            out.append(f"channel: kernel is reducible ({n_comp} communicating classes)")
        out.extend(self._fsd_violations())
        return out


@dataclass(frozen=True)
class ArrivalDist:
    """Poisson number of arrivals per slot."""

    rate: float

    def pmf(self, k) -> np.ndarray | float:
        return stats.poisson.pmf(k, self.rate)

    def support(self) -> np.ndarray:
        """Probabilities ``P(K=0), P(K=1), ...`` covering ``POISSON_MASS``."""
        if self.rate == 0:
            return np.ones(1)
        n = int(stats.poisson.ppf(POISSON_MASS, self.rate)) + 1
        return stats.poisson.pmf(np.arange(n + 1), self.rate)

    def lumped(self, cap: int) -> np.ndarray:
        """Length ``cap + 1`` vector: ``P(K=k)`` for ``k < cap`` and ``P(K >= cap)`` last."""
        out = np.empty(cap + 1)
        if self.rate == 0:
            out[:] = 0.0
            out[0] = 1.0
            return out
        out[:cap] = stats.poisson.pmf(np.arange(cap), self.rate)
        out[cap] = stats.poisson.sf(cap - 1, self.rate)
        return out


@dataclass(frozen=True)
class QueueSpec:
    """One user's queue: buffer, costs, arrivals and channel."""

    buffer: int
    holding_cost: float
    arrival_rate: float
    energy: EnergyFn = field(default_factory=EnergyFn)
    channel: ChannelModel = field(default_factory=ChannelModel.constant)

    @property
    def n_queue_states(self) -> int:
        return self.buffer + 1

    @property
    def arrivals(self) -> ArrivalDist:
        return ArrivalDist(self.arrival_rate)

    @cached_property
    def arrival_matrix(self) -> np.ndarray:
        """``T[b, y] = P(min(b + K, M) = y)`` for post-departure level ``b``."""
        M = self.buffer
        T = np.zeros((M + 1, M + 1))
        for b in range(M + 1):
            T[b, b:] = self.arrivals.lumped(M - b)
        T.setflags(write=False)
        return T

    @cached_property
    def energy_table(self) -> np.ndarray:
        return self.energy.table(self.buffer)

    def bracket_bound(self) -> float:
        """Half-width of a subsidy interval that must contain every index."""
        M = self.buffer
        return float(self.channel.mu.max() * self.energy(M) + self.holding_cost * M * (M + 1))


def _check_state(spec: QueueSpec, x: int) -> None:
    if not 0 <= x <= spec.buffer:
        raise DomainError(f"queue state x={x} outside 0..{spec.buffer}")


def active_kernel(spec: QueueSpec, x: int, z: int) -> np.ndarray:
    """Distribution of the next queue length after transmitting ``z`` of ``x`` packets."""
    _check_state(spec, x)
    if not 0 <= z <= x:
        raise DomainError(f"transmission z={z} infeasible for x={x}")
    return spec.arrival_matrix[x - z].copy()


def passive_kernel(spec: QueueSpec, x: int) -> np.ndarray:
    _check_state(spec, x)
    return spec.arrival_matrix[x].copy()


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def fsd_failed(self) -> bool:
        return any("dominate" in v for v in self.violations)

    def raise_if_failed(self) -> None:
        if self.violations:
            raise ValidationError(self.violations)


def unichain_violations(spec: QueueSpec) -> list[str]:
    """Sufficient condition for every stationary policy to have one recurrent class.

    With positive arrival rate a full buffer is reachable in one step from any
    state under any action, so together with an irreducible channel all
    states ``(M, mu)`` lie in every recurrent class.
    """
    out = []
    if spec.buffer > 0 and not spec.arrival_rate > 0:
        out.append("unichain: zero arrival rate leaves every queue length absorbing under the passive action")
    q = spec.channel.matrix
    n_comp, _ = connected_components(q > 0, directed=True, connection="strong")
    if n_comp != 1:
        out.append(f"unichain: channel has {n_comp} communicating classes")
    return out


def validate(spec: QueueSpec) -> ValidationReport:
    """Check every model invariant and list the ones that fail."""
    out = []
    if not (isinstance(spec.buffer, (int, np.integer)) and spec.buffer >= 0):
        out.append(f"queue: buffer M={spec.buffer} must be a non-negative integer")
    if not (math.isfinite(spec.holding_cost) and spec.holding_cost > 0):
        out.append(f"queue: holding cost C={spec.holding_cost} must be positive and finite")
    if not (math.isfinite(spec.arrival_rate) and spec.arrival_rate >= 0):
        out.append(f"queue: arrival rate {spec.arrival_rate} must be non-negative and finite")
    if not out:
        out.extend(spec.energy.violations(int(spec.buffer)))
    out.extend(spec.channel.violations())
    return ValidationReport(out)

"""Whittle indices of the per-queue subsidy problem.

The index of state ``(x, mu)`` is the least subsidy at which transmitting and
staying passive are equally attractive, i.e. where the index gap

    G(lam) = min_z [mu f(z) + E V_lam(x - z + K, w)] - (lam + E V_lam(x + K, w))

changes sign (positive below the index, non-positive above). Two routes are
provided: a coupled two-timescale iteration (fast value sweeps, slow subsidy
drift) and bisection on ``G``, which serves as the oracle.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dp_solver import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    DpSolution,
    SubsidizedMdp,
    solve_grid,
    solve_rvi,
)
from .errors import ConvergenceError, DivergenceError, StructuralError
from .model import QueueSpec

log = logging.getLogger(__name__)

BISECTION_TOL = 1e-6
BISECTION_DEPTH = 60
# Doublings allowed past the nominal bracket before giving up.
BRACKET_DOUBLINGS = 10


@dataclass
class TwoTimescaleConfig:
    gamma: float = 0.01
    max_sweeps: int = 10**5
    stop: float = 1e-6
    value_tol: float = 1e-9

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


@dataclass
class WhittleTable:
    spec: QueueSpec
    index: np.ndarray
    zstar: np.ndarray
    beta_star: np.ndarray
    method: str
    iterations: int = 0
    final_update: float = 0.0
    failures: list[tuple[int, int, str]] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.index.shape

    def lookup(self, x: int, m: int) -> tuple[float, int]:
        return float(self.index[x, m]), int(self.zstar[x, m])


def index_gap(solution: DpSolution, x: int, m: int) -> float:
    """``G`` at the solution's subsidy for one state."""
    A, _, P = solution.branches()
    sh = solution.mdp.shift
    lam = solution.subsidy
    return float((A[x, m] - sh) - (P[x, m] + (lam - sh)))


def _solve(spec, lam, initial, tol, max_iter):
    return solve_rvi(SubsidizedMdp(spec, float(lam)), tol=tol, max_iter=max_iter, initial=initial)


def _bisect(spec, x, m, tol, solver_tol, max_iter, initial=None):
    """Bisection on the index gap; returns ``(index, solution_at_index_side)``."""
    bound = spec.bracket_bound()
    hi = 0.0
    sol_hi = _solve(spec, hi, initial, solver_tol, max_iter)
    if index_gap(sol_hi, x, m) > 0:
        raise StructuralError(f"index gap positive at zero subsidy for state ({x}, {m})")
    lo = -1.0
    limit = max(bound, 1.0) * 2.0**BRACKET_DOUBLINGS
    sol = _solve(spec, lo, sol_hi.bias, solver_tol, max_iter)
    while index_gap(sol, x, m) <= 0:
        hi, sol_hi = lo, sol
        lo *= 2.0
        if -lo > limit:
            raise StructuralError(
                f"no sign change of the index gap for state ({x}, {m}) down to {-limit:.3g}; "
                "possible indexability violation"
            )
        sol = _solve(spec, lo, sol.bias, solver_tol, max_iter)
    for _ in range(BISECTION_DEPTH):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        sol = _solve(spec, mid, sol.bias, solver_tol, max_iter)
        if index_gap(sol, x, m) <= 0:
            hi, sol_hi = mid, sol
        else:
            lo = mid
    return hi, sol_hi


def compute_index_bisection(
    spec: QueueSpec,
    x: int,
    m: int,
    tol: float = BISECTION_TOL,
    solver_tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> float:
    """Least subsidy (within ``tol``) at which the index gap of ``(x, m)`` is non-positive.

    The gap is non-positive at zero subsidy (transmitting nothing is always
    allowed), so the search fixes that end and doubles the other one from -1
    until the gap turns positive. Past the nominal bracket
    ``max mu * f(M) + C M (M + 1)`` it keeps doubling a bounded number of
    times before reporting a structural failure.
    """
    if not 0 <= x <= spec.buffer:
        raise ValueError(f"x={x} outside 0..{spec.buffer}")
    return _bisect(spec, x, m, tol, solver_tol, max_iter)[0]


def _largest_argmin(q: np.ndarray) -> int:
    return int(np.flatnonzero(q == q.min())[-1])


def _zstar_from(solution: DpSolution, x: int, m: int) -> int:
    mdp = solution.mdp
    Q = mdp.active_q(mdp.expected_next(solution.bias))[x, : x + 1, m]
    return _largest_argmin(Q)


def compute_zstar(
    spec: QueueSpec,
    table: WhittleTable,
    x: int,
    m: int,
    solver_tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> int:
    """Packets to send from ``(x, m)`` when selected, using the value function at its own index."""
    if x == 0:
        return 0
    sol = _solve(spec, table.index[x, m], None, solver_tol, max_iter)
    return _zstar_from(sol, x, m)


def _fill_zstar(spec, index, solver_tol, max_iter):
    nx, ns = index.shape
    zstar = np.zeros((nx, ns), dtype=int)
    beta = np.zeros((nx, ns))
    h = None
    for m in range(ns):
        for x in range(nx):
            sol = _solve(spec, index[x, m], h, solver_tol, max_iter)
            h = sol.bias
            zstar[x, m] = _zstar_from(sol, x, m)
            beta[x, m] = sol.beta
    return zstar, beta


def compute_indices_bisection(
    spec: QueueSpec,
    tol: float = BISECTION_TOL,
    solver_tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    strict: bool = True,
) -> WhittleTable:
    """Index table for every state by bisection, with ``z*`` and ``beta*`` filled in.

    With ``strict=False`` per-state failures are recorded in ``failures`` and
    the state's index is left as NaN (its ``z*`` as 0).
    """
    nx, ns = spec.buffer + 1, spec.channel.n_states
    index = np.full((nx, ns), np.nan)
    failures = []
    for m in range(ns):
        for x in range(nx):
            try:
                index[x, m] = compute_index_bisection(spec, x, m, tol, solver_tol, max_iter)
            except (StructuralError, ConvergenceError) as exc:
                if strict:
                    raise
                failures.append((x, m, str(exc)))
    ok = np.where(np.isnan(index), 0.0, index)
    zstar, beta = _fill_zstar(spec, ok, solver_tol, max_iter)
    for x, m, _ in failures:
        zstar[x, m] = 0
        beta[x, m] = np.nan
    return WhittleTable(spec, index, zstar, beta, method="bisection", failures=failures)


def compute_indices_two_timescale(
    spec: QueueSpec,
    cfg: TwoTimescaleConfig | None = None,
    solver_tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> WhittleTable:
    """Coupled value/subsidy iteration, one copy per target state.

    Each target ``(x, mu)`` carries a scalar subsidy ``lam_n`` that enters the
    passive branch of every state in its own value sweep; after the sweep the
    subsidy moves by ``gamma`` times the target's index gap. All targets run
    as one batch and drop out once their subsidy update is below ``cfg.stop``
    and their value sweep has settled.
    """
    cfg = cfg or TwoTimescaleConfig()
    mdp = SubsidizedMdp(spec, 0.0)
    nx, ns = mdp.shape
    n = nx * ns
    tx = np.repeat(np.arange(nx), ns)
    tm = np.tile(np.arange(ns), nx)
    x0, m0 = mdp.reference
    T = spec.arrival_matrix
    qT = spec.channel.matrix.T
    post = np.clip(np.arange(nx)[:, None] - np.arange(nx)[None, :], 0, None)
    cost = mdp.transmit_cost
    hold = mdp.holding

    V = np.zeros((n, nx, ns))
    lam = np.zeros(n)
    live = np.arange(n)
    last_update = np.zeros(n)
    limit = 10.0 * max(spec.bracket_bound(), 1.0)
    sweeps = 0
    while live.size:
        if sweeps >= cfg.max_sweeps:
            raise ConvergenceError(
                f"two-timescale iteration: {live.size} states unconverged",
                float(np.abs(last_update[live]).max()),
                sweeps,
            )
        sweeps += 1
        Vl = V[live]
        L = lam[live]
        EV = T @ Vl @ qT
        A = (cost[None] + EV[:, post, :]).min(axis=2)
        r = np.arange(live.size)
        gap = A[r, tx[live], tm[live]] - L - EV[r, tx[live], tm[live]]
        sh = np.minimum(L, 0.0)[:, None, None]
        TV = hold[None] + np.minimum(A - sh, EV + (L[:, None, None] - sh))
        Vn = TV - TV[:, x0, m0][:, None, None]
        d = (Vn - Vl).reshape(live.size, -1)
        vspan = d.max(axis=1) - d.min(axis=1)
        scale = np.maximum(1.0, np.abs(Vl).reshape(live.size, -1).max(axis=1))
        step = cfg.gamma * gap
        V[live] = Vn
        lam[live] = L + step
        last_update[live] = step
        if np.any(np.abs(lam[live]) > limit):
            bad = live[np.abs(lam[live]) > limit][0]
            raise DivergenceError(
                f"two-timescale subsidy for state ({tx[bad]}, {tm[bad]}) left [-{limit:.3g}, {limit:.3g}]"
            )
        done = (np.abs(step) < cfg.stop) & (vspan <= cfg.value_tol * scale)
        live = live[~done]
    index = lam.reshape(nx, ns)
    zstar, beta = _fill_zstar(spec, index, solver_tol, max_iter)
    return WhittleTable(
        spec,
        index,
        zstar,
        beta,
        method="two-timescale",
        iterations=sweeps,
        final_update=float(np.abs(last_update).max()),
    )


@dataclass
class IndexabilityReport:
    grid: np.ndarray
    passive_sizes: np.ndarray  # [grid point, mu]
    n_queue_states: int
    inclusion_violations: list[tuple[float, float, int, int]] = field(default_factory=list)
    threshold_violations: list[tuple[float, int]] = field(default_factory=list)

    @property
    def full_at_bottom(self) -> bool:
        return bool(np.all(self.passive_sizes[0] == self.n_queue_states))

    @property
    def empty_at_top(self) -> bool:
        return bool(np.all(self.passive_sizes[-1] == 0))

    @property
    def passed(self) -> bool:
        return not self.inclusion_violations and not self.threshold_violations


def passive_sets_report(solutions: Sequence[DpSolution]) -> IndexabilityReport:
    grid = np.array([s.subsidy for s in solutions])
    nx, ns = solutions[0].u.shape
    passive = np.stack([s.u == 0 for s in solutions])  # [k, x, m]
    report = IndexabilityReport(grid=grid, passive_sizes=passive.sum(axis=1), n_queue_states=nx)
    for k in range(len(solutions) - 1):
        grew = passive[k + 1] & ~passive[k]
        for x, m in zip(*np.nonzero(grew)):
            report.inclusion_violations.append((float(grid[k]), float(grid[k + 1]), int(m), int(x)))
    for k in range(len(solutions)):
        for m in range(ns):
            # a passive set {0, ..., x* - 1} never has a passive state above an active one
            col = passive[k, :, m].astype(int)
            if np.any(np.diff(col) > 0):
                report.threshold_violations.append((float(grid[k]), int(m)))
    return report


def verify_indexability(
    spec: QueueSpec,
    grid: Iterable[float],
    solver_tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> IndexabilityReport:
    """Check that passive sets shrink along an increasing subsidy grid and keep threshold form."""
    grid = np.asarray(list(grid), dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("subsidy grid must be strictly increasing")
    return passive_sets_report(solve_grid(spec, grid, tol=solver_tol, max_iter=max_iter))


def bracket_grid(spec: QueueSpec, n: int = 21) -> np.ndarray:
    """``n`` evenly spaced subsidies over the nominal index bracket (at least ``[-1, 1]``)."""
    b = max(spec.bracket_bound(), 1.0)
    return np.linspace(-b, b, n)


def write_table_csv(
    tables: Sequence[tuple[str, WhittleTable]], path: str | Path, header: Sequence[str] = ()
) -> None:
    with Path(path).open("w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["queue_id", "x", "mu_index", "lambda", "zstar", "beta_star"])
        for qid, t in tables:
            nx, ns = t.shape
            for x in range(nx):
                for m in range(ns):
                    w.writerow(
                        [qid, x, m, repr(float(t.index[x, m])), int(t.zstar[x, m]), repr(float(t.beta_star[x, m]))]
                    )


def write_index_curves(tables: Sequence[WhittleTable], path: str | Path, header: Sequence[str] = ()) -> None:
    """Index against queue length, one curve per holding cost and channel state."""
    with Path(path).open("w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["holding_cost", "mu_index", "mu", "x", "lambda"])
        for t in tables:
            nx, ns = t.shape
            for m in range(ns):
                for x in range(nx):
                    w.writerow([t.spec.holding_cost, m, t.spec.channel.states[m], x, repr(float(t.index[x, m]))])


def read_table_csv(path: str | Path, specs: dict[str, QueueSpec], method: str = "cached") -> dict[str, WhittleTable]:
    rows: dict[str, list] = {}
    with Path(path).open() as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        for row in reader:
            rows.setdefault(row["queue_id"], []).append(row)
    out = {}
    for qid, rs in rows.items():
        spec = specs[qid]
        nx, ns = spec.buffer + 1, spec.channel.n_states
        index = np.zeros((nx, ns))
        zstar = np.zeros((nx, ns), dtype=int)
        beta = np.zeros((nx, ns))
        for r in rs:
            x, m = int(r["x"]), int(r["mu_index"])
            index[x, m] = float(r["lambda"])
            zstar[x, m] = int(r["zstar"])
            beta[x, m] = float(r["beta_star"])
        out[qid] = WhittleTable(spec, index, zstar, beta, method=method)
    return out

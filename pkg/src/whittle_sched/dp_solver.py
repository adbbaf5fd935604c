"""Average-cost dynamic programming for a single queue with a passivity subsidy.

For a fixed subsidy ``lam`` the per-queue problem is

    V(x, mu) = -beta + C x + min( min_z [mu f(z) + E V(x - z + K, w)],
                                  lam + E V(x + K, w) )

with the normalisation ``V(x0, mu0) = beta``. It is solved by relative value
iteration on the bias ``h = V - beta`` (``h(x0, mu0) = 0``). Every few sweeps
the greedy policy is evaluated exactly and the iterate jumps to that policy's
bias when doing so shrinks the Bellman span; this keeps convergence fast when
the optimal chain mixes slowly (large subsidies near the buffer cap).

Subsidies can be huge (the index bracket scales with ``f(M)``), so every sweep
subtracts ``min(lam, 0)`` from both branches before adding the holding cost.
Only the losing branch ever carries the large magnitude, which keeps the bias
exact to rounding.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, ConvergenceError
from .model import QueueSpec

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10**6
STRUCTURE_SLACK = 1e-8
_EVAL_EVERY = 10


@dataclass(frozen=True)
class SubsidizedMdp:
    spec: QueueSpec
    subsidy: float
    reference: tuple[int, int] = (0, 0)

    @property
    def shift(self) -> float:
        return min(self.subsidy, 0.0)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.spec.buffer + 1, self.spec.channel.n_states)

    @cached_property
    def holding(self) -> np.ndarray:
        M = self.spec.buffer
        return self.spec.holding_cost * np.arange(M + 1, dtype=float)[:, None]

    @cached_property
    def _post_index(self) -> np.ndarray:
        xs = np.arange(self.spec.buffer + 1)
        return np.clip(xs[:, None] - xs[None, :], 0, None)

    @cached_property
    def transmit_cost(self) -> np.ndarray:
        """``[x, z, m] -> mu_m f(z)``, ``inf`` where ``z > x``."""
        M = self.spec.buffer
        xs = np.arange(M + 1)
        feasible = (xs[None, :] <= xs[:, None])[:, :, None]
        cost = self.spec.energy_table[None, :, None] * self.spec.channel.mu[None, None, :]
        return np.where(feasible, cost, np.inf)

    def expected_next(self, V: np.ndarray) -> np.ndarray:
        """``EV[b, m] = E[V(min(b + K, M), w) | mu = m]`` for post-departure level ``b``."""
        return self.spec.arrival_matrix @ V @ self.spec.channel.matrix.T

    def active_q(self, EV: np.ndarray) -> np.ndarray:
        """``[x, z, m] -> mu_m f(z) + EV[x - z, m]`` (``inf`` for infeasible z)."""
        return self.transmit_cost + EV[self._post_index, :]

    def branches(self, V: np.ndarray):
        """Best active value, its smallest argmin z, and the passive continuation."""
        EV = self.expected_next(V)
        Q = self.active_q(EV)
        z = Q.argmin(axis=1)
        A = np.take_along_axis(Q, z[:, None, :], axis=1)[:, 0, :]
        return A, z, EV

    def sweep(self, h: np.ndarray):
        """One Bellman sweep; returns the shifted update, greedy u and z."""
        A, z, P = self.branches(h)
        sh = self.shift
        act = A - sh
        pas = P + (self.subsidy - sh)
        u = (act < pas).astype(np.int8)
        TV = self.holding + np.minimum(act, pas)
        return TV, u, np.where(u == 1, z, 0), z

    def evaluate(self, u: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, float] | None:
        """Exact bias and shifted gain of a stationary policy, ``None`` if singular."""
        nx, ns = self.shape
        spec = self.spec
        post = np.arange(nx)[:, None] - np.where(u == 1, z, 0)
        P = spec.arrival_matrix[post.ravel()][:, :, None] * np.tile(spec.channel.matrix, (nx, 1))[:, None, :]
        P = P.reshape(nx * ns, nx * ns)
        sh = self.shift
        energy = spec.energy_table[z] * spec.channel.mu[None, :] - sh
        c = (self.holding + np.where(u == 1, energy, self.subsidy - sh)).ravel()
        ref = self.reference[0] * ns + self.reference[1]
        A = np.eye(nx * ns) - P
        A[:, ref] = 1.0
        try:
            sol = np.linalg.solve(A, c)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(sol)):
            return None
        gain = sol[ref]
        sol[ref] = 0.0
        return sol.reshape(nx, ns), float(gain)


@dataclass
class DpSolution:
    mdp: SubsidizedMdp
    bias: np.ndarray
    beta: float
    u: np.ndarray
    z: np.ndarray
    z_active: np.ndarray
    residual: float
    iterations: int
    tolerance: float

    @property
    def subsidy(self) -> float:
        return self.mdp.subsidy

    @property
    def values(self) -> np.ndarray:
        """The normalised value table, ``V(x0, mu0) = beta``."""
        return self.bias + self.beta

    @property
    def converged(self) -> bool:
        return self.residual <= self.tolerance

    def branches(self):
        return self.mdp.branches(self.bias)

    def passive_set(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.u[:, m] == 0)


def _span(d: np.ndarray) -> float:
    return float(d.max() - d.min())


def solve_rvi(
    mdp: SubsidizedMdp,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    initial: np.ndarray | None = None,
) -> DpSolution:
    """Relative value iteration with span stopping.

    Stops once the span of ``T h - h`` is at most ``tol * max(1, |h|)``; the
    tolerance is relative because the bias of paper-scale instances reaches
    ``1e5`` where an absolute ``1e-10`` sits below double precision.
    """
    if not tol > 0:
        raise ContractViolation("tol must be positive")
    x0, m0 = mdp.reference
    h = np.zeros(mdp.shape) if initial is None else np.array(initial, dtype=float) - initial[x0, m0]
    span = np.inf
    for it in range(1, max_iter + 1):
        TV, u, z, z_act = mdp.sweep(h)
        d = TV - h
        span = _span(d)
        bound = tol * max(1.0, float(np.abs(h).max()))
        if span <= bound:
            gain = float(TV[x0, m0])
            residual = float(np.abs(d - gain).max())
            h = TV - gain
            return DpSolution(
                mdp=mdp,
                bias=h,
                beta=gain + mdp.shift,
                u=u,
                z=z,
                z_active=z_act,
                residual=residual,
                iterations=it,
                tolerance=bound,
            )
        h_next = TV - TV[x0, m0]
        if it % _EVAL_EVERY == 0:
            cand = _policy_polish(mdp, u, z)
            if cand is not None and _span(mdp.sweep(cand)[0] - cand) < span:
                h_next = cand
        h = h_next
    raise ConvergenceError("relative value iteration did not converge", span, max_iter)


def _policy_polish(mdp: SubsidizedMdp, u: np.ndarray, z: np.ndarray, max_rounds: int = 50):
    """Howard policy iteration from the greedy policy ``(u, z)``.

    Actions only change on strict improvement, which rules out cycling
    between tied policies. Returns the final bias or ``None`` if an
    evaluation was singular.
    """
    nx, ns = mdp.shape
    rows = np.arange(nx)[:, None]
    cols = np.arange(ns)[None, :]
    sh = mdp.shift
    h = None
    for _ in range(max_rounds):
        ev = mdp.evaluate(u, z)
        if ev is None:
            return h
        h = ev[0]
        Q = mdp.active_q(mdp.expected_next(h)) - sh
        P = mdp.expected_next(h) + (mdp.subsidy - sh)
        z_best = Q.argmin(axis=1)
        A = np.take_along_axis(Q, z_best[:, None, :], axis=1)[:, 0, :]
        best = np.minimum(A, P)
        current = np.where(u == 1, Q[rows, z, cols], P)
        eps = 1e-12 * np.maximum(1.0, np.abs(best))
        keep = current <= best + eps
        if keep.all():
            return h
        u_new = (A < P).astype(np.int8)
        z_new = np.where(u_new == 1, z_best, 0)
        u = np.where(keep, u, u_new)
        z = np.where(keep, z, z_new)
    return h


def bellman_residual(mdp: SubsidizedMdp, V: np.ndarray, beta: float) -> float:
    """Sup-norm of ``RHS(V) - V`` for the normalised fixed-point equation."""
    V = np.asarray(V, dtype=float)
    A, _, P = mdp.branches(V)
    # A and P carry V's additive level; subtract V before the min to keep it off the subsidy.
    rhs_minus_v = mdp.holding + np.minimum(A - V, P - V + mdp.subsidy) - beta
    return float(np.abs(rhs_minus_v).max())


@dataclass
class PropertyResult:
    name: str
    passed: bool
    violations: list[tuple] = field(default_factory=list)
    note: str = ""


@dataclass
class StructureReport:
    subsidy: float
    results: dict[str, PropertyResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def failures(self) -> list[PropertyResult]:
        return [r for r in self.results.values() if not r.passed]


STRUCTURE_PROPERTIES = (
    "monotone_in_x",
    "monotone_in_channel",
    "increasing_differences",
    "monotone_transmission",
    "threshold_policy",
)


def _result(name, bad, note=""):
    return PropertyResult(name, not bad, bad, note)


def verify_structure(solution: DpSolution, slack: float = STRUCTURE_SLACK) -> StructureReport:
    """Check the value/policy structure of a converged solution.

    Violations are reported as ``(x, m, amount)`` tuples, ``(x, m)`` for the
    policy properties.
    """
    if not solution.converged:
        raise ContractViolation(
            f"solution not converged (residual {solution.residual:.3e} > {solution.tolerance:.3e})"
        )
    h = solution.bias
    nx, ns = h.shape
    res = {}

    d1 = np.diff(h, axis=0)
    res["monotone_in_x"] = _result(
        "monotone_in_x", [(int(x), int(m), float(d1[x, m])) for x, m in zip(*np.nonzero(d1 < -slack))]
    )

    if solution.mdp.spec.channel.is_fsd():
        dm = np.diff(h, axis=1)
        bad = [(int(x), int(m), float(dm[x, m])) for x, m in zip(*np.nonzero(dm < -slack))]
        res["monotone_in_channel"] = _result("monotone_in_channel", bad)
    else:
        res["monotone_in_channel"] = _result("monotone_in_channel", [], note="skipped: channel not FSD")

    d2 = np.diff(h, 2, axis=0)
    res["increasing_differences"] = _result(
        "increasing_differences",
        [(int(x) + 1, int(m), float(d2[x, m])) for x, m in zip(*np.nonzero(d2 < -slack))],
    )

    dz = np.diff(solution.z_active, axis=0)
    res["monotone_transmission"] = _result(
        "monotone_transmission", [(int(x) + 1, int(m)) for x, m in zip(*np.nonzero(dz < 0))]
    )

    du = np.diff(solution.u.astype(int), axis=0)
    res["threshold_policy"] = _result(
        "threshold_policy", [(int(x) + 1, int(m)) for x, m in zip(*np.nonzero(du < 0))]
    )
    return StructureReport(solution.subsidy, res)


def check_submodularity(solution: DpSolution, slack: float = STRUCTURE_SLACK) -> list[tuple]:
    """Unit-square violations ``(z, x, m, amount)`` of submodularity of the active Q-function."""
    mdp = solution.mdp
    Q = mdp.active_q(mdp.expected_next(solution.bias))
    nx = Q.shape[0]
    bad = []
    for x in range(1, nx - 1):
        for z in range(0, x):
            # h(z+1, x+1) - h(z, x+1) <= h(z+1, x) - h(z, x)
            lhs = Q[x + 1, z + 1] - Q[x + 1, z]
            rhs = Q[x, z + 1] - Q[x, z]
            for m in np.flatnonzero(lhs - rhs > slack * np.maximum(1.0, np.abs(Q[x, z]))):
                bad.append((z, x, int(m), float(lhs[m] - rhs[m])))
    return bad


def solve_grid(
    spec: QueueSpec,
    grid: Iterable[float],
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> list[DpSolution]:
    """Solve at every subsidy in ``grid``, warm-starting from the previous bias."""
    out = []
    h = None
    for lam in grid:
        sol = solve_rvi(SubsidizedMdp(spec, float(lam)), tol=tol, max_iter=max_iter, initial=h)
        h = sol.bias
        out.append(sol)
    return out


def check_subsidy_profile(
    solutions: Sequence[DpSolution], slack: float = STRUCTURE_SLACK
) -> dict[str, list[tuple]]:
    """Monotonicity and concavity of ``lam -> V_lam(x, mu)`` over solved grid points.

    Grid spacing may be uneven, so concavity is checked as non-increasing
    slopes. Slack is relative to the magnitude of the values compared, since
    grid points spanning the full index bracket carry values near ``1e15``.
    """
    lams = np.array([s.subsidy for s in solutions])
    if np.any(np.diff(lams) <= 0):
        raise ContractViolation("subsidy grid must be strictly increasing")
    # Values are evaluated as beta + bias to keep the bias digits when |beta| is huge.
    betas = np.array([s.beta for s in solutions])
    bias = np.stack([s.bias for s in solutions])
    V = betas[:, None, None] + bias
    scale = np.maximum(1.0, np.abs(V))
    out = {"increasing": [], "concave": []}
    dV = np.diff(V, axis=0)
    tol_inc = slack * np.maximum(scale[1:], scale[:-1])
    for i, x, m in zip(*np.nonzero(dV < -tol_inc)):
        out["increasing"].append((float(lams[i]), float(lams[i + 1]), int(x), int(m), float(dV[i, x, m])))
    if len(solutions) >= 3:
        slopes = dV / np.diff(lams)[:, None, None]
        # slope tolerance: value slack divided by the smaller adjacent spacing
        gaps = np.diff(lams)
        tol_s = slack * np.maximum(scale[2:], np.maximum(scale[1:-1], scale[:-2])) / np.minimum(gaps[1:], gaps[:-1])[:, None, None]
        dS = np.diff(slopes, axis=0)
        for i, x, m in zip(*np.nonzero(dS > tol_s)):
            out["concave"].append((float(lams[i + 1]), int(x), int(m), float(dS[i, x, m])))
    return out


def write_solution_csv(solution: DpSolution, path: str | Path, header: Sequence[str] = ()) -> None:
    """Rows ``x, mu_index, V, u, z``; run metadata goes into ``#`` comment lines."""
    path = Path(path)
    V = solution.values
    with path.open("w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write(
            f"# lambda={solution.subsidy!r} beta={solution.beta!r} "
            f"residual={solution.residual!r} iterations={solution.iterations}\n"
        )
        w = csv.writer(fh)
        w.writerow(["x", "mu_index", "V", "u", "z"])
        nx, ns = V.shape
        for x in range(nx):
            for m in range(ns):
                w.writerow([x, m, repr(float(V[x, m])), int(solution.u[x, m]), int(solution.z[x, m])])

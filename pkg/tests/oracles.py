"""Independent reference computations used by the tests.

Nothing here calls the package's solver code: kernels are rebuilt from the
Poisson formula with ``math`` and the average cost comes from enumerating
every stationary deterministic policy and solving for its stationary law.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def poisson_pmf(k: int, rate: float) -> float:
    return math.exp(-rate) * rate**k / math.factorial(k)


def next_queue_law(b: int, M: int, rate: float) -> np.ndarray:
    """Law of ``min(b + K, M)`` for K ~ Poisson(rate), tail summed as one minus the rest."""
    p = np.zeros(M + 1)
    for y in range(b, M):
        p[y] = poisson_pmf(y - b, rate)
    p[M] = 1.0 - p[:M].sum()
    return p


def enumerate_policies(M, C, rate, energy, mus=(1.0,), Q=((1.0,),), lam=0.0):
    """Yield ``(policy, beta, h)`` for every stationary deterministic policy.

    ``policy[x, m]`` is -1 for passive or ``z`` for transmitting z packets.
    ``h`` solves the policy's evaluation equations with ``h(0, 0) = 0``.
    """
    S = len(mus)
    Q = np.asarray(Q, dtype=float)
    laws = [next_queue_law(b, M, rate) for b in range(M + 1)]
    states = [(x, m) for x in range(M + 1) for m in range(S)]
    n = len(states)
    choices = [[-1] + list(range(x + 1)) for x, _ in states]
    for combo in itertools.product(*choices):
        P = np.zeros((n, n))
        c = np.zeros(n)
        for i, ((x, m), a) in enumerate(zip(states, combo)):
            b = x if a < 0 else x - a
            c[i] = C * x + (lam if a < 0 else mus[m] * energy(a))
            for j, (y, w) in enumerate(states):
                P[i, j] = laws[b][y] * Q[m, w]
        # [I - P, 1] [h; beta] = c with h(0,0) = 0
        A = np.zeros((n + 1, n + 1))
        A[:n, :n] = np.eye(n) - P
        A[:n, n] = 1.0
        A[n, 0] = 1.0
        rhs = np.concatenate([c, [0.0]])
        sol = np.linalg.solve(A, rhs)
        policy = np.array(combo).reshape(M + 1, S)
        yield policy, float(sol[n]), sol[:n].reshape(M + 1, S)


def optimal_by_enumeration(M, C, rate, energy, mus=(1.0,), Q=((1.0,),), lam=0.0):
    """Minimal average cost and the evaluations of all policies attaining it within 1e-11."""
    results = list(enumerate_policies(M, C, rate, energy, mus, Q, lam))
    beta = min(r[1] for r in results)
    return beta, [r for r in results if r[1] <= beta + 1e-11]


def exp_energy(z: int) -> float:
    return 2.0**z - 1.0


def quad_energy(z: int) -> float:
    return float(z * z)


def gap_from_relative_values(h, x, m, lam, M, C, rate, energy, mus=(1.0,), Q=((1.0,),)):
    """Active minus passive right-hand side at ``(x, m)`` for a relative value table ``h``."""
    Q = np.asarray(Q, dtype=float)
    laws = [next_queue_law(b, M, rate) for b in range(M + 1)]

    def expected(b):
        return float(laws[b] @ h @ Q[m])

    active = min(mus[m] * energy(z) + expected(x - z) for z in range(x + 1))
    return active - (lam + expected(x))

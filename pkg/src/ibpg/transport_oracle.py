"""Entropic transport subproblems solved by log-domain Sinkhorn scaling.

With the entropy kernel and ``P`` the indicator of the doubly stochastic
set, each outer subproblem reads

    min <C, X> + eps * D(X, S)   s.t.  X e = e,  X^T e = e,

whose solution is ``Diag(u) Xi Diag(v)`` with ``Xi = S * exp(-C / eps)``.
Everything is kept in log space; ``Xi`` itself is never formed, so small
``eps`` cannot overflow it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bregman_core import EntropyKernel, bregman_distance
from .solvers import InexactCertificate, OracleBudgetExceeded, SubproblemQuery

log = logging.getLogger(__name__)

ANCHOR_FLOOR = 1e-300


def lse_rows(A: np.ndarray) -> np.ndarray:
    """``log sum_j exp(A_ij)`` per row, with the row max subtracted first."""
    m = A.max(axis=1)
    return np.log(np.exp(A - m[:, None]).sum(axis=1)) + m


def lse_cols(A: np.ndarray) -> np.ndarray:
    m = A.max(axis=0)
    return np.log(np.exp(A - m[None, :]).sum(axis=0)) + m


@dataclass
class TransportSubproblem:
    """Cost ``M = C - eps log S``, regulariser ``eps`` and ``log_xi = -M / eps``."""

    M: np.ndarray
    epsilon: float
    log_xi: np.ndarray

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @classmethod
    def from_cost(cls, C: np.ndarray, epsilon: float, log_S: np.ndarray) -> "TransportSubproblem":
        if not epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        C = np.asarray(C, dtype=np.float64)
        log_S = np.asarray(log_S, dtype=np.float64)
        if C.shape != log_S.shape or C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ValueError(f"cost {C.shape} and anchor {log_S.shape} must be equal square shapes")
        M = C - epsilon * log_S
        if not np.all(np.isfinite(M)):
            raise ValueError("cost matrix has non-finite entries")
        return cls(M, float(epsilon), log_S - C / epsilon)

    @classmethod
    def from_M(cls, M: np.ndarray, epsilon: float) -> "TransportSubproblem":
        M = np.asarray(M, dtype=np.float64)
        return cls(M, float(epsilon), -M / epsilon)


@dataclass
class ScalingState:
    log_u: np.ndarray
    log_v: np.ndarray
    t: int = 0

    @classmethod
    def cold(cls, n: int) -> "ScalingState":
        """``u = v = e``."""
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "ScalingState":
        return ScalingState(self.log_u.copy(), self.log_v.copy(), self.t)


def update_u(sub: TransportSubproblem, log_v: np.ndarray) -> np.ndarray:
    """``u = e ./ (Xi v)`` in log space."""
    return -lse_rows(sub.log_xi + log_v[None, :])


def update_v(sub: TransportSubproblem, log_u: np.ndarray) -> np.ndarray:
    """``v = e ./ (Xi^T u)`` in log space."""
    return -lse_cols(sub.log_xi + log_u[:, None])


def sinkhorn_step(sub: TransportSubproblem, state: ScalingState) -> ScalingState:
    """One full Sinkhorn sweep (rows, then columns)."""
    log_u = update_u(sub, state.log_v)
    log_v = update_v(sub, log_u)
    if not (np.all(np.isfinite(log_u)) and np.all(np.isfinite(log_v))):
        raise FloatingPointError("Sinkhorn scaling produced non-finite values")
    return ScalingState(log_u, log_v, state.t + 1)


def log_plan(sub: TransportSubproblem, state: ScalingState) -> np.ndarray:
    return state.log_u[:, None] + sub.log_xi + state.log_v[None, :]


def assemble_plan(sub: TransportSubproblem, state: ScalingState) -> np.ndarray:
    """``X = Diag(u) Xi Diag(v)``."""
    return np.exp(log_plan(sub, state))


def round_to_polytope(X: np.ndarray, strict: bool = True) -> np.ndarray:
    """Round a positive matrix onto the doubly stochastic set.

    Rows with sum above one are scaled down, then columns likewise, and
    the remaining row and column deficits are filled by one rank-one
    update. ``strict=False`` admits zero entries (underflowed plans).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {X.shape}")
    if strict and not np.all(X > 0):
        raise ValueError("rounding needs a strictly positive matrix")
    if not strict and not np.all(X >= 0):
        raise ValueError("rounding needs a nonnegative matrix")
    r = X.sum(axis=1)
    with np.errstate(divide="ignore"):
        X = X * np.minimum(1.0, 1.0 / r)[:, None]
        c = X.sum(axis=0)
        X = X * np.minimum(1.0, 1.0 / c)[None, :]
    err_r = np.maximum(1.0 - X.sum(axis=1), 0.0)
    err_c = np.maximum(1.0 - X.sum(axis=0), 0.0)
    total = err_r.sum()
    if total > 0:
        X = X + np.outer(err_r, err_c) / total
    return X


def sinkhorn_direct(M: np.ndarray, epsilon: float, n_iter: int) -> np.ndarray:
    """Textbook Sinkhorn on ``Xi = exp(-M / eps)`` without log stabilisation.

    Only safe for moderate ``|M / eps|``; kept to cross-check the log-domain path.
    """
    Xi = np.exp(-np.asarray(M, dtype=np.float64) / epsilon)
    n = Xi.shape[0]
    v = np.ones(n)
    for _ in range(n_iter):
        u = 1.0 / (Xi @ v)
        v = 1.0 / (Xi.T @ u)
    return u[:, None] * Xi * v[None, :]


def subgradient_residual(C: np.ndarray, epsilon: float, log_X: np.ndarray, log_S: np.ndarray) -> float:
    """Non-additive part of ``C + eps (log X - log S)``, relative to its size.

    The optimality condition of the subproblem requires this matrix to be
    of the form ``a e^T + e b^T`` (a normal vector of the affine set). The
    best such fit is removed and the largest leftover entry is divided by
    ``1 + max |R|``.
    """
    R = C + epsilon * (log_X - log_S)
    fit = R.mean(axis=1)[:, None] + R.mean(axis=0)[None, :] - R.mean()
    return float(np.max(np.abs(R - fit)) / (1.0 + np.max(np.abs(R))))


@dataclass
class SinkhornOracle:
    """Inexact oracle for the entropic transport subproblem.

    The cost is the query gradient and ``eps`` the query's proximal weight.
    Every ``check_every`` sweeps (and when the inner budget is reached) the
    plan is rounded and ``D(round(X), X)`` compared against the query's
    ``mu_tol``. The certificate's interior point is the plan ``X`` with its
    exact ``log X`` attached, the feasible point is the rounded plan, and
    ``Delta = 0``, ``nu = 0`` hold exactly.
    """

    check_every: int = 10
    warm_start: bool = False
    max_inner: int | None = None
    kernel: EntropyKernel = field(default_factory=EntropyKernel)
    _state: ScalingState | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.check_every < 1:
            raise ValueError("check_every must be >= 1")

    def solve(self, query: SubproblemQuery) -> InexactCertificate:
        S = np.asarray(query.anchor, dtype=np.float64)
        if query.anchor_grad is not None:
            log_S = query.anchor_grad
        else:
            log_S = np.log(np.maximum(S, ANCHOR_FLOOR))
        sub = TransportSubproblem.from_cost(query.gradient, query.lam, log_S)
        n = sub.n
        if self.warm_start and self._state is not None and self._state.log_u.shape == (n,):
            state = ScalingState(self._state.log_u, self._state.log_v, 0)
        else:
            state = ScalingState.cold(n)
        budget = query.inner_budget
        if self.max_inner is not None:
            budget = self.max_inner if budget is None else min(budget, self.max_inner)
        if budget is not None and budget <= 0:
            raise OracleBudgetExceeded(0)
        while True:
            state = sinkhorn_step(sub, state)
            at_cap = budget is not None and state.t >= budget
            if state.t % self.check_every and not at_cap:
                continue
            lX = log_plan(sub, state)
            X = np.exp(lX)
            Xt = round_to_polytope(X, strict=False)
            mu = bregman_distance(self.kernel, Xt, X, lX)
            if mu <= query.mu_tol:
                break
            if at_cap:
                raise OracleBudgetExceeded(state.t, f"k={query.k}: mu={mu:.3e} above {query.mu_tol:.3e} "
                                                    f"after {state.t} Sinkhorn sweeps")
        self._state = state
        return InexactCertificate(X, Xt, 0.0, mu, 0.0, state.t, interior_grad=lX)

"""Inexact Bregman proximal gradient drivers and their bound verifiers.

Both drivers are generic over a :class:`ProblemDefinition` and an oracle
object exposing ``solve(query) -> InexactCertificate``. The oracle returns a
pair of points: an interior point that carries the kernel gradient and a
feasible point on which the objective is evaluated. The solver checks every
returned pair against the scheduled tolerances before accepting it.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Protocol

import numpy as np

from .bregman_core import (BregmanKernel, DomainError, QuadraticKernel, SmoothnessDescriptor,
                           as_point, bregman_distance, inner)
from .schedules import (ErrorAccumulator, ThetaSchedule, ToleranceSchedule,
                        check_prefactor_bound, tolerance_at, vartheta, vartheta_array)

log = logging.getLogger(__name__)


class SolverAbort(RuntimeError):
    """The run was stopped because an iterate or certificate was invalid."""


class CertificateViolation(SolverAbort):
    pass


class OracleBudgetExceeded(RuntimeError):
    """The oracle ran out of inner iterations before meeting its tolerance."""

    def __init__(self, inner_iterations: int, message: str = "oracle budget exceeded"):
        super().__init__(message)
        self.inner_iterations = inner_iterations


@dataclass(frozen=True)
class ProblemDefinition:
    """``min P(x) + f(x)`` with a kernel and smoothness constants.

    ``P`` returns the value of the nonsmooth part (``inf`` outside its
    domain). ``interior_box`` restricts where interior iterates may live.
    """

    f: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    P: Callable[[np.ndarray], float]
    kernel: BregmanKernel
    smoothness: SmoothnessDescriptor
    name: str = "problem"

    def F(self, x: np.ndarray) -> float:
        """Objective at a point of ``dom P``; raises if ``P`` is infinite there."""
        p = self.P(x)
        if not math.isfinite(p):
            raise DomainError("F evaluated outside dom P")
        return p + self.f(x)

    @property
    def L(self) -> float:
        return self.smoothness.L


def check_gradient(problem: ProblemDefinition, points, rel_step: float = 1e-6) -> float:
    """Largest relative error between ``grad`` and central differences of ``f``.

    The error at a point is ``||g - g_fd|| / max(||g||, ||g_fd||, 1e-300)``.
    """
    worst = 0.0
    for x in points:
        x = np.asarray(x, dtype=np.float64)
        g = problem.grad(x)
        h = rel_step * max(1.0, float(np.max(np.abs(x))))
        fd = np.empty_like(x)
        flat, fdf = x.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = problem.f(x)
            flat[i] = old - h
            fm = problem.f(x)
            flat[i] = old
            fdf[i] = (fp - fm) / (2 * h)
        denom = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-300)
        worst = max(worst, float(np.linalg.norm(g - fd) / denom))
    return worst


@dataclass
class SubproblemQuery:
    """One subproblem ``min P(x) + <gradient, x> + lam D(x, anchor)``.

    ``anchor_grad`` caches the kernel gradient at the anchor when known
    exactly (entropy: ``log anchor`` before any underflow).
    """

    gradient: np.ndarray
    anchor: np.ndarray
    lam: float
    mu_tol: float = 0.0
    eta_tol: float = 0.0
    nu_tol: float = 0.0
    anchor_grad: np.ndarray | None = None
    k: int = 0
    inner_budget: int | None = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"proximal weight must be positive, got {self.lam}")


@dataclass
class InexactCertificate:
    """Witness of the two-point inexact condition for one subproblem."""

    interior_point: np.ndarray
    feasible_point: np.ndarray
    delta_norm: float
    mu_measured: float
    nu_claimed: float = 0.0
    inner_iterations: int = 0
    interior_grad: np.ndarray | None = None


class Oracle(Protocol):
    def solve(self, query: SubproblemQuery) -> InexactCertificate: ...


class EuclideanProjectionOracle:
    """Exact oracle for the quadratic kernel: ``x+ = project(anchor - gradient / lam)``."""

    def __init__(self, project: Callable[[np.ndarray], np.ndarray]):
        self.project = project

    def solve(self, query: SubproblemQuery) -> InexactCertificate:
        x = self.project(query.anchor - query.gradient / query.lam)
        return InexactCertificate(x, x, 0.0, 0.0, 0.0, 1)


def project_capped_simplex(y: np.ndarray, total: float = 1.0, cap: float = np.inf) -> np.ndarray:
    """Euclidean projection onto ``{x : 0 <= x <= cap, sum x = total}``.

    The multiplier ``t`` with ``sum clip(y - t, 0, cap) = total`` is found
    exactly: the sum is piecewise linear in ``t`` with breakpoints at
    ``y`` and ``y - cap``, so the root is located between two consecutive
    breakpoints and then interpolated.
    """
    y = np.asarray(y, dtype=np.float64)
    if cap * y.size < total:
        raise ValueError("capped simplex is empty")
    bps = np.unique(np.concatenate((y, y - cap)) if np.isfinite(cap) else y)

    def mass(t):
        return float(np.sum(np.clip(y - t, 0.0, cap)))

    # mass is nonincreasing in t; mass(bps[-1]) = 0
    vals = np.array([mass(t) for t in bps])
    j = int(np.searchsorted(-vals, -total, side="left"))
    if j == 0:
        # root below every breakpoint: all entries strictly inside (0, cap)
        t = bps[0] - (total - vals[0]) / y.size
    else:
        t0, t1, m0, m1 = bps[j - 1], bps[j], vals[j - 1], vals[j]
        t = t0 if m0 == m1 else t0 + (m0 - total) * (t1 - t0) / (m0 - m1)
    return np.clip(y - t, 0.0, cap)


@dataclass
class Budget:
    """Stopping caps; the first one reached ends the run."""

    max_outer: int | None = None
    max_inner: int | None = 500_000
    max_seconds: float | None = None


CSV_COLUMNS = ("k", "fval", "nfval", "mu_measured", "delta_norm", "inner_iters",
               "cum_inner_iters", "theta", "bound_rhs_last", "bound_rhs_avg")


@dataclass
class TraceRecord:
    k: int
    fval: float
    nfval: float
    mu_measured: float
    delta_norm: float
    inner_iters: int
    cum_inner_iters: int
    theta: float = math.nan
    bound_rhs_last: float = math.nan
    bound_rhs_avg: float = math.nan
    # not serialised to CSV; used by the bound checks
    nu_claimed: float = 0.0
    lam: float = math.nan
    eta_tol: float = 0.0
    mu_tol: float = 0.0
    nu_tol: float = 0.0
    feasible_norm: float = 0.0
    step_norm: float = 0.0
    fval_avg: float = math.nan


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return ""
    return format(v, ".17g")


@dataclass
class RunTrace:
    """Per-iteration records of one run plus metadata.

    Row ``k`` describes outer iteration ``k``: the subproblem anchored at
    ``x^k`` (or ``z^k``) and the objective at the resulting feasible point.
    With ``retain_iterates`` the run also keeps, for every ``k``, the
    interior points (with kernel gradients) and feasible points.
    """

    solver: str
    records: list[TraceRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    stop_reason: str = ""
    # retained iterates, index k -> array
    interior: list[np.ndarray] | None = None
    interior_grad: list[np.ndarray | None] | None = None
    feasible: list[np.ndarray] | None = None
    x_seq: list[np.ndarray] | None = None
    x0: np.ndarray | None = None
    x0_grad: np.ndarray | None = None
    mu_init: float = 0.0

    @property
    def retained(self) -> bool:
        return self.interior is not None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def write(self, csv_path, meta_path=None) -> None:
        with open(csv_path, "w", newline="") as fh:
            fh.write(self.to_csv())
        if meta_path is not None:
            meta = dict(self.metadata, solver=self.solver, stop_reason=self.stop_reason,
                        n_records=len(self.records))
            with open(meta_path, "w") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def read(cls, csv_path, meta_path=None) -> "RunTrace":
        meta = {}
        if meta_path is not None:
            with open(meta_path) as fh:
                meta = json.load(fh)
        records = []
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals = {c: (float(row[c]) if row[c] != "" else math.nan) for c in CSV_COLUMNS}
                for c in ("k", "inner_iters", "cum_inner_iters"):
                    vals[c] = int(vals[c])
                records.append(TraceRecord(**vals))
        trace = cls(meta.pop("solver", "unknown"), records, meta)
        trace.stop_reason = meta.pop("stop_reason", "")
        return trace


def _nfval(fval: float, F_star: float | None) -> float:
    if F_star is None:
        return math.nan
    gap = abs(fval - F_star)
    return gap / abs(F_star) if F_star != 0 else gap


def _admit(problem: ProblemDefinition, query: SubproblemQuery, cert: InexactCertificate,
           normalization: str, eta_tilde: float) -> float:
    """Validate a certificate against the query; return the measured ``mu``."""
    kern = problem.kernel
    box = problem.smoothness.restriction
    x_in, x_fe = cert.interior_point, cert.feasible_point
    if cert.interior_grad is not None:
        if not np.all(np.isfinite(cert.interior_grad)):
            raise SolverAbort(f"k={query.k}: interior point has non-finite kernel gradient")
    elif not kern.interior_member(x_in):
        raise SolverAbort(f"k={query.k}: interior point not in int dom phi")
    if not box.contains(x_in):
        raise SolverAbort(f"k={query.k}: interior point outside the restriction box")
    if not kern.domain_member(x_fe) or not math.isfinite(problem.P(x_fe)):
        raise SolverAbort(f"k={query.k}: feasible point outside dom P ∩ dom phi")
    mu = bregman_distance(kern, x_fe, x_in, cert.interior_grad)
    eta_tol = query.eta_tol
    if normalization == "iterate_normalized":
        eta_tol = eta_tilde / (float(np.linalg.norm(x_fe)) + 1.0)
    slack = 1e-12 * max(1.0, mu)
    if mu > query.mu_tol + slack:
        raise CertificateViolation(f"k={query.k}: D(feasible, interior)={mu:.3e} > mu_k={query.mu_tol:.3e}")
    if cert.delta_norm > eta_tol + 1e-15:
        raise CertificateViolation(f"k={query.k}: ||Delta||={cert.delta_norm:.3e} > eta_k={eta_tol:.3e}")
    if cert.nu_claimed > query.nu_tol + 1e-15:
        raise CertificateViolation(f"k={query.k}: nu={cert.nu_claimed:.3e} > nu_k={query.nu_tol:.3e}")
    return mu


class _Clock:
    def __init__(self, budget: Budget):
        self.budget = budget
        self.start = time.perf_counter()

    def remaining_inner(self, used: int) -> int | None:
        if self.budget.max_inner is None:
            return None
        return self.budget.max_inner - used

    def stop_reason(self, k: int, used: int) -> str | None:
        b = self.budget
        if b.max_outer is not None and k >= b.max_outer:
            return "outer budget"
        if b.max_inner is not None and used >= b.max_inner:
            return "inner budget"
        if b.max_seconds is not None and time.perf_counter() - self.start >= b.max_seconds:
            return "wall time"
        return None


def _initial_grad(kernel: BregmanKernel, x0: np.ndarray) -> np.ndarray:
    if not kernel.interior_member(x0):
        raise SolverAbort("initial point not in int dom phi")
    return kernel.grad(x0)


def ibpg_run(problem: ProblemDefinition, oracle: Oracle, tolerances: ToleranceSchedule,
             x0, budget: Budget, x0_tilde=None, *, retain_iterates: bool = False,
             reference: tuple[np.ndarray, float] | None = None,
             rounding: Callable[[np.ndarray], np.ndarray] | None = None) -> RunTrace:
    """Run the inexact Bregman proximal gradient method.

    Parameters
    ----------
    problem, oracle
        Problem data and inexact subproblem solver.
    tolerances
        Error budgets ``(eta_k, mu_k, nu_k)``.
    x0
        Interior starting point inside the restriction box.
    budget
        Outer / cumulative inner / wall-clock caps.
    x0_tilde
        Feasible companion of ``x0``. Defaults to ``rounding(x0)``.
    retain_iterates
        Keep every interior and feasible iterate on the trace.
    reference
        ``(x_star, F_star)``; enables ``nfval`` and the bound columns.
    """
    kern = problem.kernel
    L = problem.L
    x = as_point(x0, "x0")
    x_grad = _initial_grad(kern, x)
    if not problem.smoothness.restriction.contains(x):
        raise SolverAbort("initial point outside the restriction box")
    if x0_tilde is None:
        if rounding is None:
            raise ValueError("x0_tilde or rounding is required")
        x0_tilde = rounding(x)
    x_tilde = as_point(x0_tilde, "x0_tilde")
    if not math.isfinite(problem.P(x_tilde)):
        raise SolverAbort("x0_tilde outside dom P")

    trace = RunTrace("ibpg")
    trace.x0, trace.x0_grad = x.copy(), x_grad.copy()
    trace.mu_init = bregman_distance(kern, x_tilde, x, x_grad)
    if retain_iterates:
        trace.interior, trace.interior_grad, trace.feasible = [x.copy()], [x_grad.copy()], [x_tilde.copy()]
    acc = ErrorAccumulator(L=L, gamma=1.0)
    F_star = None
    if reference is not None:
        x_star, F_star = reference
        dist0 = bregman_distance(kern, x_star, x, x_grad)
        ref_norm = float(np.linalg.norm(x_star))
    feas_sum = np.zeros_like(x)
    prev_norm = float(np.linalg.norm(x_tilde))
    mu_prev = trace.mu_init
    clock = _Clock(budget)
    used = 0
    k = 0
    while True:
        reason = clock.stop_reason(k, used)
        if reason:
            break
        eta, mu_tol, nu = tolerance_at(tolerances, k, iterate_norms=0.0)
        query = SubproblemQuery(problem.grad(x), x, L if L > 0 else 1.0, mu_tol, eta, nu,
                                anchor_grad=x_grad, k=k, inner_budget=clock.remaining_inner(used))
        try:
            cert = oracle.solve(query)
        except OracleBudgetExceeded as exc:
            used += exc.inner_iterations
            reason = "inner budget"
            break
        mu = _admit(problem, query, cert, tolerances.normalization, tolerances.eta(k))
        used += cert.inner_iterations
        x_new, x_tilde_new = cert.interior_point, cert.feasible_point
        fval = problem.F(x_tilde_new)
        feas_norm = float(np.linalg.norm(x_tilde_new))
        step = float(np.linalg.norm(x_tilde_new - x_tilde))
        acc.update(cert.delta_norm, mu, cert.nu_claimed, feas_norm, prev_norm, step, mu_prev)
        feas_sum += x_tilde_new
        rec = TraceRecord(k, fval, _nfval(fval, F_star), mu, cert.delta_norm, cert.inner_iterations,
                          used, nu_claimed=cert.nu_claimed, lam=query.lam, eta_tol=eta, mu_tol=mu_tol,
                          nu_tol=nu, feasible_norm=feas_norm, step_norm=step,
                          fval_avg=problem.F(feas_sum / (k + 1)))
        if reference is not None:
            rec.bound_rhs_avg, rec.bound_rhs_last = acc.ibpg_rhs(dist0, ref_norm)
        trace.records.append(rec)
        x = x_new
        x_grad = cert.interior_grad if cert.interior_grad is not None else kern.grad(x_new)
        x_tilde = x_tilde_new
        prev_norm, mu_prev = feas_norm, mu
        if retain_iterates:
            trace.interior.append(x.copy())
            trace.interior_grad.append(x_grad.copy())
            trace.feasible.append(x_tilde.copy())
        k += 1
    trace.stop_reason = reason
    trace.metadata.update(solver="ibpg", L=L, tolerances=tolerances.describe(),
                          outer_iterations=k, inner_iterations=used)
    return trace


def vibpg_run(problem: ProblemDefinition, oracle: Oracle, theta_schedule: ThetaSchedule,
              tolerances: ToleranceSchedule, x0, z0, budget: Budget, *,
              retain_iterates: bool = False,
              reference: tuple[np.ndarray, float] | None = None) -> RunTrace:
    """Run the inertial variant.

    Each iteration forms ``y = (1-theta) x + theta z``, solves the
    subproblem anchored at ``z`` with weight ``tau L theta^(gamma-1)``, sets
    ``z`` to the interior point and moves ``x`` towards the feasible point.
    ``x0`` must be feasible, ``z0`` interior.
    """
    kern = problem.kernel
    sm = problem.smoothness
    L, tau, gamma = sm.L, sm.tau, sm.gamma
    if theta_schedule.gamma != gamma:
        log.warning("theta schedule gamma %s differs from problem gamma %s", theta_schedule.gamma, gamma)
    x = as_point(x0, "x0")
    if not (kern.domain_member(x) and math.isfinite(problem.P(x))):
        raise SolverAbort("x0 outside dom P ∩ dom phi")
    z = as_point(z0, "z0")
    z_grad = _initial_grad(kern, z)
    if not sm.restriction.contains(z):
        raise SolverAbort("z0 outside the restriction box")

    trace = RunTrace("vibpg")
    trace.x0, trace.x0_grad = z.copy(), z_grad.copy()
    if retain_iterates:
        trace.interior, trace.interior_grad = [z.copy()], [z_grad.copy()]
        trace.feasible, trace.x_seq = [None], [x.copy()]
    acc = ErrorAccumulator(L=L, gamma=gamma)
    F_star = None
    alpha = theta_schedule.alpha if theta_schedule.alpha is not None else gamma + 1
    if reference is not None:
        x_star, F_star = reference
        dist0 = bregman_distance(kern, x_star, z, z_grad)
        ref_norm = float(np.linalg.norm(x_star))
    clock = _Clock(budget)
    used = 0
    k = 0
    while True:
        reason = clock.stop_reason(k, used)
        if reason:
            break
        theta = theta_schedule(k)
        vartheta(theta_schedule, k)  # raises on an invalid schedule
        y = (1 - theta) * x + theta * z
        lam = tau * L * theta ** (gamma - 1)
        eta, mu_tol, nu = tolerance_at(tolerances, k, iterate_norms=0.0)
        query = SubproblemQuery(problem.grad(y), z, lam if lam > 0 else 1.0, mu_tol, eta, nu,
                                anchor_grad=z_grad, k=k, inner_budget=clock.remaining_inner(used))
        try:
            cert = oracle.solve(query)
        except OracleBudgetExceeded as exc:
            used += exc.inner_iterations
            reason = "inner budget"
            break
        mu = _admit(problem, query, cert, tolerances.normalization, tolerances.eta(k))
        used += cert.inner_iterations
        z_tilde = cert.feasible_point
        x_new = (1 - theta) * x + theta * z_tilde
        fval = problem.F(x_new)
        feas_norm = float(np.linalg.norm(z_tilde))
        acc.update(cert.delta_norm, mu, cert.nu_claimed, feas_norm, theta=theta)
        rec = TraceRecord(k, fval, _nfval(fval, F_star), mu, cert.delta_norm, cert.inner_iterations,
                          used, theta=theta, nu_claimed=cert.nu_claimed, lam=query.lam, eta_tol=eta,
                          mu_tol=mu_tol, nu_tol=nu, feasible_norm=feas_norm,
                          step_norm=float(np.linalg.norm(x_new - x)))
        if reference is not None:
            rec.bound_rhs_last = acc.vibpg_rhs(dist0, ref_norm, tau, alpha)
        trace.records.append(rec)
        x = x_new
        z = cert.interior_point
        z_grad = cert.interior_grad if cert.interior_grad is not None else kern.grad(z)
        if retain_iterates:
            trace.interior.append(z.copy())
            trace.interior_grad.append(z_grad.copy())
            trace.feasible.append(z_tilde.copy())
            trace.x_seq.append(x.copy())
        k += 1
    trace.stop_reason = reason
    trace.metadata.update(solver="vibpg", L=L, tau=tau, gamma=gamma, alpha=alpha,
                          theta=theta_schedule.describe(), tolerances=tolerances.describe(),
                          outer_iterations=k, inner_iterations=used)
    return trace


# ---------------------------------------------------------------------------
# verification


@dataclass
class BoundReport:
    """Pointwise comparison of a bound's two sides along a run."""

    lhs: np.ndarray
    rhs: np.ndarray
    scale: np.ndarray

    @property
    def violation(self) -> np.ndarray:
        return (self.lhs - self.rhs) / self.scale

    @property
    def max_violation(self) -> float:
        return float(np.max(self.violation)) if self.lhs.size else -math.inf

    def holds(self, rtol: float = 1e-8) -> bool:
        return self.max_violation <= rtol


def _require_retained(trace: RunTrace):
    if not trace.retained:
        raise ValueError("trace was recorded without retained iterates")


def check_descent_inequality(trace: RunTrace, problem: ProblemDefinition, x_ref) -> BoundReport:
    """Per-iteration sufficient-descent inequality of the plain method at ``x_ref``.

    ``F(x~^{k+1}) - F(x) <= L D(x, x^k) - L D(x, x^{k+1}) + delta_k ||x~^{k+1} - x|| + L mu_k + nu_k``
    with the measured ``delta_k`` and ``mu_k`` of each certificate. Each
    violation is scaled by ``1 + |F(x~^{k+1})| + |F(x)| + L D(x, x^k) + L D(x, x^{k+1})``.
    """
    _require_retained(trace)
    if trace.solver != "ibpg":
        raise ValueError("descent inequality applies to ibpg traces")
    kern, L = problem.kernel, problem.L
    x_ref = np.asarray(x_ref, dtype=np.float64)
    F_ref = problem.f(x_ref)  # x_ref lies in dom P
    dists = [bregman_distance(kern, x_ref, xi, gi) for xi, gi in zip(trace.interior, trace.interior_grad)]
    lhs, rhs, scale = [], [], []
    for rec in trace.records:
        k = rec.k
        xt = trace.feasible[k + 1]
        lhs_k = rec.fval - F_ref
        rhs_k = (L * dists[k] - L * dists[k + 1] + rec.delta_norm * float(np.linalg.norm(xt - x_ref))
                 + L * rec.mu_measured + rec.nu_claimed)
        lhs.append(lhs_k)
        rhs.append(rhs_k)
        scale.append(1.0 + abs(rec.fval) + abs(F_ref) + L * dists[k] + L * dists[k + 1])
    return BoundReport(np.array(lhs), np.array(rhs), np.array(scale))


def near_monotone_residuals(trace: RunTrace) -> BoundReport:
    """``F(x~^{k+1}) - F(x~^k) <= xi_k`` along a plain run (``F(x~^0)`` is skipped)."""
    recs = trace.records
    L = trace.metadata.get("L", 0.0)
    lhs, rhs, scale = [], [], []
    for prev, rec in zip(recs, recs[1:]):
        xi = rec.delta_norm * rec.step_norm + L * (rec.mu_measured + prev.mu_measured) + rec.nu_claimed
        lhs.append(rec.fval - prev.fval)
        rhs.append(xi)
        scale.append(1.0 + abs(rec.fval) + abs(prev.fval))
    return BoundReport(np.array(lhs), np.array(rhs), np.array(scale))


@dataclass
class IbpgBoundReport:
    average: BoundReport
    last: BoundReport

    def holds(self, rtol: float = 1e-8) -> bool:
        return self.average.holds(rtol) and self.last.holds(rtol)

    @property
    def max_violation(self) -> float:
        return max(self.average.max_violation, self.last.max_violation)


def check_ibpg_bounds(trace: RunTrace, problem: ProblemDefinition, x_star, F_star: float | None = None
                      ) -> IbpgBoundReport:
    """Check the averaged- and last-iterate complexity bounds at ``x = x_star``.

    Uses the records only (measured certificate values, feasible-iterate
    norms and step norms), so iterates need not be retained. ``F_star``
    defaults to ``F(x_star)``; the violation scale is ``max(1, |F_star|, |rhs|)``.
    """
    if trace.solver != "ibpg":
        raise ValueError("not an ibpg trace")
    kern, L = problem.kernel, problem.L
    x_star = np.asarray(x_star, dtype=np.float64)
    if F_star is None:
        F_star = problem.f(x_star)
    dist0 = bregman_distance(kern, x_star, trace.x0, trace.x0_grad)
    ref_norm = float(np.linalg.norm(x_star))
    acc = ErrorAccumulator(L=L)
    mu_prev = trace.mu_init
    prev_norm = None
    la, ra, ll, rl = [], [], [], []
    for rec in trace.records:
        acc.update(rec.delta_norm, rec.mu_measured, rec.nu_claimed, rec.feasible_norm,
                   prev_norm or 0.0, rec.step_norm, mu_prev)
        avg, last = acc.ibpg_rhs(dist0, ref_norm)
        la.append(rec.fval_avg - F_star)
        ra.append(avg)
        ll.append(rec.fval - F_star)
        rl.append(last)
        mu_prev, prev_norm = rec.mu_measured, rec.feasible_norm
    ra, rl = np.array(ra), np.array(rl)
    sa = np.maximum(np.maximum(1.0, abs(F_star)), np.abs(ra))
    sl = np.maximum(np.maximum(1.0, abs(F_star)), np.abs(rl))
    return IbpgBoundReport(BoundReport(np.array(la), ra, sa), BoundReport(np.array(ll), rl, sl))


@dataclass
class VibpgBoundReport:
    bound: BoundReport
    lyapunov: BoundReport | None
    prefactor_ok: bool
    prefactor_worst: float
    prefactor_limit: float

    def holds(self, rtol: float = 1e-8) -> bool:
        ok = self.bound.holds(rtol) and self.prefactor_ok
        if self.lyapunov is not None:
            ok = ok and self.lyapunov.holds(rtol)
        return ok


def check_vibpg_bound(trace: RunTrace, problem: ProblemDefinition, x_star, F_star: float | None = None,
                      theta_schedule: ThetaSchedule | None = None, prefactor_k_max: int = 10_000
                      ) -> VibpgBoundReport:
    """Check the inertial method's complexity bound at ``x = x_star``.

    ``e(x_star) = F(x_star) - F_star`` multiplies the cumulative slack of
    the theta sequence; with ``F_star`` defaulting to ``F(x_star)`` it is 0.
    When iterates are retained the per-iteration Lyapunov inequality is
    also checked. The prefactor bound on the slack sum is checked up to
    ``prefactor_k_max``.
    """
    if trace.solver != "vibpg":
        raise ValueError("not a vibpg trace")
    meta = trace.metadata
    sm = problem.smoothness
    kern, L, tau, gamma = problem.kernel, sm.L, sm.tau, sm.gamma
    if theta_schedule is None:
        th = meta["theta"]
        theta_schedule = ThetaSchedule(th["mode"], th["gamma"], th["alpha"])
    alpha = theta_schedule.alpha if theta_schedule.alpha is not None else gamma + 1
    x_star = np.asarray(x_star, dtype=np.float64)
    F_ref = problem.f(x_star)
    if F_star is None:
        F_star = F_ref
    excess = F_ref - F_star
    dist0 = bregman_distance(kern, x_star, trace.x0, trace.x0_grad)
    ref_norm = float(np.linalg.norm(x_star))
    n = len(trace.records)
    thetas = theta_schedule.materialize(n + 1)
    vt_cum = np.cumsum(np.maximum(vartheta_array(thetas, gamma), 0.0))
    acc = ErrorAccumulator(L=L, gamma=gamma)
    lhs, rhs = [], []
    for rec in trace.records:
        acc.update(rec.delta_norm, rec.mu_measured, rec.nu_claimed, rec.feasible_norm, theta=rec.theta)
        lhs.append(rec.fval - F_star)
        rhs.append(acc.vibpg_rhs(dist0, ref_norm, tau, alpha, vt_cum[rec.k], excess))
    rhs = np.array(rhs)
    scale = np.maximum(np.maximum(1.0, abs(F_star)), np.abs(rhs))
    bound = BoundReport(np.array(lhs), rhs, scale)

    lyap = None
    if trace.retained:
        lyap = _lyapunov(trace, problem, x_star, F_ref, F_star, thetas)
    ok, worst, limit = check_prefactor_bound(theta_schedule, prefactor_k_max)
    return VibpgBoundReport(bound, lyap, ok, worst, limit)


def _lyapunov(trace, problem, x_ref, F_ref, F_star, thetas) -> BoundReport:
    # (1-th_{k+1})/th_{k+1}^g (F(x^{k+1})-F(x)) + tau L D(x, z^{k+1})
    #   <= (1-th_k)/th_k^g (F(x^k)-F(x)) + tau L D(x, z^k) + e(x) vt_{k+1}
    #      + th_k^{1-g} delta_k ||z~^{k+1} - x|| + tau L mu_k + th_k^{1-g} nu_k
    sm = problem.smoothness
    kern, L, tau, g = problem.kernel, sm.L, sm.tau, sm.gamma
    excess = F_ref - F_star
    dists = [bregman_distance(kern, x_ref, zi, gi) for zi, gi in zip(trace.interior, trace.interior_grad)]
    vt = vartheta_array(thetas, g)
    F0 = problem.f(trace.x_seq[0])
    lhs, rhs, scale = [], [], []
    for rec in trace.records:
        k = rec.k
        th, th1 = thetas[k], thetas[k + 1]
        Fk = F0 if k == 0 else trace.records[k - 1].fval
        Fk1 = rec.fval
        zt = trace.feasible[k + 1]
        a1 = (1 - th1) / th1 ** g * (Fk1 - F_ref)
        a0 = (1 - th) / th ** g * (Fk - F_ref)
        w = th ** (1 - g)
        lhs_k = a1 + tau * L * dists[k + 1]
        rhs_k = (a0 + tau * L * dists[k] + excess * max(vt[k + 1], 0.0)
                 + w * rec.delta_norm * float(np.linalg.norm(zt - x_ref)) + tau * L * rec.mu_measured
                 + w * rec.nu_claimed)
        lhs.append(lhs_k)
        rhs.append(rhs_k)
        scale.append(1.0 + abs(a1) + abs(a0) + tau * L * (dists[k] + dists[k + 1])
                     + (abs(Fk1) + abs(F_ref)) / th1 ** g)
    return BoundReport(np.array(lhs), np.array(rhs), np.array(scale))


def averaged_iterate(trace: RunTrace, k: int) -> np.ndarray:
    """Mean of the feasible iterates ``x~^1 .. x~^k``."""
    _require_retained(trace)
    if k <= 0:
        raise ValueError("averaged iterate needs k >= 1")
    if k >= len(trace.feasible):
        raise ValueError(f"only {len(trace.feasible) - 1} iterates retained")
    return np.mean(trace.feasible[1:k + 1], axis=0)

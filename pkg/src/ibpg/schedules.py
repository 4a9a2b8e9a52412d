"""Parameter sequences for the two solvers.

``ThetaSchedule`` produces the extrapolation weights of the inertial method,
``ToleranceSchedule`` the per-iteration error budgets ``(eta_k, mu_k, nu_k)``,
and ``ErrorAccumulator`` the running error sums that appear on the right-hand
side of the convergence bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ScheduleError(ValueError):
    """A schedule was configured with invalid parameters."""


class ScheduleInvalidError(ScheduleError):
    """A theta sequence violates the nonnegativity of its slack."""


# ---------------------------------------------------------------------------
# theta


def theta_closed_form(k: int, alpha: float = 5.0, gamma: float = 2.0) -> float:
    """``theta_k = (alpha - 1) / (k + alpha - 1)``, equal to 1 at ``k = 0`` (and ``k = -1``)."""
    if alpha < gamma + 1:
        raise ScheduleError(f"alpha={alpha} must be >= gamma + 1 = {gamma + 1}")
    if k <= 0:
        return 1.0
    return (alpha - 1.0) / (k + alpha - 1.0)


def _root_residual(theta: float, target: float, gamma: float) -> float:
    return (1.0 - theta) / theta ** gamma - target


def theta_root_find(theta_prev: float, gamma: float, max_iter: int = 200) -> float:
    """Solve ``(1 - t) / t^gamma = 1 / theta_prev^gamma`` for ``t`` in (0, theta_prev).

    Bisection. The left-hand side decreases from +inf to 0 on (0, 1], and
    every admissible successor is at least ``theta_prev / (1 + theta_prev)``,
    so that value and ``theta_prev`` bracket the root. The returned value is
    the upper bracket end, which keeps the slack ``vartheta`` nonnegative.
    """
    if not 0 < theta_prev <= 1:
        raise ScheduleError(f"theta_prev must lie in (0, 1], got {theta_prev}")
    target = theta_prev ** -gamma
    lo = theta_prev / (1.0 + theta_prev)
    hi = theta_prev
    # residual(lo) >= 0 >= residual(hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _root_residual(mid, target, gamma) > 0:
            lo = mid
        else:
            hi = mid
    return hi


class ThetaSchedule:
    """Lazily materialised sequence ``theta_{-1} = theta_0 = 1, theta_1, ...``.

    Modes
    -----
    ``closed_form``
        ``theta_k = (alpha - 1) / (k + alpha - 1)``.
    ``root_find``
        Equality form of the slack condition, solved by bisection. The
        implied ``alpha`` is ``gamma + 1``.
    ``custom``
        Values from a user callable ``k -> theta_k`` for ``k >= 1``; used
        for negative controls and degenerate test schedules.

    Not thread-safe while growing; call ``materialize(k_max)`` before sharing.
    """

    def __init__(self, mode: str = "closed_form", gamma: float = 2.0,
                 alpha: float | None = None,
                 func: Callable[[int], float] | None = None):
        if gamma < 1:
            raise ScheduleError(f"gamma must be >= 1, got {gamma}")
        self.mode = mode
        self.gamma = float(gamma)
        if mode == "closed_form":
            self.alpha = 5.0 if alpha is None else float(alpha)
            if self.alpha < self.gamma + 1:
                raise ScheduleError(f"alpha={self.alpha} must be >= gamma + 1")
        elif mode == "root_find":
            self.alpha = self.gamma + 1 if alpha is None else float(alpha)
        elif mode == "custom":
            if func is None:
                raise ScheduleError("custom mode needs func")
            self.alpha = alpha
        else:
            raise ScheduleError(f"unknown theta mode {mode!r}")
        self._func = func
        self._values = [1.0]  # theta_0

    def __repr__(self):
        return f"ThetaSchedule(mode={self.mode!r}, gamma={self.gamma}, alpha={self.alpha})"

    def describe(self) -> dict:
        return {"mode": self.mode, "gamma": self.gamma, "alpha": self.alpha}

    def materialize(self, k_max: int) -> np.ndarray:
        """Return ``theta_0 .. theta_{k_max}`` as an array."""
        vals = self._values
        n_have = len(vals)
        if k_max >= n_have:
            if self.mode == "closed_form":
                ks = np.arange(n_have, k_max + 1, dtype=np.float64)
                vals.extend(((self.alpha - 1.0) / (ks + self.alpha - 1.0)).tolist())
            elif self.mode == "root_find":
                g = self.gamma
                prev = vals[-1]
                for _ in range(n_have, k_max + 1):
                    prev = theta_root_find(prev, g)
                    vals.append(prev)
            else:
                vals.extend(float(self._func(k)) for k in range(n_have, k_max + 1))
        return np.asarray(vals[: k_max + 1])

    def __call__(self, k: int) -> float:
        if k <= 0:
            return 1.0
        if k >= len(self._values):
            self.materialize(k)
        return self._values[k]

    def vartheta(self, k: int) -> float:
        return vartheta(self, k)


def vartheta(schedule: ThetaSchedule, k: int, rtol: float = 1e-14) -> float:
    """Slack ``1 / theta_{k-1}^gamma - (1 - theta_k) / theta_k^gamma``.

    Raises ``ScheduleInvalidError`` when it is negative beyond ``rtol``
    relative to ``1 / theta_{k-1}^gamma``; round-off negatives return 0.
    """
    g = schedule.gamma
    prev = schedule(k - 1)
    cur = schedule(k)
    if not 0 < cur <= 1:
        raise ScheduleInvalidError(f"theta_{k}={cur} outside (0, 1]")
    head = prev ** -g
    val = head - (1.0 - cur) / cur ** g
    if val < 0:
        if val < -rtol * head:
            raise ScheduleInvalidError(f"vartheta_{k}={val:.3e} < 0")
        return 0.0
    return val


def vartheta_array(thetas: np.ndarray, gamma: float) -> np.ndarray:
    """Vectorised slacks for ``theta_0 .. theta_K``, without validation."""
    prev = np.concatenate(([1.0], thetas[:-1]))
    return prev ** -gamma - (1.0 - thetas) / thetas ** gamma


def vartheta_sum_bound(k: int, gamma: float) -> float:
    """Upper bound ``2 + (k + 1 + gamma)^gamma / gamma`` on ``sum_{i<=k} vartheta_i``."""
    return 2.0 + (k + 1 + gamma) ** gamma / gamma


def prefactor_bound(alpha: float, gamma: float) -> float:
    """Uniform bound on ``((alpha-1)/(k+alpha-1))^gamma * sum_{i<=k} vartheta_i``."""
    return 2.0 + max((alpha - 1) ** gamma, (1 + gamma) ** gamma) / gamma


@dataclass
class ThetaReport:
    passed: bool
    k_max: int
    first_violation: int | None = None
    condition: str | None = None
    detail: str = ""


def validate_theta(schedule: ThetaSchedule, k_max: int, gamma: float | None = None,
                   atol: float = 1e-14) -> ThetaReport:
    """Check a theta sequence against every admissibility condition up to ``k_max``.

    Conditions, in order: ``theta_k`` in (0, 1]; ``theta_k <= (alpha-1)/(k+alpha-1)``
    when an ``alpha`` is known; nonnegative slack (relative tolerance
    ``atol`` against ``1/theta_{k-1}^gamma``); the lower bound
    ``theta_k >= 1/(k+gamma)``; the bound on the cumulative slack.
    """
    g = schedule.gamma if gamma is None else float(gamma)
    th = schedule.materialize(k_max)
    ks = np.arange(k_max + 1, dtype=np.float64)

    def fail(mask, cond, detail):
        idx = int(np.argmax(mask))
        return ThetaReport(False, k_max, idx, cond, detail.format(k=idx))

    bad = ~((th > 0) & (th <= 1))
    if bad.any():
        return fail(bad, "range", "theta_{k} outside (0, 1]")
    if schedule.alpha is not None:
        a = schedule.alpha
        cap = (a - 1.0) / (ks + a - 1.0)
        cap[0] = 1.0
        bad = th > cap + atol
        if bad.any():
            return fail(bad, "upper", "theta_{k} exceeds (alpha-1)/(k+alpha-1)")
    vt = vartheta_array(th, g)
    head = np.concatenate(([1.0], th[:-1])) ** -g
    bad = vt < -atol * head
    if bad.any():
        return fail(bad, "vartheta", "vartheta_{k} negative")
    bad = th < 1.0 / (ks + g) - atol
    if bad.any():
        return fail(bad, "lower", "theta_{k} below 1/(k+gamma)")
    csum = np.cumsum(np.maximum(vt, 0.0))
    bound = 2.0 + (ks + 1 + g) ** g / g
    bad = csum > bound * (1 + atol)
    if bad.any():
        return fail(bad, "vartheta_sum", "cumulative vartheta exceeds bound at k={k}")
    return ThetaReport(True, k_max)


def check_prefactor_bound(schedule: ThetaSchedule, k_max: int) -> tuple[bool, float, float]:
    """Check ``((alpha-1)/(k+alpha-1))^gamma sum vartheta <= prefactor_bound`` for ``k <= k_max``.

    Returns ``(holds, worst value, bound)``.
    """
    g, a = schedule.gamma, schedule.alpha
    th = schedule.materialize(k_max)
    ks = np.arange(k_max + 1, dtype=np.float64)
    lhs = ((a - 1) / (ks + a - 1)) ** g * np.cumsum(np.maximum(vartheta_array(th, g), 0.0))
    bound = prefactor_bound(a, g)
    worst = float(lhs.max())
    return worst <= bound, worst, bound


# ---------------------------------------------------------------------------
# tolerances


@dataclass(frozen=True)
class Rule:
    """Analytic decay rule for one tolerance sequence.

    kind ``zero``: identically 0. kind ``power``: ``max(c / (k+1)^p, floor)``.
    kind ``geometric``: ``max(c * rate^k, floor)``. kind ``custom``: ``func(k)``.
    """

    kind: str = "zero"
    p: float = 1.0
    c: float = 1.0
    rate: float = 0.5
    floor: float = 1e-10
    func: Callable[[int], float] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("zero", "power", "geometric", "custom"):
            raise ScheduleError(f"unknown rule kind {self.kind!r}")
        if self.kind == "power" and not self.p > 0:
            raise ScheduleError(f"power rule needs p > 0, got {self.p}")
        if self.kind == "geometric" and not 0 < self.rate < 1:
            raise ScheduleError(f"geometric rule needs rate in (0, 1), got {self.rate}")
        if self.kind == "custom" and self.func is None:
            raise ScheduleError("custom rule needs func")

    def __call__(self, k: int) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "power":
            return max(self.c / (k + 1) ** self.p, self.floor)
        if self.kind == "geometric":
            return max(self.c * self.rate ** k, self.floor)
        val = float(self.func(k))
        if val < 0:
            raise ScheduleError(f"custom rule returned negative value {val} at k={k}")
        return val

    def describe(self) -> dict:
        if self.kind == "zero":
            return {"kind": "zero"}
        if self.kind == "power":
            return {"kind": "power", "p": self.p, "c": self.c, "floor": self.floor}
        if self.kind == "geometric":
            return {"kind": "geometric", "rate": self.rate, "c": self.c, "floor": self.floor}
        return {"kind": "custom"}


ZERO = Rule("zero")

NORMALIZATIONS = ("none", "bounded_domain", "iterate_normalized")


@dataclass(frozen=True)
class ToleranceSchedule:
    """The three error budgets of the inexact condition.

    With ``normalization="iterate_normalized"`` the ``eta`` rule gives
    ``eta_tilde_k`` and the admissible residual is
    ``eta_tilde_k / (||feasible iterate|| + 1)``.
    """

    eta: Rule = ZERO
    mu: Rule = ZERO
    nu: Rule = ZERO
    normalization: str = "none"

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ScheduleError(f"unknown normalization {self.normalization!r}")

    @classmethod
    def power(cls, p: float, floor: float = 1e-10) -> "ToleranceSchedule":
        """``eta = nu = 0`` and ``mu_k = max(1/(k+1)^p, floor)``."""
        return cls(mu=Rule("power", p=p, floor=floor))

    def describe(self) -> dict:
        return {"eta": self.eta.describe(), "mu": self.mu.describe(),
                "nu": self.nu.describe(), "normalization": self.normalization}


def tolerance_at(schedule: ToleranceSchedule, k: int,
                 iterate_norms: float | Sequence[float] | None = None) -> tuple[float, float, float]:
    """Return ``(eta_k, mu_k, nu_k)``.

    ``iterate_norms`` is required in ``iterate_normalized`` mode: a single
    norm ``||x~^{k+1}||`` or several norms that are summed.
    """
    eta = schedule.eta(k)
    if schedule.normalization == "iterate_normalized":
        if iterate_norms is None:
            raise ScheduleError("iterate_normalized schedule needs iterate norms")
        total = float(np.sum(iterate_norms))
        eta = eta / (total + 1.0)
    return eta, schedule.mu(k), schedule.nu(k)


AVG_RATE = "satisfies-avg-rate"
LAST_RATE = "satisfies-last-iterate-rate"
VIBPG_RATE = "satisfies-vibpg-rate"
INSUFFICIENT = "insufficient"
UNCLASSIFIED = "unclassified"


def _summable_order(rule: Rule) -> float | None:
    """Largest ``m`` with ``sum k^m a_k < inf`` being guaranteed, as a threshold.

    Returns ``inf`` for zero and geometric rules, ``p - 1`` for power rules
    (``sum k^m k^-p`` converges iff ``m < p - 1``), ``None`` otherwise.
    The numerical floor is ignored.
    """
    if rule.kind in ("zero", "geometric"):
        return math.inf
    if rule.kind == "power":
        return rule.p - 1.0
    return None


def summability_class(schedule: ToleranceSchedule, solver_kind: str = "any",
                      gamma: float = 2.0) -> frozenset[str]:
    """Which convergence rates a schedule's decay guarantees, assuming bounded iterates.

    ``solver_kind`` is ``"ibpg"``, ``"vibpg"`` or ``"any"``; it decides which
    labels count when deciding ``insufficient``.
    """
    orders = [_summable_order(r) for r in (schedule.eta, schedule.mu, schedule.nu)]
    if any(o is None for o in orders):
        return frozenset({UNCLASSIFIED})
    eta_o, mu_o, nu_o = orders

    def summable(order, weight):  # sum k^weight a_k < inf
        return weight < order

    labels = set()
    if all(summable(o, 0) for o in orders):
        labels.add(AVG_RATE)
    if all(summable(o, 1) for o in orders):
        labels.add(LAST_RATE)
    # theta_k ~ 1/k, so theta^(1-gamma) weights eta and nu by k^(gamma-1)
    if summable(eta_o, gamma - 1) and summable(mu_o, 0) and summable(nu_o, gamma - 1):
        labels.add(VIBPG_RATE)
    relevant = {"ibpg": {AVG_RATE, LAST_RATE}, "vibpg": {VIBPG_RATE},
                "any": {AVG_RATE, LAST_RATE, VIBPG_RATE}}[solver_kind]
    if not labels & relevant:
        labels.add(INSUFFICIENT)
    return frozenset(labels)


def weighted_cesaro(alpha: np.ndarray) -> np.ndarray:
    """Running values ``(1/k) sum_{i<k} i alpha_i`` for ``k = 1 .. len(alpha)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    i = np.arange(alpha.size, dtype=np.float64)
    return np.cumsum(i * alpha) / np.arange(1, alpha.size + 1)


# ---------------------------------------------------------------------------
# running sums


@dataclass
class ErrorAccumulator:
    """Running error sums of the convergence bounds.

    Fed once per outer iteration with the measured (or scheduled) errors of
    that iteration; every sum is nondecreasing in ``k``.
    """

    L: float
    gamma: float = 1.0
    k: int = -1
    sum_eta_norm: float = 0.0       # sum eta_i (||x~^{i+1}|| + 1)
    sum_eta_feas: float = 0.0       # sum eta_i ||x~^{i+1}||
    sum_eta: float = 0.0
    sum_mu: float = 0.0
    sum_nu: float = 0.0
    sum_k_eta_norm: float = 0.0     # sum i eta_i (||x~^{i+1}|| + ||x~^i|| + 1)
    sum_k_mu: float = 0.0
    sum_k_nu: float = 0.0
    sum_theta_eta_norm: float = 0.0  # sum theta_i^(1-gamma) eta_i (||z~^{i+1}|| + 1)
    sum_theta_eta_feas: float = 0.0  # sum theta_i^(1-gamma) eta_i ||z~^{i+1}||
    sum_theta_eta: float = 0.0
    sum_theta_nu: float = 0.0
    sum_k_xi: float = 0.0           # sum i xi_i
    last_xi: float = 0.0

    def update(self, eta: float, mu: float, nu: float, feas_norm: float,
               prev_feas_norm: float = 0.0, step_norm: float = 0.0,
               mu_prev: float = 0.0, theta: float = 1.0) -> None:
        self.k += 1
        i = self.k
        self.sum_eta_norm += eta * (feas_norm + 1)
        self.sum_eta_feas += eta * feas_norm
        self.sum_eta += eta
        self.sum_mu += mu
        self.sum_nu += nu
        self.sum_k_eta_norm += i * eta * (feas_norm + prev_feas_norm + 1)
        self.sum_k_mu += i * mu
        self.sum_k_nu += i * nu
        w = theta ** (1 - self.gamma)
        self.sum_theta_eta_norm += w * eta * (feas_norm + 1)
        self.sum_theta_eta_feas += w * eta * feas_norm
        self.sum_theta_eta += w * eta
        self.sum_theta_nu += w * nu
        self.last_xi = eta * step_norm + self.L * (mu + mu_prev) + nu
        self.sum_k_xi += i * self.last_xi

    def ibpg_rhs(self, dist0: float, ref_norm: float) -> tuple[float, float]:
        """Right-hand sides ``(average-iterate, last-iterate)`` at the current k."""
        k = self.k
        base = dist0 * self.L + self.sum_eta_feas + ref_norm * self.sum_eta + self.L * self.sum_mu + self.sum_nu
        return base / (k + 1), (base + self.sum_k_xi) / (k + 1)

    def vibpg_rhs(self, dist0: float, ref_norm: float, tau: float, alpha: float,
                  vartheta_sum: float = 0.0, excess: float = 0.0) -> float:
        k = self.k
        pref = ((alpha - 1) / (k + alpha - 1)) ** self.gamma
        inner = (tau * self.L * dist0 + excess * vartheta_sum + self.sum_theta_eta_feas
                 + ref_norm * self.sum_theta_eta + tau * self.L * self.sum_mu + self.sum_theta_nu)
        return pref * inner

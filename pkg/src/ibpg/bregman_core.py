"""Bregman kernels, the induced distance, and sampled smoothness checks.

Two kernels are shipped: the Boltzmann-Shannon entropy
``phi(x) = sum x (log x - 1)`` on the nonnegative orthant and the squared
Euclidean norm ``phi(x) = 0.5 ||x||^2``. Points are plain float64 arrays of
any shape; all inner products are Frobenius.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

# distances in [-CLAMP_RTOL * scale, 0) are round-off and become 0
CLAMP_RTOL = 1e-12


class DomainError(ValueError):
    """A point lies outside the region where an operation is defined."""


class NotInDomainError(DomainError):
    pass


class NotInteriorError(DomainError):
    pass


class NegativeDistanceError(ArithmeticError):
    """A Bregman distance came out negative beyond round-off."""


def as_point(x, name: str = "x") -> np.ndarray:
    """Return ``x`` as a float64 array, rejecting NaN and infinite entries."""
    arr = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def inner(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.vdot(a, b))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``{x : lower <= x <= upper}`` (entrywise)."""

    lower: float | np.ndarray = -np.inf
    upper: float | np.ndarray = np.inf

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


UNIT_BOX = Box(0.0, 1.0)


@dataclass(frozen=True)
class SmoothnessDescriptor:
    """Constants of restricted relative smoothness.

    ``L`` is the relative smoothness constant, ``tau`` and ``gamma`` the
    constants of the interpolated inequality used by the inertial method,
    and ``restriction`` the box on which both inequalities are claimed.
    """

    L: float
    tau: float = 1.0
    gamma: float = 1.0
    restriction: Box = field(default_factory=Box)

    def __post_init__(self):
        if not self.L >= 0:
            raise ValueError(f"L must be nonnegative, got {self.L}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.gamma >= 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")


class BregmanKernel:
    """Base class for a Legendre kernel.

    Subclasses implement ``value``, ``grad``, ``domain_member``,
    ``interior_member`` and ``_divergence`` (the distance formula without
    domain checks or clamping).
    """

    name = "kernel"

    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def domain_member(self, x: np.ndarray) -> bool:
        raise NotImplementedError

    def interior_member(self, x: np.ndarray) -> bool:
        raise NotImplementedError

    def _divergence(self, x, y, grad_y=None) -> tuple[float, float]:
        """Return ``(D(x, y), scale)`` where scale bounds the summed magnitudes."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class EntropyKernel(BregmanKernel):
    """``phi(x) = sum x log x - x`` with the convention ``0 log 0 = 0``.

    ``floor`` is the smallest entry accepted as an interior point; the
    gradient ``log x`` is never taken below it.
    """

    name = "entropy"

    def __init__(self, floor: float = 1e-300):
        self.floor = floor

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        pos = x > 0
        return float(np.sum(x[pos] * (np.log(x[pos]) - 1.0)))

    def grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        if not self.interior_member(x):
            raise NotInteriorError("entropy gradient requested outside the interior")
        return np.log(x)

    def domain_member(self, x):
        return bool(np.all(np.isfinite(x)) and np.all(np.asarray(x) >= 0))

    def interior_member(self, x):
        return bool(np.all(np.isfinite(x)) and np.all(np.asarray(x) >= self.floor))

    def _divergence(self, x, y, grad_y=None):
        # sum x log(x/y) - x + y; log1p form where y is representable,
        # log difference against the supplied gradient elsewhere
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        terms = y.copy()
        pos = x > 0
        direct = pos & (y >= self.floor)
        xd, yd = x[direct], y[direct]
        diff = xd - yd
        rel = diff / yd
        # log1p is accurate near x == y; plain logs elsewhere (log1p(-1) = -inf)
        near = np.abs(rel) < 0.5
        logs = np.where(near, np.log1p(np.where(near, rel, 0.0)), np.log(xd) - np.log(yd))
        terms[direct] = xd * logs - diff
        rest = pos & ~direct
        if np.any(rest):
            if grad_y is None:
                raise NotInteriorError("y not interior")
            xr = x[rest]
            terms[rest] = xr * (np.log(xr) - grad_y[rest]) - xr + y[rest]
        scale = float(np.sum(np.abs(x) + np.abs(y)))
        return float(np.sum(terms)), scale


class QuadraticKernel(BregmanKernel):
    """``phi(x) = 0.5 ||x||^2``; the distance is half the squared Euclidean distance."""

    name = "quadratic"

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * inner(x, x)

    def grad(self, x):
        return np.array(x, dtype=np.float64)

    def domain_member(self, x):
        return bool(np.all(np.isfinite(x)))

    def interior_member(self, x):
        return self.domain_member(x)

    def _divergence(self, x, y, grad_y=None):
        d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
        val = 0.5 * inner(d, d)
        return val, val


def _check_pair(kernel: BregmanKernel, x, y, grad_y):
    if not kernel.domain_member(x):
        raise NotInDomainError("x not in domain")
    if grad_y is not None:
        if not np.all(np.isfinite(grad_y)):
            raise NotInteriorError("y not interior")
    elif not kernel.interior_member(y):
        raise NotInteriorError("y not interior")


def _clamp(val: float, scale: float) -> float:
    if val >= 0:
        return val
    if val >= -CLAMP_RTOL * max(scale, 1.0):
        return 0.0
    raise NegativeDistanceError(f"Bregman distance {val:.3e} below round-off (scale {scale:.3e})")


def bregman_distance(kernel: BregmanKernel, x, y, grad_y=None) -> float:
    """Bregman distance ``D(x, y) = phi(x) - phi(y) - <grad phi(y), x - y>``.

    Parameters
    ----------
    kernel : BregmanKernel
    x : array
        Point in the kernel domain.
    y : array
        Interior point.
    grad_y : array, optional
        Cached ``grad phi(y)``. For the entropy kernel this is ``log y`` and
        lets the distance be evaluated where ``y`` has underflowed.

    Returns
    -------
    float
        Nonnegative distance. Round-off negatives are clamped to zero.
    """
    _check_pair(kernel, x, y, grad_y)
    val, scale = kernel._divergence(x, y, grad_y)
    return _clamp(val, scale)


def bregman_distance_generic(kernel: BregmanKernel, x, y) -> float:
    """The textbook three-term formula; kept as a cross-check of the explicit ones."""
    _check_pair(kernel, x, y, None)
    gy = kernel.grad(y)
    val = kernel.value(x) - kernel.value(y) - inner(gy, np.asarray(x) - np.asarray(y))
    scale = abs(kernel.value(x)) + abs(kernel.value(y)) + abs(inner(gy, np.asarray(x) - np.asarray(y)))
    return _clamp(val, scale)


def four_points_gap(kernel: BregmanKernel, a, b, c, d) -> float:
    """Defect of the four points identity; zero up to round-off for any valid quadruple.

    ``<grad phi(a) - grad phi(b), c - d> - [D(c,b) + D(d,a) - D(c,a) - D(d,b)]``
    with ``a, b`` interior and ``c, d`` in the domain.
    """
    for name, p in (("a", a), ("b", b)):
        if not kernel.interior_member(p):
            raise NotInteriorError(f"{name} not interior")
    for name, p in (("c", c), ("d", d)):
        if not kernel.domain_member(p):
            raise NotInDomainError(f"{name} not in domain")
    lhs = inner(kernel.grad(a) - kernel.grad(b), np.asarray(c) - np.asarray(d))
    rhs = (bregman_distance(kernel, c, b) + bregman_distance(kernel, d, a)
           - bregman_distance(kernel, c, a) - bregman_distance(kernel, d, b))
    return lhs - rhs


@dataclass
class ViolationReport:
    """Largest violation of a sampled inequality ``lhs <= rhs``.

    ``max_violation`` is ``max(lhs - rhs)``; ``max_relative`` divides each
    violation by ``1 + |lhs| + |rhs|`` first.
    """

    max_violation: float
    max_relative: float
    worst_index: int
    n_samples: int

    @property
    def holds(self) -> bool:
        return self.max_violation <= 0

    def holds_within(self, rtol: float) -> bool:
        return self.max_relative <= rtol


def _report(lhs: Sequence[float], rhs: Sequence[float]) -> ViolationReport:
    lhs = np.asarray(lhs, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if lhs.size == 0:
        return ViolationReport(-np.inf, -np.inf, -1, 0)
    viol = lhs - rhs
    rel = viol / (1.0 + np.abs(lhs) + np.abs(rhs))
    i = int(np.argmax(viol))
    return ViolationReport(float(viol[i]), float(np.max(rel)), i, lhs.size)


def check_relative_smoothness(
    f: Callable[[np.ndarray], float],
    grad_f: Callable[[np.ndarray], np.ndarray],
    kernel: BregmanKernel,
    desc: SmoothnessDescriptor,
    samples: Iterable[tuple[np.ndarray, np.ndarray]],
) -> ViolationReport:
    """Sample ``f(y) <= f(x) + <grad f(x), y - x> + L D(y, x)`` over pairs ``(x, y)``.

    ``x`` must be interior and ``y`` in the domain, both inside the
    restriction box. Violations are reported, never raised.
    """
    lhs, rhs = [], []
    for x, y in samples:
        if not (desc.restriction.contains(x) and desc.restriction.contains(y)):
            raise DomainError("sample outside the restriction set")
        # grouped so that an exact linear model cancels to exactly zero
        lhs.append(f(y) - (f(x) + inner(grad_f(x), y - x)))
        rhs.append(desc.L * bregman_distance(kernel, y, x))
    return _report(lhs, rhs)


def check_restricted_exponent(
    f: Callable[[np.ndarray], float],
    grad_f: Callable[[np.ndarray], np.ndarray],
    kernel: BregmanKernel,
    desc: SmoothnessDescriptor,
    samples: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray, float]],
) -> ViolationReport:
    """Sample ``D_f((1-t)x + t zt, (1-t)x + t z) <= tau L t^gamma D(zt, z)``.

    Each sample is ``(x, z_tilde, z, theta)`` with ``theta`` in (0, 1].
    """
    lhs, rhs = [], []
    for x, zt, z, theta in samples:
        if not 0 < theta <= 1:
            raise ValueError(f"theta must lie in (0, 1], got {theta}")
        u = (1 - theta) * x + theta * zt
        w = (1 - theta) * x + theta * z
        lhs.append(f(u) - f(w) - inner(grad_f(w), u - w))
        rhs.append(desc.tau * desc.L * theta ** desc.gamma * bregman_distance(kernel, zt, z))
    return _report(lhs, rhs)

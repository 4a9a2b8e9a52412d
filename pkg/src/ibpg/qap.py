"""Convex QAP relaxation ``min <X, H(X)>`` over doubly stochastic matrices.

``H(X) = A X B - S X - X T`` with ``S = V Diag(s) V^T`` and
``T = U Diag(t) U^T`` built from the eigendecompositions of ``A`` and
``B``. In eigen coordinates ``Y = V^T X U`` the operator is diagonal with
entries ``lam_i om_j - s_i - t_j``; choosing ``(s, t)`` as optimal duals of
the assignment problem with cost ``lam_i om_j`` makes every entry
nonnegative, so ``H`` is positive semidefinite.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bregman_core import UNIT_BOX, EntropyKernel, SmoothnessDescriptor
from .solvers import ProblemDefinition
from .transport_oracle import round_to_polytope

log = logging.getLogger(__name__)


class InstanceError(ValueError):
    """Malformed or unusable instance file."""


class ReferenceSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class QapInstance:
    n: int
    A: np.ndarray
    B: np.ndarray
    name: str = "instance"


def _symmetrize(M: np.ndarray, label: str, name: str) -> np.ndarray:
    scale = max(1.0, float(np.max(np.abs(M))))
    asym = float(np.max(np.abs(M - M.T)))
    if asym > 1e-9 * scale:
        log.warning("%s: matrix %s is not symmetric (max |M - M^T| = %g); using (M + M^T)/2",
                    name, label, asym)
    return 0.5 * (M + M.T)


def parse_qaplib(text: str, name: str = "instance") -> QapInstance:
    """Parse QAPLIB text: ``n`` followed by the ``n^2`` entries of ``A`` and of ``B``.

    Blank lines and lines starting with ``#`` are skipped.
    """
    tokens = []
    for line in text.splitlines():
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tokens.extend(s.split())
    if not tokens:
        raise InstanceError(f"{name}: empty instance")
    try:
        n = int(tokens[0])
    except ValueError:
        raise InstanceError(f"{name}: first token {tokens[0]!r} is not an integer") from None
    if n <= 1:
        raise InstanceError(f"{name}: dimension must be at least 2, got {n}")
    expected = 1 + 2 * n * n
    if len(tokens) != expected:
        raise InstanceError(f"{name}: expected {expected} tokens for n={n}, found {len(tokens)}")
    try:
        vals = np.array([float(t) for t in tokens[1:]])
    except ValueError as exc:
        raise InstanceError(f"{name}: non-numeric token ({exc})") from None
    if not np.all(np.isfinite(vals)):
        raise InstanceError(f"{name}: non-finite entry")
    A = vals[: n * n].reshape(n, n)
    B = vals[n * n:].reshape(n, n)
    return QapInstance(n, _symmetrize(A, "A", name), _symmetrize(B, "B", name), name)


def load_instance(path) -> QapInstance:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InstanceError(f"cannot read {path}: {exc}") from None
    return parse_qaplib(text, path.stem)


def format_qaplib(inst: QapInstance) -> str:
    def block(M):
        return "\n".join(" ".join(f"{v:g}" for v in row) for row in M)
    return f"{inst.n}\n\n{block(inst.A)}\n\n{block(inst.B)}\n"


def grid_instance(rows: int, cols: int, seed: int = 0, max_flow: int = 10,
                  density: float = 0.6, name: str | None = None) -> QapInstance:
    """Synthetic instance in the style of the Nugent family.

    ``A`` holds Manhattan distances between the cells of a ``rows x cols``
    grid, ``B`` symmetric integer flows in ``1..max_flow`` present with
    probability ``density``, zero diagonal.
    """
    n = rows * cols
    r, c = np.divmod(np.arange(n), cols)
    A = np.abs(r[:, None] - r[None, :]) + np.abs(c[:, None] - c[None, :])
    rng = np.random.default_rng(seed)
    upper = rng.integers(1, max_flow + 1, size=(n, n)) * (rng.random((n, n)) < density)
    B = np.triu(upper, 1)
    B = B + B.T
    return QapInstance(n, A.astype(np.float64), B.astype(np.float64),
                       name or f"grid{rows}x{cols}s{seed}")


# ---------------------------------------------------------------------------
# assignment duals


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Minimum-cost perfect assignment with dual potentials (O(n^3) shortest augmenting paths).

    Returns ``(col_of_row, u, v, total)`` with ``u_i + v_j <= cost_ij``,
    equality on the assignment and ``sum u + sum v == total``. Ties go to
    the lowest column index.
    """
    a = np.asarray(cost, dtype=np.float64)
    n, m = a.shape
    if n != m:
        raise ValueError("square cost matrix required")
    if not np.all(np.isfinite(a)):
        raise ValueError("cost matrix has non-finite entries")
    # 1-based potentials; column 0 is the virtual start
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)   # p[j]: row matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free[1:] & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free[1:], minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=int)
    col_of_row[p[1:] - 1] = np.arange(m)
    total = float(a[np.arange(n), col_of_row].sum())
    return col_of_row, u[1:].copy(), v[1:].copy(), total


# ---------------------------------------------------------------------------
# relaxation


@dataclass(frozen=True)
class QapProblem:
    instance: QapInstance
    S: np.ndarray
    T: np.ndarray
    lam: np.ndarray
    V: np.ndarray
    omega: np.ndarray
    U: np.ndarray
    s: np.ndarray
    t: np.ndarray
    norm_H: float
    power_iterations: int

    @property
    def n(self) -> int:
        return self.instance.n

    @property
    def L(self) -> float:
        """Relative smoothness constant ``2 ||H||`` for the entropy kernel on [0, 1]."""
        return 2.0 * self.norm_H

    @property
    def spectrum(self) -> np.ndarray:
        """Eigenvalues of ``H``: ``lam_i om_j - s_i - t_j``."""
        return np.outer(self.lam, self.omega) - self.s[:, None] - self.t[None, :]

    @property
    def psd_margin(self) -> float:
        return float(self.spectrum.min())

    @property
    def norm_exact(self) -> float:
        return float(np.abs(self.spectrum).max())

    @property
    def scale(self) -> float:
        return max(1.0, float(np.abs(np.outer(self.lam, self.omega)).max()))


def apply_H(problem: QapProblem, X: np.ndarray) -> np.ndarray:
    """``A X B - S X - X T``."""
    inst = problem.instance
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (inst.n, inst.n):
        raise ValueError(f"expected shape {(inst.n, inst.n)}, got {X.shape}")
    return inst.A @ X @ inst.B - problem.S @ X - X @ problem.T


def objective_and_gradient(problem: QapProblem, X: np.ndarray) -> tuple[float, np.ndarray]:
    HX = apply_H(problem, X)
    return float(np.vdot(X, HX)), 2.0 * HX


def objective(problem: QapProblem, X: np.ndarray) -> float:
    return float(np.vdot(X, apply_H(problem, X)))


def power_norm(apply, n: int, tol: float = 1e-8, max_iter: int = 5000, seed: int = 0) -> tuple[float, int]:
    """Largest eigenvalue of a self-adjoint PSD operator on n x n matrices.

    Power iteration from a seeded Gaussian start with the Rayleigh quotient
    as estimate; stops when it changes by at most ``tol`` relative.
    """
    X = np.random.default_rng(seed).standard_normal((n, n))
    X /= np.linalg.norm(X)
    est = 0.0
    for it in range(1, max_iter + 1):
        Y = apply(X)
        new = float(np.vdot(X, Y))
        ny = np.linalg.norm(Y)
        if ny == 0:
            return 0.0, it
        X = Y / ny
        if abs(new - est) <= tol * max(abs(new), 1e-300):
            return new, it
        est = new
    log.warning("power iteration hit the cap of %d iterations", max_iter)
    return est, max_iter


def build_relaxation(inst: QapInstance, st: str = "lap", power_tol: float = 1e-8,
                     power_cap: int = 5000, seed: int = 0) -> QapProblem:
    """Eigendecompose ``A`` and ``B``, pick ``(s, t)`` and estimate ``||H||``.

    ``st="lap"`` uses optimal duals of the assignment problem with cost
    ``lam_i om_j``; ``st="zero"`` sets ``S = T = 0`` (PSD only when ``A`` and
    ``B`` are both PSD or both NSD).
    """
    try:
        lam, V = np.linalg.eigh(inst.A)
        omega, U = np.linalg.eigh(inst.B)
    except np.linalg.LinAlgError as exc:
        raise InstanceError(f"{inst.name}: eigendecomposition failed ({exc})") from None
    n = inst.n
    if st == "lap":
        _, s, t, _ = hungarian(np.outer(lam, omega))
    elif st == "zero":
        s, t = np.zeros(n), np.zeros(n)
    else:
        raise ValueError(f"unknown S/T construction {st!r}")
    S = (V * s) @ V.T
    T = (U * t) @ U.T
    S, T = 0.5 * (S + S.T), 0.5 * (T + T.T)
    partial = QapProblem(inst, S, T, lam, V, omega, U, s, t, 0.0, 0)
    norm, its = power_norm(lambda X: apply_H(partial, X), n, power_tol, power_cap, seed)
    return QapProblem(inst, S, T, lam, V, omega, U, s, t, max(norm, 0.0), its)


FEAS_TOL = 1e-12


def in_affine_set(X: np.ndarray, tol: float = FEAS_TOL) -> bool:
    return bool(np.max(np.abs(X.sum(axis=1) - 1.0)) <= tol and np.max(np.abs(X.sum(axis=0) - 1.0)) <= tol)


def problem_definition(problem: QapProblem, feas_tol: float = FEAS_TOL) -> ProblemDefinition:
    """Entropy-kernel problem on the affine set with ``L = 2||H||``, ``tau = 1``, ``gamma = 2``."""

    def P(X):
        return 0.0 if in_affine_set(X, feas_tol) else math.inf

    return ProblemDefinition(
        f=lambda X: objective(problem, X),
        grad=lambda X: 2.0 * apply_H(problem, X),
        P=P,
        kernel=EntropyKernel(),
        smoothness=SmoothnessDescriptor(L=problem.L, tau=1.0, gamma=2.0, restriction=UNIT_BOX),
        name=problem.instance.name,
    )


def nfval(problem: QapProblem, X: np.ndarray, F_star: float) -> float:
    """``|F(round(X)) - F*| / |F*|`` (absolute gap when ``F* == 0``)."""
    val = objective(problem, round_to_polytope(np.maximum(X, 0.0), strict=False))
    gap = abs(val - F_star)
    return gap / abs(F_star) if F_star != 0 else gap


# ---------------------------------------------------------------------------
# reference solution


def project_affine(Y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{X : X e = e, X^T e = e}``."""
    n = Y.shape[0]
    r = Y.sum(axis=1) - 1.0
    c = Y.sum(axis=0) - 1.0
    s = Y.sum() - n
    return Y - r[:, None] / n - c[None, :] / n + s / n ** 2


def project_birkhoff(Y: np.ndarray, tol: float = 1e-13, max_sweeps: int = 100_000) -> np.ndarray:
    """Projection onto the doubly stochastic matrices by Dykstra's method.

    Alternates the closed-form affine projection and clipping at zero,
    with a correction term for the clipping step (the affine step needs
    none). Stops when a sweep moves the iterate by at most ``tol`` and the
    marginals are within ``tol * n`` of one.
    """
    n = Y.shape[0]
    X = np.asarray(Y, dtype=np.float64)
    q = np.zeros_like(X)
    for _ in range(max_sweeps):
        A = project_affine(X)
        Z = A + q
        Xn = np.maximum(Z, 0.0)
        q = Z - Xn
        moved = float(np.max(np.abs(Xn - X)))
        X = Xn
        if moved <= tol:
            viol = max(np.max(np.abs(X.sum(axis=1) - 1)), np.max(np.abs(X.sum(axis=0) - 1)))
            if viol <= tol * n:
                return X
    raise ReferenceSolveError(f"Dykstra projection did not converge in {max_sweeps} sweeps")


@dataclass
class ReferenceResult:
    x_star: np.ndarray
    F_star: float
    residual: float
    iterations: int


def reference_solve(problem: QapProblem, tol: float = 1e-9, max_iter: int = 100_000,
                    dykstra_cap: int = 100_000) -> ReferenceResult:
    """Minimise ``<X, H(X)>`` over doubly stochastic ``X`` by restarted FISTA.

    Step ``1 / L_f`` with ``L_f = 2 ||H||``, Dykstra projections, momentum
    reset whenever the objective increases. Stops on the projected gradient
    residual ``||X - Proj(X - grad f(X) / L_f)||_F <= tol``. The returned
    point is rounded onto the polytope so that it is exactly feasible, and
    ``F_star`` is the objective there.
    """
    n = problem.n
    Lf = problem.L
    X = np.full((n, n), 1.0 / n)
    if Lf <= 0:
        return ReferenceResult(X, objective(problem, X), 0.0, 0)

    def proj(Y):
        return project_birkhoff(Y, max_sweeps=dykstra_cap)

    Yk = X.copy()
    tk = 1.0
    F_prev = objective(problem, X)
    for it in range(1, max_iter + 1):
        g = 2.0 * apply_H(problem, Yk)
        Xn = proj(Yk - g / Lf)
        Fn = objective(problem, Xn)
        if Fn > F_prev:
            # restart from the last iterate
            Yk, tk = X, 1.0
            g = 2.0 * apply_H(problem, Yk)
            Xn = proj(Yk - g / Lf)
            Fn = objective(problem, Xn)
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * tk * tk))
        Yk = Xn + ((tk - 1) / t_next) * (Xn - X)
        X, tk, F_prev = Xn, t_next, Fn
        if it % 10 == 0 or it == 1:
            res = float(np.linalg.norm(X - proj(X - 2.0 * apply_H(problem, X) / Lf)))
            if res <= tol:
                x_star = round_to_polytope(np.maximum(X, 0.0), strict=False)
                return ReferenceResult(x_star, objective(problem, x_star), res, it)
    raise ReferenceSolveError(f"reference solve did not reach residual {tol} in {max_iter} iterations")

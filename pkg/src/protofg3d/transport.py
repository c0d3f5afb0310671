"""Entropy-regularized view-to-prototype assignment.

Given a K x V similarity matrix S between prototypes and views, find the
assignment Z maximizing ``Tr(Z^T S) + kappa * H(Z)`` subject to every column
summing to 1 (each view fully assigned) and every row summing to V/K (each
prototype receives an equal share). The maximizer has the diagonal-scaling
form ``Z = diag(mu) exp(S / kappa) diag(nu)``.

Two solvers are provided: a log-domain Sinkhorn-Knopp iteration and an
adaptive primal-dual accelerated gradient method (APDAGD) on the dual.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NonConvergence, NumericalOverflow


class SolverKind(str, enum.Enum):
    SINKHORN = "sinkhorn"
    APDAGD = "apdagd"


@dataclass(frozen=True)
class SolverConfig:
    kappa: float = 0.05
    max_iters: int = 1000
    marginal_tolerance: float = 1e-6
    solver_kind: SolverKind = SolverKind.SINKHORN
    polish_after: int = 100

    def __post_init__(self):
        if not self.kappa > 0:
            raise ContractError(f"kappa must be positive, got {self.kappa}")
        if not self.marginal_tolerance > 0:
            raise ContractError(
                f"marginal_tolerance must be positive, got {self.marginal_tolerance}"
            )
        if self.max_iters < 1:
            raise ContractError(f"max_iters must be >= 1, got {self.max_iters}")
        object.__setattr__(self, "solver_kind", SolverKind(self.solver_kind))


@dataclass(frozen=True)
class ScalingVectors:
    """Diagonal scalings stored as logarithms.

    ``mu``/``nu`` exponentiate on access; for very small kappa they may
    under/overflow even though the log form (and Z itself) is exact.
    """

    log_mu: np.ndarray
    log_nu: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        return np.exp(self.log_mu)

    @property
    def nu(self) -> np.ndarray:
        return np.exp(self.log_nu)


def _as_matrix(S) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 1 or S.shape[1] < 1:
        raise ContractError(f"similarity matrix must be K x V with K, V >= 1, got {S.shape}")
    if not np.all(np.isfinite(S)):
        raise ContractError("similarity matrix contains non-finite entries")
    return S


def entropy(Z) -> float:
    """``-sum z log z`` with ``0 log 0 = 0``."""
    Z = np.asarray(Z, dtype=np.float64)
    if np.any(Z < 0) or np.any(Z > 1) or not np.all(np.isfinite(Z)):
        raise ContractError("assignment entries must lie in [0, 1]")
    nz = Z[Z > 0]
    return float(-np.sum(nz * np.log(nz)))


def assignment_objective(S, Z, kappa: float) -> float:
    """``Tr(Z^T S) + kappa * H(Z)``."""
    S = np.asarray(S, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if S.shape != Z.shape:
        raise ContractError(f"shape mismatch: S {S.shape} vs Z {Z.shape}")
    return float(np.sum(Z * S) + kappa * entropy(Z))


def marginal_violation(Z) -> tuple[float, float]:
    """Return ``(max |row_sum - V/K|, max |col_sum - 1|)``."""
    Z = np.asarray(Z, dtype=np.float64)
    K, V = Z.shape
    row = float(np.max(np.abs(Z.sum(axis=1) - V / K)))
    col = float(np.max(np.abs(Z.sum(axis=0) - 1.0)))
    return row, col


def reconstruct(S, kappa: float, scalings: ScalingVectors) -> np.ndarray:
    """Evaluate ``diag(mu) exp(S / kappa) diag(nu)`` literally."""
    S = np.asarray(S, dtype=np.float64)
    return scalings.mu[:, None] * np.exp(S / kappa) * scalings.nu[None, :]


def logsumexp(A, axis):
    m = np.max(A, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.log(np.sum(np.exp(A - m), axis=axis)) + np.squeeze(m, axis=axis)


def _balance(f, g):
    # gauge freedom: (f + c, g - c) gives the same Z
    c = 0.5 * (g.mean() - f.mean())
    return f + c, g - c


def _dual_value(M, f, g, r):
    return np.exp(M + f[:, None] + g[None, :]).sum() - f @ r - g.sum()


def _newton_step(M, f, g, r):
    """One damped Newton step on the log-potential dual, then exact columns."""
    Z = np.exp(M + f[:, None] + g[None, :])
    rows, cols = Z.sum(axis=1), Z.sum(axis=0)
    K = len(f)
    grad = np.concatenate([rows - r, cols - 1.0])
    hess = np.block([[np.diag(rows), Z], [Z.T, np.diag(cols)]])
    # singular along the gauge direction; lstsq picks the minimum-norm step
    d = np.linalg.lstsq(hess, -grad, rcond=None)[0]
    base = _dual_value(M, f, g, r)
    slope = grad @ d
    t = 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        while t > 1e-10:
            val = _dual_value(M, f + t * d[:K], g + t * d[K:], r)
            if np.isfinite(val) and val <= base + 1e-4 * t * slope:
                break
            t *= 0.5
    f = f + t * d[:K]
    g = -logsumexp(M + f[:, None], axis=0)
    return f, g


# below this kappa, cold-started sweeps stall; warm-start from coarser problems
ANNEAL_BELOW = 0.02
_STAGE_SWEEPS = 20
_STAGE_STEPS = 40
_STAGE_TOL = 1e-3


def _warm_start(S, cfg: SolverConfig, r):
    """Potentials for ``cfg.kappa`` by kappa-scaling.

    Solves loosely at kappa = 2 * ANNEAL_BELOW, halving down to the target
    and carrying ``kappa * f`` (the potential in similarity units) across
    stages. Returns ``(f, g, iterations_used)`` at the target kappa.
    """
    K, V = S.shape
    log_r = np.log(V / K)
    F = np.zeros(K)
    G = np.zeros(V)
    k = 2 * ANNEAL_BELOW
    used = 0
    while k > cfg.kappa and used < cfg.max_iters:
        M = S / k
        f, g = F / k, G / k
        for n in range(1, _STAGE_STEPS + 1):
            if used >= cfg.max_iters:
                break
            used += 1
            if n > _STAGE_SWEEPS:
                f, g = _newton_step(M, f, g, r)
            else:
                f = log_r - logsumexp(M + g[None, :], axis=1)
                g = -logsumexp(M + f[:, None], axis=0)
            if max(marginal_violation(np.exp(M + f[:, None] + g[None, :]))) < _STAGE_TOL:
                break
        F, G = k * f, k * g
        k *= 0.5
    return F / cfg.kappa, G / cfg.kappa, used


def sinkhorn_assign(S, cfg: SolverConfig | None = None):
    """Log-domain Sinkhorn-Knopp.

    Alternates exact row and column normalizations of
    ``log Z = S/kappa + f 1^T + 1 g^T``. Near-degenerate instances make the
    plain sweeps converge sublinearly, so after ``cfg.polish_after`` sweeps
    without convergence the same potentials are refined by damped Newton
    steps on the dual (``polish_after=0`` disables this). For kappa below
    ``ANNEAL_BELOW`` the potentials are first warm-started from a chain of
    coarser problems; those sweeps count toward ``max_iters``. Either way
    the result keeps the ``diag(exp f) exp(S/kappa) diag(exp g)`` form.

    Returns ``(Z, ScalingVectors, iterations)``. Raises ``NonConvergence``
    (carrying the best iterate) if the marginal tolerance is not met within
    ``cfg.max_iters`` iterations.
    """
    cfg = cfg or SolverConfig()
    S = _as_matrix(S)
    K, V = S.shape
    M = S / cfg.kappa
    log_r = np.log(V / K)
    r = np.full(K, V / K)
    f = np.zeros(K)
    g = np.zeros(V)
    start = 0
    best = None
    Z = None
    if cfg.kappa < ANNEAL_BELOW:
        f, g, start = _warm_start(S, cfg, r)
        Z = np.exp(M + f[:, None] + g[None, :])
        best = (max(marginal_violation(Z)), Z, f.copy(), g.copy())
    for it in range(start + 1, cfg.max_iters + 1):
        if cfg.polish_after and it - start > cfg.polish_after:
            f, g = _newton_step(M, f, g, r)
        else:
            rows = Z.sum(axis=1) if Z is not None else None
            if rows is not None and rows.min() > 1e-200:
                # row log-sum-exp reuses the previous iterate: lse(M + g) = log(rowsum Z) - f
                f = f + log_r - np.log(rows)
            else:
                f = log_r - logsumexp(M + g[None, :], axis=1)
            g = -logsumexp(M + f[:, None], axis=0)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise NumericalOverflow(f"Sinkhorn potentials diverged at iteration {it}")
        Z = np.exp(M + f[:, None] + g[None, :])
        viol = max(marginal_violation(Z))
        if best is None or viol < best[0]:
            best = (viol, Z, f.copy(), g.copy())
        if viol < cfg.marginal_tolerance:
            f, g = _balance(f, g)
            return Z, ScalingVectors(f, g), it
    viol, Z, f, g = best
    f, g = _balance(f, g)
    raise NonConvergence(
        f"Sinkhorn did not reach tolerance {cfg.marginal_tolerance:g} in "
        f"{cfg.max_iters} iterations (best violation {viol:.3e})",
        z=Z,
        violation=viol,
        iterations=cfg.max_iters,
        scalings=ScalingVectors(f, g),
    )


def _round_to_feasible(X, r, c):
    # Altschuler-Weed-Rigollet rounding onto the transport polytope
    X = X * np.minimum(r / np.maximum(X.sum(axis=1), 1e-300), 1.0)[:, None]
    X = X * np.minimum(c / np.maximum(X.sum(axis=0), 1e-300), 1.0)[None, :]
    err_r = r - X.sum(axis=1)
    err_c = c - X.sum(axis=0)
    mass = err_r.sum()
    if mass > 0:
        X = X + np.outer(err_r, err_c) / mass
    return X


def apdagd_assign(S, cfg: SolverConfig | None = None):
    """Adaptive primal-dual accelerated gradient descent on the entropic dual.

    The dual (in units of kappa) is
    ``psi(a, b) = sum exp(S/kappa + a_k + b_v) - <a, r> - <b, c>``, whose
    gradient is the marginal residual of ``Z(a, b)``. Accelerated steps use a
    local Lipschitz estimate that doubles until the quadratic upper bound
    holds and halves after each accepted step. The primal iterate is the
    step-weighted average of ``Z(lambda_k)``. When the objective stalls the
    momentum is restarted (from the current dual point), which keeps the
    method fast on these small, locally strongly convex duals.

    Returns ``(Z, iterations)`` where iterations counts accepted steps.
    """
    cfg = cfg or SolverConfig()
    S = _as_matrix(S)
    K, V = S.shape
    M = (S - S.max()) / cfg.kappa
    r = np.full(K, V / K)
    c = np.ones(V)
    n = K + V

    def primal(lam):
        return np.exp(M + lam[:K, None] + lam[None, K:])

    def dual(lam):
        Z = primal(lam)
        val = Z.sum() - lam[:K] @ r - lam[K:] @ c
        grad = np.concatenate([Z.sum(axis=1) - r, Z.sum(axis=0) - c])
        return val, grad, Z

    def violation(Z):
        return max(marginal_violation(Z))

    eta = np.zeros(n)
    eta_val, _, z_eta = dual(eta)
    L = 1.0
    steps = 0
    best = (violation(z_eta), z_eta)

    while steps < cfg.max_iters:
        # one accelerated run, restarted from the current dual point
        zeta = eta.copy()
        A = 0.0
        x_avg = np.zeros((K, V))
        prev_val = eta_val
        while steps < cfg.max_iters:
            M_k = L / 2.0
            for _ in range(200):
                M_k *= 2.0
                alpha = (1.0 + np.sqrt(1.0 + 4.0 * M_k * A)) / (2.0 * M_k)
                A_next = A + alpha
                tau = alpha / A_next
                lam = tau * zeta + (1.0 - tau) * eta
                lam_val, lam_grad, z_lam = dual(lam)
                zeta_next = zeta - alpha * lam_grad
                eta_next = tau * zeta_next + (1.0 - tau) * eta
                eta_next_val, _, z_eta_next = dual(eta_next)
                d = eta_next - lam
                if eta_next_val <= lam_val + lam_grad @ d + 0.5 * M_k * (d @ d) + 1e-15 * abs(lam_val):
                    break
            else:
                raise NumericalOverflow("APDAGD line search failed to find a Lipschitz bound")
            if not np.all(np.isfinite(eta_next)):
                raise NumericalOverflow(f"APDAGD dual iterate diverged at step {steps}")
            steps += 1
            x_avg = tau * z_lam + (1.0 - tau) * x_avg
            zeta, eta, A = zeta_next, eta_next, A_next
            L = M_k / 2.0
            for cand in (x_avg, z_eta_next):
                v = violation(cand)
                if v < best[0]:
                    best = (v, cand)
            if best[0] < cfg.marginal_tolerance:
                return best[1], steps
            restart = eta_next_val > prev_val
            prev_val = eta_val = eta_next_val
            if restart:
                break

    viol, Z = best
    raise NonConvergence(
        f"APDAGD did not reach tolerance {cfg.marginal_tolerance:g} in "
        f"{cfg.max_iters} steps (best violation {viol:.3e})",
        z=_round_to_feasible(Z, r, c),
        violation=viol,
        iterations=steps,
    )


def solve(S, cfg: SolverConfig | None = None) -> tuple[np.ndarray, int]:
    """Dispatch on ``cfg.solver_kind``; returns ``(Z, iterations)``."""
    cfg = cfg or SolverConfig()
    if cfg.solver_kind is SolverKind.APDAGD:
        return apdagd_assign(S, cfg)
    Z, _, it = sinkhorn_assign(S, cfg)
    return Z, it


def format_report(S, Z, iterations: int, scalings: ScalingVectors | None = None) -> str:
    """Plain-text dump of a solved instance."""
    buf = io.StringIO()
    row, col = marginal_violation(Z)

    def block(name, arr):
        buf.write(f"{name} ({' x '.join(str(s) for s in np.shape(arr))}):\n")
        arr = np.atleast_2d(arr)
        for line in arr:
            buf.write(" ".join(f"{x:.9g}" for x in line) + "\n")

    block("S", S)
    block("Z", Z)
    if scalings is not None:
        block("log_mu", scalings.log_mu)
        block("log_nu", scalings.log_nu)
    buf.write(f"iterations: {iterations}\n")
    buf.write(f"row_violation: {row:.3e}\n")
    buf.write(f"col_violation: {col:.3e}\n")
    return buf.getvalue()

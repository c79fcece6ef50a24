"""Sparse class-similarity estimation and softened distillation targets.

Fits an L1-penalized Gaussian precision matrix to per-class attribute
vectors (each attribute dimension is one observation of the classes) by
primal block coordinate descent, with the penalty applied to every entry
of the precision matrix.  The implied covariance, the precision's exact
inverse, serves as a class similarity matrix whose rows can be softened
into temperature-scaled probability targets for distillation.

The solver maintains the covariance estimate alongside the precision via
rank-one block-inverse identities, so each column update costs O(p^2) and
the penalized objective never increases between sweeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedzsl.dataset import AttributeMatrix

DEFAULT_DELTA = 0.05
DEFAULT_TOL = 1e-5
DEFAULT_MAX_SWEEPS = 200

SYMMETRY_TOL = 1e-8
INVERSE_PAIR_TOL = 1e-6
ROW_SUM_TOL = 1e-9

_MAX_INNER_ITERATIONS = 10_000


class GlassoError(ValueError):
    """Invalid input or a numerically infeasible similarity estimation."""


@dataclass
class GlassoConfig:
    """Solver parameters for the penalized precision fit."""

    delta: float = DEFAULT_DELTA
    tol: float = DEFAULT_TOL
    max_sweeps: int = DEFAULT_MAX_SWEEPS
    standardize: bool = True

    def __post_init__(self) -> None:
        self.delta = float(self.delta)
        self.tol = float(self.tol)
        self.max_sweeps = int(self.max_sweeps)
        self.standardize = bool(self.standardize)
        if not (math.isfinite(self.delta) and self.delta > 0.0):
            raise GlassoError(f"delta must be finite and positive, got {self.delta}")
        if not (math.isfinite(self.tol) and self.tol > 0.0):
            raise GlassoError(f"tol must be finite and positive, got {self.tol}")
        if self.max_sweeps < 1:
            raise GlassoError(f"max_sweeps must be >= 1, got {self.max_sweeps}")


@dataclass
class SimilarityMatrix:
    """Estimated class covariance (similarity), sparse precision, and inputs."""

    gamma: np.ndarray
    theta: np.ndarray
    sample_cov: np.ndarray
    converged: bool = True
    sweeps: int = 0
    objective: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.sample_cov = np.asarray(self.sample_cov, dtype=np.float64)
        n = self.gamma.shape[0]
        for name, m in (("gamma", self.gamma), ("theta", self.theta), ("sample_cov", self.sample_cov)):
            if m.shape != (n, n):
                raise GlassoError(f"{name} must be {n}x{n}, got {m.shape}")
        for name, m in (("gamma", self.gamma), ("theta", self.theta)):
            if np.max(np.abs(m - m.T)) > SYMMETRY_TOL:
                raise GlassoError(f"{name} is not symmetric within {SYMMETRY_TOL}")
        try:
            np.linalg.cholesky(self.theta)
        except np.linalg.LinAlgError:
            raise GlassoError("theta is not positive definite") from None
        residual = np.max(np.abs(self.gamma @ self.theta - np.eye(n)))
        if residual > INVERSE_PAIR_TOL:
            raise GlassoError(
                f"gamma and theta are not inverses: max |gamma@theta - I| = {residual:.3e}"
            )
        self.objective = tuple(float(v) for v in self.objective)

    @property
    def num_classes(self) -> int:
        """Matrix dimension (number of classes)."""
        return int(self.gamma.shape[0])


@dataclass
class DistillTargets:
    """Per-class softened probability rows used as distillation targets."""

    probs: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.tau = float(self.tau)
        if self.tau <= 0.0 or not math.isfinite(self.tau):
            raise GlassoError(f"tau must be finite and positive, got {self.tau}")
        if self.probs.ndim != 2:
            raise GlassoError("probs must be a 2-dimensional matrix")
        if np.any(self.probs < 0.0):
            raise GlassoError("probs contains negative entries")
        sums = self.probs.sum(axis=1)
        worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
        if worst > ROW_SUM_TOL:
            raise GlassoError(f"probs rows must sum to 1 within {ROW_SUM_TOL}, worst {worst:.3e}")


def sample_covariance(A: AttributeMatrix | np.ndarray, standardize: bool = True) -> np.ndarray:
    """Sample covariance of the classes over attribute-dimension observations.

    Each of the d_a attribute dimensions is one observation of the
    class-variables, so the result is num_classes x num_classes with the
    unbiased (1/(d_a - 1)) normalizer.  With ``standardize`` the class
    columns are z-scored first (unbiased std; zero-variance columns are
    left centered with a unit divisor), making the result a correlation
    matrix for non-degenerate columns.
    """
    values = A.values if isinstance(A, AttributeMatrix) else np.asarray(A, dtype=np.float64)
    if values.ndim != 2:
        raise GlassoError("attribute values must form a 2-dimensional matrix")
    d_a = values.shape[0]
    if d_a < 2:
        raise GlassoError(f"sample covariance needs d_a >= 2 observations, got {d_a}")
    data = values - values.mean(axis=0, keepdims=True)
    if standardize:
        std = values.std(axis=0, ddof=1, keepdims=True)
        divisor = np.where(std == 0.0, 1.0, std)
        data = data / divisor
        data = data - data.mean(axis=0, keepdims=True)
    return (data.T @ data) / (d_a - 1)


def glasso_objective(S: np.ndarray, theta: np.ndarray, delta: float) -> float:
    """Penalized negative log-likelihood tr(S@theta) - logdet(theta) + delta*||theta||_1."""
    chol = np.linalg.cholesky(theta)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return float(np.sum(S * theta)) - logdet + float(delta) * float(np.sum(np.abs(theta)))


def _soft_threshold(x: float, threshold: float) -> float:
    if x > threshold:
        return x - threshold
    if x < -threshold:
        return x + threshold
    return 0.0


def _solve_column_lasso(
    q: np.ndarray, lin: np.ndarray, b: np.ndarray, delta: float, inner_tol: float
) -> np.ndarray:
    # Coordinate descent for 0.5*b@q@b + lin@b + delta*||b||_1, warm-started
    # at the current precision column; r tracks q @ b throughout.
    r = q @ b
    for _ in range(_MAX_INNER_ITERATIONS):
        biggest = 0.0
        for i in range(b.size):
            old = b[i]
            partial = lin[i] + r[i] - q[i, i] * old
            new = _soft_threshold(-partial, delta) / q[i, i]
            if new != old:
                step = new - old
                b[i] = new
                r += q[:, i] * step
                biggest = max(biggest, abs(step))
        if biggest <= inner_tol:
            break
    return r


def graphical_lasso(S: np.ndarray, cfg: GlassoConfig | None = None) -> SimilarityMatrix:
    """Minimize tr(S@theta) - logdet(theta) + delta*||theta||_1 over PD theta.

    The penalty covers every entry, diagonal included, so the optimum
    satisfies gamma_ii = S_ii + delta and |S_ij - gamma_ij| <= delta with
    equality wherever theta_ij != 0.  Block coordinate descent cycles over
    columns, each solved by an exact coordinate-wise lasso; the covariance
    estimate is updated in place via block-inverse identities.  Stops when
    the covariance estimate moves less than ``cfg.tol`` over a full sweep;
    hitting ``cfg.max_sweeps`` first flags the result as non-converged.
    """
    if cfg is None:
        cfg = GlassoConfig()
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise GlassoError(f"S must be square, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise GlassoError("S contains non-finite values")
    if np.max(np.abs(S - S.T), initial=0.0) > SYMMETRY_TOL:
        raise GlassoError(f"S is not symmetric within {SYMMETRY_TOL}")
    if np.any(np.diag(S) < 0.0):
        raise GlassoError("S has a negative diagonal entry")
    p = S.shape[0]
    delta = cfg.delta
    W = S + delta * np.eye(p)
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        raise GlassoError("S + delta*I is not positive definite; cannot initialize") from None
    theta = np.linalg.inv(W)
    theta = 0.5 * (theta + theta.T)
    objective = [glasso_objective(S, theta, delta)]
    if p == 1:
        gamma = np.array([[S[0, 0] + delta]])
        theta = np.array([[1.0 / (S[0, 0] + delta)]])
        return SimilarityMatrix(
            gamma=gamma,
            theta=theta,
            sample_cov=S.copy(),
            converged=True,
            sweeps=0,
            objective=tuple(objective),
        )
    inner_tol = max(cfg.tol * 1e-3, 1e-14)
    rest_indices = [np.delete(np.arange(p), j) for j in range(p)]
    converged = False
    sweeps_run = 0
    for _ in range(cfg.max_sweeps):
        w_before = W.copy()
        for j in range(p):
            rest = rest_indices[j]
            w12 = W[rest, j]
            w22 = W[j, j]
            theta11_inv = W[np.ix_(rest, rest)] - np.outer(w12, w12) / w22
            scale = S[j, j] + delta
            q = scale * theta11_inv
            b = theta[rest, j].copy()
            r = _solve_column_lasso(q, S[rest, j], b, delta, inner_tol)
            theta[rest, j] = b
            theta[j, rest] = b
            theta[j, j] = (1.0 + float(b @ r)) / scale
            W[j, j] = scale
            W[rest, j] = -r
            W[j, rest] = -r
            W[np.ix_(rest, rest)] = theta11_inv + np.outer(r, r) / scale
        sweeps_run += 1
        objective.append(glasso_objective(S, theta, delta))
        if float(np.max(np.abs(W - w_before))) < cfg.tol:
            converged = True
            break
    # Refresh the covariance from the final precision so the pair inverts
    # to machine precision.
    try:
        np.linalg.cholesky(theta)
    except np.linalg.LinAlgError:
        raise GlassoError("estimated precision lost positive definiteness") from None
    gamma = np.linalg.inv(theta)
    gamma = 0.5 * (gamma + gamma.T)
    return SimilarityMatrix(
        gamma=gamma,
        theta=theta,
        sample_cov=S.copy(),
        converged=converged,
        sweeps=sweeps_run,
        objective=tuple(objective),
    )


def distill_targets(gamma: np.ndarray, tau: float) -> DistillTargets:
    """Row-wise temperature-scaled softmax of a similarity matrix.

    Row ``y`` of the result is ``softmax(gamma[y] / tau)``; larger ``tau``
    flattens rows toward uniform.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    tau = float(tau)
    if tau <= 0.0 or not math.isfinite(tau):
        raise GlassoError(f"tau must be finite and positive, got {tau}")
    if gamma.ndim != 2:
        raise GlassoError("gamma must be a 2-dimensional matrix")
    scaled = gamma / tau
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    exp = np.exp(scaled)
    probs = exp / exp.sum(axis=1, keepdims=True)
    return DistillTargets(probs=probs, tau=tau)

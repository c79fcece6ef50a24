"""Local training losses with exact analytic gradients.

Four attribute-based terms combine into the joint local objective: a
semantic cross-entropy over class prototypes, an attribute decorrelation
penalty of unsquared per-group norms, a temperature-scaled KL pull toward
class-similarity targets, and a bilateral reconstruction term tying the
decoder back to the input features.  A plain softmax cross-entropy over a
linear head serves the attribute-free baseline.  Every loss reduces by
batch mean and reports gradients for each tensor trainable in the
parameter mode, zero-filled when a tensor does not participate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedzsl.dataset import AttributeMatrix
from fedzsl.glasso import DistillTargets
from fedzsl.model import ATTRIBUTE_BASED, ATTRIBUTE_FREE, ModelParams

DEFAULT_TAU = 4.0
DEFAULT_W_BC = 0.1
DEFAULT_W_KL = 10.0
DEFAULT_W_AD = 0.3

ZERO_NORM_EPS = 1e-12

SCE = "sce"
BC = "bc"
KL = "kl"
AD = "ad"
CE = "ce"


class LossError(ValueError):
    """Invalid loss inputs (shape, label, or mode mismatches)."""


class NonFiniteLossError(LossError):
    """A loss value or gradient came out non-finite."""


@dataclass
class LossWeights:
    """Weights of the joint objective, keyed by loss name; the sce weight is fixed at 1."""

    w_bc: float = DEFAULT_W_BC
    w_kl: float = DEFAULT_W_KL
    w_ad: float = DEFAULT_W_AD

    def __post_init__(self) -> None:
        for name in ("w_bc", "w_kl", "w_ad"):
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value >= 0.0):
                raise LossError(f"{name} must be finite and >= 0, got {value}")
            setattr(self, name, value)

    @property
    def w_sce(self) -> float:
        """The cross-entropy weight, fixed at 1."""
        return 1.0


@dataclass
class AblationFlags:
    """Per-term enable switches for the joint objective."""

    sce: bool = True
    bc: bool = True
    kl: bool = True
    ad: bool = True


@dataclass
class DistillConfig:
    """Distillation temperature and the precomputed target rows."""

    tau: float
    targets: DistillTargets

    def __post_init__(self) -> None:
        self.tau = float(self.tau)
        if self.tau != self.targets.tau:
            raise LossError(
                f"tau ({self.tau}) must match targets.tau ({self.targets.tau})"
            )


@dataclass
class LossReport:
    """Scalar loss, per-term contributions, and named gradient arrays."""

    total: float
    terms: dict[str, float]
    grads: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        self.total = float(self.total)
        if not math.isfinite(self.total):
            raise NonFiniteLossError(f"loss total is non-finite ({self.total})")
        for name, value in self.terms.items():
            if not math.isfinite(value):
                raise NonFiniteLossError(f"loss term '{name}' is non-finite ({value})")
        for name, grad in self.grads.items():
            if not np.all(np.isfinite(grad)):
                raise NonFiniteLossError(f"gradient for '{name}' is non-finite")


def _as_batch(features: np.ndarray, d_v: int) -> np.ndarray:
    v = np.asarray(features, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != d_v:
        raise LossError(f"features must have shape (B, {d_v}), got {v.shape}")
    if v.shape[0] < 1:
        raise LossError("batch must contain at least one sample")
    return v


def _require_mode(params: ModelParams, mode: str, loss_name: str) -> None:
    if params.mode != mode:
        raise LossError(f"{loss_name} requires {mode} params, got {params.mode}")


def _zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    tensors = params.tensors()
    return {name: np.zeros_like(tensors[name]) for name in params.trainable_names()}


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _sce_core(
    a_hat: np.ndarray, positions: np.ndarray, prototypes: np.ndarray
) -> tuple[float, np.ndarray]:
    # Cross-entropy of softmax(a_hat @ prototypes) against the label column.
    batch = a_hat.shape[0]
    logits = a_hat @ prototypes
    log_probs = _log_softmax(logits)
    value = float(-log_probs[np.arange(batch), positions].mean())
    d_logits = np.exp(log_probs)
    d_logits[np.arange(batch), positions] -= 1.0
    d_logits /= batch
    return value, d_logits @ prototypes.T


def _ad_core(a_hat: np.ndarray, groups: tuple[tuple[int, int], ...]) -> tuple[float, np.ndarray]:
    # Sum of unsquared group norms per sample; the gradient of each group is
    # its unit direction, taken as 0 below the zero-norm threshold.
    batch = a_hat.shape[0]
    grad = np.zeros_like(a_hat)
    total = 0.0
    for start, end in groups:
        block = a_hat[:, start:end]
        norms = np.linalg.norm(block, axis=1)
        total += float(norms.sum())
        safe = norms >= ZERO_NORM_EPS
        scale = np.where(safe, norms, 1.0)
        grad[:, start:end] = np.where(safe[:, None], block / scale[:, None], 0.0)
    return total / batch, grad / batch


def _kl_core(
    a_hat: np.ndarray,
    prototypes: np.ndarray,
    target_rows: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray]:
    # tau^2-scaled KL(target || softmax(z/tau)) per sample, meaned over the
    # batch; d/dz is tau * (softmax - target) / B.
    batch = a_hat.shape[0]
    logits = (a_hat @ prototypes) / tau
    log_probs = _log_softmax(logits)
    probs = np.exp(log_probs)
    mask = target_rows > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        contributions = np.where(mask, target_rows * (np.log(np.where(mask, target_rows, 1.0)) - log_probs), 0.0)
    value = float(tau * tau * contributions.sum(axis=1).mean())
    d_logits = tau * (probs - target_rows) / batch
    return value, d_logits @ prototypes.T


def _bc_core(
    a_hat: np.ndarray,
    v: np.ndarray,
    params: ModelParams,
    squared: bool,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    # Reconstruction residual r_i = h(a_hat_i) - v_i, reduced as mean squared
    # norm (default) or mean unsquared norm behind the flag.
    batch = a_hat.shape[0]
    residual = a_hat @ params.W_h.T + params.b_h - v
    if squared:
        value = float((residual * residual).sum() / batch)
        d_residual = 2.0 * residual / batch
    else:
        norms = np.linalg.norm(residual, axis=1)
        value = float(norms.mean())
        safe = norms >= ZERO_NORM_EPS
        scale = np.where(safe, norms, 1.0)
        d_residual = np.where(safe[:, None], residual / scale[:, None], 0.0) / batch
    d_W_h = d_residual.T @ a_hat
    d_b_h = d_residual.sum(axis=0)
    d_a_hat = d_residual @ params.W_h
    return value, d_a_hat, d_W_h, d_b_h


def _label_positions(labels: np.ndarray, candidates: list[int], loss_name: str) -> np.ndarray:
    mapping = {c: i for i, c in enumerate(candidates)}
    positions = np.empty(labels.shape[0], dtype=np.int64)
    for i, y in enumerate(labels):
        pos = mapping.get(int(y))
        if pos is None:
            raise LossError(f"{loss_name}: label {int(y)} is not among the candidate classes")
        positions[i] = pos
    return positions


def sce_loss(
    params: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    A: AttributeMatrix,
    candidate_classes: list[int] | tuple[int, ...] | None = None,
) -> LossReport:
    """Semantic cross-entropy over prototype compatibility scores.

    Logits are dot products of predicted attributes with the prototypes of
    ``candidate_classes`` (all classes by default); the loss is the batch
    mean of -log softmax at the label.
    """
    _require_mode(params, ATTRIBUTE_BASED, "sce_loss")
    v = _as_batch(features, params.d_v)
    labels = np.asarray(labels, dtype=np.int64)
    candidates = (
        list(range(A.num_classes)) if candidate_classes is None else [int(c) for c in candidate_classes]
    )
    positions = _label_positions(labels, candidates, "sce_loss")
    prototypes = A.values[:, candidates]
    a_hat = v @ params.W_g.T + params.b_g
    value, d_a_hat = _sce_core(a_hat, positions, prototypes)
    grads = _zero_grads(params)
    grads["W_g"] = d_a_hat.T @ v
    grads["b_g"] = d_a_hat.sum(axis=0)
    return LossReport(total=value, terms={SCE: value}, grads=grads)


def ad_loss(a_hat_batch: np.ndarray, groups: tuple[tuple[int, int], ...]) -> LossReport:
    """Attribute decorrelation: batch mean of summed unsquared group norms.

    Operates on predicted attributes directly; the gradient is reported
    under the key ``"a_hat"`` for the caller to chain into g.
    """
    a_hat = np.asarray(a_hat_batch, dtype=np.float64)
    if a_hat.ndim != 2 or a_hat.shape[0] < 1:
        raise LossError(f"a_hat_batch must be a nonempty (B, d_a) matrix, got {a_hat.shape}")
    spans = tuple((int(a), int(b)) for a, b in groups)
    covered = sorted(spans)
    if not covered or covered[0][0] != 0 or covered[-1][1] != a_hat.shape[1] or any(
        b0 != a1 for (_, b0), (a1, _) in zip(covered, covered[1:])
    ):
        raise LossError(f"groups must partition [0, {a_hat.shape[1]})")
    value, grad = _ad_core(a_hat, spans)
    return LossReport(total=value, terms={AD: value}, grads={"a_hat": grad})


def kl_loss(
    params: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    A: AttributeMatrix,
    cfg: DistillConfig,
) -> LossReport:
    """Temperature-scaled KL divergence toward per-class similarity targets.

    Each sample's predicted distribution softmax(a_hat @ A / tau) over all
    classes is pulled toward the target row of its label; values are scaled
    by tau^2 so gradients keep their magnitude as tau grows.
    """
    _require_mode(params, ATTRIBUTE_BASED, "kl_loss")
    v = _as_batch(features, params.d_v)
    labels = np.asarray(labels, dtype=np.int64)
    n = A.num_classes
    if cfg.targets.probs.shape != (n, n):
        raise LossError(
            f"targets must cover all {n} classes with shape ({n}, {n}), "
            f"got {cfg.targets.probs.shape}"
        )
    if np.any(labels < 0) or np.any(labels >= n):
        raise LossError("kl_loss: a label is outside the target rows")
    a_hat = v @ params.W_g.T + params.b_g
    value, d_a_hat = _kl_core(a_hat, A.values, cfg.targets.probs[labels], cfg.tau)
    grads = _zero_grads(params)
    grads["W_g"] = d_a_hat.T @ v
    grads["b_g"] = d_a_hat.sum(axis=0)
    return LossReport(total=value, terms={KL: value}, grads=grads)


def bc_loss(params: ModelParams, features: np.ndarray, squared: bool = True) -> LossReport:
    """Bilateral reconstruction loss ||h(g(v)) - v||^2, meaned over the batch.

    Gradients flow into both the decoder and, through the predicted
    attributes, the regressor.  ``squared=False`` selects the unsquared
    norm variant.
    """
    _require_mode(params, ATTRIBUTE_BASED, "bc_loss")
    v = _as_batch(features, params.d_v)
    a_hat = v @ params.W_g.T + params.b_g
    value, d_a_hat, d_W_h, d_b_h = _bc_core(a_hat, v, params, squared)
    grads = _zero_grads(params)
    grads["W_g"] = d_a_hat.T @ v
    grads["b_g"] = d_a_hat.sum(axis=0)
    grads["W_h"] = d_W_h
    grads["b_h"] = d_b_h
    return LossReport(total=value, terms={BC: value}, grads=grads)


def ce_loss_attribute_free(
    params: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    seen_classes: tuple[int, ...] | list[int],
) -> LossReport:
    """Plain softmax cross-entropy of the linear head over the seen classes.

    Head row ``i`` scores the ``i``-th smallest seen class id; labels are
    mapped through that ordering.
    """
    _require_mode(params, ATTRIBUTE_FREE, "ce_loss_attribute_free")
    v = _as_batch(features, params.d_v)
    labels = np.asarray(labels, dtype=np.int64)
    seen = sorted(int(c) for c in seen_classes)
    if params.W_c.shape[0] != len(seen):
        raise LossError(
            f"head covers {params.W_c.shape[0]} classes but {len(seen)} seen classes given"
        )
    positions = _label_positions(labels, seen, "ce_loss_attribute_free")
    batch = v.shape[0]
    logits = v @ params.W_c.T + params.b_c
    log_probs = _log_softmax(logits)
    value = float(-log_probs[np.arange(batch), positions].mean())
    d_logits = np.exp(log_probs)
    d_logits[np.arange(batch), positions] -= 1.0
    d_logits /= batch
    grads = _zero_grads(params)
    grads["W_c"] = d_logits.T @ v
    grads["b_c"] = d_logits.sum(axis=0)
    return LossReport(total=value, terms={CE: value}, grads=grads)


def joint_loss(
    params: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    A: AttributeMatrix,
    distill: DistillConfig | None,
    weights: LossWeights,
    groups: tuple[tuple[int, int], ...] | None = None,
    ablation: AblationFlags | None = None,
    bc_squared: bool = True,
) -> LossReport:
    """Weighted sum of the enabled attribute-based terms.

    A term disabled by flag or by zero weight is skipped entirely, so both
    routes produce bit-identical results.  The cross-entropy candidates are
    always all classes of ``A``.  ``distill`` may be None only when the KL
    term is disabled.
    """
    _require_mode(params, ATTRIBUTE_BASED, "joint_loss")
    v = _as_batch(features, params.d_v)
    labels = np.asarray(labels, dtype=np.int64)
    ablation = ablation or AblationFlags()
    spans = A.groups if groups is None else tuple((int(a), int(b)) for a, b in groups)
    n = A.num_classes
    if np.any(labels < 0) or np.any(labels >= n):
        raise LossError("joint_loss: a label is outside the attribute matrix classes")
    a_hat = v @ params.W_g.T + params.b_g
    d_a_hat_total = np.zeros_like(a_hat)
    terms: dict[str, float] = {}
    grads = _zero_grads(params)
    if ablation.sce:
        value, d_a_hat = _sce_core(a_hat, labels, A.values)
        terms[SCE] = value
        d_a_hat_total += d_a_hat
    if ablation.bc and weights.w_bc > 0.0:
        value, d_a_hat, d_W_h, d_b_h = _bc_core(a_hat, v, params, bc_squared)
        terms[BC] = weights.w_bc * value
        d_a_hat_total += weights.w_bc * d_a_hat
        grads["W_h"] = weights.w_bc * d_W_h
        grads["b_h"] = weights.w_bc * d_b_h
    if ablation.kl and weights.w_kl > 0.0:
        if distill is None:
            raise LossError("joint_loss: KL term enabled but no distill config given")
        if distill.targets.probs.shape != (n, n):
            raise LossError(
                f"targets must cover all {n} classes with shape ({n}, {n}), "
                f"got {distill.targets.probs.shape}"
            )
        value, d_a_hat = _kl_core(
            a_hat, A.values, distill.targets.probs[labels], distill.tau
        )
        terms[KL] = weights.w_kl * value
        d_a_hat_total += weights.w_kl * d_a_hat
    if ablation.ad and weights.w_ad > 0.0:
        value, d_a_hat = _ad_core(a_hat, spans)
        terms[AD] = weights.w_ad * value
        d_a_hat_total += weights.w_ad * d_a_hat
    grads["W_g"] = d_a_hat_total.T @ v
    grads["b_g"] = d_a_hat_total.sum(axis=0)
    total = float(sum(terms.values()))
    return LossReport(total=total, terms=terms, grads=grads)

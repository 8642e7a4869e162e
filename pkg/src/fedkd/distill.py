"""Offline distillation of aggregated teacher logits into a central model,
plus the evaluation metrics used throughout (top-1 accuracy and rank-based
AUC with unknown-label exclusion).

Two distillation objectives:

* ``logit_l2``: (1/B) * sum_i ||teacher_i - student_i||^2, the default; works
  for any output head since it never normalizes.
* ``kl``: temperature-softened KL(teacher || student) scaled by tau^2 so the
  gradient magnitude stays O(1) as tau grows. Multi-label heads use
  per-class binary distributions from a tempered sigmoid.

At large tau the tau^2-scaled KL gradient approaches a positive multiple of
the L2 gradient on mean-centered logits, which the tests pin down.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .datasets import Dataset, MULTI_LABEL, SINGLE_LABEL
from .errors import ConfigurationError, DimensionError, EvaluationError
from .numkit import (
    CosineSchedule,
    MlpModel,
    RandomStream,
    check_matrix,
    cosine_lr,
    mlp_backward,
    mlp_forward,
    sgd_step,
)

LOGIT_L2 = "logit_l2"
KL = "kl"

_P_FLOOR = 1e-12  # probabilities are clamped to [_P_FLOOR, 1] inside logs


def _safe_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.clip(p, _P_FLOOR, 1.0))

__all__ = [
    "LOGIT_L2",
    "KL",
    "DistillConfig",
    "softmax_tau",
    "sigmoid",
    "kl_loss",
    "binary_kl_loss",
    "logit_l2_loss",
    "distill_loss_grad",
    "distill",
    "evaluate_single",
    "mann_whitney_auc",
    "MultiLabelEval",
    "evaluate_multi",
]


@dataclass
class DistillConfig:
    steps: int = 2000
    batch_size: int = 64
    lr_start: float = 0.05
    lr_end: float = 0.0
    weight_decay: float = 0.0
    tau: float = math.inf
    loss_mode: str = LOGIT_L2
    task: str = SINGLE_LABEL

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.loss_mode not in (LOGIT_L2, KL):
            raise ConfigurationError(f"unknown loss_mode {self.loss_mode!r}")
        if self.task not in (SINGLE_LABEL, MULTI_LABEL):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if not self.tau > 0:
            raise ConfigurationError("tau must be > 0")
        if self.loss_mode == KL and math.isinf(self.tau):
            raise ConfigurationError("kl loss needs a finite tau")


def softmax_tau(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Row-wise tempered softmax with max subtraction."""
    z = np.asarray(z, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def kl_loss(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for discrete distributions, 0*log(0) taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    terms = np.where(p > 0, p * (_safe_log(p) - _safe_log(q)), 0.0)
    return float(terms.sum())


def binary_kl_loss(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Elementwise KL between Bernoulli(p) and Bernoulli(q)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    t1 = np.where(p > 0, p * (_safe_log(p) - _safe_log(q)), 0.0)
    pc, qc = 1.0 - p, 1.0 - q
    t2 = np.where(pc > 0, pc * (_safe_log(pc) - _safe_log(qc)), 0.0)
    return t1 + t2


def logit_l2_loss(
    student: np.ndarray, teacher: np.ndarray
) -> tuple[float, np.ndarray]:
    """Batch-mean squared logit mismatch and its gradient w.r.t. student.

    loss = (1/B) sum of squared differences; grad = (2/B)(student - teacher).
    """
    student = check_matrix(student, "student logits")
    teacher = check_matrix(teacher, "teacher logits")
    if student.shape != teacher.shape:
        raise DimensionError("student and teacher logit shapes differ")
    b = student.shape[0]
    d = student - teacher
    return float((d * d).sum() / b), (2.0 / b) * d


def distill_loss_grad(
    student: np.ndarray, teacher: np.ndarray, cfg: DistillConfig
) -> tuple[float, np.ndarray]:
    """Batch loss and its gradient w.r.t. the student logits."""
    if cfg.loss_mode == LOGIT_L2:
        return logit_l2_loss(student, teacher)
    student = check_matrix(student, "student logits")
    teacher = check_matrix(teacher, "teacher logits")
    if student.shape != teacher.shape:
        raise DimensionError("student and teacher logit shapes differ")
    b = student.shape[0]
    tau = cfg.tau
    if cfg.task == SINGLE_LABEL:
        p = softmax_tau(teacher, tau)
        q = softmax_tau(student, tau)
        loss = (tau * tau / b) * sum(kl_loss(p[i], q[i]) for i in range(b))
    else:
        p = sigmoid(teacher / tau)
        q = sigmoid(student / tau)
        loss = (tau * tau / b) * float(binary_kl_loss(p, q).sum())
    return loss, (tau / b) * (q - p)


def distill(
    model: MlpModel,
    features: np.ndarray,
    teacher_logits: np.ndarray,
    cfg: DistillConfig,
    rs: RandomStream,
) -> tuple[MlpModel, list[dict]]:
    """Run cfg.steps SGD steps against frozen teacher logits.

    Batches are consecutive slices of a fresh permutation each epoch; a
    trailing partial batch is dropped. Teacher logits are indexed by the
    same permutation, so no node is ever re-queried here.
    """
    features = check_matrix(features, "features")
    teacher_logits = check_matrix(teacher_logits, "teacher logits")
    n = features.shape[0]
    if teacher_logits.shape[0] != n:
        raise DimensionError("teacher logits and features row counts differ")
    if features.shape[1] != model.input_dim:
        raise DimensionError("feature dim does not match model input")
    if teacher_logits.shape[1] != model.output_dim:
        raise DimensionError("teacher logit dim does not match model output")
    if cfg.batch_size > n:
        raise ConfigurationError(f"batch_size {cfg.batch_size} exceeds public set size {n}")

    sched = CosineSchedule(cfg.lr_start, cfg.lr_end, cfg.steps)
    per_epoch = n // cfg.batch_size
    trace = []
    step = 0
    while step < cfg.steps:
        order = rs.permutation(n)
        for j in range(per_epoch):
            if step >= cfg.steps:
                break
            idx = order[j * cfg.batch_size : (j + 1) * cfg.batch_size]
            logits = mlp_forward(model, features[idx])
            loss, gz = distill_loss_grad(logits, teacher_logits[idx], cfg)
            grads = mlp_backward(model, features[idx], gz)
            lr = cosine_lr(sched, step)
            model = sgd_step(model, grads, lr, cfg.weight_decay)
            trace.append({"step": step, "loss": loss, "lr": lr})
            step += 1
    return model, trace


# ---------------------------------------------------------------------------
# evaluation


def evaluate_single(model: MlpModel, ds: Dataset) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if ds.task != SINGLE_LABEL:
        raise ConfigurationError("evaluate_single needs a single-label dataset")
    if ds.n == 0:
        raise EvaluationError("empty evaluation set")
    logits = mlp_forward(model, ds.features)
    pred = logits.argmax(axis=1)
    return float((pred == ds.labels[:, 0]).mean())


def mann_whitney_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-sum AUC over one class column; label -1 marks unknown and is
    excluded before ranking. Needs at least one positive and one negative.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels length differ")
    keep = labels != -1
    scores, labels = scores[keep], labels[keep]
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC undefined without both a positive and a negative")
    ranks = rankdata(scores)  # midranks, so ties contribute 1/2
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class MultiLabelEval:
    per_class: np.ndarray = field(repr=False)  # NaN where undefined
    mean_auc: float = 0.0


def evaluate_multi(model: MlpModel, ds: Dataset) -> MultiLabelEval:
    """Per-class AUC and the mean over classes with both label values present."""
    if ds.task != MULTI_LABEL:
        raise ConfigurationError("evaluate_multi needs a multi-label dataset")
    if ds.n == 0:
        raise EvaluationError("empty evaluation set")
    logits = mlp_forward(model, ds.features)
    per_class = np.full(ds.num_classes, np.nan)
    for c in range(ds.num_classes):
        try:
            per_class[c] = mann_whitney_auc(logits[:, c], ds.labels[:, c])
        except EvaluationError:
            continue
    valid = ~np.isnan(per_class)
    if not valid.any():
        raise EvaluationError("no class had both positives and negatives")
    return MultiLabelEval(per_class, float(per_class[valid].mean()))

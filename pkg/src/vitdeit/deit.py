"""Distillation objectives and teacher sources for the DeiT variant."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, LabelError, ShapeError, TeacherError

PROB_TOL = 1e-9


@dataclass(frozen=True)
class DistillationLossConfig:
    """``balance`` weights the distillation head; ``temperature`` is used in soft mode only."""

    mode: str = "hard"
    balance: float = 0.5
    temperature: float = 3.0

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ConfigError(f"distillation mode must be 'hard' or 'soft', got {self.mode!r}")
        if not 0.0 <= self.balance <= 1.0:
            raise ConfigError(f"distillation balance must lie in [0, 1], got {self.balance}")
        if not self.temperature > 0:
            raise ConfigError(f"distillation temperature must be positive, got {self.temperature}")


def check_probabilities(probs, tol=PROB_TOL, error=TeacherError):
    probs = np.asarray(probs, dtype=float)
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise error("probabilities must be finite and non-negative")
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise error(f"probabilities must sum to 1 (got sums {np.atleast_1d(sums)[:4].tolist()} ...)")
    return probs


def distillation_loss(cls_logits, dist_logits, true_label, teacher_probs, cfg=None):
    """Combined class-head / distillation-head objective, averaged over the batch.

    hard: (1-l) CE(cls, y) + l CE(dist, argmax teacher)
    soft: (1-l) CE(cls, y) + l t^2 KL(softmax(log teacher / t) || softmax(dist / t))

    Accepts single vectors (C,) or batches (B, C).
    """
    cfg = cfg or DistillationLossConfig()
    cls_logits, dist_logits = T.as_tensor(cls_logits), T.as_tensor(dist_logits)
    if cls_logits.ndim == 1:
        cls_logits = T.reshape(cls_logits, (1, -1))
        dist_logits = T.reshape(dist_logits, (1, -1))
    teacher = np.atleast_2d(np.asarray(teacher_probs, dtype=float))
    labels = np.atleast_1d(np.asarray(true_label))
    if cls_logits.shape != dist_logits.shape:
        raise ShapeError(f"class/distillation logits differ: {cls_logits.shape} vs {dist_logits.shape}")
    if teacher.shape != cls_logits.shape:
        raise ShapeError(f"teacher probabilities {teacher.shape} do not match logits {cls_logits.shape}")
    check_probabilities(teacher)
    classes = cls_logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= classes):
        raise LabelError(f"label out of range [0, {classes}): {labels.tolist()}")

    lam = cfg.balance
    loss = T.cross_entropy(cls_logits, labels) * (1.0 - lam)
    if lam == 0.0:
        return loss
    if cfg.mode == "hard":
        return loss + T.cross_entropy(dist_logits, teacher.argmax(axis=1)) * lam
    tau = cfg.temperature
    with np.errstate(divide="ignore"):
        tempered = np.where(teacher > 0, np.log(np.where(teacher > 0, teacher, 1.0)) / tau, -np.inf)
    tempered = np.exp(tempered - tempered.max(axis=1, keepdims=True))
    target = tempered / tempered.sum(axis=1, keepdims=True)
    log_student = T.log_softmax(dist_logits * (1.0 / tau), axis=1)
    entropy_part = np.sum(np.where(target > 0, target * np.log(np.where(target > 0, target, 1.0)), 0.0))
    kl = (T.Tensor(np.asarray(entropy_part)) - (log_student * target).sum()) * (1.0 / len(labels))
    return loss + kl * (lam * tau * tau)


def deit_inference_probs(cls_logits, dist_logits):
    """Elementwise mean of the two heads' softmax distributions."""
    cls_logits = np.asarray(getattr(cls_logits, "data", cls_logits), dtype=float)
    dist_logits = np.asarray(getattr(dist_logits, "data", dist_logits), dtype=float)
    if cls_logits.shape != dist_logits.shape:
        raise ShapeError(f"head logits differ in shape: {cls_logits.shape} vs {dist_logits.shape}")
    return 0.5 * (_softmax(cls_logits) + _softmax(dist_logits))


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- teachers ---------------------------------------------------------------


class TeacherOracle:
    """Maps a batch of images to class probabilities (B, C).

    ``labels`` and ``sample_ids`` are supplied by the trainer for teachers
    that need them; model teachers ignore both. Queries are read-only.
    """

    num_classes = None

    def predict_proba(self, images, labels=None, sample_ids=None):
        raise NotImplementedError

    def __call__(self, images, labels=None, sample_ids=None):
        probs = np.atleast_2d(self.predict_proba(images, labels=labels, sample_ids=sample_ids))
        return check_probabilities(probs)


class ModelTeacher(TeacherOracle):
    """A trained transformer (usually a ViT checkpoint) used as teacher."""

    def __init__(self, config, weights):
        self.config = config
        self.weights = weights
        self.num_classes = config.num_classes

    @classmethod
    def from_checkpoint(cls, path):
        from .checkpoint import load_checkpoint

        config, weights = load_checkpoint(path)
        return cls(config, weights)

    def predict_proba(self, images, labels=None, sample_ids=None):
        from .vit import predict_proba

        return predict_proba(images, self.config, self.weights)


class LookupTeacher(TeacherOracle):
    """Fixed table of probabilities keyed by sample id."""

    def __init__(self, table):
        self.table = {k: check_probabilities(v) for k, v in table.items()}
        widths = {len(v) for v in self.table.values()}
        if len(widths) > 1:
            raise TeacherError("lookup teacher rows have different lengths")
        self.num_classes = widths.pop() if widths else None

    def predict_proba(self, images, labels=None, sample_ids=None):
        if sample_ids is None:
            raise TeacherError("lookup teacher needs sample ids")
        try:
            return np.stack([self.table[s] for s in sample_ids])
        except KeyError as exc:
            raise TeacherError(f"no teacher probabilities for sample {exc.args[0]!r}") from None


class LabelEchoTeacher(TeacherOracle):
    """Returns a one-hot distribution on the true label."""

    def __init__(self, num_classes):
        self.num_classes = num_classes

    def predict_proba(self, images, labels=None, sample_ids=None):
        if labels is None:
            raise TeacherError("label-echo teacher needs labels")
        labels = np.atleast_1d(np.asarray(labels))
        if np.any(labels < 0) or np.any(labels >= self.num_classes):
            raise LabelError(f"label out of range [0, {self.num_classes})")
        return np.eye(self.num_classes)[labels]

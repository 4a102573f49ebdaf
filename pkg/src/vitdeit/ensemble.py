"""Soft voting: average member class probabilities, take the arg-max.

Ties at the maximum (within ``TIE_TOL``) go to the lowest class index and
are flagged on the prediction.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ArityError, InputError, ParseError

PROB_TOL = 1e-9
TIE_TOL = 1e-12


@dataclass
class ProbVector:
    probs: np.ndarray
    class_labels: tuple = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 1 or self.probs.size == 0:
            raise InputError(f"a probability vector must be 1-D and non-empty, got shape {self.probs.shape}")
        if self.class_labels is None:
            self.class_labels = tuple(range(self.probs.size))
        self.class_labels = tuple(self.class_labels)
        if len(self.class_labels) != self.probs.size:
            raise InputError(f"{len(self.class_labels)} labels for {self.probs.size} probabilities")
        if not np.all(np.isfinite(self.probs)) or np.any(self.probs < 0):
            raise InputError("probabilities must be finite and non-negative")
        if abs(self.probs.sum() - 1.0) > PROB_TOL:
            raise InputError(f"probabilities sum to {self.probs.sum():.12g}, not 1")

    def __len__(self):
        return self.probs.size


@dataclass
class EnsemblePrediction:
    predicted_index: int
    averaged_probs: np.ndarray
    member_probs: np.ndarray
    num_classifiers: int
    tie_broken: bool
    class_labels: tuple = field(default=None)

    @property
    def predicted_label(self):
        return self.class_labels[self.predicted_index]


def argmax_lowest(probs, tol=TIE_TOL):
    """Index of the maximum, preferring the lowest index among near-ties; returns (index, tied)."""
    probs = np.asarray(probs)
    top = probs.max()
    winners = np.flatnonzero(probs >= top - tol)
    return int(winners[0]), bool(winners.size > 1)


def soft_vote(members):
    """Combine member distributions with equal weight 1/N."""
    members = list(members)
    if not members:
        raise ArityError("soft voting needs at least one member")
    members = [m if isinstance(m, ProbVector) else ProbVector(m) for m in members]
    labels = members[0].class_labels
    for m in members[1:]:
        if m.class_labels != labels:
            raise AlignmentError(f"member class labels differ: {labels} vs {m.class_labels}")
    stacked = np.stack([m.probs for m in members])
    # sorted summation makes the average bitwise independent of member order
    averaged = np.sort(stacked, axis=0).sum(axis=0) / len(members)
    index, tied = argmax_lowest(averaged)
    return EnsemblePrediction(index, averaged, stacked, len(members), tied, labels)


def model_probabilities(model, images):
    """Probabilities (B, C) from a model handle.

    A handle is either an object with ``predict_proba`` (estimators,
    teachers) or a ``(config, weights)`` pair.
    """
    if hasattr(model, "predict_proba"):
        return np.asarray(model.predict_proba(images))
    from .vit import predict_proba

    config, weights = model
    return predict_proba(images, config, weights)


def ensemble_predict(image, models, class_labels=None):
    """Soft-voted prediction for one image (H, W, C), or a list for a batch."""
    if not models:
        raise ArityError("ensemble needs at least one model")
    image = np.asarray(image, dtype=float)
    single = image.ndim == 3
    batch = image[None] if single else image
    per_model = [np.atleast_2d(model_probabilities(m, batch)) for m in models]
    widths = {p.shape[1] for p in per_model}
    if len(widths) != 1:
        raise AlignmentError(f"models disagree on the number of classes: {sorted(widths)}")
    preds = [soft_vote([ProbVector(p[i], class_labels) for p in per_model]) for i in range(len(batch))]
    return preds[0] if single else preds


# -- probability interchange file -------------------------------------------
# One record per line: sample_id,model_id,p_1,...,p_C


def write_probs(path, rows):
    """``rows`` is an iterable of (sample_id, model_id, probs)."""
    with open(path, "w", encoding="utf-8") as fh:
        for sample_id, model_id, probs in rows:
            _check_token(sample_id)
            _check_token(model_id)
            values = ",".join(repr(float(p)) for p in probs)
            fh.write(f"{sample_id},{model_id},{values}\n")
    return path


def _check_token(value):
    if "," in str(value) or "\n" in str(value):
        raise InputError(f"identifier {value!r} may not contain commas or newlines")


def read_probs(path):
    """Return {model_id: {sample_id: probs}}, preserving first-seen order."""
    out = {}
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) < 3:
                raise ParseError("expected sample_id,model_id,probabilities...", line=lineno)
            sample_id, model_id = parts[0], parts[1]
            try:
                probs = np.array([float(p) for p in parts[2:]])
            except ValueError:
                raise ParseError(f"non-numeric probability in {line!r}", line=lineno) from None
            if width is None:
                width = probs.size
            elif probs.size != width:
                raise ParseError(f"expected {width} probabilities, got {probs.size}", line=lineno)
            per_model = out.setdefault(model_id, {})
            if sample_id in per_model:
                raise ParseError(f"duplicate record for sample {sample_id!r}, model {model_id!r}", line=lineno)
            per_model[sample_id] = probs
    return out


def vote_from_probs(table, class_labels=None):
    """Soft-vote every sample present for all models in a read_probs table.

    Returns ``{sample_id: EnsemblePrediction}`` in the first model's order.
    """
    if not table:
        raise ArityError("probability table is empty")
    model_ids = list(table)
    first = table[model_ids[0]]
    for mid in model_ids[1:]:
        if set(table[mid]) != set(first):
            raise AlignmentError(f"model {mid!r} covers a different sample set than {model_ids[0]!r}")
    return {
        sid: soft_vote([ProbVector(table[mid][sid], class_labels) for mid in model_ids])
        for sid in first
    }

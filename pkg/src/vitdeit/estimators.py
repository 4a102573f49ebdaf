"""scikit-learn compatible wrappers around the transformer, ensemble and balancer.

    >>> vit = ViTClassifier(epochs=40).fit(X_train, y_train)
    >>> deit = DeiTClassifier(epochs=40, teacher=vit).fit(X_train, y_train)
    >>> ensemble = SoftVotingClassifier([("vit", vit), ("deit", deit)], prefit=True)
    >>> ensemble.predict(X_test)
"""

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .data import balance_indices
from .deit import DistillationLossConfig, TeacherOracle
from .ensemble import ProbVector, argmax_lowest, soft_vote
from .errors import ConfigError, InputError
from .training import TrainConfig, prepare_fine_tune, train_arrays
from .validation import check_images, check_labels
from .vit import ModelWeights, TransformerConfig, init_weights, predict_proba


class ViTClassifier(ClassifierMixin, BaseEstimator):
    """Vision transformer classifier trained from scratch or fine-tuned.

    ``init_from`` (checkpoint path or :class:`ModelWeights`) loads a
    backbone whose head is re-initialised for the classes seen in ``fit``.
    """

    use_distillation_token = False

    def __init__(self, image_size=32, patch_size=4, embed_dim=32, num_heads=2, num_blocks=2,
                 mlp_hidden_dim=64, head_layers=2, learning_rate=1e-4, weight_decay=1e-3,
                 batch_size=16, epochs=15, random_state=0, init_from=None, freeze_backbone=False,
                 classes=None):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.num_blocks = num_blocks
        self.mlp_hidden_dim = mlp_hidden_dim
        self.head_layers = head_layers
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.init_from = init_from
        self.freeze_backbone = freeze_backbone
        self.classes = classes

    def _model_config(self, num_classes, channels):
        return TransformerConfig(
            image_size=self.image_size, patch_size=self.patch_size, channels=channels,
            embed_dim=self.embed_dim, num_heads=self.num_heads, num_blocks=self.num_blocks,
            mlp_hidden_dim=self.mlp_hidden_dim, num_classes=num_classes,
            use_distillation_token=self.use_distillation_token, head_layers=self.head_layers)

    def _train_config(self):
        return TrainConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, epochs=self.epochs,
                           seed=int(self.random_state or 0), freeze_backbone=self.freeze_backbone)

    def _teacher(self):
        return None

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X, self.image_size)
        y = check_labels(y, len(X))
        self.classes_ = np.asarray(self.classes) if self.classes is not None else np.unique(y)
        if len(self.classes_) < 2:
            raise ConfigError("need at least two classes")
        y_idx = self._encode(y)
        config = self._model_config(len(self.classes_), X.shape[-1])
        seed = int(self.random_state or 0)
        if self.init_from is not None:
            weights = prepare_fine_tune(self.init_from, config.num_classes, config, seed=seed)
        else:
            weights = init_weights(config, seed=seed)
        val = {}
        if X_val is not None:
            val = {"test_images": check_images(X_val, self.image_size),
                   "test_labels": self._encode(check_labels(y_val, len(X_val)))}
        run = train_arrays(weights, X, y_idx, self._train_config(), teacher=self._teacher(), **val)
        self.weights_ = run.weights
        self.config_ = config
        self.train_run_ = run
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _encode(self, y):
        lookup = {c: i for i, c in enumerate(self.classes_.tolist())}
        try:
            return np.array([lookup[v] for v in np.asarray(y).tolist()], dtype=np.int64)
        except KeyError as exc:
            raise InputError(f"label {exc.args[0]!r} not among classes {self.classes_.tolist()}") from None

    def predict_proba(self, X):
        check_is_fitted(self, "weights_")
        X = check_images(X, self.image_size, channels=self.config_.channels)
        return predict_proba(X, self.config_, self.weights_)

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[[argmax_lowest(p)[0] for p in probs]]

    def save(self, path):
        check_is_fitted(self, "weights_")
        return save_checkpoint(path, self.weights_, {"classes": ",".join(map(str, self.classes_))})

    @classmethod
    def from_checkpoint(cls, path, classes=None):
        config, weights = load_checkpoint(path)
        return cls.from_weights(weights, classes)

    @classmethod
    def from_weights(cls, weights, classes=None):
        config = weights.config
        if config.use_distillation_token != cls.use_distillation_token:
            cls = DeiTClassifier if config.use_distillation_token else ViTClassifier
        est = cls(image_size=config.image_size, patch_size=config.patch_size,
                  embed_dim=config.embed_dim, num_heads=config.num_heads,
                  num_blocks=config.num_blocks, mlp_hidden_dim=config.mlp_hidden_dim,
                  head_layers=config.head_layers)
        est.classes_ = np.asarray(classes) if classes is not None else np.arange(config.num_classes)
        est.config_ = config
        est.weights_ = weights
        est.n_features_in_ = config.image_size**2 * config.channels
        return est


class EstimatorTeacher(TeacherOracle):
    """Adapts any fitted estimator with ``predict_proba`` to the teacher interface."""

    def __init__(self, estimator):
        self.estimator = estimator

    def predict_proba(self, images, labels=None, sample_ids=None):
        return self.estimator.predict_proba(images)


class DeiTClassifier(ViTClassifier):
    """Transformer with a distillation token.

    ``teacher`` may be a fitted estimator (e.g. a :class:`ViTClassifier`
    over the same classes) or a :class:`TeacherOracle`; without one the
    distillation head learns from the true labels.
    """

    use_distillation_token = True

    def __init__(self, image_size=32, patch_size=4, embed_dim=32, num_heads=2, num_blocks=2,
                 mlp_hidden_dim=64, head_layers=2, learning_rate=1e-4, weight_decay=1e-3,
                 batch_size=16, epochs=15, random_state=0, init_from=None, freeze_backbone=False,
                 classes=None, teacher=None, distillation="hard", distillation_balance=0.5,
                 temperature=3.0):
        super().__init__(image_size=image_size, patch_size=patch_size, embed_dim=embed_dim,
                         num_heads=num_heads, num_blocks=num_blocks, mlp_hidden_dim=mlp_hidden_dim,
                         head_layers=head_layers, learning_rate=learning_rate,
                         weight_decay=weight_decay, batch_size=batch_size, epochs=epochs,
                         random_state=random_state, init_from=init_from,
                         freeze_backbone=freeze_backbone, classes=classes)
        self.teacher = teacher
        self.distillation = distillation
        self.distillation_balance = distillation_balance
        self.temperature = temperature

    def _train_config(self):
        base = super()._train_config()
        dist = DistillationLossConfig(self.distillation, self.distillation_balance, self.temperature)
        return replace(base, distillation=dist)

    def _teacher(self):
        if self.teacher is None or isinstance(self.teacher, TeacherOracle):
            return self.teacher
        classes = getattr(self.teacher, "classes_", None)
        if classes is not None and not np.array_equal(np.asarray(classes), self.classes_):
            raise ConfigError("teacher was trained on a different label set")
        return EstimatorTeacher(self.teacher)


class SoftVotingClassifier(ClassifierMixin, BaseEstimator):
    """Equal-weight average of member probabilities; ties go to the lowest class index."""

    def __init__(self, estimators, prefit=False):
        self.estimators = estimators
        self.prefit = prefit

    def fit(self, X, y):
        if not self.estimators:
            raise ConfigError("SoftVotingClassifier needs at least one estimator")
        if self.prefit:
            fitted = [est for _, est in self.estimators]
        else:
            fitted = [clone(est).fit(X, y) for _, est in self.estimators]
        self._set_members(fitted)
        return self

    def _set_members(self, fitted):
        classes = [np.asarray(est.classes_) for est in fitted]
        for c in classes[1:]:
            if not np.array_equal(c, classes[0]):
                raise ConfigError("ensemble members were trained on different label sets")
        self.estimators_ = fitted
        self.named_estimators_ = dict(zip([n for n, _ in self.estimators], fitted))
        self.classes_ = classes[0]

    def _ensure_members(self):
        if not hasattr(self, "estimators_"):
            if not self.prefit:
                check_is_fitted(self, "estimators_")
            self._set_members([est for _, est in self.estimators])

    def member_probas(self, X):
        self._ensure_members()
        return np.stack([est.predict_proba(X) for est in self.estimators_])

    def vote(self, X):
        """Per-sample :class:`EnsemblePrediction` objects."""
        per_member = self.member_probas(X)
        labels = tuple(self.classes_.tolist())
        return [soft_vote([ProbVector(p[i], labels) for p in per_member])
                for i in range(per_member.shape[1])]

    def predict_proba(self, X):
        return np.stack([v.averaged_probs for v in self.vote(X)])

    def predict(self, X):
        return self.classes_[[v.predicted_index for v in self.vote(X)]]


class UndersampleBalancer(BaseEstimator):
    """Random undersampling to the smallest class, optionally within groups.

    ``fit_resample(X, y, groups=None)`` follows the imbalanced-learn
    convention; ``groups`` (e.g. magnification per sample) balances each
    group separately.
    """

    def __init__(self, random_state=0):
        self.random_state = random_state

    def fit_resample(self, X, y, groups=None):
        y = np.asarray(y)
        if len(X) != len(y):
            raise InputError(f"{len(X)} samples but {len(y)} labels")
        self.sample_indices_ = balance_indices(y, groups, seed=int(self.random_state or 0))
        X = np.asarray(X)
        return X[self.sample_indices_], y[self.sample_indices_]


def as_weights(model):
    """(config, weights) of a fitted estimator or a ModelWeights."""
    if isinstance(model, ModelWeights):
        return model.config, model
    check_is_fitted(model, "weights_")
    return model.config_, model.weights_

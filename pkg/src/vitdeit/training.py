"""Fine-tuning loop: AdamW, seeded shuffling, distillation-aware loss, checkpoints."""

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import derive_seed, format_key_values, read_key_values
from .deit import DistillationLossConfig, LabelEchoTeacher, distillation_loss
from .errors import CheckpointError, ConfigError, NumericError, TrainingError
from .vit import ModelWeights, forward, predict_proba, reinit_heads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.001
    batch_size: int = 16
    epochs: int = 15
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    distillation: DistillationLossConfig = field(default_factory=DistillationLossConfig)
    freeze_backbone: bool = False
    track_train_accuracy: bool = True

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("need 0 <= beta < 1 and eps > 0")

    def to_dict(self):
        out = {}
        for f in fields(self):
            if f.name == "distillation":
                for g in fields(DistillationLossConfig):
                    out[f"distillation.{g.name}"] = getattr(self.distillation, g.name)
            else:
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, values):
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs, dist = {}, {}
        for key, value in values.items():
            if key.startswith("distillation."):
                name = key.split(".", 1)[1]
                dist_kinds = {g.name: g.type for g in fields(DistillationLossConfig)}
                if name not in dist_kinds:
                    raise ConfigError(f"unknown distillation key {key!r}")
                dist[name] = value if dist_kinds[name] is str else float(value)
            elif key in kinds:
                kwargs[key] = _convert(key, value, kinds[key])
            else:
                raise ConfigError(f"unknown training config key {key!r}")
        if dist:
            kwargs["distillation"] = DistillationLossConfig(**dist)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(read_key_values(path))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(format_key_values(self.to_dict()))
        return path


def _convert(key, value, kind):
    if not isinstance(value, str):
        return value
    try:
        if kind is bool:
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return value.lower() in ("true", "1", "yes")
        return kind(value) if kind in (int, float) else value
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {value!r}") from None


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, cfg):
    """One Adam update with decoupled weight decay.

    For each parameter with a gradient: decay ``p -= lr * wd * p`` first,
    then the bias-corrected Adam step. Parameters without a gradient are
    carried over untouched. Returns ``(new_params, new_state)``; inputs are
    not modified.
    """
    lr, wd, b1, b2, eps = cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps
    step = state.step + 1
    new_params, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ConfigError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        p = p - lr * wd * p
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamWState(step, new_m, new_v)


# -- training ---------------------------------------------------------------


@dataclass
class TrainRun:
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)
    steps: int = 0
    epochs: int = 0
    seed: int = 0
    wall_clock: float = 0.0
    checkpoint_path: str = None
    weights: ModelWeights = field(default=None, repr=False)
    config: TrainConfig = field(default=None, repr=False)


def trainable_names(model_config, train_cfg):
    names = list(model_config.param_shapes())
    if train_cfg.freeze_backbone:
        names = [n for n in names if n.startswith(("head.", "dist_head."))]
    return names


def accuracy(weights, images, labels, batch_size=256):
    if len(images) == 0:
        return float("nan")
    probs = predict_proba(images, weights.config, weights, batch_size=batch_size)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))


def train_arrays(weights, images, labels, cfg, teacher=None, test_images=None, test_labels=None,
                 sample_ids=None, progress=None):
    """Train on in-memory arrays and return a :class:`TrainRun` (final weights in ``.weights``).

    DeiT models (distillation token on) use the distillation objective: with
    ``teacher`` when one is given, otherwise with the true labels standing
    in for the teacher, which is plain cross-entropy on both heads.
    """
    config = weights.config
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    if n != len(labels):
        raise ConfigError(f"{n} images but {len(labels)} labels")
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds training set size {n}")
    started = time.perf_counter()

    teacher_probs = None
    if config.use_distillation_token:
        oracle = teacher or LabelEchoTeacher(config.num_classes)
        teacher_probs = oracle(images, labels=labels, sample_ids=sample_ids)
        if teacher_probs.shape != (n, config.num_classes):
            raise ConfigError(f"teacher produced {teacher_probs.shape}, expected {(n, config.num_classes)}")

    params = {k: v.copy() for k, v in weights.items()}
    names = trainable_names(config, cfg)
    state = AdamWState()
    rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    run = TrainRun(epochs=cfg.epochs, seed=cfg.seed, config=cfg)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for batch_no, start in enumerate(range(0, n, cfg.batch_size), start=1):
            idx = order[start:start + cfg.batch_size]
            tensors = {k: T.Tensor(v, requires_grad=k in names) for k, v in params.items()}
            try:
                with T.Tape():
                    out = forward(images[idx], config, tensors)
                    if teacher_probs is None:
                        loss = T.cross_entropy(out.logits, labels[idx])
                    else:
                        loss = distillation_loss(out.logits, out.dist_logits, labels[idx],
                                                 teacher_probs[idx], cfg.distillation)
                    T.backward(loss)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError("loss is not finite")
                params, state = adamw_step(params, {k: tensors[k].grad for k in names}, state, cfg)
            except NumericError as exc:
                raise TrainingError(f"training diverged: {exc}", epoch=epoch, batch=batch_no) from exc
            total += value * len(idx)
            run.steps += 1
        current = ModelWeights(config, params)
        run.train_loss.append(total / n)
        run.train_accuracy.append(accuracy(current, images, labels) if cfg.track_train_accuracy else float("nan"))
        run.test_accuracy.append(
            accuracy(current, test_images, test_labels) if test_images is not None else float("nan"))
        if progress is not None:
            progress(epoch, run)

    run.weights = ModelWeights(config, params)
    run.wall_clock = time.perf_counter() - started
    return run


def _arrays(manifest, ids, image_size):
    from .imaging import load_images

    images = load_images(manifest, image_size, ids=ids)
    labels = np.array([manifest[s].label for s in ids], dtype=np.int64)
    return images, labels


def train(weights, manifest, split, cfg, teacher=None, checkpoint_path=None, metrics_path=None,
          progress=None):
    """Train on the manifest's split; optionally write a checkpoint and metrics log."""
    missing = [s for s in list(split.train_ids) + list(split.test_ids) if s not in manifest]
    if missing:
        raise ConfigError(f"split references ids absent from the manifest: {missing[:5]}")
    size = weights.config.image_size
    x_train, y_train = _arrays(manifest, split.train_ids, size)
    x_test, y_test = _arrays(manifest, split.test_ids, size) if split.test_ids else (None, None)
    run = train_arrays(weights, x_train, y_train, cfg, teacher=teacher, test_images=x_test,
                       test_labels=y_test, sample_ids=list(split.train_ids), progress=progress)
    if checkpoint_path:
        run.checkpoint_path = save_checkpoint(checkpoint_path, run.weights, _checkpoint_meta(cfg))
    if metrics_path:
        write_metrics_log(run, metrics_path)
    return run


def _checkpoint_meta(cfg):
    return {f"train.{k}": v for k, v in cfg.to_dict().items()}


def prepare_fine_tune(checkpoint, num_classes, target_config=None, seed=0):
    """Backbone from ``checkpoint`` (path or ModelWeights) with freshly initialised head(s)."""
    if isinstance(checkpoint, ModelWeights):
        source = checkpoint
    else:
        _, source = load_checkpoint(checkpoint)
    if target_config is not None:
        expected = replace(target_config, num_classes=source.config.num_classes)
        if expected != source.config:
            raise CheckpointError(
                f"checkpoint backbone {source.config} does not match target {target_config}")
    return reinit_heads(source, num_classes, seed=derive_seed(seed, "head-init"))


def fine_tune(checkpoint, num_classes, manifest, split, cfg, target_config=None, teacher=None,
              checkpoint_path=None, metrics_path=None):
    weights = prepare_fine_tune(checkpoint, num_classes, target_config, seed=cfg.seed)
    return train(weights, manifest, split, cfg, teacher=teacher, checkpoint_path=checkpoint_path,
                 metrics_path=metrics_path)


def write_metrics_log(run, path):
    """Line-delimited ``epoch,split,metric,value`` records."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# epochs={run.epochs} seed={run.seed} steps={run.steps}\n")
        for i in range(len(run.train_loss)):
            epoch = i + 1
            fh.write(f"{epoch},train,loss,{run.train_loss[i]!r}\n")
            fh.write(f"{epoch},train,accuracy,{run.train_accuracy[i]!r}\n")
            fh.write(f"{epoch},test,accuracy,{run.test_accuracy[i]!r}\n")
    return path


def read_metrics_log(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            epoch, split, metric, value = line.strip().split(",")
            rows.append((int(epoch), split, metric, float(value)))
    return rows

import numpy as np
import pytest

from oracles import adamw_scalar_trace
from vitdeit.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint
from vitdeit.data import SUBCLASSES
from vitdeit.deit import LookupTeacher
from vitdeit.errors import CheckpointError, ConfigError, NumericError, TrainingError
from vitdeit.synthetic import DEFAULT_TEXTURES, render_texture
from vitdeit.training import (AdamWState, TrainConfig, adamw_step, prepare_fine_tune,
                              read_metrics_log, train_arrays, write_metrics_log)
from vitdeit.vit import TransformerConfig, forward, init_weights

TINY = TransformerConfig(image_size=8, patch_size=4, embed_dim=16, num_heads=2, num_blocks=1,
                         mlp_hidden_dim=32, num_classes=4)


def textures(n, size=16, classes=8, stream=0):
    images = [render_texture(DEFAULT_TEXTURES[SUBCLASSES[i % classes]], size, 100,
                             np.random.default_rng([stream, i])) for i in range(n)]
    return np.stack(images), np.arange(n) % classes


def noise(n, size=8, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, size, size, 3)), np.arange(n) % 4


# -- optimizer ----------------------------------------------------------------


def test_adamw_hand_trace():
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.01)
    params, state = {"p": np.array([0.5])}, AdamWState()
    expected = adamw_scalar_trace(0.5, [1.0, 1.0], lr=0.1, wd=0.01)
    for want in expected:
        params, state = adamw_step(params, {"p": np.array([1.0])}, state, cfg)
        assert abs(params["p"][0] - want) < 1e-12
    assert state.step == 2


def test_adamw_without_momentum_is_sign_step():
    cfg = TrainConfig(learning_rate=0.01, weight_decay=0.0, beta1=0.0, beta2=0.0)
    g = np.array([3.0, -0.25, 1e-3])
    new, _ = adamw_step({"p": np.ones(3)}, {"p": g}, AdamWState(), cfg)
    np.testing.assert_allclose(new["p"], 1 - 0.01 * g / (np.abs(g) + 1e-8), atol=1e-12, rtol=0)


def test_adamw_zero_gradient_cases():
    p = {"p": np.array([2.0, -1.0])}
    new, state = adamw_step(p, {"p": np.zeros(2)}, AdamWState(), TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(new["p"], p["p"])
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
    params, state = p, AdamWState()
    for _ in range(3):
        params, state = adamw_step(params, {"p": np.zeros(2)}, state, cfg)
    np.testing.assert_allclose(params["p"], p["p"] * (1 - 0.05) ** 3, rtol=1e-14)


def test_adamw_rejects_bad_gradients():
    with pytest.raises(NumericError):
        adamw_step({"p": np.ones(2)}, {"p": np.array([np.nan, 0])}, AdamWState(), TrainConfig())
    with pytest.raises(ConfigError):
        adamw_step({"p": np.ones(2)}, {"p": np.ones(3)}, AdamWState(), TrainConfig())


def test_adamw_leaves_inputs_alone():
    params, grads = {"p": np.ones(2)}, {"p": np.ones(2)}
    state = AdamWState()
    adamw_step(params, grads, state, TrainConfig())
    np.testing.assert_array_equal(params["p"], np.ones(2))
    assert state.step == 0 and not state.m


# -- training loop --------------------------------------------------------------


def test_single_batch_epoch_is_one_step():
    X, y = noise(16)
    run = train_arrays(init_weights(TINY, 0), X, y, TrainConfig(epochs=1, batch_size=16))
    assert run.steps == 1
    assert len(run.train_loss) == len(run.train_accuracy) == len(run.test_accuracy) == 1


def test_last_partial_batch_is_trained():
    X, y = noise(20)
    run = train_arrays(init_weights(TINY, 0), X, y, TrainConfig(epochs=2, batch_size=16))
    assert run.steps == 4


def test_zero_learning_rate_keeps_weights():
    X, y = noise(16)
    w = init_weights(TINY, 0)
    run = train_arrays(w, X, y, TrainConfig(learning_rate=0.0, epochs=2, batch_size=8))
    assert run.weights.equals(w)


def test_seeded_runs_are_bitwise_identical(tmp_path):
    X, y = noise(24)
    cfg = TrainConfig(epochs=2, batch_size=8, seed=3)
    paths = []
    for name in ("a", "b"):
        run = train_arrays(init_weights(TINY, 1), X, y, cfg)
        paths.append(save_checkpoint(tmp_path / f"{name}.ckpt", run.weights))
    assert open(paths[0], "rb").read() == open(paths[1], "rb").read()
    other = train_arrays(init_weights(TINY, 1), X, y, TrainConfig(epochs=2, batch_size=8, seed=4))
    assert not other.weights.equals(run.weights)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_batch():
    X, y = noise(16)
    with pytest.raises(TrainingError) as err:
        train_arrays(init_weights(TINY, 0), X, y, TrainConfig(learning_rate=1e300, epochs=3, batch_size=8))
    assert err.value.epoch == 1 and err.value.batch == 2


def test_batch_larger_than_data():
    X, y = noise(4)
    with pytest.raises(ConfigError):
        train_arrays(init_weights(TINY, 0), X, y, TrainConfig(batch_size=16))


def test_overfit_one_batch():
    X, y = noise(4)
    run = train_arrays(init_weights(TINY, 0), X, y,
                       TrainConfig(learning_rate=1e-3, epochs=500, batch_size=4,
                                   track_train_accuracy=False))
    assert run.steps == 500
    assert min(run.train_loss) < 1e-2


def test_memorises_twenty_samples():
    cfg = TransformerConfig(image_size=16, patch_size=4, embed_dim=16, num_heads=2, num_blocks=1,
                            mlp_hidden_dim=32, num_classes=8, head_layers=1)
    X, y = textures(20)
    run = train_arrays(init_weights(cfg, 0), X, y,
                       TrainConfig(learning_rate=3e-3, epochs=200, batch_size=4))
    assert run.train_accuracy[-1] == 1.0


def test_deit_training_with_and_without_teacher():
    cfg = TransformerConfig(**{**TINY.to_dict(), "use_distillation_token": True})
    X, y = noise(8)
    run = train_arrays(init_weights(cfg, 0), X, y, TrainConfig(epochs=1, batch_size=4))
    assert run.steps == 2
    ids = [f"s{i}" for i in range(8)]
    teacher = LookupTeacher({s: np.eye(4)[(k + 1) % 4] for s, k in zip(ids, y)})
    run2 = train_arrays(init_weights(cfg, 0), X, y, TrainConfig(epochs=1, batch_size=4),
                        teacher=teacher, sample_ids=ids)
    assert not run2.weights.equals(run.weights)


def test_freeze_backbone_updates_heads_only():
    X, y = noise(8)
    w = init_weights(TINY, 0)
    run = train_arrays(w, X, y, TrainConfig(epochs=1, batch_size=4, freeze_backbone=True))
    for name, value in run.weights.items():
        if not name.startswith("head."):
            np.testing.assert_array_equal(value, w[name])
    assert not np.array_equal(run.weights["head.w2"], w["head.w2"])


# -- config and logs --------------------------------------------------------------


def test_train_config_file_round_trip(tmp_path):
    cfg = TrainConfig(learning_rate=3e-4, epochs=7, seed=11)
    assert TrainConfig.from_file(cfg.save(tmp_path / "t.cfg")) == cfg
    (tmp_path / "bad.cfg").write_text("learning_rate = fast\n")
    with pytest.raises(ConfigError):
        TrainConfig.from_file(tmp_path / "bad.cfg")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"momentum": "0.9"})
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_metrics_log_round_trip(tmp_path):
    X, y = noise(8)
    run = train_arrays(init_weights(TINY, 0), X, y, TrainConfig(epochs=2, batch_size=4),
                       test_images=X, test_labels=y)
    rows = read_metrics_log(write_metrics_log(run, tmp_path / "m.log"))
    assert len(rows) == 6
    assert rows[0] == (1, "train", "loss", run.train_loss[0])
    assert rows[-1] == (2, "test", "accuracy", run.test_accuracy[1])


# -- checkpoints and fine-tuning ----------------------------------------------------


@pytest.mark.parametrize("cfg", [
    TINY,
    TransformerConfig(image_size=16, patch_size=8, channels=1, embed_dim=6, num_heads=3,
                      num_blocks=3, mlp_hidden_dim=5, num_classes=2, head_layers=1),
    TransformerConfig(use_distillation_token=True),
])
def test_checkpoint_round_trip(tmp_path, cfg):
    w = init_weights(cfg, seed=2)
    path = save_checkpoint(tmp_path / "m.ckpt", w, {"note": "hello"})
    config, loaded, meta = read_checkpoint(path)
    assert config == cfg and meta == {"note": "hello"} and loaded.equals(w)
    img = np.random.default_rng(0).uniform(size=(2, cfg.image_size, cfg.image_size, cfg.channels))
    np.testing.assert_array_equal(forward(img, cfg, w).logits.data, forward(img, cfg, loaded).logits.data)


def test_checkpoint_rejects_damage(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", init_weights(TINY, 0))
    raw = open(path, "rb").read()
    cases = {
        "magic": b"NOPE\n" + raw[len(MAGIC):],
        "truncated": raw[:-8],
        "trailing": raw + b"\0",
        "shape": raw.replace(b"patch.w shape=48,16", b"patch.w shape=16,48"),
        "config": raw.replace(b"embed_dim = 16", b"embed_dim = 8"),
        "version": raw.replace(b"format_version = 1", b"format_version = 9"),
    }
    for name, data in cases.items():
        bad = tmp_path / f"{name}.ckpt"
        bad.write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_fine_tune_head_swap(tmp_path):
    source = init_weights(TINY, seed=0)
    path = save_checkpoint(tmp_path / "src.ckpt", source)
    target = TransformerConfig(**{**TINY.to_dict(), "num_classes": 8})
    weights = prepare_fine_tune(path, 8, target, seed=1)
    assert weights.config == target
    assert weights["head.w2"].shape == (16, 8) and weights["head.b2"].shape == (8,)
    for name, value in source.items():
        if not name.startswith("head."):
            np.testing.assert_array_equal(weights[name], value)
    X, y = noise(8)
    run = train_arrays(weights, X, y, TrainConfig(epochs=0, batch_size=4))
    assert run.weights.equals(weights)
    wrong = TransformerConfig(**{**TINY.to_dict(), "embed_dim": 8, "num_classes": 8})
    with pytest.raises(CheckpointError):
        prepare_fine_tune(path, 8, wrong)


@pytest.mark.slow
def test_fine_tuning_beats_random_init():
    """Paired runs: epochs to reach 60% held-out accuracy, source-pretrained vs scratch."""
    from statistics import median

    cfg = TransformerConfig(image_size=16, patch_size=4, embed_dim=32, num_heads=2, num_blocks=2,
                            mlp_hidden_dim=64, num_classes=8)
    source_cfg = TransformerConfig(**{**cfg.to_dict(), "num_classes": 4})
    budget, target = 30, 0.6

    def epochs_to(run):
        hits = [i + 1 for i, a in enumerate(run.test_accuracy) if a >= target]
        return hits[0] if hits else budget + 1

    gains = []
    for seed in range(3):
        Xs, ys = textures(320, stream=10 * seed + 1)
        Xs, ys = Xs[ys >= 4], ys[ys >= 4] - 4  # source task: the last four classes
        X, y = textures(160, stream=10 * seed + 2)
        Xv, yv = textures(160, stream=10 * seed + 3)
        tc = TrainConfig(learning_rate=5e-4, epochs=budget, seed=seed, track_train_accuracy=False)
        src = train_arrays(init_weights(source_cfg, seed), Xs, ys, tc)
        tuned = train_arrays(prepare_fine_tune(src.weights, 8, seed=seed), X, y, tc, test_images=Xv, test_labels=yv)
        scratch = train_arrays(init_weights(cfg, seed), X, y, tc, test_images=Xv, test_labels=yv)
        gains.append(epochs_to(scratch) - epochs_to(tuned))
    assert median(gains) > 0, gains

import numpy as np
import pytest

from keynet import numeric as nm
from keynet.data import clip_to_scene
from keynet.model import ModelConfig, KeyNet, checkpoint_bytes
from keynet.synth import ClassDef, SynthSpec, generate_synthetic
from keynet.train import (
    TrainConfig,
    lr_at,
    make_batch,
    parse_config_text,
    parse_grid,
    predict,
    random_scenes,
    train_loop,
    train_step,
)

MICRO = ModelConfig(dim=8, heads=2, layers=2, intermediate=16, init_std=0.5, num_classes=3, head_mode="video",
                    grid_w=4, grid_h=3, frames=3, persons=2, objects=1, joints=4, object_points=3, dropout=0.0)


def test_schedule_examples():
    cfg = TrainConfig(lr=1e-4, total_iters=1000, warmup_fraction=0.01)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(10, cfg) == 1e-4
    assert lr_at(5, cfg) == pytest.approx(0.5e-4, abs=0)
    assert lr_at(505, cfg) == pytest.approx(1e-4 * (1 - 495 / 990), rel=1e-15)
    assert lr_at(505, cfg) == pytest.approx(0.5e-4, rel=1e-12)
    assert lr_at(1000, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_at(1001, cfg)


def test_schedule_shape():
    cfg = TrainConfig(lr=3e-4, total_iters=250, warmup_fraction=0.05)
    values = np.array([lr_at(i, cfg) for i in range(251)])
    peak = int(values.argmax())
    assert values.max() == 3e-4 and peak == 13  # round(12.5) -> 13, half-up
    assert np.all(np.diff(values[: peak + 1]) > 0)
    assert np.all(np.diff(values[peak:]) < 0)
    # piecewise linear: second differences vanish away from the kink
    second = np.diff(values, 2)
    second[peak - 1] = 0.0
    assert np.max(np.abs(second)) < 1e-15


def test_zero_lr_leaves_parameters_untouched():
    model = KeyNet(MICRO, seed=0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    state = nm.AdamState.for_params(model.parameters())
    batch = make_batch(random_scenes(MICRO, 3, np.random.default_rng(0)), MICRO)
    train_step(model, state, batch, 0.0)
    for k, v in model.params.items():
        assert np.array_equal(v.data, before[k]), k


def test_overfits_one_batch():
    model = KeyNet(MICRO, seed=1)
    state = nm.AdamState.for_params(model.parameters())
    batch = make_batch(random_scenes(MICRO, 4, np.random.default_rng(1)), MICRO)
    losses = [train_step(model, state, batch, 1e-2) for _ in range(300)]
    assert losses[-1] < 0.01
    ups = [b / a - 1 for a, b in zip(losses, losses[1:]) if b > a]
    assert max(ups, default=0.0) < 0.01


def test_non_finite_loss_is_reported():
    model = KeyNet(MICRO, seed=0)
    model.params["head.b"].data[:] = np.nan
    state = nm.AdamState.for_params(model.parameters())
    batch = make_batch(random_scenes(MICRO, 2, np.random.default_rng(0)), MICRO)
    with pytest.raises(FloatingPointError, match="non-finite"):
        train_step(model, state, batch, 1e-3)


def micro_run(tmp_path, name, iters=6, **kw):
    scenes = random_scenes(MICRO, 8, np.random.default_rng(2))
    cfg = TrainConfig(lr=1e-3, total_iters=iters, batch_size=4, seed=3, checkpoint_every=2, **kw)
    return train_loop(scenes, cfg, MICRO, out_dir=tmp_path / name, eval_scenes=scenes[:4],
                      flip_perm=[1, 0, 3, 2])


def test_training_is_deterministic(tmp_path):
    a = micro_run(tmp_path, "a")
    b = micro_run(tmp_path, "b")
    assert [r[2] for r in a.log] == [r[2] for r in b.log]
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "model.bin").read_bytes() == (tmp_path / "b" / "model.bin").read_bytes()
    assert [p.name for p in a.checkpoints] == ["model_000000.bin", "model_000002.bin", "model_000004.bin", "model.bin"]
    lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iter,lr,loss,metric" and len(lines) == 7
    assert lines[-1].split(",")[3] != ""


def test_zero_iterations_write_only_the_initial_checkpoint(tmp_path):
    run = micro_run(tmp_path, "z", iters=0)
    files = sorted(p.name for p in (tmp_path / "z").iterdir())
    assert files == ["metrics.csv", "model_000000.bin"]
    assert (tmp_path / "z" / "model_000000.bin").read_bytes() == checkpoint_bytes(KeyNet(MICRO, seed=3))
    assert run.log == []


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train_loop([], TrainConfig(), MICRO)


def test_config_parser():
    text = """
    # a comment
    lr = 1e-3
    total_iters=50   # trailing comment
    flip=false
    grid=16x12
    dim=32
    seed=4
    """
    cfg, model_kw, extra = parse_config_text(text, extra={"seed": "int"})
    assert cfg.lr == 1e-3 and cfg.total_iters == 50 and cfg.flip is False and cfg.seed == 0
    assert model_kw == {"grid_w": 16, "grid_h": 12, "dim": 32}
    assert extra == {"seed": 4}
    assert parse_grid("32x24") == (32, 24)
    for bad in ("lr=1\nlr=2", "colour=red", "lr=fast", "just words", "grid=0x3", "warmup_fraction=1.5"):
        with pytest.raises(ValueError):
            parse_config_text(bad)


def test_unknown_key_error_names_the_line():
    with pytest.raises(ValueError, match="cfg:2"):
        parse_config_text("lr=1\nbogus=2", source="cfg")


def test_balanced_sampler_lifts_minority_recall():
    spec = SynthSpec([ClassDef("walk", "translate"), ClassDef("wave", "wave")], clips_per_class=110, frames=6, seed=0)
    header, clips = generate_synthetic(spec)
    mc = ModelConfig(dim=16, heads=2, layers=1, intermediate=32, dropout=0.0, num_classes=2, head_mode="video",
                     frames=6, persons=1, objects=0, joints=15)
    scenes = [clip_to_scene(c, header, mc.scene) for c in clips]
    major, minor = scenes[0::2], scenes[1::2]
    train = major[:90] + minor[:10]
    test = major[90:] + minor[90:]
    y = np.array([s.label for s in test])
    recall = {}
    for sampler in ("uniform", "balanced"):
        cfg = TrainConfig(lr=1e-3, total_iters=150, batch_size=16, sampler=sampler, flip=False, crop=False,
                          expand=False)
        logits, _ = predict(train_loop(train, cfg, mc).model, test)
        recall[sampler] = float(np.mean(logits.argmax(1)[y == 1] == 1))
    assert recall["balanced"] > recall["uniform"], recall

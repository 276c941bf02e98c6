import math

import numpy as np
import pytest

from keynet import numeric as nm
from keynet.model import (
    ACTOR,
    FLAT,
    HIERARCHICAL,
    VIDEO,
    KeyNet,
    ModelConfig,
    attention,
    block_size,
    checkpoint_bytes,
    checkpoint_from_bytes,
    classify,
    count_parameters,
    embed,
    encoder_forward,
    flat_counterpart,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from keynet.numeric import Tensor
from keynet.scene import SceneSequence, TokenizedScene, tokenize_scene
from keynet.train import check_gradients

MICRO = dict(dim=8, heads=2, layers=2, intermediate=16, init_std=0.5, num_classes=3, grid_w=4, grid_h=3,
             frames=3, persons=2, objects=1, joints=4, object_points=3)


def random_tokens(cfg: ModelConfig, rng, batch=3) -> TokenizedScene:
    s = cfg.scene
    scenes = []
    for _ in range(batch):
        n = int(rng.integers(1, s.persons + 1))
        m = int(rng.integers(0, s.objects + 1))
        scene = SceneSequence(
            320.0,
            240.0,
            rng.uniform(0, 1, (n, s.frames, s.joints, 2)) * [320, 240],
            rng.random((n, s.frames, s.joints)) < 0.85,
            rng.uniform(0, 1, (m, s.object_points, 2)) * [320, 240],
            np.ones((m, s.object_points), bool),
            keyframe=int(rng.integers(1, s.frames + 1)),
        )
        scenes.append(tokenize_scene(scene, s))
    return TokenizedScene.stack(scenes)


def test_embed_is_a_sum_of_lookups():
    cfg = ModelConfig(**MICRO)
    params = init_params(cfg, 1)
    tokens = random_tokens(cfg, np.random.default_rng(0))
    out = embed(tokens, params).data
    expected = sum(params[f"emb.{name}"].data[ids] for name, ids in zip(
        ("position", "type", "segment", "instance"), tokens.streams()))
    assert np.array_equal(out, expected)
    # zeroing three tables leaves only the fourth
    for keep in ("position", "type", "segment", "instance"):
        zeroed = dict(params)
        for name in ("position", "type", "segment", "instance"):
            if name != keep:
                zeroed[f"emb.{name}"] = Tensor(np.zeros_like(params[f"emb.{name}"].data))
        only = embed(tokens, zeroed).data
        ids = dict(zip(("position", "type", "segment", "instance"), tokens.streams()))[keep]
        assert np.array_equal(only, params[f"emb.{keep}"].data[ids])
    assert not out[~tokens.mask].any()


def test_attention_examples():
    rng = np.random.default_rng(0)
    v = Tensor(rng.standard_normal((1, 1, 3)))
    q = Tensor(rng.standard_normal((1, 1, 3)))
    assert np.array_equal(attention(q, Tensor(rng.standard_normal((1, 1, 3))), v).data, v.data)

    trace = []
    k = Tensor(np.ones((1, 2, 4)))
    attention(Tensor(rng.standard_normal((1, 1, 4))), k, Tensor(rng.standard_normal((1, 2, 4))), trace=trace)
    assert np.allclose(trace[0], [[[0.5, 0.5]]])

    # scores [0, ln 2] after the 1/sqrt(d) scale
    d = 4
    q = Tensor(np.array([[[1.0, 0, 0, 0]]]))
    k = Tensor(np.array([[[0.0, 0, 0, 0], [math.log(2) * math.sqrt(d), 0, 0, 0]]]))
    trace = []
    attention(q, k, Tensor(np.eye(2, 4)[None]), trace=trace)
    assert np.allclose(trace[0], [[[1 / 3, 2 / 3]]], atol=1e-12)


def test_fully_masked_row_gives_zeros():
    q = Tensor(np.ones((1, 2, 2)))
    out = attention(q, q, q, np.zeros((1, 1, 2), bool))
    assert np.array_equal(out.data, np.zeros((1, 2, 2)))


@pytest.mark.parametrize("arch", [HIERARCHICAL, FLAT])
def test_attention_rows_sum_to_one(arch):
    cfg = ModelConfig(**MICRO, architecture=arch)
    model = KeyNet(cfg, seed=2)
    trace = []
    model(random_tokens(cfg, np.random.default_rng(1)), trace=trace)
    assert trace
    for w in trace:
        sums = w.sum(axis=-1)
        live = sums > 0
        assert np.allclose(sums[live], 1.0, atol=1e-6)


def test_masked_keys_get_no_weight():
    cfg = ModelConfig(**MICRO)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 5, cfg.dim)))
    valid = np.array([[1, 1, 1, 0, 0], [1, 0, 1, 0, 1]], bool)
    trace = []
    encoder_forward(x, params, 0, cfg, valid, trace=trace)
    for w in trace:
        assert np.all(w[:, :, :, ~valid[0]][0] < 1e-12)
        assert np.all(w[1][:, :, ~valid[1]] < 1e-12)


def test_padding_content_does_not_leak():
    cfg = ModelConfig(**MICRO)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(4)
    real = rng.standard_normal((1, 4, cfg.dim))
    a = np.concatenate([real, rng.standard_normal((1, 3, cfg.dim))], axis=1)
    b = np.concatenate([real, 100 * rng.standard_normal((1, 3, cfg.dim))], axis=1)
    valid = np.array([[1, 1, 1, 1, 0, 0, 0]], bool)
    out_a = encoder_forward(Tensor(a), params, 0, cfg, valid).data
    out_b = encoder_forward(Tensor(b), params, 0, cfg, valid).data
    assert np.max(np.abs(out_a[:, :4] - out_b[:, :4])) < 1e-9
    short = encoder_forward(Tensor(real), params, 0, cfg, np.ones((1, 4), bool)).data
    assert np.max(np.abs(out_a[:, :4] - short)) < 1e-9


def test_zero_projections_pass_the_input_through_the_norms():
    cfg = ModelConfig(**MICRO)
    params = {k: Tensor(np.zeros_like(v.data)) if (".w" in k or k.endswith(".b")) and "ln" not in k else v
              for k, v in init_params(cfg, 0).items()}
    x = np.random.default_rng(5).standard_normal((2, 3, cfg.dim))
    out = encoder_forward(Tensor(x), params, 0, cfg, np.ones((2, 3), bool)).data
    mu = x.mean(axis=-1, keepdims=True)
    norm = (x - mu) / np.sqrt(x.var(axis=-1, keepdims=True) + cfg.ln_eps)
    assert np.allclose(out, norm, atol=1e-9)


def test_single_actor_single_frame_shape():
    cfg = ModelConfig(**{**MICRO, "frames": 1, "persons": 1, "objects": 0}, head_mode=ACTOR)
    logits = KeyNet(cfg, 0)(random_tokens(cfg, np.random.default_rng(6), batch=2)).logits
    assert logits.shape == (2, 1, cfg.num_classes)


def test_actor_order_does_not_change_actor_logits():
    cfg = ModelConfig(**{**MICRO, "persons": 3}, head_mode=ACTOR)
    model = KeyNet(cfg, seed=7)
    s = cfg.scene
    rng = np.random.default_rng(8)
    scene = SceneSequence(
        320.0, 240.0,
        rng.uniform(0, 1, (3, s.frames, s.joints, 2)) * [320, 240],
        np.ones((3, s.frames, s.joints), bool),
        rng.uniform(0, 1, (1, s.object_points, 2)) * [320, 240],
        np.ones((1, s.object_points), bool),
    )
    tok = tokenize_scene(scene, s)
    per = s.frames * s.joints
    order = [2, 0, 1]
    blocks = [np.arange(i * per, (i + 1) * per) for i in order]
    idx = np.concatenate(blocks + [np.arange(s.human_length, s.length)])
    shuffled = TokenizedScene(*(getattr(tok, f)[idx] for f in ("position", "type", "segment", "instance", "mask")))
    base = model(tok).logits.data[0]
    moved = model(shuffled).logits.data[0]
    assert np.allclose(moved, base[order], atol=1e-9)


def test_other_actors_do_not_touch_an_actor_logit():
    cfg = ModelConfig(**{**MICRO, "persons": 2}, head_mode=ACTOR)
    model = KeyNet(cfg, seed=9)
    tok = random_tokens(cfg, np.random.default_rng(10), batch=1)
    alone = tok.select((slice(None), slice(None)))
    alone = TokenizedScene(*(x.copy() for x in (alone.position, alone.type, alone.segment, alone.instance, alone.mask)))
    per = cfg.frames * cfg.joints
    for arr in alone.streams():
        arr[:, per : 2 * per] = 0
    alone.mask[:, per : 2 * per] = False
    a = model(tok)
    b = model(alone)
    assert not b.valid[0, 1]
    assert np.max(np.abs(a.logits.data[0, 0] - b.logits.data[0, 0])) < 1e-9


def test_classify_examples():
    label, probs = classify(np.array([2.0, 1.0, 0.0]), VIDEO)
    assert label == 0 and probs.sum() == pytest.approx(1.0)
    assert np.array_equal(classify(np.zeros(4), ACTOR), np.full(4, 0.5))
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.standard_normal(5)
        j = rng.integers(5)
        bumped = z.copy()
        bumped[j] += 1
        assert classify(bumped, VIDEO)[1][j] >= classify(z, VIDEO)[1][j]
        assert classify(bumped, ACTOR)[j] >= classify(z, ACTOR)[j]


def trainable_count(cfg: ModelConfig) -> int:
    params = init_params(cfg, 0)
    return sum(p.data.size for p in params.values()) - 4 * cfg.dim  # frozen padding rows


def test_parameter_count_near_the_published_size():
    cfg = ModelConfig(heads=4, layers=4, dim=128, intermediate=128)
    n = count_parameters(cfg)
    assert n == trainable_count(cfg)
    assert abs(n - 0.91e6) <= 0.15 * 0.91e6


def test_doubling_layers_adds_whole_blocks():
    cfg = ModelConfig(**MICRO)
    deeper = ModelConfig(**{**MICRO, "layers": 4})
    assert count_parameters(deeper) - count_parameters(cfg) == cfg.stages * 2 * block_size(cfg.dim, cfg.intermediate)


def test_hand_counted_unit_model():
    cfg = ModelConfig(dim=1, heads=1, layers=1, intermediate=1, num_classes=2, grid_w=2, grid_h=2,
                      frames=2, persons=1, objects=1, joints=2, object_points=2)
    # embeddings 4+4+2+2, class vectors 2, two blocks of 16, head 2+2
    assert count_parameters(cfg) == 12 + 2 + 32 + 4 == trainable_count(cfg)


def test_flat_counterpart_budget():
    cfg = ModelConfig(**MICRO)
    flat = flat_counterpart(cfg)
    assert flat.architecture == FLAT and flat.layers == 2 * cfg.layers
    assert count_parameters(cfg) - count_parameters(flat) == cfg.dim


@pytest.mark.parametrize("arch,mode", [(HIERARCHICAL, VIDEO), (HIERARCHICAL, ACTOR), (FLAT, VIDEO), (FLAT, ACTOR)])
def test_end_to_end_gradients(arch, mode):
    cfg = ModelConfig(**MICRO, architecture=arch, head_mode=mode)
    result = check_gradients(cfg, seed=0, h=1e-5)
    assert result.passed(1e-4), result.worst


def test_forward_is_deterministic_with_dropout():
    cfg = ModelConfig(**MICRO, dropout=0.3)
    model = KeyNet(cfg, seed=0)
    tok = random_tokens(cfg, np.random.default_rng(0))
    a = model(tok, rng=np.random.default_rng(5)).logits.data
    b = model(tok, rng=np.random.default_rng(5)).logits.data
    c = model(tok).logits.data
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)
    assert np.all(np.isfinite(a))


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(**MICRO, head_mode=ACTOR)
    model = KeyNet(cfg, seed=3)
    path = tmp_path / "m.bin"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw.startswith(b"KEYNET1")
    back = load_checkpoint(path)
    assert back.cfg == cfg
    assert checkpoint_bytes(back) == raw
    tok = random_tokens(cfg, np.random.default_rng(0))
    assert np.array_equal(back(tok).logits.data, model(tok).logits.data)


def test_corrupt_checkpoints_are_rejected():
    raw = checkpoint_bytes(KeyNet(ModelConfig(**MICRO), 0))
    with pytest.raises(ValueError):
        checkpoint_from_bytes(b"NOTKEYNET" + raw[7:])
    with pytest.raises(ValueError):
        checkpoint_from_bytes(raw[:-5])
    with pytest.raises(ValueError):
        checkpoint_from_bytes(raw + b"\0")


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dim=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(head_mode="frame")


def test_gradient_flows_into_every_parameter():
    cfg = ModelConfig(**MICRO, head_mode=ACTOR)
    model = KeyNet(cfg, 0)
    tok = random_tokens(cfg, np.random.default_rng(2))
    out = model(tok)
    nm.backward(out.logits.sum())
    for name, p in model.params.items():
        assert p.grad is not None and np.any(p.grad != 0), name

"""Token embeddings, multi-head self-attention encoders and the two KeyNet
classifiers: a flat encoder over every token and the two-stage hierarchical
encoder (per actor-frame, then per actor)."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import numeric as nm
from .numeric import Tensor
from .scene import SceneConfig, TokenizedScene

HIERARCHICAL = "hierarchical"
FLAT = "flat"
VIDEO = "video"
ACTOR = "actor"


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    heads: int = 4
    layers: int = 4
    intermediate: int = 128
    dropout: float = 0.1
    num_classes: int = 20
    head_mode: str = ACTOR
    architecture: str = HIERARCHICAL
    activation: str = "gelu"
    init_std: float = 0.02
    ln_eps: float = 1e-12
    grid_w: int = 32
    grid_h: int = 24
    frames: int = 10
    persons: int = 5
    objects: int = 3
    joints: int = 17
    object_points: int = 8

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.head_mode not in (VIDEO, ACTOR):
            raise ValueError(f"unknown head mode {self.head_mode!r}")
        if self.architecture not in (HIERARCHICAL, FLAT):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if min(self.layers, self.intermediate, self.num_classes) < 1:
            raise ValueError("layers, intermediate and num_classes must be positive")
        self.scene  # validates the geometry fields

    @property
    def scene(self) -> SceneConfig:
        return SceneConfig(self.grid_w, self.grid_h, self.frames, self.persons, self.objects, self.joints, self.object_points)

    @property
    def vocab_sizes(self) -> dict[str, int]:
        s = self.scene
        return {
            "position": s.position_vocab,
            "type": s.type_vocab,
            "segment": s.segment_vocab,
            "instance": s.instance_vocab,
        }

    @property
    def stages(self) -> int:
        return 2 if self.architecture == HIERARCHICAL else 1

    def records(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]

    @classmethod
    def from_records(cls, records: list[str]) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for rec in records:
            key, _, raw = rec.partition("=")
            if key not in kinds:
                raise ValueError(f"unknown model config key {key!r}")
            values[key] = _coerce(key, raw, kinds[key])
        return cls(**values)


def _coerce(key: str, raw: str, kind) -> object:
    kind = kind if isinstance(kind, str) else kind.__name__
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"bad value for {key}: {raw!r}") from None


# ---------------------------------------------------------------- parameters


def block_size(dim: int, intermediate: int) -> int:
    """Trainable scalars in one encoder block."""
    attention = 4 * (dim * dim + dim)
    ffn = dim * intermediate + intermediate + intermediate * dim + dim
    norms = 2 * 2 * dim
    return attention + ffn + norms


def count_parameters(cfg: ModelConfig) -> int:
    """Trainable scalars; the frozen padding row of each embedding table is excluded."""
    embeddings = sum(v - 1 for v in cfg.vocab_sizes.values()) * cfg.dim
    class_vectors = cfg.stages * cfg.dim
    encoders = cfg.stages * cfg.layers * block_size(cfg.dim, cfg.intermediate)
    head = cfg.dim * cfg.num_classes + cfg.num_classes
    return embeddings + class_vectors + encoders + head


def flat_counterpart(cfg: ModelConfig) -> ModelConfig:
    """Single-stage model with the same encoder budget: twice the layers, one fewer class vector."""
    if cfg.architecture == FLAT:
        return cfg
    return replace(cfg, architecture=FLAT, layers=cfg.layers * cfg.stages)


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, inner = cfg.dim, cfg.intermediate
    params: dict[str, np.ndarray] = {}
    for name, vocab in cfg.vocab_sizes.items():
        table = _truncated_normal(rng, (vocab, d), cfg.init_std)
        table[0] = 0.0
        params[f"emb.{name}"] = table
    for stage in range(cfg.stages):
        params[f"cls.{stage}"] = _truncated_normal(rng, (d,), cfg.init_std)
        for layer in range(cfg.layers):
            p = f"enc{stage}.{layer}."
            for proj in ("q", "k", "v", "o"):
                params[p + proj + ".w"] = _truncated_normal(rng, (d, d), cfg.init_std)
                params[p + proj + ".b"] = np.zeros(d)
            params[p + "ln1.g"] = np.ones(d)
            params[p + "ln1.b"] = np.zeros(d)
            params[p + "ff1.w"] = _truncated_normal(rng, (d, inner), cfg.init_std)
            params[p + "ff1.b"] = np.zeros(inner)
            params[p + "ff2.w"] = _truncated_normal(rng, (inner, d), cfg.init_std)
            params[p + "ff2.b"] = np.zeros(d)
            params[p + "ln2.g"] = np.ones(d)
            params[p + "ln2.b"] = np.zeros(d)
    params["head.w"] = _truncated_normal(rng, (d, cfg.num_classes), cfg.init_std)
    params["head.b"] = np.zeros(cfg.num_classes)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


# ---------------------------------------------------------------- layers


def embed(
    tokens: TokenizedScene,
    params: dict[str, Tensor],
    which=("position", "type", "segment", "instance"),
) -> Tensor:
    """Sum of the selected embedding rows per token; padding gives the zero vector."""
    streams = dict(zip(("position", "type", "segment", "instance"), tokens.streams()))
    out = None
    for name in which:
        rows = nm.embedding(params[f"emb.{name}"], streams[name])
        out = rows if out is None else out + rows
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, valid=None, trace: list | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``valid`` marks usable key positions (broadcast against the score matrix);
    a query with no usable key gets a zero output row.
    """
    scores = nm.matmul(q, nm.swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    if valid is None:
        weights = nm.softmax_lastdim(scores)
    else:
        weights = nm.masked_softmax(scores, valid)
    if trace is not None:
        trace.append(weights.data)
    return nm.matmul(weights, v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    s, length, d = x.shape
    return nm.transpose(x.reshape(s, length, heads, d // heads), (0, 2, 1, 3))


def encoder_forward(
    x: Tensor,
    params: dict[str, Tensor],
    stage: int,
    cfg: ModelConfig,
    valid: np.ndarray,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> Tensor:
    """Post-norm transformer blocks over ``x`` of shape (S, L, D).

    ``valid`` (S, L) marks real positions; padded positions are never attended to.
    """
    s, length, d = x.shape
    key_valid = np.asarray(valid, dtype=bool)[:, None, None, :]
    for layer in range(cfg.layers):
        p = f"enc{stage}.{layer}."
        q = _split_heads(nm.linear(x, params[p + "q.w"], params[p + "q.b"]), cfg.heads)
        k = _split_heads(nm.linear(x, params[p + "k.w"], params[p + "k.b"]), cfg.heads)
        v = _split_heads(nm.linear(x, params[p + "v.w"], params[p + "v.b"]), cfg.heads)
        ctx = attention(q, k, v, key_valid, trace)
        ctx = nm.transpose(ctx, (0, 2, 1, 3)).reshape(s, length, d)
        attn_out = nm.dropout(nm.linear(ctx, params[p + "o.w"], params[p + "o.b"]), cfg.dropout, rng)
        x = nm.layer_norm(x + attn_out, params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps)
        hidden = nm.gelu(nm.linear(x, params[p + "ff1.w"], params[p + "ff1.b"]))
        ff_out = nm.dropout(nm.linear(hidden, params[p + "ff2.w"], params[p + "ff2.b"]), cfg.dropout, rng)
        x = nm.layer_norm(x + ff_out, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)
    return x


def _with_class_vector(x: Tensor, cls_vec: Tensor, valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
    s, _, d = x.shape
    head = nm.broadcast_to(cls_vec.reshape(1, 1, d), (s, 1, d))
    return nm.concat([head, x], axis=1), np.concatenate([np.ones((s, 1), bool), valid], axis=1)


def _encode_groups(x: Tensor, valid: np.ndarray, params, stage: int, cfg: ModelConfig, rng, trace) -> Tensor:
    """First (class-vector) output per group; groups without valid tokens give zeros."""
    groups = valid.shape[0]
    live = np.flatnonzero(valid.any(axis=1))
    if live.size == 0:
        return Tensor(np.zeros((groups, cfg.dim)))
    if live.size < groups:
        x = nm.take(x, live)
        valid = valid[live]
    seq, seq_valid = _with_class_vector(x, params[f"cls.{stage}"], valid)
    out = encoder_forward(seq, params, stage, cfg, seq_valid, rng, trace)
    first = nm.take(out, (slice(None), 0))
    return first if live.size == groups else nm.scatter_rows(first, live, groups)


@dataclass
class Output:
    logits: Tensor  # (B, C) video mode, (B, N, C) actor mode
    valid: np.ndarray  # (B,) or (B, N)


def _group_ids(stream: np.ndarray) -> np.ndarray:
    """Per-group token id (all valid tokens in a group share it; 0 if none)."""
    return stream.max(axis=-1)


class KeyNet:
    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return count_parameters(self.cfg)

    def __call__(self, tokens: TokenizedScene, rng=None, trace=None) -> Output:
        return self.forward(tokens, rng, trace)

    def forward(self, tokens: TokenizedScene, rng: np.random.Generator | None = None, trace: list | None = None) -> Output:
        if tokens.position.ndim == 1:
            tokens = TokenizedScene.stack([tokens])
        expected = self.cfg.scene.length
        if tokens.position.shape[1] != expected:
            raise ValueError(f"token length {tokens.position.shape[1]} != configured {expected}")
        if self.cfg.architecture == HIERARCHICAL:
            return self._hierarchical(tokens, rng, trace)
        return self._flat(tokens, rng, trace)

    def _head(self, feats: Tensor) -> Tensor:
        return nm.linear(feats, self.params["head.w"], self.params["head.b"])

    def _video_pool(self, per_actor: Tensor, actor_valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
        weights = actor_valid / np.maximum(actor_valid.sum(axis=1, keepdims=True), 1)
        pooled = (per_actor * weights[:, :, None]).sum(axis=1)
        return pooled, actor_valid.any(axis=1)

    def _flat(self, tokens: TokenizedScene, rng, trace) -> Output:
        cfg, scene = self.cfg, self.cfg.scene
        b = tokens.position.shape[0]
        e = nm.dropout(embed(tokens, self.params), cfg.dropout, rng)
        seq, seq_valid = _with_class_vector(e, self.params["cls.0"], tokens.mask)
        out = encoder_forward(seq, self.params, 0, cfg, seq_valid, rng, trace)
        human = tokens.mask[:, : scene.human_length].reshape(b, scene.persons, -1)
        actor_valid = human.any(axis=2)
        if cfg.head_mode == VIDEO:
            return Output(self._head(nm.take(out, (slice(None), 0))), tokens.mask.any(axis=1))
        feats = nm.take(out, (slice(None), slice(1, 1 + scene.human_length)))
        feats = feats.reshape(b, scene.persons, -1, cfg.dim)
        w = human / np.maximum(human.sum(axis=2, keepdims=True), 1)
        per_actor = (feats * w[..., None]).sum(axis=2)
        return Output(self._head(per_actor), actor_valid)

    def _hierarchical(self, tokens: TokenizedScene, rng, trace) -> Output:
        cfg, scene = self.cfg, self.cfg.scene
        b, d = tokens.position.shape[0], cfg.dim
        n, t, kh = scene.persons, scene.frames, scene.joints
        m, ko = scene.objects, scene.object_points
        hl = scene.human_length

        # stage 1: each (actor, frame) group and each object, position + type only
        human_tokens = tokens.select((slice(None), slice(0, hl)))
        e_h = embed(human_tokens, self.params, ("position", "type")).reshape(b * n * t, kh, d)
        e_h = nm.dropout(e_h, cfg.dropout, rng)
        h_valid = human_tokens.mask.reshape(b * n * t, kh)
        h = _encode_groups(e_h, h_valid, self.params, 0, cfg, rng, trace).reshape(b, n, t, d)
        group_valid = h_valid.any(axis=1).reshape(b, n, t)

        def stage2_inputs(sub: TokenizedScene, groups: tuple[int, ...], size: int):
            inst = _group_ids(sub.instance.reshape(*groups, size))
            seg = _group_ids(sub.segment.reshape(*groups, size))
            return nm.embedding(self.params["emb.instance"], inst) + nm.embedding(self.params["emb.segment"], seg)

        r = h + stage2_inputs(human_tokens, (b, n, t), kh)
        parts = [r]
        valids = [group_valid]
        if m:
            obj_tokens = tokens.select((slice(None), slice(hl, hl + m * ko)))
            e_o = embed(obj_tokens, self.params, ("position", "type")).reshape(b * m, ko, d)
            e_o = nm.dropout(e_o, cfg.dropout, rng)
            o_valid = obj_tokens.mask.reshape(b * m, ko)
            h_o = _encode_groups(e_o, o_valid, self.params, 0, cfg, rng, trace).reshape(b, m, d)
            r_o = h_o + stage2_inputs(obj_tokens, (b, m), ko)
            parts.append(nm.broadcast_to(r_o.reshape(b, 1, m, d), (b, n, m, d)))
            valids.append(np.broadcast_to(o_valid.any(axis=1).reshape(b, 1, m), (b, n, m)))

        # stage 2: one sequence per actor (its frames, then the shared objects)
        seq = nm.concat(parts, axis=2).reshape(b * n, -1, d)
        seq_valid = np.concatenate(valids, axis=2).reshape(b * n, -1)
        actor_valid = group_valid.any(axis=2)
        # an actor with no valid frame is dropped even if objects are present
        seq_valid = seq_valid & actor_valid.reshape(b * n, 1)
        per_actor = _encode_groups(seq, seq_valid, self.params, 1, cfg, rng, trace).reshape(b, n, d)
        if cfg.head_mode == VIDEO:
            pooled, any_valid = self._video_pool(per_actor, actor_valid)
            return Output(self._head(pooled), any_valid)
        return Output(self._head(per_actor), actor_valid)


# ---------------------------------------------------------------- prediction


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def classify(logits, head_mode: str):
    """Video mode: (argmax class, softmax probabilities). Actor mode: per-class sigmoid scores."""
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if head_mode == VIDEO:
        probs = softmax(logits)
        return probs.argmax(axis=-1), probs
    if head_mode == ACTOR:
        return sigmoid(logits)
    raise ValueError(f"unknown head mode {head_mode!r}")


# ---------------------------------------------------------------- checkpoints

MAGIC = b"KEYNET1"


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(model: KeyNet) -> bytes:
    out = [MAGIC]
    records = model.cfg.records()
    out.append(struct.pack("<I", len(records)))
    out.extend(_pack_str(r) for r in records)
    out.append(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        out.append(_pack_str(name))
        out.append(struct.pack("<I", p.ndim))
        out.append(struct.pack(f"<{p.ndim}I", *p.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(model: KeyNet, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_from_bytes(raw: bytes, source: str = "<bytes>") -> KeyNet:
    if not raw.startswith(MAGIC):
        raise ValueError(f"{source}: not a KEYNET1 checkpoint")
    pos = len(MAGIC)

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(raw):
            raise ValueError(f"{source}: truncated checkpoint")
        (v,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        return v

    def text() -> str:
        nonlocal pos
        size = u32()
        s = raw[pos : pos + size].decode("utf-8")
        pos += size
        return s

    cfg = ModelConfig.from_records([text() for _ in range(u32())])
    params = {}
    for _ in range(u32()):
        name = text()
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        if pos + 8 * count > len(raw):
            raise ValueError(f"{source}: truncated values for {name}")
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        params[name] = Tensor(values.astype(np.float64), requires_grad=True, name=name)
    if pos != len(raw):
        raise ValueError(f"{source}: {len(raw) - pos} trailing bytes")
    expected = init_params(cfg, 0)
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise ValueError(f"{source}: parameters do not match the stored config")
    return KeyNet(cfg, params=params)


def load_checkpoint(path) -> KeyNet:
    return checkpoint_from_bytes(Path(path).read_bytes(), str(path))

"""Training loop: class-balanced sampling, augmentation, Adam with linear
warmup then linear decay to zero."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import numeric as nm
from .evaluate import ActorPrediction, GroundTruth, frame_map, top1_accuracy
from .model import ACTOR, VIDEO, KeyNet, ModelConfig, save_checkpoint
from .scene import AugmentPolicy, SceneSequence, TokenizedScene, augment, tokenize_scene, weighted_sample_indices

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    total_iters: int = 1000
    warmup_fraction: float = 0.01
    batch_size: int = 64
    seed: int = 0
    sampler: str = "balanced"
    flip: bool = True
    crop: bool = True
    expand: bool = True
    augment_probability: float = 0.5
    crop_min: float = 0.6  # smallest crop side as a fraction of the frame
    max_expand: float = 1.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    checkpoint_every: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.sampler not in ("balanced", "uniform"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    @property
    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.flip, self.crop, self.expand, self.augment_probability, (self.crop_min, 1.0), self.max_expand)


def warmup_iters(cfg: TrainConfig) -> int:
    return int(math.floor(cfg.warmup_fraction * cfg.total_iters + 0.5))


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr`` over the warmup iterations, then linear decay to 0."""
    total = cfg.total_iters
    if not 0 <= it <= total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    w = warmup_iters(cfg)
    if w > 0 and it <= w:
        return cfg.lr * it / w
    if total == w:
        return 0.0
    return cfg.lr * (1.0 - (it - w) / (total - w))


# ---------------------------------------------------------------- config files

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _convert(key: str, raw: str, kind: str):
    try:
        if kind == "bool":
            return _BOOL[raw.lower()]
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except (KeyError, ValueError):
        raise ValueError(f"bad value for {key}: {raw!r}") from None


def read_key_values(text: str, source: str = "<config>") -> list[tuple[int, str, str]]:
    """(line, key, raw value) for each ``key=value`` line; ``#`` starts a comment."""
    out = []
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ValueError(f"{source}:{lineno}: expected key=value")
        if key in seen:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        out.append((lineno, key, raw))
    return out


def parse_grid(raw: str) -> tuple[int, int]:
    """``32x24`` -> (32, 24)."""
    w, sep, h = raw.lower().partition("x")
    try:
        if not sep:
            raise ValueError
        gw, gh = int(w), int(h)
    except ValueError:
        raise ValueError(f"bad grid {raw!r}, expected WxH") from None
    if gw < 1 or gh < 1:
        raise ValueError(f"bad grid {raw!r}, extents must be positive")
    return gw, gh


def parse_config_text(text: str, source: str = "<config>", extra: dict[str, str] | None = None) -> tuple[TrainConfig, dict, dict]:
    """``key=value`` lines into a TrainConfig, ModelConfig overrides and any ``extra`` keys.

    ``extra`` maps additional accepted keys to their kind ("int", "float", "str", "bool").
    ``grid=32x24`` sets both grid extents.
    """
    train_kinds = {f.name: f.type for f in fields(TrainConfig)}
    model_kinds = {f.name: f.type for f in fields(ModelConfig)}
    extra = extra or {}
    train_kw, model_kw, extra_kw = {}, {}, {}
    for lineno, key, raw in read_key_values(text, source):
        try:
            if key == "grid":
                model_kw["grid_w"], model_kw["grid_h"] = parse_grid(raw)
            elif key in extra:
                extra_kw[key] = _convert(key, raw, extra[key])
            elif key in train_kinds:
                train_kw[key] = _convert(key, raw, train_kinds[key])
            elif key in model_kinds:
                model_kw[key] = _convert(key, raw, model_kinds[key])
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    return TrainConfig(**train_kw), model_kw, extra_kw


def load_config(path, extra: dict[str, str] | None = None) -> tuple[TrainConfig, dict, dict]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path), extra)


# ---------------------------------------------------------------- batches


def scene_class(scene: SceneSequence) -> int:
    """Class used for balanced sampling: the video label, else the first actor's first label."""
    if scene.label is not None:
        return scene.label
    if scene.actor_labels is not None and scene.actor_labels.size:
        hot = np.flatnonzero(scene.actor_labels[0])
        return int(hot[0]) if hot.size else -1
    return -1


@dataclass
class Batch:
    tokens: TokenizedScene
    labels: np.ndarray | None  # (B,) video mode
    targets: np.ndarray | None  # (B, N, C) actor mode


def make_batch(scenes: list[SceneSequence], model_cfg: ModelConfig) -> Batch:
    cfg = model_cfg.scene
    tokens = TokenizedScene.stack([tokenize_scene(s, cfg) for s in scenes])
    if model_cfg.head_mode == VIDEO:
        labels = np.array([s.label for s in scenes], dtype=np.int64)
        return Batch(tokens, labels, None)
    targets = np.zeros((len(scenes), cfg.persons, model_cfg.num_classes))
    for b, s in enumerate(scenes):
        if s.actor_labels is not None:
            n = min(cfg.persons, s.actor_labels.shape[0])
            targets[b, :n] = s.actor_labels[:n]
    return Batch(tokens, None, targets)


def loss_fn(model: KeyNet, batch: Batch, rng=None) -> nm.Tensor:
    out = model(batch.tokens, rng)
    if model.cfg.head_mode == VIDEO:
        return nm.cross_entropy(out.logits, batch.labels)
    weights = np.broadcast_to(out.valid[..., None], batch.targets.shape).astype(np.float64)
    return nm.bce_with_logits(out.logits, batch.targets, weights)


def train_step(model: KeyNet, state: nm.AdamState, batch: Batch, lr: float, rng=None, grad_clip: float = 0.0) -> float:
    """Forward, backward and one Adam update; returns the pre-update loss."""
    model.zero_grad()
    loss = loss_fn(model, batch, rng)
    value = float(loss.data)
    if not math.isfinite(value):
        worst = max((float(np.abs(p.data).max()) for p in model.parameters()), default=0.0)
        raise FloatingPointError(f"non-finite loss {value} at lr={lr}; largest |param| = {worst:.3g}")
    nm.backward(loss)
    params = model.parameters()
    grads = [p.grad for p in params]
    if grad_clip > 0.0:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
        if norm > grad_clip:
            grads = [None if g is None else g * (grad_clip / norm) for g in grads]
    nm.adam_step(params, grads, state, lr)
    return value


# ---------------------------------------------------------------- evaluation glue


def predict(model: KeyNet, scenes: list[SceneSequence], batch_size: int = 64):
    """Raw logits and validity for every scene, without recording gradients."""
    logits, valid = [], []
    with nm.no_grad():
        for i in range(0, len(scenes), batch_size):
            out = model(make_batch(scenes[i : i + batch_size], model.cfg).tokens)
            logits.append(out.logits.data)
            valid.append(out.valid)
    return np.concatenate(logits), np.concatenate(valid)


def evaluate_top1(model: KeyNet, scenes: list[SceneSequence]) -> float:
    logits, _ = predict(model, scenes)
    return top1_accuracy(logits.argmax(axis=1), [s.label for s in scenes])


def actor_predictions(model: KeyNet, scenes: list[SceneSequence]) -> list[ActorPrediction]:
    logits, valid = predict(model, scenes)
    scores = 0.5 * (1.0 + np.tanh(0.5 * logits))
    preds = []
    for s, sc, ok in zip(scenes, scores, valid):
        for a in range(min(s.num_persons, sc.shape[0])):
            if ok[a] and s.actor_boxes is not None:
                preds.append(ActorPrediction(s.clip_id, tuple(s.actor_boxes[a]), sc[a]))
    return preds


def scene_ground_truth(scenes: list[SceneSequence]) -> list[GroundTruth]:
    """Keyframe actor boxes and labels carried by the scenes themselves."""
    gts = []
    for s in scenes:
        if s.actor_labels is None or s.actor_boxes is None:
            continue
        for box, hot in zip(s.actor_boxes, s.actor_labels):
            labels = frozenset(int(c) for c in np.flatnonzero(hot))
            if labels:
                gts.append(GroundTruth(s.clip_id, tuple(box), labels))
    return gts


def evaluate_frame_map(model: KeyNet, scenes: list[SceneSequence], ground_truth=None) -> tuple[float, dict[int, float]]:
    gts = scene_ground_truth(scenes) if ground_truth is None else ground_truth
    return frame_map(actor_predictions(model, scenes), gts, model.cfg.num_classes)


def evaluate(model: KeyNet, scenes: list[SceneSequence]) -> float:
    if model.cfg.head_mode == VIDEO:
        return evaluate_top1(model, scenes)
    return evaluate_frame_map(model, scenes)[0]


# ---------------------------------------------------------------- gradient check


def random_scenes(cfg: ModelConfig, count: int, rng: np.random.Generator) -> list[SceneSequence]:
    """Scenes with missing joints, an absent actor and absent objects mixed in."""
    sc = cfg.scene
    width, height = 8.0 * sc.grid_w, 8.0 * sc.grid_h
    out = []
    for i in range(count):
        n = max(1, sc.persons - (i % 2))
        m = sc.objects - (i % 2) if sc.objects else 0
        humans = rng.uniform(0, [width, height], (n, sc.frames, sc.joints, 2))
        valid = rng.random((n, sc.frames, sc.joints)) < 0.8
        valid[0, 0, 0] = True
        objects = rng.uniform(0, [width, height], (m, sc.object_points, 2))
        labels = np.zeros((n, cfg.num_classes))
        labels[np.arange(n), rng.integers(0, cfg.num_classes, n)] = 1.0
        boxes = np.tile([0.0, 0.0, width / 2, height / 2], (n, 1))
        out.append(
            SceneSequence(
                width,
                height,
                humans,
                valid,
                objects,
                np.ones((m, sc.object_points), bool),
                keyframe=(sc.frames + 1) // 2,
                label=int(rng.integers(0, cfg.num_classes)),
                actor_labels=labels,
                actor_boxes=boxes,
                clip_id=f"r{i}",
            )
        )
    return out


def check_gradients(model_cfg: ModelConfig, seed: int = 0, h: float = 1e-5, batch: int = 2) -> nm.GradCheckResult:
    """Analytic vs central-difference gradients of the training loss for every parameter.

    Dropout is off (no rng is passed), so the loss is a deterministic function."""
    model = KeyNet(model_cfg, seed=seed)
    data = make_batch(random_scenes(model_cfg, batch, np.random.default_rng(seed)), model_cfg)
    return nm.gradcheck(lambda: loss_fn(model, data), model.params, h)


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: KeyNet
    log: list[tuple[int, float, float, float | None]]
    checkpoints: list[Path]


def format_metrics(rows) -> str:
    lines = ["iter,lr,loss,metric"]
    for it, lr, loss, metric in rows:
        lines.append(f"{it},{lr:.9g},{loss:.9g}," + ("" if metric is None else f"{metric:.6f}"))
    return "\n".join(lines) + "\n"


def train_loop(
    scenes: list[SceneSequence],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    out_dir=None,
    eval_scenes: list[SceneSequence] | None = None,
    flip_perm=None,
) -> TrainResult:
    """Train from scratch. With ``out_dir`` set, writes ``model_000000.bin`` before the
    first step, periodic checkpoints, ``model.bin`` at the end and ``metrics.csv``."""
    if not scenes:
        raise ValueError("training set is empty")
    model = KeyNet(model_cfg, seed=cfg.seed)
    state = nm.AdamState.for_params(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 0])
    classes = np.array([scene_class(s) for s in scenes])
    policy = cfg.policy
    out = None if out_dir is None else Path(out_dir)
    written: list[Path] = []

    def checkpoint(name: str) -> None:
        if out is None:
            return
        path = out / name
        try:
            save_checkpoint(model, path)
        except OSError as exc:
            raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc
        written.append(path)

    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    checkpoint("model_000000.bin")

    rows = []
    for it in range(cfg.total_iters):
        if cfg.sampler == "balanced":
            idx = weighted_sample_indices(classes, cfg.batch_size, rng)
        else:
            idx = rng.integers(0, len(scenes), cfg.batch_size)
        picked = [augment(scenes[i], rng, policy, flip_perm) for i in idx]
        lr = lr_at(it + 1, cfg)
        step_rng = np.random.default_rng([cfg.seed, 1, it])
        loss = train_step(model, state, make_batch(picked, model_cfg), lr, step_rng, cfg.grad_clip)
        done = it + 1
        metric = None
        if eval_scenes and ((cfg.eval_every and done % cfg.eval_every == 0) or done == cfg.total_iters):
            metric = evaluate(model, eval_scenes)
            log.info("iter %d loss %.4f metric %.4f", done, loss, metric)
        rows.append((done, lr, loss, metric))
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done != cfg.total_iters:
            checkpoint(f"model_{done:06d}.bin")
    if cfg.total_iters:
        checkpoint("model.bin")
    if out is not None:
        (out / "metrics.csv").write_text(format_metrics(rows), encoding="utf-8")
    return TrainResult(model, rows, written)


__all__ = [
    "ACTOR",
    "VIDEO",
    "Batch",
    "TrainConfig",
    "TrainResult",
    "check_gradients",
    "evaluate",
    "evaluate_frame_map",
    "evaluate_top1",
    "load_config",
    "lr_at",
    "make_batch",
    "parse_config_text",
    "parse_grid",
    "read_key_values",
    "predict",
    "random_scenes",
    "scene_ground_truth",
    "train_loop",
    "train_step",
]

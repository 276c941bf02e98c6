"""``keynet`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print one
line ``keynet: error: <kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data, geometry, synth
from .evaluate import format_ap_report
from .model import ACTOR, VIDEO, ModelConfig, load_checkpoint
from .scene import SceneConfig, tokenize_scene
from .train import (
    check_gradients,
    evaluate_frame_map,
    evaluate_top1,
    load_config,
    parse_config_text,
    parse_grid,
    train_loop,
)
from .viz import tokens_svg

log = logging.getLogger("keynet")


class UsageError(Exception):
    pass


def _grid(raw: str) -> tuple[int, int]:
    try:
        return parse_grid(raw)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(raw: str) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {raw!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _count(raw: str) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {raw!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def _unit(raw: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {raw!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {value}")
    return value


def _positive_float(raw: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {raw!r}") from None
    if not value > 0.0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {value}")
    return value


def _load_dataset(path: Path, split: str):
    """``path`` is a ``.knd`` file or a directory holding ``<split>.knd``."""
    file = path / f"{split}.knd" if path.is_dir() else path
    if not file.exists():
        raise FileNotFoundError(f"no such dataset file: {file}")
    header, clips = data.load_clips(file)
    if header is None:
        raise data.KndError(f"{file}: empty dataset")
    return file, header, clips


# ---------------------------------------------------------------- subcommands


def cmd_contour(args) -> None:
    mask = geometry.read_pgm(args.mask)
    points = geometry.object_keypoints(mask, args.k)
    contour = geometry.trace_mask(mask)
    data.write_lines(
        args.out,
        [
            {
                "kind": "contour",
                "mask": Path(args.mask).name,
                "k": args.k,
                "contour_length": len(contour),
                "points": points.tolist(),
            }
        ],
    )


def cmd_track(args) -> None:
    header, clips = data.load_clips(args.input)
    if header is None:
        raise data.KndError(f"{args.input}: empty dataset")
    tracked = [data.track_clip(c, args.iou, args.n, args.fps, args.frames) for c in clips]
    data.save_clips(args.out, header, tracked)


def cmd_tokenize(args) -> None:
    header, clips = data.load_clips(args.input)
    if header is None:
        raise data.KndError(f"{args.input}: empty dataset")
    cfg = SceneConfig(args.grid[0], args.grid[1], args.frames, args.n, args.m, header.joints, header.object_points)
    base = Path(args.input).parent
    entries = []
    for clip in clips:
        scene = data.clip_to_scene(clip, header, cfg, base, iou_threshold=args.iou)
        entries.append((clip.id, tokenize_scene(scene, cfg)))
    data.save_tokens(args.out, cfg, entries)


def cmd_synth(args) -> None:
    if (args.spec is None) == (args.preset is None):
        raise UsageError("give exactly one of --spec or --preset")
    if args.spec is not None:
        lines = data.read_lines(args.spec)
        if len(lines) != 1:
            raise data.KndError(f"{args.spec}: expected exactly one synthspec line")
        lineno, obj = lines[0]
        spec = synth.SynthSpec.from_obj(obj, f"{args.spec}:{lineno}")
    else:
        spec = synth.recognition_spec() if args.preset == "recognition" else synth.localization_spec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    paths = synth.write_dataset(spec, out, with_masks=args.masks)
    data.write_lines(out / "spec.knd", [spec.to_obj()])
    for split, path in paths.items():
        log.info("%s: %s", split, path)


def _model_config(model_kw: dict, header: data.Header, args) -> ModelConfig:
    kw = dict(model_kw)
    kw["joints"] = header.joints
    kw["object_points"] = header.object_points
    kw["num_classes"] = len(header.classes)
    for flag, key in (("n", "persons"), ("m", "objects"), ("frames", "frames")):
        value = getattr(args, flag, None)
        if value is not None:
            kw[key] = value
    if getattr(args, "grid", None) is not None:
        kw["grid_w"], kw["grid_h"] = args.grid
    return ModelConfig(**kw)


def _check_labels(clips, header: data.Header, mode: str, where) -> None:
    if mode == VIDEO:
        missing = [c.id for c in clips if c.label is None]
        if missing:
            raise data.KndError(f"{where}: clip {missing[0]} has no video label but head_mode=video")
    elif not any(c.actors for c in clips):
        raise data.KndError(f"{where}: no actor annotations but head_mode=actor")


def cmd_train(args) -> None:
    train_cfg, model_kw, _ = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iters is not None:
        overrides["total_iters"] = args.iters
    if overrides:
        train_cfg = replace(train_cfg, **overrides)
    data_dir = Path(args.data)
    train_file, header, clips = _load_dataset(data_dir, "train")
    model_cfg = _model_config(model_kw, header, args)
    _check_labels(clips, header, model_cfg.head_mode, train_file)
    scenes = [data.clip_to_scene(c, header, model_cfg.scene, train_file.parent) for c in clips]
    eval_scenes = None
    test_file = data_dir / "test.knd" if data_dir.is_dir() else None
    if test_file is not None and test_file.exists():
        t_header, t_clips = data.load_clips(test_file)
        if t_header is not None and t_clips:
            eval_scenes = [data.clip_to_scene(c, t_header, model_cfg.scene, test_file.parent) for c in t_clips]
    result = train_loop(scenes, train_cfg, model_cfg, args.out, eval_scenes, header.flip)
    if result.log and result.log[-1][3] is not None:
        metric = "top1" if model_cfg.head_mode == VIDEO else "mAP"
        print(f"{metric},{result.log[-1][3]:.6f}")


def cmd_eval(args) -> None:
    model = load_checkpoint(args.ckpt)
    cfg = model.cfg
    file, header, clips = _load_dataset(Path(args.data), "test")
    if header.joints != cfg.joints:
        raise data.KndError(f"{file}: data has {header.joints} joints, checkpoint expects {cfg.joints}")
    if not clips:
        raise data.KndError(f"{file}: no clips to evaluate")
    scenes = [data.clip_to_scene(c, header, cfg.scene, file.parent) for c in clips]
    if args.metric == "top1":
        if cfg.head_mode != VIDEO:
            raise UsageError("top1 needs a video-mode checkpoint")
        _check_labels(clips, header, VIDEO, file)
        report = f"top1,{evaluate_top1(model, scenes):.6f}\n"
    else:
        if cfg.head_mode != ACTOR:
            raise UsageError("framemap needs an actor-mode checkpoint")
        _, aps = evaluate_frame_map(model, scenes, data.ground_truth(clips, header))
        report = format_ap_report(aps, header.classes)
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    sys.stdout.write(report)


GRADCHECK_KEYS = {"seed": "int", "batch": "int", "h": "float", "tolerance": "float"}


def cmd_gradcheck(args) -> None:
    text = Path(args.config).read_text(encoding="utf-8")
    train_cfg, model_kw, extra = parse_config_text(text, str(args.config), GRADCHECK_KEYS)
    model_cfg = ModelConfig(**model_kw)
    tol = args.tol if args.tol is not None else extra.get("tolerance", 1e-4)
    result = check_gradients(model_cfg, extra.get("seed", train_cfg.seed), extra.get("h", 1e-5), extra.get("batch", 2))
    for name, err in result.errors.items():
        print(f"{name},{err:.3e}")
    verdict = "pass" if result.passed(tol) else "fail"
    print(f"gradcheck,{verdict},worst={result.worst:.3e},tolerance={tol:.1e}")
    if verdict == "fail":
        raise RuntimeError(f"gradient check failed: worst relative error {result.worst:.3e} >= {tol:.1e}")


def cmd_viz_tokens(args) -> None:
    cfg, entries = data.load_tokens(args.input)
    if not entries:
        raise data.KndError(f"{args.input}: no token records")
    if args.clip is None:
        clip_id, tokens = entries[0]
    else:
        found = [e for e in entries if e[0] == args.clip]
        if not found:
            raise data.KndError(f"{args.input}: no clip {args.clip!r}")
        clip_id, tokens = found[0]
    Path(args.out).write_text(tokens_svg(tokens, cfg, f"clip {clip_id}"), encoding="utf-8")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="keynet", description="Keypoint-only action recognition pipeline.", allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False)
        sp.set_defaults(func=func)
        return sp

    sp = add("contour", cmd_contour, "trace a PGM mask and sample k equidistant contour keypoints")
    sp.add_argument("--mask", required=True)
    sp.add_argument("--k", type=_positive_int, default=8)
    sp.add_argument("--out", required=True)

    sp = add("track", cmd_track, "link per-frame detections into tracklets, keep the top n, reduce the frame rate")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--iou", type=_unit, default=0.5)
    sp.add_argument("--n", type=_positive_int, default=5)
    sp.add_argument("--fps", type=_positive_float, default=None)
    sp.add_argument("--frames", type=_positive_int, default=None, help="frames kept around the keyframe")
    sp.add_argument("--out", required=True)

    sp = add("tokenize", cmd_tokenize, "convert clips into the four token streams")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--grid", type=_grid, default=(32, 24))
    sp.add_argument("--n", type=_positive_int, default=5)
    sp.add_argument("--m", type=_count, default=3)
    sp.add_argument("--frames", type=_positive_int, default=10)
    sp.add_argument("--iou", type=_unit, default=0.5)
    sp.add_argument("--out", required=True)

    sp = add("synth", cmd_synth, "generate a synthetic skeleton-action dataset (train.knd, test.knd)")
    sp.add_argument("--spec", default=None)
    sp.add_argument("--preset", choices=("recognition", "localization"), default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--masks", action="store_true", help="store objects as PGM masks instead of points")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train from scratch; writes checkpoints and metrics.csv")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--iters", type=_count, default=None)
    sp.add_argument("--n", type=_positive_int, default=None)
    sp.add_argument("--m", type=_count, default=None)
    sp.add_argument("--frames", type=_positive_int, default=None)
    sp.add_argument("--grid", type=_grid, default=None)

    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--metric", choices=("top1", "framemap"), required=True)
    sp.add_argument("--out", default=None)

    sp = add("gradcheck", cmd_gradcheck, "compare analytic gradients with central differences")
    sp.add_argument("--config", required=True)
    sp.add_argument("--tol", type=_positive_float, default=None)

    sp = add("viz-tokens", cmd_viz_tokens, "render one scene's token streams as SVG")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--clip", default=None)
    sp.add_argument("--out", required=True)
    return p


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"keynet: error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        name = exc.filename if exc.filename else _one_line(exc)
        print(f"keynet: error: not-found: {name}", file=sys.stderr)
        return 1
    except data.KndError as exc:
        print(f"keynet: error: format: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"keynet: error: io: {_one_line(exc)}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FloatingPointError, RuntimeError) as exc:
        print(f"keynet: error: {type(exc).__name__.lower()}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

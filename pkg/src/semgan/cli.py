"""Command-line interface: dataset generation, training, inference,
evaluation, and gradient self-verification.

Exit codes: 0 success, 1 validation error (bad flags, config constraint
violations, shape preconditions), 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import (
    CorpusError,
    default_domain_spec,
    domain_stats,
    load_image,
    load_labels,
    save_image,
    write_corpus,
)
from .engine import ShapeError, Tensor
from .gradfilters import boundary_mask, gradient_magnitude, label_grad_pair, sobel_pair
from .losses import SoftnessParams, soft_grad_loss
from .networks import CheckpointError
from .trainer import (
    TrainConfig,
    TrainingDivergedError,
    ValidationError,
    checkpoint_load,
    run_training,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _parse_size(text: str):
    try:
        h_text, w_text = text.lower().split("x")
        h, w = int(h_text), int(w_text)
    except ValueError:
        raise ValidationError([f"--size must be HxW (e.g. 64x128), got {text!r}"])
    return h, w


# ---------------------------------------------------------------------------
# config file + flag overrides


def _config_fields():
    return {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name: str, text: str):
    kind = _config_fields()[name]
    raw = text.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValidationError([f"{name}: expected true/false, got {raw!r}"])
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ValidationError([f"{name}: expected an integer, got {raw!r}"])
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ValidationError([f"{name}: expected a number, got {raw!r}"])
    return raw


def read_config_file(path) -> dict:
    """Flat `key = value` lines; '#' comments; unknown keys rejected."""
    known = _config_fields()
    values = {}
    problems = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            problems.append(f"{path}:{line_no}: expected 'key = value', got {stripped!r}")
            continue
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in known:
            problems.append(f"{path}:{line_no}: unknown config key {key!r}")
            continue
        try:
            values[key] = _coerce(key, value)
        except ValidationError as exc:
            problems.extend(f"{path}:{line_no}: {p}" for p in exc.problems)
    if problems:
        raise ValidationError(problems)
    return values


def build_train_config(config_path, overrides: dict, out_dir) -> TrainConfig:
    values = read_config_file(config_path) if config_path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = TrainConfig(**values)
    out = Path(out_dir)
    if not Path(cfg.metrics_path).is_absolute():
        cfg.metrics_path = str(out / cfg.metrics_path)
    if not Path(cfg.checkpoint_dir).is_absolute():
        cfg.checkpoint_dir = str(out / cfg.checkpoint_dir)
    problems = cfg.validate()
    if problems:
        raise ValidationError(problems)
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    h, w = _parse_size(args.size)
    spec = default_domain_spec(args.domain, args.classes)
    out_dir = Path(args.out) / args.domain
    write_corpus(out_dir, spec, args.count, h, w, args.seed)
    print(f"wrote {args.count} scenes to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {name: getattr(args, f"opt_{name}") for name in _config_fields()}
    cfg = build_train_config(args.config, overrides, args.out)
    state = run_training(cfg, args.virtual_dir, args.real_dir,
                         resume_from=args.resume,
                         log=print if args.verbose else None)
    print(f"trained {state.step} steps; metrics at {cfg.metrics_path}; "
          f"checkpoints in {cfg.checkpoint_dir}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    state = checkpoint_load(args.checkpoint)
    generator = state.g_v2r if args.direction == "v2r" else state.g_r2v
    in_dir = Path(args.input_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_paths = sorted(in_dir.glob("*.png"))
    if not image_paths:
        raise ValidationError([f"{in_dir}: no .png images found"])
    for path in image_paths:
        image = load_image(path)
        adapted = generator.forward(image)
        save_image(out_dir / path.name, adapted)
    print(f"adapted {len(image_paths)} images -> {out_dir}")
    return EXIT_OK


def _paired_pngs(dir_a, dir_b) -> list:
    names_a = {p.name for p in Path(dir_a).glob("*.png")}
    names_b = {p.name for p in Path(dir_b).glob("*.png")}
    if not names_a:
        raise ValidationError([f"{dir_a}: no .png images found"])
    if names_a != names_b:
        missing = sorted(names_a ^ names_b)[:5]
        raise ValidationError(
            [f"corpora are misaligned; unmatched files include {missing}"])
    return sorted(names_a)


def evaluate_corpora(dir_a, dir_b, labels_dir, num_classes: int,
                     alpha: float, beta: float) -> dict:
    """Per-class color-stat distance, boundary-preservation score, and the
    mean gradient-sensitive loss between paired, label-aligned corpora."""
    names = _paired_pngs(dir_a, dir_b)
    label_names = {p.name for p in Path(labels_dir).glob("*.png")}
    if not set(names) <= label_names:
        raise ValidationError(
            [f"{labels_dir}: missing label files for {sorted(set(names) - label_names)[:5]}"])

    softness = SoftnessParams(alpha, beta)
    image_filters = sobel_pair()
    label_filters = label_grad_pair()
    sums = np.zeros((2, num_classes, 3))
    counts = np.zeros((2, num_classes), dtype=np.int64)
    agree_num = 0.0
    agree_den = 0.0
    grad_loss_total = 0.0
    for name in names:
        img_a = load_image(Path(dir_a) / name)
        img_b = load_image(Path(dir_b) / name)
        labels = load_labels(Path(labels_dir) / name, num_classes)
        if img_a.shape != img_b.shape or labels.shape[1:] != img_a.shape[2:]:
            raise ValidationError([f"{name}: image/label dims are misaligned"])
        lab = labels.data[0]
        for side, img in ((0, img_a), (1, img_b)):
            for c in range(num_classes):
                region = lab == c
                n = int(region.sum())
                if n:
                    counts[side, c] += n
                    sums[side, c] += img.data[0][:, region].sum(axis=1)
        gm_a = gradient_magnitude(img_a, image_filters).data[0, 0].astype(np.float64)
        gm_b = gradient_magnitude(img_b, image_filters).data[0, 0].astype(np.float64)
        mask = boundary_mask(labels, label_filters).data[0, 0].astype(np.float64)
        agree_num += float((mask * np.abs(gm_a - gm_b)).sum())
        agree_den += float((mask * (gm_a + gm_b)).sum())
        grad_loss_total += soft_grad_loss(img_a, img_b, labels, softness).item()

    per_class = {}
    distances = []
    for c in range(num_classes):
        present = bool(counts[0, c] and counts[1, c])
        if present:
            mean_a = sums[0, c] / counts[0, c]
            mean_b = sums[1, c] / counts[1, c]
            distance = float(np.linalg.norm(mean_a - mean_b))
            distances.append(distance)
            per_class[str(c)] = {
                "present": True,
                "mean_a": [float(x) for x in mean_a],
                "mean_b": [float(x) for x in mean_b],
                "color_distance": distance,
            }
        else:
            per_class[str(c)] = {"present": False}
    boundary_score = 1.0 - (agree_num / agree_den if agree_den else 0.0)
    return {
        "pairs": len(names),
        "num_classes": num_classes,
        "alpha": alpha,
        "beta": beta,
        "per_class": per_class,
        "mean_color_distance": float(np.mean(distances)) if distances else 0.0,
        "boundary_preservation": boundary_score,
        "soft_grad_loss": grad_loss_total / len(names),
    }


def cmd_eval(args) -> int:
    report = evaluate_corpora(args.corpus_a, args.corpus_b, args.labels,
                              args.classes, args.alpha, args.beta)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"report -> {args.report}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed)
    width = max(len(name) for name in results)
    for name, err in results.items():
        status = "pass" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{name:<{width}}  max-rel-err {err:.3e}  {status}")
    if not gradcheck.suite_passes(results):
        print(f"gradient check FAILED (tolerance {gradcheck.TOLERANCE})",
              file=sys.stderr)
        return EXIT_RUNTIME
    print(f"all operations within tolerance {gradcheck.TOLERANCE}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="semgan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic corpus")
    gen.add_argument("--out", required=True)
    gen.add_argument("--domain", required=True, choices=("virtual", "real"))
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--size", default="64x128", help="HxW")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--classes", type=int, default=4, choices=(4, 8))
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train on two corpora")
    train.add_argument("--config", default=None, help="key = value file")
    train.add_argument("--virtual-dir", required=True)
    train.add_argument("--real-dir", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--resume", default=None, help="checkpoint to resume from")
    train.add_argument("--verbose", action="store_true")
    for name, kind in _config_fields().items():
        flag = "--" + name.replace("_", "-")
        if kind == "bool":
            train.add_argument(flag, dest=f"opt_{name}", default=None,
                               type=lambda v, n=name: _coerce(n, v))
        elif kind == "int":
            train.add_argument(flag, dest=f"opt_{name}", default=None, type=int)
        elif kind == "float":
            train.add_argument(flag, dest=f"opt_{name}", default=None, type=float)
        else:
            train.add_argument(flag, dest=f"opt_{name}", default=None)
    train.set_defaults(func=cmd_train)

    adapt = sub.add_parser("adapt", help="translate images with a checkpoint")
    adapt.add_argument("--checkpoint", required=True)
    adapt.add_argument("--in", dest="input_dir", required=True)
    adapt.add_argument("--out", required=True)
    adapt.add_argument("--direction", required=True, choices=("v2r", "r2v"))
    adapt.set_defaults(func=cmd_adapt)

    ev = sub.add_parser("eval", help="compare two aligned corpora")
    ev.add_argument("--corpus-a", required=True)
    ev.add_argument("--corpus-b", required=True)
    ev.add_argument("--labels", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--classes", type=int, default=4)
    ev.add_argument("--alpha", type=float, default=1.0)
    ev.add_argument("--beta", type=float, default=0.0)
    ev.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference self check")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_VALIDATION
    except ValidationError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ShapeError, CorpusError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDivergedError, CheckpointError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Subcommands: ``synth-data`` (generate a dataset), ``train``, ``eval``,
``ablate``, ``hallucinate`` (single image LR -> SR), ``verify`` (two-image
same/different decision). Exit codes: 0 success, 1 validation error
(bad arguments, files, or config), 2 runtime error (training divergence,
corrupt checkpoints, unexpected failures).

Every subcommand writes a config snapshot next to its outputs; the only
timestamped artifact is run_meta.json, so everything else is byte-stable
across identical runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    save_config,
)
from .data import (
    ManifestError,
    load_image,
    load_manifest,
    save_image,
    split_manifest,
    synth_dataset,
)
from .training import TrainingDivergedError, fit, load_trainer

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; this CLI reserves 2 for
    # runtime failures, so route usage problems through exit code 1.
    def error(self, message):
        raise _UsageError(message)


def _say(msg: str) -> None:
    print(msg, flush=True)


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    if getattr(args, "domain_source", None) is not None:
        cfg.fhn.domain_source = args.domain_source
    if getattr(args, "e2e_coupling", None) is not None:
        cfg.train.e2e_coupling = args.e2e_coupling == "on"
    return cfg.validate()


def _write_meta(out: Path, argv: list[str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    meta = {"argv": argv, "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    (out / "run_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def _snapshot(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")


# ---------------------------------------------------------------------------
# subcommands

def _cmd_synth_data(args, argv) -> int:
    cfg = _load_experiment(args)
    out = Path(args.out)
    dc = cfg.data
    manifest = synth_dataset(
        out,
        n_identities=dc.n_identities,
        per_identity=dc.per_identity,
        size=dc.image_size,
        seed=dc.seed if args.seed is None else args.seed,
        n_landmarks=dc.n_landmarks,
        n_classes=dc.n_classes,
    )
    train_m, test_m = split_manifest(manifest, dc.holdout_per_identity)
    from .data import save_manifest

    save_manifest(train_m.records, out / "train.jsonl")
    save_manifest(test_m.records, out / "test.jsonl")
    _snapshot(cfg, out)
    _write_meta(out, argv)
    _say(
        f"wrote {len(manifest)} records ({len(train_m)} train / {len(test_m)} test) to {out}"
    )
    return EXIT_OK


def _cmd_train(args, argv) -> int:
    cfg = _load_experiment(args)
    manifest = load_manifest(args.data)
    out = Path(args.out)
    _snapshot(cfg, out)
    trainer, reports = fit(manifest, cfg, out_dir=out, log=_say)
    from .metrics import plot_loss_curves

    rows = [{"step": r.step, **r.losses()} for r in reports]
    plot_loss_curves(rows, out / "losses.png")
    _write_meta(out, argv)
    _say(f"trained {cfg.train.steps} steps; checkpoint at {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def _cmd_eval(args, argv) -> int:
    manifest = load_manifest(args.data)
    train_manifest = load_manifest(args.train_data) if args.train_data else None
    out = Path(args.out)
    from .metrics import evaluate_checkpoint
    from .training import load_trainer as _load

    trainer = _load(args.ckpt)
    _snapshot(trainer.cfg, out)
    report = evaluate_checkpoint(
        trainer, manifest, args.protocol, train_manifest=train_manifest,
        out_dir=out, log=_say,
    )
    _write_meta(out, argv)
    summary = {
        k: v
        for k, v in report.to_dict().items()
        if isinstance(v, (int, float, str))
    }
    _say(f"{args.protocol}: " + json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _cmd_ablate(args, argv) -> int:
    args.protocol = "ablate"
    return _cmd_eval(args, argv)


def _cmd_hallucinate(args, argv) -> int:
    trainer = load_trainer(args.ckpt)
    import torch

    lr_img = load_image(args.image)
    expected = trainer.cfg.fhn.lr_size
    if lr_img.shape[1] != expected or lr_img.shape[2] != expected:
        raise ConfigError(
            f"input image is {lr_img.shape[1]}x{lr_img.shape[2]}, checkpoint expects "
            f"{expected}x{expected} low-res input"
        )
    with torch.no_grad():
        out = trainer.fhn.hallucinate(torch.from_numpy(lr_img).float())
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(out.sr.numpy(), out_path)
    _snapshot(trainer.cfg, out_path.parent)
    _write_meta(out_path.parent, argv)
    _say(f"hallucinated {args.image} -> {out_path}")
    return EXIT_OK


def _cmd_verify(args, argv) -> int:
    trainer = load_trainer(args.ckpt)
    import torch

    from .recognizer import cosine_verify, embed, residual_compose

    def embed_one(path: str):
        img = load_image(path)
        size = trainer.cfg.fhn.image_size
        if img.shape[1] != size or img.shape[2] != size:
            raise ConfigError(
                f"{path} is {img.shape[1]}x{img.shape[2]}, checkpoint expects {size}x{size}"
            )
        x = torch.from_numpy(img).float().unsqueeze(0)
        with torch.no_grad():
            s = trainer.hrn.student_taps(x)
            a = trainer.hrn.assistant_taps(x)
            tap = residual_compose(s[-1], a[-1])
            return embed(tap).squeeze(0)

    with_embeddings = (embed_one(args.image_a), embed_one(args.image_b))
    result = cosine_verify(*with_embeddings, threshold=args.threshold)
    _say(
        f"distance {result.distance:.4f} threshold {args.threshold:.4f} -> "
        f"{'same' if result.same else 'different'}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="crossres", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p, seed=True, steps=False):
        p.add_argument("--config", metavar="PATH", help="YAML experiment config")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed")
        if steps:
            p.add_argument("--steps", type=int, help="override training step count")

    p = sub.add_parser("synth-data", help="generate a synthetic face dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="train hallucinator and recognizers")
    common(p, steps=True)
    p.add_argument("--data", required=True, help="training manifest (JSONL)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--domain-source", choices=("sr", "coarse"),
                   help="image compared against real high-res by the domain adversary")
    p.add_argument("--e2e-coupling", choices=("on", "off"),
                   help="let the distillation loss also update the hallucinator")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out data")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="held-out manifest (JSONL)")
    p.add_argument("--protocol", required=True,
                   choices=("sr-quality", "verify", "identify", "ablate"))
    p.add_argument("--train-data", help="training manifest (required by ablate)")
    p.add_argument("--out", required=True, help="evaluation output directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the component ablation grid")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="held-out manifest (JSONL)")
    p.add_argument("--train-data", required=True, help="training manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("hallucinate", help="super-resolve one low-res image")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="low-res input PNG")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=_cmd_hallucinate)

    p = sub.add_parser("verify", help="same/different decision for two images")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    if getattr(args, "command", None) is None:
        parser.print_help()
        return EXIT_VALIDATION
    try:
        return args.func(args, ["crossres"] + argv)
    except (ConfigError, ManifestError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDivergedError, CheckpointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

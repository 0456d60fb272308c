"""Command-line entry point: ``bvit {synth,train,eval,diagnose,sweep}``.

Exit codes: 0 success, 2 configuration or checkpoint error, 3 data error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import diagnostics as D
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_override, resolve_config, write_resolved
from .data import Dataset, load_dataset, normalize, save_dataset, synth_dataset
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .model import BViT
from .tensor import no_grad
from .train import evaluate, train

log = logging.getLogger("bvit")

CHECKPOINT_NAME = "checkpoint.bvit"
SWEEP_KEYS = ("model.gamma", "model.variant")
DIAGNOSTICS = ("cka", "distance", "rollout", "profile")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def threads_from_env() -> int:
    """``BVIT_THREADS`` caps data-assembly workers; batches are assembled sequentially, so 1 suffices."""
    raw = os.environ.get("BVIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"BVIT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"BVIT_THREADS must be a positive integer, got {raw!r}")
    return n


def _resolve(args) -> RunConfig:
    return resolve_config(args.config, args.set or (), seed=args.seed, out=args.out)


def _require(path: Optional[str], what: str) -> Dataset:
    if not path:
        raise DataError(f"no {what} dataset path configured")
    return load_dataset(path)


def _run_training(cfg: RunConfig, out_dir: str) -> tuple[BViT, list[dict]]:
    os.makedirs(out_dir, exist_ok=True)
    train_ds = _require(cfg.data.train_path, "training")
    eval_ds = load_dataset(cfg.data.eval_path) if cfg.data.eval_path else None
    write_resolved(cfg, os.path.join(out_dir, "resolved_config.json"))
    model = BViT(cfg.model, seed=cfg.train.seed)
    model, rows = train(model, train_ds, cfg.train, eval_dataset=eval_ds,
                        log_path=os.path.join(out_dir, "metrics.csv"))
    save_checkpoint(os.path.join(out_dir, CHECKPOINT_NAME), model, step=cfg.train.steps)
    return model, rows


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    os.makedirs(cfg.out, exist_ok=True)
    m, d = cfg.model, cfg.data
    paths = (d.train_path or os.path.join(cfg.out, "train.bvds"), d.eval_path or os.path.join(cfg.out, "eval.bvds"))
    for stream, (path, count) in enumerate(zip(paths, (d.synth_train_count, d.synth_eval_count))):
        ds = synth_dataset(d.synth_seed, count, m.image_hw, m.channels, m.num_classes, d.synth_noise, stream=stream)
        save_dataset(ds, path)
        print(f"wrote {path} ({count} images)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    _, rows = _run_training(cfg, cfg.out)
    final = rows[-1]
    print(f"step {final['step']} loss {final['loss']:.6f} eval_acc {final['eval_acc']:.6f}")
    return EXIT_OK


def _load_model(args, cfg: RunConfig) -> BViT:
    path = args.checkpoint
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path, config=cfg.model if args.config or args.set else None)
    return ckpt.to_model()


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    model = _load_model(args, cfg)
    ds = _require(args.dataset or cfg.data.eval_path or cfg.data.train_path, "evaluation")
    top1, loss = evaluate(model, ds, cfg.train)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "eval.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["top1", "loss"])
        w.writerow([repr(top1), repr(loss)])
    print(f"top1 {top1!r} loss {loss!r}")
    return EXIT_OK


def _which(args) -> list[str]:
    items = []
    for w in args.which or [",".join(DIAGNOSTICS)]:
        items.extend(s.strip() for s in w.split(",") if s.strip())
    bad = sorted(set(items) - set(DIAGNOSTICS))
    if bad:
        raise ConfigError(f"unknown diagnostics {bad}; choose from {DIAGNOSTICS}")
    return [d for d in DIAGNOSTICS if d in items]


def cmd_diagnose(args) -> int:
    cfg = _resolve(args)
    which = _which(args)
    os.makedirs(cfg.out, exist_ok=True)
    model_cfg = cfg.model
    model = None
    if args.checkpoint:
        model = _load_model(args, cfg)
        model_cfg = model.config

    if "profile" in which:
        text = D.profile_text(model_cfg, name=cfg.preset or "custom")
        with open(os.path.join(cfg.out, "profile.txt"), "w") as fh:
            fh.write(text)
        print(text, end="")

    needs_data = [w for w in which if w != "profile"]
    if not needs_data:
        return EXIT_OK
    if model is None:
        model = BViT(model_cfg, seed=cfg.train.seed)
    ds = _require(args.dataset or cfg.data.eval_path or cfg.data.train_path, "diagnostics")
    if len(ds) < cfg.diag.samples:
        raise DataError(f"diagnostics need {cfg.diag.samples} images, dataset has {len(ds)}")
    idx = np.sort(np.random.default_rng(cfg.train.seed).permutation(len(ds))[:cfg.diag.samples])
    images = normalize(ds.images[idx], cfg.train.mean, cfg.train.std)

    with no_grad():
        trace = model.forward(images).trace
    if "cka" in which:
        D.write_cka_csv(os.path.join(cfg.out, "cka.csv"), D.cka_layer_matrix(model, images))
    if "distance" in which:
        D.write_distance_csv(os.path.join(cfg.out, "attn_distance.csv"),
                             D.mean_attention_distance(trace, model_cfg))
    if "rollout" in which:
        rollouts = D.attention_rollout(trace)
        for i, r in zip(idx, rollouts):
            D.write_pgm(os.path.join(cfg.out, f"rollout_{int(i)}.pgm"), D.rollout_map(r, model_cfg))
    print(f"wrote {', '.join(needs_data)} diagnostics to {cfg.out}")
    return EXIT_OK


def _format_value(v) -> str:
    return v if isinstance(v, str) else repr(v)


def cmd_sweep(args) -> int:
    if args.key not in SWEEP_KEYS:
        raise ConfigError(f"sweep key must be one of {SWEEP_KEYS}, got {args.key!r}")
    base = _resolve(args)
    values = [parse_override(f"{args.key}={v.strip()}")[1] for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    # validate every point before any compute
    points = [resolve_config(args.config, list(args.set or ()) + [f"{args.key}={_format_value(v)}"],
                             seed=args.seed, out=os.path.join(base.out, f"{args.key}={_format_value(v)}"))
              for v in values]
    os.makedirs(base.out, exist_ok=True)
    rows = []
    for value, cfg in zip(values, points):
        _, metrics = _run_training(cfg, cfg.out)
        rows.append((_format_value(value), metrics[-1]["eval_acc"], D.count_params(cfg.model)))
        log.info("sweep %s=%s eval_acc %.4f", args.key, value, metrics[-1]["eval_acc"])
    with open(os.path.join(base.out, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "eval_acc", "params"])
        for value, acc, params in rows:
            w.writerow([value, repr(acc), params])
    for value, acc, params in rows:
        print(f"{args.key}={value} eval_acc {acc:.6f} params {params}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bvit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="overrides train.seed")
        return p

    common(sub.add_parser("synth", help="write the seeded synthetic train/eval datasets")).set_defaults(fn=cmd_synth)
    common(sub.add_parser("train", help="train and write checkpoint + metrics")).set_defaults(fn=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.set_defaults(fn=cmd_eval)

    p = common(sub.add_parser("diagnose", help="CKA / attention distance / rollout / profile"))
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--which", action="append", help=f"comma list from {','.join(DIAGNOSTICS)}")
    p.set_defaults(fn=cmd_diagnose)

    p = common(sub.add_parser("sweep", help="train once per value of model.gamma or model.variant"))
    p.add_argument("--key", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        threads_from_env()
        return args.fn(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

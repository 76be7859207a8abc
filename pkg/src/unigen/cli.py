"""Command-line entry point: ``unigen <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .datagen import CONDITION_TYPES, build_corpus, generate_corpus, make_sample, read_corpus, resolve_type
from .evaluation import ablate, complexity, evaluate, write_ablation
from .training import sample_image, train
from .weavenet import build_model

log = logging.getLogger("unigen")


def parse_ids(text: str) -> list:
    """``"1 4 12"`` or ``"1,4,12"`` -> ``[1, 4, 12]``."""
    parts = text.replace(",", " ").split()
    if not parts:
        raise ValueError("empty prompt")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise ValueError(f"prompt must be integer token ids, got {text!r}") from None


def read_png(path, size: int) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if img.size != (size, size):
        raise ValueError(f"{path}: condition is {img.size[0]}x{img.size[1]}, model expects {size}x{size}")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_png(img: np.ndarray, path) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def default_log_path(ckpt) -> Path:
    return Path(str(ckpt) + ".loss.csv")


# ---------------------------------------------------------------------------
# subcommands


def cmd_datagen(a) -> int:
    corpus = build_corpus(a.out, a.per_type, a.seed, a.types, a.size)
    print(f"wrote {len(corpus)} samples ({a.types} types x {a.per_type}) to {a.out}")
    return 0


def cmd_train(a) -> int:
    cfg = load_config(a.config) if a.config else RunConfig()
    if a.steps is not None:
        cfg = cfg.replace(steps=a.steps, warmup=min(cfg.warmup, a.steps))
    data = read_corpus(a.data)
    if data.n_types > cfg.n_types:
        raise ConfigError(f"dataset has {data.n_types} condition types, config allows {cfg.n_types}")
    if data.targets.shape[1] != cfg.image_size:
        raise ConfigError(f"dataset images are {data.targets.shape[1]}px, config expects {cfg.image_size}px")
    model = build_model(cfg)
    log_path = a.log or default_log_path(a.out)
    every = max(1, cfg.steps // 20)

    def progress(step, loss, lr):
        if step % every == 0 or step == cfg.steps:
            log.info("step %d loss %.6f lr %.3g", step, loss, lr)

    result = train(model, data, cfg, log_path=log_path, callback=progress)
    save_checkpoint(model, a.out)
    print(f"final loss {result.history[-1][1]:.6f}; checkpoint {a.out}; loss log {log_path}")
    return 0


def cmd_generate(a) -> int:
    model = load_checkpoint(a.ckpt)
    cfg = model.cfg
    tid = resolve_type(a.type)
    if tid >= cfg.n_types:
        raise ValueError(f"type {CONDITION_TYPES[tid]} (id {tid}) outside the checkpoint's {cfg.n_types} types")
    if a.cond:
        cond = read_png(a.cond, cfg.image_size)
    else:
        _, cond, _ = make_sample(a.seed, 0, tid, cfg.image_size)
    prompt = parse_ids(a.prompt)
    if max(prompt) >= cfg.vocab or min(prompt) < 0:
        raise ValueError(f"prompt ids must lie in [0, {cfg.vocab})")
    img = sample_image(model, cond, tid, prompt, a.steps, a.guidance, a.seed)
    write_png(img, a.out)
    print(f"wrote {a.out}")
    return 0


def cmd_eval(a) -> int:
    expect = load_config(a.config) if a.config else None
    model = load_checkpoint(a.ckpt, expect)
    data = read_corpus(a.data)
    if data.n_types > model.cfg.n_types:
        raise CheckpointError(f"dataset has {data.n_types} condition types, checkpoint "
                              f"{model.cfg.arch_hash()} supports {model.cfg.n_types}")
    report = evaluate(model, data, a.n, a.seed, a.steps, a.guidance)
    report.write(a.out)
    if a.summary:
        report.write_summary(a.summary)
    for t, (cnt, s, p, m) in report.per_type().items():
        print(f"{CONDITION_TYPES[t]:12s} n={cnt:3d} ssim={s:.4f} psnr={p:.2f} mse={m:.5f}")
    print(f"{report.n} rows to {a.out}; config {report.config_hash}; "
          f"{report.seconds_per_image:.3f} s/image")
    return 0


def cmd_bench(a) -> int:
    base = load_config(a.config) if a.config else RunConfig()
    report = complexity(base, runs=a.runs, warmup=a.warmup, steps=a.steps)
    report.write(a.out)
    for r in report.rows:
        print(f"{r[0]:10s} types={r[1]:2d} params={r[2]:9d} ratio={r[4]:.3f} "
              f"paper={r[5]}B time={r[6]:.4f}s")
    print(f"kernel backend: {kernels.BACKEND}")
    problems = report.check()
    for p in problems:
        print(f"FAIL {p}", file=sys.stderr)
    return 1 if problems else 0


def cmd_ablate(a) -> int:
    base = load_config(a.config) if a.config else RunConfig()
    if a.steps is not None:
        base = base.replace(steps=a.steps, warmup=min(base.warmup, a.steps))
    values = [int(v) for v in a.values.replace(",", " ").split()]
    if a.data:
        data = read_corpus(a.data)
    else:
        data = generate_corpus(a.per_type, base.seed, base.n_types, base.image_size)
    eval_data = generate_corpus(max(a.eval_n, 1), base.seed + 1, base.n_types, base.image_size)

    def show(row):
        print(",".join(str(v) for v in row), flush=True)

    rows = ablate(a.kind, values, base, data, eval_data, a.eval_n, on_row=show)
    write_ablation(rows, a.out)
    failed = [r for r in rows if r[2] != "ok"]
    print(f"{len(rows) - len(failed)}/{len(rows)} variants ok; wrote {a.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unigen", description="Condition-modulated diffusion transformer at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("datagen", help="write a synthetic multi-condition dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-type", type=int, required=True)
    p.add_argument("--seed", type=int, default=1872)
    p.add_argument("--types", type=int, default=8)
    p.add_argument("--size", type=int, default=16)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="loss CSV (default: <out>.loss.csv)")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample one image to PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--type", required=True, help="condition type name or id")
    p.add_argument("--prompt", required=True, help='token ids, e.g. "1 4 12 15 16"')
    p.add_argument("--cond", help="condition PNG (default: derived from a scene drawn with --seed)")
    p.add_argument("--steps", type=int, default=28)
    p.add_argument("--guidance", type=float, default=3.5)
    p.add_argument("--seed", type=int, default=1872)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score generations against dataset targets")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, required=True, help="images per condition type")
    p.add_argument("--out", required=True)
    p.add_argument("--summary", help="per-type means CSV")
    p.add_argument("--config", help="reject checkpoints whose architecture differs from this config")
    p.add_argument("--seed", type=int, default=1872)
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="parameter count and latency report")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--steps", type=int, help="sampling steps per image (default: config)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="expert-count or control-depth sweep")
    p.add_argument("--kind", required=True, choices=["experts", "layers"])
    p.add_argument("--values", required=True, help='e.g. "2,3,4,6"')
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--data", help="training dataset (default: generated in memory)")
    p.add_argument("--per-type", type=int, default=64)
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-n", type=int, default=2)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"unigen {args.cmd}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

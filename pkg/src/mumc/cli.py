"""Command-line surface: synth / pretrain / finetune / eval / gradcam / ablate."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import corpus, evalviz, trainer
from .config import (
    RunConfig,
    apply_overrides,
    clone,
    default_config,
    config_from_dict,
    load_config,
    write_resolved,
)
from .model import MumcModel
from .tokenizer import Vocab, build_vocab

# Ablation grids: the four objective subsets and the image-mask probability sweep.
OBJECTIVE_GRID = (
    ("itm+mlm", (0.0, 0.0, 1.0, 1.0)),
    ("itm+mlm+ucl", (1.0, 0.0, 1.0, 1.0)),
    ("itm+mlm+mcl", (0.0, 1.0, 1.0, 1.0)),
    ("mumc", (1.0, 1.0, 1.0, 1.0)),
)
MASK_GRID = (
    ("mask0", 0.0),
    ("mask25", 0.25),
    ("mask50", 0.50),
    ("mask75", 0.75),
)


def _build_config(args, phase: str) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = default_config(getattr(args, "profile", "desk"), phase)
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    return cfg


def _load_for_eval(checkpoint_path: str):
    ckpt = trainer.load_checkpoint(checkpoint_path)
    cfg = config_from_dict(ckpt.meta["config"])
    vocab = Vocab(ckpt.meta["vocab"])
    cfg.model.vocab_size = len(vocab)
    resolution = (
        cfg.model.finetune_resolution
        if ckpt.meta.get("phase") == "finetune"
        else cfg.model.train_resolution
    )
    model = MumcModel(cfg.model, resolution=resolution, seed=0)
    trainer.load_model_weights(model, ckpt)
    model.eval()
    return model, vocab, cfg


def cmd_synth(args) -> int:
    cap_path, vqa_path = corpus.synthesize_corpus(
        args.seed, args.n_pairs, args.image_size, args.out
    )
    caps = corpus.load_manifest(cap_path, "caption")
    vqa = corpus.load_manifest(vqa_path, "vqa")
    texts = [ex.caption for ex in caps] + [
        f"{ex.question} {ex.answer}" for ex in vqa
    ]
    if texts:
        vocab = build_vocab(texts, args.vocab_size)
        vocab.save(Path(args.out) / "vocab.txt")
    print(f"wrote {cap_path} ({len(caps)} captions)")
    print(f"wrote {vqa_path} ({len(vqa)} qa pairs)")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _build_config(args, "pretrain")
    vocab = Vocab.load(args.vocab) if args.vocab else None
    extra = []
    if args.vocab_extra:
        for ex in corpus.load_manifest(args.vocab_extra, "vqa"):
            extra.append(f"{ex.question} {ex.answer}")
    result = trainer.pretrain(
        cfg, args.manifest, args.out, vocab=vocab, extra_text=extra
    )
    print(f"pretrained {result.steps} steps -> {result.checkpoint_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _build_config(args, "finetune")
    result = trainer.finetune(cfg, args.checkpoint, args.manifest, args.out)
    print(f"finetuned {result.steps} steps -> {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    model, vocab, cfg = _load_for_eval(args.checkpoint)
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    examples = corpus.load_manifest(args.manifest, "vqa")
    candidates = None
    if args.candidates:
        with open(args.candidates, encoding="utf-8") as f:
            candidates = [line.strip() for line in f if line.strip()]
    report = evalviz.evaluate(model, vocab, examples, candidates, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    report.write(out)
    print(report.text_table())
    return 0


def cmd_gradcam(args) -> int:
    model, vocab, cfg = _load_for_eval(args.checkpoint)
    examples = corpus.load_manifest(args.manifest, "vqa")
    if args.limit:
        examples = examples[: args.limit]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    for i, ex in enumerate(examples):
        image = corpus.load_image(ex.image_path)
        amap = evalviz.gradcam(
            model, vocab, ex.question, image, ex.answer, cfg, layer=args.layer
        )
        shown = corpus.augment(image, np.random.default_rng(0), "finetune", model.resolution)
        evalviz.save_attention_overlay(
            shown, amap, out / f"gradcam_{i:04d}.png", title=ex.question
        )
    print(f"wrote {len(examples)} overlays to {out}")
    return 0


def run_pipeline(
    cfg_pre: RunConfig,
    cfg_ft: RunConfig,
    caption_manifest: str,
    vqa_manifest: str,
    out_dir,
    seed: int,
) -> evalviz.EvalReport:
    """pretrain -> finetune -> evaluate on the training split; one grid entry."""
    out = Path(out_dir)
    vqa = corpus.load_manifest(vqa_manifest, "vqa")
    extra = [f"{ex.question} {ex.answer}" for ex in vqa]
    pre = trainer.pretrain(
        clone(cfg_pre), caption_manifest, out / "pretrain", seed=seed, extra_text=extra
    )
    ft = trainer.finetune(
        clone(cfg_ft), pre.checkpoint_path, vqa_manifest, out / "finetune", seed=seed
    )
    ft.model.eval()
    return evalviz.evaluate(
        ft.model, ft.vocab, vqa, evalviz.unique_answers(vqa), cfg_ft
    )


def run_ablation(
    cfg_pre: RunConfig,
    cfg_ft: RunConfig,
    grid: str,
    caption_manifest: str,
    vqa_manifest: str,
    out_dir,
    seeds: list[int],
) -> list[dict]:
    """Run one of the two published grids; returns per-entry seed-averaged rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if grid == "objectives":
        entries = [(name, {"losses": weights}) for name, weights in OBJECTIVE_GRID]
    elif grid == "mask":
        entries = [(name, {"mask_ratio": ratio}) for name, ratio in MASK_GRID]
    else:
        raise ValueError(f"unknown grid {grid!r}")

    rows = []
    for name, change in entries:
        accs = {"open": [], "closed": [], "overall": []}
        for seed in seeds:
            pre = clone(cfg_pre)
            ft = clone(cfg_ft)
            if "losses" in change:
                pre.losses = tuple(change["losses"])
            if "mask_ratio" in change:
                pre.masking.image_ratio = change["mask_ratio"]
            report = run_pipeline(
                pre, ft, caption_manifest, vqa_manifest, out / f"{name}_seed{seed}", seed
            )
            for key, value in (
                ("open", report.open_acc),
                ("closed", report.closed_acc),
                ("overall", report.overall_acc),
            ):
                if value is not None:
                    accs[key].append(value)
        rows.append(
            {
                "name": name,
                "open": float(np.mean(accs["open"])) if accs["open"] else None,
                "closed": float(np.mean(accs["closed"])) if accs["closed"] else None,
                "overall": float(np.mean(accs["overall"])) if accs["overall"] else None,
                "seeds": list(seeds),
            }
        )

    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "open", "closed", "overall", "seeds"])
        for row in rows:
            writer.writerow(
                [
                    row["name"],
                    "" if row["open"] is None else f"{row['open']:.2f}",
                    "" if row["closed"] is None else f"{row['closed']:.2f}",
                    "" if row["overall"] is None else f"{row['overall']:.2f}",
                    " ".join(str(s) for s in row["seeds"]),
                ]
            )
    evalviz.ablation_figure(rows, out / "ablation.png")
    return rows


def cmd_ablate(args) -> int:
    cfg_pre = _build_config(args, "pretrain")
    cfg_ft = _build_config(args, "finetune")
    if args.pretrain_epochs:
        cfg_pre.run.epochs = args.pretrain_epochs
    if args.finetune_epochs:
        cfg_ft.run.epochs = args.finetune_epochs
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg_pre, out)
    rows = run_ablation(
        cfg_pre, cfg_ft, args.grid, args.manifest, args.vqa_manifest, out, seeds
    )
    header = f"{'entry':<16}{'open':>8}{'closed':>8}{'overall':>9}"
    print(header)
    for row in rows:
        def fmt(v):
            return "-" if v is None else f"{v:.1f}"

        print(f"{row['name']:<16}{fmt(row['open']):>8}{fmt(row['closed']):>8}{fmt(row['overall']):>9}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mumc",
        description="Masked vision-language pre-training with momentum contrastive "
        "losses, and transfer to generative VQA.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file")
            p.add_argument(
                "--set", action="append", metavar="KEY=VALUE", help="config override"
            )
            p.add_argument("--profile", default="desk", choices=["desk", "paper"])
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic shape corpus")
    common(p, config=False)
    p.add_argument("--n-pairs", type=int, default=256)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=4096)
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("pretrain", help="momentum-contrastive pre-training")
    common(p)
    p.add_argument("--manifest", required=True, help="caption manifest (JSON Lines)")
    p.add_argument("--vocab", help="vocab file (one token per line)")
    p.add_argument(
        "--vocab-extra", help="VQA manifest whose text also enters the vocab"
    )
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="transfer to generative VQA")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="VQA manifest (JSON Lines)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="candidate-ranking evaluation report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--candidates", help="file with one candidate answer per line")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="cross-attention Grad-CAM overlays")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--layer", type=int, default=None)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("ablate", help="objective-subset or mask-probability grid")
    common(p)
    p.add_argument("--grid", required=True, choices=["objectives", "mask"])
    p.add_argument("--manifest", required=True, help="caption manifest")
    p.add_argument("--vqa-manifest", required=True)
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument("--pretrain-epochs", type=int, default=None)
    p.add_argument("--finetune-epochs", type=int, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("MUMC_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except Exception as e:  # surface module errors as messages + nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Optimization loops: AdamW, cosine schedule, checkpointing, pretrain/finetune."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import corpus, objectives, tokenizer
from .config import RunConfig, write_resolved
from .contrastive import MomentumBank, enqueue, momentum_update
from .model import MumcModel
from .tokenizer import Vocab, build_vocab
from .vision import interpolate_positions


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass
class Schedule:
    lr_init: float
    lr_final: float
    total_steps: int
    warmup_steps: int = 0


def lr_at(schedule: Schedule, step: int) -> float:
    """Cosine decay lr_init -> lr_final with an optional linear warmup ramp."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.warmup_steps and step < schedule.warmup_steps:
        return schedule.lr_init * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / span if span else 1.0
    if progress <= 0.0:
        return schedule.lr_init
    if progress >= 1.0:
        return schedule.lr_final
    return schedule.lr_final + 0.5 * (schedule.lr_init - schedule.lr_final) * (
        1.0 + math.cos(math.pi * progress)
    )


# ---------------------------------------------------------------------------
# AdamW over a name -> tensor parameter map
# ---------------------------------------------------------------------------


def decay_exempt(name: str, tensor: torch.Tensor) -> bool:
    """Norm scales/offsets, biases, and the temperature are not weight-decayed."""
    return tensor.ndim <= 1


@dataclass
class OptimState:
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]
    step: int = 0
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    exempt: set[str] = field(default_factory=set)

    @classmethod
    def for_params(
        cls,
        params: dict[str, torch.Tensor],
        weight_decay: float,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
    ) -> "OptimState":
        return cls(
            exp_avg={n: torch.zeros_like(p) for n, p in params.items()},
            exp_avg_sq={n: torch.zeros_like(p) for n, p in params.items()},
            weight_decay=weight_decay,
            betas=betas,
            eps=eps,
            exempt={n for n, p in params.items() if decay_exempt(n, p)},
        )


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: OptimState,
    lr: float,
) -> None:
    """Decoupled weight decay applied to the parameter before the Adam update."""
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        if state.weight_decay and name not in state.exempt:
            p.mul_(1.0 - lr * state.weight_decay)
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(state.eps), value=-lr)


def backward(loss: torch.Tensor, params: dict[str, torch.Tensor], retain_graph=False):
    """Reverse-mode gradients as a name -> tensor map; off-path parameters get zeros."""
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(
        loss, tensors, retain_graph=retain_graph, allow_unused=True
    )
    out = {}
    for name, p, g in zip(names, tensors, grads):
        if g is None:
            g = torch.zeros_like(p)
        elif not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        out[name] = g
    return out


def clip_grads(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g.mul_(scale)
    return total


# ---------------------------------------------------------------------------
# Checkpoint archive
# ---------------------------------------------------------------------------

META_KEY = "__meta__"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict


def save_checkpoint(path, tensors: dict[str, torch.Tensor | np.ndarray], meta: dict) -> None:
    """Write the named-tensor archive: u64-LE header length, JSON header, raw f32 data."""
    arrays = {}
    for name, t in tensors.items():
        if name == META_KEY:
            raise ValueError(f"tensor name {META_KEY!r} is reserved")
        if isinstance(t, torch.Tensor):
            t = t.detach().cpu().numpy()
        # np.asarray keeps 0-dim shapes (ascontiguousarray would promote to 1-dim)
        arrays[name] = np.asarray(t, dtype="<f4")
    header: dict = {META_KEY: meta}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        data = arrays[name].tobytes()
        header[name] = {
            "dtype": "f32",
            "shape": list(arrays[name].shape),
            "byte_offset": offset,
            "byte_length": len(data),
        }
        blobs.append(data)
        offset += len(data)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint archive; round trip is bit-exact."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise ValueError("checkpoint truncated: missing header length")
    header_len = int.from_bytes(raw[:8], "little")
    if 8 + header_len > len(raw):
        raise ValueError("checkpoint truncated: header short")
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    meta = header.pop(META_KEY, {})
    data = raw[8 + header_len :]

    ranges = []
    tensors = {}
    for name, entry in header.items():
        if entry["dtype"] != "f32":
            raise ValueError(f"unknown dtype {entry['dtype']!r} for {name}")
        shape = tuple(entry["shape"])
        offset, length = entry["byte_offset"], entry["byte_length"]
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if length != expected:
            raise ValueError(f"byte length mismatch for {name}")
        if offset < 0 or offset + length > len(data):
            raise ValueError(f"data region short for {name}")
        ranges.append((offset, offset + length, name))
        tensors[name] = np.frombuffer(
            data, dtype="<f4", count=length // 4, offset=offset
        ).reshape(shape).copy()
    ranges.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(ranges, ranges[1:]):
        if s1 < e0:
            raise ValueError(f"overlapping tensor ranges: {n0} and {n1}")
    return Checkpoint(tensors=tensors, meta=meta)


def model_state_arrays(model: MumcModel) -> dict[str, torch.Tensor]:
    return {name: p.detach() for name, p in model.named_parameters()}


def load_model_weights(
    model: MumcModel, ckpt: Checkpoint, interpolate_pos: bool = True, skip_decoder: bool = False
) -> list[str]:
    """Copy checkpoint tensors into the model, interpolating the patch positional
    table when the grids differ. Returns names that were left at fresh init.
    Raises on any other shape mismatch, listing every offending tensor."""
    fresh, mismatched = [], []
    params = dict(model.named_parameters())
    pos_name = "tower.patch_embed.pos"
    with torch.no_grad():
        for name, p in params.items():
            dec_owned = name.startswith(("decoder.", "dec_embed", "dec_pos", "dec_head"))
            if skip_decoder and dec_owned:
                fresh.append(name)
                continue
            if name not in ckpt.tensors:
                fresh.append(name)
                continue
            src = torch.from_numpy(ckpt.tensors[name]).to(p.dtype)
            if name == pos_name and interpolate_pos and src.shape != p.shape:
                src_side = int(math.isqrt(src.shape[0] - 1))
                dst = model.tower.patch_embed.grid
                src = interpolate_positions(src, (src_side, src_side), dst)
            if src.shape != p.shape:
                mismatched.append(f"{name}: checkpoint {tuple(src.shape)} vs model {tuple(p.shape)}")
                continue
            p.copy_(src)
    if mismatched:
        raise ValueError("checkpoint/model shape mismatch: " + "; ".join(mismatched))
    return fresh


# ---------------------------------------------------------------------------
# Data handling
# ---------------------------------------------------------------------------


class ImageCache:
    """Decodes each image once; desk-scale corpora fit comfortably in memory."""

    def __init__(self):
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, path: str) -> np.ndarray:
        if path not in self._cache:
            self._cache[path] = corpus.load_image(path)
        return self._cache[path]


def epoch_batches(
    n: int, batch: int, rng: np.random.Generator, min_batch: int = 2
) -> list[np.ndarray]:
    """Shuffled batch index lists; a trailing batch below min_batch is dropped."""
    order = rng.permutation(n)
    out = [order[i : i + batch] for i in range(0, n, batch)]
    if out and len(out[-1]) < min_batch:
        out.pop()
    return out


def _prune_checkpoints(out_dir: Path, keep: int = 2) -> None:
    epochs = sorted(out_dir.glob("checkpoint_epoch*.bin"))
    for old in epochs[:-keep]:
        old.unlink()


def _metric_writer(path):
    return open(path, "w", encoding="utf-8")


def build_run_vocab(
    cfg: RunConfig, captions: Sequence[corpus.CaptionExample], extra_text: Sequence[str] = ()
) -> Vocab:
    texts = [ex.caption for ex in captions] + list(extra_text)
    return build_vocab(texts, cfg.vocab_max)


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    vocab: Vocab
    model: MumcModel
    steps: int
    steps_to_target: int | None = None


def _checkpoint_meta(cfg: RunConfig, step: int, phase: str, vocab: Vocab) -> dict:
    return {
        "config": cfg.to_dict(),
        "step": step,
        "phase": phase,
        "rng_state": {"seed": cfg.run.seed, "step": step},
        "vocab": vocab.tokens,
    }


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------


def pretrain(
    cfg: RunConfig,
    manifest_path: str,
    out_dir,
    seed: int | None = None,
    vocab: Vocab | None = None,
    extra_text: Sequence[str] = (),
    max_steps: int | None = None,
) -> TrainResult:
    """Momentum-contrastive pre-training on an image-caption manifest.

    Per step: loss bundle, backward, clip, AdamW, momentum update (every k),
    enqueue. Deterministic given (config, manifest, seed). Writes metrics.jsonl,
    per-epoch checkpoints (keep-last-2), checkpoint_final.bin, loss_curve.png.
    """
    if seed is not None:
        cfg.run.seed = seed
    seed = cfg.run.seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)

    examples = corpus.load_manifest(manifest_path, "caption")
    if not examples:
        raise ValueError("caption manifest is empty")
    if vocab is None:
        vocab = build_run_vocab(cfg, examples, extra_text)
    cfg.model.vocab_size = len(vocab)
    vocab.save(out / "vocab.txt")

    model = MumcModel(
        cfg.model,
        resolution=cfg.model.train_resolution,
        tau_init=cfg.contrastive.tau_init,
        seed=seed,
    )
    bank = MomentumBank(
        model.tower,
        capacity=cfg.contrastive.queue,
        momentum=cfg.contrastive.m,
        update_every=cfg.contrastive.k,
    )
    params = dict(model.named_parameters())
    state = OptimState.for_params(
        params, weight_decay=cfg.optim.wd, betas=cfg.optim.betas
    )
    cache = ImageCache()

    batches_per_epoch = len(
        epoch_batches(len(examples), cfg.run.batch, np.random.default_rng(0))
    )
    total_steps = cfg.run.epochs * batches_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    schedule = Schedule(
        cfg.optim.lr_init, cfg.optim.lr_final, max(total_steps, 1), cfg.optim.warmup_steps
    )

    metrics_path = out / "metrics.jsonl"
    step = 0
    with _metric_writer(metrics_path) as log:
        for epoch in range(cfg.run.epochs):
            if step >= total_steps:
                break
            order_rng = np.random.default_rng([seed, 1000 + epoch])
            for batch_idx in epoch_batches(len(examples), cfg.run.batch, order_rng):
                if step >= total_steps:
                    break
                rng = np.random.default_rng([seed, 2, step])
                batch = [examples[i] for i in batch_idx]
                step_out = objectives.pretrain_step_loss(
                    model, bank, batch, vocab, cfg, rng, image_provider=cache
                )
                grads = backward(step_out.bundle.total, params)
                clip_grads(grads, cfg.optim.clip)
                lr = lr_at(schedule, step)
                adamw_step(params, grads, state, lr)
                momentum_update(bank, model.tower, step)
                enqueue(bank, step_out.img_momentum, step_out.txt_momentum)

                record = {"step": step, "lr": lr}
                record.update(step_out.bundle.as_floats())
                log.write(json.dumps(record) + "\n")
                step += 1
            save_checkpoint(
                out / f"checkpoint_epoch{epoch:04d}.bin",
                model_state_arrays(model),
                _checkpoint_meta(cfg, step, "pretrain", vocab),
            )
            _prune_checkpoints(out)

    final = out / "checkpoint_final.bin"
    save_checkpoint(final, model_state_arrays(model), _checkpoint_meta(cfg, step, "pretrain", vocab))
    _write_loss_curve(metrics_path, out / "loss_curve.png")
    return TrainResult(
        checkpoint_path=str(final),
        metrics_path=str(metrics_path),
        vocab=vocab,
        model=model,
        steps=step,
    )


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


def finetune(
    cfg: RunConfig,
    checkpoint_path: str | None,
    vqa_manifest: str,
    out_dir,
    seed: int | None = None,
    vocab: Vocab | None = None,
    reuse_decoder: bool = False,
    eval_every: int | None = None,
    accuracy_targets: tuple[float, float] | None = None,
    stop_at_target: bool = False,
    max_steps: int | None = None,
) -> TrainResult:
    """Transfer to generative VQA: load pre-trained weights, interpolate the
    positional table to the fine-tune resolution, disable patch masking, and
    optimize the teacher-forced answer loss.

    With eval_every + accuracy_targets=(closed, open) as percentages, tracks the
    first step at which training-set accuracy meets both targets.
    """
    from . import evalviz  # deferred: evalviz imports trainer helpers

    if seed is not None:
        cfg.run.seed = seed
    seed = cfg.run.seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)

    ckpt = None
    if checkpoint_path is not None:
        ckpt = load_checkpoint(checkpoint_path)
        if vocab is None:
            vocab = Vocab(ckpt.meta["vocab"])
    if vocab is None:
        raise ValueError("finetune needs a vocab (from a checkpoint or explicitly)")
    cfg.model.vocab_size = len(vocab)
    vocab.save(out / "vocab.txt")

    model = MumcModel(
        cfg.model,
        resolution=cfg.model.finetune_resolution,
        tau_init=cfg.contrastive.tau_init,
        seed=seed,
    )
    if ckpt is not None:
        load_model_weights(model, ckpt, skip_decoder=not reuse_decoder)

    examples = corpus.load_manifest(vqa_manifest, "vqa")
    if not examples:
        raise ValueError("vqa manifest is empty")
    candidates = evalviz.unique_answers(examples)

    params = dict(model.named_parameters())
    state = OptimState.for_params(params, weight_decay=cfg.optim.wd, betas=cfg.optim.betas)
    cache = ImageCache()

    batches_per_epoch = len(
        epoch_batches(len(examples), cfg.run.batch, np.random.default_rng(0), min_batch=1)
    )
    total_steps = cfg.run.epochs * batches_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    schedule = Schedule(
        cfg.optim.lr_init, cfg.optim.lr_final, max(total_steps, 1), cfg.optim.warmup_steps
    )

    def train_accuracy() -> "evalviz.EvalReport":
        return evalviz.evaluate(
            model, vocab, examples, candidates, cfg, image_provider=cache
        )

    def targets_met(report) -> bool:
        closed_t, open_t = accuracy_targets
        closed_ok = report.closed_acc is None or report.closed_acc >= closed_t
        open_ok = report.open_acc is None or report.open_acc >= open_t
        return closed_ok and open_ok

    metrics_path = out / "metrics.jsonl"
    steps_to_target = None
    step = 0
    stop = False
    with _metric_writer(metrics_path) as log:
        for epoch in range(cfg.run.epochs):
            if stop or step >= total_steps:
                break
            order_rng = np.random.default_rng([seed, 3000 + epoch])
            for batch_idx in epoch_batches(
                len(examples), cfg.run.batch, order_rng, min_batch=1
            ):
                if step >= total_steps:
                    break
                rng = np.random.default_rng([seed, 4, step])
                batch = [examples[i] for i in batch_idx]
                images = [
                    corpus.augment(
                        cache(ex.image_path), rng, "finetune", model.resolution
                    )
                    for ex in batch
                ]
                patches = objectives.prepare_patches(
                    images, cfg.model, next(model.parameters()).dtype
                )
                seqs = [
                    tokenizer.encode(ex.question, vocab, cfg.model.max_text_len)
                    for ex in batch
                ]
                q_ids, q_pad = objectives.stack_sequences(seqs)
                a_ids = objectives.answers_to_ids([ex.answer for ex in batch], vocab)
                loss = objectives.finetune_answer_loss(model, q_ids, q_pad, patches, a_ids)
                grads = backward(loss, params)
                clip_grads(grads, cfg.optim.clip)
                lr = lr_at(schedule, step)
                adamw_step(params, grads, state, lr)
                log.write(
                    json.dumps({"step": step, "lr": lr, "loss": float(loss.detach())}) + "\n"
                )
                step += 1
                if (
                    eval_every
                    and accuracy_targets
                    and steps_to_target is None
                    and step % eval_every == 0
                ):
                    if targets_met(train_accuracy()):
                        steps_to_target = step
                        if stop_at_target:
                            stop = True
                            break
            save_checkpoint(
                out / f"checkpoint_epoch{epoch:04d}.bin",
                model_state_arrays(model),
                _checkpoint_meta(cfg, step, "finetune", vocab),
            )
            _prune_checkpoints(out)

    final = out / "checkpoint_final.bin"
    save_checkpoint(final, model_state_arrays(model), _checkpoint_meta(cfg, step, "finetune", vocab))
    _write_loss_curve(metrics_path, out / "loss_curve.png")
    return TrainResult(
        checkpoint_path=str(final),
        metrics_path=str(metrics_path),
        vocab=vocab,
        model=model,
        steps=step,
        steps_to_target=steps_to_target,
    )


def _write_loss_curve(metrics_path, out_png) -> None:
    from .evalviz import loss_curve_figure

    loss_curve_figure(metrics_path, out_png)

"""VQA evaluation by candidate ranking, accuracy reports, Grad-CAM overlays, figures."""

from __future__ import annotations

import csv
import difflib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn.functional as F

from . import corpus, objectives, tokenizer
from .config import RunConfig
from .corpus import VqaExample, quadrant_box
from .model import EncoderOutput, MumcModel
from .tokenizer import PAD_ID, Vocab


def normalize_answer(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def unique_answers(examples: Sequence[VqaExample]) -> list[str]:
    """Deduplicated candidate list in first-appearance order."""
    seen = {}
    for ex in examples:
        key = normalize_answer(ex.answer)
        if key not in seen:
            seen[key] = ex.answer
    return list(seen.values())


# ---------------------------------------------------------------------------
# Candidate scoring
# ---------------------------------------------------------------------------


def fuse_question_image(
    model: MumcModel,
    vocab: Vocab,
    questions: Sequence[str],
    images: Sequence[np.ndarray],
    cfg: RunConfig,
    keep_attention: bool = False,
) -> EncoderOutput:
    """Multimodal context for (question, image) pairs; no patch masking."""
    dtype = next(model.parameters()).dtype
    patches = objectives.prepare_patches(images, cfg.model, dtype)
    kept = objectives.full_kept(patches.shape[0], patches.shape[1])
    image_out = model.encode_image(model.tower.embed_patches(patches, kept))
    seqs = [tokenizer.encode(q, vocab, cfg.model.max_text_len) for q in questions]
    ids, pad = objectives.stack_sequences(seqs)
    text_out = model.encode_text(ids, pad)
    return model.encode_multimodal(text_out, image_out, keep_attention=keep_attention)


def candidate_log_likelihoods(
    model: MumcModel, mm_out: EncoderOutput, candidate_ids: torch.Tensor
) -> torch.Tensor:
    """Mean teacher-forced log-likelihood of each candidate under the decoder.

    candidate_ids: (C, A) padded [CLS] pieces [SEP] rows. Returns (B, C).
    The mean (not sum) avoids length bias across candidates.
    """
    b = mm_out.hidden.shape[0]
    c, a = candidate_ids.shape
    hidden = mm_out.hidden.unsqueeze(1).expand(-1, c, -1, -1).reshape(b * c, *mm_out.hidden.shape[1:])
    pad = None
    if mm_out.pad_mask is not None:
        pad = mm_out.pad_mask.unsqueeze(1).expand(-1, c, -1).reshape(b * c, -1)
    flat = EncoderOutput(hidden=hidden, pad_mask=pad)
    prefix = candidate_ids[:, :-1].repeat(b, 1)
    targets = candidate_ids[:, 1:].repeat(b, 1)
    logits = model.decoder_logits(flat, prefix)
    logprobs = F.log_softmax(logits, dim=-1)
    token_ll = logprobs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    mask = (targets != PAD_ID).to(token_ll.dtype)
    mean_ll = (token_ll * mask).sum(-1) / mask.sum(-1)
    return mean_ll.reshape(b, c)


@torch.no_grad()
def rank_answer(
    model: MumcModel,
    vocab: Vocab,
    question: str,
    image: np.ndarray,
    candidates: Sequence[str],
    cfg: RunConfig,
) -> tuple[str, np.ndarray]:
    """Best candidate by decoder likelihood; ties go to the earlier list entry."""
    if not candidates:
        raise ValueError("empty candidate list")
    mm_out = fuse_question_image(model, vocab, [question], [image], cfg)
    cand_ids = objectives.answers_to_ids(list(candidates), vocab)
    scores = candidate_log_likelihoods(model, mm_out, cand_ids)[0].numpy()
    return candidates[int(np.argmax(scores))], scores


@torch.no_grad()
def _rank_by_generation(
    model: MumcModel, vocab: Vocab, mm_out: EncoderOutput, candidates: Sequence[str]
) -> list[str]:
    """Greedy decode then closest candidate by string similarity (flagged mode)."""
    out = []
    generated = model.generate_answer(mm_out)
    for row in generated:
        text = tokenizer.decode(row.numpy(), vocab)
        ratios = [
            difflib.SequenceMatcher(
                None, normalize_answer(text), normalize_answer(c)
            ).ratio()
            for c in candidates
        ]
        out.append(candidates[int(np.argmax(ratios))])
    return out


# ---------------------------------------------------------------------------
# Evaluation report
# ---------------------------------------------------------------------------


@dataclass
class EvalRecord:
    question: str
    truth: str
    prediction: str
    answer_type: str
    correct: bool


@dataclass
class EvalReport:
    records: list[EvalRecord]

    def _group(self, answer_type: str | None) -> tuple[int, int]:
        rows = [
            r
            for r in self.records
            if answer_type is None or r.answer_type == answer_type
        ]
        return sum(r.correct for r in rows), len(rows)

    def _acc(self, answer_type: str | None) -> float | None:
        correct, total = self._group(answer_type)
        return None if total == 0 else 100.0 * correct / total

    @property
    def open_acc(self) -> float | None:
        return self._acc("open")

    @property
    def closed_acc(self) -> float | None:
        return self._acc("closed")

    @property
    def overall_acc(self) -> float | None:
        return self._acc(None)

    def aggregates(self) -> dict:
        out = {}
        for name, kind in (("open", "open"), ("closed", "closed"), ("overall", None)):
            correct, total = self._group(kind)
            out[name] = {
                "accuracy": None if total == 0 else 100.0 * correct / total,
                "correct": correct,
                "total": total,
            }
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "aggregates": self.aggregates(),
                "records": [r.__dict__ for r in self.records],
            },
            indent=2,
        )

    def text_table(self, label: str = "synthetic") -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.1f}"

        lines = [
            f"{'Dataset':<12}{'Open':>8}{'Closed':>8}{'Overall':>9}",
            f"{label:<12}{fmt(self.open_acc):>8}{fmt(self.closed_acc):>8}{fmt(self.overall_acc):>9}",
        ]
        return "\n".join(lines)

    def write(self, out_dir, label: str = "synthetic") -> None:
        """report.json + report.csv (per-example rows) + report.txt + accuracy.png"""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n", encoding="utf-8")
        with open(out / "report.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["question", "truth", "prediction", "answer_type", "correct"])
            for r in self.records:
                writer.writerow(
                    [r.question, r.truth, r.prediction, r.answer_type, int(r.correct)]
                )
        (out / "report.txt").write_text(self.text_table(label) + "\n", encoding="utf-8")
        accuracy_figure(self, out / "accuracy.png")


@torch.no_grad()
def evaluate(
    model: MumcModel,
    vocab: Vocab,
    examples: Sequence[VqaExample],
    candidates: Sequence[str] | None,
    cfg: RunConfig,
    image_provider: Callable[[str], np.ndarray] | None = None,
    batch: int = 16,
) -> EvalReport:
    """Rank candidates per question; exact (normalized) string match scores."""
    provider = image_provider or corpus.load_image
    if candidates is None:
        candidates = unique_answers(examples)
    candidates = list(candidates)
    if not candidates:
        raise ValueError("empty candidate list")
    cand_ids = objectives.answers_to_ids(candidates, vocab)

    records = []
    for start in range(0, len(examples), batch):
        chunk = examples[start : start + batch]
        images = [
            corpus.augment(
                provider(ex.image_path),
                np.random.default_rng(0),
                "finetune",
                model.resolution,
            )
            for ex in chunk
        ]
        mm_out = fuse_question_image(
            model, vocab, [ex.question for ex in chunk], images, cfg
        )
        if cfg.rank_by == "generate":
            preds = _rank_by_generation(model, vocab, mm_out, candidates)
        else:
            scores = candidate_log_likelihoods(model, mm_out, cand_ids)
            preds = [candidates[int(i)] for i in scores.argmax(dim=1)]
        for ex, pred in zip(chunk, preds):
            records.append(
                EvalRecord(
                    question=ex.question,
                    truth=ex.answer,
                    prediction=pred,
                    answer_type=ex.answer_type,
                    correct=normalize_answer(pred) == normalize_answer(ex.answer),
                )
            )
    return EvalReport(records=records)


# ---------------------------------------------------------------------------
# In-batch retrieval (pre-training diagnostic)
# ---------------------------------------------------------------------------


@torch.no_grad()
def in_batch_retrieval_r1(
    model: MumcModel,
    examples: Sequence[corpus.CaptionExample],
    vocab: Vocab,
    cfg: RunConfig,
    batch: int = 16,
    seed: int = 0,
    image_provider: Callable[[str], np.ndarray] | None = None,
) -> float:
    """Mean of image->text and text->image R@1 over shuffled in-batch candidates.

    A retrieval counts as correct when the retrieved caption string matches the
    query's caption (duplicated captions are interchangeable).
    """
    provider = image_provider or corpus.load_image
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    dtype = next(model.parameters()).dtype
    hits = 0
    total = 0
    for start in range(0, len(order), batch):
        idx = order[start : start + batch]
        if len(idx) < 2:
            continue
        chunk = [examples[i] for i in idx]
        images = [
            corpus.augment(
                provider(ex.image_path), rng, "finetune", model.resolution
            )
            for ex in chunk
        ]
        patches = objectives.prepare_patches(images, cfg.model, dtype)
        kept = objectives.full_kept(patches.shape[0], patches.shape[1])
        image_out = model.encode_image(model.tower.embed_patches(patches, kept))
        seqs = [
            tokenizer.encode(ex.caption, vocab, cfg.model.max_text_len) for ex in chunk
        ]
        ids, pad = objectives.stack_sequences(seqs)
        text_out = model.encode_text(ids, pad)
        v = model.project_image(image_out.cls)
        t = model.project_text(text_out.cls)
        sim = v @ t.t()
        captions = [normalize_answer(ex.caption) for ex in chunk]
        for i in range(len(chunk)):
            if captions[int(sim[i].argmax())] == captions[i]:
                hits += 1
            if captions[int(sim[:, i].argmax())] == captions[i]:
                hits += 1
            total += 2
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------


@dataclass
class AttentionMap:
    """Nonnegative patch-grid heat map, max-normalized, plus its image-size overlay."""

    grid_map: np.ndarray  # (rows, cols)
    upsampled: np.ndarray  # (H, W)
    layer: int


def gradcam(
    model: MumcModel,
    vocab: Vocab,
    question: str,
    image: np.ndarray,
    answer: str,
    cfg: RunConfig,
    layer: int | None = None,
) -> AttentionMap:
    """ReLU(grad x attention) over the chosen cross-attention layer, head-summed,
    averaged over non-pad question rows, scattered to the patch grid."""
    layer = cfg.gradcam_layer if layer is None else layer
    n_layers = cfg.model.mm_layers
    if not -n_layers <= layer < n_layers:
        raise ValueError(f"layer {layer} out of range for {n_layers} cross-attention layers")
    image = corpus.augment(image, np.random.default_rng(0), "finetune", model.resolution)
    mm_out = fuse_question_image(model, vocab, [question], [image], cfg, keep_attention=True)
    answer_ids = objectives.answers_to_ids([answer], vocab)
    logits = model.decoder_logits(mm_out, answer_ids[:, :-1])
    targets = answer_ids[:, 1:]
    logprobs = F.log_softmax(logits, dim=-1)
    token_ll = logprobs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    score = token_ll[targets != PAD_ID].sum()

    attn = mm_out.cross_attentions[layer]  # (1, heads, Lq, Lk)
    (grad,) = torch.autograd.grad(score, attn)
    cam = torch.relu(grad * attn).sum(dim=1)[0]  # (Lq, Lk)
    rows = mm_out.pad_mask[0]
    cam = cam[rows].mean(dim=0)  # (Lk,)

    grid = model.grid
    flat = torch.zeros(grid[0] * grid[1], dtype=cam.dtype)
    kept = objectives.full_kept(1, grid[0] * grid[1])[0]
    flat[kept] = cam[1:].detach()  # column 0 is the image [CLS]
    grid_map = flat.reshape(grid)
    peak = float(grid_map.max())
    if peak > 0:
        grid_map = grid_map / peak
    h, w = image.shape[:2]
    upsampled = (
        F.interpolate(
            grid_map[None, None].float(), size=(h, w), mode="bilinear", align_corners=False
        )[0, 0]
        .numpy()
        .astype(np.float32)
    )
    return AttentionMap(
        grid_map=grid_map.numpy().astype(np.float32), upsampled=upsampled, layer=layer
    )


def quadrant_mass_fraction(amap: AttentionMap, quadrant: str) -> float:
    """Share of total attention mass inside one quadrant of the overlay."""
    h, w = amap.upsampled.shape
    x0, y0, x1, y1 = quadrant_box(quadrant, h)
    total = float(amap.upsampled.sum())
    if total == 0:
        return 0.0
    return float(amap.upsampled[y0:y1, x0:x1].sum()) / total


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def save_attention_overlay(image: np.ndarray, amap: AttentionMap, out_path, title=None):
    """Heat map blended over the input image, written as PNG."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image)
    ax.imshow(amap.upsampled, cmap="jet", alpha=0.45, vmin=0.0, vmax=1.0)
    if title:
        ax.set_title(title, fontsize=9)
    ax.axis("off")
    fig.savefig(out_path, bbox_inches="tight", dpi=120)
    plt.close(fig)


def loss_curve_figure(metrics_path, out_png) -> None:
    steps, series = [], {}
    with open(metrics_path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            steps.append(rec["step"])
            for key, value in rec.items():
                if key in ("step", "lr"):
                    continue
                series.setdefault(key, []).append(value)
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, values in series.items():
        ax.plot(steps, values, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def accuracy_figure(report: EvalReport, out_png) -> None:
    agg = report.aggregates()
    names = [k for k in ("open", "closed", "overall") if agg[k]["accuracy"] is not None]
    values = [agg[k]["accuracy"] for k in names]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(names, values, color=["#4C72B0", "#DD8452", "#55A868"][: len(names)])
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy (%)")
    for i, v in enumerate(values):
        ax.text(i, v + 1, f"{v:.1f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def ablation_figure(rows: list[dict], out_png) -> None:
    """Grouped bars of open/closed/overall accuracy per ablation entry."""
    labels = [r["name"] for r in rows]
    keys = ["open", "closed", "overall"]
    x = np.arange(len(labels))
    width = 0.25
    fig, ax = plt.subplots(figsize=(max(5, 1.6 * len(labels)), 4))
    for j, key in enumerate(keys):
        values = [r.get(key) if r.get(key) is not None else 0.0 for r in rows]
        ax.bar(x + (j - 1) * width, values, width, label=key)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)

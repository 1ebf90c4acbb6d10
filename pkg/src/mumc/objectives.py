"""Training objectives: ITM, MLM, teacher-forced answer loss, combined step loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import corpus, tokenizer, vision
from .config import ModelConfig, RunConfig
from .contrastive import MomentumBank, mcl_loss, ucl_loss
from .model import MAX_ANSWER_LEN, EncoderOutput, MumcModel, project
from .tokenizer import CLS_ID, PAD_ID, SEP_ID, TokenSequence, Vocab


@dataclass
class LossBundle:
    """The four pre-training objectives plus their weighted total."""

    ucl: torch.Tensor
    mcl: torch.Tensor
    itm: torch.Tensor
    mlm: torch.Tensor
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        w = self.weights
        self.total = w[0] * self.ucl + w[1] * self.mcl + w[2] * self.itm + w[3] * self.mlm

    def as_floats(self) -> dict[str, float]:
        return {
            "l_ucl": float(self.ucl.detach()),
            "l_mcl": float(self.mcl.detach()),
            "l_itm": float(self.itm.detach()),
            "l_mlm": float(self.mlm.detach()),
            "total": float(self.total.detach()),
        }


@dataclass
class StepOutput:
    bundle: LossBundle
    img_momentum: torch.Tensor  # momentum projections of this batch, for enqueue
    txt_momentum: torch.Tensor


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------


def stack_sequences(seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.from_numpy(np.stack([s.ids for s in seqs]))
    pad = torch.from_numpy(np.stack([s.pad_mask for s in seqs]))
    return ids, pad


def stack_masked(
    seqs: Sequence[tokenizer.MaskedTokenSequence],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (ids, pad_mask, mask_flags, originals); originals hold PAD off-flag."""
    ids, pad = stack_sequences(seqs)
    flags = torch.zeros_like(pad)
    originals = torch.full_like(ids, PAD_ID)
    for i, s in enumerate(seqs):
        if len(s.mask_positions):
            flags[i, s.mask_positions] = True
            originals[i, s.mask_positions] = torch.from_numpy(s.original_ids)
    return ids, pad, flags, originals


def normalize_pixels(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    mean = np.asarray(cfg.pixel_mean, dtype=np.float64)
    std = np.asarray(cfg.pixel_std, dtype=np.float64)
    return (image.astype(np.float64) - mean) / std


def prepare_patches(
    images: Sequence[np.ndarray], cfg: ModelConfig, dtype: torch.dtype
) -> torch.Tensor:
    """Normalize and patchify a batch of decoded images -> (B, P, patch_dim)."""
    rows = [vision.patchify(normalize_pixels(im, cfg), cfg.patch_size) for im in images]
    return torch.from_numpy(np.stack(rows)).to(dtype)


def full_kept(n_images: int, n_patches: int) -> torch.Tensor:
    return torch.arange(n_patches, dtype=torch.long).unsqueeze(0).expand(n_images, -1)


def sample_kept(
    n_images: int, n_patches: int, ratio: float, rng: np.random.Generator
) -> torch.Tensor:
    kept = np.stack([vision.mask_patches(n_patches, ratio, rng) for _ in range(n_images)])
    return torch.from_numpy(kept)


def sample_itm_negatives(batch: int, rng: np.random.Generator) -> np.ndarray:
    """One in-batch negative caption index per image; never the image's own."""
    if batch < 2:
        raise ValueError("ITM needs a batch of at least 2 to sample negatives")
    offsets = rng.integers(1, batch, size=batch)
    return (np.arange(batch) + offsets) % batch


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def itm_loss(
    mm_cls_pos: torch.Tensor, mm_cls_neg: torch.Tensor, head: torch.nn.Module
) -> torch.Tensor:
    """Two-class cross-entropy on fused [CLS] rows: matched = 1, mismatched = 0."""
    if mm_cls_pos.shape[0] < 2:
        raise ValueError("ITM needs a batch of at least 2 (no negative available)")
    logits = head(torch.cat([mm_cls_pos, mm_cls_neg], dim=0))
    labels = torch.cat(
        [
            torch.ones(mm_cls_pos.shape[0], dtype=torch.long),
            torch.zeros(mm_cls_neg.shape[0], dtype=torch.long),
        ]
    )
    return F.cross_entropy(logits, labels)


def mlm_loss(
    model: MumcModel,
    masked_ids: torch.Tensor,
    pad_mask: torch.Tensor,
    mask_flags: torch.Tensor,
    originals: torch.Tensor,
    image_out: EncoderOutput,
) -> torch.Tensor:
    """Cross-entropy at masked positions, conditioned on unmasked text + image."""
    if not bool(mask_flags.any()):
        raise ValueError("no masked positions to predict")
    text_out = model.encode_text(masked_ids, pad_mask)
    mm_out = model.encode_multimodal(text_out, image_out)
    logits = model.mlm_head(mm_out.hidden)
    return F.cross_entropy(logits[mask_flags], originals[mask_flags])


def answers_to_ids(answers: Sequence[str], vocab: Vocab) -> torch.Tensor:
    """Encode answers as [CLS] pieces [SEP] rows, right-padded to the batch max."""
    rows = []
    for answer in answers:
        pieces = []
        for word in tokenizer.split_words(answer):
            pieces.extend(tokenizer.wordpiece(word, vocab))
        if not pieces:
            raise ValueError(f"empty answer {answer!r}")
        pieces = pieces[: MAX_ANSWER_LEN - 2]
        rows.append([CLS_ID] + [vocab.id_of[p] for p in pieces] + [SEP_ID])
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    return torch.from_numpy(ids)


def finetune_answer_loss(
    model: MumcModel,
    question_ids: torch.Tensor,
    question_pad: torch.Tensor,
    patches: torch.Tensor,
    answer_ids: torch.Tensor,
) -> torch.Tensor:
    """Teacher-forced decoder cross-entropy over answer tokens plus [SEP]."""
    if answer_ids.shape[1] < 3:
        raise ValueError("empty answer")
    kept = full_kept(patches.shape[0], patches.shape[1])
    image_out = model.encode_image(model.tower.embed_patches(patches, kept))
    text_out = model.encode_text(question_ids, question_pad)
    mm_out = model.encode_multimodal(text_out, image_out)
    logits = model.decoder_logits(mm_out, answer_ids[:, :-1])
    targets = answer_ids[:, 1:]
    predict = targets != PAD_ID
    return F.cross_entropy(
        logits[predict], targets[predict]
    )


# ---------------------------------------------------------------------------
# Full pre-training step
# ---------------------------------------------------------------------------


def pretrain_step_loss(
    model: MumcModel,
    bank: MomentumBank,
    batch: Sequence[corpus.CaptionExample],
    vocab: Vocab,
    cfg: RunConfig,
    rng: np.random.Generator,
    image_provider: Callable[[str], np.ndarray] | None = None,
) -> StepOutput:
    """One pre-training step's losses. Leaves the bank untouched; the trainer
    applies momentum_update/enqueue afterwards.

    Consumes rng in a fixed order (augment, two image masks, text masks, ITM
    negatives), so re-seeding reproduces the step exactly.
    """
    if len(batch) < 2:
        raise ValueError("pre-training batch must have at least 2 examples")
    provider = image_provider or corpus.load_image
    dtype = next(model.parameters()).dtype
    mcfg = cfg.model
    res = model.resolution

    images = [
        corpus.augment(provider(ex.image_path), rng, cfg.augment_profile, res)
        for ex in batch
    ]
    patches = prepare_patches(images, mcfg, dtype)
    n_patches = patches.shape[1]
    kept_online = sample_kept(len(batch), n_patches, cfg.masking.image_ratio, rng)
    kept_momentum = sample_kept(len(batch), n_patches, cfg.masking.image_ratio, rng)

    seqs = [tokenizer.encode(ex.caption, vocab, mcfg.max_text_len) for ex in batch]
    masked = [tokenizer.apply_mlm_mask(s, rng, cfg.masking.text_ratio) for s in seqs]
    ids, pad = stack_sequences(seqs)
    m_ids, m_pad, m_flags, m_orig = stack_masked(masked)
    neg_index = torch.from_numpy(sample_itm_negatives(len(batch), rng))

    # online views; clean and MLM-masked text share one encoder pass
    image_out = model.encode_image(model.tower.embed_patches(patches, kept_online))
    both = model.encode_text(torch.cat([ids, m_ids]), torch.cat([pad, m_pad]))
    text_out = EncoderOutput(hidden=both.hidden[: len(batch)], pad_mask=pad)
    text_out_masked = EncoderOutput(hidden=both.hidden[len(batch) :], pad_mask=m_pad)
    img_q = model.project_image(image_out.cls)
    txt_q = model.project_text(text_out.cls)

    # momentum views (stop-gradient)
    with torch.no_grad():
        shadow = bank.tower
        image_out_m = shadow.encode_image(shadow.embed_patches(patches, kept_momentum))
        text_out_m = shadow.encode_text(ids, pad)
        img_k = project(image_out_m.cls, shadow.img_proj)
        txt_k = project(text_out_m.cls, shadow.txt_proj)

    tau = model.tau
    l_ucl = ucl_loss(img_q, txt_q, img_k, txt_k, bank, tau)
    l_mcl = mcl_loss(img_q, txt_q, img_k, txt_k, bank, tau)

    # one fused pass over [matched ; mismatched ; masked] text streams: per-row
    # attention/norms make it equal to three separate passes, at less overhead
    b = len(batch)
    streams = [text_out, text_out.select_rows(neg_index), text_out_masked]
    img_hidden = image_out.hidden
    if cfg.itm_image_negatives:
        img_neg_index = torch.from_numpy(sample_itm_negatives(b, rng))
        streams.append(text_out)
        img_hidden = torch.cat(
            [img_hidden.repeat(3, 1, 1), img_hidden[img_neg_index]], dim=0
        )
    else:
        img_hidden = img_hidden.repeat(len(streams), 1, 1)
    fused = model.encode_multimodal(
        EncoderOutput(
            hidden=torch.cat([s.hidden for s in streams], dim=0),
            pad_mask=torch.cat([s.pad_mask for s in streams], dim=0),
        ),
        EncoderOutput(hidden=img_hidden),
    )
    cls_neg = fused.cls[b : 2 * b]
    if cfg.itm_image_negatives:
        cls_neg = torch.cat([cls_neg, fused.cls[3 * b :]], dim=0)
    l_itm = itm_loss(fused.cls[:b], cls_neg, model.itm_head)

    mlm_logits = model.mlm_head(fused.hidden[2 * b : 3 * b])
    if not bool(m_flags.any()):
        raise ValueError("no masked positions to predict")
    l_mlm = F.cross_entropy(mlm_logits[m_flags], m_orig[m_flags])

    bundle = LossBundle(ucl=l_ucl, mcl=l_mcl, itm=l_itm, mlm=l_mlm, weights=cfg.losses)
    return StepOutput(bundle=bundle, img_momentum=img_k, txt_momentum=txt_k)

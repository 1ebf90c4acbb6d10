"""Transformer backbone: image/text encoders, cross-attention fusion, answer decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .tokenizer import CLS_ID, PAD_ID, SEP_ID
from .vision import PatchEmbed, PatchSequence

MAX_ANSWER_LEN = 12  # [CLS] + answer pieces + [SEP], generation stops here

TAU_MIN = 1e-3


@dataclass
class EncoderOutput:
    """Hidden states with row 0 the [CLS] summary; attention maps kept on request."""

    hidden: torch.Tensor  # (B, L, D)
    pad_mask: torch.Tensor | None = None  # (B, L), True = real token
    attentions: list = field(default_factory=list)
    cross_attentions: list = field(default_factory=list)

    @property
    def cls(self) -> torch.Tensor:
        return self.hidden[:, 0]

    def select_rows(self, index: torch.Tensor) -> "EncoderOutput":
        """Batch-permuted view (used for in-batch negative pairing)."""
        return EncoderOutput(
            hidden=self.hidden[index],
            pad_mask=None if self.pad_mask is None else self.pad_mask[index],
        )


def _check_finite(x: torch.Tensor, name: str, layer: int) -> None:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activations in {name} layer {layer}")


class Attention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)

    def forward(self, query, keyvalue, key_mask=None, causal=False, keep=False):
        b, lq, d = query.shape
        lk = keyvalue.shape[1]
        q = self.q(query).view(b, lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(keyvalue).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(keyvalue).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            tri = torch.triu(
                torch.ones(lq, lk, dtype=torch.bool, device=scores.device), diagonal=1
            )
            scores = scores.masked_fill(tri, float("-inf"))
        probs = scores.softmax(dim=-1)
        ctx = (probs @ v).transpose(1, 2).reshape(b, lq, d)
        return self.out(ctx), (probs if keep else None)


class Mlp(nn.Module):
    def __init__(self, hidden: int, mlp_ratio: float):
        super().__init__()
        inner = int(hidden * mlp_ratio)
        self.fc1 = nn.Linear(hidden, inner)
        self.fc2 = nn.Linear(inner, hidden)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm self-attention + MLP with residuals."""

    def __init__(self, hidden: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden)
        self.attn = Attention(hidden, heads)
        self.ln2 = nn.LayerNorm(hidden)
        self.mlp = Mlp(hidden, mlp_ratio)

    def forward(self, x, key_mask=None, keep=False):
        h = self.ln1(x)
        a, probs = self.attn(h, h, key_mask=key_mask, keep=keep)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, probs


class CrossBlock(nn.Module):
    """Pre-norm self-attention, cross-attention to a context stream, then MLP."""

    def __init__(self, hidden: int, heads: int, mlp_ratio: float, causal: bool = False):
        super().__init__()
        self.causal = causal
        self.ln1 = nn.LayerNorm(hidden)
        self.self_attn = Attention(hidden, heads)
        self.ln_x = nn.LayerNorm(hidden)
        self.cross_attn = Attention(hidden, heads)
        self.ln2 = nn.LayerNorm(hidden)
        self.mlp = Mlp(hidden, mlp_ratio)

    def forward(self, x, context, self_mask=None, context_mask=None, keep=False):
        h = self.ln1(x)
        a, self_probs = self.self_attn(h, h, key_mask=self_mask, causal=self.causal, keep=keep)
        x = x + a
        c, cross_probs = self.cross_attn(
            self.ln_x(x), context, key_mask=context_mask, keep=keep
        )
        x = x + c
        x = x + self.mlp(self.ln2(x))
        return x, self_probs, cross_probs


class Encoder(nn.Module):
    def __init__(self, name: str, layers: int, hidden: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.name = name
        self.blocks = nn.ModuleList(Block(hidden, heads, mlp_ratio) for _ in range(layers))
        self.norm = nn.LayerNorm(hidden)

    def forward(self, x, key_mask=None, keep_attention=False):
        attns = []
        for i, blk in enumerate(self.blocks):
            x, probs = blk(x, key_mask=key_mask, keep=keep_attention)
            _check_finite(x, self.name, i)
            if keep_attention:
                attns.append(probs)
        return self.norm(x), attns


class CrossEncoder(nn.Module):
    def __init__(self, name, layers, hidden, heads, mlp_ratio, causal=False):
        super().__init__()
        self.name = name
        self.blocks = nn.ModuleList(
            CrossBlock(hidden, heads, mlp_ratio, causal=causal) for _ in range(layers)
        )
        self.norm = nn.LayerNorm(hidden)

    def forward(self, x, context, self_mask=None, context_mask=None, keep_attention=False):
        self_attns, cross_attns = [], []
        for i, blk in enumerate(self.blocks):
            x, sp, cp = blk(
                x, context, self_mask=self_mask, context_mask=context_mask, keep=keep_attention
            )
            _check_finite(x, self.name, i)
            if keep_attention:
                self_attns.append(sp)
                cross_attns.append(cp)
        return self.norm(x), self_attns, cross_attns


class ContrastiveTower(nn.Module):
    """The momentum-mirrored half: patch embedding, the two unimodal encoders,
    and the projection heads g_v / g_t."""

    def __init__(self, cfg: ModelConfig, resolution: int):
        super().__init__()
        self.cfg = cfg
        self.resolution = resolution
        grid = cfg.grid(resolution)
        self.patch_embed = PatchEmbed(cfg.patch_dim, cfg.hidden, grid)
        self.img_encoder = Encoder(
            "image_encoder", cfg.img_layers, cfg.hidden, cfg.heads, cfg.mlp_ratio
        )
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.txt_pos = nn.Parameter(torch.zeros(cfg.max_text_len, cfg.hidden))
        self.txt_encoder = Encoder(
            "text_encoder", cfg.txt_layers, cfg.hidden, cfg.heads, cfg.mlp_ratio
        )
        self.img_proj = nn.Linear(cfg.hidden, cfg.proj_dim, bias=False)
        self.txt_proj = nn.Linear(cfg.hidden, cfg.proj_dim, bias=False)

    def embed_patches(self, patches: torch.Tensor, kept: torch.Tensor) -> PatchSequence:
        return self.patch_embed(patches, kept)

    def encode_image(self, seq: PatchSequence, keep_attention=False) -> EncoderOutput:
        hidden, attns = self.img_encoder(seq.embeddings, keep_attention=keep_attention)
        return EncoderOutput(hidden=hidden, attentions=attns)

    def encode_text(self, ids: torch.Tensor, pad_mask: torch.Tensor, keep_attention=False):
        l = ids.shape[1]
        x = self.tok_embed(ids) + self.txt_pos[:l]
        hidden, attns = self.txt_encoder(x, key_mask=pad_mask, keep_attention=keep_attention)
        hidden = hidden * pad_mask.unsqueeze(-1).to(hidden.dtype)
        return EncoderOutput(hidden=hidden, pad_mask=pad_mask, attentions=attns)


def project(cls: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """Low-dimensional unit-norm projection of a [CLS] embedding."""
    z = head(cls)
    norms = z.norm(dim=-1)
    if (norms == 0).any():
        raise ValueError("degenerate projection: zero vector cannot be normalized")
    return z / norms.unsqueeze(-1)


class MumcModel(nn.Module):
    """Full pre-training/fine-tuning model.

    tower holds everything the momentum copy mirrors; the multimodal encoder,
    answer decoder, ITM/MLM heads, and the temperature are online-only.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        resolution: int | None = None,
        tau_init: float = 0.07,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if cfg.vocab_size is None:
            raise ValueError("model config needs vocab_size before construction")
        torch.manual_seed(seed)
        self.cfg = cfg
        self.resolution = resolution or cfg.train_resolution
        self.tower = ContrastiveTower(cfg, self.resolution)
        self.mm_encoder = CrossEncoder(
            "multimodal_encoder", cfg.mm_layers, cfg.hidden, cfg.heads, cfg.mlp_ratio
        )
        self.dec_embed = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.dec_pos = nn.Parameter(torch.zeros(MAX_ANSWER_LEN, cfg.hidden))
        self.decoder = CrossEncoder(
            "decoder", cfg.dec_layers, cfg.hidden, cfg.heads, cfg.mlp_ratio, causal=True
        )
        self.dec_head = nn.Linear(cfg.hidden, cfg.vocab_size)
        self.itm_head = nn.Linear(cfg.hidden, 2)
        self.mlm_head = nn.Linear(cfg.hidden, cfg.vocab_size)
        self.temperature = nn.Parameter(torch.tensor(float(tau_init)))
        self.apply(_init_weights)
        # raw Parameters are not visited by apply()
        nn.init.trunc_normal_(self.tower.txt_pos, std=0.02)
        nn.init.trunc_normal_(self.dec_pos, std=0.02)
        self.to(dtype)

    @property
    def tau(self) -> torch.Tensor:
        return self.temperature.clamp(min=TAU_MIN)

    @property
    def grid(self) -> tuple[int, int]:
        return self.tower.patch_embed.grid

    def encode_image(self, seq: PatchSequence, keep_attention=False) -> EncoderOutput:
        return self.tower.encode_image(seq, keep_attention=keep_attention)

    def encode_text(self, ids, pad_mask, keep_attention=False) -> EncoderOutput:
        return self.tower.encode_text(ids, pad_mask, keep_attention=keep_attention)

    def project_image(self, cls: torch.Tensor) -> torch.Tensor:
        return project(cls, self.tower.img_proj)

    def project_text(self, cls: torch.Tensor) -> torch.Tensor:
        return project(cls, self.tower.txt_proj)

    def encode_multimodal(
        self, text_out: EncoderOutput, image_out: EncoderOutput, keep_attention=False
    ) -> EncoderOutput:
        """Fuse: text stream self-attends, cross-attends to image hidden states."""
        if text_out.hidden.shape[-1] != image_out.hidden.shape[-1]:
            raise ValueError("text/image hidden sizes differ")
        pad_mask = text_out.pad_mask
        hidden, self_attns, cross_attns = self.mm_encoder(
            text_out.hidden,
            image_out.hidden,
            self_mask=pad_mask,
            keep_attention=keep_attention,
        )
        if pad_mask is not None:
            hidden = hidden * pad_mask.unsqueeze(-1).to(hidden.dtype)
        return EncoderOutput(
            hidden=hidden,
            pad_mask=pad_mask,
            attentions=self_attns,
            cross_attentions=cross_attns,
        )

    def decoder_logits(self, mm_out: EncoderOutput, prefix_ids: torch.Tensor) -> torch.Tensor:
        """Teacher-forced next-token logits (B, T, V) for an answer prefix."""
        if prefix_ids.ndim != 2 or prefix_ids.shape[1] == 0:
            raise ValueError("empty decoder prefix")
        if (prefix_ids[:, 0] != CLS_ID).any():
            raise ValueError("decoder prefix must begin with [CLS]")
        t = prefix_ids.shape[1]
        if t > MAX_ANSWER_LEN:
            raise ValueError(f"prefix longer than {MAX_ANSWER_LEN}")
        x = self.dec_embed(prefix_ids) + self.dec_pos[:t]
        hidden, _, _ = self.decoder(
            x, mm_out.hidden, context_mask=mm_out.pad_mask
        )
        return self.dec_head(hidden)

    def decode_answer(self, mm_out: EncoderOutput, prefix_ids: torch.Tensor) -> torch.Tensor:
        """Next-token logits (B, V) given the prefix so far."""
        return self.decoder_logits(mm_out, prefix_ids)[:, -1]

    @torch.no_grad()
    def generate_answer(self, mm_out: EncoderOutput, max_len: int = MAX_ANSWER_LEN):
        """Greedy decode token ids per batch row, stopping at [SEP] or max_len."""
        b = mm_out.hidden.shape[0]
        device = mm_out.hidden.device
        ids = torch.full((b, 1), CLS_ID, dtype=torch.long, device=device)
        done = torch.zeros(b, dtype=torch.bool, device=device)
        while ids.shape[1] < max_len and not bool(done.all()):
            logits = self.decode_answer(mm_out, ids)
            nxt = logits.argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
            ids = torch.cat([ids, nxt.unsqueeze(1)], dim=1)
            done = done | (nxt == SEP_ID)
        return ids


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=0.02)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, PatchEmbed):
        nn.init.trunc_normal_(module.cls, std=0.02)
        nn.init.trunc_normal_(module.pos, std=0.02)

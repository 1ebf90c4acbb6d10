"""Momentum shadow encoders, paired FIFO embedding queues, UCL/MCL losses."""

from __future__ import annotations

import copy

import torch
import torch.nn.functional as F

from .model import ContrastiveTower


class EmbeddingQueue:
    """Fixed-capacity ring buffer of unit-norm embedding rows."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        self.capacity = capacity
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.ptr = 0
        self.fill = 0

    def enqueue(self, vecs: torch.Tensor) -> None:
        b = vecs.shape[0]
        if b > self.capacity:
            raise ValueError(f"batch of {b} exceeds queue capacity {self.capacity}")
        vecs = vecs.detach().to(self.buffer.dtype)
        end = self.ptr + b
        if end <= self.capacity:
            self.buffer[self.ptr : end] = vecs
        else:
            first = self.capacity - self.ptr
            self.buffer[self.ptr :] = vecs[:first]
            self.buffer[: end - self.capacity] = vecs[first:]
        self.ptr = end % self.capacity
        self.fill = min(self.fill + b, self.capacity)

    def valid(self) -> torch.Tensor:
        """Entries written so far, in slot order; never receives gradient."""
        return self.buffer[: self.fill]


class MomentumBank:
    """EMA copy of the contrastive tower plus the paired image/text queues."""

    def __init__(
        self,
        tower: ContrastiveTower,
        capacity: int,
        momentum: float = 0.995,
        update_every: int = 1,
    ):
        self.tower = copy.deepcopy(tower)
        for p in self.tower.parameters():
            p.requires_grad_(False)
        self.momentum = momentum
        self.update_every = update_every
        dtype = next(tower.parameters()).dtype
        self.img_queue = EmbeddingQueue(capacity, tower.cfg.proj_dim, dtype=dtype)
        self.txt_queue = EmbeddingQueue(capacity, tower.cfg.proj_dim, dtype=dtype)


@torch.no_grad()
def momentum_update(bank: MomentumBank, online: ContrastiveTower, step: int) -> None:
    """shadow <- m * shadow + (1 - m) * online, every update_every steps."""
    if step % bank.update_every != 0:
        return
    m = bank.momentum
    shadow_params = dict(bank.tower.named_parameters())
    for name, p_online in online.named_parameters():
        p_shadow = shadow_params[name]
        if p_shadow.shape != p_online.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(p_shadow.shape)} vs {tuple(p_online.shape)}")
        p_shadow.mul_(m).add_(p_online.detach(), alpha=1.0 - m)


def enqueue(bank: MomentumBank, img_vecs: torch.Tensor, txt_vecs: torch.Tensor) -> None:
    """Insert the step's momentum projections into both queues, in lockstep."""
    if img_vecs.shape[0] != txt_vecs.shape[0]:
        raise ValueError("image/text enqueue batches must be paired")
    bank.img_queue.enqueue(img_vecs)
    bank.txt_queue.enqueue(txt_vecs)


def similarity_logits(queries: torch.Tensor, candidates: torch.Tensor, tau) -> torch.Tensor:
    """Cosine similarities (rows are unit-norm, so plain dot products) over tau."""
    tau_val = float(tau) if not torch.is_tensor(tau) else float(tau.detach())
    if tau_val <= 0:
        raise ValueError("temperature must be positive")
    return queries @ candidates.t() / tau


def contrastive_cross_entropy(
    queries: torch.Tensor,
    momentum_batch: torch.Tensor,
    queue_entries: torch.Tensor,
    tau,
) -> torch.Tensor:
    """Mean cross-entropy with candidates [momentum batch ; queue] and one-hot
    targets on the diagonal of the batch block."""
    candidates = torch.cat([momentum_batch, queue_entries.to(queries.dtype)], dim=0)
    if candidates.shape[0] == 0:
        raise ValueError("empty candidate set")
    logits = similarity_logits(queries, candidates, tau)
    targets = torch.arange(queries.shape[0], device=queries.device)
    return F.cross_entropy(logits, targets)


def ucl_loss(
    img_q: torch.Tensor,
    txt_q: torch.Tensor,
    img_k: torch.Tensor,
    txt_k: torch.Tensor,
    bank: MomentumBank,
    tau,
) -> torch.Tensor:
    """Unimodal contrast: each view against its own modality's momentum batch + queue."""
    i2i = contrastive_cross_entropy(img_q, img_k, bank.img_queue.valid(), tau)
    t2t = contrastive_cross_entropy(txt_q, txt_k, bank.txt_queue.valid(), tau)
    return 0.5 * (i2i + t2t)


def mcl_loss(
    img_q: torch.Tensor,
    txt_q: torch.Tensor,
    img_k: torch.Tensor,
    txt_k: torch.Tensor,
    bank: MomentumBank,
    tau,
) -> torch.Tensor:
    """Cross-modal contrast: image queries vs text candidates and vice versa."""
    i2t = contrastive_cross_entropy(img_q, txt_k, bank.txt_queue.valid(), tau)
    t2i = contrastive_cross_entropy(txt_q, img_k, bank.img_queue.valid(), tau)
    return 0.5 * (i2t + t2i)

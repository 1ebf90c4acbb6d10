"""WordPiece-style subword tokenization: vocab construction, encoding, MLM masking."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
MASK_TOKEN = "[MASK]"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

# words are runs of letters/digits; punctuation marks become single tokens
_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_")


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation (punctuation kept as tokens)."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Token list with dense ids; indices 0-4 are the special tokens."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:5]) != list(SPECIAL_TOKENS):
            raise ValueError("vocab must start with the five special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab contains duplicate tokens")
        self.tokens = list(tokens)
        self.id_of = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens)


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """Build a vocab: specials + every seen character (initial and "##" form) +
    most frequent whole words, capacity permitting.

    Deterministic given the corpus; frequency ties break lexicographically.
    """
    counts: Counter[str] = Counter()
    chars: set[str] = set()
    for text in corpus:
        for word in split_words(text):
            counts[word] += 1
            chars.update(word)
    if not counts:
        raise ValueError("empty corpus")
    if max_size < 5 + len(chars):
        raise ValueError(
            f"max_size {max_size} below floor {5 + len(chars)} (specials + alphabet)"
        )

    tokens = list(SPECIAL_TOKENS)
    for c in sorted(chars):
        tokens.append(c)
    for c in sorted(chars):
        tokens.append("##" + c)

    seen = set(tokens)
    for word, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if len(tokens) >= max_size:
            break
        if word not in seen:
            tokens.append(word)
            seen.add(word)
    return Vocab(tokens)


@dataclass
class TokenSequence:
    """Fixed-length token ids with a padding mask (True = real token)."""

    ids: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_real(self) -> int:
        return int(self.pad_mask.sum())


@dataclass
class MaskedTokenSequence(TokenSequence):
    """A TokenSequence with positions replaced by [MASK] and their originals kept."""

    mask_positions: np.ndarray = None
    original_ids: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        self.mask_positions = np.asarray(self.mask_positions, dtype=np.int64)
        self.original_ids = np.asarray(self.original_ids, dtype=np.int64)


def wordpiece(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-match split of one word; [UNK] when any piece fails."""
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while start < end:
            cand = word[start:end]
            if start > 0:
                cand = "##" + cand
            if cand in vocab:
                piece = cand
                break
            end -= 1
        if piece is None:
            return [UNK_TOKEN]
        pieces.append(piece)
        start = end
    return pieces


def encode(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """Tokenize to a length-max_len sequence: [CLS] pieces... [SEP] [PAD]..."""
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    pieces: list[str] = []
    for word in split_words(text):
        pieces.extend(wordpiece(word, vocab))
    pieces = pieces[: max_len - 2]

    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    for i, piece in enumerate(pieces):
        ids[1 + i] = vocab.id_of[piece]
    ids[1 + len(pieces)] = SEP_ID
    pad_mask = np.zeros(max_len, dtype=bool)
    pad_mask[: 2 + len(pieces)] = True
    return TokenSequence(ids=ids, pad_mask=pad_mask)


def maskable_positions(seq: TokenSequence) -> np.ndarray:
    """Positions eligible for MLM masking: real tokens that are not [CLS]/[SEP]."""
    eligible = seq.pad_mask & (seq.ids != CLS_ID) & (seq.ids != SEP_ID)
    return np.nonzero(eligible)[0]


def apply_mlm_mask(
    seq: TokenSequence, rng: np.random.Generator, ratio: float = 0.15
) -> MaskedTokenSequence:
    """Mask floor(ratio * maskable) positions (min 1 when any exist) with [MASK].

    Every selected position is replaced by [MASK]; originals are recorded as the
    prediction targets. [CLS]/[SEP]/[PAD] are never selected.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    candidates = maskable_positions(seq)
    if len(candidates) == 0:
        return MaskedTokenSequence(
            ids=seq.ids.copy(),
            pad_mask=seq.pad_mask.copy(),
            mask_positions=np.empty(0, dtype=np.int64),
            original_ids=np.empty(0, dtype=np.int64),
        )
    count = max(1, math.floor(ratio * len(candidates)))
    positions = np.sort(rng.choice(candidates, size=count, replace=False))
    ids = seq.ids.copy()
    originals = ids[positions].copy()
    ids[positions] = MASK_ID
    return MaskedTokenSequence(
        ids=ids,
        pad_mask=seq.pad_mask.copy(),
        mask_positions=positions,
        original_ids=originals,
    )


def decode(ids, vocab: Vocab) -> str:
    """Ids back to text: drop specials, fuse "##" pieces, space-join words."""
    words: list[str] = []
    for i in np.asarray(ids).ravel():
        i = int(i)
        if i >= len(vocab):
            raise ValueError(f"id {i} out of range for vocab of size {len(vocab)}")
        tok = vocab.tokens[i]
        if tok in SPECIAL_TOKENS:
            continue
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        elif tok.startswith("##"):
            words.append(tok[2:])
        else:
            words.append(tok)
    return " ".join(words)

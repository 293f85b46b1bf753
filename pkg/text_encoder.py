#!/usr/bin/env python3
"""
Word-level tokenizer, [MASK] substitution, and a small transformer encoder.

The encoder turns each node text into per-token hidden states; position 0
holds the [CLS] token whose row is the node vector fed to the GNN.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn


LOGGER = logging.getLogger("text_encoder")

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS: Tuple[str, ...] = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


def split_words(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    token_to_id: Dict[str, int]

    def __post_init__(self) -> None:
        for i, token in enumerate(SPECIAL_TOKENS):
            if self.token_to_id.get(token) != i:
                raise ValueError(f"special token {token} must have id {i}")
        if sorted(self.token_to_id.values()) != list(range(len(self.token_to_id))):
            raise ValueError("token ids must be dense 0..vocab_size-1")

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def lookup(self, word: str) -> int:
        return self.token_to_id.get(word, UNK)

    def save(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.token_to_id, f, indent=2, ensure_ascii=False)

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as f:
            return cls(json.load(f))


def build_vocab(corpus: Sequence[str], max_size: int) -> Vocab:
    """Keep the max_size - 5 most frequent words (ties in lexicographic order)."""
    if max_size < len(SPECIAL_TOKENS) + 1:
        raise ValueError(f"vocab too small for specials: max_size={max_size}")
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter = Counter()
    for text in corpus:
        counts.update(split_words(text))
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    token_to_id = {token: i for i, token in enumerate(SPECIAL_TOKENS)}
    for word, _ in ranked[: max_size - len(SPECIAL_TOKENS)]:
        token_to_id[word] = len(token_to_id)
    LOGGER.debug("Vocabulary: %s of %s distinct words kept", len(token_to_id) - len(SPECIAL_TOKENS), len(counts))
    return Vocab(token_to_id)


@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]

    @property
    def n_v(self) -> int:
        return len(self.ids) - 2


@dataclass(frozen=True)
class MaskedSequence:
    ids: Tuple[int, ...]
    mask_flags: Tuple[bool, ...]

    @property
    def n_v(self) -> int:
        return len(self.ids) - 2

    @property
    def masked_count(self) -> int:
        return sum(self.mask_flags)


Sequenceish = Union[TokenSequence, MaskedSequence]


def tokenize(vocab: Vocab, text: str, max_len: int) -> TokenSequence:
    """[CLS] + first max_len - 2 words + [SEP]; unknown words map to [UNK]."""
    words = split_words(text)[: max(max_len - 2, 0)]
    return TokenSequence((CLS, *(vocab.lookup(w) for w in words), SEP))


def mask_tokens(seq: TokenSequence, p: float, rng: np.random.Generator) -> MaskedSequence:
    """Replace each content token by [MASK] independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mask probability must be in [0, 1], got {p}")
    flags = np.zeros(len(seq.ids), dtype=bool)
    flags[1:-1] = rng.random(seq.n_v) < p
    ids = tuple(MASK if flag else token for token, flag in zip(seq.ids, flags.tolist()))
    return MaskedSequence(ids, tuple(flags.tolist()))


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    d: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_len: int = 32
    dropout: float = 0.2

    def __post_init__(self) -> None:
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        if self.vocab_size <= len(SPECIAL_TOKENS):
            raise ValueError("vocab_size must exceed the number of special tokens")


def pad_batch(batch: Sequence[Sequenceish], device=None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Right-pad with [PAD]; returns (ids, pad_mask) where pad_mask is True at padding."""
    length = max(len(seq.ids) for seq in batch)
    ids = torch.full((len(batch), length), PAD, dtype=torch.long, device=device)
    for i, seq in enumerate(batch):
        ids[i, : len(seq.ids)] = torch.tensor(seq.ids, dtype=torch.long)
    return ids, ids.eq(PAD)


def init_uniform_(module: nn.Module) -> None:
    """Symmetric uniform init with bound 1/sqrt(fan_in) for every weight matrix.

    Biases keep the Linear default (also uniform in +-1/sqrt(fan_in)); LayerNorm stays at identity.
    """
    for param in module.parameters():
        if param.dim() < 2:
            continue
        bound = 1.0 / math.sqrt(param.shape[1])
        with torch.no_grad():
            param.uniform_(-bound, bound)


class TextEncoder(nn.Module):
    """Pre-norm transformer encoder over token ids with learned positions."""

    def __init__(self, config: LmConfig):
        super().__init__()
        self.config = config
        self.token_embeddings = nn.Embedding(config.vocab_size, config.d, padding_idx=PAD)
        self.position_embeddings = nn.Embedding(config.max_len, config.d)
        layer = nn.TransformerEncoderLayer(
            d_model=config.d,
            nhead=config.num_heads,
            dim_feedforward=4 * config.d,
            dropout=config.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=config.num_layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(config.d)
        self.dropout = nn.Dropout(config.dropout)
        init_uniform_(self)
        with torch.no_grad():
            self.token_embeddings.weight[PAD].zero_()

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        if ids.shape[1] > self.config.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len={self.config.max_len}")
        positions = torch.arange(ids.shape[1], device=ids.device)
        hidden = self.token_embeddings(ids) + self.position_embeddings(positions)[None]
        hidden = self.encoder(self.dropout(hidden), src_key_padding_mask=pad_mask)
        return self.norm(hidden)


@dataclass
class LmOutput:
    hidden: torch.Tensor
    pad_mask: torch.Tensor
    cls: torch.Tensor

    def per_node(self) -> List[torch.Tensor]:
        lengths = (~self.pad_mask).sum(dim=1).tolist()
        return [self.hidden[i, :n] for i, n in enumerate(lengths)]


def lm_forward(encoder: TextEncoder, batch: Sequence[Sequenceish]) -> LmOutput:
    """Encode a batch; hidden is B x L x d (padding rows included), cls is B x d."""
    if not batch:
        raise ValueError("empty batch")
    too_long = [len(seq.ids) for seq in batch if len(seq.ids) > encoder.config.max_len]
    if too_long:
        raise ValueError(f"sequence length {max(too_long)} exceeds max_len={encoder.config.max_len}")
    device = encoder.token_embeddings.weight.device
    ids, pad_mask = pad_batch(batch, device=device)
    hidden = encoder(ids, pad_mask)
    return LmOutput(hidden=hidden, pad_mask=pad_mask, cls=hidden[:, 0])

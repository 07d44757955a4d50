"""Byte-level corpus loading, contiguous train/validation split, batch sampling."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

VOCAB_SIZE = 256


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Batch:
    inputs: torch.Tensor   # (batch, time) int64
    targets: torch.Tensor  # inputs shifted left by one token


@dataclass(frozen=True)
class Corpus:
    tokens: np.ndarray
    source: str
    split: int  # tokens[:split] train, tokens[split:] validation

    @property
    def train(self) -> np.ndarray:
        return self.tokens[: self.split]

    @property
    def validation(self) -> np.ndarray:
        return self.tokens[self.split:]

    def metadata(self) -> dict:
        return {
            "source": self.source,
            "n_tokens": int(len(self.tokens)),
            "train_range": [0, int(self.split)],
            "validation_range": [int(self.split), int(len(self.tokens))],
            "sha256": hashlib.sha256(self.tokens.tobytes()).hexdigest(),
        }


def corpus_from_bytes(raw: bytes, val_fraction: float, source: str = "<memory>",
                      min_length: int = 2) -> Corpus:
    if not 0.0 <= val_fraction < 1.0:
        raise DataError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    if len(raw) < min_length:
        raise DataError(f"corpus has {len(raw)} tokens, need at least {min_length}")
    tokens = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    n_val = int(round(len(tokens) * val_fraction))
    return Corpus(tokens, source, len(tokens) - n_val)


def load_corpus(path: str | Path, val_fraction: float = 0.1,
                context_length: int = 1) -> Corpus:
    """Map file bytes straight to token ids; the last ``val_fraction`` is validation."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus file not found: {path}")
    return corpus_from_bytes(path.read_bytes(), val_fraction, str(path),
                             min_length=context_length + 1)


def write_split_sidecar(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(json.dumps(corpus.metadata(), indent=2) + "\n")


def _windows(tokens: np.ndarray, starts: np.ndarray, context_length: int) -> Batch:
    idx = starts[:, None] + np.arange(context_length + 1)[None, :]
    w = torch.from_numpy(tokens[idx])
    return Batch(w[:, :-1].contiguous(), w[:, 1:].contiguous())


def sample_batch(corpus: Corpus, batch_size: int, context_length: int,
                 rng: np.random.Generator) -> Batch:
    """``batch_size`` windows with independent uniform starts inside the train range."""
    n_starts = corpus.split - context_length
    if n_starts < 1:
        raise DataError(
            f"training range has {corpus.split} tokens, need more than {context_length}"
        )
    starts = rng.integers(0, n_starts, size=batch_size)
    return _windows(corpus.tokens, starts, context_length)


def validation_batches(corpus: Corpus, batch_size: int, context_length: int,
                       max_batches: int | None = None) -> Iterator[Batch]:
    """Non-overlapping contiguous windows over the validation range."""
    val = corpus.validation
    starts = np.arange(0, len(val) - context_length, context_length)
    if len(starts) == 0:
        raise DataError("validation split is shorter than one context window")
    for n, i in enumerate(range(0, len(starts), batch_size)):
        if max_batches is not None and n >= max_batches:
            return
        yield _windows(val, starts[i:i + batch_size], context_length)

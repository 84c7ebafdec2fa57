"""Whitespace-tokenised sentence corpora: vocabulary, fixed-length rows, batches.

One sentence per line. Ids 0, 1, 2 are reserved for padding, unknown words
and end-of-sentence; the remaining ids go to the most frequent tokens with
ties broken lexicographically.
"""

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import IngestionError

log = logging.getLogger(__name__)

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
PAD_ID, UNK_ID, EOS_ID = 0, 1, 2
RESERVED = (PAD, UNK, EOS)
SEQUENCE_LENGTH = 35
BATCH_SIZE = 32


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            raise IngestionError(f"vocabulary must start with {RESERVED}, got {tokens[:3]}")
        if len(set(tokens)) != len(tokens):
            raise IngestionError("vocabulary contains duplicate tokens")
        self.itos = tokens
        self.stoi = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token):
        return self.stoi.get(token, UNK_ID)

    def encode(self, words):
        return [self.stoi.get(w, UNK_ID) for w in words]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def to_text(self):
        return "".join(tok + "\n" for tok in self.itos)

    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh)


def build_vocab(lines, cap):
    """Keep the ``cap - 3`` most frequent tokens (ties: lexicographic)."""
    if cap < len(RESERVED) + 1:
        raise ValueError(f"vocabulary cap must be at least {len(RESERVED) + 1}, got {cap}")
    counts = Counter()
    for line in lines:
        counts.update(line.split())
    for tok in RESERVED:
        counts.pop(tok, None)
    if not counts:
        raise IngestionError("corpus contains no tokens")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: cap - len(RESERVED)]]
    return Vocabulary(list(RESERVED) + keep)


def pad_truncate(ids, length=SEQUENCE_LENGTH, append_eos=True):
    """Return ``(row, mask)`` of exactly ``length`` entries.

    Sentences longer than ``length`` are cut. Shorter ones get an
    end-of-sentence id (unless ``append_eos`` is off) and are then padded.
    """
    if length < 1:
        raise ValueError("length must be at least 1")
    ids = list(ids)[:length]
    if append_eos and len(ids) < length:
        ids.append(EOS_ID)
    real = len(ids)
    row = np.full(length, PAD_ID, dtype=np.int64)
    row[:real] = ids
    mask = np.zeros(length, dtype=bool)
    mask[:real] = True
    return row, mask


@dataclass
class EncodedCorpus:
    tokens: np.ndarray  # (rows, length)
    mask: np.ndarray
    skipped: int = 0

    def __len__(self):
        return len(self.tokens)


def encode_lines(lines, vocab, length=SEQUENCE_LENGTH, append_eos=True):
    rows, masks, skipped = [], [], 0
    for line in lines:
        words = line.split()
        if not words:
            skipped += 1
            continue
        row, mask = pad_truncate(vocab.encode(words), length, append_eos)
        rows.append(row)
        masks.append(mask)
    if skipped:
        log.warning("skipped %d empty sentence(s)", skipped)
    if not rows:
        return EncodedCorpus(np.zeros((0, length), dtype=np.int64), np.zeros((0, length), dtype=bool), skipped)
    return EncodedCorpus(np.stack(rows), np.stack(masks), skipped)


def read_lines(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read corpus {path}: {exc}") from None


@dataclass
class EncodedBatch:
    tokens: np.ndarray
    loss_mask: np.ndarray

    @property
    def size(self):
        return len(self.tokens)


def batches(corpus, batch_size=BATCH_SIZE, train=True):
    """Consecutive, non-overlapping groups of rows in corpus order.

    A trailing group smaller than ``batch_size`` is dropped when ``train``
    is set and emitted as a smaller batch otherwise.
    """
    n = len(corpus)
    stop = n - n % batch_size if train else n
    for lo in range(0, stop, batch_size):
        hi = min(lo + batch_size, n)
        yield EncodedBatch(corpus.tokens[lo:hi], corpus.mask[lo:hi])


def load_corpus(path, vocab, length=SEQUENCE_LENGTH, append_eos=True):
    return encode_lines(read_lines(path), vocab, length, append_eos)

"""Small generated corpora for sanity and long-dependency experiments."""

import numpy as np

from .corpus import RESERVED, Vocabulary


def memorization_corpus(sentences=100, words=100, min_len=5, max_len=12, seed=0):
    """Random sentences over ``words`` word types, one per line."""
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(sentences):
        n = int(rng.integers(min_len, max_len + 1))
        lines.append(" ".join(f"w{k}" for k in rng.integers(0, words, n)))
    return lines


KEYS = 10
LDD_LENGTH = 35
KEY_POSITION = 1  # 1-based
RECALL_POSITION = 30


def ldd_vocabulary():
    """Exactly 50 ids: reserved, ten keys, a query marker, 36 fillers."""
    fillers = 50 - len(RESERVED) - KEYS - 1
    return Vocabulary(list(RESERVED) + [f"k{i}" for i in range(KEYS)] + ["q"] + [f"f{i}" for i in range(fillers)])


def ldd_corpus(sentences, seed=0):
    """Sequences of 35 tokens where the first token reappears at position 30.

    Position 29 holds a query marker, every other position a uniformly random
    filler, so the recall at position 30 can only come from remembering the
    key seen 29 steps earlier.
    """
    rng = np.random.default_rng(seed)
    fillers = 50 - len(RESERVED) - KEYS - 1
    lines = []
    for _ in range(sentences):
        key = f"k{int(rng.integers(KEYS))}"
        fill = [f"f{k}" for k in rng.integers(0, fillers, LDD_LENGTH)]
        seq = fill[:]
        seq[KEY_POSITION - 1] = key
        seq[RECALL_POSITION - 2] = "q"
        seq[RECALL_POSITION - 1] = key
        lines.append(" ".join(seq))
    return lines

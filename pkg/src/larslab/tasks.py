"""Synthetic classification tasks read out at the final position.

Token layout (both tasks): ids ``0..C-1`` are readout tokens whose logits act
as the class scores, the next ``C`` ids are the class-bearing tokens, and the
remainder is filler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TASK_KINDS = ("seqclass", "niah_toy")


@dataclass
class Task:
    kind: str
    tokens: np.ndarray        # [N, S] int64
    labels: np.ndarray        # [N] int64
    label_tokens: np.ndarray  # [C] readout token ids
    seed: int

    @property
    def num_classes(self) -> int:
        return len(self.label_tokens)

    @property
    def S(self) -> int:
        return self.tokens.shape[1]

    @property
    def chance(self) -> float:
        return 1.0 / self.num_classes

    def __len__(self) -> int:
        return len(self.labels)


def _layout(vocab: int, n_classes: int, reserved: int = 0):
    filler_lo = 2 * n_classes + reserved
    if filler_lo >= vocab:
        raise ValueError(f"vocab={vocab} too small for {n_classes} classes")
    return np.arange(n_classes), np.arange(n_classes, 2 * n_classes), filler_lo


def make_seqclass(S: int = 64, num_classes: int = 4, num_examples: int = 256, vocab: int = 64,
                  position: int | str = "last", seed: int = 0) -> Task:
    """Filler sequences with one class token planted at ``position``."""
    rng = np.random.default_rng(seed)
    readout, planted, filler_lo = _layout(vocab, num_classes)
    pos = S - 1 if position == "last" else int(position)
    if not 0 <= pos < S:
        raise ValueError(f"plant position {pos} outside [0, {S})")
    tokens = rng.integers(filler_lo, vocab, size=(num_examples, S))
    labels = rng.integers(0, num_classes, size=num_examples)
    tokens[:, pos] = planted[labels]
    return Task("seqclass", tokens, labels, readout, seed)


def make_niah_toy(S: int = 64, num_passkeys: int = 8, num_examples: int = 256, vocab: int = 64,
                  seed: int = 0) -> Task:
    """One passkey token at a random position, a fixed query token at the end."""
    if S < 2:
        raise ValueError("niah_toy needs S >= 2")
    rng = np.random.default_rng(seed)
    readout, passkeys, filler_lo = _layout(vocab, num_passkeys, reserved=1)
    query = filler_lo - 1
    tokens = rng.integers(filler_lo, vocab, size=(num_examples, S))
    labels = rng.integers(0, num_passkeys, size=num_examples)
    where = rng.integers(0, S - 1, size=num_examples)
    tokens[np.arange(num_examples), where] = passkeys[labels]
    tokens[:, -1] = query
    return Task("niah_toy", tokens, labels, readout, seed)


def make_task(kind: str, **params) -> Task:
    if kind == "seqclass":
        return make_seqclass(**params)
    if kind == "niah_toy":
        return make_niah_toy(**params)
    raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")

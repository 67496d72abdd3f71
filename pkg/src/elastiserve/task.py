"""Synthetic key-value lookup task used for training, calibration and QA."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD, BOS, QUERY, EOS = 0, 1, 2, 3
N_SPECIAL = 4


@dataclass(frozen=True)
class TaskVocab:
    """Token layout: specials, keys, values, fillers.

    Every key owns a family of ``n_alts`` value tokens; a pair binds a key to
    one member of its family, so the lookup is resolved by matching the query
    key against the value tokens present in the prompt.
    """

    n_keys: int = 24
    n_alts: int = 4
    n_fillers: int = 12

    @property
    def n_values(self) -> int:
        return self.n_keys * self.n_alts

    def value_token(self, key_index: int, alt: int) -> int:
        return self.value_start + key_index * self.n_alts + alt

    @property
    def key_start(self) -> int:
        return N_SPECIAL

    @property
    def value_start(self) -> int:
        return N_SPECIAL + self.n_keys

    @property
    def filler_start(self) -> int:
        return self.value_start + self.n_values

    @property
    def size(self) -> int:
        return self.filler_start + self.n_fillers

    @property
    def protected(self) -> frozenset[int]:
        """Structural tokens that compression never drops."""
        return frozenset({BOS, QUERY})

    def kind(self, tok: int) -> str:
        if tok < N_SPECIAL:
            return "special"
        if tok < self.value_start:
            return "key"
        if tok < self.filler_start:
            return "value"
        return "filler"

    def kinds(self, tokens) -> np.ndarray:
        t = np.asarray(tokens)
        out = np.full(t.shape, 3, dtype=np.int64)  # filler
        out[t < self.filler_start] = 2  # value
        out[t < self.value_start] = 1  # key
        out[t < N_SPECIAL] = 0  # special
        return out


@dataclass(frozen=True)
class Task:
    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    retain: tuple[bool, ...]

    @property
    def target(self) -> tuple[int, ...]:
        return self.answer + (EOS,)


def gen_task(seed, n_pairs: int, distractor_len: int, vocab: TaskVocab = TaskVocab()) -> Task:
    """One lookup prompt: ``BOS (fill* key value)+ fill* QUERY key``.

    Each gap before a pair gets a random number of filler tokens in
    ``[0, distractor_len]``.  The answer is the value bound to the queried key.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if n_pairs > vocab.n_keys:
        raise ValueError("n_pairs exceeds the number of distinct keys")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(vocab.n_keys, size=n_pairs, replace=False)
    keys = vocab.key_start + idx
    values = vocab.value_start + idx * vocab.n_alts + rng.integers(0, vocab.n_alts, size=n_pairs)
    q = int(rng.integers(0, n_pairs))
    prompt, retain = [BOS], [True]
    for i in range(n_pairs):
        gap = int(rng.integers(0, distractor_len + 1)) if distractor_len > 0 else 0
        prompt.extend(int(x) for x in vocab.filler_start + rng.integers(0, vocab.n_fillers, size=gap))
        retain.extend([False] * gap)
        prompt.extend([int(keys[i]), int(values[i])])
        retain.extend([i == q, i == q])
    gap = int(rng.integers(0, distractor_len + 1)) if distractor_len > 0 else 0
    prompt.extend(int(x) for x in vocab.filler_start + rng.integers(0, vocab.n_fillers, size=gap))
    retain.extend([False] * gap)
    prompt.extend([QUERY, int(keys[q])])
    retain.extend([True, True])
    return Task(tuple(prompt), (int(values[q]),), tuple(retain))


@dataclass(frozen=True)
class TaskMix:
    """Distribution over task shapes."""

    min_pairs: int = 2
    max_pairs: int = 8
    max_distractor: int = 4

    def sample(self, rng: np.random.Generator, vocab: TaskVocab = TaskVocab()) -> Task:
        n = int(rng.integers(self.min_pairs, self.max_pairs + 1))
        d = int(rng.integers(0, self.max_distractor + 1))
        return gen_task(rng, n, d, vocab)

    @property
    def max_len(self) -> int:
        return 1 + self.max_pairs * (2 + self.max_distractor) + self.max_distractor + 2 + 2


def drop_tokens(task: Task, rng: np.random.Generator, p: float, vocab: TaskVocab = TaskVocab()) -> Task:
    """Randomly delete non-retained tokens; mimics compressed prompts."""
    keep = [r or tok in vocab.protected or rng.random() >= p for tok, r in zip(task.prompt, task.retain)]
    prompt = tuple(t for t, k in zip(task.prompt, keep) if k)
    retain = tuple(r for r, k in zip(task.retain, keep) if k)
    return Task(prompt, task.answer, retain)


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def make_batch(tasks) -> Batch:
    """Next-token batch; the loss covers the answer span and its EOS."""
    seqs = [t.prompt + t.target for t in tasks]
    width = max(len(s) for s in seqs) - 1
    tokens = np.full((len(seqs), width), PAD, dtype=np.int64)
    targets = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, (s, t) in enumerate(zip(seqs, tasks)):
        n = len(s) - 1
        tokens[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        start = len(t.prompt) - 1
        mask[i, start:n] = True
    return Batch(tokens, targets, mask)


def sample_batches(seed: int, n_batches: int, batch_size: int, mix: TaskMix = TaskMix(),
                   vocab: TaskVocab = TaskVocab(), drop_p: float = 0.0,
                   drop_frac: float = 0.0) -> list[Batch]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_batches):
        tasks = []
        for _ in range(batch_size):
            t = mix.sample(rng, vocab)
            if drop_frac and rng.random() < drop_frac:
                t = drop_tokens(t, rng, drop_p, vocab)
            tasks.append(t)
        out.append(make_batch(tasks))
    return out

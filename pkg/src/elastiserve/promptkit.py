"""Token scoring and prompt compression."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .task import QUERY, TaskVocab


class UniformScorer:
    kind = "uniform"

    def __init__(self, value: float = 0.5):
        self.value = float(value)

    def score(self, prompt) -> np.ndarray:
        return np.full(len(prompt), self.value)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}


class HeuristicScorer:
    """Structure-aware baseline: specials > keys/values > fillers."""

    kind = "heuristic"
    BY_KIND = (1.0, 0.6, 0.5, 0.1)

    def __init__(self, vocab: TaskVocab = TaskVocab()):
        self.vocab = vocab

    def score(self, prompt) -> np.ndarray:
        return np.array(self.BY_KIND)[self.vocab.kinds(prompt)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "vocab": _vocab_dict(self.vocab)}


def _vocab_dict(v: TaskVocab) -> dict:
    return {"n_keys": v.n_keys, "n_alts": v.n_alts, "n_fillers": v.n_fillers}


def token_features(prompt, vocab: TaskVocab) -> np.ndarray:
    """Per-token features: token kind crossed with repetition of the token
    and its neighbours, plus relative position."""
    p = np.asarray(prompt)
    n = len(p)
    kinds = np.eye(4)[vocab.kinds(p)]
    _, inverse, counts = np.unique(p, return_inverse=True, return_counts=True)
    dup = (counts[inverse] > 1).astype(float)
    prev = np.concatenate([[0.0], dup[:-1]])
    nxt = np.concatenate([dup[1:], [0.0]])
    after_q = np.concatenate([[0.0], (p[:-1] == QUERY).astype(float)])
    ctx = np.stack([np.ones(n), dup, prev, nxt, after_q], axis=1)
    crossed = (kinds[:, :, None] * ctx[:, None, :]).reshape(n, -1)
    pos = np.arange(n) / max(1, n - 1)
    return np.concatenate([crossed, pos[:, None], (np.arange(n) >= n - 2)[:, None].astype(float)], axis=1)


@dataclass
class LearnedScorer:
    """Logistic retain/discard classifier over :func:`token_features`."""

    vocab: TaskVocab = field(default_factory=TaskVocab)
    coef: np.ndarray | None = None
    intercept: float = 0.0
    train_accuracy: float = float("nan")
    kind = "learned"

    def fit(self, tasks, C: float = 1.0, seed: int = 0) -> "LearnedScorer":
        from sklearn.linear_model import LogisticRegression

        X = np.concatenate([token_features(t.prompt, self.vocab) for t in tasks])
        y = np.concatenate([np.asarray(t.retain, dtype=int) for t in tasks])
        clf = LogisticRegression(C=C, max_iter=2000, random_state=seed)
        clf.fit(X, y)
        self.coef = clf.coef_[0].astype(np.float64)
        self.intercept = float(clf.intercept_[0])
        self.train_accuracy = float(clf.score(X, y))
        return self

    def score(self, prompt) -> np.ndarray:
        if self.coef is None:
            raise RuntimeError("scorer is not trained")
        return expit(token_features(prompt, self.vocab) @ self.coef + self.intercept)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "vocab": _vocab_dict(self.vocab),
            "coef": self.coef.tolist(),
            "intercept": self.intercept,
            "train_accuracy": self.train_accuracy,
        }


def scorer_from_dict(d: dict):
    kind = d["kind"]
    if kind == "uniform":
        return UniformScorer(d["value"])
    vocab = TaskVocab(**d["vocab"])
    if kind == "heuristic":
        return HeuristicScorer(vocab)
    if kind == "learned":
        return LearnedScorer(vocab, np.asarray(d["coef"], dtype=np.float64), d["intercept"], d.get("train_accuracy", float("nan")))
    raise ValueError(f"unknown scorer kind {kind!r}")


def score_tokens(scorer, prompt) -> np.ndarray:
    return np.asarray(scorer.score(prompt), dtype=np.float64)


def target_length(n: int, level: float) -> int:
    if not 0 < level <= 1:
        raise ValueError("prompt level must lie in (0, 1]")
    return max(1, math.floor(level * n + 1e-9))


def select_positions(prompt, scores, level: float, protected=frozenset()) -> list[int]:
    """Positions kept at ``level``: protected tokens first, then by score
    (descending), earlier position winning ties; returned in prompt order."""
    n = len(prompt)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != n:
        raise ValueError("scores and prompt differ in length")
    k = target_length(n, level)
    if k >= n:
        return list(range(n))
    forced = [i for i, t in enumerate(prompt) if t in protected]
    rest = [i for i in range(n) if prompt[i] not in protected]
    rest.sort(key=lambda i: (-scores[i], i))
    chosen = set(forced) | set(rest[: max(0, k - len(forced))])
    return sorted(chosen)


def compress(prompt, scores, level: float, protected=frozenset()) -> list[int]:
    return [prompt[i] for i in select_positions(prompt, scores, level, protected)]

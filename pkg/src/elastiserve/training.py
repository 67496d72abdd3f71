"""Adam, the masked next-token loss, and the toy-model trainer."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ModelConfig, Params, TransformerLM, Widths, greedy_generate, init_params, run
from .task import EOS, Batch, TaskMix, TaskVocab, sample_batches

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.0, clip=1.0):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.clip = weight_decay, clip
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr=None):
        """In-place update of ``arrays``."""
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        if self.clip:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if not math.isfinite(norm):
                raise TrainingError("non-finite gradient norm")
            if norm > self.clip:
                grads = {k: g * (self.clip / norm) for k, g in grads.items()}
        for name, g in grads.items():
            w = arrays[name]
            m = self.m.setdefault(name, np.zeros_like(w))
            v = self.v.setdefault(name, np.zeros_like(w))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            upd = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and w.ndim == 2:
                upd = upd + self.weight_decay * w
            w -= (lr * upd).astype(w.dtype)


def batch_loss(cfg: ModelConfig, params: Params, batch: Batch, widths: Widths | None = None,
               adapters=None, skip_layers=()):
    logits = run(cfg, params, batch.tokens, widths, adapters, skip_layers=skip_layers)
    return T.cross_entropy(logits, batch.targets, batch.mask)


def mean_loss(cfg: ModelConfig, params: Params, batches, widths=None, adapters=None,
              skip_layers=()) -> float:
    """Token-weighted mean loss over ``batches`` (no gradients)."""
    total, n = 0.0, 0
    for b in batches:
        total += float(batch_loss(cfg, params, b, widths, adapters, skip_layers)) * b.n_tokens
        n += b.n_tokens
    return total / n


def watch_params(tape: T.GradTape, params: Params) -> Params:
    return params.map(lambda name, a: tape.watch(name, a))


def cosine_lr(step: int, total: int, base: float, warmup: int) -> float:
    if step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return base * 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))


@dataclass
class ToyTrainResult:
    model: TransformerLM
    losses: list[float]


def toy_config(vocab: TaskVocab = TaskVocab(), **overrides) -> ModelConfig:
    """Default serving toy: 2 layers, 4 heads of 32, gated MLP of 256."""
    kw = dict(n_layers=2, n_heads=4, head_dim=32, d_ff=256, vocab_size=vocab.size)
    kw.update(overrides)
    return ModelConfig(**kw)


def train_toy(cfg: ModelConfig, steps: int = 600, batch_size: int = 32, lr: float = 3e-3,
              seed: int = 0, mix: TaskMix = TaskMix(), vocab: TaskVocab = TaskVocab(),
              drop_p: float = 0.3, drop_frac: float = 0.3, log_every: int = 100) -> ToyTrainResult:
    """Fit the toy transformer on the lookup task from scratch."""
    params = init_params(cfg)
    named = dict(params.named())
    opt = Adam(lr=lr, weight_decay=0.01)
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(steps):
        (batch,) = sample_batches(int(rng.integers(2**31)), 1, batch_size, mix, vocab, drop_p, drop_frac)
        tape = T.GradTape()
        loss = batch_loss(cfg, watch_params(tape, params), batch)
        grads = tape.gradients(loss)
        opt.step(named, grads, lr=cosine_lr(step, steps, lr, warmup=min(100, steps // 10 + 1)))
        lv = float(T.value(loss))
        if not math.isfinite(lv):
            raise TrainingError(f"loss diverged at step {step}")
        losses.append(lv)
        if log_every and step % log_every == 0:
            log.info("train-toy step %d loss %.4f", step, lv)
    return ToyTrainResult(TransformerLM(cfg, params), losses)


def answer_accuracy(model: TransformerLM, tasks, view=None, max_new_tokens: int = 3) -> float:
    hits = 0
    for t in tasks:
        out = greedy_generate(model, t.prompt, max_new_tokens, view, stop_token=EOS)
        hits += tuple(out) == t.target
    return hits / max(1, len(tasks))

"""Toy decoder-only transformer whose widths can be narrowed per layer.

Weights that carry permutation-consistent units are stored *unit-major*: the
unit axis is the leading (row) axis of every such tensor, so a sub-model is a
leading row slice ``w[:k]`` of each one.

==========  ==================  ========================================
name        shape               role
==========  ==================  ========================================
wq, wk, wv  (H*hd, d)           projection, ``y = x @ w.T`` (out, in)
bq, bk, bv  (H*hd,)             optional biases, move with their head
wo          (H*hd, d)           output projection, ``y = o @ wo`` (in, out)
w_up        (F, d)              up projection, ``y = x @ w.T``
w_gate      (F, d)              gated MLP only
b_up/b_gate (F,)                optional biases, move with their neuron
w_down      (F, d)              down projection, ``y = a @ w_down``
==========  ==================  ========================================
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T

ATTENTION_HEAD = "attention_head"
MLP_NEURON = "mlp_neuron"

HEAD_ROW_TENSORS = ("wq", "wk", "wv", "wo")
HEAD_BIAS_TENSORS = ("bq", "bk", "bv")
NEURON_ROW_TENSORS = ("w_up", "w_gate", "w_down")
NEURON_BIAS_TENSORS = ("b_up", "b_gate")
# matrices that receive low-rank adapters
ADAPTED = ("wq", "wk", "wv", "wo", "w_up", "w_down")


class InputError(ValueError):
    pass


class CacheConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int
    mlp_kind: str = "gated"
    use_rope: bool = True
    bias: bool = False
    seed: int = 0
    max_seq_len: int = 256
    rope_base: float = 10000.0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mlp_kind not in ("plain", "gated"):
            raise ValueError(f"unknown mlp_kind {self.mlp_kind!r}")
        if self.use_rope and self.head_dim % 2:
            raise ValueError("RoPE needs an even head_dim")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def d_model(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})


class UnitId(NamedTuple):
    layer: int
    kind: str
    index: int

    def __str__(self):
        short = "head" if self.kind == ATTENTION_HEAD else "neuron"
        return f"L{self.layer}.{short}{self.index}"


def enumerate_units(config: ModelConfig) -> list[UnitId]:
    units = []
    for layer in range(config.n_layers):
        units.extend(UnitId(layer, ATTENTION_HEAD, h) for h in range(config.n_heads))
        units.extend(UnitId(layer, MLP_NEURON, j) for j in range(config.d_ff))
    return units


@dataclass(frozen=True)
class Widths:
    """Active attention heads and MLP neurons per layer."""

    heads: tuple[int, ...]
    neurons: tuple[int, ...]

    @classmethod
    def full(cls, config: ModelConfig) -> "Widths":
        return cls((config.n_heads,) * config.n_layers, (config.d_ff,) * config.n_layers)


@dataclass(frozen=True)
class DenseView:
    """Width selection without adapters; ``key`` identifies it for KV caches."""

    widths: Widths
    adapters: tuple | None = None
    key: object = "dense"


@dataclass
class Params:
    embed: object
    final_norm: object
    lm_head: object
    layers: list[dict] = field(default_factory=list)

    def named(self) -> Iterator[tuple[str, object]]:
        yield "embed", self.embed
        yield "final_norm", self.final_norm
        yield "lm_head", self.lm_head
        for i, layer in enumerate(self.layers):
            for k in sorted(layer):
                yield f"layers.{i}.{k}", layer[k]

    def map(self, fn) -> "Params":
        return Params(
            fn("embed", self.embed),
            fn("final_norm", self.final_norm),
            fn("lm_head", self.lm_head),
            [{k: fn(f"layers.{i}.{k}", v) for k, v in layer.items()} for i, layer in enumerate(self.layers)],
        )

    def copy(self) -> "Params":
        return self.map(lambda _, a: np.array(a, copy=True))

    @classmethod
    def from_named(cls, named: dict) -> "Params":
        n_layers = 1 + max((int(k.split(".")[1]) for k in named if k.startswith("layers.")), default=-1)
        layers = [dict() for _ in range(n_layers)]
        for k, v in named.items():
            if k.startswith("layers."):
                _, i, short = k.split(".", 2)
                layers[int(i)][short] = v
        return cls(named["embed"], named["final_norm"], named["lm_head"], layers)

    def widths(self, config: ModelConfig) -> Widths:
        return Widths(
            tuple(T.value(l["wq"]).shape[0] // config.head_dim for l in self.layers),
            tuple(T.value(l["w_up"]).shape[0] for l in self.layers),
        )

    def n_params(self) -> int:
        return sum(int(np.size(T.value(a))) for _, a in self.named())


def init_params(config: ModelConfig) -> Params:
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    d, F, A = config.d_model, config.d_ff, config.d_model
    out_scale = 1.0 / math.sqrt(2 * config.n_layers)

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(dt)

    layers = []
    for _ in range(config.n_layers):
        l = {
            "attn_norm": np.ones(d, dt),
            "wq": normal((A, d), 1 / math.sqrt(d)),
            "wk": normal((A, d), 1 / math.sqrt(d)),
            "wv": normal((A, d), 1 / math.sqrt(d)),
            "wo": normal((A, d), out_scale / math.sqrt(A)),
            "mlp_norm": np.ones(d, dt),
            "w_up": normal((F, d), 1 / math.sqrt(d)),
            "w_down": normal((F, d), out_scale / math.sqrt(F)),
        }
        if config.mlp_kind == "gated":
            l["w_gate"] = normal((F, d), 1 / math.sqrt(d))
        if config.bias:
            for b in HEAD_BIAS_TENSORS:
                l[b] = normal((A,), 0.02)
            l["bo"] = normal((d,), 0.02)
            l["b_up"] = normal((F,), 0.02)
            if config.mlp_kind == "gated":
                l["b_gate"] = normal((F,), 0.02)
            l["b_down"] = normal((d,), 0.02)
        layers.append(l)
    return Params(
        embed=normal((config.vocab_size, d), 0.5),
        final_norm=np.ones(d, dt),
        lm_head=normal((config.vocab_size, d), 1 / math.sqrt(d)),
        layers=layers,
    )


@dataclass
class TransformerLM:
    config: ModelConfig
    params: Params

    @classmethod
    def create(cls, config: ModelConfig) -> "TransformerLM":
        return cls(config, init_params(config))

    def full_view(self) -> DenseView:
        return DenseView(self.params.widths(self.config))


@dataclass
class KvCache:
    keys: list
    values: list
    length: int
    view_key: object

    @property
    def capacity(self) -> int:
        return self.keys[0].shape[1] if self.keys else 0

    def heads(self) -> list[int]:
        return [k.shape[0] for k in self.keys]


# --- forward -----------------------------------------------------------------

def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype):
    half = head_dim // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = positions[:, None].astype(np.float64) * inv[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rows(w, k):
    if T.value(w).shape[0] == k:
        return w
    return T.value(w)[:k] if not isinstance(w, T.Var) else T.getitem(w, slice(0, k))


def _lora(x, adapter):
    a, b = adapter
    return T.matmul(T.matmul(x, a), b)


def attention_block(cfg: ModelConfig, lp: dict, x, heads: int, adapters=None,
                    start: int = 0, cache: KvCache | None = None, layer: int = 0):
    """Attention sub-block output (without the residual add)."""
    B, S = T.value(x).shape[:2]
    hd = cfg.head_dim
    width = heads * hd
    h = T.rmsnorm(x, lp["attn_norm"])

    def proj(name, bias):
        y = T.linear(h, _rows(lp[name], width), _rows(lp[bias], width) if bias in lp else None)
        if adapters and name in adapters:
            y = T.add(y, _lora(h, adapters[name]))
        return T.transpose(T.reshape(y, (B, S, heads, hd)), (0, 2, 1, 3))

    q, k, v = proj("wq", "bq"), proj("wk", "bk"), proj("wv", "bv")
    if cfg.use_rope:
        cos, sin = rope_tables(np.arange(start, start + S), hd, cfg.rope_base, cfg.np_dtype)
        q, k = T.rope(q, cos, sin), T.rope(k, cos, sin)
    if cache is not None:
        end = start + S
        if end > cache.capacity:
            raise InputError(f"sequence length {end} exceeds cache capacity {cache.capacity}")
        cache.keys[layer][:, start:end] = T.value(k)[0]
        cache.values[layer][:, start:end] = T.value(v)[0]
        k = cache.keys[layer][None, :, :end]
        v = cache.values[layer][None, :, :end]
    n_keys = T.value(k).shape[2]
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    qpos = np.arange(start, start + S)[:, None]
    kpos = np.arange(n_keys)[None, :]
    mask = np.where(kpos > qpos, -1e9, 0.0).astype(cfg.np_dtype)
    p = T.softmax(T.add(scores, mask), axis=-1)
    o = T.reshape(T.transpose(T.matmul(p, v), (0, 2, 1, 3)), (B, S, width))
    out = T.matmul(o, _rows(lp["wo"], width))
    if "bo" in lp:
        out = T.add(out, lp["bo"])
    if adapters and "wo" in adapters:
        out = T.add(out, _lora(o, adapters["wo"]))
    return out


def mlp_block(cfg: ModelConfig, lp: dict, x, neurons: int, adapters=None):
    h = T.rmsnorm(x, lp["mlp_norm"])
    up = T.linear(h, _rows(lp["w_up"], neurons), _rows(lp["b_up"], neurons) if "b_up" in lp else None)
    if adapters and "w_up" in adapters:
        up = T.add(up, _lora(h, adapters["w_up"]))
    if cfg.mlp_kind == "gated":
        gate = T.linear(h, _rows(lp["w_gate"], neurons),
                        _rows(lp["b_gate"], neurons) if "b_gate" in lp else None)
        act = T.mul(T.silu(gate), up)
    else:
        act = T.gelu(up)
    out = T.matmul(act, _rows(lp["w_down"], neurons))
    if "b_down" in lp:
        out = T.add(out, lp["b_down"])
    if adapters and "w_down" in adapters:
        out = T.add(out, _lora(act, adapters["w_down"]))
    return out


def run(cfg: ModelConfig, params: Params, tokens, widths: Widths | None = None,
        adapters=None, cache: KvCache | None = None, start: int = 0,
        skip_layers=(), last_only: bool = False):
    """Logits for ``tokens`` of shape (B, S); works on arrays or tape vars.

    ``last_only`` projects only the final position through the LM head.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.size == 0:
        raise InputError("empty prompt")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InputError("token id out of range")
    if start + tokens.shape[1] > cfg.max_seq_len:
        raise InputError(f"sequence longer than max_seq_len={cfg.max_seq_len}")
    widths = widths or params.widths(cfg)
    x = T.embedding(params.embed, tokens)
    for i, lp in enumerate(params.layers):
        if i in skip_layers:
            continue
        ad = adapters[i] if adapters else None
        x = T.add(x, attention_block(cfg, lp, x, widths.heads[i], ad, start, cache, i))
        x = T.add(x, mlp_block(cfg, lp, x, widths.neurons[i], ad))
    if last_only:
        x = T.getitem(x, (slice(None), slice(-1, None)))
    x = T.rmsnorm(x, params.final_norm)
    return T.linear(x, params.lm_head)


def new_cache(cfg: ModelConfig, widths: Widths, view_key, capacity: int | None = None) -> KvCache:
    cap = capacity or cfg.max_seq_len
    dt = cfg.np_dtype
    keys = [np.zeros((h, cap, cfg.head_dim), dt) for h in widths.heads]
    values = [np.zeros((h, cap, cfg.head_dim), dt) for h in widths.heads]
    return KvCache(keys, values, 0, view_key)


def forward_prefill(model: TransformerLM, token_ids, view=None, capacity: int | None = None,
                    last_only: bool = False):
    """Prefill: logits for every prompt position (or just the last) plus a
    populated cache."""
    view = view or model.full_view()
    token_ids = np.asarray(token_ids)
    if token_ids.size == 0:
        raise InputError("empty prompt")
    cache = new_cache(model.config, view.widths, view.key, capacity)
    logits = run(model.config, model.params, token_ids[None, :], view.widths,
                 view.adapters, cache=cache, start=0, last_only=last_only)
    cache.length = int(token_ids.size)
    return logits[0], cache


def forward_decode_step(model: TransformerLM, cache: KvCache, last_token: int, view=None):
    view = view or model.full_view()
    if view.key != cache.view_key or list(view.widths.heads) != cache.heads():
        raise CacheConsistencyError("level view changed since prefill; switching mid-request is forbidden")
    logits = run(model.config, model.params, np.array([[int(last_token)]]), view.widths,
                 view.adapters, cache=cache, start=cache.length, last_only=True)
    cache.length += 1
    return logits[0, -1], cache


def greedy_generate(model: TransformerLM, prompt, max_new_tokens: int, view=None,
                    stop_token: int | None = None) -> list[int]:
    logits, cache = forward_prefill(model, prompt, view, capacity=len(prompt) + max_new_tokens, last_only=True)
    out: list[int] = []
    nxt = int(np.argmax(logits[-1]))
    while True:
        out.append(nxt)
        if (stop_token is not None and nxt == stop_token) or len(out) >= max_new_tokens:
            return out
        step, cache = forward_decode_step(model, cache, nxt, view)
        nxt = int(np.argmax(step))


# --- unit manipulation -------------------------------------------------------

def head_rows(cfg: ModelConfig, perm) -> np.ndarray:
    hd = cfg.head_dim
    return (np.asarray(perm)[:, None] * hd + np.arange(hd)[None, :]).reshape(-1)


def permute_heads(cfg: ModelConfig, params: Params, layer: int, perm) -> Params:
    """New params with layer ``layer``'s heads laid out as ``perm`` (new slot -> old head)."""
    out = params.copy()
    rows = head_rows(cfg, perm)
    lp = out.layers[layer]
    for name in HEAD_ROW_TENSORS + HEAD_BIAS_TENSORS:
        if name in lp:
            lp[name] = np.ascontiguousarray(params.layers[layer][name][rows])
    return out


def permute_neurons(cfg: ModelConfig, params: Params, layer: int, perm) -> Params:
    out = params.copy()
    perm = np.asarray(perm)
    lp = out.layers[layer]
    for name in NEURON_ROW_TENSORS + NEURON_BIAS_TENSORS:
        if name in lp:
            lp[name] = np.ascontiguousarray(params.layers[layer][name][perm])
    return out


def unit_slices(cfg: ModelConfig, unit: UnitId) -> list[tuple[str, slice]]:
    """(tensor short name, row slice) pairs owned by ``unit``."""
    if unit.kind == ATTENTION_HEAD:
        s = slice(unit.index * cfg.head_dim, (unit.index + 1) * cfg.head_dim)
        names = HEAD_ROW_TENSORS + HEAD_BIAS_TENSORS
    else:
        s = slice(unit.index, unit.index + 1)
        names = NEURON_ROW_TENSORS + NEURON_BIAS_TENSORS
    return [(n, s) for n in names]


def zero_unit(cfg: ModelConfig, params: Params, unit: UnitId) -> Params:
    out = params.copy()
    lp = out.layers[unit.layer]
    for name, s in unit_slices(cfg, unit):
        if name in lp:
            lp[name][s] = 0
    return out


def extract_submodel(cfg: ModelConfig, params: Params, widths: Widths) -> Params:
    """Physically copy the leading slices selected by ``widths`` into fresh buffers."""
    hd = cfg.head_dim

    def cut(name, arr):
        if not name.startswith("layers."):
            return np.array(arr, copy=True)
        _, i, short = name.split(".", 2)
        i = int(i)
        if short in HEAD_ROW_TENSORS + HEAD_BIAS_TENSORS:
            return np.array(arr[: widths.heads[i] * hd], copy=True)
        if short in NEURON_ROW_TENSORS + NEURON_BIAS_TENSORS:
            return np.array(arr[: widths.neurons[i]], copy=True)
        return np.array(arr, copy=True)

    return params.map(cut)

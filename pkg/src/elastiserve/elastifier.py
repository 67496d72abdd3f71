"""Offline elastification: importance, anchors, levels, reordering, adapters."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import (
    ADAPTED,
    ATTENTION_HEAD,
    HEAD_BIAS_TENSORS,
    HEAD_ROW_TENSORS,
    MLP_NEURON,
    NEURON_BIAS_TENSORS,
    NEURON_ROW_TENSORS,
    ModelConfig,
    Params,
    TransformerLM,
    UnitId,
    Widths,
    head_rows,
    unit_slices,
)
from .training import Adam, TrainingError, batch_loss, mean_loss

log = logging.getLogger(__name__)

UNIT_TENSORS = HEAD_ROW_TENSORS + HEAD_BIAS_TENSORS + NEURON_ROW_TENSORS + NEURON_BIAS_TENSORS


class NumericError(ArithmeticError):
    pass


class ConfigurationError(ValueError):
    pass


class InfeasibleLevelError(ConfigurationError):
    pass


@dataclass
class ImportanceTable:
    """Per-unit importance indexed by *original* unit position."""

    heads: np.ndarray  # (n_layers, n_heads)
    neurons: np.ndarray  # (n_layers, d_ff)

    def __getitem__(self, unit: UnitId) -> float:
        arr = self.heads if unit.kind == ATTENTION_HEAD else self.neurons
        return float(arr[unit.layer, unit.index])

    def as_dict(self) -> dict[UnitId, float]:
        out = {}
        for layer in range(self.heads.shape[0]):
            for h in range(self.heads.shape[1]):
                out[UnitId(layer, ATTENTION_HEAD, h)] = float(self.heads[layer, h])
            for j in range(self.neurons.shape[1]):
                out[UnitId(layer, MLP_NEURON, j)] = float(self.neurons[layer, j])
        return out

    def vector(self, units) -> np.ndarray:
        return np.array([self[u] for u in units])

    def scaled(self, k: float) -> "ImportanceTable":
        return ImportanceTable(self.heads * k, self.neurons * k)


def unit_scores(cfg: ModelConfig, layer: dict, grads: dict) -> tuple[np.ndarray, np.ndarray]:
    """Signed first-order terms ``sum(g * w)`` per head and per neuron of one layer."""
    H = cfg.n_heads
    heads = np.zeros(H)
    neurons = np.zeros(cfg.d_ff)
    for name in HEAD_ROW_TENSORS + HEAD_BIAS_TENSORS:
        if name in grads:
            gw = (grads[name].astype(np.float64) * layer[name].astype(np.float64)).reshape(H, -1)
            heads += gw.sum(axis=1)
    for name in NEURON_ROW_TENSORS + NEURON_BIAS_TENSORS:
        if name in grads:
            gw = (grads[name].astype(np.float64) * layer[name].astype(np.float64)).reshape(cfg.d_ff, -1)
            neurons += gw.sum(axis=1)
    return heads, neurons


def profile_importance(model: TransformerLM, calibration_batches) -> ImportanceTable:
    """``|sum over batches and over unit elements of dL/dw * w|`` for every unit.

    The inner sum runs over all weights owned by the unit (Q/K/V rows, O rows,
    biases, or up/gate/down rows), which is the first-order change in the
    calibration loss when the whole unit is zeroed at once.
    """
    if not calibration_batches:
        raise ValueError("calibration_batches must be non-empty")
    cfg, params = model.config, model.params
    heads = np.zeros((cfg.n_layers, cfg.n_heads))
    neurons = np.zeros((cfg.n_layers, cfg.d_ff))
    for batch in calibration_batches:
        tape = T.GradTape()
        watched = params.map(
            lambda name, a: tape.watch(name, a) if name.rsplit(".", 1)[-1] in UNIT_TENSORS else a
        )
        loss = batch_loss(cfg, watched, batch)
        grads = tape.gradients(loss)
        for i, layer in enumerate(params.layers):
            lg = {k.rsplit(".", 1)[-1]: g for k, g in grads.items() if k.startswith(f"layers.{i}.")}
            h, n = unit_scores(cfg, layer, lg)
            heads[i] += h
            neurons[i] += n
    if not (np.isfinite(heads).all() and np.isfinite(neurons).all()):
        raise NumericError(f"non-finite gradient for unit {_offending_unit(cfg, params, heads, neurons)}")
    return ImportanceTable(np.abs(heads), np.abs(neurons))


def _offending_unit(cfg: ModelConfig, params, heads, neurons) -> UnitId:
    # a NaN spreads to every gradient; prefer a unit whose own weights are bad
    for layer, lp in enumerate(params.layers):
        for h in range(cfg.n_heads):
            u = UnitId(layer, ATTENTION_HEAD, h)
            if any(not np.isfinite(lp[n][s]).all() for n, s in unit_slices(cfg, u) if n in lp):
                return u
        for j in range(cfg.d_ff):
            u = UnitId(layer, MLP_NEURON, j)
            if any(not np.isfinite(lp[n][s]).all() for n, s in unit_slices(cfg, u) if n in lp):
                return u
    bad_h = np.argwhere(~np.isfinite(heads))
    if len(bad_h):
        return UnitId(int(bad_h[0][0]), ATTENTION_HEAD, int(bad_h[0][1]))
    bad_n = np.argwhere(~np.isfinite(neurons))
    return UnitId(int(bad_n[0][0]), MLP_NEURON, int(bad_n[0][1]))


@dataclass(frozen=True)
class AnchorSet:
    layers: frozenset[int]
    layer_importance: tuple[float, ...] = ()

    def __contains__(self, layer) -> bool:
        return layer in self.layers

    def __len__(self) -> int:
        return len(self.layers)


def n_anchor_layers(n_layers: int, anchor_fraction: float) -> int:
    return math.ceil(round(anchor_fraction * n_layers, 9))


def layer_skip_importance(model: TransformerLM, calibration_batches) -> np.ndarray:
    """``|loss change|`` when each layer is bypassed (residual passthrough).

    The magnitude is used, as for unit importance: a layer whose removal
    moves the loss a lot in either direction is one the sub-models must keep.
    """
    cfg, params = model.config, model.params
    base = mean_loss(cfg, params, calibration_batches)
    return np.array([
        abs(mean_loss(cfg, params, calibration_batches, skip_layers=(i,)) - base) for i in range(cfg.n_layers)
    ])


def detect_anchors(model: TransformerLM, calibration_batches, anchor_fraction: float) -> AnchorSet:
    if not 0 <= anchor_fraction < 1:
        raise ConfigurationError("anchor_fraction must lie in [0, 1)")
    k = n_anchor_layers(model.config.n_layers, anchor_fraction)
    if k == 0:
        return AnchorSet(frozenset())
    imp = layer_skip_importance(model, calibration_batches)
    top = sorted(range(len(imp)), key=lambda i: (-imp[i], i))[:k]
    return AnchorSet(frozenset(top), tuple(float(x) for x in imp))


# --- level table ---------------------------------------------------------------

def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def level_key(fraction: float) -> str:
    return f"{fraction:.4g}"


@dataclass(frozen=True)
class Level:
    fraction: float
    ratio: float  # retention ratio applied to non-anchor layers
    heads: tuple[int, ...]
    neurons: tuple[int, ...]

    @property
    def key(self) -> str:
        return level_key(self.fraction)

    @property
    def widths(self) -> Widths:
        return Widths(self.heads, self.neurons)


@dataclass(frozen=True)
class LevelTable:
    levels: tuple[Level, ...]

    @property
    def fractions(self) -> list[float]:
        return [l.fraction for l in self.levels]

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)

    def get(self, level) -> Level:
        key = level if isinstance(level, str) else level_key(float(level))
        for l in self.levels:
            if l.key == key:
                return l
        raise KeyError(f"unknown model level {level!r}")

    def to_dict(self) -> list[dict]:
        return [
            {"fraction": l.fraction, "ratio": l.ratio, "heads": list(l.heads), "neurons": list(l.neurons)}
            for l in self.levels
        ]

    @classmethod
    def from_dict(cls, rows) -> "LevelTable":
        return cls(tuple(Level(r["fraction"], r["ratio"], tuple(r["heads"]), tuple(r["neurons"])) for r in rows))


DEFAULT_FRACTIONS = tuple(round(0.2 + 0.1 * i, 1) for i in range(9))


def retention_ratio(fraction: float, n_layers: int, n_anchors: int) -> float:
    """Non-anchor retention so that anchors (full) plus the rest hit ``fraction``."""
    budget = fraction * n_layers
    if budget <= n_anchors + 1e-12:
        raise InfeasibleLevelError(
            f"level {fraction} needs {budget:.3g} layer-equivalents but {n_anchors} anchor layers are locked"
        )
    return min(1.0, (budget - n_anchors) / (n_layers - n_anchors))


def build_level_table(config: ModelConfig, anchors: AnchorSet, fractions=DEFAULT_FRACTIONS) -> LevelTable:
    fractions = [float(f) for f in fractions]
    if not fractions:
        raise ConfigurationError("no levels given")
    if any(not 0 < f <= 1 for f in fractions):
        raise ConfigurationError("level fractions must lie in (0, 1]")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ConfigurationError("level fractions must be strictly increasing")
    if abs(fractions[-1] - 1.0) > 1e-12:
        raise ConfigurationError("the last level must be 1.0")
    T_, A = config.n_layers, len(anchors)
    if any(a >= T_ or a < 0 for a in anchors.layers):
        raise ConfigurationError("anchor layer out of range")
    run_h = [0] * T_
    run_n = [0] * T_
    levels = []
    for f in fractions:
        r = retention_ratio(f, T_, A)
        h = max(1, round_half_up(r * config.n_heads))
        n = max(1, round_half_up(r * config.d_ff))
        heads, neurons = [], []
        for layer in range(T_):
            hh, nn = (config.n_heads, config.d_ff) if layer in anchors else (h, n)
            run_h[layer] = max(run_h[layer], hh)
            run_n[layer] = max(run_n[layer], nn)
            heads.append(run_h[layer])
            neurons.append(run_n[layer])
        levels.append(Level(f, r, tuple(heads), tuple(neurons)))
    return LevelTable(tuple(levels))


# --- reordering ----------------------------------------------------------------

@dataclass
class ElasticCheckpoint:
    config: ModelConfig
    params: Params
    head_order: np.ndarray  # (n_layers, n_heads): original head index in each slot
    neuron_order: np.ndarray  # (n_layers, d_ff)
    importance: ImportanceTable
    anchors: AnchorSet
    levels: LevelTable
    adapters: dict = field(default_factory=dict)  # level key -> list[dict[name, (A, B)]]
    adapter_rank: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def model(self) -> TransformerLM:
        return TransformerLM(self.config, self.params)

    def unit_order(self) -> list[UnitId]:
        """Original unit identity of every storage slot, in storage order."""
        out = []
        for layer in range(self.config.n_layers):
            out.extend(UnitId(layer, ATTENTION_HEAD, int(h)) for h in self.head_order[layer])
            out.extend(UnitId(layer, MLP_NEURON, int(j)) for j in self.neuron_order[layer])
        return out

    def stored_importance(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        return (
            self.importance.heads[layer][self.head_order[layer]],
            self.importance.neurons[layer][self.neuron_order[layer]],
        )


def descending_order(scores: np.ndarray) -> np.ndarray:
    # stable: ties keep the original position
    return np.argsort(-np.asarray(scores), kind="stable")


def reorder_units(model: TransformerLM, importance: ImportanceTable, anchors: AnchorSet = AnchorSet(frozenset()),
                  levels: LevelTable | None = None) -> ElasticCheckpoint:
    """Lay out every non-anchor block's units by descending importance."""
    cfg = model.config
    params = model.params.copy()
    head_order = np.tile(np.arange(cfg.n_heads), (cfg.n_layers, 1))
    neuron_order = np.tile(np.arange(cfg.d_ff), (cfg.n_layers, 1))
    for layer in range(cfg.n_layers):
        if layer in anchors:
            continue
        hperm = descending_order(importance.heads[layer])
        nperm = descending_order(importance.neurons[layer])
        head_order[layer] = hperm
        neuron_order[layer] = nperm
        lp = params.layers[layer]
        rows = head_rows(cfg, hperm)
        for name in HEAD_ROW_TENSORS + HEAD_BIAS_TENSORS:
            if name in lp:
                lp[name] = np.ascontiguousarray(lp[name][rows])
        for name in NEURON_ROW_TENSORS + NEURON_BIAS_TENSORS:
            if name in lp:
                lp[name] = np.ascontiguousarray(lp[name][nperm])
    if levels is None:
        levels = build_level_table(cfg, anchors, (1.0,))
    return ElasticCheckpoint(cfg, params, head_order, neuron_order, importance, anchors, levels)


# --- low-rank recovery ------------------------------------------------------------

def adapter_shapes(cfg: ModelConfig, widths: Widths, layer: int, rank: int) -> dict[str, tuple]:
    """(A shape, B shape) per adapted matrix under ``widths``."""
    d = cfg.d_model
    a = widths.heads[layer] * cfg.head_dim
    n = widths.neurons[layer]
    io = {"wq": (d, a), "wk": (d, a), "wv": (d, a), "wo": (a, d), "w_up": (d, n), "w_down": (n, d)}
    return {k: ((i, rank), (rank, o)) for k, (i, o) in io.items() if k in ADAPTED}


def init_adapters(cfg: ModelConfig, widths: Widths, rank: int, seed: int = 0) -> list[dict]:
    if rank < 1:
        raise ConfigurationError("adapter rank must be >= 1")
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    out = []
    for layer in range(cfg.n_layers):
        ad = {}
        for name, (sa, sb) in adapter_shapes(cfg, widths, layer, rank).items():
            a = (rng.standard_normal(sa) / math.sqrt(sa[0])).astype(dt)
            ad[name] = (a, np.zeros(sb, dt))
        out.append(ad)
    return out


def adapter_param_count(adapters) -> int:
    return sum(a.size + b.size for layer in adapters for a, b in layer.values())


def train_adapters(ckpt: ElasticCheckpoint, level, recovery_batches, rank: int = 8, steps: int = 100,
                   lr: float = 2e-3, seed: int = 0) -> list[dict]:
    """Fit one level's adapters with the backbone frozen."""
    lvl = ckpt.levels.get(level)
    cfg = ckpt.config
    adapters = init_adapters(cfg, lvl.widths, rank, seed)
    if steps <= 0:
        return adapters
    if not recovery_batches:
        raise ValueError("recovery_batches must be non-empty")
    named = {f"{i}.{k}.{ab}": arr for i, ad in enumerate(adapters) for k, pair in ad.items()
             for ab, arr in zip("AB", pair)}
    opt = Adam(lr=lr)
    for step in range(steps):
        batch = recovery_batches[step % len(recovery_batches)]
        tape = T.GradTape()
        watched = [
            {k: (tape.watch(f"{i}.{k}.A", a), tape.watch(f"{i}.{k}.B", b)) for k, (a, b) in ad.items()}
            for i, ad in enumerate(adapters)
        ]
        loss = batch_loss(cfg, ckpt.params, batch, lvl.widths, watched)
        lv = float(T.value(loss))
        if not math.isfinite(lv):
            raise TrainingError(f"adapter training diverged at step {step} (level {lvl.key})")
        opt.step(named, tape.gradients(loss))
    return adapters


def backbone_param_count(params: Params, include_embeddings: bool = False) -> int:
    n = 0
    for name, a in params.named():
        if include_embeddings or name.startswith("layers."):
            n += int(np.size(a))
    return n

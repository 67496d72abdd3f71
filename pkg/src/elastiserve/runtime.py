"""Online elastic execution over a reordered checkpoint.

A level is served through a :class:`LevelView`: per-layer active widths that
select leading row slices of the unit-major weight tensors, plus a reference
to that level's adapter set.  Switching never touches backbone bytes.
"""
from __future__ import annotations

import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .elastifier import ElasticCheckpoint, Level, level_key
from .model import (
    HEAD_BIAS_TENSORS,
    HEAD_ROW_TENSORS,
    NEURON_BIAS_TENSORS,
    NEURON_ROW_TENSORS,
    KvCache,
    ModelConfig,
    TransformerLM,
    Widths,
    forward_decode_step,
    forward_prefill,
    head_rows,
)
from .task import EOS


class BusyError(RuntimeError):
    pass


class AdapterShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LevelView:
    level: str
    fraction: float
    widths: Widths
    adapters: tuple | None
    key: tuple
    extents: dict = field(compare=False, repr=False, default_factory=dict)
    adapter_bytes: int = 0


def tensor_extents(cfg: ModelConfig, widths: Widths) -> dict[str, tuple[int, int]]:
    """Active (rows, cols) of every elasticized matrix."""
    d = cfg.d_model
    out = {}
    for i in range(cfg.n_layers):
        a = widths.heads[i] * cfg.head_dim
        n = widths.neurons[i]
        for name in HEAD_ROW_TENSORS:
            out[f"layers.{i}.{name}"] = (a, d)
        for name in NEURON_ROW_TENSORS:
            if cfg.mlp_kind == "gated" or name != "w_gate":
                out[f"layers.{i}.{name}"] = (n, d)
    return out


def check_adapters(cfg: ModelConfig, widths: Widths, adapters) -> None:
    d = cfg.d_model
    for i, layer in enumerate(adapters):
        a = widths.heads[i] * cfg.head_dim
        n = widths.neurons[i]
        io = {"wq": (d, a), "wk": (d, a), "wv": (d, a), "wo": (a, d), "w_up": (d, n), "w_down": (n, d)}
        for name, (A, B) in layer.items():
            fan_in, fan_out = io[name]
            if A.shape[0] != fan_in or B.shape[1] != fan_out or A.shape[1] != B.shape[0]:
                raise AdapterShapeError(
                    f"adapter layers.{i}.{name} shapes {A.shape}x{B.shape} do not match active extents "
                    f"({fan_in} in, {fan_out} out)"
                )


def make_view(ckpt: ElasticCheckpoint, level, use_adapters: bool = True) -> LevelView:
    """Leading-slice view of ``level``; allocates nothing weight-sized."""
    lvl: Level = ckpt.levels.get(level)
    adapters = ckpt.adapters.get(lvl.key) if use_adapters else None
    if adapters is not None:
        check_adapters(ckpt.config, lvl.widths, adapters)
        adapters = tuple(adapters)
    key = (id(ckpt), lvl.key, adapters is not None)
    return LevelView(lvl.key, lvl.fraction, lvl.widths, adapters, key, tensor_extents(ckpt.config, lvl.widths),
                     adapter_nbytes(adapters))


def elastic_linear(x: np.ndarray, w: np.ndarray, rows: int, bias=None, adapter=None) -> np.ndarray:
    """``x @ w[:rows].T (+ bias[:rows]) + (x @ A) @ B``."""
    y = x @ w[:rows].T
    if bias is not None:
        y = y + bias[:rows]
    if adapter is not None:
        A, B = adapter
        if A.shape[0] != x.shape[-1] or B.shape[1] != rows:
            raise AdapterShapeError(f"adapter {A.shape}x{B.shape} does not fit extents ({x.shape[-1]}, {rows})")
        y = y + (x @ A) @ B
    return y


def forward_with_adapters(view: LevelView, model: TransformerLM, tokens) -> np.ndarray:
    return forward_prefill(model, tokens, view)[0]


def adapter_nbytes(adapters) -> int:
    if not adapters:
        return 0
    return sum(A.nbytes + B.nbytes for layer in adapters for A, B in layer.values())


# --- clocks -----------------------------------------------------------------------

class WallClock:
    """Times work with ``time.perf_counter``."""

    deterministic = False

    def measure(self, fn, kind: str, **work):
        t0 = time.perf_counter()
        out = fn()
        return out, time.perf_counter() - t0


@dataclass
class DeviceProfile:
    """Throughput numbers of an emulated serving device."""

    flops_per_s: float = 5e9
    bytes_per_s: float = 4e10
    layer_overhead_s: float = 2e-6
    call_overhead_s: float = 1e-5
    switch_overhead_s: float = 2e-5
    jitter: float = 0.02


def forward_work(cfg: ModelConfig, widths: Widths, n_tokens: int, context: int, rank: int) -> tuple[float, float]:
    """(flops, weight bytes) for pushing ``n_tokens`` new tokens through the view."""
    d, hd = cfg.d_model, cfg.head_dim
    n_mats = 3 if cfg.mlp_kind == "gated" else 2
    flops = 0.0
    nbytes = 0.0
    for i in range(cfg.n_layers):
        a = widths.heads[i] * hd
        n = widths.neurons[i]
        layer_params = 4 * a * d + n_mats * n * d
        flops += 2.0 * n_tokens * layer_params
        # scores + weighted sum over the causal context
        flops += 4.0 * widths.heads[i] * hd * n_tokens * (context - (n_tokens - 1) / 2.0)
        if rank:
            flops += 2.0 * n_tokens * rank * (4 * (d + a) + 2 * (d + n))
        nbytes += 4.0 * layer_params
    # the LM head runs on the newest position only
    flops += 2.0 * cfg.vocab_size * d
    nbytes += 4.0 * cfg.vocab_size * d
    return flops, nbytes


class DeviceClock:
    """Deterministic emulated latency computed from the work actually executed."""

    deterministic = True

    def __init__(self, profile: DeviceProfile | None = None, seed: int = 0):
        self.profile = profile or DeviceProfile()
        self._rng = np.random.default_rng(seed)

    def cost(self, kind: str, **work) -> float:
        p = self.profile
        if kind == "switch":
            return p.switch_overhead_s + work.get("adapter_bytes", 0) / p.bytes_per_s
        if kind == "relayout":
            return p.switch_overhead_s + work.get("weight_bytes", 0) / p.bytes_per_s
        cfg = work["cfg"]
        flops, nbytes = forward_work(cfg, work["widths"], work["n_tokens"], work["context"], work.get("rank", 0))
        return p.call_overhead_s + cfg.n_layers * p.layer_overhead_s + flops / p.flops_per_s + nbytes / p.bytes_per_s

    def measure(self, fn, kind: str, **work):
        out = fn()
        t = self.cost(kind, **work)
        if self.profile.jitter:
            t *= float(np.exp(self._rng.normal(0.0, self.profile.jitter)))
        return out, t


# --- runtime -----------------------------------------------------------------------

class SwitchReport(NamedTuple):
    from_level: str
    to_level: str
    weight_bytes_copied: int
    adapter_bytes_touched: int
    wall_time: float
    billed_time: float = 0.0


@dataclass
class Generation:
    tokens: list[int]
    ttft: float
    tpot: float
    decode_times: list[float]
    prompt_len: int
    level: str


class ElasticRuntime:
    """One serving runtime: requests and level switches are mutually exclusive."""

    def __init__(self, ckpt: ElasticCheckpoint, level=1.0, clock=None, use_adapters: bool = True):
        self.ckpt = ckpt
        self.model = ckpt.model
        self.clock = clock or WallClock()
        self.use_adapters = use_adapters
        self._views: dict[str, LevelView] = {}
        self._lock = threading.RLock()
        self._in_flight = 0
        self.weight_bytes_copied = 0
        self.adapter_bytes_touched = 0
        self.n_switches = 0
        self.switch_time = 0.0
        self.view = self._view(level)

    def _view(self, level) -> LevelView:
        v = self._views.get(level)
        if v is None:
            key = level_key(float(level)) if not isinstance(level, str) else level
            v = self._views.get(key) or make_view(self.ckpt, key, self.use_adapters)
            self._views[key] = self._views[level] = v
        return v

    @property
    def level(self) -> str:
        return self.view.level

    @property
    def busy(self) -> bool:
        return self._in_flight > 0

    def resident_bytes(self) -> int:
        backbone = sum(np.asarray(a).nbytes for _, a in self.ckpt.params.named())
        adapters = sum(adapter_nbytes(ad) for ad in self.ckpt.adapters.values())
        return backbone + adapters

    def switch_level(self, to_level) -> SwitchReport:
        with self._lock:
            if self._in_flight:
                raise BusyError("cannot switch levels while a request is in flight")
            t0 = time.perf_counter()
            old = self.view
            new = self._views.get(to_level) or self._view(to_level)
            if new is old:
                return SwitchReport(old.level, old.level, 0, 0, time.perf_counter() - t0, 0.0)
            # detach old adapters, move the end pointer, attach the new ones
            self.view = new
            wall = time.perf_counter() - t0
            touched = old.adapter_bytes + new.adapter_bytes
            billed = self.clock.cost("switch", adapter_bytes=touched) if self.clock.deterministic else wall
            self.adapter_bytes_touched += touched
            self.n_switches += 1
            self.switch_time += billed
            return SwitchReport(old.level, new.level, 0, touched, wall, billed)

    @contextmanager
    def request(self):
        # the lock guards the counter only, so a concurrent switch sees the
        # request and fails fast instead of queueing behind it
        with self._lock:
            self._in_flight += 1
            view = self.view
        try:
            yield view
        finally:
            with self._lock:
                self._in_flight -= 1

    def _rank(self, view: LevelView) -> int:
        if not view.adapters:
            return 0
        first = next(iter(view.adapters[0].values()))
        return first[0].shape[1]

    def prefill(self, tokens, view: LevelView, capacity: int):
        work = dict(cfg=self.model.config, widths=view.widths, n_tokens=len(tokens),
                    context=len(tokens), rank=self._rank(view), fraction=view.fraction)
        return self.clock.measure(lambda: forward_prefill(self.model, tokens, view, capacity, last_only=True), "prefill", **work)

    def decode(self, cache: KvCache, token: int, view: LevelView):
        work = dict(cfg=self.model.config, widths=view.widths, n_tokens=1,
                    context=cache.length + 1, rank=self._rank(view), fraction=view.fraction)
        return self.clock.measure(lambda: forward_decode_step(self.model, cache, token, view), "decode", **work)

    def generate(self, prompt, max_new_tokens: int = 3, stop_token: int | None = EOS) -> Generation:
        prompt = [int(t) for t in prompt]
        with self.request() as view:
            (logits, cache), ttft = self.prefill(prompt, view, len(prompt) + max_new_tokens)
            out = [int(np.argmax(logits[-1]))]
            times = []
            while len(out) < max_new_tokens and not (stop_token is not None and out[-1] == stop_token):
                (step, cache), dt = self.decode(cache, out[-1], view)
                times.append(dt)
                out.append(int(np.argmax(step)))
        tpot = float(np.mean(times)) if times else 0.0
        return Generation(out, ttft, tpot, times, len(prompt), view.level)


class RelayoutRuntime:
    """Baseline: weights kept in original order, each switch gathers the
    level's units into fresh contiguous buffers."""

    def __init__(self, ckpt: ElasticCheckpoint, level=1.0):
        self.ckpt = ckpt
        cfg = ckpt.config
        self.config = cfg
        # undo the reordering so sub-model units are scattered in memory
        self.original = ckpt.params.copy()
        for i, lp in enumerate(self.original.layers):
            hinv = np.argsort(ckpt.head_order[i])
            ninv = np.argsort(ckpt.neuron_order[i])
            rows = head_rows(cfg, hinv)
            for name in HEAD_ROW_TENSORS + HEAD_BIAS_TENSORS:
                if name in lp:
                    lp[name] = np.ascontiguousarray(lp[name][rows])
            for name in NEURON_ROW_TENSORS + NEURON_BIAS_TENSORS:
                if name in lp:
                    lp[name] = np.ascontiguousarray(lp[name][ninv])
        self.weight_bytes_copied = 0
        self.active = None
        self.level = None
        self.switch_level(level)

    def switch_level(self, to_level) -> SwitchReport:
        t0 = time.perf_counter()
        lvl = self.ckpt.levels.get(to_level)
        cfg = self.config
        copied = 0
        layers = []
        for i, lp in enumerate(self.original.layers):
            h_idx = self.ckpt.head_order[i][: lvl.heads[i]]
            n_idx = self.ckpt.neuron_order[i][: lvl.neurons[i]]
            rows = head_rows(cfg, h_idx)
            new = {}
            for name, arr in lp.items():
                if name in HEAD_ROW_TENSORS + HEAD_BIAS_TENSORS:
                    new[name] = arr[rows]
                elif name in NEURON_ROW_TENSORS + NEURON_BIAS_TENSORS:
                    new[name] = arr[n_idx]
                else:
                    new[name] = arr
                    continue
                copied += new[name].nbytes
            layers.append(new)
        self.active = layers
        prev, self.level = self.level, lvl.key
        self.weight_bytes_copied += copied
        return SwitchReport(prev or "", lvl.key, copied, 0, time.perf_counter() - t0)

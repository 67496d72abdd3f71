"""Independent oracles for the structural claims the engine relies on.

Each suite returns a plain dict of measurements plus a ``passed`` flag so the
CLI, the tests and the acceptance run all read the same numbers.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .elastifier import DEFAULT_FRACTIONS, AnchorSet, ElasticCheckpoint, build_level_table, profile_importance, reorder_units
from .model import (
    ATTENTION_HEAD,
    HEAD_BIAS_TENSORS,
    HEAD_ROW_TENSORS,
    MLP_NEURON,
    NEURON_BIAS_TENSORS,
    NEURON_ROW_TENSORS,
    ModelConfig,
    TransformerLM,
    UnitId,
    attention_block,
    enumerate_units,
    mlp_block,
    permute_heads,
    permute_neurons,
    run,
    unit_slices,
    zero_unit,
)
from .runtime import ElasticRuntime, RelayoutRuntime
from .task import TaskVocab, sample_batches
from .training import mean_loss


def rel_err(a, b) -> float:
    """``max|a-b| / max|b|``, the tolerance measure used throughout."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


# --- permutation consistency ---------------------------------------------------

PERMUTATION_TOL = {"float32": 1e-5, "float64": 1e-10}


def permutation_configs(vocab_size: int = 64, seed: int = 0) -> list[ModelConfig]:
    base = ModelConfig(4, 4, 16, 64, vocab_size, seed=seed)
    return [base.replace(mlp_kind=k, use_rope=r, dtype=dt)
            for k in ("plain", "gated") for r in (True, False) for dt in ("float32", "float64")]


def random_permutation(cfg: ModelConfig, params, rng):
    """Apply an independent random head and neuron permutation to every layer."""
    out = params
    for layer in range(cfg.n_layers):
        out = permute_heads(cfg, out, layer, rng.permutation(cfg.n_heads))
        out = permute_neurons(cfg, out, layer, rng.permutation(cfg.d_ff))
    return out


def permutation_suite(n_trials: int = 200, seq_len: int = 12, seed: int = 0) -> dict:
    """Full-width logits under ``n_trials`` random within-block permutations
    for every (mlp kind, RoPE, dtype) combination."""
    rng = np.random.default_rng(seed)
    rows, ok = [], True
    for cfg in permutation_configs(seed=seed):
        model = TransformerLM.create(cfg)
        tokens = rng.integers(0, cfg.vocab_size, size=(1, seq_len))
        ref = run(cfg, model.params, tokens)
        identity = random_permutation(cfg, model.params, _IdentityRng())
        bitwise = bool(np.array_equal(run(cfg, identity, tokens), ref))
        worst = 0.0
        for _ in range(n_trials):
            worst = max(worst, rel_err(run(cfg, random_permutation(cfg, model.params, rng), tokens), ref))
        tol = PERMUTATION_TOL[cfg.dtype]
        passed = bitwise and worst <= tol
        ok &= passed
        rows.append({"mlp_kind": cfg.mlp_kind, "use_rope": cfg.use_rope, "dtype": cfg.dtype,
                     "max_rel_err": worst, "tolerance": tol, "identity_bitwise": bitwise, "passed": passed})
    return {"n_trials": n_trials, "cases": rows, "passed": ok}


class _IdentityRng:
    @staticmethod
    def permutation(n):
        return np.arange(n)


# --- zero-copy switching -------------------------------------------------------

def _buffer_addresses(ckpt: ElasticCheckpoint) -> dict[str, int]:
    return {name: np.asarray(a).__array_interface__["data"][0] for name, a in ckpt.params.named()}


def random_checkpoint(seed: int = 0, vocab: TaskVocab = TaskVocab()) -> ElasticCheckpoint:
    """Untrained serving-shape model, reordered by profiled importance."""
    from .training import toy_config

    model = TransformerLM.create(toy_config(vocab, seed=seed))
    imp = profile_importance(model, sample_batches(seed, 1, 16, vocab=vocab))
    anchors = AnchorSet(frozenset())
    return reorder_units(model, imp, anchors, build_level_table(model.config, anchors, DEFAULT_FRACTIONS))


def _time_switches(runtime, seq) -> list[float]:
    out = []
    for key in seq:
        t0 = time.perf_counter()
        runtime.switch_level(key)
        out.append(time.perf_counter() - t0)
    return out


def zero_copy_suite(ckpt: ElasticCheckpoint, n_switches: int = 100, seed: int = 0,
                    min_speedup: float = 50.0) -> dict:
    """Random level switches on the elastic runtime against the re-layout
    baseline, same level sequence for both."""
    rng = np.random.default_rng(seed)
    keys = [l.key for l in ckpt.levels]
    seq = []
    cur = keys[-1]
    while len(seq) < n_switches:
        nxt = keys[int(rng.integers(len(keys)))]
        if nxt != cur:
            seq.append(nxt)
            cur = nxt
    rt = ElasticRuntime(ckpt, keys[-1])
    before = _buffer_addresses(ckpt)
    base = RelayoutRuntime(ckpt, keys[-1])
    # separate passes so the baseline's copies do not evict the fast path's cache lines
    fast = _time_switches(rt, seq)
    slow = _time_switches(base, seq)
    unmoved = _buffer_addresses(ckpt) == before
    speedup = float(np.median(slow) / max(np.median(fast), 1e-12))
    return {
        "n_switches": len(seq),
        "weight_bytes_copied": int(rt.weight_bytes_copied),
        "baseline_bytes_copied": int(base.weight_bytes_copied),
        "buffers_unmoved": unmoved,
        "median_switch_s": float(np.median(fast)),
        "median_relayout_s": float(np.median(slow)),
        "speedup": speedup,
        "passed": rt.weight_bytes_copied == 0 and unmoved and speedup >= min_speedup,
    }


# --- importance fidelity ---------------------------------------------------------

def leave_one_out(model: TransformerLM, batches, units=None) -> np.ndarray:
    """Exact ``|L(unit zeroed) - L|`` for every unit."""
    cfg, params = model.config, model.params
    units = units or enumerate_units(cfg)
    base = mean_loss(cfg, params, batches)
    return np.array([abs(mean_loss(cfg, zero_unit(cfg, params, u), batches) - base) for u in units])


def importance_fidelity(model: TransformerLM, batches) -> float:
    """Spearman rank correlation of profiled importance with leave-one-out."""
    units = enumerate_units(model.config)
    imp = profile_importance(model, batches).vector(units)
    return float(spearmanr(imp, leave_one_out(model, batches, units))[0])


IMPORTANCE_CONFIG = dict(n_layers=4, n_heads=4, head_dim=16, d_ff=64)


def importance_suite(seeds=range(5), n_batches: int = 2, batch_size: int = 32, threshold: float = 0.8,
                     vocab: TaskVocab = TaskVocab(), **config) -> dict:
    kw = {**IMPORTANCE_CONFIG, **config}
    rhos = []
    for seed in seeds:
        cfg = ModelConfig(vocab_size=vocab.size, dtype="float64", seed=seed, **kw)
        batches = sample_batches(1000 + seed, n_batches, batch_size, vocab=vocab)
        rhos.append(importance_fidelity(TransformerLM.create(cfg), batches))
    mean = float(np.mean(rhos))
    return {"rho": rhos, "mean_rho": mean, "threshold": threshold, "passed": mean >= threshold}


# --- coupling scan ----------------------------------------------------------------

@dataclass(frozen=True)
class _Atom:
    tensor: str
    row: int


def _block_atoms(cfg: ModelConfig, lp: dict, names) -> list[_Atom]:
    return [_Atom(n, r) for n in names if n in lp for r in range(lp[n].shape[0])]


def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def coupling_groups(cfg: ModelConfig, lp: dict, block: str, x: np.ndarray, delta: float = 0.5,
                    rtol: float = 1e-8) -> tuple[list[frozenset[_Atom]], frozenset[_Atom]]:
    """Partition a block's weight rows into groups whose contributions to the
    block output are additively separable.

    Rows ``a`` and ``b`` are coupled when the mixed second difference
    ``f(a+, b+) - f(a+) - f(b+) + f`` of the block output is nonzero; groups
    are the connected components of that relation.  Nothing about heads or
    neurons is assumed.  Rows whose bump leaves the output unchanged (a key
    bias without RoPE, for instance, cancels inside the softmax) are returned
    separately as inert.
    """
    if block == "attention":
        names = HEAD_ROW_TENSORS + HEAD_BIAS_TENSORS

        def f(p):
            return attention_block(cfg, p, x, cfg.n_heads)
    else:
        names = NEURON_ROW_TENSORS + NEURON_BIAS_TENSORS

        def f(p):
            return mlp_block(cfg, p, x, cfg.d_ff)

    atoms = _block_atoms(cfg, lp, names)
    rng = np.random.default_rng(0)
    bumps = {a: rng.standard_normal(lp[a.tensor][a.row].shape) * delta for a in atoms}

    def bumped(*which):
        p = {k: np.array(v, copy=True) for k, v in lp.items()}
        for a in which:
            p[a.tensor][a.row] += bumps[a]
        return p

    f0 = f(lp)
    single = [f(bumped(a)) for a in atoms]
    scale = max(np.abs(f0).max(), 1e-300)
    inert = {i for i, f1 in enumerate(single) if np.abs(f1 - f0).max() <= rtol * scale}
    live = [i for i in range(len(atoms)) if i not in inert]
    parent = list(range(len(atoms)))
    for n, i in enumerate(live):
        for j in live[n + 1:]:
            if _find(parent, i) == _find(parent, j):
                continue
            mixed = f(bumped(atoms[i], atoms[j])) - single[i] - single[j] + f0
            if np.abs(mixed).max() > rtol * scale:
                parent[_find(parent, j)] = _find(parent, i)
    groups: dict[int, set] = {}
    for i in live:
        groups.setdefault(_find(parent, i), set()).add(atoms[i])
    return [frozenset(g) for g in groups.values()], frozenset(atoms[i] for i in inert)


def unit_atoms(cfg: ModelConfig, lp: dict, unit: UnitId) -> frozenset[_Atom]:
    out = set()
    for name, s in unit_slices(cfg, unit):
        if name in lp:
            out.update(_Atom(name, r) for r in range(*s.indices(lp[name].shape[0])))
    return frozenset(out)


SCAN_CONFIG = dict(n_layers=2, n_heads=4, head_dim=4, d_ff=16, vocab_size=32)


def coupling_scan_suite(seed: int = 0, seq_len: int = 6, **config) -> dict:
    """Brute-force zero-out scan: count the independently removable weight
    groups of every block and compare them to :func:`enumerate_units`."""
    kw = {**SCAN_CONFIG, **config}
    cfg = ModelConfig(dtype="float64", seed=seed, **kw)
    model = TransformerLM.create(cfg)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, seq_len, cfg.d_model))
    found, n_inert, matches = 0, 0, True
    for layer, lp in enumerate(model.params.layers):
        for block, kind in (("attention", ATTENTION_HEAD), ("mlp", MLP_NEURON)):
            groups, inert = coupling_groups(cfg, lp, block, x)
            n = cfg.n_heads if kind == ATTENTION_HEAD else cfg.d_ff
            expected = {unit_atoms(cfg, lp, UnitId(layer, kind, i)) - inert for i in range(n)}
            found += len(groups)
            n_inert += len(inert)
            matches &= set(groups) == expected
    n_units = len(enumerate_units(cfg))
    return {"groups_found": found, "units_enumerated": n_units, "inert_rows": n_inert,
            "groups_match_units": matches, "passed": matches and found == n_units}


# --- anchor locking ---------------------------------------------------------------

ANCHOR_CONFIG = dict(n_layers=4, n_heads=4, head_dim=16, d_ff=64)


def plant_anchor(cfg: ModelConfig, params, layer: int, scale: float = 10.0):
    out = params.copy()
    out.layers[layer]["wo"] = out.layers[layer]["wo"] * np.asarray(scale, dtype=cfg.np_dtype)
    return out


def anchor_suite(n_trials: int = 10, anchor_fraction: float = 0.25, train_steps: int = 100,
                 vocab: TaskVocab = TaskVocab(), **config) -> dict:
    """Plant one anchor per trial by scaling a layer's output projection and
    check detection, full retention of anchor layers, and the non-anchor ratio.

    Each trial briefly trains its own model first: at initialization the LM
    head is random and no layer's removal moves the loss much.
    """
    from .elastifier import detect_anchors, retention_ratio, round_half_up
    from .training import train_toy

    kw = {**ANCHOR_CONFIG, **config}
    detected, locked, ratio_ok = 0, True, True
    trials = []
    for seed in range(n_trials):
        cfg = ModelConfig(vocab_size=vocab.size, seed=seed, **kw)
        planted = seed % cfg.n_layers
        base = train_toy(cfg, train_steps, seed=seed, vocab=vocab, log_every=0).model if train_steps \
            else TransformerLM.create(cfg)
        model = TransformerLM(cfg, plant_anchor(cfg, base.params, planted))
        batches = sample_batches(2000 + seed, 1, 16, vocab=vocab)
        anchors = detect_anchors(model, batches, anchor_fraction)
        hit = planted in anchors
        detected += hit
        feasible = [f for f in DEFAULT_FRACTIONS if f * cfg.n_layers > len(anchors)]
        table = build_level_table(cfg, anchors, feasible)
        prev_h, prev_n = 0, 0
        for lvl in table:
            for layer in range(cfg.n_layers):
                if layer in anchors:
                    locked &= lvl.heads[layer] == cfg.n_heads and lvl.neurons[layer] == cfg.d_ff
            r = retention_ratio(lvl.fraction, cfg.n_layers, len(anchors))
            free = [l for l in range(cfg.n_layers) if l not in anchors]
            want_h = max(prev_h, max(1, round_half_up(r * cfg.n_heads)))
            want_n = max(prev_n, max(1, round_half_up(r * cfg.d_ff)))
            ratio_ok &= all(lvl.heads[l] == want_h and lvl.neurons[l] == want_n for l in free)
            ratio_ok &= abs(lvl.ratio - r) < 1e-12
            prev_h, prev_n = want_h, want_n
        trials.append({"seed": seed, "planted": planted, "anchors": sorted(anchors.layers), "detected": hit})
    return {"n_trials": n_trials, "detected": detected, "anchors_locked": bool(locked),
            "ratio_matches": bool(ratio_ok), "trials": trials,
            "passed": detected == n_trials and locked and ratio_ok}


# --- sub-model quality ordering ---------------------------------------------------

def random_subset_params(ckpt: ElasticCheckpoint, rng):
    """Weights whose leading slices are a uniformly random unit subset of
    every non-anchor block (anchor layers are full at every level anyway)."""
    cfg, params = ckpt.config, ckpt.params
    for layer in range(cfg.n_layers):
        if layer in ckpt.anchors:
            continue
        params = permute_heads(cfg, params, layer, rng.permutation(cfg.n_heads))
        params = permute_neurons(cfg, params, layer, rng.permutation(cfg.d_ff))
    return params


def quality_ordering_suite(ckpt: ElasticCheckpoint, calibration_batches, held_out_batches=None,
                           n_seeds: int = 20, min_share: float = 0.9, seed: int = 0) -> dict:
    """Importance-ordered prefixes against equal-size random unit subsets.

    For each seed one random subset layout is drawn; at each level below
    full size the prefix wins when its calibration loss is not higher.
    With ``held_out_batches``, also checks that each level's adapters do not
    raise held-out loss over the bare sub-model.
    """
    from .training import mean_loss

    cfg = ckpt.config
    levels = [l for l in ckpt.levels if l.fraction < 1.0]
    prefix = [mean_loss(cfg, ckpt.params, calibration_batches, l.widths) for l in levels]
    wins = np.zeros(len(levels), dtype=int)
    gap = np.zeros(len(levels))
    rng = np.random.default_rng(seed)
    for _ in range(n_seeds):
        p = random_subset_params(ckpt, rng)
        rand = np.array([mean_loss(cfg, p, calibration_batches, l.widths) for l in levels])
        wins += np.asarray(prefix) <= rand
        gap += rand - prefix
    share = wins / n_seeds
    rows = [{"level": l.key, "prefix_loss": float(pl), "win_share": float(s), "mean_gap": float(g / n_seeds)}
            for l, pl, s, g in zip(levels, prefix, share, gap)]
    recovery = []
    if held_out_batches:
        for l in levels:
            ad = ckpt.adapters.get(l.key)
            bare = mean_loss(cfg, ckpt.params, held_out_batches, l.widths)
            with_ad = mean_loss(cfg, ckpt.params, held_out_batches, l.widths, ad) if ad else bare
            recovery.append({"level": l.key, "bare": bare, "adapted": with_ad, "ok": with_ad <= bare})
    ordering_ok = bool((share >= min_share).all())
    recovery_ok = all(r["ok"] for r in recovery)
    return {"n_seeds": n_seeds, "levels": rows, "recovery": recovery, "ordering_passed": ordering_ok,
            "recovery_passed": recovery_ok, "passed": ordering_ok and recovery_ok}


# --- latency-law calibration --------------------------------------------------------

# wide enough that a forward pass is dominated by matmul work, not interpreter overhead
CALIBRATION_CONFIG = dict(n_layers=2, n_heads=8, head_dim=64, d_ff=2048)


def calibration_suite(ckpt: ElasticCheckpoint | None = None, probe_lengths=(32, 64, 96, 128, 192),
                      levels=(0.2, 0.4, 0.6, 0.8, 1.0), repetitions: int = 9, max_mape: float = 0.15,
                      truth=(3e-6, 4e-4, 2e-5, 7e-5), seed: int = 0, vocab: TaskVocab = TaskVocab()) -> dict:
    """Fit the latency law against an exact-law timer and against wall time.

    Without ``ckpt`` the wall-clock fit runs on an untrained checkpoint of
    ``CALIBRATION_CONFIG`` carrying rank-8 adapters at every sub-level.
    """
    from .elastifier import init_adapters
    from .planner import CalibrationError, LawClock, calibrate
    from .runtime import WallClock

    if ckpt is None:
        cfg = ModelConfig(vocab_size=vocab.size, seed=seed, **CALIBRATION_CONFIG)
        model = TransformerLM.create(cfg)
        anchors = AnchorSet(frozenset())
        ckpt = reorder_units(model, profile_importance(model, sample_batches(seed, 1, 4, vocab=vocab)), anchors,
                             build_level_table(cfg, anchors))
        ckpt.adapter_rank = 8
        for lvl in ckpt.levels:
            if lvl.fraction < 1.0:
                ckpt.adapters[lvl.key] = init_adapters(cfg, lvl.widths, 8, seed)
    a, b, c, d = truth
    law = calibrate(ElasticRuntime(ckpt, clock=LawClock(a, b, c, d)), probe_lengths[:3], levels[::2], repetitions=1)
    law_err = max(abs(law.a - a), abs(law.b - b), abs(law.c - c), abs(law.d - d))
    try:
        wall = calibrate(ElasticRuntime(ckpt, clock=WallClock()), probe_lengths, levels, repetitions,
                         seed=seed, switch_levels=[levels[0], levels[-1]])
        residual, error = wall.residual, None
    except CalibrationError as exc:
        residual, error = {}, str(exc)
    ok_wall = error is None and max(residual["ttft_mape"], residual["tpot_mape"]) <= max_mape
    return {"law_max_abs_err": law_err, "wall_residual": residual, "wall_error": error, "max_mape": max_mape,
            "passed": law_err <= 1e-6 and ok_wall}

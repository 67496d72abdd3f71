"""SLO-aware joint (prompt level, model level) decisions.

The latency model is affine in the work: prefill costs ``a*L*s + b`` and a
decode step ``c*s + d`` for prompt length ``L`` and model level ``s``.  A
decision is feasible when its predicted TTFT (plus the level switch, at serving
time) and TPOT fit inside the SLO's fractions of the full-model latencies.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from .elastifier import DEFAULT_FRACTIONS, level_key
from .promptkit import compress, score_tokens, scorer_from_dict
from .task import EOS, TaskVocab


class CalibrationError(RuntimeError):
    pass


class InfeasibleSloError(RuntimeError):
    pass


class PolicyTrainingError(ValueError):
    pass


class BundleError(ValueError):
    pass


@dataclass(frozen=True)
class Slo:
    zeta_ttft: float
    zeta_tpot: float

    def __post_init__(self):
        for name in ("zeta_ttft", "zeta_tpot"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and 0 < v <= 1):
                raise ValueError(f"{name} must lie in (0, 1], got {v!r}")

    def as_tuple(self) -> tuple[float, float]:
        return (self.zeta_ttft, self.zeta_tpot)


# tightest last; trace level i = 1..6 counts from the tightest
STANDARD_SLOS = (
    Slo(1.0, 1.0),
    Slo(0.8, 0.9),
    Slo(0.6, 0.8),
    Slo(0.4, 0.7),
    Slo(0.2, 0.6),
    Slo(0.2, 0.5),
)


@dataclass(frozen=True, order=True)
class Decision:
    model_level: float
    prompt_level: float

    @property
    def key(self) -> tuple[str, str]:
        return (level_key(self.model_level), level_key(self.prompt_level))

    def to_dict(self) -> dict:
        return {"prompt_level": self.prompt_level, "model_level": self.model_level}


@dataclass(frozen=True)
class DecisionGrid:
    prompt_levels: tuple[float, ...] = DEFAULT_FRACTIONS
    model_levels: tuple[float, ...] = DEFAULT_FRACTIONS

    def __post_init__(self):
        for levels in (self.prompt_levels, self.model_levels):
            if not levels or any(not 0 < x <= 1 for x in levels):
                raise ValueError("grid levels must be non-empty and lie in (0, 1]")
            if any(b <= a for a, b in zip(levels, levels[1:])):
                raise ValueError("grid levels must be strictly increasing")

    def decisions(self) -> list[Decision]:
        """All cells, descending model level then descending prompt level."""
        return [Decision(s, p) for s in reversed(self.model_levels) for p in reversed(self.prompt_levels)]

    def __contains__(self, d: Decision) -> bool:
        return d.model_level in self.model_levels and d.prompt_level in self.prompt_levels

    def __len__(self) -> int:
        return len(self.prompt_levels) * len(self.model_levels)

    def to_dict(self) -> dict:
        return {"prompt_levels": list(self.prompt_levels), "model_levels": list(self.model_levels)}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionGrid":
        return cls(tuple(d["prompt_levels"]), tuple(d["model_levels"]))


# --- latency model ---------------------------------------------------------------

@dataclass
class LatencyModel:
    a: float
    b: float
    c: float
    d: float
    switch_costs: dict = field(default_factory=dict)  # (from_key, to_key) -> seconds
    residual: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.a > 0 and self.c > 0 and self.b >= 0 and self.d >= 0):
            raise CalibrationError(f"latency coefficients out of range: a={self.a} b={self.b} c={self.c} d={self.d}")

    def ttft(self, prompt_len: float, level: float) -> float:
        return self.a * prompt_len * level + self.b

    def tpot(self, level: float) -> float:
        return self.c * level + self.d

    def ttft_full(self, prompt_len: float) -> float:
        return self.ttft(prompt_len, 1.0)

    @property
    def tpot_full(self) -> float:
        return self.tpot(1.0)

    def switch_cost(self, from_level, to_level) -> float:
        if from_level is None:
            return 0.0
        src, dst = _key(from_level), _key(to_level)
        if src == dst:
            return 0.0
        try:
            return self.switch_costs[(src, dst)]
        except KeyError:
            # unmeasured pair: charge the worst measured switch
            return max(self.switch_costs.values(), default=0.0)

    def to_dict(self) -> dict:
        return {
            "a": self.a, "b": self.b, "c": self.c, "d": self.d,
            "switch_costs": [[s, t, v] for (s, t), v in sorted(self.switch_costs.items())],
            "residual": self.residual,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyModel":
        return cls(d["a"], d["b"], d["c"], d["d"],
                   {(s, t): v for s, t, v in d.get("switch_costs", [])}, dict(d.get("residual", {})))


def _key(level) -> str:
    return level if isinstance(level, str) else level_key(float(level))


def _fit_affine(x, y, what: str) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0:
        raise CalibrationError(f"singular {what} fit: probes do not vary")
    if not np.all(np.isfinite(y)):
        raise CalibrationError(f"non-finite {what} timings")
    # non-negative least squares keeps slope and intercept physical
    scale = np.abs(x).max()
    coef, _ = nnls(np.stack([x / scale, np.ones_like(x)], axis=1), y)
    slope, intercept = coef[0] / scale, coef[1]
    if slope <= 0:
        raise CalibrationError(f"{what} timings do not grow with work")
    return float(slope), float(intercept)


def _ape(pred, meas) -> np.ndarray:
    pred, meas = np.asarray(pred), np.asarray(meas)
    return np.abs(pred - meas) / np.maximum(np.abs(meas), 1e-300)


def fit_latency(prefill_samples, decode_samples, switch_costs=None) -> LatencyModel:
    """Fit from ``(L, s, seconds)`` prefill and ``(s, seconds)`` decode samples."""
    pre = np.asarray(prefill_samples, dtype=np.float64).reshape(-1, 3)
    dec = np.asarray(decode_samples, dtype=np.float64).reshape(-1, 2)
    if len(np.unique(pre[:, 0])) < 2 and len(np.unique(pre[:, 1])) < 2:
        raise CalibrationError("singular TTFT fit: probes do not vary")
    a, b = _fit_affine(pre[:, 0] * pre[:, 1], pre[:, 2], "TTFT")
    c, d = _fit_affine(dec[:, 0], dec[:, 1], "TPOT")
    tt = _ape(a * pre[:, 0] * pre[:, 1] + b, pre[:, 2])
    tp = _ape(c * dec[:, 0] + d, dec[:, 1])
    residual = {
        "ttft_mape": float(np.median(tt)),
        "tpot_mape": float(np.median(tp)),
        "ttft_max_ape": float(tt.max()),
        "tpot_max_ape": float(tp.max()),
        "n_prefill": int(len(pre)),
        "n_decode": int(len(dec)),
    }
    return LatencyModel(a, b, c, d, dict(switch_costs or {}), residual)


def calibrate(runtime, probe_lengths, levels, repetitions: int = 5, seed: int = 0,
              decode_steps: int = 4, switch_levels=None, warmup: int = 1) -> LatencyModel:
    """Profile ``runtime`` at every (length, level) probe and fit the latency model.

    Each probe's time is the median of ``repetitions`` runs.  Switch costs are
    measured for every ordered pair of ``switch_levels`` (default: every level
    in the checkpoint).
    """
    probe_lengths = sorted({int(x) for x in probe_lengths})
    levels = sorted({float(x) for x in levels})
    if len(probe_lengths) < 2 or len(levels) < 2:
        raise CalibrationError("calibration needs at least 2 probe lengths and 2 levels")
    if repetitions < 1:
        raise CalibrationError("repetitions must be positive")
    if probe_lengths[0] < 1:
        raise CalibrationError("probe lengths must be positive")
    rng = np.random.default_rng(seed)
    vocab = runtime.model.config.vocab_size
    start = runtime.level
    pre, dec = [], []
    for s in levels:
        runtime.switch_level(s)
        for L in probe_lengths:
            tokens = rng.integers(0, vocab, size=L).tolist()
            ttfts, steps = [], []
            for rep in range(warmup + repetitions):
                with runtime.request() as view:
                    (logits, cache), t = runtime.prefill(tokens, view, L + decode_steps)
                    tok = int(np.argmax(logits[-1]))
                    step_times = []
                    for _ in range(decode_steps):
                        (out, cache), dt = runtime.decode(cache, tok, view)
                        tok = int(np.argmax(out))
                        step_times.append(dt)
                if rep >= warmup:
                    ttfts.append(t)
                    steps.append(np.median(step_times) if step_times else np.nan)
            pre.append((L, s, float(np.median(ttfts))))
            if decode_steps:
                dec.append((s, float(np.nanmedian(steps))))
    if not dec:
        raise CalibrationError("decode_steps must be positive to fit TPOT")
    switch_keys = [l.key for l in runtime.ckpt.levels] if switch_levels is None else [_key(x) for x in switch_levels]
    switch = {}
    for src in switch_keys:
        for dst in switch_keys:
            if src == dst:
                continue
            billed = []
            for _ in range(repetitions):
                runtime.switch_level(src)
                billed.append(runtime.switch_level(dst).billed_time)
            switch[(src, dst)] = float(np.median(billed))
    runtime.switch_level(start)
    return fit_latency(pre, dec, switch)


class LawClock:
    """Test clock that reports an exact affine latency law."""

    deterministic = True

    def __init__(self, a: float, b: float, c: float, d: float, switch: float = 0.0):
        self.a, self.b, self.c, self.d, self.switch = a, b, c, d, switch

    def cost(self, kind: str, **work) -> float:
        if kind == "prefill":
            return self.a * work["n_tokens"] * work["fraction"] + self.b
        if kind == "decode":
            return self.c * work["fraction"] + self.d
        return self.switch

    def measure(self, fn, kind: str, **work):
        return fn(), self.cost(kind, **work)


# --- feasibility -----------------------------------------------------------------

def compressed_length(prompt_len: int, prompt_level: float) -> int:
    return max(1, math.ceil(round(prompt_level * prompt_len, 9)))


def predicted_latency(lm: LatencyModel, prompt_len: int, decision: Decision,
                      include_switch: bool = False, current_level=None) -> tuple[float, float]:
    ttft = lm.ttft(compressed_length(prompt_len, decision.prompt_level), decision.model_level)
    if include_switch:
        ttft += lm.switch_cost(current_level, decision.model_level)
    return ttft, lm.tpot(decision.model_level)


def feasible(lm: LatencyModel, slo: Slo, prompt_len: int, decision: Decision,
             include_switch: bool = False, current_level=None) -> bool:
    ttft, tpot = predicted_latency(lm, prompt_len, decision, include_switch, current_level)
    eps = 1e-12
    return (ttft <= slo.zeta_ttft * lm.ttft_full(prompt_len) * (1 + eps)
            and tpot <= slo.zeta_tpot * lm.tpot_full * (1 + eps))


def enumerate_feasible(lm: LatencyModel, slo: Slo, prompt_len: int, grid: DecisionGrid = DecisionGrid(),
                       include_switch: bool = False, current_level=None) -> list[Decision]:
    return [d for d in grid.decisions() if feasible(lm, slo, prompt_len, d, include_switch, current_level)]


def lightness(d: Decision) -> tuple[float, float]:
    """Sort key: smaller is lighter (model level first)."""
    return (d.model_level, d.prompt_level)


# --- self-induced labelling ------------------------------------------------------

def answer_correct(runtime, prompt, groundtruth, max_new_tokens: int | None = None) -> bool:
    target = list(groundtruth)
    gen = runtime.generate(prompt, max_new_tokens or len(target), stop_token=EOS)
    return gen.tokens[: len(target)] == target


def correctness_table(runtime, scorer, prompt, groundtruth, grid: DecisionGrid = DecisionGrid(),
                      protected=None) -> dict[tuple[str, str], bool]:
    """Greedy answer correctness for every grid cell, keyed by :attr:`Decision.key`.

    Cells are visited model level by model level so the runtime switches once
    per level.
    """
    protected = TaskVocab().protected if protected is None else protected
    scores = score_tokens(scorer, prompt)
    compressed = {p: compress(prompt, scores, p, protected) for p in grid.prompt_levels}
    start = runtime.level
    out = {}
    for s in grid.model_levels:
        runtime.switch_level(s)
        seen = {}
        for p in grid.prompt_levels:
            toks = tuple(compressed[p])
            if toks not in seen:
                seen[toks] = answer_correct(runtime, list(toks), groundtruth)
            out[Decision(s, p).key] = seen[toks]
    runtime.switch_level(start)
    return out


def fallback_rng(seed: int, *salt: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *[int(x) & 0xFFFFFFFF for x in salt]])


@dataclass(frozen=True)
class Label:
    decision: Decision
    correct: bool  # the label decision answers correctly
    fallback: bool  # no feasible decision was correct


def label_from_table(lm: LatencyModel, slo: Slo, prompt_len: int, table: dict, grid: DecisionGrid,
                     rng: np.random.Generator) -> Label:
    cands = enumerate_feasible(lm, slo, prompt_len, grid)
    if not cands:
        raise InfeasibleSloError(f"no decision meets {slo} for a {prompt_len}-token prompt")
    good = [d for d in cands if table[d.key]]
    if good:
        return Label(min(good, key=lightness), True, False)
    return Label(cands[int(rng.integers(len(cands)))], False, True)


def label_one(runtime, scorer, lm: LatencyModel, prompt, groundtruth, slo: Slo,
              grid: DecisionGrid = DecisionGrid(), seed: int = 0, table=None) -> Decision:
    """The lightest feasible decision that still answers correctly, else a
    seeded random feasible one.  Pass a precomputed ``table`` to reuse
    correctness across SLOs."""
    if table is None:
        table = correctness_table(runtime, scorer, prompt, groundtruth, grid)
    return label_from_table(lm, slo, len(prompt), table, grid, fallback_rng(seed)).decision


@dataclass
class LabelledExample:
    prompt: list
    groundtruth: list
    slo: Slo
    label: Label
    features: np.ndarray
    table: dict = field(default_factory=dict, repr=False)


# --- policy ----------------------------------------------------------------------

def score_summary(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    hi = s > 0.5
    return np.array([s.mean(), s.std(), s.min(), s.max(), hi.mean(), np.median(s)])


def policy_features(lm: LatencyModel, grid: DecisionGrid, slo: Slo, prompt_len: int, scores) -> np.ndarray:
    """SLO ratios, prompt length and score statistics, plus the largest
    feasible prompt level of every model level, which is a deterministic
    function of the first three under the latency model."""
    summary = score_summary(scores)
    frontier = []
    for s in grid.model_levels:
        ok = [p for p in grid.prompt_levels if feasible(lm, slo, prompt_len, Decision(s, p))]
        frontier.append(max(ok) if ok else 0.0)
    keep = summary[4]
    return np.concatenate([[slo.zeta_ttft, slo.zeta_tpot, prompt_len / 64.0], summary,
                           frontier, [float(f >= keep) for f in frontier]])


class _Head:
    """Multi-class head with numpy inference; sklearn only at fit time."""

    def __init__(self, classes, layers=(), mean=None, scale=None):
        self.classes = [float(c) for c in classes]
        self.layers = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)) for W, b in layers]
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.scale = None if scale is None else np.asarray(scale, dtype=np.float64)

    @classmethod
    def fit(cls, X, y, hidden, seed):
        classes = sorted(set(float(v) for v in y))
        if len(classes) == 1:
            return cls(classes)
        from sklearn.neural_network import MLPClassifier

        mean, scale = X.mean(0), X.std(0)
        scale[scale == 0] = 1.0
        clf = MLPClassifier(hidden_layer_sizes=hidden, max_iter=2000, random_state=seed, alpha=1e-3)
        clf.fit((X - mean) / scale, np.array([classes.index(float(v)) for v in y]))
        layers = list(zip(clf.coefs_, clf.intercepts_))
        head = cls([classes[i] for i in clf.classes_], layers, mean, scale)
        if len(head.classes) == 2:
            # sklearn emits one logistic output for two classes
            W, b = head.layers[-1]
            head.layers[-1] = (np.concatenate([-W, W], axis=1) / 2, np.concatenate([-b, b]) / 2)
        return head

    def logits(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if not self.layers:
            return np.zeros((len(X), 1))
        h = (X - self.mean) / self.scale
        for i, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if i < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
        return h

    def proba(self, X) -> np.ndarray:
        z = self.logits(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def cdf(self, x, levels) -> np.ndarray:
        """P(label <= level) for each of ``levels``."""
        p = self.proba(x[None])[0]
        cls = np.asarray(self.classes)
        return np.array([p[cls <= lv + 1e-12].sum() for lv in levels])

    def predict(self, X) -> list[float]:
        return [self.classes[i] for i in np.argmax(self.logits(X), axis=1)]

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "layers": [[W.tolist(), b.tolist()] for W, b in self.layers],
            "mean": None if self.mean is None else self.mean.tolist(),
            "scale": None if self.scale is None else self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "_Head":
        return cls(d["classes"], d["layers"], d["mean"], d["scale"])


@dataclass
class PolicyModel:
    """Two label heads plus a readout rule.

    The model head predicts the label's model level; the prompt head predicts
    its prompt level given the model level (one-hot appended to the features),
    so together they factor the joint label distribution.

    ``readout="argmax"`` returns the most likely label.  ``"dominance"`` treats
    a label as the lightest correct cell and assumes any cell at or above it on
    both axes also answers correctly, so a cell ``(s, p)`` succeeds with
    probability ``sum_{s' <= s} P(s') * P(prompt label <= p | s')``; it returns
    the switch-free feasible cell maximizing that, heavier cells winning ties.
    """

    grid: DecisionGrid
    model_head: _Head
    prompt_head: _Head
    meta: dict = field(default_factory=dict)
    readout: str = "dominance"

    def _with_level(self, X, level) -> np.ndarray:
        X = np.atleast_2d(X)
        onehot = np.zeros((len(X), len(self.grid.model_levels)))
        onehot[:, self.grid.model_levels.index(level)] = 1.0
        return np.concatenate([X, onehot], axis=1)

    def predict_features(self, X) -> list[Decision]:
        out = []
        for x, m in zip(np.atleast_2d(X), self.model_head.predict(X)):
            out.append(Decision(m, self.prompt_head.predict(self._with_level(x, m))[0]))
        return out

    def success_table(self, x) -> dict[Decision, float]:
        pm = self.model_head.proba(x[None])[0]
        mass = dict(zip(self.model_head.classes, pm))
        levels = self.grid.model_levels
        rows = np.zeros((len(levels), len(self.grid.prompt_levels)))
        for i, s in enumerate(levels):
            if mass.get(s, 0.0) > 0:
                rows[i] = mass[s] * self.prompt_head.cdf(self._with_level(x, s)[0], self.grid.prompt_levels)
        joint = np.cumsum(rows, axis=0)
        return {Decision(s, p): float(joint[i, j])
                for i, s in enumerate(levels) for j, p in enumerate(self.grid.prompt_levels)}

    def predict(self, lm: LatencyModel, slo: Slo, prompt_len: int, scores) -> Decision:
        x = policy_features(lm, self.grid, slo, prompt_len, scores)
        if self.readout == "argmax":
            return self.predict_features(x[None])[0]
        if self.readout != "dominance":
            raise ValueError(f"unknown readout {self.readout!r}")
        cands = enumerate_feasible(lm, slo, prompt_len, self.grid)
        if not cands:
            return self.predict_features(x[None])[0]
        table = self.success_table(x)
        return max(cands, key=lambda d: (table[d], lightness(d)))

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "model_head": self.model_head.to_dict(),
                "prompt_head": self.prompt_head.to_dict(), "meta": self.meta, "readout": self.readout}

    @classmethod
    def from_dict(cls, d) -> "PolicyModel":
        return cls(DecisionGrid.from_dict(d["grid"]), _Head.from_dict(d["model_head"]),
                   _Head.from_dict(d["prompt_head"]), d.get("meta", {}), d.get("readout", "dominance"))


def train_policy(examples, grid: DecisionGrid = DecisionGrid(), hidden=(64,), seed: int = 0,
                 readout: str = "dominance") -> PolicyModel:
    examples = list(examples)
    if not examples:
        raise PolicyTrainingError("no labelled examples")
    X = np.stack([e.features for e in examples])
    truth = [e.label.decision for e in examples]
    for d in truth:
        if d not in grid:
            raise PolicyTrainingError(f"label {d} is not on the decision grid")
    ym = [d.model_level for d in truth]
    yp = [d.prompt_level for d in truth]
    policy = PolicyModel(grid, _Head.fit(X, ym, hidden, seed), _Head(grid.prompt_levels[-1:]), readout=readout)
    Xp = np.concatenate([policy._with_level(x, m) for x, m in zip(X, ym)])
    policy.prompt_head = _Head.fit(Xp, yp, hidden, seed + 1)
    pred = policy.predict_features(X)
    policy.meta = {
        "n_examples": len(examples),
        "train_accuracy": float(np.mean([p == t for p, t in zip(pred, truth)])),
        "model_head_accuracy": float(np.mean([p.model_level == t.model_level for p, t in zip(pred, truth)])),
        "prompt_head_accuracy": float(np.mean(np.array(policy.prompt_head.predict(Xp)) == np.array(yp))),
        "hidden": list(hidden),
        "seed": seed,
    }
    return policy


@dataclass(frozen=True)
class Choice:
    decision: Decision
    predicted: Decision
    fallback: bool


def decide(policy: PolicyModel, lm: LatencyModel, prompt, scores, slo: Slo, current_level=None,
           rng: np.random.Generator | None = None) -> Choice:
    """Policy decision, guarded by feasibility including the switch from
    ``current_level``; falls back to a random feasible decision."""
    n = len(prompt)
    pred = policy.predict(lm, slo, n, scores)
    if pred in policy.grid and feasible(lm, slo, n, pred, True, current_level):
        return Choice(pred, pred, False)
    cands = enumerate_feasible(lm, slo, n, policy.grid, True, current_level)
    if not cands:
        raise InfeasibleSloError(f"no decision meets {slo} for a {n}-token prompt")
    rng = rng if rng is not None else np.random.default_rng(0)
    return Choice(cands[int(rng.integers(len(cands)))], pred, True)


# --- bundle ----------------------------------------------------------------------

BUNDLE_FORMAT = "elastiserve-policy-bundle"
BUNDLE_VERSION = 1


@dataclass
class PolicyBundle:
    scorer: object
    policy: PolicyModel | None
    latency: LatencyModel
    grid: DecisionGrid
    seeds: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "format_version": BUNDLE_VERSION,
            "scorer": self.scorer.to_dict(),
            "policy": None if self.policy is None else self.policy.to_dict(),
            "latency_model": self.latency.to_dict(),
            "grid": self.grid.to_dict(),
            "seeds": self.seeds,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyBundle":
        return cls(
            scorer_from_dict(d["scorer"]),
            None if d["policy"] is None else PolicyModel.from_dict(d["policy"]),
            LatencyModel.from_dict(d["latency_model"]),
            DecisionGrid.from_dict(d["grid"]),
            d.get("seeds", {}),
            d.get("meta", {}),
        )


def _digest(body: dict) -> str:
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def save_bundle(bundle: PolicyBundle, path) -> Path:
    body = bundle.to_dict()
    body["digest"] = _digest(body)
    path = Path(path)
    path.write_text(json.dumps(body, indent=1, sort_keys=True))
    return path


def load_bundle(path) -> PolicyBundle:
    try:
        body = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"unreadable policy bundle: {exc}") from exc
    if not isinstance(body, dict) or body.get("format") != BUNDLE_FORMAT:
        raise BundleError("not a policy bundle")
    if body.get("format_version") != BUNDLE_VERSION:
        raise BundleError(f"unsupported bundle version {body.get('format_version')!r}")
    digest = body.pop("digest", None)
    if digest != _digest(body):
        raise BundleError("policy bundle digest mismatch")
    try:
        return PolicyBundle.from_dict(body)
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"malformed policy bundle: {exc}") from exc

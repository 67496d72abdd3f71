"""End-to-end offline stages: elastify a trained model, label, build a bundle."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .elastifier import (
    DEFAULT_FRACTIONS,
    AnchorSet,
    ElasticCheckpoint,
    ImportanceTable,
    build_level_table,
    detect_anchors,
    profile_importance,
    reorder_units,
    train_adapters,
)
from .model import TransformerLM
from .planner import (
    STANDARD_SLOS,
    DecisionGrid,
    Decision,
    InfeasibleSloError,
    Label,
    LabelledExample,
    LatencyModel,
    PolicyBundle,
    Slo,
    correctness_table,
    fallback_rng,
    label_from_table,
    policy_features,
    train_policy,
)
from .promptkit import LearnedScorer, score_tokens, scorer_from_dict
from .task import TaskMix, TaskVocab, sample_batches
from .training import mean_loss

log = logging.getLogger(__name__)


class LabelFormatError(ValueError):
    pass


def dense_checkpoint(model: TransformerLM, meta=None) -> ElasticCheckpoint:
    """Wrap a freshly trained model as a single-level checkpoint (identity
    unit order) so it can be stored in the checkpoint format."""
    cfg = model.config
    return ElasticCheckpoint(
        cfg, model.params.copy(),
        np.tile(np.arange(cfg.n_heads), (cfg.n_layers, 1)),
        np.tile(np.arange(cfg.d_ff), (cfg.n_layers, 1)),
        ImportanceTable(np.zeros((cfg.n_layers, cfg.n_heads)), np.zeros((cfg.n_layers, cfg.d_ff))),
        AnchorSet(frozenset()),
        build_level_table(cfg, AnchorSet(frozenset()), (1.0,)),
        meta=dict(meta or {}),
    )


def elastify(model: TransformerLM, calibration_batches, recovery_batches=None, fractions=DEFAULT_FRACTIONS,
             anchor_fraction: float = 0.0, rank: int = 8, adapter_steps: int = 100, adapter_lr: float = 2e-3,
             validation_batches=None, seed: int = 0) -> ElasticCheckpoint:
    """Profile, lock anchors, reorder, build levels and fit per-level adapters.

    With ``validation_batches`` an adapter set is kept only if it does not
    raise validation loss over the bare sub-model; otherwise that level gets
    zero-initialized (no-op) adapters.
    """
    importance = profile_importance(model, calibration_batches)
    anchors = detect_anchors(model, calibration_batches, anchor_fraction)
    levels = build_level_table(model.config, anchors, fractions)
    ckpt = reorder_units(model, importance, anchors, levels)
    ckpt.adapter_rank = rank if adapter_steps > 0 and recovery_batches else 0
    if ckpt.adapter_rank:
        for i, lvl in enumerate(levels):
            if lvl.fraction >= 1.0:
                continue
            ad = train_adapters(ckpt, lvl.key, recovery_batches, rank, adapter_steps, adapter_lr, seed + i)
            if validation_batches:
                bare = mean_loss(ckpt.config, ckpt.params, validation_batches, lvl.widths)
                with_ad = mean_loss(ckpt.config, ckpt.params, validation_batches, lvl.widths, ad)
                if with_ad > bare:
                    log.info("level %s: adapters rejected (%.4f > %.4f)", lvl.key, with_ad, bare)
                    ad = train_adapters(ckpt, lvl.key, recovery_batches, rank, 0, adapter_lr, seed + i)
            ckpt.adapters[lvl.key] = ad
    ckpt.meta.update({"anchor_fraction": anchor_fraction, "seed": seed, "adapter_steps": adapter_steps})
    return ckpt


def default_batches(seed: int, n_batches: int = 4, batch_size: int = 32, mix: TaskMix = TaskMix(),
                    vocab: TaskVocab = TaskVocab()):
    return sample_batches(seed, n_batches, batch_size, mix, vocab, drop_p=0.0, drop_frac=0.0)


def fit_scorer(tasks, vocab: TaskVocab = TaskVocab(), seed: int = 0) -> LearnedScorer:
    return LearnedScorer(vocab).fit(tasks, seed=seed)


def label_dataset(runtime, scorer, lm: LatencyModel, tasks, slos=STANDARD_SLOS, grid: DecisionGrid = DecisionGrid(),
                  seed: int = 0, vocab: TaskVocab = TaskVocab()) -> list[LabelledExample]:
    """Self-induced labels for every (task, SLO) pair.

    Correctness over the grid is evaluated once per task and shared by all
    SLOs; the fallback draw for task ``t`` and SLO ``s`` uses stream
    ``(seed, t, s)``.  Pairs whose SLO admits no decision are skipped.
    """
    out, skipped = [], 0
    for ti, task in enumerate(tasks):
        table = correctness_table(runtime, scorer, list(task.prompt), task.target, grid, vocab.protected)
        scores = score_tokens(scorer, task.prompt)
        n = len(task.prompt)
        for si, slo in enumerate(slos):
            try:
                label = label_from_table(lm, slo, n, table, grid, fallback_rng(seed, ti, si))
            except InfeasibleSloError:
                skipped += 1
                continue
            out.append(LabelledExample(list(task.prompt), list(task.target), slo, label,
                                       policy_features(lm, grid, slo, n, scores), table))
    if skipped:
        log.info("skipped %d infeasible (task, SLO) pairs", skipped)
    return out


def build_bundle(scorer, lm: LatencyModel, examples, grid: DecisionGrid = DecisionGrid(), seed: int = 0,
                 meta=None) -> PolicyBundle:
    policy = train_policy(examples, grid, seed=seed) if examples else None
    return PolicyBundle(scorer, policy, lm, grid, {"policy": seed}, dict(meta or {}))


def sample_tasks(seed: int, n: int, mix: TaskMix = TaskMix(), vocab: TaskVocab = TaskVocab()):
    rng = np.random.default_rng(seed)
    return [mix.sample(rng, vocab) for _ in range(n)]


# --- label files ---------------------------------------------------------------

LABELS_FORMAT = "elastiserve-labels"


def save_labels(path, examples, scorer, lm: LatencyModel, grid: DecisionGrid, meta=None) -> Path:
    """Write labelled examples with the scorer and latency model that produced them."""
    body = {
        "format": LABELS_FORMAT,
        "scorer": scorer.to_dict(),
        "latency_model": lm.to_dict(),
        "grid": grid.to_dict(),
        "meta": dict(meta or {}),
        "examples": [{
            "prompt": [int(t) for t in e.prompt],
            "groundtruth": [int(t) for t in e.groundtruth],
            "slo": list(e.slo.as_tuple()),
            "decision": e.label.decision.to_dict(),
            "correct": e.label.correct,
            "fallback": e.label.fallback,
            "table": [[s, p, bool(v)] for (s, p), v in sorted(e.table.items())],
        } for e in examples],
    }
    path = Path(path)
    path.write_text(json.dumps(body, sort_keys=True))
    return path


def load_labels(path):
    """``(examples, scorer, latency model, grid, meta)``; features are
    recomputed from the stored scorer and latency model."""
    try:
        body = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LabelFormatError(f"unreadable label file: {exc}") from exc
    if not isinstance(body, dict) or body.get("format") != LABELS_FORMAT:
        raise LabelFormatError("not a label file")
    try:
        scorer = scorer_from_dict(body["scorer"])
        lm = LatencyModel.from_dict(body["latency_model"])
        grid = DecisionGrid.from_dict(body["grid"])
        examples = []
        for e in body["examples"]:
            slo = Slo(*e["slo"])
            d = Decision(e["decision"]["model_level"], e["decision"]["prompt_level"])
            scores = score_tokens(scorer, e["prompt"])
            examples.append(LabelledExample(
                e["prompt"], e["groundtruth"], slo, Label(d, e["correct"], e["fallback"]),
                policy_features(lm, grid, slo, len(e["prompt"]), scores),
                {(s, p): v for s, p, v in e["table"]},
            ))
    except (KeyError, TypeError, ValueError) as exc:
        raise LabelFormatError(f"malformed label file: {exc}") from exc
    return examples, scorer, lm, grid, body.get("meta", {})

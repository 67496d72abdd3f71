import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastiserve.pipeline import build_bundle, label_dataset, sample_tasks
from elastiserve.planner import (
    STANDARD_SLOS,
    Decision,
    Label,
    LabelledExample,
    LatencyModel,
    LawClock,
    Slo,
    calibrate,
    policy_features,
    train_policy,
)
from elastiserve.promptkit import UniformScorer
from elastiserve.runtime import ElasticRuntime
from elastiserve.service import (
    TRACE_SLOS,
    ReplayReport,
    Request,
    TraceFormatError,
    TraceSpec,
    aggregate,
    largest_remainder,
    read_trace,
    render_report,
    replay,
    slo_counts,
    synth_trace,
    write_trace,
)
from elastiserve.task import TaskMix

CLOCK = dict(a=2e-5, b=1e-4, c=3e-5, d=2e-5, switch=1e-6)


def _runtime(ckpt):
    return ElasticRuntime(ckpt, 1.0, clock=LawClock(**CLOCK))


@pytest.fixture(scope="module")
def bundle(tiny_ckpt):
    rt = _runtime(tiny_ckpt)
    lm = calibrate(rt, [8, 16, 24], [0.2, 0.6, 1.0], repetitions=1, switch_levels=list(tiny_ckpt.levels.fractions))
    scorer = UniformScorer()
    ex = label_dataset(rt, scorer, lm, sample_tasks(7, 8, TaskMix(2, 3, 2)))
    return build_bundle(scorer, lm, ex, seed=0)


# --- trace synthesis ---------------------------------------------------------------

def test_uniform_counts():
    assert slo_counts(600, 0.0) == [100] * 6


def test_skewed_counts_follow_formula():
    w = [math.exp(0.25 * i) for i in range(1, 7)]
    quotas = [600 * x / sum(w) for x in w]
    floors = [math.floor(q) for q in quotas]
    # hand-rolled largest remainder on the direct evaluation
    order = sorted(range(6), key=lambda i: -(quotas[i] - floors[i]))
    expect = list(floors)
    for i in order[: 600 - sum(floors)]:
        expect[i] += 1
    assert slo_counts(600, 0.25) == expect == [49, 63, 81, 103, 133, 171]
    assert all(abs(c - q) < 1 for c, q in zip(expect, quotas))


@settings(max_examples=200, deadline=None)
@given(n=st.integers(0, 5000), alpha=st.floats(-2, 2))
def test_counts_sum_to_n(n, alpha):
    c = slo_counts(n, alpha)
    assert sum(c) == n and min(c) >= 0


def test_largest_remainder_ties_go_first():
    assert largest_remainder([0.5, 0.5, 0.5, 0.5], 2) == [1, 1, 0, 0]


def test_trace_counts_and_arrivals():
    tr = synth_trace(TraceSpec(120, alpha=0.25, seed=4))
    got = np.bincount([r.slo_level for r in tr], minlength=7)[1:].tolist()
    assert got == slo_counts(120, 0.25)
    assert all(r.slo == TRACE_SLOS[r.slo_level - 1] for r in tr)
    t = [r.arrival_time for r in tr]
    assert t == sorted(t) and t[0] > 0
    assert TRACE_SLOS[0] == Slo(0.2, 0.5)


def test_trace_bytes_reproducible(tmp_path):
    a = write_trace(synth_trace(TraceSpec(50, alpha=0.1, seed=9)), tmp_path / "a.jsonl")
    b = write_trace(synth_trace(TraceSpec(50, alpha=0.1, seed=9)), tmp_path / "b.jsonl")
    c = write_trace(synth_trace(TraceSpec(50, alpha=0.1, seed=10)), tmp_path / "c.jsonl")
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()
    assert read_trace(a) == synth_trace(TraceSpec(50, alpha=0.1, seed=9))


def test_trace_format_errors(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"id": 0}\n')
    with pytest.raises(TraceFormatError, match="line 1"):
        read_trace(p)
    tr = synth_trace(TraceSpec(2, seed=0))
    p.write_text(tr[1].to_json() + "\n" + tr[0].to_json() + "\n")
    with pytest.raises(TraceFormatError, match="decrease"):
        read_trace(p)


def test_request_validation():
    with pytest.raises(ValueError):
        Request(0, (), Slo(1, 1), 6, (1,), 0.0)
    with pytest.raises(ValueError):
        TraceSpec(rate=0)


# --- replay ------------------------------------------------------------------------

def test_replay_deterministic(tiny_ckpt, bundle):
    tr = synth_trace(TraceSpec(30, seed=2, mix=TaskMix(2, 3, 2)))
    a = replay(tr, _runtime(tiny_ckpt), bundle, seed=1)
    b = replay(tr, _runtime(tiny_ckpt), bundle, seed=1)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)


def test_replay_decisions_feasible_and_switch_billed(tiny_ckpt, bundle):
    tr = synth_trace(TraceSpec(30, seed=3, mix=TaskMix(2, 3, 2)))
    rep = replay(tr, _runtime(tiny_ckpt), bundle)
    served = [r for r in rep.rows if not r.rejected]
    assert served and all(r.feasible for r in served)
    for r in served:
        if r.switched:
            assert r.switch_time > 0
    # exact-law clock: the ceil-length prediction bounds the floor-length measurement
    assert all(r.measured_ttft <= r.predicted_ttft * (1 + 1e-9) for r in served)
    assert all(r.slo_met_strict for r in served)
    assert rep.aggregates["slo_compliance"] == len(served) / len(rep.rows)


def test_single_full_slo_request_uses_full_model(tiny_ckpt, bundle):
    from elastiserve.model import greedy_generate

    full = Decision(1.0, 1.0)
    ex = [LabelledExample([1] * 20, [3], s, Label(full, True, False),
                          policy_features(bundle.latency, bundle.grid, s, 20, np.full(20, 0.5))) for s in STANDARD_SLOS]
    pol = train_policy(ex, bundle.grid, readout="argmax")
    b = dataclasses.replace(bundle, policy=pol)
    req = synth_trace(TraceSpec(1, slos=(Slo(1.0, 1.0),), seed=5, mix=TaskMix(2, 3, 2)))
    rep = replay(req, _runtime(tiny_ckpt), b)
    row = rep.rows[0]
    assert row.decision == full.to_dict() and row.compressed_len == row.prompt_len
    rt = _runtime(tiny_ckpt)
    out = greedy_generate(tiny_ckpt.model, list(req[0].prompt), len(req[0].groundtruth), rt.view)
    assert row.correct == (tuple(out) == req[0].groundtruth)


def test_infeasible_request_is_rejected_and_replay_continues(tiny_ckpt, bundle):
    # fixed costs dominate, so half-budget TTFT is out of reach for every decision
    lm = LatencyModel(1e-9, 1.0, 1e-9, 1.0)
    b = dataclasses.replace(bundle, latency=lm)
    tr = synth_trace(TraceSpec(4, slos=(Slo(0.5, 1.0), Slo(1.0, 1.0)), seed=0, mix=TaskMix(2, 3, 2)))
    rep = replay(tr, _runtime(tiny_ckpt), b)
    rej = [r for r in rep.rows if r.rejected]
    assert rej and all(not r.slo_met and not r.correct and r.decision is None for r in rej)
    assert all(not r.rejected for r in rep.rows if r.slo_level == 2)
    assert rep.aggregates["n_rejected"] == len(rej)


def test_replay_requires_policy(tiny_ckpt, bundle):
    with pytest.raises(ValueError):
        replay([], _runtime(tiny_ckpt), dataclasses.replace(bundle, policy=None))


# --- reports -----------------------------------------------------------------------

def test_empty_trace_report(tiny_ckpt, bundle):
    rep = replay([], _runtime(tiny_ckpt), bundle)
    assert rep.aggregates["n_requests"] == 0 and rep.aggregates["accuracy"] == 0.0
    assert "requests            0" in render_report(rep)
    assert json.loads(render_report(rep, "json"))["per_slo"] == []


def test_aggregates_recompute_from_rows(tiny_ckpt, bundle):
    rep = replay(synth_trace(TraceSpec(24, seed=6, mix=TaskMix(2, 3, 2))), _runtime(tiny_ckpt), bundle)
    back = ReplayReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert aggregate(back.rows, rep.aggregates["peak_resident_bytes"]) == rep.aggregates
    n = len(rep.rows)
    assert rep.aggregates["accuracy"] == sum(r.correct and r.slo_met for r in rep.rows) / n
    served = [r for r in rep.rows if not r.rejected]
    share = sum(r.switch_time for r in served) / sum(r.measured_ttft for r in served)
    assert rep.aggregates["switch_time_share"] == pytest.approx(share)


def test_table_and_json_agree(tiny_ckpt, bundle):
    rep = replay(synth_trace(TraceSpec(12, seed=8, mix=TaskMix(2, 3, 2))), _runtime(tiny_ckpt), bundle)
    js = json.loads(render_report(rep, "json"))
    table = render_report(rep, "table")
    assert f"{js['aggregates']['accuracy']:.4f}" in table
    assert f"{js['aggregates']['slo_compliance']:.4f}" in table
    with pytest.raises(ValueError):
        render_report(rep, "xml")


def test_accuracy_counts_only_met_requests():
    base = dict(slo_level=1, prompt_len=4, compressed_len=4, decision={"model_level": 1.0, "prompt_level": 1.0},
                fallback=False, switched=False, switch_time=0.0, predicted_ttft=1.0, predicted_tpot=1.0,
                measured_ttft=1.0, measured_tpot=1.0, budget_ttft=1.0, budget_tpot=1.0, feasible=True,
                slo_met_strict=False, within_envelope=True)
    from elastiserve.service import RequestResult

    rows = [RequestResult(0, slo_met=True, correct=True, **base), RequestResult(1, slo_met=False, correct=True, **base)]
    a = aggregate(rows)
    assert a["accuracy"] == 0.5 and a["raw_accuracy"] == 1.0

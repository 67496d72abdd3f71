import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastiserve.elastifier import DEFAULT_FRACTIONS
from elastiserve.planner import (
    STANDARD_SLOS,
    BundleError,
    CalibrationError,
    Decision,
    DecisionGrid,
    InfeasibleSloError,
    LabelledExample,
    LatencyModel,
    LawClock,
    PolicyBundle,
    PolicyTrainingError,
    Slo,
    calibrate,
    compressed_length,
    correctness_table,
    decide,
    enumerate_feasible,
    fallback_rng,
    feasible,
    fit_latency,
    label_from_table,
    lightness,
    load_bundle,
    policy_features,
    save_bundle,
    train_policy,
)
from elastiserve.promptkit import UniformScorer
from elastiserve.runtime import ElasticRuntime

GRID = DecisionGrid()
LM = LatencyModel(a=1e-4, b=2e-4, c=1e-4, d=3e-5)


# --- latency model ------------------------------------------------------------

def test_exact_law_recovered(tiny_ckpt):
    rt = ElasticRuntime(tiny_ckpt, 1.0, clock=LawClock(2.0, 5.0, 0.7, 0.1))
    lm = calibrate(rt, [4, 8, 16], [0.2, 0.5, 1.0], repetitions=2)
    assert abs(lm.a - 2.0) <= 1e-6 and abs(lm.b - 5.0) <= 1e-6
    assert abs(lm.c - 0.7) <= 1e-6 and abs(lm.d - 0.1) <= 1e-6
    assert lm.residual["ttft_mape"] < 1e-9


def test_fit_from_samples():
    pre = [(L, s, 2 * L * s + 5) for L in (4, 8) for s in (0.5, 1.0)]
    dec = [(s, 3 * s + 1) for s in (0.5, 1.0)]
    lm = fit_latency(pre, dec)
    assert lm.a == pytest.approx(2) and lm.b == pytest.approx(5)
    assert lm.c == pytest.approx(3) and lm.d == pytest.approx(1)


def test_model_form_properties():
    lm = LatencyModel(2.0, 5.0, 1.0, 0.5)
    assert lm.ttft(20, 0.5) - lm.b == pytest.approx(2 * (lm.ttft(10, 0.5) - lm.b))
    # TPOT takes no prompt length at all
    assert lm.tpot(0.5) == 1.0


def test_singular_fit():
    with pytest.raises(CalibrationError):
        fit_latency([(8, 0.5, 1.0), (8, 0.5, 1.1)], [(0.5, 1.0), (1.0, 2.0)])
    with pytest.raises(CalibrationError):
        fit_latency([(4, 0.5, 1.0), (8, 0.5, 2.0)], [(0.5, 1.0), (0.5, 1.0)])


def test_calibration_needs_two_probes(tiny_ckpt):
    rt = ElasticRuntime(tiny_ckpt, 1.0, clock=LawClock(1, 1, 1, 1))
    with pytest.raises(CalibrationError):
        calibrate(rt, [8], [0.2, 1.0])
    with pytest.raises(CalibrationError):
        calibrate(rt, [4, 8], [1.0])


def test_switch_costs_measured_pairwise(tiny_ckpt):
    rt = ElasticRuntime(tiny_ckpt, 1.0, clock=LawClock(1, 1, 1, 1, switch=0.25))
    lm = calibrate(rt, [4, 8], [0.5, 1.0], repetitions=1, switch_levels=[0.2, 0.5, 1.0])
    assert len(lm.switch_costs) == 6
    assert lm.switch_cost(0.2, 0.5) == 0.25 and lm.switch_cost(0.5, 0.5) == 0.0
    assert lm.switch_cost(None, 0.5) == 0.0
    assert rt.level == "1"


def test_latency_model_round_trip():
    lm = LatencyModel(1.0, 2.0, 3.0, 4.0, {("0.2", "1"): 0.5}, {"ttft_mape": 0.1})
    assert LatencyModel.from_dict(lm.to_dict()) == lm


def test_bad_coefficients():
    with pytest.raises(CalibrationError):
        LatencyModel(0.0, 1.0, 1.0, 1.0)


# --- feasibility ----------------------------------------------------------------

def test_full_slo_full_decision_feasible():
    assert feasible(LM, Slo(1.0, 1.0), 30, Decision(1.0, 1.0))


def test_budget_below_fixed_cost_is_empty():
    lm = LatencyModel(1e-6, 1.0, 1e-6, 1.0)
    slo = Slo(0.5, 1.0)  # half of TTFT_full is below b for every decision
    assert enumerate_feasible(lm, slo, 20) == []


def test_grid_size_and_order():
    cands = enumerate_feasible(LM, Slo(1.0, 1.0), 40)
    assert len(cands) == len(GRID) == 81
    assert cands == sorted(cands, key=lambda d: (-d.model_level, -d.prompt_level))


def test_slo_validation():
    with pytest.raises(ValueError):
        Slo(0.0, 0.5)
    with pytest.raises(ValueError):
        Slo(0.5, 1.5)


def test_compressed_length_ceil():
    assert compressed_length(10, 0.25) == 3
    assert compressed_length(10, 0.3) == 3
    assert compressed_length(1, 0.2) == 1


@settings(max_examples=200, deadline=None)
@given(L=st.integers(1, 120), zt=st.floats(0.05, 1.0), zp=st.floats(0.05, 1.0),
       a=st.floats(1e-6, 1e-3), b=st.floats(0, 1e-3), c=st.floats(1e-6, 1e-3), d=st.floats(0, 1e-3))
def test_enumeration_matches_brute_force(L, zt, zp, a, b, c, d):
    lm, slo = LatencyModel(a, b, c, d), Slo(zt, zp)
    brute = []
    for s in DEFAULT_FRACTIONS:
        for p in DEFAULT_FRACTIONS:
            n = compressed_length(L, p)
            if a * n * s + b <= zt * (a * L + b) * (1 + 1e-12) and c * s + d <= zp * (c + d) * (1 + 1e-12):
                brute.append(Decision(s, p))
    assert set(enumerate_feasible(lm, slo, L)) == set(brute)


@settings(max_examples=200, deadline=None)
@given(L=st.integers(1, 120), zt=st.floats(0.05, 1.0), zp=st.floats(0.05, 1.0),
       dt=st.floats(0, 0.5), dp=st.floats(0, 0.5))
def test_relaxing_slo_never_shrinks_feasible_set(L, zt, zp, dt, dp):
    tight = set(enumerate_feasible(LM, Slo(zt, zp), L))
    loose = set(enumerate_feasible(LM, Slo(min(1.0, zt + dt), min(1.0, zp + dp)), L))
    assert tight <= loose


def test_switch_cost_can_break_feasibility():
    lm = LatencyModel(1e-4, 1e-4, 1e-4, 1e-5, {("1", "0.5"): 1.0})
    d = Decision(0.5, 1.0)
    assert feasible(lm, Slo(1.0, 1.0), 20, d)
    assert not feasible(lm, Slo(1.0, 1.0), 20, d, include_switch=True, current_level=1.0)


# --- labelling -------------------------------------------------------------------

def _table(correct):
    return {d.key: bool(correct(d)) for d in GRID.decisions()}


def test_singleton_feasible_set():
    lm = LatencyModel(1.0, 0.0, 1.0, 0.0)
    slo = Slo(0.04, 0.2)
    assert enumerate_feasible(lm, slo, 10) == [Decision(0.2, 0.2)]
    lab = label_from_table(lm, slo, 10, _table(lambda d: True), GRID, fallback_rng(0))
    assert lab.decision == Decision(0.2, 0.2) and lab.correct and not lab.fallback


def test_label_prefers_model_that_answers():
    table = _table(lambda d: d.model_level > 0.5)
    lab = label_from_table(LM, Slo(1.0, 1.0), 30, table, GRID, fallback_rng(0))
    assert lab.decision.model_level > 0.5
    assert lab.decision == Decision(0.6, 0.2)


def test_all_wrong_falls_back_deterministically():
    table = _table(lambda d: False)
    a = label_from_table(LM, Slo(0.6, 0.8), 30, table, GRID, fallback_rng(3, 1, 2))
    b = label_from_table(LM, Slo(0.6, 0.8), 30, table, GRID, fallback_rng(3, 1, 2))
    assert a == b and a.fallback and not a.correct
    assert a.decision in enumerate_feasible(LM, Slo(0.6, 0.8), 30)


def test_no_feasible_decision_raises():
    with pytest.raises(InfeasibleSloError):
        label_from_table(LatencyModel(1e-6, 1.0, 1e-6, 1.0), Slo(0.5, 1.0), 20, _table(lambda d: True), GRID,
                         fallback_rng(0))


@settings(max_examples=100, deadline=None)
@given(L=st.integers(4, 60), slo=st.sampled_from(STANDARD_SLOS), bits=st.lists(st.booleans(), min_size=81, max_size=81))
def test_label_minimality_property(L, slo, bits):
    table = {d.key: b for d, b in zip(GRID.decisions(), bits)}
    cands = enumerate_feasible(LM, slo, L)
    if not cands:
        return
    lab = label_from_table(LM, slo, L, table, GRID, fallback_rng(0))
    assert lab.decision in cands
    if lab.correct:
        assert not any(table[d.key] and lightness(d) < lightness(lab.decision) for d in cands)
    else:
        assert not any(table[d.key] for d in cands)


class _StubRuntime:
    """Answers correctly only at model levels above 0.5."""

    def __init__(self):
        self.level = "1"
        self.switches = 0

    def switch_level(self, lvl):
        self.level = lvl
        self.switches += 1

    def generate(self, prompt, n, stop_token=None):
        from elastiserve.runtime import Generation

        lvl = float(self.level)
        return Generation([7, 3] if lvl > 0.5 else [8, 3], 0.0, 0.0, [], len(prompt), str(self.level))


def test_correctness_table_exhaustive():
    rt = _StubRuntime()
    table = correctness_table(rt, UniformScorer(), [1, 5, 6, 2, 5], [7, 3])
    assert len(table) == 81
    assert all(v == (float(k[0]) > 0.5) for k, v in table.items())
    assert rt.switches == 9 + 1 and rt.level == "1"


# --- policy ----------------------------------------------------------------------

def _examples(label_fn, n=40, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        slo = STANDARD_SLOS[i % len(STANDARD_SLOS)]
        L = int(rng.integers(10, 40))
        scores = rng.random(L)
        d = label_fn(slo, L)
        from elastiserve.planner import Label

        out.append(LabelledExample([1] * L, [3], slo, Label(d, True, False), policy_features(LM, GRID, slo, L, scores)))
    return out


def test_constant_label_policy():
    d = Decision(0.2, 0.2)
    pol = train_policy(_examples(lambda slo, L: d), GRID, readout="argmax")
    rng = np.random.default_rng(5)
    for slo in STANDARD_SLOS:
        assert pol.predict(LM, slo, 25, rng.random(25)) == d
    assert pol.meta["train_accuracy"] == 1.0


def test_policy_output_inside_grid():
    ex = _examples(lambda slo, L: Decision(slo.zeta_tpot if slo.zeta_tpot in DEFAULT_FRACTIONS else 0.5, 0.5), 60)
    for readout in ("argmax", "dominance"):
        pol = train_policy(ex, GRID, readout=readout)
        rng = np.random.default_rng(1)
        for slo in STANDARD_SLOS:
            assert pol.predict(LM, slo, int(rng.integers(5, 50)), rng.random(30)) in GRID


def test_empty_dataset():
    with pytest.raises(PolicyTrainingError):
        train_policy([], GRID)


def test_off_grid_label_rejected():
    with pytest.raises(PolicyTrainingError):
        train_policy(_examples(lambda slo, L: Decision(0.55, 0.5), 4), GRID)


def test_decide_keeps_feasible_prediction():
    d = Decision(0.2, 0.2)
    pol = train_policy(_examples(lambda slo, L: d), GRID, readout="argmax")
    ch = decide(pol, LM, [1] * 30, np.full(30, 0.5), Slo(0.6, 0.8))
    assert ch.decision == d and not ch.fallback


def test_decide_falls_back_to_feasible():
    full = Decision(1.0, 1.0)
    pol = train_policy(_examples(lambda slo, L: full), GRID, readout="argmax")
    slo = Slo(0.4, 0.7)
    ch = decide(pol, LM, [1] * 30, np.full(30, 0.5), slo, current_level=1.0, rng=np.random.default_rng(2))
    assert ch.fallback and ch.predicted == full
    assert feasible(LM, slo, 30, ch.decision, True, 1.0)


def test_decide_surfaces_infeasible_slo():
    pol = train_policy(_examples(lambda slo, L: Decision(0.2, 0.2)), GRID, readout="argmax")
    lm = LatencyModel(1e-6, 1.0, 1e-6, 1.0)
    with pytest.raises(InfeasibleSloError):
        decide(pol, lm, [1] * 10, np.full(10, 0.5), Slo(0.5, 1.0))


@settings(max_examples=100, deadline=None)
@given(L=st.integers(3, 80), slo=st.sampled_from(STANDARD_SLOS), cur=st.sampled_from(DEFAULT_FRACTIONS),
       seed=st.integers(0, 1000))
def test_decide_always_feasible_with_switch(L, slo, cur, seed):
    lm = LatencyModel(1e-4, 2e-4, 1e-4, 3e-5, {(a, b): 2e-5 for a in map(str, DEFAULT_FRACTIONS)
                                               for b in map(str, DEFAULT_FRACTIONS) if a != b})
    pol = _POLICY
    try:
        ch = decide(pol, lm, [1] * L, np.random.default_rng(seed).random(L), slo, cur, np.random.default_rng(seed))
    except InfeasibleSloError:
        assert not enumerate_feasible(lm, slo, L, GRID, True, cur)
        return
    assert feasible(lm, slo, L, ch.decision, True, cur)


_POLICY = train_policy(_examples(lambda slo, L: Decision(1.0, 1.0) if slo.zeta_tpot == 1.0 else Decision(0.5, 0.6), 60),
                       GRID)


def test_bundle_round_trip(tmp_path):
    b = PolicyBundle(UniformScorer(), _POLICY, LM, GRID, {"policy": 0}, {"clock": "device"})
    path = save_bundle(b, tmp_path / "b.json")
    back = load_bundle(path)
    x = policy_features(LM, GRID, Slo(0.6, 0.8), 20, np.full(20, 0.4))
    assert back.policy.predict_features(x[None]) == _POLICY.predict_features(x[None])
    assert back.latency == LM and back.meta == {"clock": "device"}


def test_bundle_tamper_detected(tmp_path):
    import json

    path = save_bundle(PolicyBundle(UniformScorer(), _POLICY, LM, GRID), tmp_path / "b.json")
    body = json.loads(path.read_text())
    body["latency_model"]["a"] *= 2
    path.write_text(json.dumps(body))
    with pytest.raises(BundleError):
        load_bundle(path)

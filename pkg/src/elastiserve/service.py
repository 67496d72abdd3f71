"""Request traces, trace replay against an elastic runtime, and reporting."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .planner import (
    STANDARD_SLOS,
    Decision,
    InfeasibleSloError,
    PolicyBundle,
    Slo,
    decide,
    enumerate_feasible,
    fallback_rng,
    feasible,
    predicted_latency,
)
from .promptkit import compress, score_tokens
from .task import EOS, TaskMix, TaskVocab

# trace SLO level i = 1..6, tightest first
TRACE_SLOS = tuple(reversed(STANDARD_SLOS))
# latency comparisons absorb float rounding of the summed terms
REL_EPS = 1e-9


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Request:
    id: int
    prompt: tuple
    slo: Slo
    slo_level: int
    groundtruth: tuple
    arrival_time: float

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("request prompt is empty")

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id,
            "tokens": list(self.prompt),
            "slo": [self.slo.zeta_ttft, self.slo.zeta_tpot],
            "slo_level": self.slo_level,
            "groundtruth": list(self.groundtruth),
            "arrival_time": self.arrival_time,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Request":
        d = json.loads(line)
        return cls(int(d["id"]), tuple(int(t) for t in d["tokens"]), Slo(*d["slo"]), int(d["slo_level"]),
                   tuple(int(t) for t in d["groundtruth"]), float(d["arrival_time"]))


@dataclass(frozen=True)
class TraceSpec:
    n_requests: int = 600
    slos: tuple = TRACE_SLOS
    alpha: float = 0.0
    rate: float = 1.0  # Poisson arrivals per second
    seed: int = 0
    mix: TaskMix = TaskMix()

    def __post_init__(self):
        if self.n_requests < 0:
            raise ValueError("n_requests must be non-negative")
        if not self.slos:
            raise ValueError("at least one SLO is required")
        if not self.rate > 0:
            raise ValueError("arrival rate must be positive")


def largest_remainder(quotas, total: int) -> list[int]:
    """Integer counts summing to ``total``; leftover units go to the largest
    fractional parts, earlier entries winning ties."""
    q = np.asarray(quotas, dtype=np.float64)
    base = np.floor(q + 1e-9).astype(int)
    left = total - int(base.sum())
    order = sorted(range(len(q)), key=lambda i: (-(q[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base.tolist()


def slo_quotas(n: int, alpha: float, n_levels: int = 6) -> np.ndarray:
    w = np.exp(alpha * np.arange(1, n_levels + 1))
    return n * w / w.sum()


def slo_counts(n: int, alpha: float, n_levels: int = 6) -> list[int]:
    return largest_remainder(slo_quotas(n, alpha, n_levels), n)


def synth_trace(spec: TraceSpec, vocab: TaskVocab = TaskVocab()) -> list[Request]:
    rng = np.random.default_rng(spec.seed)
    counts = slo_counts(spec.n_requests, spec.alpha, len(spec.slos))
    levels = np.repeat(np.arange(1, len(spec.slos) + 1), counts)
    rng.shuffle(levels)
    gaps = rng.exponential(1.0 / spec.rate, size=len(levels))
    arrivals = np.cumsum(gaps)
    out = []
    for i, lvl in enumerate(levels.tolist()):
        task = spec.mix.sample(rng, vocab)
        out.append(Request(i, task.prompt, spec.slos[lvl - 1], lvl, task.target, round(float(arrivals[i]), 9)))
    return out


def write_trace(trace, path) -> Path:
    path = Path(path)
    path.write_text("".join(r.to_json() + "\n" for r in trace))
    return path


def read_trace(path) -> list[Request]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(Request.from_json(line))
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"line {n}: {exc}") from exc
    if any(b.arrival_time < a.arrival_time for a, b in zip(out, out[1:])):
        raise TraceFormatError("arrival times decrease")
    return out


# --- replay ------------------------------------------------------------------------

@dataclass
class RequestResult:
    id: int
    slo_level: int
    prompt_len: int
    compressed_len: int
    decision: dict | None
    fallback: bool
    switched: bool
    switch_time: float
    predicted_ttft: float
    predicted_tpot: float
    measured_ttft: float
    measured_tpot: float
    budget_ttft: float
    budget_tpot: float
    feasible: bool
    slo_met: bool
    slo_met_strict: bool
    within_envelope: bool
    correct: bool
    rejected: bool = False  # no decision fits the SLO; the request is refused, not served


@dataclass
class ReplayReport:
    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"aggregates": self.aggregates, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d) -> "ReplayReport":
        return cls([RequestResult(**r) for r in d["rows"]], dict(d["aggregates"]))


def aggregate(rows, peak_resident_bytes: int = 0) -> dict:
    n = len(rows)
    served = [r for r in rows if not r.rejected]
    met = [r for r in rows if r.slo_met]
    ttft_total = sum(r.measured_ttft for r in served)
    switch_total = sum(r.switch_time for r in served)
    env = [r for r in rows if r.within_envelope]
    return {
        "n_requests": n,
        "n_rejected": n - len(served),
        # a request counts as answered only if it was also served within its SLO
        "accuracy": sum(r.correct for r in met) / n if n else 0.0,
        "raw_accuracy": sum(r.correct for r in rows) / n if n else 0.0,
        "slo_compliance": len(met) / n if n else 0.0,
        "strict_slo_compliance": sum(r.slo_met_strict for r in rows) / n if n else 0.0,
        # share of issued decisions that satisfy the predicate; refusals issue none
        "feasible_rate": sum(r.feasible for r in served) / len(served) if served else 0.0,
        "fallback_rate": sum(r.fallback for r in rows) / n if n else 0.0,
        "n_within_envelope": len(env),
        "envelope_compliance": sum(r.slo_met for r in env) / len(env) if env else 0.0,
        "n_switches": sum(r.switched for r in rows),
        "switch_time": switch_total,
        "total_ttft": ttft_total,
        "mean_ttft": ttft_total / len(served) if served else 0.0,
        "switch_time_share": switch_total / ttft_total if ttft_total > 0 else 0.0,
        "peak_resident_bytes": int(peak_resident_bytes),
    }


def _tolerances(bundle: PolicyBundle, tolerance) -> tuple[float, float]:
    if tolerance is not None:
        return float(tolerance), float(tolerance)
    res = bundle.latency.residual
    return float(res.get("ttft_max_ape", 0.0)), float(res.get("tpot_max_ape", 0.0))


def replay(trace, runtime, bundle: PolicyBundle, seed: int = 0, tolerance=None,
           vocab: TaskVocab = TaskVocab()) -> ReplayReport:
    """Serve ``trace`` one request at a time in arrival order.

    A request meets its SLO if its measured latencies fit the budgets widened
    by the calibration envelope (max absolute percentage error of the fit, or
    ``tolerance``); ``slo_met_strict`` uses the bare budgets.
    """
    if bundle.policy is None:
        raise ValueError("the bundle carries no trained policy")
    lm = bundle.latency
    tol_ttft, tol_tpot = _tolerances(bundle, tolerance)
    rows, peak = [], runtime.resident_bytes()
    for req in sorted(trace, key=lambda r: (r.arrival_time, r.id)):
        prompt = list(req.prompt)
        n = len(prompt)
        budget_ttft = req.slo.zeta_ttft * lm.ttft_full(n)
        budget_tpot = req.slo.zeta_tpot * lm.tpot_full
        scores = score_tokens(bundle.scorer, prompt)
        current = runtime.level
        try:
            choice = decide(bundle.policy, lm, prompt, scores, req.slo, current, fallback_rng(seed, req.id))
        except InfeasibleSloError:
            rows.append(RequestResult(req.id, req.slo_level, n, 0, None, False, False, 0.0, None, None,
                                      None, None, budget_ttft, budget_tpot, False, False, False,
                                      False, False, rejected=True))
            continue
        d = choice.decision
        pred_ttft, pred_tpot = predicted_latency(lm, n, d, True, current)
        sw = runtime.switch_level(d.model_level)
        kept = compress(prompt, scores, d.prompt_level, vocab.protected)
        gen = runtime.generate(kept, len(req.groundtruth), stop_token=EOS)
        ttft = gen.ttft + sw.billed_time
        tpot = gen.tpot
        ok = feasible(lm, req.slo, n, d, True, current)
        met = ttft <= budget_ttft * (1 + tol_ttft + REL_EPS) and tpot <= budget_tpot * (1 + tol_tpot + REL_EPS)
        strict = ttft <= budget_ttft * (1 + REL_EPS) and tpot <= budget_tpot * (1 + REL_EPS)
        env = abs(ttft - pred_ttft) <= (tol_ttft + REL_EPS) * pred_ttft and (
            not gen.decode_times or abs(tpot - pred_tpot) <= (tol_tpot + REL_EPS) * pred_tpot)
        rows.append(RequestResult(
            req.id, req.slo_level, n, len(kept), d.to_dict(), choice.fallback, sw.from_level != sw.to_level,
            sw.billed_time, pred_ttft, pred_tpot, ttft, tpot, budget_ttft, budget_tpot, ok, met, strict, env,
            tuple(gen.tokens[: len(req.groundtruth)]) == tuple(req.groundtruth),
        ))
        peak = max(peak, runtime.resident_bytes())
    return ReplayReport(rows, aggregate(rows, peak))


# --- reporting ---------------------------------------------------------------------

def _per_slo(rows) -> list[dict]:
    out = []
    for lvl in sorted({r.slo_level for r in rows}):
        sub = [r for r in rows if r.slo_level == lvl]
        out.append({
            "slo_level": lvl,
            "n": len(sub),
            "accuracy": sum(r.correct and r.slo_met for r in sub) / len(sub),
            "slo_compliance": sum(r.slo_met for r in sub) / len(sub),
            "mean_model_level": float(np.mean([r.decision["model_level"] for r in sub if r.decision] or [0.0])),
            "mean_prompt_level": float(np.mean([r.decision["prompt_level"] for r in sub if r.decision] or [0.0])),
        })
    return out


def render_report(report: ReplayReport, fmt: str = "table") -> str:
    summary = {"aggregates": report.aggregates, "per_slo": _per_slo(report.rows)}
    if fmt == "json":
        return json.dumps(summary, indent=1, sort_keys=True)
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    a = report.aggregates
    lines = [
        f"requests            {a.get('n_requests', 0)}",
        f"rejected            {a.get('n_rejected', 0)}",
        f"accuracy            {a.get('accuracy', 0.0):.4f}",
        f"raw accuracy        {a.get('raw_accuracy', 0.0):.4f}",
        f"SLO compliance      {a.get('slo_compliance', 0.0):.4f}",
        f"strict compliance   {a.get('strict_slo_compliance', 0.0):.4f}",
        f"feasible decisions  {a.get('feasible_rate', 0.0):.4f}",
        f"fallback rate       {a.get('fallback_rate', 0.0):.4f}",
        f"switches            {a.get('n_switches', 0)}",
        f"switch time (s)     {a.get('switch_time', 0.0):.6g}",
        f"switch/TTFT share   {a.get('switch_time_share', 0.0):.4%}",
        f"mean TTFT (s)       {a.get('mean_ttft', 0.0):.6g}",
        f"peak resident bytes {a.get('peak_resident_bytes', 0)}",
        "",
        "slo  n     acc     met     model  prompt",
    ]
    for s in summary["per_slo"]:
        lines.append(f"{s['slo_level']:<4} {s['n']:<5} {s['accuracy']:.4f}  {s['slo_compliance']:.4f}  "
                     f"{s['mean_model_level']:.3f}  {s['mean_prompt_level']:.3f}")
    return "\n".join(lines)


def random_feasible_decision(bundle: PolicyBundle, req: Request, rng) -> Decision:
    cands = enumerate_feasible(bundle.latency, req.slo, len(req.prompt), bundle.grid)
    if not cands:
        raise InfeasibleSloError(f"no decision meets {req.slo}")
    return cands[int(rng.integers(len(cands)))]

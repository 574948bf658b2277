"""Expert-normalized scoring and stratified-bootstrap aggregates."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RUN_FORMAT = "rize-run"
RUN_VERSION = "v1"
METRICS = ("median", "iqm", "mean", "optimality_gap")


@dataclass(eq=False)
class RunRecord:
    mdp_id: str
    method: str
    seed: int
    eval_steps: list[int]
    raw_returns: list[float]
    expert_mean_return: float
    config: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.eval_steps) != len(self.raw_returns):
            raise ValueError("eval_steps and raw_returns differ in length")
        if any(b <= a for a, b in zip(self.eval_steps, self.eval_steps[1:])):
            raise ValueError("eval steps must be strictly increasing")

    def to_dict(self) -> dict:
        return {
            "format": RUN_FORMAT,
            "version": RUN_VERSION,
            "mdp_id": self.mdp_id,
            "method": self.method,
            "seed": self.seed,
            "expert_mean_return": self.expert_mean_return,
            "eval": {"step": list(self.eval_steps), "raw_return": list(self.raw_returns)},
            "config": self.config,
            "series": self.series,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        if doc.get("format") != RUN_FORMAT:
            raise ValueError("not a run record")
        if doc.get("version") != RUN_VERSION:
            raise ValueError(f"unsupported run record version {doc.get('version')!r}")
        return cls(doc["mdp_id"], doc["method"], int(doc["seed"]), list(doc["eval"]["step"]),
                   list(doc["eval"]["raw_return"]), float(doc["expert_mean_return"]),
                   doc.get("config", {}), doc.get("series", {}), doc.get("meta", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls.from_dict(json.loads(text))

    def eval_csv(self) -> str:
        """``step,normalized_return,lambda_E,lambda_pi,mean_R_E,mean_R_pi`` at eval points."""
        lines = ["step,normalized_return,lambda_E,lambda_pi,mean_R_E,mean_R_pi"]
        at_eval = self.series.get("at_eval", {})
        norm = normalized_score(self) if self.eval_steps else []
        for i, (step, score) in enumerate(zip(self.eval_steps, norm)):
            row = [repr(int(step)), repr(float(score))]
            for key in ("lambda_E", "lambda_pi", "mean_R_E", "mean_R_pi"):
                vals = at_eval.get(key)
                row.append(repr(float(vals[i])) if vals else "")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def save_run(record: RunRecord, path) -> None:
    from .demos import _atomic_write

    path = Path(path)
    _atomic_write(path, record.to_json())
    _atomic_write(path.with_suffix(".csv"), record.eval_csv())


def load_run(path) -> RunRecord:
    return RunRecord.from_json(Path(path).read_text())


def normalized_score(record: RunRecord) -> np.ndarray:
    if not record.expert_mean_return > 0:
        raise ValueError("expert_mean_return must be positive to normalize")
    return np.asarray(record.raw_returns, dtype=float) / record.expert_mean_return


def final_third_mean(record_or_scores) -> float:
    """Mean normalized score over the last ceil(L/3) evaluation points."""
    if isinstance(record_or_scores, RunRecord):
        scores = normalized_score(record_or_scores)
    else:
        scores = np.asarray(record_or_scores, dtype=float)
    L = len(scores)
    if L < 3:
        raise ValueError(f"need at least 3 evaluation points, got {L}")
    return float(np.mean(scores[L - math.ceil(L / 3):]))


def iqm(scores) -> float:
    """Mean after dropping floor(n/4) scores from each end."""
    x = np.sort(np.asarray(scores, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("iqm of an empty sample")
    k = x.size // 4
    return _exact_mean(x[k:x.size - k])


def optimality_gap(scores, threshold: float = 1.0) -> float:
    x = np.asarray(scores, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("optimality gap of an empty sample")
    return float(np.mean(np.maximum(0.0, threshold - x)))


def _median(scores) -> float:
    return float(np.median(np.asarray(scores, dtype=float)))


def _exact_mean(x: np.ndarray) -> float:
    # summation rounding would move the mean of identical values off that value
    if x.size and x.min() == x.max():
        return float(x[0])
    return float(np.mean(x))


def _mean(scores) -> float:
    return _exact_mean(np.asarray(scores, dtype=float).ravel())


METRIC_FUNCS = {"median": _median, "iqm": iqm, "mean": _mean, "optimality_gap": optimality_gap}


def _metric(metric):
    if callable(metric):
        return metric
    try:
        return METRIC_FUNCS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}") from None


def stratified_bootstrap_ci(per_task_scores: dict, metric="iqm", n_resamples: int = 2000,
                            level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap CI, resampling runs independently within each task.

    Every resample gets its own generator spawned from ``seed`` so the result
    does not depend on evaluation order.
    """
    fn = _metric(metric)
    # sorting inside each stratum makes the result independent of run order too
    strata = [np.sort(np.asarray(per_task_scores[k], dtype=float).ravel())
              for k in sorted(per_task_scores)]
    if not strata or any(s.size == 0 for s in strata):
        raise ValueError("every stratum needs at least one score")
    children = np.random.SeedSequence(seed).spawn(n_resamples)
    stats = np.empty(n_resamples)
    for b, child in enumerate(children):
        rng = np.random.default_rng(child)
        pooled = np.concatenate([s[rng.integers(0, s.size, s.size)] for s in strata])
        stats[b] = fn(pooled)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    # constant samples can put quantile interpolation an ulp off the point estimate
    point = fn(np.concatenate(strata))
    if np.ptp(stats) == 0.0:
        lo = hi = point
    return float(lo), float(hi)


@dataclass
class AggregateReport:
    method: str
    n_runs: int
    strata: list[str]
    point: dict
    ci: dict

    def to_dict(self) -> dict:
        return {"method": self.method, "n_runs": self.n_runs, "strata": self.strata,
                "point": self.point, "ci": {k: list(v) for k, v in self.ci.items()}}


def aggregate_scores(per_task_scores: dict, method: str = "", n_resamples: int = 2000,
                     level: float = 0.95, seed: int = 0) -> AggregateReport:
    pooled = np.concatenate([np.asarray(v, dtype=float).ravel() for v in per_task_scores.values()])
    point, ci = {}, {}
    for name in METRICS:
        point[name] = METRIC_FUNCS[name](pooled)
        lo, hi = stratified_bootstrap_ci(per_task_scores, name, n_resamples, level, seed)
        # the point estimate is a valid resample; widen to include it
        ci[name] = (min(lo, point[name]), max(hi, point[name]))
    return AggregateReport(method, int(pooled.size), sorted(per_task_scores), point, ci)

"""Exploration/exploitation metrics and the adaptive temperature controller."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .env import TaskInstance, evaluate_response, relevance_fraction
from .errors import ConfigError, DomainError
from .policy import PolicyParams, RolloutBatch, greedy_decode, rollout_batch
from .reward import PRMParams, ScoredResponse, batch_aggregates

METRICS_SCHEMA = "metrics-v1"

# fixed tags for deriving independent seed streams from the run seed
SEED_TAG_MONITOR = 3001
SEED_TAG_CONTROLLER = 3002
SEED_TAG_VERIFIER = 3003


def pass_at_k_estimate(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: 1 - C(n-c, k)/C(n, k), in overflow-safe product form."""
    if not 0 <= c <= n:
        raise DomainError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k:
        raise DomainError(f"need k >= 1, got k={k}")
    if k > n:
        raise DomainError(f"need k <= n, got k={k}, n={n}")
    if c == 0:
        return 0.0
    if n - c < k:
        return 1.0
    prod = 1.0
    for i in range(k):
        prod *= (n - c - i) / (n - i)
    return 1.0 - prod


def dataset_pass_at_k(correct_counts: Sequence[int], n: int, k: int) -> float:
    return float(np.mean([pass_at_k_estimate(n, c, k) for c in correct_counts]))


def _top_k_indices(aggregates: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest aggregates; ties go to the lower index."""
    order = np.lexsort((np.arange(len(aggregates)), -aggregates))
    return order[:k]


def reward_pass_at_k(rollouts: Sequence[ScoredResponse], k: int = 2) -> int:
    """1 iff a correct response sits among the k highest-aggregate rollouts."""
    if not rollouts:
        return 0
    aggs = np.asarray([r.aggregate for r in rollouts])
    top = _top_k_indices(aggs, min(k, len(rollouts)))
    return int(any(rollouts[int(i)].correct for i in top))


@dataclass(frozen=True)
class VerifierMetrics:
    best_of_n: float
    weighted_vote: float
    majority_vote: float


def verifier_metrics(
    rollouts: Sequence[ScoredResponse], gold: int
) -> VerifierMetrics:
    """Best-of-N / weighted-vote / majority-vote correctness for one query.

    Rollouts without an emitted answer are ignored; all ties break toward
    the smaller answer value.
    """
    answered = [r for r in rollouts if r.response.answer is not None]
    if not answered:
        return VerifierMetrics(0.0, 0.0, 0.0)
    best = max(answered, key=lambda r: (r.aggregate, -r.response.answer))
    bon = float(best.response.answer == gold)
    weight_sum: dict[int, float] = {}
    counts: dict[int, int] = {}
    for r in answered:
        a = int(r.response.answer)
        weight_sum[a] = weight_sum.get(a, 0.0) + r.aggregate
        counts[a] = counts.get(a, 0) + 1
    wv_answer = max(weight_sum, key=lambda a: (weight_sum[a], -a))
    mv_answer = max(counts, key=lambda a: (counts[a], -a))
    return VerifierMetrics(
        best_of_n=bon,
        weighted_vote=float(wv_answer == gold),
        majority_vote=float(mv_answer == gold),
    )


# --- adaptive temperature ----------------------------------------------------

def default_controller_grid() -> tuple[float, ...]:
    return tuple(round(0.3 + 0.1 * i, 1) for i in range(14))  # 0.3 .. 1.6


@dataclass(frozen=True)
class TemperatureControllerConfig:
    grid: tuple[float, ...] = field(default_factory=default_controller_grid)
    period: int = 2
    initial: float = 1.0

    def validate(self) -> None:
        if not self.grid:
            raise ConfigError("controller grid must be non-empty")
        if any(t <= 0 for t in self.grid):
            raise ConfigError("controller grid temperatures must be positive")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ConfigError("controller grid must be strictly increasing")
        if self.period < 1:
            raise ConfigError(f"controller period must be >= 1, got {self.period}")
        if self.initial <= 0:
            raise ConfigError(f"initial temperature must be positive, got {self.initial}")


def _temp_key(temperature: float) -> int:
    return int(round(temperature * 1000))


def _query_seed(run_seed: int, tag: int, iteration: int, temperature: float, qi: int):
    return np.random.SeedSequence(
        [int(run_seed), tag, int(iteration), _temp_key(temperature), qi]
    )


def _rp2_from_batch(
    prm: PRMParams | None, inst: TaskInstance, batch: RolloutBatch, k: int = 2
) -> int:
    if prm is None:
        aggs = batch.correct.astype(float)
    else:
        aggs = batch_aggregates(prm, inst, batch)
    top = _top_k_indices(aggs, min(k, len(batch)))
    return int(batch.correct[top].any())


def select_temperature(
    ctrl: TemperatureControllerConfig,
    params: PolicyParams,
    validation: Sequence[TaskInstance],
    prm: PRMParams | None,
    *,
    n_rollouts: int = 16,
    run_seed: int = 0,
    iteration: int = 0,
) -> float:
    """Grid-search the sampling temperature by validation Reward-Pass@2.

    Fresh rollouts per (temperature, query) on hash-derived seed streams;
    ties resolve to the lower temperature.
    """
    ctrl.validate()
    if not validation:
        raise ConfigError("select_temperature requires a non-empty validation set")
    best_t, best_score = None, -1.0
    for t in ctrl.grid:
        hits = 0
        for qi, inst in enumerate(validation):
            seed = _query_seed(run_seed, SEED_TAG_CONTROLLER, iteration, t, qi)
            batch = rollout_batch(params, inst, t, n_rollouts, seed)
            hits += _rp2_from_batch(prm, inst, batch)
        score = hits / len(validation)
        if score > best_score:
            best_t, best_score = t, score
    return float(best_t)


# --- top-2 vs rest analysis --------------------------------------------------

@dataclass(frozen=True)
class SelectedAnalysis:
    populated: bool
    n_queries: int = 0
    top2_mean_steps: float | None = None
    rest_mean_steps: float | None = None
    top2_mean_relevance: float | None = None
    rest_mean_relevance: float | None = None


def analyze_selected(
    items: Sequence[tuple[TaskInstance, Sequence[ScoredResponse]]],
    k: int = 2,
) -> SelectedAnalysis:
    """Compare the reward model's top-k correct rollouts against the rest.

    Queries with fewer than k+1 correct rollouts are excluded; if none
    remain the report comes back unpopulated.
    """
    top_steps: list[int] = []
    rest_steps: list[int] = []
    top_rel: list[float] = []
    rest_rel: list[float] = []
    n_queries = 0
    for inst, scored in items:
        correct = [(i, r) for i, r in enumerate(scored) if r.correct and r.response.steps]
        if len(correct) < k + 1:
            continue
        n_queries += 1
        ranked = sorted(correct, key=lambda ir: (-ir[1].aggregate, ir[0]))
        for rank, (_, r) in enumerate(ranked):
            steps = len(r.response.steps)
            rel = relevance_fraction(inst, r.response)
            if rank < k:
                top_steps.append(steps)
                top_rel.append(rel)
            else:
                rest_steps.append(steps)
                rest_rel.append(rel)
    if n_queries == 0:
        return SelectedAnalysis(populated=False)
    return SelectedAnalysis(
        populated=True,
        n_queries=n_queries,
        top2_mean_steps=float(np.mean(top_steps)),
        rest_mean_steps=float(np.mean(rest_steps)),
        top2_mean_relevance=float(np.mean(top_rel)),
        rest_mean_relevance=float(np.mean(rest_rel)),
    )


# --- per-iteration record ----------------------------------------------------

@dataclass
class DynamicsRecord:
    iteration: int
    temperature: float
    greedy_accuracy: float
    pass_at_k: dict[float, dict[int, float]]
    reward_pass_at_2: dict[float, float]
    best_of_n: float
    weighted_vote: float
    majority_vote: float

    def to_record(self) -> dict:
        return {
            "schema": METRICS_SCHEMA,
            "iteration": self.iteration,
            "temperature": self.temperature,
            "greedy_accuracy": self.greedy_accuracy,
            "pass_at_k": {
                f"{t:g}": {str(k): v for k, v in sorted(ks.items())}
                for t, ks in sorted(self.pass_at_k.items())
            },
            "reward_pass_at_2": {
                f"{t:g}": v for t, v in sorted(self.reward_pass_at_2.items())
            },
            "verifier": {
                "best_of_n": self.best_of_n,
                "weighted_vote": self.weighted_vote,
                "majority_vote": self.majority_vote,
            },
        }

    @staticmethod
    def from_record(rec: Mapping) -> "DynamicsRecord":
        return DynamicsRecord(
            iteration=int(rec["iteration"]),
            temperature=float(rec["temperature"]),
            greedy_accuracy=float(rec["greedy_accuracy"]),
            pass_at_k={
                float(t): {int(k): float(v) for k, v in ks.items()}
                for t, ks in rec["pass_at_k"].items()
            },
            reward_pass_at_2={float(t): float(v) for t, v in rec["reward_pass_at_2"].items()},
            best_of_n=float(rec["verifier"]["best_of_n"]),
            weighted_vote=float(rec["verifier"]["weighted_vote"]),
            majority_vote=float(rec["verifier"]["majority_vote"]),
        )


def greedy_accuracy(params: PolicyParams, pool: Sequence[TaskInstance]) -> float:
    hits = 0
    for inst in pool:
        _, ok = evaluate_response(inst, greedy_decode(params, inst))
        hits += int(ok)
    return hits / len(pool)


def validation_sweep(
    params: PolicyParams,
    pool: Sequence[TaskInstance],
    temperatures: Sequence[float],
    k_values: Sequence[int],
    prm: PRMParams | None,
    *,
    n_rollouts: int = 16,
    run_seed: int = 0,
    iteration: int = 0,
) -> tuple[dict[float, dict[int, float]], dict[float, float]]:
    """Pass@K per temperature and Reward-Pass@2 per temperature on a pool."""
    pass_map: dict[float, dict[int, float]] = {}
    rp2_map: dict[float, float] = {}
    for t in temperatures:
        counts = []
        rp2_hits = 0
        for qi, inst in enumerate(pool):
            seed = _query_seed(run_seed, SEED_TAG_MONITOR, iteration, t, qi)
            batch = rollout_batch(params, inst, t, n_rollouts, seed)
            counts.append(int(batch.correct.sum()))
            rp2_hits += _rp2_from_batch(prm, inst, batch)
        pass_map[float(t)] = {
            int(k): dataset_pass_at_k(counts, n_rollouts, k) for k in k_values
        }
        rp2_map[float(t)] = rp2_hits / len(pool)
    return pass_map, rp2_map


def verifier_on_pool(
    params: PolicyParams,
    pool: Sequence[TaskInstance],
    temperature: float,
    prm: PRMParams | None,
    *,
    n_rollouts: int = 16,
    run_seed: int = 0,
    iteration: int = 0,
) -> VerifierMetrics:
    from .policy import batch_to_responses
    from .reward import score_responses

    bon = wv = mv = 0.0
    for qi, inst in enumerate(pool):
        seed = _query_seed(run_seed, SEED_TAG_VERIFIER, iteration, temperature, qi)
        batch = rollout_batch(params, inst, temperature, n_rollouts, seed)
        scored = score_responses(
            inst, batch_to_responses(batch), prm, correct=batch.correct.tolist()
        )
        m = verifier_metrics(scored, inst.gold_answer)
        bon += m.best_of_n
        wv += m.weighted_vote
        mv += m.majority_vote
    n = len(pool)
    return VerifierMetrics(bon / n, wv / n, mv / n)

"""Rewards: exact answer matching, the process reward model, and selection.

The process reward model (PRM) scores every reasoning step with a logistic
of indicator features and aggregates a response by the minimum step score.
It is trained on Monte-Carlo completion labels: the fraction of seeded
completions from each step prefix that end in the right answer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .env import Response, TaskInstance, evaluate_response, fold_prediction
from .errors import BalanceWarning, DomainError, MalformedResponseError, UndefinedInputError
from .policy import (
    SPEC_DECODERS,
    OptimizerState,
    PolicyParams,
    RolloutBatch,
    actions_for,
    adam_step,
    position_probs,
    sample_action_matrix,
    summarize_actions,
    zero_optimizer,
)


def exact_match(predicted: int | None, gold: int) -> int:
    return int(predicted is not None and predicted == gold)


def logistic(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class PRMFeatureSpec:
    """Step-scoring features: the policy's match indicators plus where the
    step sits relative to the query length and the truncation horizon."""

    name: str = "prm-v1"
    max_steps: int = 8

    BIAS = 0
    AGG_MATCH = 1
    AXIS_MATCH = 2
    INDEX_MATCH = 3
    FULL_MATCH = 4
    BEFORE_H = 5
    PAST_H = 6
    POS_FRAC = 7
    PREFIX_FRAC = 8

    @property
    def dim(self) -> int:
        return 9

    def to_json(self) -> dict:
        return {"name": self.name, "max_steps": self.max_steps}

    @staticmethod
    def from_json(data: dict) -> "PRMFeatureSpec":
        return PRMFeatureSpec(name=data["name"], max_steps=int(data["max_steps"]))


SPEC_DECODERS["prm-v1"] = PRMFeatureSpec.from_json


@dataclass(frozen=True)
class PRMParams:
    weights: np.ndarray
    spec: PRMFeatureSpec


def init_prm(spec: PRMFeatureSpec) -> PRMParams:
    return PRMParams(weights=np.zeros(spec.dim), spec=spec)


@lru_cache(maxsize=None)
def prm_feature_table(inst: TaskInstance, spec: PRMFeatureSpec) -> np.ndarray:
    acts = actions_for(inst.rows, inst.cols)
    table = np.zeros((spec.max_steps, len(acts), spec.dim))
    h_count = inst.n_hops
    for pos in range(spec.max_steps):
        hop = inst.hops[pos] if pos < h_count else None
        for idx, act in enumerate(acts[:-1]):  # the ANSWER action is never a step
            row = table[pos, idx]
            row[spec.BIAS] = 1.0
            if hop is not None:
                if act.agg == hop.agg:
                    row[spec.AGG_MATCH] = 1.0
                if act.axis == hop.axis:
                    row[spec.AXIS_MATCH] = 1.0
                if act.index == hop.index:
                    row[spec.INDEX_MATCH] = 1.0
                if act == hop:
                    row[spec.FULL_MATCH] = 1.0
            row[spec.BEFORE_H] = 1.0 if pos < h_count else 0.0
            row[spec.PAST_H] = 1.0 if pos >= h_count else 0.0
            row[spec.POS_FRAC] = pos / spec.max_steps
            row[spec.PREFIX_FRAC] = (pos + 1) / spec.max_steps
    return table


def prm_score_table(prm: PRMParams, inst: TaskInstance) -> np.ndarray:
    """Logistic step score for every (position, action) pair."""
    return logistic(prm_feature_table(inst, prm.spec) @ prm.weights)


@dataclass(frozen=True)
class ScoredResponse:
    response: Response
    correct: bool
    step_scores: tuple[float, ...]
    aggregate: float


@lru_cache(maxsize=None)
def _action_index_map(rows: int, cols: int) -> dict:
    acts = actions_for(rows, cols)
    return {a: i for i, a in enumerate(acts[:-1])}


def _step_action_ids(inst: TaskInstance, resp: Response) -> list[int]:
    index_of = _action_index_map(inst.rows, inst.cols)
    ids = []
    for step in resp.steps:
        a = index_of.get(step.hop)
        if a is None:
            raise MalformedResponseError(f"step {step.hop} is not in the action space")
        ids.append(a)
    return ids


def prm_score(
    prm: PRMParams, inst: TaskInstance, resp: Response, correct: bool | None = None
) -> ScoredResponse:
    if not resp.steps:
        raise UndefinedInputError("prm_score is undefined for a response with no steps")
    ids = _step_action_ids(inst, resp)
    table = prm_score_table(prm, inst)
    scores = tuple(float(table[pos, a]) for pos, a in enumerate(ids))
    if correct is None:
        correct = evaluate_response(inst, resp)[1]
    return ScoredResponse(
        response=resp, correct=bool(correct), step_scores=scores, aggregate=min(scores)
    )


def score_by_correctness(
    inst: TaskInstance, resp: Response, correct: bool | None = None
) -> ScoredResponse:
    """Oracle reward: aggregate equals the correctness flag.

    Used wherever no PRM is configured; empty responses score 0.
    """
    if correct is None:
        correct = evaluate_response(inst, resp)[1]
    agg = 1.0 if correct else 0.0
    scores = (agg,) * len(resp.steps)
    return ScoredResponse(
        response=resp, correct=bool(correct), step_scores=scores,
        aggregate=agg if resp.steps else 0.0,
    )


def score_responses(
    inst: TaskInstance,
    responses: Sequence[Response],
    prm: PRMParams | None,
    correct: Sequence[bool] | None = None,
) -> list[ScoredResponse]:
    """Score a rollout set, falling back to the oracle reward without a PRM.

    Responses with no steps cannot be scored by the PRM and get aggregate 0;
    they are never correct and never selectable anyway.
    """
    flags = [evaluate_response(inst, r)[1] for r in responses] if correct is None else list(correct)
    out = []
    for resp, ok in zip(responses, flags):
        if prm is None or not resp.steps:
            scored = score_by_correctness(inst, resp, correct=ok)
            if prm is not None and not resp.steps:
                scored = ScoredResponse(resp, bool(ok), (), 0.0)
            out.append(scored)
        else:
            out.append(prm_score(prm, inst, resp, correct=ok))
    return out


def batch_aggregates(prm: PRMParams, inst: TaskInstance, batch: RolloutBatch) -> np.ndarray:
    """Vectorized min-aggregation over a rollout batch; 0 for step-less rows."""
    table = prm_score_table(prm, inst)
    n, length = batch.actions.shape
    if length == 0:
        return np.zeros(n)
    pos = np.arange(batch.start_pos, batch.start_pos + length)
    scores = table[pos[None, :], batch.actions]
    mask = np.arange(length)[None, :] < batch.n_new_steps[:, None]
    scores = np.where(mask, scores, np.inf)
    agg = scores.min(axis=1)
    return np.where(batch.n_new_steps > 0, agg, 0.0)


# --- selection (the post-filter H operations) ------------------------------

STRATEGIES = ("topk", "threshold", "randomk")


@dataclass(frozen=True)
class SelectionConfig:
    strategy: str
    k: int | None = None
    alpha: float | None = None
    seed: int | None = None

    def validate(self) -> None:
        problems = []
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy in ("topk", "randomk") and (self.k is None or self.k < 1):
            problems.append(f"strategy {self.strategy!r} requires k >= 1, got {self.k}")
        if self.strategy == "threshold" and (
            self.alpha is None or not 0.0 <= self.alpha <= 1.0
        ):
            problems.append(f"strategy 'threshold' requires alpha in [0, 1], got {self.alpha}")
        if self.strategy == "randomk" and self.seed is None:
            problems.append("strategy 'randomk' requires a seed")
        if problems:
            from .errors import ConfigError

            raise ConfigError("; ".join(problems))


def top_k(k: int) -> SelectionConfig:
    return SelectionConfig(strategy="topk", k=k)


def threshold(alpha: float) -> SelectionConfig:
    return SelectionConfig(strategy="threshold", alpha=alpha)


def random_k(k: int, seed: int) -> SelectionConfig:
    return SelectionConfig(strategy="randomk", k=k, seed=seed)


def rerank_select(rollouts: Sequence[ScoredResponse], cfg: SelectionConfig) -> list[Response]:
    """Pick training responses from an answer-prefiltered rollout set.

    Only rollouts whose correctness flag is set are candidates; an empty
    candidate set selects nothing.
    """
    cfg.validate()
    candidates = [(i, r) for i, r in enumerate(rollouts) if r.correct]
    if not candidates:
        return []
    if cfg.strategy == "topk":
        ranked = sorted(candidates, key=lambda ir: (-ir[1].aggregate, ir[0]))
        return [r.response for _, r in ranked[: cfg.k]]
    if cfg.strategy == "threshold":
        return [r.response for _, r in candidates if r.aggregate > cfg.alpha]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    m = min(cfg.k, len(candidates))
    chosen = rng.choice(len(candidates), size=m, replace=False)
    return [candidates[int(i)][1].response for i in chosen]


# --- Monte-Carlo step annotation -------------------------------------------

def mc_annotate(
    completer: PolicyParams,
    inst: TaskInstance,
    resp: Response,
    n_completions: int,
    temperature: float,
    seed: int = 0,
) -> list[float]:
    """Per-step labels: fraction of completions from each prefix that answer
    correctly.

    Once a prefix has >= H steps the prediction is pinned (later steps never
    change the fold), so the label short-circuits to that prediction's
    correctness; nothing is left for a completion to decide.
    """
    if n_completions < 1:
        raise DomainError(f"completion count must be >= 1, got {n_completions}")
    _step_action_ids(inst, resp)  # validates the steps
    if not resp.steps:
        raise UndefinedInputError("cannot annotate a response with no steps")
    h_count = inst.n_hops
    max_steps = completer.spec.max_steps
    probs = position_probs(completer, inst, temperature)
    labels: list[float] = []
    for k in range(len(resp.steps)):
        prefix = resp.steps[: k + 1]
        if len(prefix) >= h_count:
            pred = fold_prediction(inst, prefix)
            labels.append(1.0 if pred == inst.gold_answer else 0.0)
            continue
        tail = max_steps - len(prefix)
        uniforms = np.stack([
            np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, k, j])))
            .random(tail)
            for j in range(n_completions)
        ])
        actions = sample_action_matrix(probs[len(prefix):], uniforms)
        summary = summarize_actions(
            inst, actions, probs[len(prefix):],
            start_pos=len(prefix), prefix_values=[s.value for s in prefix],
        )
        labels.append(float(summary.correct.sum()) / n_completions)
    return labels


# --- PRM dataset ------------------------------------------------------------

@dataclass(frozen=True)
class PRMDatasetRow:
    instance_id: str
    response: Response
    correct: bool
    step_labels: tuple[float, ...]


@dataclass(frozen=True)
class PRMBuildConfig:
    max_rows_per_question: int = 4
    n_completions: int = 8
    temperature: float = 1.0
    seed: int = 0


def _dedup_cap(
    inst: TaskInstance, responses: Sequence[Response], cap: int
) -> list[tuple[Response, bool]]:
    seen = set()
    uniq: list[tuple[int, Response, bool]] = []
    for i, resp in enumerate(responses):
        if not resp.steps:
            continue  # step-less rollouts carry nothing to annotate
        key = (resp.steps, resp.answer)
        if key in seen:
            continue
        seen.add(key)
        uniq.append((i, resp, evaluate_response(inst, resp)[1]))
    # keep one of each correctness class first, then fill by rollout order
    chosen: list[tuple[int, Response, bool]] = []
    for want in (True, False):
        for item in uniq:
            if item[2] == want:
                chosen.append(item)
                break
    for item in uniq:
        if len(chosen) >= cap:
            break
        if item not in chosen:
            chosen.append(item)
    chosen.sort(key=lambda it: it[0])
    return [(resp, ok) for _, resp, ok in chosen[:cap]]


def build_prm_dataset(
    items: Sequence[tuple[TaskInstance, Sequence[Response]]],
    completer: PolicyParams,
    cfg: PRMBuildConfig,
) -> list[PRMDatasetRow]:
    """Dedup and cap per question, balance correct:wrong 1:1, MC-annotate."""
    pool: list[tuple[TaskInstance, Response, bool]] = []
    for inst, responses in items:
        for resp, ok in _dedup_cap(inst, responses, cfg.max_rows_per_question):
            pool.append((inst, resp, ok))
    correct_rows = [p for p in pool if p[2]]
    wrong_rows = [p for p in pool if not p[2]]
    if not correct_rows or not wrong_rows:
        warnings.warn(
            "PRM dataset balancing found an empty class "
            f"(correct={len(correct_rows)}, wrong={len(wrong_rows)})",
            BalanceWarning,
        )
        return []
    m = min(len(correct_rows), len(wrong_rows))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    keep_c = sorted(rng.choice(len(correct_rows), size=m, replace=False).tolist())
    keep_w = sorted(rng.choice(len(wrong_rows), size=m, replace=False).tolist())
    selected = [correct_rows[i] for i in keep_c] + [wrong_rows[i] for i in keep_w]
    seeds = np.random.SeedSequence([cfg.seed, 2]).generate_state(len(selected), np.uint64)
    rows = []
    for (inst, resp, ok), row_seed in zip(selected, seeds):
        labels = mc_annotate(
            completer, inst, resp, cfg.n_completions, cfg.temperature, seed=int(row_seed)
        )
        rows.append(
            PRMDatasetRow(
                instance_id=inst.id, response=resp, correct=ok, step_labels=tuple(labels)
            )
        )
    return rows


def row_to_record(row: PRMDatasetRow) -> dict:
    return {
        "instance_id": row.instance_id,
        "steps": [
            {"agg": s.agg, "axis": s.axis, "index": s.index, "value": s.value}
            for s in row.response.steps
        ],
        "answer": row.response.answer,
        "correct": row.correct,
        "step_labels": list(row.step_labels),
    }


def row_from_record(rec: dict) -> PRMDatasetRow:
    from .env import Step

    steps = tuple(
        Step(s["agg"], s["axis"], int(s["index"]), int(s["value"])) for s in rec["steps"]
    )
    answer = rec["answer"]
    return PRMDatasetRow(
        instance_id=rec["instance_id"],
        response=Response(steps=steps, answer=None if answer is None else int(answer)),
        correct=bool(rec["correct"]),
        step_labels=tuple(float(v) for v in rec["step_labels"]),
    )


# --- PRM training ------------------------------------------------------------

@dataclass(frozen=True)
class PRMTrainConfig:
    steps: int = 600
    lr: float = 0.05
    batch_rows: int = 16
    seed: int = 0


def _row_features(
    rows: Sequence[PRMDatasetRow], instances: Mapping[str, TaskInstance], spec: PRMFeatureSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack per-step features/labels with a row index for batching."""
    feats, labels, owner = [], [], []
    for ri, row in enumerate(rows):
        inst = instances[row.instance_id]
        ids = _step_action_ids(inst, row.response)
        table = prm_feature_table(inst, spec)
        for pos, a in enumerate(ids):
            feats.append(table[pos, a])
            labels.append(row.step_labels[pos])
            owner.append(ri)
    return np.asarray(feats), np.asarray(labels), np.asarray(owner)


def prm_mse(
    prm: PRMParams, rows: Sequence[PRMDatasetRow], instances: Mapping[str, TaskInstance]
) -> float:
    feats, labels, _ = _row_features(rows, instances, prm.spec)
    preds = logistic(feats @ prm.weights)
    return float(np.mean((preds - labels) ** 2))


def train_prm(
    rows: Sequence[PRMDatasetRow],
    instances: Mapping[str, TaskInstance],
    cfg: PRMTrainConfig,
    spec: PRMFeatureSpec | None = None,
) -> PRMParams:
    """Minimize MSE between logistic step scores and MC labels with Adam."""
    if not rows:
        raise DomainError("train_prm requires at least one dataset row")
    spec = spec or PRMFeatureSpec()
    feats, labels, owner = _row_features(rows, instances, spec)
    weights = np.zeros(spec.dim)
    opt: OptimizerState = zero_optimizer(spec.dim)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 3])))
    n_rows = len(rows)
    order = np.array([], dtype=np.int64)
    cursor = 0
    for _ in range(cfg.steps):
        if cursor + cfg.batch_rows > len(order):
            order = rng.permutation(n_rows)
            cursor = 0
        batch_rows = order[cursor : cursor + cfg.batch_rows]
        cursor += cfg.batch_rows
        mask = np.isin(owner, batch_rows)
        x, y = feats[mask], labels[mask]
        z = logistic(x @ weights)
        grad = ((2.0 * (z - y) * z * (1.0 - z))[:, None] * x).mean(axis=0)
        weights, opt = adam_step(weights, opt, grad, cfg.lr)
    return PRMParams(weights=weights, spec=spec)

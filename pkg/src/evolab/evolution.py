"""The self-evolving loop: warmup, Generate/Improve iterations, artifacts.

Each iteration re-initializes the policy state according to the training
method (parameter/optimizer/schedule continuity), samples rollouts for a
scheduled slice of queries at the controller's temperature, filters and
reranks them into training pairs, and runs supervised updates until the
slice or the global step budget is exhausted.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig, TrainMethodConfig, UnlabeledConfig
from .dynamics import (
    DynamicsRecord,
    greedy_accuracy,
    select_temperature,
    validation_sweep,
    verifier_on_pool,
)
from .env import Response, TaskInstance, generate_pool
from .errors import ConfigError
from .policy import (
    Checkpoint,
    LrSchedule,
    OptimizerState,
    PolicyParams,
    POLICY_CKPT_VERSION,
    PRM_CKPT_VERSION,
    batch_to_responses,
    init_params,
    rollout_batch,
    save_checkpoint,
    sft_update,
    zero_optimizer,
)
from .reward import (
    PRMBuildConfig,
    PRMParams,
    PRMTrainConfig,
    ScoredResponse,
    SelectionConfig,
    build_prm_dataset,
    prm_mse,
    random_k,
    rerank_select,
    row_to_record,
    score_responses,
    top_k,
    threshold,
    train_prm,
)

__all__ = [
    "TrainMethodConfig",
    "UnlabeledConfig",
    "PolicyState",
    "EvolutionState",
    "run_warmup",
    "iteration_init",
    "schedule_batches",
    "pseudo_label_and_filter",
    "run_iteration",
    "run_evolution",
    "RunArtifacts",
]

# seed-stream tags; never reuse across purposes
TAG_POOL_LABELED = 1
TAG_POOL_VAL = 2
TAG_POOL_UNLABELED = 3
TAG_WARMUP_SAMPLE = 101
TAG_WARMUP_TRAIN = 102
TAG_COMPLETER = 103
TAG_PRM_QUESTIONS = 104
TAG_PRM_SAMPLE = 105
TAG_PRM_BUILD = 106
TAG_PRM_SPLIT = 107
TAG_PRM_TRAIN = 108
TAG_PERM_LABELED = 201
TAG_PERM_UNLABELED = 202
TAG_GENERATE = 203
TAG_IMPROVE = 204
TAG_RANDOMK = 205
TAG_SFT_ONLY = 206


def _ss(*entries: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(e) for e in entries])


def _derive_seed(*entries: int) -> int:
    return int(_ss(*entries).generate_state(1, np.uint64)[0])


@dataclass
class PolicyState:
    params: PolicyParams
    optimizer: OptimizerState
    schedule: LrSchedule


@dataclass
class EvolutionState:
    iteration: int
    policy: PolicyState
    pi0: PolicyParams
    cursor_labeled: int
    cursor_unlabeled: int
    perm_labeled: np.ndarray
    perm_unlabeled: np.ndarray
    steps_taken: int
    last_iteration_steps: int
    chosen_temperature: float
    history: list[DynamicsRecord] = field(default_factory=list)


WarmupSet = list[tuple[TaskInstance, Response]]


def train_on_pairs(
    params: PolicyParams,
    pairs: Sequence[tuple[TaskInstance, Response]],
    *,
    steps: int,
    batch_size: int,
    base_lr: float,
    warmup_ratio: float,
    seed: int,
    total_steps: int | None = None,
) -> tuple[PolicyParams, OptimizerState, LrSchedule]:
    """Train for a fixed step count over seeded shuffled minibatches."""
    opt = zero_optimizer(params.spec.dim)
    sched = LrSchedule(
        base_lr=base_lr, total_steps=total_steps or steps, warmup_ratio=warmup_ratio
    )
    rng = np.random.Generator(np.random.PCG64(_ss(seed)))
    order: list[int] = []
    cursor = 0
    for _ in range(steps):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(pairs)).tolist()
            cursor = 0
        batch = [pairs[i] for i in order[cursor : cursor + batch_size]]
        cursor += batch_size
        params, opt, sched = sft_update(params, opt, sched, batch)
    return params, opt, sched


def run_warmup(
    base: PolicyParams,
    pool: Sequence[TaskInstance],
    rc: RunConfig,
    run_seed: int,
) -> tuple[PolicyParams, WarmupSet]:
    """Collect correct rollouts from the base policy and fine-tune on them."""
    retained: WarmupSet = []
    n = rc.policy.rollouts_per_query
    cap = rc.budget.warmup_cap_per_query
    for qi, inst in enumerate(pool):
        batch = rollout_batch(base, inst, 1.0, n, _ss(run_seed, TAG_WARMUP_SAMPLE, qi))
        if not batch.correct.any():
            continue
        responses = batch_to_responses(batch)
        kept = 0
        for resp, ok in zip(responses, batch.correct):
            if ok:
                retained.append((inst, resp))
                kept += 1
                if kept >= cap:
                    break
    if not retained:
        warnings.warn("warmup found no correct rollouts; returning the base policy")
        return base, []
    params, _, _ = train_on_pairs(
        base,
        retained,
        steps=rc.budget.warmup_steps,
        batch_size=rc.policy.batch_size,
        base_lr=rc.policy.base_lr,
        warmup_ratio=rc.policy.warmup_ratio,
        seed=_derive_seed(run_seed, TAG_WARMUP_TRAIN),
    )
    return params, retained


def iteration_init(method: TrainMethodConfig, state: EvolutionState) -> PolicyState:
    """Apply the training method's continuity semantics at an iteration start."""
    method.validate()
    current = state.policy
    if method.init_from == "last" and method.optimizer_continuous:
        return current
    fresh_sched = dataclasses.replace(current.schedule, position=0)
    dim = current.params.spec.dim
    if method.init_from == "last":
        return PolicyState(current.params, zero_optimizer(dim), fresh_sched)
    return PolicyState(state.pi0, zero_optimizer(dim), fresh_sched)


def _mixin_active(state: EvolutionState, unl: UnlabeledConfig, total_steps: int) -> bool:
    # t >= t_mixin * total iterations, phrased in steps so uneven iteration
    # lengths still line up with the training-progress fraction
    if not unl.enabled:
        return False
    projected = state.steps_taken + state.last_iteration_steps
    return projected >= unl.t_mixin * total_steps


def schedule_batches(
    state: EvolutionState,
    method: TrainMethodConfig,
    unl: UnlabeledConfig,
    labeled: Sequence[TaskInstance],
    unlabeled: Sequence[TaskInstance],
    total_steps: int,
) -> list[tuple[TaskInstance, bool]]:
    """Next slice of queries in fixed permutation order, wrapping at epochs."""
    n = max(1, round(method.interval_fraction * len(labeled)))
    picks: list[tuple[TaskInstance, bool]] = []
    chosen_l = []
    for i in range(n):
        idx = state.perm_labeled[(state.cursor_labeled + i) % len(labeled)]
        chosen_l.append(labeled[idx])
    state.cursor_labeled = (state.cursor_labeled + n) % len(labeled)
    chosen_u: list[TaskInstance] = []
    if unlabeled and _mixin_active(state, unl, total_steps):
        n_u = max(1, round(unl.ratio * n))
        for i in range(n_u):
            idx = state.perm_unlabeled[(state.cursor_unlabeled + i) % len(unlabeled)]
            chosen_u.append(unlabeled[idx])
        state.cursor_unlabeled = (state.cursor_unlabeled + n_u) % len(unlabeled)
    for i in range(max(len(chosen_l), len(chosen_u))):
        if i < len(chosen_l):
            picks.append((chosen_l[i], True))
        if i < len(chosen_u):
            picks.append((chosen_u[i], False))
    return picks


def pseudo_label_and_filter(
    inst: TaskInstance,
    scored: Sequence[ScoredResponse],
    unl: UnlabeledConfig,
) -> tuple[int | None, list[ScoredResponse]]:
    """Vote a pseudo answer, drop conflicting rollouts, re-mark survivors.

    Oracle mode swaps the vote for the true gold answer (the skyline).
    Returns (None, []) when no rollout emitted an answer.
    """
    answered = [r for r in scored if r.response.answer is not None]
    if not answered:
        return None, []
    if unl.oracle:
        label = inst.gold_answer
    else:
        weight_sum: dict[int, float] = {}
        for r in answered:
            w = r.aggregate if unl.vote_weight == "prm_aggregate" else 1.0
            a = int(r.response.answer)
            weight_sum[a] = weight_sum.get(a, 0.0) + w
        label = max(weight_sum, key=lambda a: (weight_sum[a], -a))
    survivors = [
        dataclasses.replace(r, correct=True)
        for r in answered
        if int(r.response.answer) == label
    ]
    return label, survivors


def _selection_config(rc: RunConfig, run_seed: int, iteration: int, qi: int, n: int) -> SelectionConfig:
    strategy = rc.reward.strategy
    if strategy == "none":
        return top_k(n)  # with oracle aggregates this keeps every correct rollout
    if strategy == "topk":
        return top_k(rc.reward.k)
    if strategy == "threshold":
        return threshold(rc.reward.alpha)
    return random_k(rc.reward.k, _derive_seed(run_seed, TAG_RANDOMK, iteration, qi))


IterationHook = Callable[[str, dict], None]


def _policy_snapshot(ps: PolicyState) -> dict:
    return {
        "weights": ps.params.weights.copy(),
        "m": ps.optimizer.first_moments.copy(),
        "v": ps.optimizer.second_moments.copy(),
        "step_count": ps.optimizer.step_count,
        "position": ps.schedule.position,
        "lr": ps.schedule.base_lr,
    }


def run_iteration(
    state: EvolutionState,
    rc: RunConfig,
    labeled: Sequence[TaskInstance],
    unlabeled: Sequence[TaskInstance],
    val: Sequence[TaskInstance],
    prm: PRMParams | None,
    run_seed: int,
    hook: IterationHook | None = None,
) -> EvolutionState:
    t = state.iteration + 1
    state.policy = iteration_init(rc.method, state)
    init_snapshot = _policy_snapshot(state.policy) if hook else None
    batch_queries = schedule_batches(
        state, rc.method, rc.unlabeled, labeled, unlabeled, rc.budget.total_steps
    )

    # Generate
    n_roll = rc.policy.rollouts_per_query
    selected: list[tuple[TaskInstance, Response]] = []
    generated: set = set()
    scored_prm = prm if rc.reward.use_prm else None
    for qi, (inst, is_labeled) in enumerate(batch_queries):
        batch = rollout_batch(
            state.policy.params, inst, state.chosen_temperature, n_roll,
            _ss(run_seed, TAG_GENERATE, t, qi),
        )
        responses = batch_to_responses(batch)
        if hook:
            generated.update((inst.id, r.steps, r.answer) for r in responses)
        scored = score_responses(inst, responses, scored_prm, correct=batch.correct.tolist())
        if not is_labeled:
            _, scored = pseudo_label_and_filter(inst, scored, rc.unlabeled)
            if not scored:
                continue
        cfg = _selection_config(rc, run_seed, t, qi, n_roll)
        for resp in rerank_select(scored, cfg):
            selected.append((inst, resp))

    # Improve
    steps_this_iter = 0
    if not selected:
        warnings.warn(f"iteration {t}: empty selection; Improve is a no-op")
    else:
        rng = np.random.Generator(np.random.PCG64(_ss(run_seed, TAG_IMPROVE, t)))
        order = rng.permutation(len(selected))
        bs = rc.policy.batch_size
        for start in range(0, len(order), bs):
            if state.steps_taken >= rc.budget.total_steps:
                break
            batch = [selected[i] for i in order[start : start + bs]]
            params, opt, sched = sft_update(
                state.policy.params, state.policy.optimizer, state.policy.schedule, batch
            )
            state.policy = PolicyState(params, opt, sched)
            state.steps_taken += 1
            steps_this_iter += 1

    state.iteration = t
    state.last_iteration_steps = steps_this_iter

    # Dynamics snapshot (always populated; full temperature grid on eval iterations)
    chosen = state.chosen_temperature
    if t % rc.dynamics.eval_every == 0:
        temps = sorted(set(rc.dynamics.monitor_temperatures) | {chosen})
    else:
        temps = [chosen]
    pass_map, rp2_map = validation_sweep(
        state.policy.params, val, temps, rc.dynamics.pass_k_values, prm,
        n_rollouts=n_roll, run_seed=run_seed, iteration=t,
    )
    ver = verifier_on_pool(
        state.policy.params, val, chosen, prm,
        n_rollouts=n_roll, run_seed=run_seed, iteration=t,
    )
    record = DynamicsRecord(
        iteration=t,
        temperature=chosen,
        greedy_accuracy=greedy_accuracy(state.policy.params, val),
        pass_at_k=pass_map,
        reward_pass_at_2=rp2_map,
        best_of_n=ver.best_of_n,
        weighted_vote=ver.weighted_vote,
        majority_vote=ver.majority_vote,
    )
    state.history.append(record)

    # adaptive temperature for the next iterations
    if rc.dynamics.controller_enabled and t % rc.dynamics.controller.period == 0:
        state.chosen_temperature = select_temperature(
            rc.dynamics.controller, state.policy.params, val, prm,
            n_rollouts=rc.dynamics.controller_rollouts, run_seed=run_seed, iteration=t,
        )

    if hook:
        hook(
            "iteration",
            {
                "iteration": t,
                "init": init_snapshot,
                "end": _policy_snapshot(state.policy),
                "generated": generated,
                "selected": [(inst.id, r.steps, r.answer) for inst, r in selected],
                "selected_pairs": list(selected),
                "batch_ids": [inst.id for inst, _ in batch_queries],
                "steps_this_iter": steps_this_iter,
                "steps_taken": state.steps_taken,
                "record": record,
            },
        )
    return state


@dataclass
class RunArtifacts:
    records: list[DynamicsRecord]
    final_params: PolicyParams
    pi0: PolicyParams
    prm: PRMParams | None
    completer: PolicyParams | None
    warmup_size: int
    holdout_mse: float | None
    steps_taken: int
    paths: dict[str, str] = field(default_factory=dict)


def _write_metrics_line(fh, record: DynamicsRecord) -> None:
    fh.write(json.dumps(record.to_record(), sort_keys=True) + "\n")


def _save_policy_checkpoint(path: Path, state: PolicyState, iteration: int, run_seed: int) -> None:
    ck = Checkpoint(
        version=POLICY_CKPT_VERSION,
        weights=state.params.weights,
        spec=state.params.spec,
        optimizer=state.optimizer,
        schedule_position=state.schedule.position,
        iteration=iteration,
        rng_state=int(run_seed).to_bytes(8, "little"),
    )
    path.write_bytes(save_checkpoint(ck))


def build_prm_pipeline(
    rc: RunConfig,
    base: PolicyParams,
    warmup_set: WarmupSet,
    labeled: Sequence[TaskInstance],
    run_seed: int,
) -> tuple[PolicyParams, PRMParams, list, list, float | None]:
    """Completer training, MC-annotated dataset, PRM fit, holdout MSE."""
    completer, _, _ = train_on_pairs(
        base,
        warmup_set,
        steps=rc.reward.completer_multiplier * rc.budget.warmup_steps,
        batch_size=rc.policy.batch_size,
        base_lr=rc.policy.base_lr,
        warmup_ratio=rc.policy.warmup_ratio,
        seed=_derive_seed(run_seed, TAG_COMPLETER),
    )
    rng = np.random.Generator(np.random.PCG64(_ss(run_seed, TAG_PRM_QUESTIONS)))
    m = min(rc.reward.prm_questions, len(labeled))
    question_idx = sorted(rng.choice(len(labeled), size=m, replace=False).tolist())
    items = []
    for qi in question_idx:
        inst = labeled[qi]
        batch = rollout_batch(
            completer, inst, 1.0, rc.reward.prm_rollouts, _ss(run_seed, TAG_PRM_SAMPLE, qi)
        )
        items.append((inst, batch_to_responses(batch)))
    rows = build_prm_dataset(
        items,
        completer,
        PRMBuildConfig(
            max_rows_per_question=rc.reward.prm_max_rows_per_question,
            n_completions=rc.reward.mc_completions,
            temperature=1.0,
            seed=_derive_seed(run_seed, TAG_PRM_BUILD),
        ),
    )
    instances = {inst.id: inst for inst in labeled}
    split_rng = np.random.Generator(np.random.PCG64(_ss(run_seed, TAG_PRM_SPLIT)))
    order = split_rng.permutation(len(rows))
    n_holdout = int(rc.reward.prm_holdout_fraction * len(rows))
    holdout_rows = [rows[i] for i in order[:n_holdout]]
    train_rows = [rows[i] for i in order[n_holdout:]]
    prm = train_prm(
        train_rows or rows,
        instances,
        PRMTrainConfig(
            steps=rc.reward.prm_train_steps,
            lr=rc.reward.prm_lr,
            batch_rows=rc.reward.prm_batch_rows,
            seed=_derive_seed(run_seed, TAG_PRM_TRAIN),
        ),
    )
    holdout = prm_mse(prm, holdout_rows, instances) if holdout_rows else None
    return completer, prm, rows, train_rows, holdout


def run_evolution(
    rc: RunConfig,
    run_seed: int,
    out_dir: Path | str | None = None,
    hook: IterationHook | None = None,
) -> RunArtifacts:
    """Warmup, optional PRM pipeline, then iterate until the budget is spent."""
    rc.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    labeled = generate_pool(rc.env.train_queries, rc.env.cfg, rc.env.seed, TAG_POOL_LABELED)
    val = generate_pool(rc.env.val_queries, rc.env.cfg, rc.env.seed, TAG_POOL_VAL)
    unlabeled = (
        generate_pool(rc.env.unlabeled_queries, rc.env.cfg, rc.env.seed, TAG_POOL_UNLABELED)
        if rc.unlabeled.enabled and rc.env.unlabeled_queries > 0
        else []
    )

    base = init_params(rc.feature_spec())
    warmed, warmup_set = run_warmup(base, labeled, rc, run_seed)

    completer = prm = None
    rows: list = []
    holdout_mse = None
    if rc.reward.use_prm:
        completer, prm, rows, _, holdout_mse = build_prm_pipeline(
            rc, base, warmup_set, labeled, run_seed
        )

    paths: dict[str, str] = {}
    metrics_fh = None
    if out is not None:
        metrics_path = out / "metrics.jsonl"
        metrics_fh = open(metrics_path, "w", encoding="utf-8")
        paths["metrics"] = str(metrics_path)
        if prm is not None:
            prm_path = out / "prm.bin"
            prm_path.write_bytes(
                save_checkpoint(
                    Checkpoint(
                        version=PRM_CKPT_VERSION,
                        weights=prm.weights,
                        spec=prm.spec,
                        optimizer=zero_optimizer(prm.spec.dim),
                        schedule_position=None,
                        iteration=0,
                        rng_state=int(run_seed).to_bytes(8, "little"),
                    )
                )
            )
            paths["prm"] = str(prm_path)
            ds_path = out / "prm_dataset.jsonl"
            with open(ds_path, "w", encoding="utf-8") as fh:
                for row in rows:
                    fh.write(json.dumps(row_to_record(row), sort_keys=True) + "\n")
            paths["prm_dataset"] = str(ds_path)
        if completer is not None:
            comp_path = out / "completer.bin"
            _save_policy_checkpoint(
                comp_path,
                PolicyState(completer, zero_optimizer(completer.spec.dim),
                            LrSchedule(rc.policy.base_lr, rc.budget.total_steps)),
                0,
                run_seed,
            )
            paths["completer"] = str(comp_path)

    sched = LrSchedule(
        base_lr=rc.policy.base_lr,
        total_steps=rc.budget.total_steps,
        warmup_ratio=rc.policy.warmup_ratio,
    )
    state = EvolutionState(
        iteration=0,
        policy=PolicyState(warmed, zero_optimizer(warmed.spec.dim), sched),
        pi0=warmed,
        cursor_labeled=0,
        cursor_unlabeled=0,
        perm_labeled=np.random.Generator(
            np.random.PCG64(_ss(run_seed, TAG_PERM_LABELED))
        ).permutation(len(labeled)),
        perm_unlabeled=np.random.Generator(
            np.random.PCG64(_ss(run_seed, TAG_PERM_UNLABELED))
        ).permutation(max(1, len(unlabeled))),
        steps_taken=0,
        last_iteration_steps=0,
        chosen_temperature=rc.dynamics.controller.initial,
    )

    try:
        if rc.method.mode == "sft_only":
            if warmup_set:
                params, opt, new_sched = train_on_pairs(
                    warmed,
                    warmup_set,
                    steps=rc.budget.total_steps,
                    batch_size=rc.policy.batch_size,
                    base_lr=rc.policy.base_lr,
                    warmup_ratio=rc.policy.warmup_ratio,
                    seed=_derive_seed(run_seed, TAG_SFT_ONLY),
                )
                state.policy = PolicyState(params, opt, new_sched)
                state.steps_taken = rc.budget.total_steps
            else:
                warnings.warn("sft_only with an empty warmup set trains nothing")
            chosen = state.chosen_temperature
            pass_map, rp2_map = validation_sweep(
                state.policy.params, val,
                sorted(set(rc.dynamics.monitor_temperatures) | {chosen}),
                rc.dynamics.pass_k_values, prm,
                n_rollouts=rc.policy.rollouts_per_query, run_seed=run_seed, iteration=1,
            )
            ver = verifier_on_pool(
                state.policy.params, val, chosen, prm,
                n_rollouts=rc.policy.rollouts_per_query, run_seed=run_seed, iteration=1,
            )
            state.iteration = 1
            state.history.append(
                DynamicsRecord(
                    iteration=1,
                    temperature=chosen,
                    greedy_accuracy=greedy_accuracy(state.policy.params, val),
                    pass_at_k=pass_map,
                    reward_pass_at_2=rp2_map,
                    best_of_n=ver.best_of_n,
                    weighted_vote=ver.weighted_vote,
                    majority_vote=ver.majority_vote,
                )
            )
            if metrics_fh:
                _write_metrics_line(metrics_fh, state.history[-1])
            if out is not None:
                _save_policy_checkpoint(out / "ckpt_iter_1.bin", state.policy, 1, run_seed)
        else:
            while state.steps_taken < rc.budget.total_steps:
                if state.iteration >= rc.budget.max_iterations:
                    warnings.warn(
                        f"stopping after {state.iteration} iterations with "
                        f"{rc.budget.total_steps - state.steps_taken} budget steps unspent"
                    )
                    break
                run_iteration(state, rc, labeled, unlabeled, val, prm, run_seed, hook)
                if metrics_fh:
                    _write_metrics_line(metrics_fh, state.history[-1])
                if out is not None:
                    _save_policy_checkpoint(
                        out / f"ckpt_iter_{state.iteration}.bin",
                        state.policy, state.iteration, run_seed,
                    )
    finally:
        if metrics_fh:
            metrics_fh.close()

    if out is not None:
        final_path = out / "ckpt_final.bin"
        _save_policy_checkpoint(final_path, state.policy, state.iteration, run_seed)
        paths["final_checkpoint"] = str(final_path)
        if holdout_mse is not None:
            mse_path = out / "prm_holdout_mse.json"
            mse_path.write_text(json.dumps({"holdout_mse": holdout_mse}) + "\n")
            paths["prm_holdout_mse"] = str(mse_path)

    return RunArtifacts(
        records=state.history,
        final_params=state.policy.params,
        pi0=state.pi0,
        prm=prm,
        completer=completer,
        warmup_size=len(warmup_set),
        holdout_mse=holdout_mse,
        steps_taken=state.steps_taken,
        paths=paths,
    )

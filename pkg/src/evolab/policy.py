"""Trainable softmax policy over grid-reasoning actions.

The action space for an R x C grid is every (agg, axis, index) line
aggregation plus one terminal ANSWER action. Features are indicator
functions of (instance, position, action) only, never of the sampled
history, so the per-position action distribution of a policy is a fixed
matrix per instance; rollouts, likelihoods and completions all vectorize
on top of it.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .env import AGGS, AXES, Response, Step, TaskInstance, line_values
from .errors import (
    CorruptCheckpointError,
    DomainError,
    MalformedResponseError,
    NumericError,
)

ANSWER = "ANSWER"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@lru_cache(maxsize=None)
def actions_for(rows: int, cols: int) -> tuple:
    """Canonical action ordering: agg, then axis, then index; ANSWER last."""
    from .env import Hop

    acts: list = []
    for agg in AGGS:
        for axis in AXES:
            for index in range(rows if axis == "row" else cols):
                acts.append(Hop(agg, axis, index))
    acts.append(ANSWER)
    return tuple(acts)


def bucket_of(instance_id: str, n_buckets: int) -> int:
    return zlib.crc32(instance_id.encode("utf-8")) % n_buckets


@dataclass(frozen=True)
class FeatureSpec:
    """Descriptor of the indicator feature map.

    Besides the shared match/answer indicators (scaled down by
    `generic_scale`), each instance hashes into one of `n_buckets` groups
    that get their own copies of the full-match and answer indicators.
    The shared indicators let hand-built weights solve every instance at
    once, while the bucketed copies force training to cover the data:
    progress arrives bucket by bucket, which is what gives desk-scale runs
    their non-trivial accuracy/diversity dynamics.
    """

    name: str = "policy-v1"
    n_buckets: int = 28
    generic_scale: float = 0.25
    max_steps: int = 8

    # fixed slots for the shared indicators
    BIAS = 0
    AGG_MATCH = 1
    AXIS_MATCH = 2
    INDEX_MATCH = 3
    FULL_MATCH = 4
    ANSWER_AT_H = 5

    @property
    def dim(self) -> int:
        return 6 + 2 * self.n_buckets

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "n_buckets": self.n_buckets,
            "generic_scale": self.generic_scale,
            "max_steps": self.max_steps,
        }

    @staticmethod
    def from_json(data: dict) -> "FeatureSpec":
        return FeatureSpec(
            name=data["name"],
            n_buckets=int(data["n_buckets"]),
            generic_scale=float(data["generic_scale"]),
            max_steps=int(data["max_steps"]),
        )


@dataclass(frozen=True)
class PolicyParams:
    weights: np.ndarray
    spec: FeatureSpec


def init_params(spec: FeatureSpec) -> PolicyParams:
    return PolicyParams(weights=np.zeros(spec.dim), spec=spec)


@lru_cache(maxsize=None)
def value_table(inst: TaskInstance) -> np.ndarray:
    """Per-action line values; the trailing ANSWER slot is a placeholder 0."""
    acts = actions_for(inst.rows, inst.cols)
    vals = [line_values(inst.grid, a.agg, a.axis, a.index) for a in acts[:-1]]
    vals.append(0)
    return np.asarray(vals, dtype=np.int64)


@lru_cache(maxsize=None)
def feature_table(inst: TaskInstance, spec: FeatureSpec) -> np.ndarray:
    acts = actions_for(inst.rows, inst.cols)
    n_actions = len(acts)
    table = np.zeros((spec.max_steps, n_actions, spec.dim))
    bucket = bucket_of(inst.id, spec.n_buckets)
    g = spec.generic_scale
    h_count = inst.n_hops
    for pos in range(spec.max_steps):
        hop = inst.hops[pos] if pos < h_count else None
        for idx, act in enumerate(acts):
            row = table[pos, idx]
            row[spec.BIAS] = 1.0
            if act == ANSWER:
                if pos == h_count:
                    row[spec.ANSWER_AT_H] = g
                    row[6 + spec.n_buckets + bucket] = 1.0
                continue
            if hop is None:
                continue
            agg_ok = act.agg == hop.agg
            axis_ok = act.axis == hop.axis
            index_ok = act.index == hop.index
            if agg_ok:
                row[spec.AGG_MATCH] = g
            if axis_ok:
                row[spec.AXIS_MATCH] = g
            if index_ok:
                row[spec.INDEX_MATCH] = g
            if agg_ok and axis_ok and index_ok:
                row[spec.FULL_MATCH] = g
                row[6 + bucket] = 1.0
    return table


def position_logits(params: PolicyParams, inst: TaskInstance) -> np.ndarray:
    return feature_table(inst, params.spec) @ params.weights


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def position_probs(params: PolicyParams, inst: TaskInstance, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    return softmax_rows(position_logits(params, inst) / temperature)


def _seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def sample_action_matrix(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling; row p of `probs` drives column p of the output."""
    n, length = uniforms.shape
    cum = np.cumsum(probs, axis=-1)
    actions = np.empty((n, length), dtype=np.int64)
    for p in range(length):
        actions[:, p] = np.searchsorted(cum[p], uniforms[:, p], side="right")
    np.clip(actions, 0, probs.shape[-1] - 1, out=actions)
    return actions


@dataclass
class RolloutBatch:
    """Vectorized view of n sampled trajectories for one instance."""

    inst: TaskInstance
    actions: np.ndarray      # (n, L) action ids from start_pos onward
    start_pos: int
    n_new_steps: np.ndarray  # steps sampled before ANSWER (or L when truncated)
    answered: np.ndarray     # bool; emitted an answer with >= 1 total step
    predicted: np.ndarray    # fold of the first H values; valid where answered
    correct: np.ndarray      # answered and predicted == gold
    logprobs: np.ndarray     # log-likelihood of the sampled suffix

    def __len__(self) -> int:
        return self.actions.shape[0]


def summarize_actions(
    inst: TaskInstance,
    actions: np.ndarray,
    probs: np.ndarray,
    start_pos: int = 0,
    prefix_values: Sequence[int] = (),
) -> RolloutBatch:
    n, length = actions.shape
    answer_idx = probs.shape[-1] - 1
    is_ans = actions == answer_idx
    if length == 0:
        has_ans = np.zeros(n, dtype=bool)
        first_ans = np.zeros(n, dtype=np.int64)
    else:
        has_ans = is_ans.any(axis=1)
        first_ans = np.where(has_ans, is_ans.argmax(axis=1), length)
    n_new = first_ans
    n_pre = len(prefix_values)
    total = n_pre + n_new
    answered = has_ans & (total > 0)

    values = value_table(inst)[actions]
    pred = np.zeros(n, dtype=np.int64)
    for j in range(min(inst.n_hops, n_pre + length)):
        vj = np.full(n, prefix_values[j], dtype=np.int64) if j < n_pre else values[:, j - n_pre]
        if j == 0:
            contrib = vj
        else:
            sign = 1 if inst.combinators[j - 1] == "plus" else -1
            contrib = sign * vj
        pred = np.where(total > j, pred + contrib, pred)
    correct = answered & (pred == inst.gold_answer)

    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    taken = logp[np.arange(length)[None, :], actions]
    cum = np.cumsum(taken, axis=1)
    if length == 0:
        totals = np.zeros(n)
    else:
        idx = np.where(has_ans, first_ans, length - 1)
        totals = cum[np.arange(n), idx]
    return RolloutBatch(
        inst=inst,
        actions=actions,
        start_pos=start_pos,
        n_new_steps=n_new,
        answered=answered,
        predicted=pred,
        correct=correct,
        logprobs=totals,
    )


def rollout_batch(
    params: PolicyParams, inst: TaskInstance, temperature: float, n: int, seed
) -> RolloutBatch:
    if n < 1:
        raise DomainError(f"sample count must be >= 1, got {n}")
    probs = position_probs(params, inst, temperature)
    rng = np.random.Generator(np.random.PCG64(_seedseq(seed)))
    uniforms = rng.random((n, params.spec.max_steps))
    actions = sample_action_matrix(probs, uniforms)
    return summarize_actions(inst, actions, probs)


def batch_to_responses(batch: RolloutBatch) -> list[Response]:
    acts = actions_for(batch.inst.rows, batch.inst.cols)
    vals = value_table(batch.inst)
    out = []
    for i in range(len(batch)):
        k = int(batch.n_new_steps[i])
        steps = tuple(
            Step(acts[a].agg, acts[a].axis, acts[a].index, int(vals[a]))
            for a in batch.actions[i, :k]
        )
        answer = int(batch.predicted[i]) if batch.answered[i] else None
        out.append(Response(steps=steps, answer=answer, logprob=float(batch.logprobs[i])))
    return out


def sample_responses(
    params: PolicyParams, inst: TaskInstance, temperature: float, n: int, seed
) -> list[Response]:
    return batch_to_responses(rollout_batch(params, inst, temperature, n, seed))


def greedy_decode(params: PolicyParams, inst: TaskInstance) -> Response:
    """Argmax decoding; ties go to the lowest action ordinal. Temperature-free."""
    from .env import fold_prediction

    logits = position_logits(params, inst)
    acts = actions_for(inst.rows, inst.cols)
    vals = value_table(inst)
    answer_idx = len(acts) - 1
    steps: list[Step] = []
    answered = False
    for pos in range(params.spec.max_steps):
        a = int(np.argmax(logits[pos]))
        if a == answer_idx:
            answered = True
            break
        steps.append(Step(acts[a].agg, acts[a].axis, acts[a].index, int(vals[a])))
    answer = fold_prediction(inst, steps) if answered else None
    return Response(steps=tuple(steps), answer=answer, logprob=None)


def response_trace(inst: TaskInstance, resp: Response, spec: FeatureSpec) -> list[int]:
    """Recover the action-id sequence that decodes to `resp`."""
    acts = actions_for(inst.rows, inst.cols)
    index_of = {a: i for i, a in enumerate(acts[:-1])}
    answer_idx = len(acts) - 1
    if len(resp.steps) > spec.max_steps:
        raise MalformedResponseError(
            f"response has {len(resp.steps)} steps but decoding truncates at {spec.max_steps}"
        )
    trace = []
    for step in resp.steps:
        a = index_of.get(step.hop)
        if a is None:
            raise MalformedResponseError(f"step {step.hop} is not in the action space")
        trace.append(a)
    if resp.answer is not None:
        if not resp.steps:
            raise MalformedResponseError("a response with an answer must have >= 1 step")
        trace.append(answer_idx)
    elif len(resp.steps) == 0:
        trace.append(answer_idx)  # ANSWER as the very first action emits nothing
    elif len(resp.steps) != spec.max_steps:
        raise MalformedResponseError(
            "answerless response ends before the truncation limit; not decodable"
        )
    return trace


def response_logprob(
    params: PolicyParams, inst: TaskInstance, resp: Response, temperature: float
) -> float:
    trace = response_trace(inst, resp, params.spec)
    probs = position_probs(params, inst, temperature)
    with np.errstate(divide="ignore"):
        return float(sum(np.log(probs[pos, a]) for pos, a in enumerate(trace)))


# --- supervised updates ----------------------------------------------------

Batch = Sequence[tuple[TaskInstance, Response]]


def batch_nll(params: PolicyParams, batch: Batch) -> float:
    """Mean over the batch of per-sequence negative log-likelihood at T=1."""
    total = 0.0
    for inst, resp in batch:
        total -= response_logprob(params, inst, resp, 1.0)
    return total / len(batch)


def nll_and_grad(params: PolicyParams, batch: Batch) -> tuple[float, np.ndarray]:
    grad = np.zeros_like(params.weights)
    nll = 0.0
    for inst, resp in batch:
        trace = response_trace(inst, resp, params.spec)
        table = feature_table(inst, params.spec)
        probs = softmax_rows(position_logits(params, inst))
        length = len(trace)
        pos = np.arange(length)
        acts = np.asarray(trace)
        taken = table[pos, acts]                                   # (L, d)
        expected = np.einsum("pa,pad->pd", probs[:length], table[:length])
        grad += (expected - taken).sum(axis=0)
        with np.errstate(divide="ignore"):
            nll -= float(np.log(probs[pos, acts]).sum())
    n = len(batch)
    return nll / n, grad / n


@dataclass(frozen=True)
class OptimizerState:
    first_moments: np.ndarray
    second_moments: np.ndarray
    step_count: int


def zero_optimizer(dim: int) -> OptimizerState:
    return OptimizerState(np.zeros(dim), np.zeros(dim), 0)


def adam_step(
    weights: np.ndarray, opt: OptimizerState, grad: np.ndarray, lr: float
) -> tuple[np.ndarray, OptimizerState]:
    t = opt.step_count + 1
    m = ADAM_BETA1 * opt.first_moments + (1 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * opt.second_moments + (1 - ADAM_BETA2) * grad * grad
    m_hat = m / (1 - ADAM_BETA1**t)
    v_hat = v / (1 - ADAM_BETA2**t)
    new_w = weights - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new_w, OptimizerState(m, v, t)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_steps: int
    warmup_ratio: float = 0.1
    position: int = 0


def lr_at(sched: LrSchedule) -> float:
    ramp = sched.warmup_ratio * sched.total_steps
    if ramp <= 0:
        return sched.base_lr
    return sched.base_lr * min(1.0, sched.position / ramp)


def sft_update(
    params: PolicyParams, opt: OptimizerState, sched: LrSchedule, batch: Batch
) -> tuple[PolicyParams, OptimizerState, LrSchedule]:
    """One Adam step on the mean sequence NLL of `batch`."""
    if not batch:
        raise DomainError("sft_update requires a non-empty batch")
    _, grad = nll_and_grad(params, batch)
    if not np.isfinite(grad).all():
        ids = ",".join(inst.id for inst, _ in batch[:4])
        raise NumericError(f"non-finite gradient for batch [{ids}...]")
    new_w, new_opt = adam_step(params.weights, opt, grad, lr_at(sched))
    new_sched = replace(sched, position=min(sched.total_steps, sched.position + 1))
    return PolicyParams(new_w, params.spec), new_opt, new_sched


# --- checkpoints -----------------------------------------------------------

POLICY_CKPT_VERSION = "policy-ckpt-v1"
PRM_CKPT_VERSION = "prm-ckpt-v1"

# name -> decoder for the feature-spec JSON blob inside a checkpoint
SPEC_DECODERS: dict[str, Callable[[dict], object]] = {"policy-v1": FeatureSpec.from_json}

_MAGIC = b"EVCK"


@dataclass
class Checkpoint:
    version: str
    weights: np.ndarray
    spec: object
    optimizer: OptimizerState
    schedule_position: int | None
    iteration: int
    rng_state: bytes = b""


def save_checkpoint(ck: Checkpoint) -> bytes:
    """Little-endian layout: magic, version tag, iteration, spec JSON,
    weights, optional optimizer, optional schedule position, rng state,
    crc32 trailer."""
    import json as _json

    out = bytearray()
    out += _MAGIC
    tag = ck.version.encode("utf-8")
    out += struct.pack("<H", len(tag)) + tag
    out += struct.pack("<Q", ck.iteration)
    spec_blob = _json.dumps(ck.spec.to_json(), sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(spec_blob)) + spec_blob
    w = np.ascontiguousarray(ck.weights, dtype="<f8")
    out += struct.pack("<I", w.size) + w.tobytes()
    if ck.optimizer is not None:
        out += b"\x01"
        out += struct.pack("<Q", ck.optimizer.step_count)
        out += np.ascontiguousarray(ck.optimizer.first_moments, dtype="<f8").tobytes()
        out += np.ascontiguousarray(ck.optimizer.second_moments, dtype="<f8").tobytes()
    else:
        out += b"\x00"
    if ck.schedule_position is not None:
        out += b"\x01" + struct.pack("<Q", ck.schedule_position)
    else:
        out += b"\x00"
    out += struct.pack("<I", len(ck.rng_state)) + ck.rng_state
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CorruptCheckpointError("truncated checkpoint")
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(data: bytes, expected_version: str | None = None) -> Checkpoint:
    import json as _json

    if len(data) < 8 or data[:4] != _MAGIC:
        raise CorruptCheckpointError("not a checkpoint stream")
    crc_stored = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != crc_stored:
        raise CorruptCheckpointError("checksum mismatch (truncated or tampered stream)")
    r = _Reader(data[:-4])
    r.take(4)
    (tag_len,) = r.unpack("<H")
    version = r.take(tag_len).decode("utf-8")
    if version not in (POLICY_CKPT_VERSION, PRM_CKPT_VERSION):
        raise CorruptCheckpointError(f"unknown checkpoint version {version!r}")
    if expected_version is not None and version != expected_version:
        raise CorruptCheckpointError(
            f"version mismatch: expected {expected_version!r}, found {version!r}"
        )
    (iteration,) = r.unpack("<Q")
    (spec_len,) = r.unpack("<I")
    spec_data = _json.loads(r.take(spec_len).decode("utf-8"))
    decoder = SPEC_DECODERS.get(spec_data.get("name"))
    if decoder is None:
        raise CorruptCheckpointError(f"unknown feature spec {spec_data.get('name')!r}")
    spec = decoder(spec_data)
    (dim,) = r.unpack("<I")
    weights = np.frombuffer(r.take(8 * dim), dtype="<f8").copy()
    (has_opt,) = r.unpack("<B")
    if has_opt:
        (step_count,) = r.unpack("<Q")
        m = np.frombuffer(r.take(8 * dim), dtype="<f8").copy()
        v = np.frombuffer(r.take(8 * dim), dtype="<f8").copy()
        optimizer = OptimizerState(m, v, step_count)
    else:
        optimizer = zero_optimizer(dim)
    (has_sched,) = r.unpack("<B")
    schedule_position = r.unpack("<Q")[0] if has_sched else None
    (rng_len,) = r.unpack("<I")
    rng_state = r.take(rng_len)
    if r.off != len(r.data):
        raise CorruptCheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(
        version=version,
        weights=weights,
        spec=spec,
        optimizer=optimizer,
        schedule_position=schedule_position,
        iteration=iteration,
        rng_state=rng_state,
    )

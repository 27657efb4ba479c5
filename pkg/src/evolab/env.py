"""Synthetic multi-hop grid reasoning tasks.

A task shows a small integer grid as context and asks for a chain of line
aggregations (sum/max/min over one row or column) combined left to right
with plus/minus. The answer is an exact integer, so answer checking is
integer equality and every instance can be re-derived from its fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, MalformedResponseError, UndefinedInputError

AGGS = ("sum", "max", "min")
AXES = ("row", "col")
COMBINATORS = ("plus", "minus")

GRID_MIN_SIDE = 2
GRID_MAX_SIDE = 4
HOPS_MIN = 1
HOPS_MAX = 3
CELL_LOW = 0
CELL_HIGH = 9


@dataclass(frozen=True)
class Hop:
    agg: str
    axis: str
    index: int


@dataclass(frozen=True)
class Step:
    """One executed reasoning step: a hop plus the value it evaluates to.

    The value is always the true aggregation of the referenced line; a step
    is "wrong" by referencing a hop the query did not ask for, never by
    recording a bad number.
    """

    agg: str
    axis: str
    index: int
    value: int

    @property
    def hop(self) -> Hop:
        return Hop(self.agg, self.axis, self.index)


@dataclass(frozen=True)
class Response:
    steps: tuple[Step, ...]
    answer: int | None
    logprob: float | None = None


@dataclass(frozen=True)
class TaskInstance:
    id: str
    grid: tuple[tuple[int, ...], ...]
    hops: tuple[Hop, ...]
    combinators: tuple[str, ...]
    gold_answer: int

    @property
    def rows(self) -> int:
        return len(self.grid)

    @property
    def cols(self) -> int:
        return len(self.grid[0])

    @property
    def n_hops(self) -> int:
        return len(self.hops)


@dataclass(frozen=True)
class EnvConfig:
    rows_min: int = 2
    rows_max: int = 4
    cols_min: int = 2
    cols_max: int = 4
    hops_min: int = 1
    hops_max: int = 3

    def validate(self) -> None:
        problems = []
        if not GRID_MIN_SIDE <= self.rows_min <= self.rows_max <= GRID_MAX_SIDE:
            problems.append(f"rows_min/rows_max must satisfy {GRID_MIN_SIDE} <= min <= max <= {GRID_MAX_SIDE}, "
                            f"got ({self.rows_min}, {self.rows_max})")
        if not GRID_MIN_SIDE <= self.cols_min <= self.cols_max <= GRID_MAX_SIDE:
            problems.append(f"cols_min/cols_max must satisfy {GRID_MIN_SIDE} <= min <= max <= {GRID_MAX_SIDE}, "
                            f"got ({self.cols_min}, {self.cols_max})")
        if not HOPS_MIN <= self.hops_min <= self.hops_max <= HOPS_MAX:
            problems.append(f"hops_min/hops_max must satisfy {HOPS_MIN} <= min <= max <= {HOPS_MAX}, "
                            f"got ({self.hops_min}, {self.hops_max})")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def max_steps(self) -> int:
        # Decoding truncates at 2*H_max + 2 actions; responses that never
        # emit an answer by then count as incorrect.
        return 2 * self.hops_max + 2


def line_values(grid: Sequence[Sequence[int]], agg: str, axis: str, index: int) -> int:
    arr = np.asarray(grid)
    line = arr[index, :] if axis == "row" else arr[:, index]
    if agg == "sum":
        return int(line.sum())
    if agg == "max":
        return int(line.max())
    return int(line.min())


def fold_values(values: Sequence[int], combinators: Sequence[str]) -> int:
    acc = int(values[0])
    for comb, v in zip(combinators, values[1:]):
        acc = acc + int(v) if comb == "plus" else acc - int(v)
    return acc


def fold_prediction(inst: TaskInstance, steps: Sequence[Step]) -> int | None:
    """Predicted answer: left fold of the first H step values.

    With fewer than H steps the fold runs over what is available, so steps
    past position H never change the prediction.
    """
    if not steps:
        return None
    taken = steps[: inst.n_hops]
    return fold_values([s.value for s in taken], inst.combinators[: len(taken) - 1])


def generate_instance(seed: int, cfg: EnvConfig) -> TaskInstance:
    """Deterministically build one task from a 64-bit seed."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    rows = int(rng.integers(cfg.rows_min, cfg.rows_max + 1))
    cols = int(rng.integers(cfg.cols_min, cfg.cols_max + 1))
    grid = tuple(
        tuple(int(v) for v in rng.integers(CELL_LOW, CELL_HIGH + 1, size=cols))
        for _ in range(rows)
    )
    n_hops = int(rng.integers(cfg.hops_min, cfg.hops_max + 1))
    hops = []
    for _ in range(n_hops):
        agg = AGGS[int(rng.integers(0, len(AGGS)))]
        axis = AXES[int(rng.integers(0, len(AXES)))]
        index = int(rng.integers(0, rows if axis == "row" else cols))
        hops.append(Hop(agg, axis, index))
    combinators = tuple(
        COMBINATORS[int(rng.integers(0, len(COMBINATORS)))] for _ in range(n_hops - 1)
    )
    values = [line_values(grid, h.agg, h.axis, h.index) for h in hops]
    gold = fold_values(values, combinators)
    return TaskInstance(
        id=f"t{int(seed) & 0xFFFFFFFFFFFFFFFF:016x}",
        grid=grid,
        hops=tuple(hops),
        combinators=combinators,
        gold_answer=gold,
    )


def generate_pool(count: int, cfg: EnvConfig, seed: int, tag: int) -> list[TaskInstance]:
    """Generate `count` instances on an independent, reproducible seed stream."""
    seeds = np.random.SeedSequence([int(seed), int(tag)]).generate_state(count, np.uint64)
    return [generate_instance(int(s), cfg) for s in seeds]


def _check_steps(inst: TaskInstance, steps: Sequence[Step]) -> None:
    for s in steps:
        if s.agg not in AGGS or s.axis not in AXES:
            raise MalformedResponseError(f"unknown step kind ({s.agg}, {s.axis})")
        limit = inst.rows if s.axis == "row" else inst.cols
        if not 0 <= s.index < limit:
            raise MalformedResponseError(
                f"step index {s.index} out of range for axis {s.axis} on a "
                f"{inst.rows}x{inst.cols} grid"
            )


def evaluate_response(inst: TaskInstance, resp: Response) -> tuple[int | None, bool]:
    """Exact-match evaluation: (predicted answer or None, correct flag)."""
    _check_steps(inst, resp.steps)
    if resp.answer is None:
        return None, False
    predicted = fold_prediction(inst, resp.steps)
    return predicted, predicted == inst.gold_answer


def canonical_solution(inst: TaskInstance) -> Response:
    """The intended solution: exactly the query hops, in order, then the answer."""
    steps = tuple(
        Step(h.agg, h.axis, h.index, line_values(inst.grid, h.agg, h.axis, h.index))
        for h in inst.hops
    )
    return Response(steps=steps, answer=inst.gold_answer, logprob=None)


def relevance_fraction(inst: TaskInstance, resp: Response) -> float:
    """Fraction of steps matching the query hop at their position.

    Steps at positions >= H are counted as irrelevant.
    """
    if not resp.steps:
        raise UndefinedInputError("relevance_fraction is undefined for an empty response")
    hits = 0
    for pos, step in enumerate(resp.steps):
        if pos < inst.n_hops and step.hop == inst.hops[pos]:
            hits += 1
    return hits / len(resp.steps)


# --- serialization ---------------------------------------------------------
# One JSON object per line; field names are part of the on-disk contract.

def instance_to_record(inst: TaskInstance) -> dict:
    return {
        "id": inst.id,
        "grid": [list(row) for row in inst.grid],
        "hops": [{"agg": h.agg, "axis": h.axis, "index": h.index} for h in inst.hops],
        "combinators": list(inst.combinators),
        "gold_answer": inst.gold_answer,
    }


def instance_from_record(rec: dict) -> TaskInstance:
    return TaskInstance(
        id=rec["id"],
        grid=tuple(tuple(int(v) for v in row) for row in rec["grid"]),
        hops=tuple(Hop(h["agg"], h["axis"], int(h["index"])) for h in rec["hops"]),
        combinators=tuple(rec["combinators"]),
        gold_answer=int(rec["gold_answer"]),
    )


def write_instances(path, instances: Iterable[TaskInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_record(inst), sort_keys=True) + "\n")


def read_instances(path) -> list[TaskInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(instance_from_record(json.loads(line)))
    return out

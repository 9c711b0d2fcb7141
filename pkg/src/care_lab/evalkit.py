"""Evaluation protocol: success rollouts, best-of-mean aggregation, similarity, zero-shot."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import env as E
from .context import cosine_similarity
from .rng import SeededPrng, derive_seed
from .sac import SacAgent
from .stats import WelchResult, welch_ttest


class GridMismatchError(ValueError):
    pass


class ZeroShotError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    step: int
    task: str
    success: float
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "task": self.task, "success": self.success,
                           "seed": self.seed})


@dataclass(frozen=True)
class EvalTimeSeries:
    seed: int
    steps: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.steps) != len(self.values):
            raise ValueError("steps and values differ in length")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError(f"eval steps must be strictly increasing, got {self.steps}")


# ---------------------------------------------------------------------------
# policies


class EvalPolicy(Protocol):
    def eval_actions(self, obs: np.ndarray, tasks: Sequence[E.TaskSpec],
                     states: Sequence[E.EnvState], indices: np.ndarray) -> np.ndarray: ...


class SacPolicy:
    """Deterministic (mean-action) view of a trained agent."""

    def __init__(self, agent: SacAgent):
        self.agent = agent

    def eval_actions(self, obs, tasks, states, indices):
        return self.agent.act(obs, indices)


class ScriptedAgent:
    def eval_actions(self, obs, tasks, states, indices):
        return np.stack([E.scripted_action(t, s) for t, s in zip(tasks, states)])


class RandomAgent:
    """Uniform actions from a seeded stream."""

    def __init__(self, seed: int = 0):
        self.prng = SeededPrng(derive_seed(seed, "random-agent"))

    def eval_actions(self, obs, tasks, states, indices):
        return self.prng.uniform_range(-1.0, 1.0, (len(tasks), E.ACTION_DIM))


def _as_policy(agent) -> EvalPolicy:
    return SacPolicy(agent) if isinstance(agent, SacAgent) else agent


# ---------------------------------------------------------------------------
# rollouts


def evaluate(agent, tasks: Sequence[E.TaskSpec], n_episodes: int = 5, eval_seed: int = 10000,
             step: int = 0, seed: int = 0, indices: Sequence[int] | None = None) -> list[EvalRecord]:
    """Mean any-step success over ``n_episodes`` per task, all episodes stepped in lockstep.

    Episode ``j`` of every task uses seed ``eval_seed + j``. ``indices`` overrides the
    task index the agent is conditioned on (defaults to each task's own index).
    """
    policy = _as_policy(agent)
    idx_map = [t.index for t in tasks] if indices is None else list(indices)
    slots = [(ti, j) for ti in range(len(tasks)) for j in range(n_episodes)]
    states, obs = [], []
    for ti, j in slots:
        s, o = E.reset(tasks[ti], eval_seed + j)
        states.append(s)
        obs.append(o)
    solved = np.zeros(len(slots), dtype=bool)
    active = list(range(len(slots)))
    while active:
        batch_obs = np.stack([obs[k] for k in active])
        batch_tasks = [tasks[slots[k][0]] for k in active]
        batch_idx = np.array([idx_map[slots[k][0]] for k in active], dtype=np.int64)
        actions = policy.eval_actions(batch_obs, batch_tasks, [states[k] for k in active], batch_idx)
        still = []
        for row, k in enumerate(active):
            task = tasks[slots[k][0]]
            states[k], obs[k], _, done, success = E.step(task, states[k], actions[row])
            if success:
                solved[k] = True
            elif not done:
                still.append(k)
        active = still
    rates = solved.reshape(len(tasks), n_episodes).mean(axis=1) if slots else np.zeros(0)
    return [EvalRecord(step, t.name, float(r), seed) for t, r in zip(tasks, rates)]


def zero_shot_eval(agent: SacAgent, family: E.Family, held_out: Sequence[E.TaskSpec] | None = None,
                   n_episodes: int = 5, eval_seed: int = 10000, step: int = 0, seed: int = 0,
                   fallback: str = "error") -> list[EvalRecord]:
    """Evaluate on tasks never trained on, with no parameter updates.

    Variants without a metadata path have no parameters for unseen indices; with
    ``fallback="nearest"`` an unseen index is clamped to the closest trained index.
    """
    tasks = list(family.held_out if held_out is None else held_out)
    if not tasks:
        raise ZeroShotError("family has no held-out tasks")
    train_names = {t.name for t in family.train}
    for t in tasks:
        if t.name in train_names:
            raise ZeroShotError(f"task {t.name} is part of the training set")
    indices = [t.index for t in tasks]
    if isinstance(agent, SacAgent) and not agent.rep.cfg.uses_metadata:
        n_train = agent.rep.n_train
        if fallback == "nearest":
            indices = [min(i, n_train - 1) for i in indices]
        else:
            raise ZeroShotError(
                f"variant {agent.rep.cfg.name!r} has no task embedding for unseen tasks "
                f"{[t.name for t in tasks]}; set run.zero_shot_fallback = 'nearest' to clamp")
    return evaluate(agent, tasks, n_episodes, eval_seed, step=step, seed=seed, indices=indices)


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class AggregateResult:
    score: float
    stderr: float
    best_step: int
    steps: tuple[int, ...]
    mean_series: tuple[float, ...]
    per_seed_at_best: tuple[float, ...]

    def format(self, digits: int = 3) -> str:
        return f"{self.score:.{digits}f} ± {self.stderr:.{digits}f}"


def aggregate(series: Sequence[EvalTimeSeries]) -> AggregateResult:
    """Average across seeds per eval point, report the max; stderr at the earliest argmax."""
    if not series:
        raise ValueError("aggregate needs at least one series")
    grid = series[0].steps
    for s in series[1:]:
        if s.steps != grid:
            raise GridMismatchError(f"seed {s.seed} evaluated at {s.steps}, seed {series[0].seed} at {grid}")
    if not grid:
        raise ValueError("aggregate needs at least one eval point")
    values = np.array([s.values for s in series], dtype=np.float64)
    mean = values.mean(axis=0)
    best = int(np.argmax(mean))  # first occurrence = earliest step
    column = values[:, best]
    stderr = float(column.std(ddof=1) / math.sqrt(len(series))) if len(series) > 1 else 0.0
    return AggregateResult(float(mean[best]), stderr, grid[best], tuple(grid),
                           tuple(float(m) for m in mean), tuple(float(c) for c in column))


def series_from_records(records: Iterable[EvalRecord | dict], tasks: Sequence[str] | None = None,
                        seed: int | None = None) -> EvalTimeSeries:
    """Mean success across tasks per step, restricted to ``tasks`` if given."""
    by_step: dict[int, dict[str, float]] = {}
    seeds = set()
    for r in records:
        d = r if isinstance(r, dict) else {"step": r.step, "task": r.task, "success": r.success, "seed": r.seed}
        if tasks is not None and d["task"] not in tasks:
            continue
        by_step.setdefault(int(d["step"]), {})[d["task"]] = float(d["success"])
        seeds.add(int(d.get("seed", 0)))
    steps = sorted(by_step)
    names = None
    for st in steps:
        if names is None:
            names = sorted(by_step[st])
        elif sorted(by_step[st]) != names:
            raise GridMismatchError(f"step {st} covers tasks {sorted(by_step[st])}, expected {names}")
    if seed is None:
        seed = min(seeds) if seeds else 0
    return EvalTimeSeries(seed, tuple(steps), tuple(float(np.mean(list(by_step[s].values()))) for s in steps))


def read_eval_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_eval_jsonl(path: str | Path, records: Iterable[EvalRecord], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def compare(a: Sequence[EvalTimeSeries], b: Sequence[EvalTimeSeries],
            p_threshold: float = 0.05) -> tuple[AggregateResult, AggregateResult, WelchResult]:
    """Aggregate both groups and test the per-seed values at each group's best step."""
    ra, rb = aggregate(a), aggregate(b)
    return ra, rb, welch_ttest(ra.per_seed_at_best, rb.per_seed_at_best, p_threshold)


# ---------------------------------------------------------------------------
# similarity


def similarity_matrix(vectors: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    vecs = [np.asarray(v, dtype=np.float64) for v in vectors]
    n = len(vecs)
    if n < 2:
        raise ValueError("similarity_matrix needs at least two vectors")
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = cosine_similarity(vecs[i], vecs[j])
    return out


def write_similarity_csv(path: str | Path, names: Sequence[str], matrix: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task", *names])
        for name, row in zip(names, matrix):
            w.writerow([name, *(repr(float(x)) for x in row)])


def read_similarity_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    mat = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return names, mat

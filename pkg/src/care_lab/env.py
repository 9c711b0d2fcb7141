"""Synthetic block-contextual task family.

Every task shares one 8-dimensional observation layout

    [agent x, agent y, vel x, vel y, joint, goal x, goal y, anchor x]

but which entries matter depends on the task: a drawer task ignores the goal,
a reach task ignores the joint. The object anchor's height is a per-object
constant that is *not* observed, so the task description carries information
the observation does not.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .rng import SeededPrng, derive_seed

OBS_DIM = 8
ACTION_DIM = 3
ARENA = 1.0
SUCCESS_RADIUS = 0.1


class EpisodeDone(RuntimeError):
    pass


class FamilyError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectKind:
    name: str
    stiffness: float
    rest: float
    gain: float
    anchor_y: float

    def __post_init__(self):
        if not 0.0 <= self.stiffness < 1.0:
            raise ValueError(f"{self.name}: stiffness must lie in [0, 1)")
        if self.gain <= 0.0:
            raise ValueError(f"{self.name}: gain must be positive")


def _joint_at_least(x: float) -> Callable:
    return lambda pos, joint, goal, anchor: joint >= x


def _joint_at_most(x: float) -> Callable:
    return lambda pos, joint, goal, anchor: joint <= x


def _near_anchor(pos, joint, goal, anchor) -> bool:
    return math.hypot(pos[0] - anchor[0], pos[1] - anchor[1]) < SUCCESS_RADIUS


def _near_goal(pos, joint, goal, anchor) -> bool:
    return math.hypot(pos[0] - goal[0], pos[1] - goal[1]) < SUCCESS_RADIUS


@dataclass(frozen=True)
class SkillKind:
    name: str
    predicate: Callable = field(compare=False)
    joint_target: float | None
    weight: float
    target_point: str  # "anchor" or "goal": what the distance shaping pulls toward
    manipulation_sign: float = 0.0  # used only by the scripted oracle


OBJECTS: dict[str, ObjectKind] = {
    o.name: o
    for o in [
        ObjectKind("drawer", stiffness=0.05, rest=0.5, gain=0.25, anchor_y=-0.6),
        ObjectKind("window", stiffness=0.05, rest=0.5, gain=0.25, anchor_y=0.6),
        ObjectKind("door", stiffness=0.02, rest=0.5, gain=0.2, anchor_y=0.0),
        ObjectKind("button", stiffness=0.2, rest=0.5, gain=0.5, anchor_y=0.3),
        ObjectKind("puck", stiffness=0.0, rest=0.5, gain=0.1, anchor_y=0.0),
    ]
}

SKILLS: dict[str, SkillKind] = {
    s.name: s
    for s in [
        SkillKind("open", _joint_at_least(0.9), joint_target=1.0, weight=1.0,
                  target_point="anchor", manipulation_sign=1.0),
        SkillKind("close", _joint_at_most(0.1), joint_target=0.0, weight=1.0,
                  target_point="anchor", manipulation_sign=-1.0),
        SkillKind("reach", _near_anchor, joint_target=None, weight=0.0, target_point="anchor"),
        SkillKind("push", _near_goal, joint_target=None, weight=0.0, target_point="goal"),
    ]
}


@dataclass(frozen=True)
class GoalSampler:
    low: float = -0.8
    high: float = 0.8

    def sample(self, prng: SeededPrng) -> tuple[float, float]:
        g = prng.uniform_range(self.low, self.high, 2)
        return float(g[0]), float(g[1])


@dataclass(frozen=True)
class TaskSpec:
    index: int
    skill: SkillKind
    obj: ObjectKind
    goal_sampler: GoalSampler
    metadata: str
    horizon: int = 60

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @property
    def name(self) -> str:
        return f"{self.skill.name}-{self.obj.name}"


@dataclass(frozen=True)
class EnvState:
    pos: tuple[float, float]
    vel: tuple[float, float]
    joint: float
    goal: tuple[float, float]
    anchor: tuple[float, float]
    step: int = 0
    done: bool = False

    def observation(self) -> np.ndarray:
        return np.array([self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.joint,
                         self.goal[0], self.goal[1], self.anchor[0]], dtype=np.float64)


@dataclass(frozen=True)
class Family:
    train: tuple[TaskSpec, ...]
    held_out: tuple[TaskSpec, ...] = ()

    @property
    def all_tasks(self) -> tuple[TaskSpec, ...]:
        return self.train + self.held_out

    def by_name(self, name: str) -> TaskSpec:
        for t in self.all_tasks:
            if t.name == name:
                return t
        raise KeyError(name)


PRESETS: dict[str, dict] = {
    "mt5": {
        "train": [("reach", "puck"), ("push", "puck"), ("open", "drawer"),
                  ("close", "drawer"), ("open", "window")],
        "held_out": [("close", "window")],
    },
    "mt3": {
        "train": [("open", "drawer"), ("close", "window"), ("close", "drawer")],
        "held_out": [("open", "window")],
    },
}


def metadata_for(skill: str, obj: str) -> str:
    return f"{skill} the {obj}"


def make_family(train: Sequence[Sequence[str]], held_out: Sequence[Sequence[str]] = (),
                horizon: int = 60) -> Family:
    """Build a family; held-out pairs get indices after the training pairs."""
    pairs = [tuple(p) for p in train] + [tuple(p) for p in held_out]
    seen = set()
    for p in pairs:
        if len(p) != 2:
            raise FamilyError(f"task pair must be (skill, object), got {p!r}")
        if p[0] not in SKILLS:
            raise FamilyError(f"unknown skill {p[0]!r}; known: {sorted(SKILLS)}")
        if p[1] not in OBJECTS:
            raise FamilyError(f"unknown object {p[1]!r}; known: {sorted(OBJECTS)}")
        if p in seen:
            raise FamilyError(f"duplicate task pair {p[0]}-{p[1]}")
        seen.add(p)
    train_skills = {p[0] for p in train}
    train_objects = {p[1] for p in train}
    for s, o in held_out:
        if s not in train_skills or o not in train_objects:
            raise FamilyError(
                f"held-out pair {s}-{o} is not a composition of training skills and objects")
    tasks = [TaskSpec(i, SKILLS[s], OBJECTS[o], GoalSampler(), metadata_for(s, o), horizon)
             for i, (s, o) in enumerate(pairs)]
    n = len(train)
    return Family(tuple(tasks[:n]), tuple(tasks[n:]))


def make_preset(name: str, horizon: int = 60) -> Family:
    if name not in PRESETS:
        raise FamilyError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    p = PRESETS[name]
    return make_family(p["train"], p["held_out"], horizon)


def reset(task: TaskSpec, episode_seed: int) -> tuple[EnvState, np.ndarray]:
    prng = SeededPrng(derive_seed(episode_seed, task.name))
    start = prng.uniform_range(-0.9, 0.9, 2)
    anchor_x = float(prng.uniform_range(-0.6, 0.6))
    goal = task.goal_sampler.sample(prng)
    state = EnvState(pos=(float(start[0]), float(start[1])), vel=(0.0, 0.0),
                     joint=task.obj.rest, goal=goal, anchor=(anchor_x, task.obj.anchor_y))
    return state, state.observation()


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def joint_update(obj: ObjectKind, joint: float, manipulation: float, proximity: float) -> float:
    """Object dynamics; depend only on the object kind, never on the task."""
    return _clamp(joint + obj.gain * manipulation * proximity - obj.stiffness * (joint - obj.rest),
                  0.0, 1.0)


def step(task: TaskSpec, state: EnvState, action) -> tuple[EnvState, np.ndarray, float, bool, bool]:
    """Advance one step: returns (state, observation, reward, done, success)."""
    if state.done:
        raise EpisodeDone(f"{task.name}: step() called on a finished episode")
    a0 = _clamp(float(action[0]), -1.0, 1.0)
    a1 = _clamp(float(action[1]), -1.0, 1.0)
    a2 = _clamp(float(action[2]), -1.0, 1.0)
    vx = 0.8 * state.vel[0] + 0.1 * a0
    vy = 0.8 * state.vel[1] + 0.1 * a1
    px = _clamp(state.pos[0] + vx, -ARENA, ARENA)
    py = _clamp(state.pos[1] + vy, -ARENA, ARENA)
    ax, ay = state.anchor
    anchor_dist = math.hypot(px - ax, py - ay)
    proximity = max(0.0, 1.0 - 2.0 * anchor_dist)
    joint = joint_update(task.obj, state.joint, a2, proximity)

    skill = task.skill
    success = bool(skill.predicate((px, py), joint, state.goal, state.anchor))
    if skill.target_point == "goal":
        dist = math.hypot(px - state.goal[0], py - state.goal[1])
    else:
        dist = anchor_dist
    reward = -dist
    if skill.joint_target is not None:
        reward -= skill.weight * abs(joint - skill.joint_target)
    if success:
        reward += 1.0
    n = state.step + 1
    done = success or n >= task.horizon
    new = EnvState((px, py), (vx, vy), joint, state.goal, state.anchor, n, done)
    return new, new.observation(), reward, done, success


def reward_bounds(task: TaskSpec) -> tuple[float, float]:
    return -(2.0 * math.sqrt(2.0) + task.skill.weight), 1.0


def scripted_action(task: TaskSpec, state: EnvState) -> np.ndarray:
    """Hand-coded controller: steer to the skill's target point, then actuate."""
    tx, ty = state.goal if task.skill.target_point == "goal" else state.anchor
    out = np.zeros(ACTION_DIM)
    for d, (p, v, t) in enumerate(zip(state.pos, state.vel, (tx, ty))):
        desired = 0.3 * (t - p)
        out[d] = _clamp((desired - 0.8 * v) / 0.1, -1.0, 1.0)
    out[2] = task.skill.manipulation_sign
    return out


def rollout(task: TaskSpec, episode_seed: int, policy: Callable[[EnvState, np.ndarray], np.ndarray]) -> bool:
    """Run one episode; success if the predicate held at any step."""
    state, obs = reset(task, episode_seed)
    while True:
        state, obs, _, done, success = step(task, state, policy(state, obs))
        if success:
            return True
        if done:
            return False


def with_horizon(task: TaskSpec, horizon: int) -> TaskSpec:
    return replace(task, horizon=horizon)

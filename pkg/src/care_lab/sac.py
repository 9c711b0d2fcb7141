"""Soft Actor-Critic with a value network, twin critics and per-task temperatures."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nets import Mlp, MlpSpec, PolicyHead, policy_mean_action, policy_sample
from .repr import Representation
from .rng import SeededPrng, derive_seed
from .tensor import AdamState, Graph, ShapeError, Tensor, adam_step, no_grad


class EmptyBatchError(ValueError):
    pass


class InsufficientDataError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    temperature_lr: float = 3e-4
    batch_per_task: int = 128
    reward_scale: float = 1.0
    exploration_steps: int = 1500
    init_temperature: float = 1.0
    target_entropy: float | None = None  # None -> -|A|
    actor_hidden: tuple[int, ...] = (400, 400, 400)
    critic_hidden: tuple[int, ...] = (400, 400, 400)

    def __post_init__(self):
        self.actor_hidden = tuple(self.actor_hidden)
        self.critic_hidden = tuple(self.critic_hidden)
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.batch_per_task < 1:
            raise ValueError("batch_per_task must be >= 1")
        if self.init_temperature <= 0.0:
            raise ValueError("init_temperature must be positive")


# ---------------------------------------------------------------------------
# replay


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    task: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]

    def select(self, rows) -> "Batch":
        return Batch(self.obs[rows], self.action[rows], self.next_obs[rows], self.reward[rows],
                     self.done[rows], self.task[rows])


class ReplayBuffer:
    """Ring buffer of task-tagged transitions with FIFO eviction."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, action_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.task = np.zeros(capacity, dtype=np.int64)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action, next_obs, reward: float, done: bool, task: int) -> None:
        i = self.cursor
        self.obs[i] = obs
        self.action[i] = action
        self.next_obs[i] = next_obs
        self.reward[i] = reward
        self.done[i] = float(done)
        self.task[i] = task
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _ordered_rows(self) -> np.ndarray:
        start = self.cursor if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def transitions(self) -> Batch:
        """All stored transitions, oldest first."""
        return self.gather(self._ordered_rows())

    def gather(self, rows) -> Batch:
        rows = np.asarray(rows, dtype=np.int64)
        return Batch(self.obs[rows].copy(), self.action[rows].copy(), self.next_obs[rows].copy(),
                     self.reward[rows].copy(), self.done[rows].copy(), self.task[rows].copy())

    def sample(self, prng: SeededPrng, n: int) -> Batch:
        if self.size == 0:
            raise InsufficientDataError("cannot sample from an empty buffer")
        return self.gather(prng.integers(self.size, n))

    def task_counts(self, n_tasks: int) -> np.ndarray:
        return np.bincount(self.task[: self.size], minlength=n_tasks)

    def state_arrays(self) -> dict[str, np.ndarray]:
        n = self.size
        return {"buffer.obs": self.obs[:n], "buffer.action": self.action[:n],
                "buffer.next_obs": self.next_obs[:n], "buffer.reward": self.reward[:n],
                "buffer.done": self.done[:n], "buffer.task": self.task[:n].astype(np.float64)}

    def load_state(self, arrays: dict[str, np.ndarray], size: int, cursor: int) -> None:
        if size > self.capacity:
            raise ShapeError(f"buffer checkpoint holds {size} rows, capacity is {self.capacity}")
        for name in ("obs", "action", "next_obs", "reward", "done"):
            src = arrays[f"buffer.{name}"]
            dst = getattr(self, name)
            if src.shape[1:] != dst.shape[1:] or src.shape[0] != size:
                raise ShapeError(f"buffer.{name}: checkpoint shape {src.shape} does not fit {dst.shape}")
            dst[:size] = src
        self.task[:size] = arrays["buffer.task"].astype(np.int64)
        self.size = size
        self.cursor = cursor


# ---------------------------------------------------------------------------
# agent


class SacAgent:
    def __init__(self, rep: Representation, action_dim: int, n_tasks: int, cfg: TrainConfig,
                 seed: int = 0):
        self.rep = rep
        self.cfg = cfg
        self.action_dim = action_dim
        self.n_tasks = n_tasks
        heads = n_tasks if rep.cfg.multi_head else 1
        self.multi_head = heads > 1
        zdim = rep.state_dim
        self.policy = PolicyHead(zdim, action_dim, cfg.actor_hidden, seed=derive_seed(seed, "policy"),
                                 n_heads=heads)
        self.q1 = Mlp(MlpSpec(zdim + action_dim, cfg.critic_hidden, 1, seed=derive_seed(seed, "q1"),
                              n_heads=heads))
        self.q2 = Mlp(MlpSpec(zdim + action_dim, cfg.critic_hidden, 1, seed=derive_seed(seed, "q2"),
                              n_heads=heads))
        self.value = Mlp(MlpSpec(zdim, cfg.critic_hidden, 1, seed=derive_seed(seed, "value"),
                                 n_heads=heads))
        self.value_target = Mlp(self.value.spec)
        for src, dst in zip(self.value.params, self.value_target.params):
            dst.data = src.data.copy()
            dst.requires_grad = False
        self.log_alpha = [Tensor(np.array([math.log(cfg.init_temperature)]), requires_grad=True,
                                 name=f"log_alpha{i}") for i in range(n_tasks)]
        self.target_entropy = (-float(action_dim) if cfg.target_entropy is None
                               else float(cfg.target_entropy))
        self.groups = self._build_groups()
        self.optim = {name: AdamState.for_params(ps, lr=cfg.lr) for name, ps in self.groups.items()}
        for i in range(n_tasks):
            self.optim[f"temperature{i}"] = AdamState.for_params([self.log_alpha[i]], lr=cfg.temperature_lr)

    def _build_groups(self) -> dict[str, list[Tensor]]:
        rep = self.rep
        groups = {"policy": self.policy.params, "q1": self.q1.params, "q2": self.q2.params,
                  "value": self.value.params}
        ctx = rep.context_params
        if ctx:
            groups["context"] = ctx
        for j, enc in enumerate(rep.encoders):
            groups[f"encoder{j}"] = enc.params
        taken = {id(p) for ps in groups.values() for p in ps}
        rest = [p for p in rep.params if id(p) not in taken]
        if rest:
            groups["repr_other"] = rest
        return groups

    # -- registry ---------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = dict(self.rep.named_params())
        out.update(self.policy.net.named_params("policy"))
        out.update(self.q1.named_params("q1"))
        out.update(self.q2.named_params("q2"))
        out.update(self.value.named_params("value"))
        out.update(self.value_target.named_params("value_target"))
        for i, la in enumerate(self.log_alpha):
            out[f"log_alpha{i}"] = la
        return out

    def trainable(self) -> list[Tensor]:
        return [p for ps in self.groups.values() for p in ps] + self.log_alpha

    def zero_grad(self) -> None:
        for p in self.trainable():
            p.grad = None

    def alpha(self) -> np.ndarray:
        return np.exp(np.concatenate([la.data for la in self.log_alpha]))

    def _heads(self, task):
        return task if self.multi_head else None

    # -- acting -----------------------------------------------------------

    def act(self, obs: np.ndarray, task: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
        """Stochastic action with external noise, or the mean action if noise is None."""
        with no_grad():
            z_s = self.rep.forward(obs, task).z_s
            if noise is None:
                return policy_mean_action(self.policy, z_s, self._heads(task))
            a, _ = policy_sample(self.policy, z_s, noise, self._heads(task))
            return a.data


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossTerms:
    value: Tensor
    q: Tensor
    policy: Tensor
    log_prob: np.ndarray
    task: np.ndarray
    q_new: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _col(x: Tensor) -> Tensor:
    return T.reshape(x, (x.shape[0],))


def compute_losses(agent: SacAgent, batch: Batch, noise: np.ndarray) -> LossTerms:
    """Build J_V, J_Q and J_pi on the active graph from one set of forward passes."""
    if len(batch) == 0:
        raise EmptyBatchError("SAC losses need a non-empty batch")
    cfg = agent.cfg
    task = batch.task
    heads = agent._heads(task)
    rep_out = agent.rep.forward(batch.obs, task)
    z_pi = rep_out.z_s
    if agent.rep.cfg.context_loss == "policy":
        z_crit = agent.rep.forward(batch.obs, task, context_grad=False).z_s
    else:
        z_crit = z_pi

    with no_grad():
        z_next = agent.rep.forward(batch.next_obs, task).z_s
        v_next = agent.value_target(z_next, head_index=heads).data[:, 0]
    q_target = cfg.reward_scale * batch.reward + cfg.gamma * (1.0 - batch.done) * v_next

    a_new, log_prob = policy_sample(agent.policy, z_pi, noise, heads)
    alpha = agent.alpha()[task]
    # Critic weights are frozen for the policy objective and its state input is detached.
    z_pi_sg = T.stop_gradient(z_pi)
    q1_new = _col(agent.q1.frozen()(T.concat([z_pi_sg, a_new]), head_index=heads))
    q2_new = _col(agent.q2.frozen()(T.concat([z_pi_sg, a_new]), head_index=heads))
    min_q_new = T.minimum(q1_new, q2_new)
    v_target = min_q_new.data - alpha * log_prob.data

    v = _col(agent.value(z_crit, head_index=heads))
    j_v = T.mean(T.scale(T.square(T.sub(v, T.Tensor(v_target))), 0.5))

    sa = T.concat([z_crit, T.Tensor(batch.action)])
    q1 = _col(agent.q1(sa, head_index=heads))
    q2 = _col(agent.q2(sa, head_index=heads))
    tq = T.Tensor(q_target)
    j_q = T.add(T.mean(T.scale(T.square(T.sub(q1, tq)), 0.5)),
                T.mean(T.scale(T.square(T.sub(q2, tq)), 0.5)))

    j_pi = T.mean(T.sub(T.mul(T.Tensor(alpha), log_prob), min_q_new))
    return LossTerms(j_v, j_q, j_pi, log_prob.data.copy(), task, min_q_new.data.copy())


def value_loss(batch: Batch, agent: SacAgent, noise: np.ndarray) -> Tensor:
    return compute_losses(agent, batch, noise).value


def q_loss(batch: Batch, agent: SacAgent, noise: np.ndarray) -> Tensor:
    return compute_losses(agent, batch, noise).q


def policy_loss(batch: Batch, agent: SacAgent, noise: np.ndarray) -> Tensor:
    return compute_losses(agent, batch, noise).policy


def temperature_loss(agent: SacAgent, log_prob: np.ndarray, task: np.ndarray, i: int) -> Tensor | None:
    """Entropy-tuning objective for task ``i``; None if the batch has no task-i rows."""
    rows = task == i
    if not np.any(rows):
        return None
    alpha = T.exp(agent.log_alpha[i])
    gap = T.Tensor(np.asarray(log_prob[rows] + agent.target_entropy, dtype=np.float64))
    return T.mean(T.scale(T.mul(alpha, gap), -1.0))


def target_update(psi: Sequence[np.ndarray], psi_bar: Sequence[np.ndarray], tau: float) -> None:
    """In-place EMA: psi_bar <- tau * psi + (1 - tau) * psi_bar."""
    if len(psi) != len(psi_bar):
        raise ShapeError(f"target_update: {len(psi)} source arrays vs {len(psi_bar)} targets")
    for src, dst in zip(psi, psi_bar):
        if src.shape != dst.shape:
            raise ShapeError(f"target_update: incompatible shapes {src.shape} and {dst.shape}")
        dst[...] = tau * src + (1.0 - tau) * dst


def update_sac(buffer: ReplayBuffer, agent: SacAgent, prng: SeededPrng,
               batch_size: int | None = None) -> dict:
    """One gradient step for every component, then the target EMA."""
    cfg = agent.cfg
    n = batch_size if batch_size is not None else cfg.batch_per_task * agent.n_tasks
    if len(buffer) < n:
        raise InsufficientDataError(f"buffer holds {len(buffer)} transitions, batch needs {n}")
    batch = buffer.sample(prng, n)
    noise = prng.normal((n, agent.action_dim))

    agent.zero_grad()
    with Graph() as g:
        terms = compute_losses(agent, batch, noise)
        total = T.add(T.add(terms.value, terms.q), terms.policy)
        g.backward(total)
    for name, params in agent.groups.items():
        adam_step([p.data for p in params], [p.grad for p in params], agent.optim[name])

    skipped = []
    for i in range(agent.n_tasks):
        la = agent.log_alpha[i]
        la.grad = None
        with Graph() as g:
            loss = temperature_loss(agent, terms.log_prob, terms.task, i)
            if loss is None:
                skipped.append(i)
                continue
            g.backward(loss)
        adam_step([la.data], [la.grad], agent.optim[f"temperature{i}"])

    target_update([p.data for p in agent.value.params], [p.data for p in agent.value_target.params],
                  cfg.tau)
    return {
        "value_loss": float(terms.value.data),
        "q_loss": float(terms.q.data),
        "policy_loss": float(terms.policy.data),
        "entropy": float(-terms.log_prob.mean()),
        "alpha": [float(a) for a in agent.alpha()],
        "temperature_skipped": skipped,
    }

"""Outer multi-task loop: round-robin stepping, one update per iteration, eval, checkpoints."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import checkpoint as C
from . import env as E
from .config import ConfigError, ExperimentConfig, dumps
from .context import EmbeddingProvider
from .evalkit import evaluate, write_eval_jsonl
from .repr import Representation
from .rng import SeededPrng, derive_seed
from .sac import ReplayBuffer, SacAgent, update_sac

SNAPSHOT = "config.snapshot"
METRICS = "metrics.jsonl"
EVALS = "eval.jsonl"
CKPT_DIR = "checkpoints"


class RunDirError(RuntimeError):
    pass


def build_family(cfg: ExperimentConfig) -> E.Family:
    fam = cfg.family
    if fam.train:
        return E.make_family(fam.train, fam.held_out, fam.horizon)
    if fam.held_out:
        raise ConfigError("family.held_out", "explicit held-out pairs need an explicit train list")
    return E.make_preset(fam.preset, fam.horizon)


def build_provider(cfg: ExperimentConfig) -> EmbeddingProvider | None:
    if not cfg.variant.uses_metadata:
        return None
    emb = cfg.embedder
    if emb.mode == "file":
        if not emb.path:
            raise ConfigError("embedder.path", "file mode needs a path")
        return EmbeddingProvider.from_file(emb.path, emb.dim)
    if emb.mode != "hashed":
        raise ConfigError("embedder.mode", f"expected 'hashed' or 'file', got {emb.mode!r}")
    return EmbeddingProvider("hashed", emb.dim, emb.table_size, seed=emb.seed)


def eval_points(total: int, every: int) -> list[int]:
    """min(k * every, total) for k = 1..ceil(total / every)."""
    return [min(k * every, total) for k in range(1, math.ceil(total / every) + 1)]


def _encode_env(states: list[E.EnvState]) -> np.ndarray:
    return np.array([[*s.pos, *s.vel, s.joint, *s.goal, *s.anchor, s.step, float(s.done)]
                     for s in states], dtype=np.float64)


def _decode_env(arr: np.ndarray) -> list[E.EnvState]:
    return [E.EnvState((r[0], r[1]), (r[2], r[3]), float(r[4]), (r[5], r[6]), (r[7], r[8]),
                       int(r[9]), bool(r[10])) for r in arr.tolist()]


class Trainer:
    """Holds every piece of mutable run state; ``save``/``load`` round-trip all of it."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.family = build_family(cfg)
        self.tasks = list(self.family.train)
        n = len(self.tasks)
        self.provider = build_provider(cfg)
        self.rep = Representation(cfg.variant, self.family.all_tasks, n, E.OBS_DIM, self.provider,
                                  seed=derive_seed(seed, "representation"))
        self.agent = SacAgent(self.rep, E.ACTION_DIM, n, cfg.sac, seed=derive_seed(seed, "agent"))
        self.batch_size = cfg.sac.batch_per_task * n
        first_update = (cfg.sac.exploration_steps + 1) * n
        if min(first_update, cfg.run.buffer_capacity) < self.batch_size:
            raise ConfigError("sac.batch_per_task",
                              f"batch of {self.batch_size} exceeds the transitions available at the "
                              f"first update ({min(first_update, cfg.run.buffer_capacity)})")
        self.buffer = ReplayBuffer(cfg.run.buffer_capacity, E.OBS_DIM, E.ACTION_DIM)
        self.prng = SeededPrng(derive_seed(seed, "run"))
        self.step = 0
        self.updates = 0
        self.window_episodes = 0
        self.window_successes = 0
        self.last_update: dict | None = None
        self.states = []
        self.obs = []
        for t in self.tasks:
            s, o = E.reset(t, self._episode_seed())
            self.states.append(s)
            self.obs.append(o)

    def _episode_seed(self) -> int:
        return int(self.prng.next_u64(1)[0])

    @property
    def task_steps(self) -> np.ndarray:
        return np.full(len(self.tasks), self.step, dtype=np.int64)

    # -- one outer iteration ------------------------------------------------

    def iterate(self) -> dict | None:
        """Step every task once (task-index order), then update once if past exploration."""
        n = len(self.tasks)
        obs = np.stack(self.obs)
        if self.step < self.cfg.sac.exploration_steps:
            actions = self.prng.uniform_range(-1.0, 1.0, (n, E.ACTION_DIM))
        else:
            noise = self.prng.normal((n, E.ACTION_DIM))
            actions = self.agent.act(obs, np.arange(n), noise)
        for i, task in enumerate(self.tasks):
            state, next_obs, reward, done, success = E.step(task, self.states[i], actions[i])
            # a timeout is not terminal for bootstrapping; only success ends the MDP
            self.buffer.add(obs[i], actions[i], next_obs, reward, success, i)
            if done:
                self.window_episodes += 1
                self.window_successes += int(success)
                state, next_obs = E.reset(task, self._episode_seed())
            self.states[i] = state
            self.obs[i] = next_obs
        self.step += 1
        if self.step > self.cfg.sac.exploration_steps:
            self.last_update = update_sac(self.buffer, self.agent, self.prng, self.batch_size)
            self.updates += 1
            return self.last_update
        return None

    def metrics_record(self) -> dict:
        rec = {"step": self.step, "updates": self.updates, "episodes": self.window_episodes,
               "train_success": (self.window_successes / self.window_episodes
                                 if self.window_episodes else None)}
        if self.last_update is not None:
            rec.update(self.last_update)
        return rec

    def evaluate(self, tasks=None, eval_seed: int | None = None) -> list:
        run = self.cfg.run
        return evaluate(self.agent, self.tasks if tasks is None else tasks, run.eval_episodes,
                        run.eval_seed if eval_seed is None else eval_seed, step=self.step,
                        seed=self.seed)

    # -- checkpoints --------------------------------------------------------

    def _param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.agent.named_params().items()}

    def _optim_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for group, st in self.agent.optim.items():
            for j, (m, v) in enumerate(zip(st.m, st.v)):
                out[f"optim.{group}.m{j}"] = m
                out[f"optim.{group}.v{j}"] = v
        return out

    def save(self, path: str | Path, include_buffer: bool = True) -> None:
        """Write all run state; without the buffer the file serves evaluation only."""
        arrays = {**self._param_arrays(), **self._optim_arrays(),
                  "env.state": _encode_env(self.states), "env.obs": np.stack(self.obs)}
        ints = {"run.step": self.step, "run.updates": self.updates, "run.seed": self.seed,
                "prng.run": self.prng.state, "window.episodes": self.window_episodes,
                "window.successes": self.window_successes}
        if include_buffer:
            arrays.update(self.buffer.state_arrays())
            ints["buffer.size"] = self.buffer.size
            ints["buffer.cursor"] = self.buffer.cursor
        for group, st in self.agent.optim.items():
            ints[f"optim.{group}.t"] = st.t
        C.save_checkpoint(path, arrays, ints, dtype=self.cfg.run.checkpoint_dtype)

    def load(self, path: str | Path, require_buffer: bool = True) -> None:
        """Restore run state; ``require_buffer=False`` accepts evaluation-only checkpoints."""
        ck = C.load_checkpoint(path)
        targets = {**self._param_arrays(), **self._optim_arrays()}
        source = {k: v for k, v in ck.arrays.items()
                  if not k.startswith(("buffer.", "env."))}
        C.assign_arrays(targets, source, context=str(path))
        for group, st in self.agent.optim.items():
            st.t = ck.ints[f"optim.{group}.t"]
        buf = {k: v for k, v in ck.arrays.items() if k.startswith("buffer.")}
        if "buffer.size" not in ck.ints:
            if require_buffer:
                raise C.CheckpointShapeError(f"{path}: holds no replay buffer, so training cannot resume from it")
            self.buffer = ReplayBuffer(self.cfg.run.buffer_capacity, E.OBS_DIM, E.ACTION_DIM)
        else:
            try:
                self.buffer.load_state(buf, ck.ints["buffer.size"], ck.ints["buffer.cursor"])
            except (KeyError, ValueError) as exc:
                raise C.CheckpointShapeError(f"{path}: replay buffer does not fit: {exc}") from None
        env_state = ck.arrays["env.state"]
        if env_state.shape != (len(self.tasks), 11):
            raise C.CheckpointShapeError(f"{path}: env.state has shape {env_state.shape}, "
                                         f"expected {(len(self.tasks), 11)}")
        self.states = _decode_env(env_state)
        self.obs = [row.copy() for row in ck.arrays["env.obs"]]
        self.step = ck.ints["run.step"]
        self.updates = ck.ints["run.updates"]
        self.prng.state = ck.ints["prng.run"]
        self.window_episodes = ck.ints["window.episodes"]
        self.window_successes = ck.ints["window.successes"]
        self.last_update = None


# ---------------------------------------------------------------------------
# run directory driver


def prepare_run_dir(out: str | Path) -> Path:
    """Create ``out``; refuse to reuse a directory that already holds a run."""
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / CKPT_DIR).mkdir(exist_ok=True)
        probe = path / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise RunDirError(f"output directory {path} is not writable: {exc}") from None
    for name in (METRICS, EVALS):
        if (path / name).exists():
            raise RunDirError(f"{path / name} already exists; refusing to overwrite a previous run")
    return path


def checkpoint_path(run_dir: str | Path, step: int) -> Path:
    return Path(run_dir) / CKPT_DIR / f"step_{step}.ckpt"


def train(cfg: ExperimentConfig, seed: int | None = None, out_dir: str | Path | None = None,
          progress=None) -> Path:
    """Run one seed to completion and return its run directory."""
    seed = cfg.run.seeds[0] if seed is None else seed
    cfg = cfg.with_seed(seed)
    run_dir = prepare_run_dir(out_dir if out_dir is not None else cfg.run.out_dir)
    cfg = cfg.with_out_dir(str(run_dir))
    (run_dir / SNAPSHOT).write_text(dumps(cfg), encoding="utf-8")
    trainer = Trainer(cfg, seed)
    metrics_path, eval_path = run_dir / METRICS, run_dir / EVALS
    metrics_path.touch()
    eval_path.touch()
    keep = cfg.run.checkpoint_buffer
    trainer.save(checkpoint_path(run_dir, 0), include_buffer=keep != "none")
    points = set(eval_points(cfg.run.steps, cfg.run.eval_every))
    with open(metrics_path, "a", encoding="utf-8") as mf:
        while trainer.step < cfg.run.steps:
            trainer.iterate()
            if trainer.step % cfg.run.log_every == 0 or trainer.step == cfg.run.steps:
                mf.write(json.dumps(trainer.metrics_record()) + "\n")
                mf.flush()
                trainer.window_episodes = trainer.window_successes = 0
            if trainer.step in points:
                records = trainer.evaluate()
                write_eval_jsonl(eval_path, records, append=True)
                final = trainer.step == cfg.run.steps
                trainer.save(checkpoint_path(run_dir, trainer.step),
                             include_buffer=keep == "all" or (keep == "final" and final))
                if progress is not None:
                    progress(trainer.step, records)
    return run_dir


def latest_checkpoint(run_dir: str | Path) -> Path:
    ckpts = sorted(Path(run_dir, CKPT_DIR).glob("step_*.ckpt"), key=lambda p: int(p.stem[5:]))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints under {Path(run_dir, CKPT_DIR)}")
    return ckpts[-1]

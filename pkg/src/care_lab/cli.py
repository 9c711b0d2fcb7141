"""``care-lab`` command line: train, eval, analyze."""
from __future__ import annotations

import argparse
import multiprocessing
import os
import sys
from pathlib import Path

from . import config as Cfg
from . import evalkit as EK
from . import trainer as TR
from .checkpoint import CheckpointError


EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("CARE_LAB_THREADS")
    if not raw:
        return 0
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CARE_LAB_THREADS must be an integer, got {raw!r}") from None
    return max(n, 0)


def _train_one(args: tuple[str, int, str]) -> str:
    text, seed, out = args
    return str(TR.train(Cfg.loads(text), seed, out))


# ---------------------------------------------------------------------------
# train


def cmd_train(ns) -> int:
    path = Path(ns.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cfg = Cfg.load(path)
    seeds = [ns.seed] if ns.seed is not None else list(cfg.run.seeds)
    base = Path(ns.out if ns.out is not None else cfg.run.out_dir)
    jobs = [(Cfg.dumps(cfg), s, str(base / f"seed_{s}")) for s in seeds]
    for _, _, out in jobs:
        TR.prepare_run_dir(out)
    workers = _threads()
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.get_context("spawn").Pool(min(workers, len(jobs))) as pool:
            dirs = pool.map(_train_one, jobs)
    else:
        dirs = [_train_one(j) for j in jobs]
    for d in dirs:
        print(d)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _fresh_path(path: Path) -> Path:
    if not path.exists():
        return path
    k = 1
    while True:
        cand = path.with_name(f"{path.stem}.{k}{path.suffix}")
        if not cand.exists():
            return cand
        k += 1


def load_trainer(run_dir: str | Path, checkpoint: str | None = None) -> tuple[TR.Trainer, Path]:
    run = Path(run_dir)
    snap = run / TR.SNAPSHOT
    if not snap.is_file():
        raise UsageError(f"{run} has no {TR.SNAPSHOT}")
    cfg = Cfg.load(snap)
    if checkpoint is None:
        try:
            ckpt = TR.latest_checkpoint(run)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from None
    else:
        ckpt = Path(checkpoint)
        if not ckpt.is_absolute() and not ckpt.exists():
            ckpt = run / TR.CKPT_DIR / checkpoint
        if not ckpt.exists() and ckpt.suffix != ".ckpt":
            ckpt = ckpt.with_name(ckpt.name + ".ckpt")
        if not ckpt.is_file():
            raise UsageError(f"checkpoint not found: {checkpoint}")
    trainer = TR.Trainer(cfg, cfg.run.seeds[0])
    trainer.load(ckpt, require_buffer=False)
    return trainer, ckpt


def cmd_eval(ns) -> int:
    trainer, ckpt = load_trainer(ns.run, ns.checkpoint)
    cfg = trainer.cfg
    eval_seed = cfg.run.eval_seed if ns.eval_seed is None else ns.eval_seed
    episodes = cfg.run.eval_episodes if ns.episodes is None else ns.episodes
    if ns.held_out:
        if not trainer.family.held_out:
            raise UsageError("this family has no held-out tasks")
        try:
            records = EK.zero_shot_eval(trainer.agent, trainer.family, None, episodes, eval_seed,
                                        step=trainer.step, seed=trainer.seed,
                                        fallback=cfg.run.zero_shot_fallback)
        except EK.ZeroShotError as exc:
            raise UsageError(str(exc)) from None
        tag = "held-out"
    else:
        records = EK.evaluate(trainer.agent, trainer.tasks, episodes, eval_seed, step=trainer.step,
                              seed=trainer.seed)
        tag = "train"
    out = Path(ns.output) if ns.output else Path(ns.run) / f"eval_{ckpt.stem}_{tag}.jsonl"
    out = _fresh_path(out)
    EK.write_eval_jsonl(out, records)
    for r in records:
        print(f"{r.task}\t{r.success:.2f}")
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def seed_dirs(path: str | Path) -> list[Path]:
    """A run directory, or a directory of ``seed_*`` run directories."""
    p = Path(path)
    if (p / TR.EVALS).is_file():
        return [p]
    subs = sorted((d for d in p.glob("seed_*") if (d / TR.EVALS).is_file()),
                  key=lambda d: int(d.name[5:]) if d.name[5:].isdigit() else d.name)
    if not subs:
        raise UsageError(f"{p} holds no {TR.EVALS}")
    return subs


def load_series(path: str | Path, file_name: str = TR.EVALS) -> list[EK.EvalTimeSeries]:
    out = []
    for d in seed_dirs(path):
        records = EK.read_eval_jsonl(d / file_name)
        if not records:
            raise UsageError(f"{d / file_name} is empty")
        out.append(EK.series_from_records(records))
    return out


def _similarity(run: str, out: str | None) -> Path:
    trainer, _ = load_trainer(run, None)
    table = trainer.rep.context_table()
    if table is None:
        raise UsageError(f"variant {trainer.cfg.variant.name!r} has no context representation")
    names = [t.name for t in trainer.rep.tasks][: table.shape[0]]
    mat = EK.similarity_matrix(table.data)
    path = _fresh_path(Path(out) if out else Path(run) / "similarity.csv")
    EK.write_similarity_csv(path, names, mat)
    return path


def cmd_analyze(ns) -> int:
    if ns.similarity:
        print(_similarity(ns.similarity, ns.output))
        return EXIT_OK
    if ns.compare:
        a, b = ns.compare
        try:
            ra, rb, w = EK.compare(load_series(a), load_series(b), ns.p_threshold)
        except (EK.GridMismatchError, ValueError) as exc:
            raise UsageError(f"cannot compare {a} and {b}: {exc}") from None
        mark = "*" if w.significant else ""
        print(f"{a}\t{ra.format()}{mark}")
        print(f"{b}\t{rb.format()}")
        print(f"welch t={w.t:.4f} df={w.df:.3f} p={w.p:.6f}{' *' if w.significant else ''}")
        return EXIT_OK
    if ns.runs:
        for r in ns.runs:
            try:
                res = EK.aggregate(load_series(r))
            except EK.GridMismatchError as exc:
                raise UsageError(f"{r}: {exc}") from None
            print(f"{r}\t{res.format()}\tbest step {res.best_step}")
        return EXIT_OK
    raise UsageError("analyze needs --runs, --compare or --similarity")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="care-lab", description="Multi-task SAC with context-attended encoders.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run per seed")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--run", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--held-out", action="store_true")
    e.add_argument("--eval-seed", type=int)
    e.add_argument("--episodes", type=int)
    e.add_argument("--output")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="aggregate, compare, or similarity matrix")
    a.add_argument("--runs", nargs="+")
    a.add_argument("--compare", nargs=2, metavar=("A", "B"))
    a.add_argument("--similarity", metavar="RUN")
    a.add_argument("--output")
    a.add_argument("--p-threshold", type=float, default=0.05)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return ns.func(ns)
    except (UsageError, Cfg.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if ns.command == "eval" else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

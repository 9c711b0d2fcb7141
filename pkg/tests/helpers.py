"""Shared fixtures: gradient-check catalog and tiny experiment configs."""
from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from care_lab import env as E
from care_lab import tensor as T
from care_lab.config import ExperimentConfig, FamilyConfig, RunConfig
from care_lab.nets import Mlp, MlpSpec, PolicyHead, policy_sample
from care_lab.context import EmbeddingProvider
from care_lab.repr import Representation, VariantConfig
from care_lab.sac import Batch, SacAgent, TrainConfig

GRAD_SEEDS = range(10)


def leaf(rng: np.random.Generator, *shape, low=-1.0, high=1.0) -> T.Tensor:
    return T.Tensor(rng.uniform(low, high, shape), requires_grad=True)


def primitive_cases() -> dict[str, Callable]:
    """name -> factory(rng) returning (build_loss, leaves).

    Each loss is a random linear functional of the primitive's output, so every
    Jacobian entry contributes.
    """
    cases: dict[str, Callable] = {}

    def unary(name, op, low=-1.0, high=1.0, shape=(3, 4)):
        def make(rng):
            x = leaf(rng, *shape, low=low, high=high)
            w = T.Tensor(rng.normal(size=op(x).shape))
            return (lambda: T.sum(T.mul(op(x), w))), [x]
        cases[name] = make

    def binary(name, op, shape_a=(3, 4), shape_b=(3, 4), low_b=-1.0, high_b=1.0):
        def make(rng):
            a = leaf(rng, *shape_a)
            b = leaf(rng, *shape_b, low=low_b, high=high_b)
            probe = op(a, b)
            w = T.Tensor(rng.normal(size=probe.shape))
            return (lambda: T.sum(T.mul(op(a, b), w))), [a, b]
        cases[name] = make

    binary("add", T.add)
    binary("add_broadcast", T.add, shape_b=(4,))
    binary("sub", T.sub, shape_b=(4,))
    binary("mul", T.mul)
    binary("mul_broadcast", T.mul, shape_b=(3, 1))
    binary("div", T.div, low_b=0.5, high_b=2.0)
    binary("matmul", T.matmul, shape_a=(3, 4), shape_b=(4, 2))
    binary("dot", T.dot, shape_a=(5,), shape_b=(5,))
    unary("scale", lambda x: T.scale(x, -2.5))
    # keep inputs away from the kink so central differences are valid
    unary("relu", T.relu, low=0.05, high=1.0)
    unary("relu_negative", lambda x: T.relu(T.scale(x, -1.0)), low=0.05, high=1.0)
    unary("tanh", T.tanh, low=-2.0, high=2.0)
    unary("exp", T.exp, low=-2.0, high=2.0)
    unary("log", T.log, low=0.2, high=3.0)
    unary("square", T.square)
    unary("sum_axis0", lambda x: T.sum(x, axis=0))
    unary("sum_keepdims", lambda x: T.sum(x, axis=-1, keepdims=True))
    unary("mean", lambda x: T.mean(x, axis=-1))
    unary("softmax", lambda x: T.softmax(x, axis=-1), low=-3.0, high=3.0)
    unary("clip_interior", lambda x: T.clip(x, -2.0, 2.0))
    unary("clip_saturated", lambda x: T.clip(T.scale(x, 3.0), -1.0, 1.0), low=0.5, high=1.0)
    unary("slice_last", lambda x: T.slice_last(x, 1, 3))
    unary("reshape", lambda x: T.reshape(x, (4, 3)))
    unary("take_repeated", lambda x: T.take(x, np.array([2, 0, 2, 1])))

    def make_concat(rng):
        a, b = leaf(rng, 3, 2), leaf(rng, 3, 5)
        w = T.Tensor(rng.normal(size=(3, 7)))
        return (lambda: T.sum(T.mul(T.concat([a, b]), w))), [a, b]
    cases["concat"] = make_concat

    def make_stack(rng):
        a, b = leaf(rng, 3, 2), leaf(rng, 3, 2)
        w = T.Tensor(rng.normal(size=(3, 2, 2)))
        return (lambda: T.sum(T.mul(T.stack([a, b], axis=1), w))), [a, b]
    cases["stack"] = make_stack

    def make_minimum(rng):
        a = leaf(rng, 3, 4)
        # separate the operands so no pair sits within h of a tie
        offset = np.where(rng.uniform(size=(3, 4)) < 0.5, -0.5, 0.5)
        b = T.Tensor(a.data + offset, requires_grad=True)
        w = T.Tensor(rng.normal(size=(3, 4)))
        return (lambda: T.sum(T.mul(T.minimum(a, b), w))), [a, b]
    cases["minimum"] = make_minimum

    def make_gauss(rng):
        mu, ls = leaf(rng, 4, 3), leaf(rng, 4, 3, low=-1.5, high=0.5)
        noise = rng.normal(size=(4, 3))
        w = T.Tensor(rng.normal(size=(4, 3)))
        return (lambda: T.sum(T.mul(T.gaussian_sample(mu, ls, noise), w))), [mu, ls]
    cases["gaussian_sample"] = make_gauss

    def make_linear(apply_relu):
        def make(rng):
            x, w, b = leaf(rng, 5, 4), leaf(rng, 4, 3), leaf(rng, 3, low=0.2, high=0.6)
            p = T.Tensor(rng.normal(size=(5, 3)))
            return (lambda: T.sum(T.mul(T.linear(x, w, b, apply_relu=apply_relu), p))), [x, w, b]
        return make
    cases["linear"] = make_linear(False)
    cases["linear_relu"] = make_linear(True)

    def make_reuse(rng):
        x = leaf(rng, 4)
        return (lambda: T.sum(T.mul(T.tanh(x), T.square(x)))), [x]
    cases["reused_leaf"] = make_reuse
    return cases


def mlp_case(rng_seed: int):
    rng = np.random.default_rng(rng_seed)
    net = Mlp(MlpSpec(4, (6, 5), 3, seed=rng_seed))
    x = T.Tensor(rng.normal(size=(7, 4)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(7, 3)))
    return (lambda: T.sum(T.mul(net(x), w))), [x, *net.params]


def log_prob_case(rng_seed: int):
    rng = np.random.default_rng(rng_seed)
    head = PolicyHead(4, 2, (6,), seed=rng_seed)
    z = T.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    noise = rng.normal(size=(5, 2))
    return (lambda: T.sum(policy_sample(head, z, noise)[1])), [z, *head.params]


def tiny_config(variant: str = "care", steps: int = 40, **kw) -> ExperimentConfig:
    """A configuration small enough to train inside a unit test."""
    vkw = {k[2:]: v for k, v in kw.items() if k.startswith("v_")}
    skw = {k[2:]: v for k, v in kw.items() if k.startswith("s_")}
    rkw = {k[2:]: v for k, v in kw.items() if k.startswith("r_")}
    fkw = {k[2:]: v for k, v in kw.items() if k.startswith("f_")}
    vcfg = dict(name=variant, k=kw.get("k", 3), encoder_hidden=(8,))
    if variant == "care_topk":
        vcfg["k_active"] = 2
    vcfg.update(vkw)
    scfg = dict(actor_hidden=(8,), critic_hidden=(8,), batch_per_task=4, exploration_steps=5)
    scfg.update(skw)
    rcfg = dict(steps=steps, eval_every=20, eval_episodes=2, log_every=10, buffer_capacity=500)
    rcfg.update(rkw)
    fcfg = dict(preset="mt3", horizon=15)
    fcfg.update(fkw)
    return ExperimentConfig(family=FamilyConfig(**fcfg), variant=VariantConfig(**vcfg),
                            sac=TrainConfig(**scfg), run=RunConfig(**rcfg))


def replace(cfg, section: str, **changes):
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **changes)})


SAC_FAMILY = E.make_preset("mt3")


def make_agent(seed=0, variant="care", encoder_dim=50, **cfg_kw) -> SacAgent:
    n = len(SAC_FAMILY.train)
    vcfg = VariantConfig(name=variant, k=2, encoder_hidden=(6,), encoder_dim=encoder_dim,
                         **({"k_active": 1} if variant == "care_topk" else {}))
    rep = Representation(vcfg, SAC_FAMILY.all_tasks, n, E.OBS_DIM, EmbeddingProvider(dim=8), seed=seed)
    cfg = TrainConfig(actor_hidden=(7,), critic_hidden=(7,), batch_per_task=2, **cfg_kw)
    return SacAgent(rep, E.ACTION_DIM, n, cfg, seed=seed)


def random_batch(rng, n=6) -> Batch:
    return Batch(obs=rng.normal(size=(n, E.OBS_DIM)), action=rng.uniform(-0.9, 0.9, (n, E.ACTION_DIM)),
                 next_obs=rng.normal(size=(n, E.OBS_DIM)), reward=rng.normal(size=n),
                 done=(rng.uniform(size=n) < 0.3).astype(float),
                 task=rng.integers(0, len(SAC_FAMILY.train), n))


def sac_setup(seed, **kw):
    rng = np.random.default_rng(seed)
    agent = make_agent(seed, **kw)
    return agent, random_batch(rng), rng.normal(size=(6, E.ACTION_DIM))

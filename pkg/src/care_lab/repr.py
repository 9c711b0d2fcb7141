"""State representations: context-attended mixture of encoders and baselines.

All variants map a batch of observations plus task indices to the state
encoding ``z_s`` consumed by every SAC network.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .context import CONTEXT_DIM, ContextEncoder, EmbeddingProvider
from .nets import Mlp, MlpSpec
from .rng import SeededPrng, derive_seed
from .tensor import ShapeError, Tensor

VARIANTS = ("care", "care_topk", "manual", "single", "no_metadata", "task_id", "film", "mtsac")


class VariantError(ValueError):
    pass


@dataclass
class VariantConfig:
    name: str = "care"
    k: int = 4
    k_active: int | None = None
    mask: dict[str, list[int]] = field(default_factory=dict)
    multi_head: bool = False
    encoder_hidden: tuple[int, ...] = (400, 400, 400)
    encoder_dim: int = CONTEXT_DIM
    context_loss: str = "all"  # "all": J_V + J_Q + J_pi; "policy": J_pi only

    def __post_init__(self):
        self.encoder_hidden = tuple(self.encoder_hidden)
        if self.name not in VARIANTS:
            raise VariantError(f"unknown variant {self.name!r}; known: {', '.join(VARIANTS)}")
        if self.k < 1:
            raise VariantError("k must be >= 1")
        if self.name == "care_topk":
            if self.k_active is None or not 1 <= self.k_active <= self.k:
                raise VariantError(f"care_topk needs 1 <= k_active <= k, got {self.k_active}")
        if self.name == "manual":
            if not self.mask:
                raise VariantError("manual variant needs a mask table")
            for task, row in self.mask.items():
                if not row:
                    raise VariantError(f"mask row for {task!r} activates no encoder")
                if any(not 0 <= j < self.k for j in row):
                    raise VariantError(f"mask row for {task!r} has encoder index outside [0, {self.k})")
        if self.name in ("care", "care_topk") and self.encoder_dim != CONTEXT_DIM:
            raise VariantError(f"attention needs encoder_dim == {CONTEXT_DIM}, got {self.encoder_dim}")
        if self.context_loss not in ("all", "policy"):
            raise VariantError(f"context_loss must be 'all' or 'policy', got {self.context_loss!r}")

    @property
    def uses_metadata(self) -> bool:
        return self.name in ("care", "care_topk", "manual", "single", "film")


@dataclass
class FusionOutput:
    z_s: Tensor
    z_encs: list[Tensor] = field(default_factory=list)
    alpha: Tensor | None = None
    z_enc: Tensor | None = None
    z_context: Tensor | None = None


# ---------------------------------------------------------------------------
# building blocks


def encode_all(encoders: Sequence[Mlp], s: Tensor) -> list[Tensor]:
    """One independent forward pass per encoder."""
    return [enc(s) for enc in encoders]


def _as_batch(x: Tensor) -> Tensor:
    return T.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def attention_logits(z_encs: Sequence[Tensor], z_context: Tensor) -> Tensor:
    zs = [_as_batch(z) for z in z_encs]
    zc = _as_batch(z_context)
    for z in zs:
        if z.shape != zc.shape:
            raise ShapeError(f"attend: incompatible shapes {z.shape} and {zc.shape}")
    zc_bar = T.stop_gradient(zc)
    b, d = zc.shape
    stacked = T.stack(zs, axis=1)  # (B, k, d)
    return T.sum(T.mul(stacked, T.reshape(zc_bar, (b, 1, d))), axis=-1)


def attend(z_encs: Sequence[Tensor], z_context: Tensor) -> Tensor:
    """Soft attention over encoders, keyed by the detached context: (B, k)."""
    return T.softmax(attention_logits(z_encs, z_context), axis=-1)


def topk_mask(alpha: np.ndarray, k_active: int) -> np.ndarray:
    """Indicator of the ``k_active`` largest weights per row; ties go to the lower index."""
    alpha = np.atleast_2d(alpha)
    order = np.argsort(-alpha, axis=-1, kind="stable")[:, :k_active]
    mask = np.zeros_like(alpha)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def renormalize_topk(alpha: Tensor, k_active: int) -> Tensor:
    m = alpha.shape[-1]
    if not 1 <= k_active <= m:
        raise ValueError(f"k_active must be in [1, {m}], got {k_active}")
    if k_active == m:
        return alpha
    kept = T.mul(alpha, T.Tensor(topk_mask(alpha.data, k_active)))
    return T.div(kept, T.sum(kept, axis=-1, keepdims=True))


def attend_topk(z_encs: Sequence[Tensor], z_context: Tensor, m: int, k_active: int) -> Tensor:
    if len(z_encs) != m:
        raise ValueError(f"attend_topk: expected {m} encodings, got {len(z_encs)}")
    return renormalize_topk(attend(z_encs, z_context), k_active)


def manual_attention(task_index, mask_table: Sequence[Sequence[int]] | Mapping[int, Sequence[int]],
                     k: int) -> np.ndarray:
    """Uniform weights over each task's assigned encoders: (B, k) constant."""
    idx = np.atleast_1d(np.asarray(task_index, dtype=np.int64))
    out = np.zeros((idx.size, k))
    for r, i in enumerate(idx):
        try:
            row = mask_table[int(i)]
        except (IndexError, KeyError):
            raise KeyError(f"manual mapping has no row for task index {int(i)}") from None
        out[r, list(row)] = 1.0 / len(row)
    return out


class PostMlp:
    """Single ReLU layer applied to the fused encoding."""

    def __init__(self, dim: int, seed: int):
        self.net = Mlp(MlpSpec(dim, (), dim, seed=seed))

    @property
    def params(self) -> list[Tensor]:
        return self.net.params

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.net(x))


def fuse(z_encs: Sequence[Tensor], alpha, post: PostMlp) -> Tensor:
    """post(sum_j alpha_j * z_enc^j); alpha is (B, k) or (k,)."""
    zs = [_as_batch(z) for z in z_encs]
    a = alpha if isinstance(alpha, Tensor) else T.Tensor(alpha)
    a = _as_batch(a)
    if a.shape[-1] != len(zs):
        raise ShapeError(f"fuse: {len(zs)} encodings but alpha shape {a.shape}")
    b, d = zs[0].shape
    stacked = T.stack(zs, axis=1)
    pooled = T.sum(T.mul(stacked, T.reshape(a, (b, len(zs), 1))), axis=1)
    return post(pooled)


def compose_state(z_enc: Tensor, z_context: Tensor) -> Tensor:
    return T.concat([z_context, z_enc], axis=-1)


# ---------------------------------------------------------------------------
# the representation module


class Representation:
    """Trainable state encoder for one experiment variant.

    ``tasks`` lists every task the agent may see, training tasks first; only
    the first ``n_train`` get task-index parameters (embeddings, heads).
    """

    def __init__(self, cfg: VariantConfig, tasks: Sequence, n_train: int, obs_dim: int,
                 provider: EmbeddingProvider | None = None, seed: int = 0):
        self.cfg = cfg
        self.tasks = list(tasks)
        self.n_train = n_train
        self.obs_dim = obs_dim
        self.provider = provider
        d = cfg.encoder_dim
        name = cfg.name
        n_enc = cfg.k if name in ("care", "care_topk", "manual", "no_metadata") else 1
        self.encoders = [
            Mlp(MlpSpec(obs_dim, cfg.encoder_hidden, d, seed=derive_seed(seed, "encoder", j)))
            for j in range(n_enc)
        ]
        self.post = PostMlp(d, derive_seed(seed, "post")) if name != "film" and name != "mtsac" else None
        self.context_encoder = None
        self.task_embedding: Tensor | None = None
        self.task_encoder: Mlp | None = None
        self.film: list[tuple[Tensor, Tensor, Tensor, Tensor]] = []
        self._embeddings: np.ndarray | None = None
        self._mask_rows: list[list[int]] | None = None

        if cfg.uses_metadata:
            if provider is None:
                raise VariantError(f"variant {name!r} needs an embedding provider")
            self._embeddings = np.stack([provider.embed_task(t).data for t in self.tasks])
            self.context_encoder = ContextEncoder(provider.dim, CONTEXT_DIM, CONTEXT_DIM,
                                                  seed=derive_seed(seed, "context"))
        if name in ("no_metadata", "task_id"):
            prng = SeededPrng(derive_seed(seed, "task_embedding"))
            bound = 1.0 / np.sqrt(CONTEXT_DIM)
            self.task_embedding = Tensor(prng.uniform_range(-bound, bound, (n_train, CONTEXT_DIM)),
                                         requires_grad=True, name="task_embedding")
        if name == "task_id":
            self.task_encoder = Mlp(MlpSpec(CONTEXT_DIM, (CONTEXT_DIM,), CONTEXT_DIM,
                                            seed=derive_seed(seed, "task_encoder")))
        if name == "film":
            for width in cfg.encoder_hidden:
                self.film.append((
                    Tensor(np.zeros((CONTEXT_DIM, width)), requires_grad=True, name="gamma_w"),
                    Tensor(np.ones(width), requires_grad=True, name="gamma_b"),
                    Tensor(np.zeros((CONTEXT_DIM, width)), requires_grad=True, name="beta_w"),
                    Tensor(np.zeros(width), requires_grad=True, name="beta_b"),
                ))
        if name == "manual":
            rows = []
            for t in self.tasks:
                if t.name not in cfg.mask:
                    rows.append(None)
                else:
                    rows.append(list(cfg.mask[t.name]))
            self._mask_rows = rows

    # -- parameters -------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for j, enc in enumerate(self.encoders):
            out.update(enc.named_params(f"repr.encoder{j}"))
        if self.post is not None:
            out.update(self.post.net.named_params("repr.post"))
        if self.context_encoder is not None:
            out.update(self.context_encoder.net.named_params("repr.context"))
        if self.task_embedding is not None:
            out["repr.task_embedding"] = self.task_embedding
        if self.task_encoder is not None:
            out.update(self.task_encoder.named_params("repr.task_encoder"))
        for i, group in enumerate(self.film):
            for p in group:
                out[f"repr.film{i}.{p.name}"] = p
        return out

    @property
    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    @property
    def context_params(self) -> list[Tensor]:
        """Parameters that produce z_context (omega)."""
        if self.context_encoder is not None:
            return self.context_encoder.params
        out = [self.task_embedding] if self.task_embedding is not None else []
        if self.task_encoder is not None:
            out += self.task_encoder.params
        return out

    @property
    def state_dim(self) -> int:
        d = self.cfg.encoder_dim
        if self.cfg.name == "film":
            return d
        if self.cfg.name == "mtsac":
            return d + self.n_train
        return d + CONTEXT_DIM

    # -- context ----------------------------------------------------------

    def context_table(self) -> Tensor | None:
        """z_context for every known task, shape (n_tasks, 50)."""
        if self.context_encoder is not None:
            return self.context_encoder(T.Tensor(self._embeddings))
        if self.cfg.name == "no_metadata":
            return self.task_embedding
        if self.cfg.name == "task_id":
            return self.task_encoder(self.task_embedding)
        return None

    def _check_indices(self, idx: np.ndarray) -> None:
        limit = len(self.tasks) if self.cfg.uses_metadata else self.n_train
        if idx.size and (idx.min() < 0 or idx.max() >= limit):
            bad = int(idx.max()) if idx.max() >= limit else int(idx.min())
            raise IndexError(
                f"variant {self.cfg.name!r} has no context for task index {bad} "
                f"(it knows {limit} tasks)")

    # -- forward ----------------------------------------------------------

    def forward(self, obs, task_index, context_grad: bool = True,
                alpha_override: np.ndarray | None = None) -> FusionOutput:
        s = obs if isinstance(obs, Tensor) else T.Tensor(obs)
        if s.ndim == 1:
            s = T.reshape(s, (1, s.shape[0]))
        if s.shape[-1] != self.obs_dim:
            raise ShapeError(f"representation: observation shape {s.shape} does not match dim {self.obs_dim}")
        idx = np.atleast_1d(np.asarray(task_index, dtype=np.int64))
        if idx.shape[0] != s.shape[0]:
            raise ShapeError(f"representation: {idx.shape[0]} task indices for batch {s.shape}")
        self._check_indices(idx)
        name = self.cfg.name

        zc = None
        table = self.context_table()
        if table is not None:
            zc = T.take(table, idx)
            if not context_grad:
                zc = T.stop_gradient(zc)

        if name == "mtsac":
            z_enc = self.encoders[0](s)
            onehot = np.zeros((idx.size, self.n_train))
            onehot[np.arange(idx.size), idx] = 1.0
            return FusionOutput(T.concat([z_enc, T.Tensor(onehot)], axis=-1), [z_enc], None, z_enc, None)

        if name == "film":
            mods = [(T.add(T.matmul(zc, gw), gb), T.add(T.matmul(zc, bw), bb))
                    for gw, gb, bw, bb in self.film]

            def modulate(layer: int, h: Tensor) -> Tensor:
                gamma, beta = mods[layer]
                return T.add(T.mul(gamma, h), beta)

            z_enc = self.encoders[0](s, modulate=modulate)
            return FusionOutput(z_enc, [z_enc], None, z_enc, zc)

        if name in ("single", "task_id"):
            z1 = self.encoders[0](s)
            z_enc = self.post(z1)
            return FusionOutput(compose_state(z_enc, zc), [z1], None, z_enc, zc)

        z_encs = encode_all(self.encoders, s)
        if alpha_override is not None:
            alpha = T.Tensor(np.broadcast_to(alpha_override, (idx.size, len(z_encs))))
        elif name == "manual":
            alpha = T.Tensor(manual_attention(idx, self._mask_table(idx), len(z_encs)))
        elif name == "care_topk":
            alpha = attend_topk(z_encs, zc, len(z_encs), self.cfg.k_active)
        else:
            alpha = attend(z_encs, zc)
        z_enc = fuse(z_encs, alpha, self.post)
        return FusionOutput(compose_state(z_enc, zc), z_encs, alpha, z_enc, zc)

    def _mask_table(self, idx: np.ndarray) -> dict[int, list[int]]:
        table = {}
        for i in np.unique(idx):
            row = self._mask_rows[int(i)]
            if row is None:
                raise KeyError(f"manual mapping has no row for task {self.tasks[int(i)].name!r}")
            table[int(i)] = row
        return table

    def __call__(self, obs, task_index, **kw) -> FusionOutput:
        return self.forward(obs, task_index, **kw)


def variant_forward(rep: Representation, s, task_index) -> Tensor:
    return rep.forward(s, task_index).z_s

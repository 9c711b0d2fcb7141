"""Task-metadata embeddings (frozen) and the trainable context encoder."""
from __future__ import annotations

import json
import math
import re
import warnings
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .nets import Mlp, MlpSpec
from .rng import SeededPrng, derive_seed, fnv1a64
from .tensor import ShapeError, Tensor

EMBED_DIM = 768
TABLE_SIZE = 65536
CONTEXT_DIM = 50
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class EmbeddingError(ValueError):
    pass


class DegenerateVectorWarning(UserWarning):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class EmbeddingProvider:
    """Deterministic, frozen text -> vector map.

    ``hashed`` averages per-token Gaussian vectors keyed by an FNV-1a bucket;
    ``file`` looks vectors up by task name from an exported JSONL table.
    """

    __slots__ = ("_mode", "_dim", "_table_size", "_seed", "_table", "_cache")

    def __init__(self, mode: str = "hashed", dim: int = EMBED_DIM, table_size: int = TABLE_SIZE,
                 seed: int = 42, table: Mapping[str, np.ndarray] | None = None):
        if mode not in ("hashed", "file"):
            raise EmbeddingError(f"unknown embedder mode {mode!r}")
        if mode == "file" and table is None:
            raise EmbeddingError("file mode needs a vector table")
        object.__setattr__(self, "_mode", mode)
        object.__setattr__(self, "_dim", int(dim))
        object.__setattr__(self, "_table_size", int(table_size))
        object.__setattr__(self, "_seed", int(seed))
        frozen_table = None
        if table is not None:
            frozen_table = {}
            for name, vec in table.items():
                vec = _frozen(vec)
                if vec.shape != (dim,):
                    raise EmbeddingError(f"vector for {name!r} has shape {vec.shape}, expected ({dim},)")
                frozen_table[name] = vec
            frozen_table = MappingProxyType(frozen_table)
        object.__setattr__(self, "_table", frozen_table)
        object.__setattr__(self, "_cache", {})

    def __setattr__(self, key, value):
        raise AttributeError("EmbeddingProvider is frozen after construction")

    @classmethod
    def from_file(cls, path: str | Path, dim: int = EMBED_DIM) -> "EmbeddingProvider":
        table = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    table[str(rec["task"])] = np.asarray(rec["vector"], dtype=np.float64)
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise EmbeddingError(f"{path}:{lineno}: bad embedding record ({exc})") from None
        return cls(mode="file", dim=dim, table=table)

    @property
    def mode(self) -> str:
        return self._mode

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def seed(self) -> int:
        return self._seed

    def token_vector(self, token: str) -> np.ndarray:
        bucket = fnv1a64(token) % self._table_size
        prng = SeededPrng(derive_seed(self._seed, bucket))
        return prng.normal(self._dim) / math.sqrt(self._dim)

    def embed(self, text: str) -> Tensor:
        """Embedding of ``text`` (hashed) or of the task named ``text`` (file)."""
        if not text or not text.strip():
            raise EmbeddingError("metadata text must be non-empty")
        cached = self._cache.get(text)
        if cached is None:
            cached = _frozen(self._compute(text))
            self._cache[text] = cached
        out = Tensor(cached)
        assert not out.requires_grad
        return out

    def _compute(self, text: str) -> np.ndarray:
        if self._mode == "file":
            if text not in self._table:
                raise EmbeddingError(
                    f"no embedding for task {text!r}; available: {sorted(self._table)}")
            return self._table[text]
        tokens = tokenize(text)
        if not tokens:
            raise EmbeddingError(f"metadata {text!r} has no tokens")
        return np.mean([self.token_vector(tok) for tok in tokens], axis=0)

    def embed_task(self, task) -> Tensor:
        return self.embed(task.name if self._mode == "file" else task.metadata)


def embed_metadata(provider: EmbeddingProvider, text: str) -> Tensor:
    return provider.embed(text)


def write_embedding_file(path: str | Path, vectors: Mapping[str, Sequence[float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, vec in vectors.items():
            fh.write(json.dumps({"task": name, "vector": [float(x) for x in vec]}) + "\n")


class ContextEncoder:
    """Two-layer feedforward projection of the frozen embedding."""

    def __init__(self, input_dim: int = EMBED_DIM, hidden: int = CONTEXT_DIM,
                 output_dim: int = CONTEXT_DIM, seed: int = 0):
        self.net = Mlp(MlpSpec(input_dim, (hidden,), output_dim, seed=seed))

    @property
    def params(self) -> list[Tensor]:
        return self.net.params

    @property
    def output_dim(self) -> int:
        return self.net.spec.output_dim

    def __call__(self, embedding: Tensor) -> Tensor:
        return encode_context(self, embedding)


def encode_context(encoder: ContextEncoder, embedding: Tensor) -> Tensor:
    if embedding.shape[-1] != encoder.net.spec.input_dim:
        raise ShapeError(
            f"encode_context: embedding shape {embedding.shape} does not match "
            f"input dim {encoder.net.spec.input_dim}")
    return encoder.net(embedding)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``; 0 (with a warning) if either is ~0."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        warnings.warn("cosine_similarity: zero-norm vector, similarity defined as 0",
                      DegenerateVectorWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


__all__ = [
    "CONTEXT_DIM", "ContextEncoder", "DegenerateVectorWarning", "EMBED_DIM", "EmbeddingError",
    "EmbeddingProvider", "cosine_similarity", "embed_metadata", "encode_context", "tokenize",
    "write_embedding_file",
]

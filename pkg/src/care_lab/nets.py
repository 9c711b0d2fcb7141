"""Feedforward networks and the tanh-squashed Gaussian policy head."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .rng import SeededPrng
from .tensor import ShapeError, Tensor

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
ACTION_BOUND = 1.0 - 1e-12
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    seed: int = 0
    n_heads: int = 1

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(d <= 0 for d in dims):
            raise ValueError(f"MlpSpec: all dims must be positive, got {dims}")
        if self.activation != "relu":
            raise ValueError(f"MlpSpec: unsupported activation {self.activation!r}")
        if self.n_heads < 1:
            raise ValueError("MlpSpec: n_heads must be >= 1")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)


class Mlp:
    """ReLU on hidden layers, linear output.

    With ``n_heads > 1`` the final layer is replicated per task and rows are
    routed by ``head_index`` (one head per task over a shared trunk).
    """

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        prng = SeededPrng(spec.seed)
        dims = spec.dims
        n_layers = len(dims) - 1
        for i in range(n_layers):
            fan_in, fan_out = dims[i], dims[i + 1]
            bound = 1.0 / math.sqrt(fan_in)
            last = i == n_layers - 1
            shape = (spec.n_heads, fan_in, fan_out) if last and spec.n_heads > 1 else (fan_in, fan_out)
            bshape = (spec.n_heads, fan_out) if last and spec.n_heads > 1 else (fan_out,)
            w = prng.uniform_range(-bound, bound, shape)
            self.weights.append(Tensor(w, requires_grad=True, name=f"w{i}"))
            self.biases.append(Tensor(np.zeros(bshape), requires_grad=True, name=f"b{i}"))

    @property
    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{p.name}": p for p in self.params}

    def frozen(self) -> "Mlp":
        """View sharing this network's weights but passing no gradient to them."""
        view = object.__new__(Mlp)
        view.spec = self.spec
        view.weights = [T.stop_gradient(w) for w in self.weights]
        view.biases = [T.stop_gradient(b) for b in self.biases]
        return view

    def __call__(self, x: Tensor, head_index: np.ndarray | None = None,
                 modulate: Callable[[int, Tensor], Tensor] | None = None) -> Tensor:
        return mlp_forward(self, x, head_index=head_index, modulate=modulate)


def mlp_init(spec: MlpSpec) -> Mlp:
    return Mlp(spec)


def mlp_forward(net: Mlp, x: Tensor, head_index: np.ndarray | None = None,
                modulate: Callable[[int, Tensor], Tensor] | None = None) -> Tensor:
    """Forward pass; ``modulate(layer, h)`` may rewrite each hidden activation."""
    if x.shape[-1] != net.spec.input_dim:
        raise ShapeError(f"mlp_forward: input shape {x.shape} does not match input dim {net.spec.input_dim}")
    if x.ndim == 1:
        out = mlp_forward(net, T.reshape(x, (1, x.shape[0])), head_index, modulate)
        return T.reshape(out, (out.shape[-1],))
    h = x
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        if i == n_layers - 1 and net.spec.n_heads > 1:
            return _multihead_linear(h, w, b, head_index)
        hidden = i < n_layers - 1
        h = T.linear(h, w, b, apply_relu=hidden)
        if hidden and modulate is not None:
            h = modulate(i, h)
    return h


def _multihead_linear(h: Tensor, w: Tensor, b: Tensor, head_index) -> Tensor:
    if head_index is None:
        raise ValueError("multi-head network needs a head_index per row")
    idx = np.asarray(head_index, dtype=np.int64)
    if idx.shape != (h.shape[0],):
        raise ShapeError(f"multi-head: index shape {idx.shape} does not match batch {h.shape}")
    wg = T.take(w, idx)  # (B, in, out)
    hb = T.reshape(h, (h.shape[0], h.shape[1], 1))
    return T.add(T.sum(T.mul(hb, wg), axis=1), T.take(b, idx))


class PolicyHead:
    """Diagonal Gaussian over pre-squash actions; trunk emits [mean, log_std]."""

    def __init__(self, input_dim: int, action_dim: int, hidden: Sequence[int], seed: int,
                 n_heads: int = 1):
        self.action_dim = action_dim
        self.net = Mlp(MlpSpec(input_dim, tuple(hidden), 2 * action_dim, seed=seed, n_heads=n_heads))

    @property
    def params(self) -> list[Tensor]:
        return self.net.params

    def dist_params(self, z_s: Tensor, head_index=None) -> tuple[Tensor, Tensor]:
        out = self.net(z_s, head_index=head_index)
        a = self.action_dim
        mu = T.slice_last(out, 0, a)
        log_std = T.clip(T.slice_last(out, a, 2 * a), LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std


def squashed_log_prob(log_std: Tensor, noise: np.ndarray, action: Tensor) -> Tensor:
    """log N(u; mu, sigma) minus the tanh correction, summed over action dims.

    With u = mu + sigma * noise the Gaussian term only depends on log_std.
    """
    noise = np.asarray(noise, dtype=np.float64)
    gauss = T.sub(T.Tensor(-0.5 * noise * noise - _HALF_LOG_2PI), log_std)
    corr = T.log(T.add(T.sub(T.Tensor(1.0), T.square(action)), SQUASH_EPS))
    return T.sum(T.sub(gauss, corr), axis=-1)


def policy_sample(head: PolicyHead, z_s: Tensor, noise: np.ndarray,
                  head_index=None) -> tuple[Tensor, Tensor]:
    """Reparameterized squashed sample: returns (action, log_prob per row)."""
    noise = np.asarray(noise, dtype=np.float64)
    mu, log_std = head.dist_params(z_s, head_index)
    u = T.gaussian_sample(mu, log_std, noise)
    # tanh rounds to exactly +-1 for |u| > ~19; keep actions strictly inside.
    action = T.clip(T.tanh(u), -ACTION_BOUND, ACTION_BOUND)
    return action, squashed_log_prob(log_std, noise, action)


def policy_mean_action(head: PolicyHead, z_s: Tensor, head_index=None) -> np.ndarray:
    mu, _ = head.dist_params(z_s, head_index)
    return np.tanh(mu.data)

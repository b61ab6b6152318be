"""Neural building blocks shared by both model stages.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names.
Weight matrices end in ``.W`` by convention; the optimizer uses that
suffix to decide which entries receive decoupled weight decay. Layers
are plain functions of (params, name, inputs), so a forward pass is an
explicit composition with no hidden state.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN_EPS = 1e-5
LEAKY_SLOPE = 0.01
# Residual branches start small so blocks are near-identity at init; full
# glorot out-projections mix frames hard enough that small models spend most
# of their budget undoing it. Zero would work too but leaves dead branches.
RESIDUAL_SCALE = 0.1


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


def init_linear(params: dict, name: str, d_in: int, d_out: int, rng) -> None:
    params[name + ".W"] = Tensor(glorot(rng, d_in, d_out), requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros(d_out), requires_grad=True)


def init_layer_norm(params: dict, name: str, dim: int) -> None:
    params[name + ".g"] = Tensor(np.ones(dim), requires_grad=True)
    params[name + ".o"] = Tensor(np.zeros(dim), requires_grad=True)


def init_attention(params: dict, name: str, dim: int, rng) -> None:
    for part in ("q", "k", "v", "out"):
        init_linear(params, f"{name}.{part}", dim, dim, rng)
    out = params[name + ".out.W"]
    out.value = out.value * RESIDUAL_SCALE


def init_feed_forward(params: dict, name: str, dim: int, hidden: int, rng) -> None:
    init_linear(params, name + ".in", dim, hidden, rng)
    init_linear(params, name + ".out", hidden, dim, rng)
    out = params[name + ".out.W"]
    out.value = out.value * RESIDUAL_SCALE


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(params: dict, name: str, x: Tensor) -> Tensor:
    return x @ params[name + ".W"] + params[name + ".b"]


def layer_norm(params: dict, name: str, x: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered ** 2.0).mean(axis=-1, keepdims=True)
    normed = centered * ad.power(var + LN_EPS, -0.5)
    return normed * params[name + ".g"] + params[name + ".o"]


def relu(x: Tensor) -> Tensor:
    return ad.leaky_relu(x, 0.0)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    t, d = x.shape
    return x.reshape((t, n_heads, d // n_heads)).swapaxes(0, 1)


def _merge_heads(x: Tensor) -> Tensor:
    h, t, dh = x.shape
    return x.swapaxes(0, 1).reshape((t, h * dh))


def attention(params: dict, name: str, q_in: Tensor, kv_in: Tensor,
              n_heads: int, bias: np.ndarray | None = None) -> Tensor:
    """Multi-head attention; ``bias`` is an additive score mask of shape
    (T_q, T_k) or (n_heads, T_q, T_k), with -inf entries blocking access."""
    d = q_in.shape[-1]
    q = _split_heads(linear(params, name + ".q", q_in), n_heads)
    k = _split_heads(linear(params, name + ".k", kv_in), n_heads)
    v = _split_heads(linear(params, name + ".v", kv_in), n_heads)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d / n_heads))
    if bias is not None:
        scores = scores + bias
    ctx = ad.softmax(scores, axis=-1) @ v
    return linear(params, name + ".out", _merge_heads(ctx))


def feed_forward(params: dict, name: str, x: Tensor) -> Tensor:
    return linear(params, name + ".out", relu(linear(params, name + ".in", x)))


def init_encoder_block(params: dict, name: str, dim: int, hidden: int, rng) -> None:
    init_layer_norm(params, name + ".ln1", dim)
    init_attention(params, name + ".attn", dim, rng)
    init_layer_norm(params, name + ".ln2", dim)
    init_feed_forward(params, name + ".ff", dim, hidden, rng)


def encoder_block(params: dict, name: str, x: Tensor, n_heads: int,
                  bias: np.ndarray | None = None) -> Tensor:
    """Pre-norm self-attention block."""
    h = layer_norm(params, name + ".ln1", x)
    x = x + attention(params, name + ".attn", h, h, n_heads, bias)
    return x + feed_forward(params, name + ".ff", layer_norm(params, name + ".ln2", x))


# ---------------------------------------------------------------------------
# positions and attention biases
# ---------------------------------------------------------------------------

def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Classic fixed sin/cos position table, shape (n, dim)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def alibi_slopes(n_heads: int) -> np.ndarray:
    return np.power(2.0, -8.0 * np.arange(1, n_heads + 1) / n_heads)


def causal_bias(n_heads: int, t: int, period: int = 1) -> np.ndarray:
    """Per-head biased causal mask: future frames get -inf, past frames a
    linearly growing penalty scaled per head (slope halves head to head)."""
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    dist = np.floor((i - j) / float(period))
    bias = -alibi_slopes(n_heads)[:, None, None] * dist[None, :, :]
    return np.where(j > i, -np.inf, bias)


def alignment_bias(t: int) -> np.ndarray:
    """Strict one-to-one cross-modal mask: position t sees key t only."""
    bias = np.full((t, t), -np.inf)
    np.fill_diagonal(bias, 0.0)
    return bias


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay (beta1=0.9, beta2=0.999, eps=1e-8).

    Decay touches only names ending in ".W"; biases, norm gains, embedding
    tables, and the codebook are never decayed. weight_decay=0 is plain Adam.
    """

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name] = b1 * self._m[name] + (1.0 - b1) * g
            v = self._v[name] = b2 * self._v[name] + (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and name.endswith(".W"):
                update = update + self.weight_decay * p.value
            p.value = p.value - self.lr * update


class Adam(AdamW):
    """Adam without weight decay."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr, betas=betas, eps=eps, weight_decay=0.0)


def halved_lr(base_lr: float, epoch: int, halve_every: int) -> float:
    """Step schedule: half the rate every `halve_every` epochs."""
    if halve_every <= 0:
        return base_lr
    return base_lr * 0.5 ** (epoch // halve_every)


# ---------------------------------------------------------------------------
# parameter plumbing
# ---------------------------------------------------------------------------

def params_to_sections(params: dict, prefix: str = "param/") -> dict:
    """Flatten to container sections (float32 on disk)."""
    return {prefix + k: params[k].value.astype(np.float32) for k in params}


def params_from_sections(sections: dict, prefix: str = "param/") -> dict:
    out = {}
    for key, arr in sections.items():
        if key.startswith(prefix):
            out[key[len(prefix):]] = Tensor(arr.astype(np.float64), requires_grad=True)
    return out

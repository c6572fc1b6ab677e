"""Parameterized layers built on :mod:`mcmkd.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

INIT_STD = 0.02


def _normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.W = _normal(rng, (n_out, n_in))
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"linear: input {x.shape} vs weight {self.W.shape}")
        if x.ndim == 1:
            return T.reshape(T.matmul(T.reshape(x, (1, -1)), T.transpose(self.W)) + self.b, (-1,))
        return T.matmul(x, T.transpose(self.W)) + self.b


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer(x)


class MLP(Module):
    """Two linear layers with an exact GELU in between."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.hidden = Linear(n_in, n_hidden, rng)
        self.out = Linear(n_hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(T.gelu(self.hidden(x)))


def mlp_forward(hidden: Linear, out: Linear, x: Tensor) -> Tensor:
    if hidden.n_out != out.n_in:
        raise DimensionError(f"mlp: hidden width {hidden.n_out} vs output layer input {out.n_in}")
    return out(T.gelu(hidden(x)))


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 1):
        self.kernels = _normal(rng, (out_ch, in_ch, kernel, kernel))
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self._stride = stride

    @property
    def stride(self) -> int:
        return self._stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernels, self.bias, self._stride)


def conv2d_forward(layer: Conv2d, x: Tensor) -> Tensor:
    return layer(x)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class MultiHeadAttention(Module):
    """Full (unmasked) scaled dot-product self-attention.

    Accepts ``[L, d]`` or a batch ``[B, L, d]``.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise DimensionError(f"attention: model dim {d} not divisible by {heads} heads")
        self._heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.proj = Linear(d, d, rng)

    @property
    def heads(self) -> int:
        return self._heads

    def _split(self, x: Tensor, B: int, L: int) -> Tensor:
        dh = x.shape[-1] // self._heads
        x = T.reshape(x, (B, L, self._heads, dh))
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B * self._heads, L, dh))

    def attend(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (concatenated head outputs before projection, attention weights)."""
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        B, L, d = x.shape
        q, k, v = (self._split(f(x), B, L) for f in (self.q, self.k, self.v))
        dh = d // self._heads
        w = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh)))
        heads = T.matmul(w, v)
        heads = T.transpose(T.reshape(heads, (B, self._heads, L, dh)), (0, 2, 1, 3))
        heads = T.reshape(heads, (B, L, d))
        if squeeze:
            heads = T.reshape(heads, (L, d))
        return heads, w

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(self.attend(x)[0])


def multi_head_attention(mha: MultiHeadAttention, x: Tensor) -> Tensor:
    """Self-attention where q, k and v all come from ``x``."""
    return mha(x)


class EncoderBlock(Module):
    def __init__(self, d: int, heads: int, mlp_hidden: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TransformerEncoder(Module):
    """Pre-norm Transformer encoder with learnable positions and mask token.

    No class token and no final norm: the output row ``i`` is the latent for
    grid position ``i``.
    """

    def __init__(self, length: int, d: int, heads: int, layers: int, mlp_hidden: int,
                 rng: np.random.Generator):
        if d % heads:
            raise DimensionError(f"encoder: model dim {d} not divisible by {heads} heads")
        self.pos_emb = _normal(rng, (length, d))
        self.mask_token = _normal(rng, (d,))
        self.layers = [EncoderBlock(d, heads, mlp_hidden, rng) for _ in range(layers)]

    @property
    def length(self) -> int:
        return self.pos_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.pos_emb.shape[1]

    def __call__(self, seq: Tensor) -> Tensor:
        if seq.shape[-2:] != self.pos_emb.shape:
            raise ContractError(f"encoder: sequence {seq.shape} vs context {self.pos_emb.shape}")
        x = seq
        for block in self.layers:
            x = block(x)
        return x


def transformer_encode(enc: TransformerEncoder, seq: Tensor) -> Tensor:
    return enc(seq)


def encoder_param_count(length: int, d: int, heads: int, layers: int, mlp_hidden: int) -> int:
    """Closed-form parameter count of :class:`TransformerEncoder`."""
    per_block = (
        2 * 2 * d                      # two layer norms
        + 4 * (d * d + d)              # q, k, v, output projection
        + (d * mlp_hidden + mlp_hidden) + (mlp_hidden * d + d)
    )
    return length * d + d + layers * per_block

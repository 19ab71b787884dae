"""Pre-norm transformer encoder blocks shared by both student branches.

The layer composition is: z' = MSA(LN(z)) + z, then out = MLP(LN(z')) + z',
with one final layer norm after the stack. There are no positional
embeddings (tokens are unordered road segments in the spatial branch), so
the encoder is exactly permutation-equivariant over token rows; see the
``positional`` config knob on :class:`EncoderParams`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_bias,
    attend,
    concat_cols,
    layer_norm,
    matmul,
    relu,
    scale,
    softmax_rows,
    transpose,
)


def uniform_init(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    """uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) for an x @ W projection."""
    limit = math.sqrt(1.0 / rows)
    return Tensor(rng.uniform(-limit, limit, size=(rows, cols)))


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the shared output projection."""

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    @property
    def n_heads(self) -> int:
        return len(self.wq)

    @property
    def d_model(self) -> int:
        return self.wq[0].shape[0]

    @property
    def d_k(self) -> int:
        return self.wq[0].shape[1]

    @classmethod
    def create(cls, d_model: int, n_heads: int, rng: np.random.Generator) -> "AttentionParams":
        if d_model % n_heads != 0:
            raise ConfigError(f"head count {n_heads} must divide model width {d_model}")
        d_k = d_model // n_heads
        wq = [uniform_init(rng, d_model, d_k) for _ in range(n_heads)]
        wk = [uniform_init(rng, d_model, d_k) for _ in range(n_heads)]
        wv = [uniform_init(rng, d_model, d_k) for _ in range(n_heads)]
        wo = uniform_init(rng, n_heads * d_k, d_model)
        return cls(wq, wk, wv, wo)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i in range(self.n_heads):
            yield f"{prefix}.wq{i}", self.wq[i]
            yield f"{prefix}.wk{i}", self.wk[i]
            yield f"{prefix}.wv{i}", self.wv[i]
        yield f"{prefix}.wo", self.wo


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(
        cls, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator
    ) -> "EncoderLayerParams":
        if d_ff < d_model:
            raise ConfigError(f"mlp width {d_ff} must be at least model width {d_model}")
        return cls(
            attn=AttentionParams.create(d_model, n_heads, rng),
            ln1_gain=Tensor(np.ones((1, d_model))),
            ln1_bias=Tensor(np.zeros((1, d_model))),
            ln2_gain=Tensor(np.ones((1, d_model))),
            ln2_bias=Tensor(np.zeros((1, d_model))),
            w1=uniform_init(rng, d_model, d_ff),
            b1=Tensor(np.zeros((1, d_ff))),
            w2=uniform_init(rng, d_ff, d_model),
            b2=Tensor(np.zeros((1, d_model))),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.attn.named(f"{prefix}.attn")
        yield f"{prefix}.ln1_gain", self.ln1_gain
        yield f"{prefix}.ln1_bias", self.ln1_bias
        yield f"{prefix}.ln2_gain", self.ln2_gain
        yield f"{prefix}.ln2_bias", self.ln2_bias
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


@dataclass
class EncoderParams:
    """A stack of encoder layers plus the final layer norm.

    ``positional`` defaults to "none": the encoder sees tokens as an
    unordered set, which is what makes the row-permutation equivariance
    property hold. "learned" adds a trainable per-token embedding to the
    input and requires a fixed token count.
    """

    layers: list[EncoderLayerParams]
    final_gain: Tensor
    final_bias: Tensor
    positional: str = "none"  # none | learned
    pos_embedding: Tensor | None = None

    @property
    def d_model(self) -> int:
        return self.layers[0].attn.d_model

    @classmethod
    def create(
        cls,
        d_model: int,
        n_heads: int,
        d_ff: int,
        n_layers: int,
        rng: np.random.Generator,
        positional: str = "none",
        n_tokens: int | None = None,
    ) -> "EncoderParams":
        if n_layers < 1:
            raise ConfigError(f"encoder needs at least one layer, got {n_layers}")
        if positional not in ("none", "learned"):
            raise ConfigError(f"positional mode must be none or learned, got {positional!r}")
        pos_embedding = None
        if positional == "learned":
            if n_tokens is None:
                raise ConfigError("learned positional embeddings need a fixed token count")
            pos_embedding = uniform_init(rng, n_tokens, d_model)
        layers = [EncoderLayerParams.create(d_model, n_heads, d_ff, rng) for _ in range(n_layers)]
        return cls(
            layers=layers,
            final_gain=Tensor(np.ones((1, d_model))),
            final_bias=Tensor(np.zeros((1, d_model))),
            positional=positional,
            pos_embedding=pos_embedding,
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self.pos_embedding is not None:
            yield f"{prefix}.pos", self.pos_embedding
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layer{i}")
        yield f"{prefix}.final_gain", self.final_gain
        yield f"{prefix}.final_bias", self.final_bias


def multi_head_self_attention(tokens: Tensor, params: AttentionParams) -> Tensor:
    """Scaled dot-product self-attention with Q = K = V = tokens.

    Per head: softmax(Q W_q (K W_k)^T / sqrt(d_k)) (V W_v); heads are
    concatenated column-wise and projected by W_o.
    """
    if tokens.shape[1] != params.d_model:
        raise ShapeError(
            f"attention width mismatch: tokens {tokens.shape} vs d_model {params.d_model}"
        )
    inv_sqrt_dk = 1.0 / math.sqrt(params.d_k)
    heads: list[Tensor] = []
    for wq, wk, wv in zip(params.wq, params.wk, params.wv):
        q = matmul(tokens, wq)
        k = matmul(tokens, wk)
        v = matmul(tokens, wv)
        weights = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_dk))
        heads.append(attend(weights, v))
    merged = heads[0]
    for head in heads[1:]:
        merged = concat_cols(merged, head)
    return matmul(merged, params.wo)


def encoder_layer(z: Tensor, layer: EncoderLayerParams) -> Tensor:
    attended = multi_head_self_attention(
        layer_norm(z, layer.ln1_gain, layer.ln1_bias), layer.attn
    )
    z_mid = add(attended, z)
    hidden = relu(add_bias(matmul(layer_norm(z_mid, layer.ln2_gain, layer.ln2_bias), layer.w1), layer.b1))
    return add(add_bias(matmul(hidden, layer.w2), layer.b2), z_mid)


def encode(z0: Tensor, params: EncoderParams) -> Tensor:
    """Apply every layer in order, then the final layer norm."""
    z = z0
    if params.pos_embedding is not None:
        z = add(z, params.pos_embedding)
    for layer in params.layers:
        z = encoder_layer(z, layer)
    return layer_norm(z, params.final_gain, params.final_bias)

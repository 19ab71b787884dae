"""The dual-branch student: one encoder over road segments, one over time.

Spatial branch: tokens are the N road segments, features are the L history
steps of each segment. Temporal branch: tokens are the L time steps,
features are the N segment readings of each step. Both branches run the
same pre-norm encoder at a shared width d behind learned input projections
(L -> d and N -> d).

The two branch outputs do not align row-wise (N segment rows vs L step
rows), so the combination head mean-pools the temporal output into a single
context vector, broadcasts it to all segments, concatenates it to each
segment's spatial row, and applies one output projection to produce the
H-step forecast per segment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError
from .tensor import (
    ShapeError,
    Tensor,
    add_bias,
    concat_cols,
    matmul,
    mean_rows,
    repeat_rows,
    transpose,
)
from .transformer import EncoderParams, encode, uniform_init

BRANCH_MODES = ("dual", "spatial_only", "temporal_only")


def spatial_tokens(window: Tensor) -> Tensor:
    """Segments as tokens: row i holds segment i's L-step history (window transposed)."""
    return transpose(window)


def temporal_tokens(window: Tensor) -> Tensor:
    """Time steps as tokens: row t holds the all-segments snapshot at step t.

    This is the window itself (rows = time ascending); the function exists to
    document the orientation next to :func:`spatial_tokens`.
    """
    return window


@dataclass
class DualTransformerConfig:
    width: int = 64
    heads: int = 4
    spatial_layers: int = 2
    temporal_layers: int = 2
    mlp_width: int | None = None  # defaults to 4 * width
    branch: str = "dual"
    positional: str = "none"

    def __post_init__(self):
        if self.branch not in BRANCH_MODES:
            raise ConfigError(f"branch must be one of {BRANCH_MODES}, got {self.branch!r}")
        if self.width < 1 or self.heads < 1:
            raise ConfigError("width and heads must be positive")
        if self.width % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide width ({self.width})")
        if self.mlp_width is None:
            self.mlp_width = 4 * self.width


class DualTransformerModel:
    """Forecaster mapping a normalized L x N window to an N x H prediction."""

    def __init__(
        self,
        lookback: int,
        horizon: int,
        n_nodes: int,
        config: DualTransformerConfig | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.config = config or DualTransformerConfig()
        self.lookback = lookback
        self.horizon = horizon
        self.n_nodes = n_nodes
        rng = rng if rng is not None else np.random.default_rng(0)
        cfg = self.config
        d = cfg.width

        self.spatial_proj = self.spatial_proj_bias = self.spatial_encoder = None
        self.temporal_proj = self.temporal_proj_bias = self.temporal_encoder = None
        if cfg.branch in ("dual", "spatial_only"):
            self.spatial_proj = uniform_init(rng, lookback, d)
            self.spatial_proj_bias = Tensor(np.zeros((1, d)))
            self.spatial_encoder = EncoderParams.create(
                d, cfg.heads, cfg.mlp_width, cfg.spatial_layers, rng,
                positional=cfg.positional, n_tokens=n_nodes,
            )
        if cfg.branch in ("dual", "temporal_only"):
            self.temporal_proj = uniform_init(rng, n_nodes, d)
            self.temporal_proj_bias = Tensor(np.zeros((1, d)))
            self.temporal_encoder = EncoderParams.create(
                d, cfg.heads, cfg.mlp_width, cfg.temporal_layers, rng,
                positional=cfg.positional, n_tokens=lookback,
            )

        head_in = 2 * d if cfg.branch == "dual" else d
        self.head_weight = uniform_init(rng, head_in, horizon)
        self.head_bias = Tensor(np.zeros((1, horizon)))

    def forward(self, window) -> Tensor:
        """Run the enabled branches on one window and project to N x H."""
        win = window if isinstance(window, Tensor) else Tensor(window)
        if win.shape[0] != self.lookback:
            raise ConfigError(
                f"window has {win.shape[0]} rows, model expects lookback {self.lookback}"
            )
        if win.shape[1] != self.n_nodes:
            raise ConfigError(
                f"window has {win.shape[1]} columns, model expects {self.n_nodes} segments"
            )
        spatial_repr = None
        context = None
        if self.spatial_encoder is not None:
            tokens = add_bias(matmul(spatial_tokens(win), self.spatial_proj), self.spatial_proj_bias)
            spatial_repr = encode(tokens, self.spatial_encoder)  # N x d
        if self.temporal_encoder is not None:
            tokens = add_bias(matmul(temporal_tokens(win), self.temporal_proj), self.temporal_proj_bias)
            temporal_repr = encode(tokens, self.temporal_encoder)  # L x d
            context = mean_rows(temporal_repr)  # 1 x d

        if self.config.branch == "dual":
            features = concat_cols(spatial_repr, repeat_rows(context, self.n_nodes))
        elif self.config.branch == "spatial_only":
            features = spatial_repr
        else:
            features = repeat_rows(context, self.n_nodes)
        return add_bias(matmul(features, self.head_weight), self.head_bias)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        if self.spatial_encoder is not None:
            yield "spatial.proj", self.spatial_proj
            yield "spatial.proj_bias", self.spatial_proj_bias
            yield from self.spatial_encoder.named("spatial.enc")
        if self.temporal_encoder is not None:
            yield "temporal.proj", self.temporal_proj
            yield "temporal.proj_bias", self.temporal_proj_bias
            yield from self.temporal_encoder.named("temporal.enc")
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def parameter_count(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        if set(own) != set(state):
            missing = set(own) ^ set(state)
            raise ConfigError(f"checkpoint does not match this model, differing keys: {sorted(missing)}")
        for name, tensor in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ConfigError(
                    f"checkpoint entry {name} has shape {arr.shape}, model expects {tensor.data.shape}"
                )
            tensor.data = arr.copy()

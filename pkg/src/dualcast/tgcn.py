"""Graph teacher: a graph convolution feeding a gated recurrent unit.

The teacher is the half of the system that sees the road network. Each time
step, per-node input and hidden state are concatenated, mixed across the
graph by the normalized adjacency, projected to the hidden width, and pushed
through standard GRU gates; a linear readout maps the final hidden state of
each node to its H-step forecast.

Anything that predicts an N x H matrix from an L x N window can serve as a
teacher; the distillation loop only ever talks to :class:`FrozenTeacher`.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError
from .tensor import (
    Tensor,
    add,
    add_bias,
    add_scalar,
    block_matmul,
    checkpoint_bytes,
    concat_cols,
    matmul,
    mul,
    no_grad,
    scale,
    sigmoid,
    tanh,
)
from .transformer import uniform_init


def normalize_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Symmetric propagation matrix D^-1/2 (A + I) D^-1/2.

    Self-loops are added before normalization, so isolated nodes keep a
    self-weight of exactly 1.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DataError(f"adjacency must be square, got shape {a.shape}")
    if (a < 0).any():
        raise DataError("adjacency entries must be nonnegative")
    with_loops = a + np.eye(a.shape[0])
    inv_sqrt_deg = 1.0 / np.sqrt(with_loops.sum(axis=1))
    return inv_sqrt_deg[:, None] * with_loops * inv_sqrt_deg[None, :]


@dataclass
class RoadNetwork:
    adjacency: np.ndarray
    normalized: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray) -> "RoadNetwork":
        adjacency = np.asarray(adjacency, dtype=np.float64)
        return cls(adjacency=adjacency, normalized=normalize_adjacency(adjacency))


def gcn_step(a_hat: Tensor, x_t: Tensor, hidden_prev: Tensor, weight: Tensor) -> Tensor:
    """Graph-mixed features A_hat @ [x_t | h_prev] @ W (linear, no activation)."""
    return matmul(matmul(a_hat, concat_cols(x_t, hidden_prev)), weight)


class TGCNModel:
    """Graph convolution + GRU over the lookback window, linear readout to H steps."""

    def __init__(self, hidden: int, horizon: int, rng: np.random.Generator | None = None):
        if hidden < 1:
            raise ConfigError(f"hidden width must be >= 1, got {hidden}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        self.horizon = horizon
        self.trained = False
        gate_in = 2 * hidden  # [graph-mixed features | previous hidden]
        self.w_mix = uniform_init(rng, 1 + hidden, hidden)
        self.w_update = uniform_init(rng, gate_in, hidden)
        self.b_update = Tensor(np.zeros((1, hidden)))
        self.w_reset = uniform_init(rng, gate_in, hidden)
        self.b_reset = Tensor(np.zeros((1, hidden)))
        self.w_cand = uniform_init(rng, gate_in, hidden)
        self.b_cand = Tensor(np.zeros((1, hidden)))
        self.w_out = uniform_init(rng, hidden, horizon)
        self.b_out = Tensor(np.zeros((1, horizon)))

    def forward(self, network: RoadNetwork, window) -> Tensor:
        win = window if isinstance(window, Tensor) else Tensor(window)
        n_nodes = network.n_nodes
        if win.shape[1] != n_nodes:
            raise ConfigError(
                f"window has {win.shape[1]} columns but the road network has {n_nodes} nodes"
            )
        a_hat = Tensor(network.normalized)
        h = Tensor(np.zeros((n_nodes, self.hidden)))
        for t in range(win.shape[0]):
            x_t = Tensor(win.data[t].reshape(n_nodes, 1))
            mixed = gcn_step(a_hat, x_t, h, self.w_mix)
            gate_in = concat_cols(mixed, h)
            u = sigmoid(add_bias(matmul(gate_in, self.w_update), self.b_update))
            r = sigmoid(add_bias(matmul(gate_in, self.w_reset), self.b_reset))
            cand_in = concat_cols(mixed, mul(r, h))
            c = tanh(add_bias(matmul(cand_in, self.w_cand), self.b_cand))
            keep = add_scalar(scale(u, -1.0), 1.0)  # 1 - u
            h = add(mul(u, h), mul(keep, c))
        return add_bias(matmul(h, self.w_out), self.b_out)

    def forward_batch(self, network: RoadNetwork, windows: list) -> Tensor:
        """Run many windows as one taped graph, outputs stacked row-wise.

        The GRU gates act per node-row and the graph mixing applies the same
        adjacency to every window, so B windows stack into a (B*N)-row state
        with identical math to calling :meth:`forward` per window. Returns a
        (B*N) x H matrix whose consecutive N-row blocks follow window order.
        """
        n_nodes = network.n_nodes
        arrays = [np.asarray(w, dtype=np.float64) for w in windows]
        if any(a.shape[1] != n_nodes for a in arrays):
            raise ConfigError("window column count does not match the road network")
        lookback = arrays[0].shape[0]
        stacked = np.stack(arrays)  # B x L x N
        batch = stacked.shape[0]
        h = Tensor(np.zeros((batch * n_nodes, self.hidden)))
        for t in range(lookback):
            x_t = Tensor(np.ascontiguousarray(stacked[:, t, :]).reshape(batch * n_nodes, 1))
            mixed = matmul(block_matmul(network.normalized, concat_cols(x_t, h), n_nodes), self.w_mix)
            gate_in = concat_cols(mixed, h)
            u = sigmoid(add_bias(matmul(gate_in, self.w_update), self.b_update))
            r = sigmoid(add_bias(matmul(gate_in, self.w_reset), self.b_reset))
            cand_in = concat_cols(mixed, mul(r, h))
            c = tanh(add_bias(matmul(cand_in, self.w_cand), self.b_cand))
            keep = add_scalar(scale(u, -1.0), 1.0)
            h = add(mul(u, h), mul(keep, c))
        return add_bias(matmul(h, self.w_out), self.b_out)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "gcn.mix", self.w_mix
        yield "gru.update.weight", self.w_update
        yield "gru.update.bias", self.b_update
        yield "gru.reset.weight", self.w_reset
        yield "gru.reset.bias", self.b_reset
        yield "gru.cand.weight", self.w_cand
        yield "gru.cand.bias", self.b_cand
        yield "readout.weight", self.w_out
        yield "readout.bias", self.b_out

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
        self.trained = True


class FrozenTeacher:
    """Immutable view of a trained teacher; never touches a gradient tape."""

    def __init__(self, model: TGCNModel, network: RoadNetwork):
        self._model = TGCNModel(model.hidden, model.horizon)
        self._model.load_state(model.state_dict())
        self._network = network

    @property
    def horizon(self) -> int:
        return self._model.horizon

    @property
    def n_nodes(self) -> int:
        return self._network.n_nodes

    def predict(self, window) -> np.ndarray:
        with no_grad():
            return self._model.forward(self._network, window).data

    def predict_batch(self, windows: list) -> list[np.ndarray]:
        """Batched predictions, one N x H array per window."""
        n = self._network.n_nodes
        with no_grad():
            stacked = self._model.forward_batch(self._network, windows).data
        return [stacked[i * n : (i + 1) * n] for i in range(len(windows))]

    def state_dict(self) -> dict[str, np.ndarray]:
        return self._model.state_dict()

    def param_hash(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self._model.parameters())).hexdigest()


def freeze(model: TGCNModel, network: RoadNetwork) -> FrozenTeacher:
    """Snapshot a teacher for distillation; warns if it was never trained."""
    if not model.trained:
        warnings.warn("freezing a teacher that was never trained or loaded from a checkpoint")
    return FrozenTeacher(model, network)

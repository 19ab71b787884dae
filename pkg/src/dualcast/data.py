"""Dataset ingestion, splitting, normalization, windowing, and synthesis.

Speed files are plain CSV: rows are time steps ascending, columns are road
segments, optional header row of segment ids, '.' decimal separator.
Adjacency files are headerless N x N CSV in the same segment order.

The synthetic generator plants the structure this repo exists to exploit:
segments belong to latent functional classes with shared daily patterns,
while the road graph is drawn independently of those classes, so pattern
similarity and graph proximity are decoupled by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .tgcn import RoadNetwork


@dataclass(frozen=True)
class NormStats:
    vmin: float
    vmax: float


@dataclass
class SpeedDataset:
    """T x N speed matrix in raw units unless ``stats`` says otherwise.

    ``stats`` is set by :func:`normalize`; a dataset with stats holds values
    scaled to ~[0, 1] and ``denormalize`` maps model outputs back to raw
    units. Timestamps are an optional parallel list used only for display;
    ordering is implied by row order.
    """

    speeds: np.ndarray
    timestamps: list[str] | None = None
    network: RoadNetwork | None = None
    stats: NormStats | None = None

    @property
    def n_steps(self) -> int:
        return self.speeds.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.speeds.shape[1]


@dataclass(frozen=True)
class SplitIndices:
    """Half-open chronological index ranges, ordered train < val < test."""

    train: range
    val: range
    test: range


@dataclass(frozen=True)
class ForecastWindow:
    """One training sample: L x N input rows, then the H x N rows that follow."""

    inputs: np.ndarray
    target: np.ndarray


def chronological_split(n_steps: int, ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)) -> SplitIndices:
    """Contiguous train/val/test ranges covering [0, T) with no shuffling.

    Train and validation lengths round down; the remainder goes to test.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    if any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be positive, got {ratios}")
    if n_steps < 10:
        raise DataError(f"need at least 10 time steps to split, got {n_steps}")
    train_end = int(n_steps * ratios[0])
    val_end = train_end + int(n_steps * ratios[1])
    return SplitIndices(range(0, train_end), range(train_end, val_end), range(val_end, n_steps))


def load_speed_csv(path) -> SpeedDataset:
    """Read a speed CSV; the header row of segment ids is optional."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"speed file not found: {path}")
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")
    start = 0
    try:
        [float(cell) for cell in lines[0].split(",")]
    except ValueError:
        start = 1  # header row of node ids
    width = None
    for lineno, line in enumerate(lines[start:], start=start + 1):
        cells = line.split(",")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise DataError(f"{path}:{lineno}: ragged row, expected {width} cells, got {len(cells)}")
        try:
            rows.append([float(cell) for cell in cells])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return SpeedDataset(speeds=np.array(rows, dtype=np.float64))


def load_adjacency_csv(path) -> RoadNetwork:
    path = Path(path)
    if not path.exists():
        raise DataError(f"adjacency file not found: {path}")
    try:
        matrix = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: could not parse adjacency CSV ({exc})") from None
    return RoadNetwork.from_adjacency(matrix)


def _format(value: float) -> str:
    return f"{value:.17g}"


def write_speed_csv(path, dataset: SpeedDataset) -> None:
    """Write with a header of segment ids and 17 significant digits (exact round trip)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"n{i}" for i in range(dataset.n_nodes)) + "\n")
        for row in dataset.speeds:
            fh.write(",".join(_format(v) for v in row) + "\n")


def write_adjacency_csv(path, adjacency: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(adjacency):
            fh.write(",".join(_format(v) for v in row) + "\n")


def write_classes_csv(path, labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node,class\n")
        for i, label in enumerate(labels):
            fh.write(f"n{i},{int(label)}\n")


def normalize(dataset: SpeedDataset, split: SplitIndices) -> SpeedDataset:
    """Min-max scale to [0, 1] using statistics from the training range only.

    Validation/test values may land outside [0, 1]; that is accepted. Raises
    on a constant training range (the scale would be undefined).
    """
    if len(split.train) == 0:
        raise DataError("training range is empty, cannot compute normalization stats")
    train_block = dataset.speeds[split.train.start : split.train.stop]
    vmin = float(train_block.min())
    vmax = float(train_block.max())
    if vmax == vmin:
        raise DataError("training range is constant, min-max normalization is undefined")
    stats = NormStats(vmin=vmin, vmax=vmax)
    scaled = (dataset.speeds - vmin) / (vmax - vmin)
    return replace(dataset, speeds=scaled, stats=stats)


def denormalize(values: np.ndarray, stats: NormStats | None) -> np.ndarray:
    if stats is None:
        return np.asarray(values)
    return np.asarray(values) * (stats.vmax - stats.vmin) + stats.vmin


def make_windows(dataset: SpeedDataset, split_range: range, lookback: int = 12, horizon: int = 12) -> list[ForecastWindow]:
    """All stride-1 windows fully inside the range; never straddles a boundary."""
    span = lookback + horizon
    start, stop = split_range.start, split_range.stop
    if stop - start < span:
        warnings.warn(
            f"range [{start}, {stop}) is shorter than lookback+horizon={span}, no windows"
        )
        return []
    speeds = dataset.speeds
    return [
        ForecastWindow(
            inputs=speeds[s : s + lookback],
            target=speeds[s + lookback : s + span],
        )
        for s in range(start, stop - span + 1)
    ]


# ---------------------------------------------------------------------------
# synthetic generator

STEPS_PER_DAY = 288  # 5-minute sampling

_BASE_SPEED = 50.0
_DAILY_AMPLITUDE = 8.0
_DIP_DEPTH = 14.0
_DIP_WIDTH = 10.0  # steps, about 50 minutes
_OFFSET_SPREAD = 3.0

# Per-class daily phase (fraction of a day) and rush-hour dip centers (hours).
# Phases a third of a day apart push cross-class correlations down while the
# dips give each class its own congestion signature.
_CLASS_PHASES = [0.0, 1.0 / 3.0, 2.0 / 3.0]
_CLASS_DIPS = [(8.0, 18.0), (12.0,), (6.0, 21.0)]


def _class_signal(label: int, n_steps: int) -> np.ndarray:
    t = np.arange(n_steps)
    phase = _CLASS_PHASES[label % len(_CLASS_PHASES)] + 0.13 * (label // len(_CLASS_PHASES))
    signal = _BASE_SPEED + _DAILY_AMPLITUDE * np.sin(2 * np.pi * (t / STEPS_PER_DAY + phase))
    day_pos = t % STEPS_PER_DAY
    for dip_hour in _CLASS_DIPS[label % len(_CLASS_DIPS)]:
        center = dip_hour * STEPS_PER_DAY / 24.0
        signal = signal - _DIP_DEPTH * np.exp(-0.5 * ((day_pos - center) / _DIP_WIDTH) ** 2)
    return signal


def synth_generate(
    n_nodes: int = 24,
    n_steps: int = 2016,
    n_classes: int = 3,
    graph_density: float = 0.15,
    noise_std: float = 0.05,
    seed: int = 0,
) -> tuple[SpeedDataset, np.ndarray]:
    """Build a dataset whose pattern classes are decoupled from its graph.

    Each node draws a latent class (all classes represented), a constant
    offset, and Gaussian noise on top of the class signal. The adjacency is a
    random geometric graph over positions drawn independently of the class
    labels. Returns the dataset (with its RoadNetwork attached) and the class
    label per node.
    """
    if n_classes < 2 or n_nodes < n_classes:
        raise ConfigError(
            f"need n_nodes >= n_classes >= 2, got n_nodes={n_nodes}, n_classes={n_classes}"
        )
    rng = np.random.default_rng(seed)
    labels = np.concatenate(
        [np.arange(n_classes), rng.integers(0, n_classes, size=n_nodes - n_classes)]
    )
    rng.shuffle(labels)
    offsets = rng.uniform(-_OFFSET_SPREAD, _OFFSET_SPREAD, size=n_nodes)
    signals = {k: _class_signal(k, n_steps) for k in range(n_classes)}
    speeds = np.empty((n_steps, n_nodes))
    for i in range(n_nodes):
        speeds[:, i] = signals[int(labels[i])] + offsets[i]
    if noise_std > 0:
        speeds = speeds + rng.normal(0.0, noise_std, size=speeds.shape)
    speeds = np.maximum(speeds, 0.0)

    # random geometric graph: radius chosen so the expected edge fraction
    # roughly matches graph_density; positions never see the labels
    positions = rng.uniform(0.0, 1.0, size=(n_nodes, 2))
    radius = np.sqrt(max(graph_density, 1e-6) / np.pi)
    diffs = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(axis=2))
    adjacency = ((dist < radius) & ~np.eye(n_nodes, dtype=bool)).astype(np.float64)

    dataset = SpeedDataset(speeds=speeds, network=RoadNetwork.from_adjacency(adjacency))
    return dataset, labels

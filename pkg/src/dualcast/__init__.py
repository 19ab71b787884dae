"""Traffic speed forecasting with a dual-branch transformer student
distilled from a graph-based teacher."""

from .data import (
    ForecastWindow,
    SpeedDataset,
    SplitIndices,
    chronological_split,
    load_adjacency_csv,
    load_speed_csv,
    make_windows,
    normalize,
    synth_generate,
)
from .errors import ConfigError, DataError
from .metrics import MetricTriple, evaluate_model, mape, mse, periodwise_evaluate, r2
from .model import DualTransformerConfig, DualTransformerModel
from .tensor import NumericsError, ShapeError, Tape, Tensor, load_checkpoint, save_checkpoint
from .tgcn import FrozenTeacher, RoadNetwork, TGCNModel, freeze, normalize_adjacency
from .training import (
    Adam,
    DistillationConfig,
    TrainReport,
    alpha_sweep,
    distill_train,
    pretrain_teacher,
    total_loss,
)

__version__ = "0.1.0"

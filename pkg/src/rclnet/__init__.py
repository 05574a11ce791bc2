"""NumPy recurrent convolutional network for per-frame intensity regression
over causal sliding windows of frame vectors."""

from .datapipe import FrameSequence, SynthSpec, synth_generate
from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    RclNetError,
    StateError,
    TrainingDiverged,
    UndefinedCorrelation,
)
from .evaluation import (
    EvalReport,
    compare_static_baseline,
    loso_crossval,
    measure_throughput,
    mse_metric,
    pcc_metric,
    predict_sequence,
)
from .network import Network, NetworkConfig, build_network, read_checkpoint, write_checkpoint
from .tensor import ConvSpec, PoolSpec
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ConvSpec",
    "DimensionError",
    "EvalReport",
    "FormatError",
    "FrameSequence",
    "Network",
    "NetworkConfig",
    "PoolSpec",
    "RclNetError",
    "StateError",
    "SynthSpec",
    "TrainConfig",
    "TrainingDiverged",
    "UndefinedCorrelation",
    "build_network",
    "compare_static_baseline",
    "loso_crossval",
    "measure_throughput",
    "mse_metric",
    "pcc_metric",
    "predict_sequence",
    "read_checkpoint",
    "synth_generate",
    "train",
    "write_checkpoint",
]

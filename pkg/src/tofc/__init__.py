"""Task-oriented feature compression for device-edge multimodal inference.

Visual features are merged per patch with density peaks clustering,
entropy coded with a bank of hyperprior models chosen by a router, and
shipped to an edge server in a CRC-protected container.
"""

from .codec import compress_request, decode_request, encode_request
from .errors import (
    ConfigError,
    CRCError,
    DecodeError,
    FormatError,
    InvalidArgumentError,
    NetworkError,
    TofcError,
    TrainingDivergence,
    TruncationError,
)
from .features import FeatureTensor, SyntheticSpec, load_features, save_features, synth_features, synth_two_source
from .merge import FeatureMerger, merge
from .selector import ModelBank
from .trainer import TofcCompressor, TrainConfig, evaluate, rd_sweep, train

__version__ = "0.1.0"

__all__ = [
    "CRCError",
    "ConfigError",
    "DecodeError",
    "FeatureMerger",
    "FeatureTensor",
    "FormatError",
    "InvalidArgumentError",
    "ModelBank",
    "NetworkError",
    "SyntheticSpec",
    "TofcCompressor",
    "TofcError",
    "TrainConfig",
    "TrainingDivergence",
    "TruncationError",
    "compress_request",
    "decode_request",
    "encode_request",
    "evaluate",
    "load_features",
    "merge",
    "rd_sweep",
    "save_features",
    "synth_features",
    "synth_two_source",
    "train",
]

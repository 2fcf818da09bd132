"""Residual networks whose blocks share an orthonormal filter basis, in plain numpy."""
from .analyze import (DeviationTracker, GradFlowRecorder, cosine_similarity, network_similarity,
                      ortho_deviation_trace, record_grad_flow, spectral_probe)
from .basis import BasisBlockGroup, FactorizedConv, FilterBasis, compose_filters, ortho_penalty
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load, synthetic, synthetic_pair
from .errors import (ConfigError, DimensionError, FormatError, ModeError, NameParseError, NumericalError,
                     RankError, TapeError)
from .gradcheck import gradcheck
from .models import Network, NetworkSpec, build, count, spec_from_name
from .tensor import col2im, im2col, matmul
from .train import SGD, TrainConfig, Trainer, evaluate

__version__ = "0.1.0"

"""Federated learning with dual-side low-rank compression, at desk scale.

A deterministic simulator of round-based federated SGD where the exchanged
models are compressed on both the upload and broadcast paths by energy-based
truncated SVD, together with a FedAvg baseline, communication accounting, and
convergence diagnostics.
"""

__version__ = "0.1.0"

from .linalg import SvdResult, frobenius_norm, matmul, svd
from .compression import (
    CompressedLayer,
    CompressedModel,
    FactorPair,
    compress_model,
    dense_model,
    energy_rank,
    lr_compress,
    reconstruct,
    reconstruct_model,
    transmitted_params,
)
from .nn import Batch, Gradients, LrSchedule, MlpModel, evaluate, forward_loss_grad, init_mlp, lr_at, sgd_step
from .data import Dataset, load_csv, partition_iid, save_csv, split_train_test, synth_gaussian_mixture
from .federation import ClientState, ServerState, TrainConfig, aggregate, feddlr_round, local_train, run_training
from .metrics import (
    ConvergenceConstants,
    MetricsLog,
    RoundRecord,
    bound_rhs,
    comm_accounting,
    estimate_constants,
    lambda_diagnostic,
    mac_count,
    mac_ratio,
)

"""Desk-scale federated learning with frozen activation gates (FedSQ)."""
from .calibrate import CalibrationReport, Schedule, TrainConfig, obtain_schedule, pretrain
from .dualcopy import (
    ActivationMaskSet,
    DualCopyModel,
    compute_masks,
    extract_affine,
    gated_backward,
    gated_forward,
    make_dual_copy,
)
from .errors import (
    ConfigurationError,
    ContractError,
    FedSQError,
    FormatError,
    InputError,
    NumericError,
    PartitionError,
    ProtocolError,
)
from .fedproto import FederationConfig, RoundLog, aggregate, run_federation
from .nncore import Conv2d, Dense, Flatten, ModelArch, ModelParams, backward, forward, loss_ce, sgd_step
from .partition import Dataset, PartitionPlan, dirichlet_split, heterogeneity_index, iid_split

__version__ = "0.1.0"

__all__ = [
    "ActivationMaskSet",
    "aggregate",
    "backward",
    "CalibrationReport",
    "compute_masks",
    "ConfigurationError",
    "ContractError",
    "Conv2d",
    "Dataset",
    "Dense",
    "dirichlet_split",
    "DualCopyModel",
    "extract_affine",
    "FederationConfig",
    "FedSQError",
    "Flatten",
    "FormatError",
    "forward",
    "gated_backward",
    "gated_forward",
    "heterogeneity_index",
    "iid_split",
    "InputError",
    "loss_ce",
    "make_dual_copy",
    "ModelArch",
    "ModelParams",
    "NumericError",
    "obtain_schedule",
    "PartitionError",
    "PartitionPlan",
    "pretrain",
    "ProtocolError",
    "RoundLog",
    "run_federation",
    "Schedule",
    "sgd_step",
    "TrainConfig",
]

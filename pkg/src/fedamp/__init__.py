"""Personalized federated learning with attentive message passing."""

from .attention import (
    MCP,
    SCAD,
    CollabMatrix,
    Linear,
    NegExp,
    TamedSqrt,
    aggregate,
    fedamp_weights,
    heur_weights,
    make_attention,
)
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    FedAMPError,
    FormatError,
    InsufficientDataError,
    InvalidInputError,
    NumericalDivergenceError,
    StepSizeTooLargeError,
)
from .federation import (
    FaultModel,
    FedAMP,
    FedAvg,
    FedAvgFT,
    FedProx,
    FedProxFT,
    HeurFedAMP,
    ObjectiveSpec,
    RoundRecord,
    Separate,
    run_experiment,
    run_round,
)
from .models import MLP, ClientDataset, LabeledDataset, LinearRegression, LogisticRegression, Quadratic
from .optim import ConstantTheory, Diminishing, StepDecay, SolverConfig

__version__ = "0.1.0"

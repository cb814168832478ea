from .core import (DivergenceError, ParamVector, ProtocolError, TrainSpec, fedavg, local_train,
                   mean_pairwise_l2)
from .runner import (CSV_COLUMNS, DataSpec, FederationData, FederationPlan, FederationResult,
                     MinSpec, RoundReport, prepare_data, run_federation)

__all__ = [
    "CSV_COLUMNS", "DataSpec", "DivergenceError", "FederationData", "FederationPlan",
    "FederationResult", "MinSpec", "ParamVector", "ProtocolError", "RoundReport", "TrainSpec",
    "fedavg", "local_train", "mean_pairwise_l2", "prepare_data", "run_federation",
]

"""Deterministic federated-learning simulator and scoring harness for GUI agents."""
from .actions import ActionKind, UnifiedAction, parse_action, serialize_action
from .episodes import Episode, SourceTag, Step, load_episodes
from .fl import AlgoConfig, Algo, RoundConfig, ServerState, aggregate, run, run_round, server_step
from .metrics import EvalReport, PredictionRecord, evaluate
from .partition import Axis, PartitionManifest, PartitionSpec, Scheme, partition

__version__ = "0.1.0"

__all__ = [
    "ActionKind", "UnifiedAction", "parse_action", "serialize_action",
    "Episode", "SourceTag", "Step", "load_episodes",
    "Algo", "AlgoConfig", "RoundConfig", "ServerState", "aggregate", "run", "run_round", "server_step",
    "EvalReport", "PredictionRecord", "evaluate",
    "Axis", "PartitionManifest", "PartitionSpec", "Scheme", "partition",
]

"""Federated split-learning protocol: messages, participants, rounds and inference."""

from .client import FedClient
from .inference import InferencePolicy, infer
from .messages import MessageKind, ProtocolError, ProtocolMessage
from .server import FedServer
from .training import TrainingAborted, TrainingResult, init_and_broadcast, run_training

__all__ = [
    "FedClient",
    "FedServer",
    "InferencePolicy",
    "MessageKind",
    "ProtocolError",
    "ProtocolMessage",
    "TrainingAborted",
    "TrainingResult",
    "infer",
    "init_and_broadcast",
    "run_training",
]

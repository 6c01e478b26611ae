"""Edge-as-a-Service platform: controller, edge agents, CLI and bench."""

import logging

from .protocol import (
    Action,
    ContainerKind,
    ContainerState,
    MetricsSample,
    NodeOffer,
    Outcome,
    ServiceRequest,
    ServiceResponse,
    decode_message,
    encode_message,
    next_state,
)

__version__ = "0.1.0"

__all__ = [
    "Action",
    "ContainerKind",
    "ContainerState",
    "MetricsSample",
    "NodeOffer",
    "Outcome",
    "ServiceRequest",
    "ServiceResponse",
    "decode_message",
    "encode_message",
    "next_state",
    "__version__",
]

logging.getLogger(__name__).addHandler(logging.NullHandler())

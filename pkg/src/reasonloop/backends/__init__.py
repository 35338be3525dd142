from .base import (
    BackendError,
    BackendHTTPError,
    BackendTimeout,
    BackendUnreachable,
    ChatRequest,
    ChatResult,
    ContentPolicyError,
    EditRequest,
    EditResult,
    GeneratorBackend,
    ImagePart,
    MalformedResponse,
    Message,
    PreconditionError,
    ProtocolError,
    ReasonerBackend,
    RetryPolicy,
    TextPart,
    TransportError,
    chat_complete,
    edit_image,
    request_hash,
)
from .config import Backends, ConfigError, build_backends, load_backend_config
from .http import HTTPGenerator, HTTPReasoner
from .scripted import ScriptedGenerator, ScriptedReasoner
from .world import SimulatedWorld, WorldConfig, simulated_world

__all__ = [
    "BackendError",
    "BackendHTTPError",
    "BackendTimeout",
    "BackendUnreachable",
    "Backends",
    "ChatRequest",
    "ChatResult",
    "ConfigError",
    "ContentPolicyError",
    "EditRequest",
    "EditResult",
    "GeneratorBackend",
    "HTTPGenerator",
    "HTTPReasoner",
    "ImagePart",
    "MalformedResponse",
    "Message",
    "PreconditionError",
    "ProtocolError",
    "ReasonerBackend",
    "RetryPolicy",
    "ScriptedGenerator",
    "ScriptedReasoner",
    "SimulatedWorld",
    "TextPart",
    "TransportError",
    "WorldConfig",
    "build_backends",
    "chat_complete",
    "edit_image",
    "load_backend_config",
    "request_hash",
    "simulated_world",
]

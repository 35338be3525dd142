"""Backend contracts for the two model roles.

A *reasoner* answers chat requests (text plus image parts). A *generator*
edits a reference image according to an instruction. Both are plain protocols;
live HTTP clients, scripted fixtures and the simulated world all satisfy them.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, TypeVar, runtime_checkable

from ..images import ImageStore
from ..types import ImageRef, Instruction, RetryRecord

ROLES = ("system", "user", "assistant")

DEFAULT_STEPS = 28
DEFAULT_GUIDANCE = 4.0


class PreconditionError(ValueError):
    """A request was built with arguments outside its contract."""


class BackendError(Exception):
    """Base class for backend failures. Carries the id of the failing request."""

    def __init__(self, message: str, request_id: str | None = None):
        self.request_id = request_id
        super().__init__(f"{message} [request {request_id}]" if request_id else message)


class TransportError(BackendError):
    """The request never produced a usable HTTP response."""


class BackendTimeout(TransportError):
    pass


class BackendUnreachable(TransportError):
    pass


class BackendHTTPError(TransportError):
    def __init__(self, status: int, message: str, request_id: str | None = None):
        self.status = status
        super().__init__(f"HTTP {status}: {message}", request_id)


class MalformedResponse(BackendError):
    """The response arrived but its body does not match the wire format."""


class ContentPolicyError(BackendError):
    """The backend refused the request on content-policy grounds."""


class ProtocolError(Exception):
    """Model output could not be parsed into the expected structure."""

    def __init__(self, message: str, raw: str | None = None):
        self.raw = raw
        super().__init__(message)


# --- requests ---------------------------------------------------------------


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    image: ImageRef


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[TextPart | ImagePart, ...]

    def __post_init__(self):
        if self.role not in ROLES:
            raise PreconditionError(f"unknown role {self.role!r}")
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))


@dataclass(frozen=True)
class ChatRequest:
    """A chat-completions style request.

    ``purpose`` names the prompt template and ``slots`` carries its bound
    values. Neither goes over the wire; offline backends use them to decide
    what kind of answer is wanted without parsing prompt prose.
    """

    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None
    purpose: str | None = None
    slots: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "slots", tuple(tuple(kv) for kv in self.slots))
        if not any(m.role == "user" for m in self.messages):
            raise PreconditionError("a chat request needs at least one user message")
        if self.temperature < 0:
            raise PreconditionError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise PreconditionError("max_tokens must be > 0")

    @property
    def images(self) -> list[ImageRef]:
        return [p.image for m in self.messages for p in m.parts if isinstance(p, ImagePart)]

    def slot(self, name: str, default: str | None = None) -> str | None:
        return dict(self.slots).get(name, default)

    def canonical(self) -> dict:
        return {
            "messages": [
                {
                    "role": m.role,
                    "parts": [
                        {"text": p.text} if isinstance(p, TextPart) else {"image": p.image.sha256} for p in m.parts
                    ],
                }
                for m in self.messages
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
        }

    @property
    def request_id(self) -> str:
        return request_hash(self)


@dataclass(frozen=True)
class EditRequest:
    reference: ImageRef
    instruction: Instruction
    seed: int
    guidance: float = DEFAULT_GUIDANCE
    steps: int = DEFAULT_STEPS

    def __post_init__(self):
        if self.steps < 1:
            raise PreconditionError(f"steps must be >= 1, got {self.steps}")
        if not self.guidance > 0:
            raise PreconditionError(f"guidance must be > 0, got {self.guidance}")

    def canonical(self) -> dict:
        return {
            "reference": self.reference.sha256,
            "instruction": self.instruction.text,
            "seed": self.seed,
            "guidance": self.guidance,
            "steps": self.steps,
        }

    @property
    def request_id(self) -> str:
        return request_hash(self)


def request_hash(request: ChatRequest | EditRequest) -> str:
    """Stable 16-hex-digit hash of a request's wire-relevant content."""
    blob = json.dumps(request.canonical(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# --- results ----------------------------------------------------------------


@dataclass(frozen=True)
class ChatResult:
    text: str
    usage: dict = field(default_factory=dict)
    latency_ms: int = 0
    retries: tuple[RetryRecord, ...] = ()


@dataclass(frozen=True)
class EditResult:
    image: ImageRef
    latency_ms: int = 0
    retries: tuple[RetryRecord, ...] = ()


@runtime_checkable
class ReasonerBackend(Protocol):
    def chat(self, request: ChatRequest) -> ChatResult: ...


@runtime_checkable
class GeneratorBackend(Protocol):
    store: ImageStore

    def edit(self, request: EditRequest) -> EditResult: ...


def chat_complete(backend: ReasonerBackend, request: ChatRequest) -> ChatResult:
    result = backend.chat(request)
    if not result.text or not result.text.strip():
        raise MalformedResponse("empty completion text", request.request_id)
    return result


def edit_image(backend: GeneratorBackend, request: EditRequest) -> ImageRef:
    return backend.edit(request).image


# --- retries ----------------------------------------------------------------

T = TypeVar("T")

RETRYABLE = (BackendTimeout, BackendUnreachable)


def is_retryable(exc: BaseException) -> bool:
    if isinstance(exc, RETRYABLE):
        return True
    return isinstance(exc, BackendHTTPError) and (exc.status == 429 or exc.status >= 500)


@dataclass(frozen=True)
class RetryPolicy:
    """Fixed retry schedule: ``1 + retry_budget`` attempts in total.

    The delay before retry *k* (1-based) is ``backoff_ms[min(k, len) - 1]``.
    """

    retry_budget: int = 2
    backoff_ms: tuple[int, ...] = (250, 500, 1000, 2000)

    def __post_init__(self):
        if self.retry_budget < 0:
            raise PreconditionError("retry_budget must be >= 0")
        if not self.backoff_ms:
            raise PreconditionError("backoff_ms must list at least one delay")

    def delay_ms(self, retry: int) -> int:
        return self.backoff_ms[min(retry, len(self.backoff_ms)) - 1]

    def run(
        self,
        fn: Callable[[], T],
        role: str,
        sleep: Callable[[float], None] = time.sleep,
    ) -> tuple[T, tuple[RetryRecord, ...]]:
        """Call ``fn`` until it succeeds or the budget is spent.

        Returns the result and the retries that happened. When every attempt
        fails the last error is re-raised with the retries attached as
        ``exc.retries``.
        """
        retries: list[RetryRecord] = []
        attempt = 1
        while True:
            try:
                return fn(), tuple(retries)
            except BackendError as exc:
                if not is_retryable(exc) or attempt > self.retry_budget:
                    exc.retries = tuple(retries)
                    raise
                delay = self.delay_ms(attempt)
                retries.append(RetryRecord(None, role, attempt, delay, f"{type(exc).__name__}: {exc}"))
                sleep(delay / 1000.0)
                attempt += 1


# --- metering ---------------------------------------------------------------


class MeteredReasoner:
    """Per-session wrapper that counts reasoner calls, latency and retries."""

    def __init__(self, inner: ReasonerBackend):
        self.inner = inner
        self.calls = 0
        self.latency_ms = 0
        self.retries: list[RetryRecord] = []
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    def chat(self, request: ChatRequest) -> ChatResult:
        with self._lock:
            self.calls += 1
            self.requests.append(request)
        try:
            result = self.inner.chat(request)
        except BackendError as exc:
            with self._lock:
                self.retries.extend(getattr(exc, "retries", ()))
            raise
        with self._lock:
            self.latency_ms += result.latency_ms
            self.retries.extend(result.retries)
        return result


class MeteredGenerator:
    def __init__(self, inner: GeneratorBackend):
        self.inner = inner
        self.store = inner.store
        self.calls = 0
        self.latency_ms = 0
        self.retries: list[RetryRecord] = []

    def edit(self, request: EditRequest) -> EditResult:
        self.calls += 1
        try:
            result = self.inner.edit(request)
        except BackendError as exc:
            self.retries.extend(getattr(exc, "retries", ()))
            raise
        self.latency_ms += result.latency_ms
        self.retries.extend(result.retries)
        return result

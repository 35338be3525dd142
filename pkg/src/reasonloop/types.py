"""Shared value types for edit sessions, reflections and scores.

All types are frozen dataclasses that validate themselves on construction and
raise :class:`InvariantError` (a ``ValueError``) naming the offending field.
Scores are held at four fractional digits, the precision written to traces,
so a session survives a serialize/parse round trip unchanged.
"""

from __future__ import annotations

import math
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .images import sha256_hex, sniff_media_type

SCORE_DIGITS = 4


class InvariantError(ValueError):
    """A value object violates one of its invariants."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def quantize(x: float) -> float:
    return round(float(x), SCORE_DIGITS)


def _check_score(path: str, value: float, lo: float = 0.0, hi: float = 10.0) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise InvariantError(path, f"expected a number, got {type(value).__name__}")
    if not math.isfinite(value):
        raise InvariantError(path, "must be finite")
    if not lo <= value <= hi:
        raise InvariantError(path, f"{value} outside [{lo}, {hi}]")


class MediaType(str, Enum):
    PNG = "png"
    JPEG = "jpeg"


class InstructionKind(str, Enum):
    ABSTRACT = "abstract"
    CONCRETE = "concrete"
    PASSTHROUGH = "passthrough"


class Tag(str, Enum):
    SUCCESS = "Success"
    REFLECT = "Reflect"
    FAILED = "Failed"

    @property
    def wire(self) -> str:
        """Trace spelling: ``#Success``, ``#Reflection`` or ``#Failed``."""
        return _TAG_WIRE[self]

    @property
    def marker(self) -> str:
        """Literal marker emitted by the reasoner, e.g. ``<#Reflection>``."""
        return f"<{self.wire}>"

    @classmethod
    def from_wire(cls, text: str) -> "Tag":
        for tag, spelled in _TAG_WIRE.items():
            if spelled == text:
                return tag
        raise ValueError(f"unknown conclusion tag {text!r}")


_TAG_WIRE = {Tag.SUCCESS: "#Success", Tag.REFLECT: "#Reflection", Tag.FAILED: "#Failed"}


class SessionStatus(str, Enum):
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    STOPPED = "Stopped"
    FAILED = "Failed"


class LoopMode(str, Enum):
    BASE = "base"
    THINKING = "thinking"
    THINKING_REFLECTION = "thinking_reflection"
    REROLL = "reroll"


class ReflectionVariant(str, Enum):
    DUAL_IMAGE = "dual_image"
    SINGLE_IMAGE = "single_image"
    MULTI_ROUND = "multi_round"


@dataclass(frozen=True)
class ImageRef:
    uri: str
    media_type: MediaType
    sha256: str

    def __post_init__(self):
        object.__setattr__(self, "media_type", MediaType(self.media_type))
        if not self.uri:
            raise InvariantError("uri", "must be non-empty")
        if len(self.sha256) != 64 or any(c not in "0123456789abcdef" for c in self.sha256):
            raise InvariantError("sha256", "must be a lowercase hex sha256 digest")

    @classmethod
    def from_bytes(cls, data: bytes, uri: str) -> "ImageRef":
        return cls(uri=uri, media_type=MediaType(sniff_media_type(data)), sha256=sha256_hex(data))

    @classmethod
    def from_path(cls, path: str | Path) -> "ImageRef":
        return cls.from_bytes(Path(path).read_bytes(), str(path))

    def verify(self, data: bytes) -> None:
        """Raise InvariantError unless ``data`` are the bytes this ref recorded."""
        if sha256_hex(data) != self.sha256:
            raise InvariantError("sha256", f"bytes for {self.uri} do not match the recorded digest")
        try:
            kind = sniff_media_type(data)
        except ValueError as exc:
            raise InvariantError("media_type", str(exc)) from None
        if kind != self.media_type.value:
            raise InvariantError("media_type", f"recorded {self.media_type.value}, payload is {kind}")


@dataclass(frozen=True)
class Instruction:
    text: str
    kind: InstructionKind = InstructionKind.CONCRETE

    def __post_init__(self):
        object.__setattr__(self, "kind", InstructionKind(self.kind))
        if not isinstance(self.text, str) or not self.text.strip():
            raise InvariantError("text", "instruction text must be non-empty")


@dataclass(frozen=True)
class ReflectionConclusion:
    tag: Tag
    reasoning: str
    refinement_instruction: Instruction | None = None

    def __post_init__(self):
        object.__setattr__(self, "tag", Tag(self.tag))
        if not self.reasoning or not self.reasoning.strip():
            raise InvariantError("reasoning", "must be non-empty")
        if self.tag is Tag.REFLECT and self.refinement_instruction is None:
            raise InvariantError("refinement_instruction", "required when tag is Reflect")
        if self.tag is not Tag.REFLECT and self.refinement_instruction is not None:
            raise InvariantError("refinement_instruction", f"must be absent when tag is {self.tag.value}")


@dataclass(frozen=True)
class VIEScore:
    """Semantic consistency and perceptual quality on [0, 10].

    ``overall`` is always derived as the geometric mean of the two axes and
    cannot be passed in.
    """

    semantic_consistency: float
    perceptual_quality: float
    overall: float = field(init=False)

    def __post_init__(self):
        _check_score("semantic_consistency", self.semantic_consistency)
        _check_score("perceptual_quality", self.perceptual_quality)
        sc = quantize(self.semantic_consistency)
        pq = quantize(self.perceptual_quality)
        object.__setattr__(self, "semantic_consistency", sc)
        object.__setattr__(self, "perceptual_quality", pq)
        object.__setattr__(self, "overall", math.sqrt(sc * pq))


@dataclass(frozen=True)
class Assessment:
    consistency_score: float
    conflicts: tuple[str, ...] = ()
    omissions: tuple[str, ...] = ()
    hallucinations: tuple[str, ...] = ()
    rationale: str = ""

    def __post_init__(self):
        _check_score("consistency_score", self.consistency_score)
        object.__setattr__(self, "consistency_score", quantize(self.consistency_score))
        for name in ("conflicts", "omissions", "hallucinations"):
            items = tuple(getattr(self, name))
            if any(not isinstance(s, str) for s in items):
                raise InvariantError(name, "entries must be strings")
            object.__setattr__(self, name, items)


@dataclass(frozen=True)
class LoopPolicy:
    mode: LoopMode = LoopMode.THINKING_REFLECTION
    max_reflection_rounds: int = 2
    reroll_attempts: int = 0
    reflection_variant: ReflectionVariant = ReflectionVariant.MULTI_ROUND
    stop_on_success_tag: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", LoopMode(self.mode))
        object.__setattr__(self, "reflection_variant", ReflectionVariant(self.reflection_variant))
        if self.max_reflection_rounds < 0:
            raise InvariantError("max_reflection_rounds", "must be >= 0")
        if self.reroll_attempts < 0:
            raise InvariantError("reroll_attempts", "must be >= 0")
        if self.mode is LoopMode.REROLL and self.max_reflection_rounds != 0:
            raise InvariantError("max_reflection_rounds", "must be 0 in reroll mode")

    @property
    def max_rounds(self) -> int:
        if self.mode is LoopMode.REROLL:
            return self.reroll_attempts + 1
        if self.mode is LoopMode.THINKING_REFLECTION:
            return self.max_reflection_rounds + 1
        return 1


@dataclass(frozen=True)
class RoundRecord:
    index: int
    instruction_used: Instruction
    generated: ImageRef
    target_description: str | None = None
    assessment: Assessment | None = None
    conclusion: ReflectionConclusion | None = None
    vie: VIEScore | None = None
    latency_ms: int = 0
    reasoner_calls: int = 0
    error: str | None = None

    def __post_init__(self):
        if self.index < 0:
            raise InvariantError("index", "must be >= 0")
        if self.latency_ms < 0:
            raise InvariantError("latency_ms", "must be >= 0")

    @property
    def aborted(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class RetryRecord:
    """One failed backend attempt that was retried after ``delay_ms``."""

    round: int | None
    role: str
    attempt: int
    delay_ms: int
    error: str


@dataclass(frozen=True)
class EditSession:
    session_id: uuid.UUID
    reference: ImageRef
    original_instruction: Instruction
    policy: LoopPolicy
    seed: int
    thought: Instruction | None = None
    rounds: tuple[RoundRecord, ...] = ()
    status: SessionStatus = SessionStatus.RUNNING
    chosen_round: int | None = None
    stop_reason: str | None = None
    retries: tuple[RetryRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "status", SessionStatus(self.status))
        object.__setattr__(self, "rounds", tuple(self.rounds))
        # canonical order: think-stage retries first, then by round (stable)
        retries = sorted(self.retries, key=lambda r: -1 if r.round is None else r.round)
        object.__setattr__(self, "retries", tuple(retries))
        for problem in session_problems(self):
            raise InvariantError(*problem)


def session_problems(session: EditSession) -> list[tuple[str, str]]:
    """Walk a session and list every invariant violation as (field path, message).

    Construction already rejects bad values, so this mostly catches objects
    patched after the fact. It re-runs each nested check with a full path.
    """
    problems: list[tuple[str, str]] = []
    if not 0 <= session.seed < 2**64:
        problems.append(("seed", "must fit in 64 unsigned bits"))
    if len(session.rounds) > session.policy.max_rounds:
        problems.append(("rounds", f"{len(session.rounds)} rounds exceed the policy limit {session.policy.max_rounds}"))
    for i, rnd in enumerate(session.rounds):
        if rnd.index != i:
            problems.append((f"rounds[{i}].index", f"expected {i}, got {rnd.index}"))
        for name in ("instruction_used", "generated", "assessment", "conclusion", "vie"):
            value = getattr(rnd, name)
            if value is None:
                continue
            try:
                type(value).__post_init__(_clone(value))
            except InvariantError as exc:
                problems.append((f"rounds[{i}].{name}.{exc.path}", str(exc).split(": ", 1)[1]))
        if rnd.reasoner_calls and rnd.conclusion is None and rnd.error is None:
            problems.append((f"rounds[{i}].reasoner_calls", "reflection calls need a conclusion or an error"))
        if rnd.vie is not None:
            expected = math.sqrt(rnd.vie.semantic_consistency * rnd.vie.perceptual_quality)
            if abs(rnd.vie.overall - expected) > 1e-9:
                problems.append((f"rounds[{i}].vie.overall", "must equal sqrt(semantic_consistency * perceptual_quality)"))
    if session.status is SessionStatus.SUCCEEDED:
        if not session.rounds:
            problems.append(("status", "Succeeded requires at least one round"))
        if session.chosen_round is None:
            problems.append(("chosen_round", "Succeeded requires a selected stopping round"))
    if session.status is SessionStatus.RUNNING and session.stop_reason is not None:
        problems.append(("stop_reason", "a running session has no stop reason"))
    if session.chosen_round is not None and not 0 <= session.chosen_round < len(session.rounds):
        problems.append(("chosen_round", f"{session.chosen_round} is not a recorded round"))
    return problems


def _clone(value):
    """Shallow copy that bypasses __init__, so __post_init__ can re-validate."""
    copy = object.__new__(type(value))
    for name in value.__dataclass_fields__:
        object.__setattr__(copy, name, getattr(value, name))
    return copy

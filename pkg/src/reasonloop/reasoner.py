"""Thinking and reflection as prompt/parse protocols over a reasoner backend.

Prompts come from slot-checked template files. Structured answers are read
from a fenced JSON block; any parse or range failure gets exactly one reprompt
before surfacing as :class:`ProtocolError`.
"""

from __future__ import annotations

import functools
import json
import re
import string
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, TypeVar

from .backends.base import ChatRequest, ImagePart, Message, ProtocolError, ReasonerBackend, TextPart, chat_complete
from .types import (
    Assessment,
    ImageRef,
    Instruction,
    InstructionKind,
    InvariantError,
    ReflectionConclusion,
    ReflectionVariant,
    Tag,
    VIEScore,
)

T = TypeVar("T")

REFLECTION_TEMPLATES = ("think", "describe", "assess", "conclude_multi", "conclude_single", "conclude_dual", "score")
FORGE_TEMPLATES = ("classify", "annotate_complex", "annotate_simple", "review")
REQUIRED_TEMPLATES = REFLECTION_TEMPLATES + FORGE_TEMPLATES


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    slots: tuple[str, ...]
    body: str

    def __post_init__(self):
        used = set()
        for literal, field_name, spec, conversion in string.Formatter().parse(self.body):
            if "{" in literal or "}" in literal:
                raise TemplateError(f"{self.name}: literal braces are not allowed in template bodies")
            if field_name is None:
                continue
            if not field_name.isidentifier() or spec or conversion:
                raise TemplateError(f"{self.name}: placeholder {{{field_name}}} must be a bare slot name")
            if field_name not in self.slots:
                raise TemplateError(f"{self.name}: placeholder {{{field_name}}} is not a declared slot")
            used.add(field_name)
        unused = set(self.slots) - used
        if unused:
            raise TemplateError(f"{self.name}: declared slots never used: {sorted(unused)}")

    @classmethod
    def parse(cls, name: str, text: str) -> "PromptTemplate":
        head, sep, body = text.partition("\n---\n")
        if not sep or not head.startswith("slots:"):
            raise TemplateError(f"{name}: expected a 'slots:' line followed by '---'")
        slots = tuple(s.strip() for s in head[len("slots:") :].split(",") if s.strip())
        return cls(name=name, slots=slots, body=body.strip("\n"))

    def render(self, **values: str) -> str:
        missing = set(self.slots) - set(values)
        if missing:
            raise TemplateError(f"{self.name}: unbound slots {sorted(missing)}")
        return self.body.format(**{k: values[k] for k in self.slots})


@functools.lru_cache(maxsize=1)
def default_templates() -> dict[str, PromptTemplate]:
    return load_templates()


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Load and slot-check every required template. Defaults to the packaged set."""
    root = Path(directory) if directory is not None else Path(str(resources.files("reasonloop") / "templates"))
    out = {}
    for name in REQUIRED_TEMPLATES:
        path = root / f"{name}.txt"
        if not path.is_file():
            raise TemplateError(f"missing template {path}")
        out[name] = PromptTemplate.parse(name, path.read_text(encoding="utf-8"))
    return out


# --- parsers ----------------------------------------------------------------

_MARKER_RE = re.compile(r"<#(Success|Reflection|Failed)>")
_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)
_BULLET_RE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def parse_conclusion(raw: str) -> ReflectionConclusion:
    """Parse reasoning text carrying exactly one ``<#...>`` marker.

    Text before the marker is the reasoning. For ``<#Reflection>`` the text
    after it is the refinement instruction; for the other tags any trailing
    text is appended to the reasoning.
    """
    hits = list(_MARKER_RE.finditer(raw))
    if len(hits) != 1:
        raise ProtocolError(f"expected exactly one conclusion marker, found {len(hits)}", raw)
    m = hits[0]
    tag = Tag.from_wire("#" + m.group(1))
    before = raw[: m.start()].strip()
    after = raw[m.end() :].strip()
    if tag is Tag.REFLECT:
        if not after:
            raise ProtocolError("<#Reflection> must be followed by a refinement instruction", raw)
        reasoning, refinement = before, Instruction(after, InstructionKind.CONCRETE)
    else:
        reasoning, refinement = " ".join(s for s in (before, after) if s), None
    if not reasoning:
        raise ProtocolError("conclusion carries no reasoning text", raw)
    return ReflectionConclusion(tag=tag, reasoning=reasoning, refinement_instruction=refinement)


def extract_json(raw: str) -> dict:
    m = _FENCE_RE.search(raw)
    blob = m.group(1) if m else raw[raw.find("{") : raw.rfind("}") + 1]
    try:
        obj = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"no parseable JSON object ({exc.msg})", raw) from None
    if not isinstance(obj, dict):
        raise ProtocolError("JSON answer must be an object", raw)
    return obj


def _strip_json(raw: str) -> str:
    return _FENCE_RE.sub("", raw).strip()


def _number(obj: dict, key: str, raw: str) -> float:
    value = obj.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ProtocolError(f"{key} must be a number, got {value!r}", raw)
    if not 0 <= value <= 10:
        raise ProtocolError(f"{key}={value} is outside [0, 10]", raw)
    return float(value)


def parse_assessment(raw: str) -> Assessment:
    obj = extract_json(raw)
    score = _number(obj, "consistency_score", raw)
    lists = {}
    for key in ("conflicts", "omissions", "hallucinations"):
        value = obj.get(key, [])
        if not isinstance(value, list) or not all(isinstance(s, str) for s in value):
            raise ProtocolError(f"{key} must be a list of strings", raw)
        lists[key] = tuple(value)
    rationale = obj.get("rationale", "")
    return Assessment(consistency_score=score, rationale=str(rationale), **lists)


def parse_vie(raw: str) -> VIEScore:
    obj = extract_json(raw)
    # any overall the model reports is ignored; it is recomputed from the axes
    return VIEScore(_number(obj, "semantic_consistency", raw), _number(obj, "perceptual_quality", raw))


def compose_steps(text: str) -> str:
    """Fold a bulleted or multi-line answer into one ". "-separated instruction."""
    steps = [_BULLET_RE.sub("", line).strip() for line in text.strip().splitlines()]
    steps = [s for s in steps if s]
    if not steps:
        return ""
    if len(steps) == 1:
        return steps[0]
    joined = ". ".join(s.rstrip(".") for s in steps)
    return joined + "." if steps[-1].endswith(".") else joined


def _norm(text: str) -> str:
    return " ".join(text.split()).rstrip(".").casefold()


def _one_word(raw: str, choices: tuple[str, ...]) -> str:
    word = raw.strip().strip("\"'`.!").casefold()
    if word not in choices:
        raise ProtocolError(f"expected one of {choices}, got {raw.strip()[:40]!r}", raw)
    return word


def format_assessment(a: Assessment) -> str:
    def items(xs):
        return "; ".join(xs) if xs else "none"

    return (
        f"consistency score: {a.consistency_score:g}/10\n"
        f"conflicts: {items(a.conflicts)}\n"
        f"omissions: {items(a.omissions)}\n"
        f"hallucinations: {items(a.hallucinations)}\n"
        f"rationale: {a.rationale or 'none'}"
    )


class Label(str, Enum):
    SIMPLE = "simple"
    COMPLEX = "complex"


# --- reasoner ---------------------------------------------------------------


class Reasoner:
    """Stateless protocol layer over a :class:`ReasonerBackend`."""

    def __init__(
        self,
        backend: ReasonerBackend,
        templates: dict[str, PromptTemplate] | None = None,
        temperature: float = 0.0,
        max_tokens: int = 1024,
        seed: int | None = None,
    ):
        self.backend = backend
        self.templates = templates if templates is not None else default_templates()
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.seed = seed

    def request(self, purpose: str, images: list[ImageRef], **slots: str) -> ChatRequest:
        text = self.templates[purpose].render(**slots)
        parts = [ImagePart(img) for img in images] + [TextPart(text)]
        return ChatRequest(
            messages=(Message("user", parts),),
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            seed=self.seed,
            purpose=purpose,
            slots=tuple(sorted(slots.items())),
        )

    def ask(self, request: ChatRequest, parse: Callable[[str], T]) -> T:
        """Send ``request`` and parse the answer, reprompting once on failure."""
        raw = chat_complete(self.backend, request).text
        try:
            return parse(raw)
        except (ProtocolError, InvariantError) as first:
            retry = ChatRequest(
                messages=request.messages
                + (
                    Message("assistant", (TextPart(raw),)),
                    Message("user", (TextPart(f"Your previous reply could not be used: {first}. "
                                              "Answer again in exactly the requested format."),)),
                ),
                temperature=request.temperature,
                max_tokens=request.max_tokens,
                seed=request.seed,
                purpose=request.purpose,
                slots=request.slots + (("reprompt", "1"),),
            )
            raw = chat_complete(self.backend, retry).text
            try:
                return parse(raw)
            except (ProtocolError, InvariantError) as second:
                raise ProtocolError(f"{request.purpose}: {second} (after one reprompt)", raw) from None

    # thinking

    def think(self, reference: ImageRef, instruction: Instruction) -> Instruction:
        def parse(raw: str) -> Instruction:
            text = compose_steps(raw)
            if not text:
                raise ProtocolError("empty thinking output", raw)
            if _norm(text) == _norm(instruction.text):
                return Instruction(instruction.text, InstructionKind.PASSTHROUGH)
            return Instruction(text, InstructionKind.CONCRETE)

        return self.ask(self.request("think", [reference], instruction=instruction.text), parse)

    # reflection stages

    def describe_target(self, reference: ImageRef, instruction: Instruction) -> str:
        def parse(raw: str) -> str:
            if not raw.strip():
                raise ProtocolError("empty target description", raw)
            return raw.strip()

        return self.ask(self.request("describe", [reference], instruction=instruction.text), parse)

    def assess_result(self, result: ImageRef, target_description: str) -> Assessment:
        if not target_description.strip():
            raise ValueError("target_description must be non-empty")
        return self.ask(self.request("assess", [result], target_description=target_description), parse_assessment)

    def conclude(
        self,
        reference: ImageRef,
        result: ImageRef,
        instruction: Instruction,
        assessment: Assessment | None = None,
        target_description: str | None = None,
        variant: ReflectionVariant = ReflectionVariant.MULTI_ROUND,
    ) -> ReflectionConclusion:
        variant = ReflectionVariant(variant)
        if variant is ReflectionVariant.MULTI_ROUND:
            if assessment is None or target_description is None:
                raise ValueError("multi_round conclude needs the assessment and target description")
            req = self.request(
                "conclude_multi",
                [reference, result],
                instruction=instruction.text,
                target_description=target_description,
                assessment=format_assessment(assessment),
            )
        elif variant is ReflectionVariant.DUAL_IMAGE:
            req = self.request("conclude_dual", [reference, result], instruction=instruction.text)
        else:
            return self._conclude_single(result, instruction, target_description or "")[1]
        return self.ask(req, parse_conclusion)

    def _conclude_single(
        self, result: ImageRef, instruction: Instruction, target_description: str
    ) -> tuple[Assessment | None, ReflectionConclusion]:
        def parse(raw: str):
            assessment = parse_assessment(raw) if _FENCE_RE.search(raw) else None
            return assessment, parse_conclusion(_strip_json(raw))

        req = self.request(
            "conclude_single", [result], instruction=instruction.text, target_description=target_description
        )
        return self.ask(req, parse)

    def reflect(
        self,
        variant: ReflectionVariant,
        reference: ImageRef,
        result: ImageRef,
        instruction: Instruction,
    ) -> tuple[str | None, Assessment | None, ReflectionConclusion]:
        """Run one reflection with the chosen pipeline.

        ``multi_round``: describe (reference only), assess (result only), then
        conclude with both images. ``single_image``: describe, then one combined
        assess+conclude call that sees only the result. ``dual_image``: a single
        call with both images.
        """
        variant = ReflectionVariant(variant)
        if variant is ReflectionVariant.DUAL_IMAGE:
            return None, None, self.conclude(reference, result, instruction, variant=variant)
        description = self.describe_target(reference, instruction)
        if variant is ReflectionVariant.SINGLE_IMAGE:
            assessment, conclusion = self._conclude_single(result, instruction, description)
            return description, assessment, conclusion
        assessment = self.assess_result(result, description)
        conclusion = self.conclude(reference, result, instruction, assessment, description, variant)
        return description, assessment, conclusion

    def score_vie(self, reference: ImageRef, result: ImageRef, instruction: Instruction) -> VIEScore:
        return self.ask(self.request("score", [reference, result], instruction=instruction.text), parse_vie)

    # dataset annotation

    def classify(self, instruction: Instruction) -> Label:
        return self.ask(
            self.request("classify", [], instruction=instruction.text),
            lambda raw: Label(_one_word(raw, ("simple", "complex"))),
        )

    def annotate(self, instruction: Instruction, label: Label) -> str:
        purpose = "annotate_complex" if Label(label) is Label.COMPLEX else "annotate_simple"

        def parse(raw: str) -> str:
            text = compose_steps(raw) if purpose == "annotate_complex" else " ".join(raw.split())
            if not text:
                raise ProtocolError("empty annotation", raw)
            return text

        return self.ask(self.request(purpose, [], instruction=instruction.text), parse)

    def review(self, abstract: str, concrete: str) -> bool:
        verdict = self.ask(
            self.request("review", [], abstract=abstract, concrete=concrete),
            lambda raw: _one_word(raw, ("accept", "reject")),
        )
        return verdict == "accept"

"""JSONL event traces for edit sessions.

A trace is one header line followed by one line per event::

    {"type":"header","version":"reasonloop/1","session_id":...,"policy":{...},...}
    {"type":"think","thought":{...}|null}
    {"type":"edit","round":0,"instruction":{...},"generated":{...},"latency_ms":...}
    {"type":"describe","round":0,"target_description":"..."}
    {"type":"assess","round":0,"assessment":{...}}
    {"type":"conclude","round":0,"conclusion":{"tag":"#Reflection",...},"reasoner_calls":3}
    {"type":"score","round":0,"vie":{...}}
    {"type":"abort","round":1,"error":"..."}
    {"type":"retry","round":1,"role":"generator","attempt":1,"delay_ms":250,"error":"..."}
    {"type":"stop","status":"Succeeded","chosen_round":1,"reason":"success_tag"}

Retry events for a round precede that round's ``edit`` line (``round: null``
means the think stage). Field order is fixed, so equal sessions produce equal
bytes.
"""

from __future__ import annotations

import json
import uuid
from typing import Any, Iterable

from .types import (
    Assessment,
    EditSession,
    ImageRef,
    Instruction,
    InvariantError,
    LoopPolicy,
    ReflectionConclusion,
    RetryRecord,
    RoundRecord,
    SessionStatus,
    Tag,
    VIEScore,
    quantize,
    session_problems,
)

TRACE_VERSION = "reasonloop/1"

EVENT_TYPES = ("header", "think", "retry", "edit", "describe", "assess", "conclude", "score", "abort", "stop")


class TraceError(ValueError):
    """Base class for trace read/write failures."""


class TraceParseError(TraceError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class UnsupportedVersionError(TraceError):
    def __init__(self, version: Any):
        self.version = version
        super().__init__(f"unsupported trace version {version!r} (expected {TRACE_VERSION!r})")


# --- encoding -------------------------------------------------------------


def _image(ref: ImageRef) -> dict:
    return {"uri": ref.uri, "media_type": ref.media_type.value, "sha256": ref.sha256}


def _instruction(instr: Instruction | None) -> dict | None:
    if instr is None:
        return None
    return {"text": instr.text, "kind": instr.kind.value}


def _policy(policy: LoopPolicy) -> dict:
    return {
        "mode": policy.mode.value,
        "max_reflection_rounds": policy.max_reflection_rounds,
        "reroll_attempts": policy.reroll_attempts,
        "reflection_variant": policy.reflection_variant.value,
        "stop_on_success_tag": policy.stop_on_success_tag,
    }


def _assessment(a: Assessment) -> dict:
    return {
        "consistency_score": quantize(a.consistency_score),
        "conflicts": list(a.conflicts),
        "omissions": list(a.omissions),
        "hallucinations": list(a.hallucinations),
        "rationale": a.rationale,
    }


def _conclusion(c: ReflectionConclusion) -> dict:
    return {
        "tag": c.tag.wire,
        "reasoning": c.reasoning,
        "refinement_instruction": _instruction(c.refinement_instruction),
    }


def _vie(v: VIEScore) -> dict:
    return {
        "semantic_consistency": quantize(v.semantic_consistency),
        "perceptual_quality": quantize(v.perceptual_quality),
        "overall": quantize(v.overall),
    }


def _retry(r: RetryRecord) -> dict:
    return {"type": "retry", "round": r.round, "role": r.role, "attempt": r.attempt, "delay_ms": r.delay_ms, "error": r.error}


def session_events(session: EditSession) -> list[dict]:
    """The ordered event dicts that :func:`serialize_trace` writes."""
    problems = session_problems(session)
    if problems:
        raise InvariantError(*problems[0])
    events: list[dict] = [
        {
            "type": "header",
            "version": TRACE_VERSION,
            "session_id": str(session.session_id),
            "policy": _policy(session.policy),
            "seed": session.seed,
            "reference": _image(session.reference),
            "original_instruction": _instruction(session.original_instruction),
        }
    ]
    retries_by_round: dict[int | None, list[RetryRecord]] = {}
    for r in session.retries:
        retries_by_round.setdefault(r.round, []).append(r)
    events.extend(_retry(r) for r in retries_by_round.pop(None, []))
    events.append({"type": "think", "thought": _instruction(session.thought)})
    for rnd in session.rounds:
        i = rnd.index
        events.extend(_retry(r) for r in retries_by_round.pop(i, []))
        events.append(
            {
                "type": "edit",
                "round": i,
                "instruction": _instruction(rnd.instruction_used),
                "generated": _image(rnd.generated),
                "latency_ms": rnd.latency_ms,
            }
        )
        if rnd.target_description is not None:
            events.append({"type": "describe", "round": i, "target_description": rnd.target_description})
        if rnd.assessment is not None:
            events.append({"type": "assess", "round": i, "assessment": _assessment(rnd.assessment)})
        if rnd.conclusion is not None:
            events.append(
                {"type": "conclude", "round": i, "conclusion": _conclusion(rnd.conclusion), "reasoner_calls": rnd.reasoner_calls}
            )
        if rnd.vie is not None:
            events.append({"type": "score", "round": i, "vie": _vie(rnd.vie)})
        if rnd.error is not None:
            abort = {"type": "abort", "round": i, "error": rnd.error}
            if rnd.conclusion is None:
                abort["reasoner_calls"] = rnd.reasoner_calls
            events.append(abort)
    # retries that belong to a round which never produced an image
    for key in sorted(k for k in retries_by_round if k is not None):
        events.extend(_retry(r) for r in retries_by_round[key])
    if session.status is not SessionStatus.RUNNING:
        events.append(
            {"type": "stop", "status": session.status.value, "chosen_round": session.chosen_round, "reason": session.stop_reason}
        )
    return events


def dumps_event(event: dict) -> str:
    return json.dumps(event, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def serialize_trace(session: EditSession) -> bytes:
    return "".join(dumps_event(e) + "\n" for e in session_events(session)).encode("utf-8")


# --- decoding -------------------------------------------------------------


def _req(obj: dict, key: str, line: int):
    if key not in obj:
        raise TraceParseError(line, f"missing field {key!r}")
    return obj[key]


def _read_image(d: dict) -> ImageRef:
    return ImageRef(uri=d["uri"], media_type=d["media_type"], sha256=d["sha256"])


def _read_instruction(d: dict | None) -> Instruction | None:
    return None if d is None else Instruction(text=d["text"], kind=d["kind"])


def _read_conclusion(d: dict) -> ReflectionConclusion:
    return ReflectionConclusion(
        tag=Tag.from_wire(d["tag"]),
        reasoning=d["reasoning"],
        refinement_instruction=_read_instruction(d.get("refinement_instruction")),
    )


def _read_vie(d: dict, line: int) -> VIEScore:
    vie = VIEScore(d["semantic_consistency"], d["perceptual_quality"])
    if "overall" in d and abs(vie.overall - d["overall"]) > 0.5 * 10**-4 + 1e-12:
        raise TraceParseError(line, f"stored overall {d['overall']} disagrees with the axis scores")
    return vie


def _read_assessment(d: dict) -> Assessment:
    return Assessment(
        consistency_score=d["consistency_score"],
        conflicts=tuple(d.get("conflicts", ())),
        omissions=tuple(d.get("omissions", ())),
        hallucinations=tuple(d.get("hallucinations", ())),
        rationale=d.get("rationale", ""),
    )


def _lines(data: bytes | str | Iterable[str]) -> list[str]:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    if isinstance(data, str):
        # split on "\n" only: str.splitlines would also break on U+0085 or U+2028 inside string values
        lines = data.split("\n")
        return lines[:-1] if lines and lines[-1] == "" else lines
    return [line.rstrip("\r\n") for line in data]


def parse_trace(data: bytes | str | Iterable[str]) -> EditSession:
    """Rebuild an :class:`EditSession` from JSONL produced by :func:`serialize_trace`."""
    lines = _lines(data)
    events: list[tuple[int, dict]] = []
    for n, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TraceParseError(n, f"malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict) or "type" not in obj:
            raise TraceParseError(n, "event must be an object with a 'type' field")
        if obj["type"] not in EVENT_TYPES:
            raise TraceParseError(n, f"unknown event type {obj['type']!r}")
        events.append((n, obj))
    if not events or events[0][1]["type"] != "header":
        raise TraceParseError(events[0][0] if events else 1, "trace must start with a header line")

    n, header = events[0]
    if header.get("version") != TRACE_VERSION:
        raise UnsupportedVersionError(header.get("version"))

    try:
        p = _req(header, "policy", n)
        policy = LoopPolicy(**p)
        fields: dict[str, Any] = {
            "session_id": uuid.UUID(_req(header, "session_id", n)),
            "reference": _read_image(_req(header, "reference", n)),
            "original_instruction": _read_instruction(_req(header, "original_instruction", n)),
            "policy": policy,
            "seed": int(_req(header, "seed", n)),
        }
    except TraceParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceParseError(n, f"bad header: {exc}") from None

    rounds: list[dict[str, Any]] = []
    retries: list[RetryRecord] = []
    saw_think = False
    for n, ev in events[1:]:
        kind = ev["type"]
        try:
            if kind == "header":
                raise TraceParseError(n, "duplicate header")
            if kind == "think":
                fields["thought"] = _read_instruction(ev.get("thought"))
                saw_think = True
            elif kind == "retry":
                retries.append(RetryRecord(ev["round"], ev["role"], ev["attempt"], ev["delay_ms"], ev["error"]))
            elif kind == "edit":
                if ev["round"] != len(rounds):
                    raise TraceParseError(n, f"round {ev['round']} out of order (expected {len(rounds)})")
                rounds.append(
                    {
                        "index": ev["round"],
                        "instruction_used": _read_instruction(ev["instruction"]),
                        "generated": _read_image(ev["generated"]),
                        "latency_ms": ev.get("latency_ms", 0),
                    }
                )
            elif kind == "stop":
                fields["status"] = SessionStatus(ev["status"])
                fields["chosen_round"] = ev.get("chosen_round")
                fields["stop_reason"] = ev.get("reason")
            else:
                if not rounds or ev.get("round") != rounds[-1]["index"]:
                    raise TraceParseError(n, f"{kind} event does not follow its edit event")
                cur = rounds[-1]
                if kind == "describe":
                    cur["target_description"] = ev["target_description"]
                elif kind == "assess":
                    cur["assessment"] = _read_assessment(ev["assessment"])
                elif kind == "conclude":
                    cur["conclusion"] = _read_conclusion(ev["conclusion"])
                    cur["reasoner_calls"] = ev.get("reasoner_calls", 0)
                elif kind == "score":
                    cur["vie"] = _read_vie(ev["vie"], n)
                elif kind == "abort":
                    cur["error"] = ev["error"]
                    if "reasoner_calls" in ev:
                        cur["reasoner_calls"] = ev["reasoner_calls"]
        except TraceParseError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceParseError(n, f"bad {kind} event: {exc}") from None
    if not saw_think:
        raise TraceParseError(len(lines), "trace has no think event")
    try:
        return EditSession(rounds=tuple(RoundRecord(**r) for r in rounds), retries=tuple(retries), **fields)
    except InvariantError as exc:
        raise TraceParseError(len(lines), f"reconstructed session is invalid: {exc}") from None

"""Session state machine: plan, edit, review, refine.

One session runs strictly sequentially. Per mode:

``base``
    edit once with the user's instruction; no reasoner calls.
``thinking``
    think, then edit once with the thought.
``thinking_reflection``
    think, edit, then up to ``max_reflection_rounds`` times: reflect on the
    latest image and, on ``Reflect``, edit *that image* with the refinement.
    Every image is scored; the returned image is the best-scored round.
``reroll``
    think, then ``reroll_attempts + 1`` independent edits of the reference
    with fresh seeds; keep the best-scored one.

The thought replaces the user's instruction as generator conditioning. Scoring
and reflection always judge against the user's original instruction.
"""

from __future__ import annotations

import hashlib
import itertools
import random
import uuid
from dataclasses import dataclass
from typing import Sequence

from .backends.base import (
    DEFAULT_GUIDANCE,
    DEFAULT_STEPS,
    BackendError,
    ContentPolicyError,
    EditRequest,
    MeteredGenerator,
    MeteredReasoner,
    PreconditionError,
    ProtocolError,
)
from .reasoner import PromptTemplate, Reasoner
from .types import (
    EditSession,
    ImageRef,
    Instruction,
    InvariantError,
    LoopMode,
    LoopPolicy,
    RetryRecord,
    RoundRecord,
    SessionStatus,
    Tag,
    VIEScore,
)

_RECOVERABLE = (BackendError, ProtocolError, PreconditionError)


@dataclass(frozen=True)
class SessionOutcome:
    final_image: ImageRef
    chosen_round: int
    status: SessionStatus
    total_latency_ms: int
    rounds_executed: int

    def __post_init__(self):
        if not 0 <= self.chosen_round < self.rounds_executed:
            raise InvariantError("chosen_round", f"{self.chosen_round} not below rounds_executed={self.rounds_executed}")


def derive_seed(seed: int, *labels) -> int:
    """A 64-bit child seed that depends only on ``seed`` and the labels."""
    blob = "|".join([str(seed), *map(str, labels)]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


def session_uuid(seed: int) -> uuid.UUID:
    return uuid.UUID(int=random.Random(derive_seed(seed, "session-id")).getrandbits(128), version=4)


def select_stopping_round(scored: Sequence[tuple[int, VIEScore | float]]) -> int:
    """Round index with the highest overall score; ties go to the earliest round."""
    if not scored:
        raise ValueError("select_stopping_round needs at least one scored round")
    best_idx, best = None, None
    for idx, score in sorted(scored, key=lambda p: p[0]):
        value = score.overall if isinstance(score, VIEScore) else float(score)
        if best is None or value > best:
            best_idx, best = idx, value
    return best_idx


def cumulative_best(scores: Sequence[float]) -> list[float]:
    if not scores:
        raise ValueError("cumulative_best needs at least one score")
    return list(itertools.accumulate(scores, max))


class _Run:
    """Mutable bookkeeping for one session; frozen into EditSession at the end."""

    def __init__(self, reference, instruction, policy, backends, seed, templates, session_id, guidance, steps):
        reasoner_backend, generator_backend = _unpack(backends)
        self.reference = reference
        self.instruction = instruction
        self.policy = policy
        self.seed = seed
        self.guidance = guidance
        self.steps = steps
        self.session_id = session_id or session_uuid(seed)
        self.rmeter = MeteredReasoner(reasoner_backend)
        self.gmeter = MeteredGenerator(generator_backend)
        self.reasoner = Reasoner(self.rmeter, templates, seed=derive_seed(seed, "reasoner"))
        self.thought: Instruction | None = None
        self.rounds: list[RoundRecord] = []
        self.retries: list[RetryRecord] = []

    def drain_retries(self, round_index: int | None) -> None:
        for meter in (self.rmeter, self.gmeter):
            for r in meter.retries:
                self.retries.append(RetryRecord(round_index, r.role, r.attempt, r.delay_ms, r.error))
            meter.retries.clear()

    def latency(self) -> int:
        return self.rmeter.latency_ms + self.gmeter.latency_ms

    def edit(self, source: ImageRef, instruction: Instruction, index: int) -> ImageRef:
        request = EditRequest(
            reference=source,
            instruction=instruction,
            seed=derive_seed(self.seed, "edit", index),
            guidance=self.guidance,
            steps=self.steps,
        )
        try:
            return self.gmeter.edit(request).image
        finally:
            self.drain_retries(index)

    def finish(self, status: SessionStatus, reason: str) -> tuple[EditSession, SessionOutcome | None]:
        scored = [(r.index, r.vie) for r in self.rounds if r.vie is not None]
        chosen = None
        if scored:
            chosen = select_stopping_round(scored)
        elif self.rounds and self.policy.mode in (LoopMode.BASE, LoopMode.THINKING):
            chosen = len(self.rounds) - 1
        if status is SessionStatus.SUCCEEDED and chosen is None:
            status, reason = SessionStatus.STOPPED, f"{reason}; no round could be selected"
        session = EditSession(
            session_id=self.session_id,
            reference=self.reference,
            original_instruction=self.instruction,
            policy=self.policy,
            seed=self.seed,
            thought=self.thought,
            rounds=tuple(self.rounds),
            status=status,
            chosen_round=chosen,
            stop_reason=reason,
            retries=tuple(self.retries),
        )
        outcome = None
        if chosen is not None:
            outcome = SessionOutcome(
                final_image=self.rounds[chosen].generated,
                chosen_round=chosen,
                status=status,
                total_latency_ms=self.latency(),
                rounds_executed=len(self.rounds),
            )
        return session, outcome


def _unpack(backends):
    if isinstance(backends, tuple):
        return backends
    return backends.reasoner, backends.generator


def _error(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


def _edit_failed(run: _Run, exc: BaseException, index: int):
    # a refusal is terminal and counts as a Failed conclusion, not a transport fault
    if isinstance(exc, ContentPolicyError):
        return run.finish(SessionStatus.FAILED, f"edit refused in round {index}: {_error(exc)}")
    return run.finish(SessionStatus.STOPPED, f"edit failed in round {index}: {_error(exc)}")


def run_session(
    reference: ImageRef,
    instruction: Instruction,
    policy: LoopPolicy,
    backends,
    *,
    seed: int = 0,
    templates: dict[str, PromptTemplate] | None = None,
    session_id: uuid.UUID | None = None,
    guidance: float = DEFAULT_GUIDANCE,
    steps: int = DEFAULT_STEPS,
) -> tuple[EditSession, SessionOutcome | None]:
    """Run one edit session to completion.

    ``backends`` is either a ``(reasoner, generator)`` tuple or an object with
    ``reasoner`` and ``generator`` attributes. Backend or protocol failures
    end the session with status ``Stopped``; the best round scored so far is
    still returned in the outcome, which is ``None`` only when no round can
    be selected.
    """
    run = _Run(reference, instruction, policy, backends, seed, templates, session_id, guidance, steps)
    mode = policy.mode

    if mode is not LoopMode.BASE:
        try:
            run.thought = run.reasoner.think(reference, instruction)
        except _RECOVERABLE as exc:
            run.drain_retries(None)
            return run.finish(SessionStatus.STOPPED, f"think failed: {_error(exc)}")
        run.drain_retries(None)
    conditioning = run.thought or instruction

    if mode in (LoopMode.BASE, LoopMode.THINKING):
        try:
            image = run.edit(reference, conditioning, 0)
        except _RECOVERABLE as exc:
            return _edit_failed(run, exc, 0)
        run.rounds.append(RoundRecord(0, conditioning, image, latency_ms=run.latency()))
        return run.finish(SessionStatus.SUCCEEDED, "single_pass")

    if mode is LoopMode.REROLL:
        for attempt in range(policy.reroll_attempts + 1):
            before = run.latency()
            try:
                image = run.edit(reference, conditioning, attempt)
            except _RECOVERABLE as exc:
                return _edit_failed(run, exc, attempt)
            vie, error = None, None
            try:
                vie = run.reasoner.score_vie(reference, image, instruction)
            except _RECOVERABLE as exc:
                error = _error(exc)
            run.drain_retries(attempt)
            run.rounds.append(
                RoundRecord(attempt, conditioning, image, vie=vie, latency_ms=run.latency() - before, error=error)
            )
            if error:
                return run.finish(SessionStatus.STOPPED, f"round {attempt} aborted: {error}")
        return run.finish(SessionStatus.SUCCEEDED, "reroll_complete")

    source, used = reference, conditioning
    for index in range(policy.max_reflection_rounds + 1):
        before = run.latency()
        try:
            image = run.edit(source, used, index)
        except _RECOVERABLE as exc:
            return _edit_failed(run, exc, index)
        vie = description = assessment = conclusion = error = None
        calls = 0
        try:
            vie = run.reasoner.score_vie(reference, image, instruction)
            if index < policy.max_reflection_rounds:
                calls_before = run.rmeter.calls
                try:
                    description, assessment, conclusion = run.reasoner.reflect(
                        policy.reflection_variant, reference, image, instruction
                    )
                finally:
                    calls = run.rmeter.calls - calls_before
        except _RECOVERABLE as exc:
            error = _error(exc)
        run.drain_retries(index)
        run.rounds.append(
            RoundRecord(
                index,
                used,
                image,
                target_description=description,
                assessment=assessment,
                conclusion=conclusion,
                vie=vie,
                latency_ms=run.latency() - before,
                reasoner_calls=calls,
                error=error,
            )
        )
        if error:
            return run.finish(SessionStatus.STOPPED, f"round {index} aborted: {error}")
        if conclusion is None:
            return run.finish(SessionStatus.SUCCEEDED, "budget_exhausted")
        if conclusion.tag is Tag.FAILED:
            return run.finish(SessionStatus.FAILED, "failed_tag")
        if conclusion.tag is Tag.SUCCESS:
            if policy.stop_on_success_tag:
                return run.finish(SessionStatus.SUCCEEDED, "success_tag")
            # tag ignored: spend the budget on a fresh edit of the reference
            source, used = reference, conditioning
        else:
            source, used = image, conclusion.refinement_instruction
    raise AssertionError("unreachable: the final round never reflects")

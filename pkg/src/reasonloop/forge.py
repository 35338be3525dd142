"""Dataset pipelines: thinking pairs and reflection triples.

Thinking pairs: classify each raw instruction as simple or complex, annotate
in the direction the label implies (complex -> decomposed concrete steps,
simple -> an invented abstract paraphrase), route a share of the simple ones
through unchanged, review, then mix the buckets to a target composition.

Reflection triples: edit each source with a round-robin editor, reflect on the
result, give ``Reflect`` items one corrective edit, screen through a review
queue, down-sample to the target class ratio, and finally attach VIEScores.
"""

from __future__ import annotations

import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

from .backends.base import BackendError, EditRequest, PreconditionError, ProtocolError
from .images import ImageStore, make_png
from .loop import derive_seed
from .reasoner import Label, Reasoner, _norm
from .trace import _image, _instruction, _vie
from .types import (
    ImageRef,
    Instruction,
    InstructionKind,
    InvariantError,
    ReflectionVariant,
    Tag,
    VIEScore,
)

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class Provenance(str, Enum):
    SIMPLIFIED = "simplified_from_complex"
    ABSTRACTED = "abstracted_from_simple"
    PASSTHROUGH = "passthrough"


class ReviewState(str, Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    PENDING = "pending"


class TripleOutcome(str, Enum):
    SUCCESS = "success"
    REFLECTION = "reflection"
    FAILED = "failed"


class ShortfallError(ValueError):
    def __init__(self, deficits: dict[str, int], available: dict[str, int]):
        self.deficits = deficits
        self.available = available
        parts = ", ".join(f"{k} short by {v}" for k, v in deficits.items())
        super().__init__(f"composition shortfall: {parts} (available: {available})")


def largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    """Split ``total`` proportionally to ``weights``; the parts sum to ``total`` exactly.

    Leftover units go to the largest fractional remainders, ties to the
    earlier bucket.
    """
    if total < 0:
        raise ValueError("total must be >= 0")
    if not weights or any(w < 0 for w in weights) or sum(weights) <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    s = float(sum(weights))
    quotas = [total * w / s for w in weights]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


# --- types ------------------------------------------------------------------


@dataclass(frozen=True)
class ThinkingPair:
    id: str
    abstract_instruction: Instruction
    concrete_instruction: Instruction
    provenance: Provenance
    review: ReviewState = ReviewState.PENDING

    def __post_init__(self):
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        object.__setattr__(self, "review", ReviewState(self.review))
        if self.provenance is Provenance.PASSTHROUGH and (
            self.abstract_instruction.text != self.concrete_instruction.text
        ):
            raise InvariantError("concrete_instruction", "passthrough pairs need abstract == concrete")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "provenance": self.provenance.value,
            "abstract_instruction": self.abstract_instruction.text,
            "concrete_instruction": self.concrete_instruction.text,
            "review": self.review.value,
        }


@dataclass(frozen=True)
class ReflectionTriple:
    id: str
    input: ImageRef
    edit_instruction: Instruction
    generated: ImageRef
    reflection_instruction: Instruction | None
    corrected: ImageRef
    outcome: TripleOutcome
    vie: VIEScore | None = None
    editor: str = ""

    def __post_init__(self):
        object.__setattr__(self, "outcome", TripleOutcome(self.outcome))
        if self.outcome is TripleOutcome.SUCCESS and self.generated.sha256 != self.corrected.sha256:
            raise InvariantError("corrected", "success triples need corrected == generated")
        if self.outcome is TripleOutcome.REFLECTION and self.reflection_instruction is None:
            raise InvariantError("reflection_instruction", "reflection triples need a reflection instruction")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "outcome": self.outcome.value,
            "editor": self.editor,
            "input": _image(self.input),
            "edit_instruction": _instruction(self.edit_instruction),
            "generated": _image(self.generated),
            "reflection_instruction": _instruction(self.reflection_instruction),
            "corrected": _image(self.corrected),
            "vie": _vie(self.vie) if self.vie is not None else None,
        }


THINKING_BUCKETS = tuple(Provenance)
TRIPLE_CLASSES = tuple(TripleOutcome)


@dataclass(frozen=True)
class CompositionTarget:
    total: int = 400
    fraction_simplified: float = 0.31
    fraction_abstracted: float = 0.44
    fraction_passthrough: float = 0.25
    triple_ratio: tuple[float, float, float] = (3.0, 1.0, 1.0)

    def __post_init__(self):
        if self.total < 0:
            raise InvariantError("total", "must be >= 0")
        fractions = self.fractions
        if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise InvariantError("fractions", f"must be non-negative and sum to 1, got {fractions}")
        if len(self.triple_ratio) != 3 or any(w <= 0 for w in self.triple_ratio):
            raise InvariantError("triple_ratio", "needs three positive weights")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.fraction_simplified, self.fraction_abstracted, self.fraction_passthrough)

    def thinking_allocation(self) -> dict[Provenance, int]:
        return dict(zip(THINKING_BUCKETS, largest_remainder(self.total, self.fractions)))


# --- single-item operations -------------------------------------------------


def classify_instruction(instruction: Instruction, annotator: Reasoner) -> Label:
    return annotator.classify(instruction)


def annotate_pair(instruction: Instruction, label: Label, annotator: Reasoner, id: str = "") -> ThinkingPair:
    label = Label(label)
    text = annotator.annotate(instruction, label)
    if label is Label.COMPLEX:
        return ThinkingPair(
            id,
            Instruction(instruction.text, InstructionKind.ABSTRACT),
            Instruction(text, InstructionKind.CONCRETE),
            Provenance.SIMPLIFIED,
        )
    return ThinkingPair(
        id,
        Instruction(text, InstructionKind.ABSTRACT),
        Instruction(instruction.text, InstructionKind.CONCRETE),
        Provenance.ABSTRACTED,
    )


def passthrough_pair(instruction: Instruction, id: str = "") -> ThinkingPair:
    same = Instruction(instruction.text, InstructionKind.PASSTHROUGH)
    return ThinkingPair(id, same, same, Provenance.PASSTHROUGH)


def local_review_problem(pair: ThinkingPair) -> str | None:
    """Checks that need no model; a non-None answer rejects the pair outright."""
    concrete = pair.concrete_instruction.text
    if not any(ch.isalpha() for ch in concrete):
        return "concrete instruction is empty"
    if pair.provenance is not Provenance.PASSTHROUGH and _norm(concrete) == _norm(pair.abstract_instruction.text):
        return "rewritten pair is identical to its source"
    return None


def review_pair(pair: ThinkingPair, reviewer: Reasoner | None) -> ReviewState:
    if pair.review is not ReviewState.PENDING:
        raise PreconditionError(f"pair {pair.id!r} was already reviewed ({pair.review.value})")
    if local_review_problem(pair):
        return ReviewState.REJECTED
    ok = reviewer.review(pair.abstract_instruction.text, pair.concrete_instruction.text)
    return ReviewState.ACCEPTED if ok else ReviewState.REJECTED


# --- thinking pipeline ------------------------------------------------------


@dataclass(frozen=True)
class PoolItem:
    id: str
    instruction: str
    image: str | None = None


@dataclass
class ThinkingResult:
    pairs: list[ThinkingPair]
    rejects: list[dict] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)


def read_pool(path: str | Path) -> list[PoolItem]:
    """Read a JSONL pool of ``{id, instruction}`` or ``{id, image, instruction}`` rows."""
    items, seen = [], set()
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            item = PoolItem(str(row["id"]), str(row["instruction"]), row.get("image"))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{n}: bad pool row ({exc})") from None
        if item.id in seen:
            raise ValueError(f"{path}:{n}: duplicate id {item.id!r}")
        seen.add(item.id)
        items.append(item)
    return items


def ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """``map`` with bounded threads; results come back in input order."""
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _routes_to_passthrough(item_id: str, seed: int, share: float) -> bool:
    return random.Random(derive_seed(seed, "passthrough", item_id)).random() < share


def _thinking_item(item: PoolItem, reasoner: Reasoner, seed: int, passthrough_share: float):
    if not item.instruction.strip():
        return None, {"id": item.id, "stage": "input", "error": "empty instruction"}, None
    instruction = Instruction(item.instruction.strip(), InstructionKind.ABSTRACT)
    stage = "classify"
    try:
        label = classify_instruction(instruction, reasoner)
        if label is Label.SIMPLE and _routes_to_passthrough(item.id, seed, passthrough_share):
            pair = passthrough_pair(instruction, item.id)
        else:
            stage = "annotate"
            pair = annotate_pair(instruction, label, reasoner, item.id)
        stage = "review"
        problem = local_review_problem(pair)
        verdict = review_pair(pair, reasoner)
    except (ProtocolError, BackendError, InvariantError) as exc:
        return None, {"id": item.id, "stage": stage, "error": f"{type(exc).__name__}: {exc}"}, None
    pair = ThinkingPair(pair.id, pair.abstract_instruction, pair.concrete_instruction, pair.provenance, verdict)
    reject = None
    if verdict is ReviewState.REJECTED:
        reject = {"id": item.id, "stage": "review", "error": problem or "rejected by reviewer",
                  "provenance": pair.provenance.value}
    return pair, reject, label


def forge_thinking_pairs(
    pool: Sequence[PoolItem],
    reasoner: Reasoner,
    target: CompositionTarget = CompositionTarget(),
    seed: int = 0,
    workers: int = 1,
) -> ThinkingResult:
    """Classify, annotate and review every pool item; accepted and rejected pairs are both returned."""
    f_simpl, f_abs, f_pass = target.fractions
    share = f_pass / (f_abs + f_pass) if f_abs + f_pass > 0 else 0.0
    out = ordered_map(lambda it: _thinking_item(it, reasoner, seed, share), pool, workers)
    result = ThinkingResult([], [], {"simple": 0, "complex": 0})
    for pair, reject, label in out:
        if label is not None:
            result.labels[label.value] += 1
        if pair is not None:
            result.pairs.append(pair)
        if reject is not None:
            result.rejects.append(reject)
    return result


def compose_thinking_dataset(
    pairs: Iterable[ThinkingPair], target: CompositionTarget = CompositionTarget(), seed: int = 0
) -> list[ThinkingPair]:
    """Draw each bucket's allocation from the accepted pairs and shuffle the mix."""
    buckets: dict[Provenance, list[ThinkingPair]] = {p: [] for p in THINKING_BUCKETS}
    for pair in pairs:
        if pair.review is ReviewState.ACCEPTED:
            buckets[pair.provenance].append(pair)
    allocation = target.thinking_allocation()
    available = {p.value: len(buckets[p]) for p in THINKING_BUCKETS}
    deficits = {p.value: allocation[p] - len(buckets[p]) for p in THINKING_BUCKETS if allocation[p] > len(buckets[p])}
    if deficits:
        raise ShortfallError(deficits, available)
    rng = random.Random(derive_seed(seed, "compose-thinking"))
    chosen = []
    for p in THINKING_BUCKETS:
        pool = sorted(buckets[p], key=lambda x: x.id)
        chosen.extend(rng.sample(pool, allocation[p]))
    rng.shuffle(chosen)
    return chosen


def thinking_report(dataset: Sequence[ThinkingPair], result: ThinkingResult, target: CompositionTarget) -> dict:
    counts = {p.value: sum(1 for x in dataset if x.provenance is p) for p in THINKING_BUCKETS}
    n = len(dataset)
    produced = {p.value: sum(1 for x in result.pairs if x.provenance is p) for p in THINKING_BUCKETS}
    accepted = {
        p.value: sum(1 for x in result.pairs if x.provenance is p and x.review is ReviewState.ACCEPTED)
        for p in THINKING_BUCKETS
    }
    return {
        "kind": "thinking",
        "total": n,
        "target": {"total": target.total, "fractions": dict(zip([p.value for p in THINKING_BUCKETS], target.fractions))},
        "allocation": {p.value: c for p, c in target.thinking_allocation().items()},
        "counts": counts,
        "fractions": {k: (v / n if n else 0.0) for k, v in counts.items()},
        "labels": dict(sorted(result.labels.items())),
        "accepted": accepted,
        "accept_rate": {k: (accepted[k] / produced[k] if produced[k] else None) for k in produced},
        "rejects": len(result.rejects),
    }


# --- reflection triples -----------------------------------------------------


@dataclass
class TripleResult:
    triples: list[ReflectionTriple]
    rejects: list[dict] = field(default_factory=list)
    available: dict[str, int] = field(default_factory=dict)
    editor_usage: dict[str, int] = field(default_factory=dict)
    editor_failures: int = 0
    screened_out: int = 0
    missing: list[str] = field(default_factory=list)


_TAG_OUTCOME = {Tag.SUCCESS: TripleOutcome.SUCCESS, Tag.REFLECT: TripleOutcome.REFLECTION, Tag.FAILED: TripleOutcome.FAILED}


def _editor_name(editor, index: int) -> str:
    return str(getattr(editor, "name", f"editor-{index}"))


def _triple_item(job, editors, reflector: Reasoner, seed: int):
    idx, item_id, reference, instruction = job
    editor_index = idx % len(editors)
    editor = editors[editor_index]
    name = _editor_name(editor, editor_index)
    stage = "edit"
    try:
        generated = editor.edit(EditRequest(reference, instruction, derive_seed(seed, "triple", item_id))).image
        stage = "reflect"
        _, _, conclusion = reflector.reflect(ReflectionVariant.MULTI_ROUND, reference, generated, instruction)
        corrected = generated
        if conclusion.tag is Tag.REFLECT:
            stage = "correct"
            req = EditRequest(generated, conclusion.refinement_instruction, derive_seed(seed, "triple-fix", item_id))
            corrected = editor.edit(req).image
    except (BackendError, ProtocolError, PreconditionError) as exc:
        return None, {"id": item_id, "stage": stage, "editor": name, "error": f"{type(exc).__name__}: {exc}"}, name
    triple = ReflectionTriple(
        id=item_id,
        input=reference,
        edit_instruction=instruction,
        generated=generated,
        reflection_instruction=conclusion.refinement_instruction,
        corrected=corrected,
        outcome=_TAG_OUTCOME[conclusion.tag],
        editor=name,
    )
    return triple, None, name


def source_image(item: PoolItem, store: ImageStore, base_dir: Path | None = None) -> ImageRef:
    """The item's reference image, or a flat stand-in synthesized from its id."""
    if item.image:
        path = Path(item.image)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        return store.put(path.read_bytes())
    rng = random.Random(derive_seed(0, "source", item.id))
    return store.put(make_png((rng.randrange(256), rng.randrange(256), rng.randrange(256)), {"source": item.id}))


def apply_review_queue(triples: list[ReflectionTriple], path: str | Path | None) -> tuple[list[ReflectionTriple], int]:
    """Drop items a human marked ``reject`` in the queue file, then rewrite the queue.

    The queue is JSONL ``{id, outcome, verdict}`` with verdict ``pending``,
    ``accept`` or ``reject``. Existing verdicts survive reruns.
    """
    if path is None:
        return triples, 0
    path = Path(path)
    verdicts = {}
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                verdicts[row["id"]] = row.get("verdict", "pending")
    kept = [t for t in triples if verdicts.get(t.id, "pending") != "reject"]
    rows = [{"id": t.id, "outcome": t.outcome.value, "verdict": verdicts.get(t.id, "pending")} for t in triples]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    return kept, len(triples) - len(kept)


def balanced_counts(available: Sequence[int], weights: Sequence[float], cap: int) -> list[int]:
    """Largest allocation of at most ``cap`` items in the ratio ``weights`` that ``available`` can fill."""
    n = min(cap, sum(available))
    while n > 0:
        counts = largest_remainder(n, weights)
        if all(c <= a for c, a in zip(counts, available)):
            return counts
        n -= 1
    return [0] * len(weights)


def build_reflection_triples(
    sources: Sequence[tuple[str, ImageRef, Instruction]],
    editors: Sequence,
    reflector: Reasoner,
    target: CompositionTarget = CompositionTarget(total=500),
    seed: int = 0,
    *,
    workers: int = 1,
    review_queue: str | Path | None = None,
) -> TripleResult:
    """Generate, reflect, screen and ratio-balance; VIEScores are attached later by :func:`tag_viescores`."""
    if not editors:
        raise PreconditionError("build_reflection_triples needs at least one editor")
    jobs = [(i, item_id, ref, instr) for i, (item_id, ref, instr) in enumerate(sources)]
    out = ordered_map(lambda j: _triple_item(j, editors, reflector, seed), jobs, workers)
    result = TripleResult([])
    result.editor_usage = {_editor_name(e, i): 0 for i, e in enumerate(editors)}
    made = []
    for triple, reject, name in out:
        result.editor_usage[name] += 1
        if triple is not None:
            made.append(triple)
        else:
            result.rejects.append(reject)
            if reject["stage"] in ("edit", "correct"):
                result.editor_failures += 1
    made, result.screened_out = apply_review_queue(made, review_queue)
    by_class = {c: [t for t in made if t.outcome is c] for c in TRIPLE_CLASSES}
    result.available = {c.value: len(v) for c, v in by_class.items()}
    if not made:
        raise ShortfallError({c.value: 1 for c in TRIPLE_CLASSES}, result.available)
    # an absent class cannot be balanced against; the ratio is kept among the present ones
    result.missing = [c.value for c in TRIPLE_CLASSES if not by_class[c]]
    present = [(c, w) for c, w in zip(TRIPLE_CLASSES, target.triple_ratio) if by_class[c]]
    counts = balanced_counts([len(by_class[c]) for c, _ in present], [w for _, w in present], target.total)
    rng = random.Random(derive_seed(seed, "balance-triples"))
    keep = set()
    for (c, _), k in zip(present, counts):
        keep.update(t.id for t in rng.sample(by_class[c], k))
    result.triples = [t for t in made if t.id in keep]
    return result


def tag_viescores(
    triples: Sequence[ReflectionTriple], judge: Reasoner, workers: int = 1
) -> tuple[list[ReflectionTriple], list[dict]]:
    """Score each triple's corrected image; judge failures reject the triple."""

    def one(t: ReflectionTriple):
        try:
            vie = judge.score_vie(t.input, t.corrected, t.edit_instruction)
        except (ProtocolError, BackendError, InvariantError) as exc:
            return None, {"id": t.id, "stage": "vie", "error": f"{type(exc).__name__}: {exc}"}
        return ReflectionTriple(t.id, t.input, t.edit_instruction, t.generated, t.reflection_instruction,
                                t.corrected, t.outcome, vie, t.editor), None

    tagged, rejects = [], []
    for triple, reject in ordered_map(one, triples, workers):
        if triple is not None:
            tagged.append(triple)
        else:
            rejects.append(reject)
    return tagged, rejects


def triple_report(triples: Sequence[ReflectionTriple], result: TripleResult, target: CompositionTarget, sources: int) -> dict:
    counts = {c.value: sum(1 for t in triples if t.outcome is c) for c in TRIPLE_CLASSES}
    n = len(triples)
    unit = counts[TripleOutcome.FAILED.value] or 1
    return {
        "kind": "triples",
        "sources": sources,
        "total": n,
        "target_ratio": dict(zip([c.value for c in TRIPLE_CLASSES], target.triple_ratio)),
        "available": result.available,
        "missing_classes": result.missing,
        "counts": counts,
        "fractions": {k: (v / n if n else 0.0) for k, v in counts.items()},
        "ratio_to_failed": {k: v / unit for k, v in counts.items()},
        "editor_usage": result.editor_usage,
        "editor_failures": result.editor_failures,
        "screened_out": result.screened_out,
        "rejects": len(result.rejects),
    }


# --- file outputs -----------------------------------------------------------


def write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8")


def write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def run_thinking_forge(
    pool: Sequence[PoolItem],
    reasoner: Reasoner,
    out_dir: str | Path,
    target: CompositionTarget = CompositionTarget(),
    seed: int = 0,
    workers: int = 1,
) -> dict:
    """Full thinking-pair pipeline; writes thinking_pairs.jsonl, rejects.jsonl and composition_report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = forge_thinking_pairs(pool, reasoner, target, seed, workers)
    write_jsonl(out / "rejects.jsonl", result.rejects)
    dataset = compose_thinking_dataset(result.pairs, target, seed)
    write_jsonl(out / "thinking_pairs.jsonl", (p.to_json() for p in dataset))
    report = thinking_report(dataset, result, target)
    write_json(out / "composition_report.json", report)
    log.info("thinking pairs: %d written, %d rejects", len(dataset), len(result.rejects))
    return report


def run_triple_forge(
    pool: Sequence[PoolItem],
    editors: Sequence,
    reasoner: Reasoner,
    store: ImageStore,
    out_dir: str | Path,
    target: CompositionTarget = CompositionTarget(total=500),
    seed: int = 0,
    workers: int = 1,
    base_dir: Path | None = None,
) -> dict:
    """Full triple pipeline; writes reflection_triples.jsonl, rejects.jsonl, review_queue.jsonl and composition_report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources = [(it.id, source_image(it, store, base_dir), Instruction(it.instruction)) for it in pool]
    result = build_reflection_triples(
        sources, editors, reasoner, target, seed, workers=workers, review_queue=out / "review_queue.jsonl"
    )
    tagged, vie_rejects = tag_viescores(result.triples, reasoner, workers)
    result.rejects.extend(vie_rejects)
    write_jsonl(out / "reflection_triples.jsonl", (t.to_json() for t in tagged))
    write_jsonl(out / "rejects.jsonl", result.rejects)
    report = triple_report(tagged, result, target, len(sources))
    write_json(out / "composition_report.json", report)
    log.info("reflection triples: %d written, %d rejects", len(tagged), len(result.rejects))
    return report

"""Manifest-driven benchmark runs with an optional reflection-budget sweep."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .backends.base import BackendError, ProtocolError
from .backends.config import Backends
from .forge import ordered_map, write_json
from .loop import cumulative_best, derive_seed, run_session
from .reasoner import PromptTemplate, Reasoner
from .scoring import Benchmark, JudgeRecord, aggregate
from .trace import serialize_trace
from .types import Instruction, InstructionKind, LoopMode, LoopPolicy, SessionStatus

log = logging.getLogger(__name__)

COMPLETION_THRESHOLD = 0.9


@dataclass(frozen=True)
class ManifestRow:
    id: str
    image: str
    instruction: str
    kind: InstructionKind = InstructionKind.ABSTRACT


def read_manifest(path: str | Path) -> list[ManifestRow]:
    """JSONL rows ``{id, image, instruction[, kind]}``; image paths resolve against the manifest's directory."""
    path = Path(path)
    rows, seen = [], set()
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            image = Path(obj["image"])
            if not image.is_absolute():
                image = path.parent / image
            row = ManifestRow(str(obj["id"]), str(image), str(obj["instruction"]),
                              InstructionKind(obj.get("kind", "abstract")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{n}: bad manifest row ({exc})") from None
        if row.id in seen:
            raise ValueError(f"{path}:{n}: duplicate id {row.id!r}")
        seen.add(row.id)
        rows.append(row)
    return rows


def _safe_name(item_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in item_id)


def _run_one(row: ManifestRow, policy: LoopPolicy, backends: Backends, seed: int, templates, out: Path, trace_dir: Path) -> dict:
    session_seed = derive_seed(seed, "session", row.id)
    reference = backends.store.put(Path(row.image).read_bytes())
    session, outcome = run_session(
        reference, Instruction(row.instruction, row.kind), policy, backends, seed=session_seed, templates=templates
    )
    trace_path = trace_dir / f"{_safe_name(row.id)}.jsonl"
    trace_path.write_bytes(serialize_trace(session))
    vie, judged = None, False
    if outcome is not None:
        vie = session.rounds[outcome.chosen_round].vie
        if vie is None:
            # base and thinking runs never score themselves; judge the final image here
            judge = Reasoner(backends.reasoner, templates, seed=derive_seed(session_seed, "judge"))
            try:
                vie = judge.score_vie(reference, outcome.final_image, session.original_instruction)
                judged = True
            except (BackendError, ProtocolError) as exc:
                log.warning("judge failed for %s: %s", row.id, exc)
    return {
        "id": row.id,
        "status": session.status.value,
        "stop_reason": session.stop_reason,
        "rounds": len(session.rounds),
        "chosen_round": session.chosen_round,
        "semantic_consistency": vie.semantic_consistency if vie else None,
        "perceptual_quality": vie.perceptual_quality if vie else None,
        "overall": vie.overall if vie else None,
        "judged_after_run": judged,
        "trace": trace_path.relative_to(out).as_posix(),
    }


def _completed(entry: dict) -> bool:
    return entry["status"] != SessionStatus.STOPPED.value and entry["overall"] is not None


def _summarize(entries: Sequence[dict], policy: LoopPolicy) -> dict:
    records = [
        JudgeRecord(Benchmark.GEDIT, {"semantic_consistency": e["semantic_consistency"],
                                      "perceptual_quality": e["perceptual_quality"]})
        for e in entries
        if e["overall"] is not None
    ]
    statuses = {s.value: sum(1 for e in entries if e["status"] == s.value) for s in SessionStatus}
    completed = sum(1 for e in entries if _completed(e))
    scores = aggregate(records) if records else None
    return {
        "policy": {
            "mode": policy.mode.value,
            "max_reflection_rounds": policy.max_reflection_rounds,
            "reroll_attempts": policy.reroll_attempts,
            "reflection_variant": policy.reflection_variant.value,
        },
        "n": len(entries),
        "completed": completed,
        "completion_rate": completed / len(entries) if entries else 0.0,
        "statuses": statuses,
        "scores": scores,
        "mean_overall": scores["overall"]["mean"] if scores else None,
    }


def run_batch(
    rows: Sequence[ManifestRow],
    policy: LoopPolicy,
    backends: Backends,
    out_dir: str | Path,
    *,
    seed: int = 0,
    budgets: Sequence[int] | None = None,
    workers: int = 1,
    templates: dict[str, PromptTemplate] | None = None,
) -> dict:
    """Run every manifest row and write ``traces/`` plus ``summary.json``.

    With ``budgets`` the whole manifest is rerun once per reflection budget
    (thinking_reflection only) and the summary carries the per-budget means
    and their cumulative best.
    """
    if not rows:
        raise ValueError("manifest is empty")
    out = Path(out_dir)
    sweep = list(budgets) if budgets else [None]
    if budgets and policy.mode is not LoopMode.THINKING_REFLECTION:
        raise ValueError("a budget sweep needs mode thinking_reflection")
    runs = []
    for budget in sweep:
        run_policy = policy if budget is None else replace(policy, max_reflection_rounds=int(budget))
        trace_dir = out / "traces" if budget is None else out / "traces" / f"budget-{budget}"
        trace_dir.mkdir(parents=True, exist_ok=True)
        entries = ordered_map(lambda r: _run_one(r, run_policy, backends, seed, templates, out, trace_dir), rows, workers)
        summary = _summarize(entries, run_policy)
        summary["sessions"] = entries
        if budget is not None:
            summary["budget"] = int(budget)
        runs.append(summary)
    if budgets:
        means = [r["mean_overall"] for r in runs]
        result = {
            "seed": seed,
            "n": len(rows),
            "completed": min(r["completed"] for r in runs),
            "budgets": runs,
            "mean_overall_by_budget": [r["mean_overall"] for r in runs],
            "cumulative_best": cumulative_best(means) if None not in means else None,
        }
    else:
        result = {"seed": seed, **runs[0]}
    write_json(out / "summary.json", result)
    return result


def completion_ok(summary: dict) -> bool:
    return summary["completed"] >= COMPLETION_THRESHOLD * summary["n"]

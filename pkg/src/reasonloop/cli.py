"""``reasonloop`` command line: edit, bench, forge, verify-objectives, replay.

Results go to stdout (JSON, or text for ``replay`` and ``verify-objectives``);
logs go to stderr. Exit codes: 0 ok, 1 config/IO error, 2 a Failed edit,
3 a benchmark with under 90% of sessions completed.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
from pathlib import Path
from typing import Sequence

from .backends.config import ConfigError, build_backends, load_backend_config
from .batch import completion_ok, read_manifest, run_batch
from .forge import CompositionTarget, ShortfallError, read_pool, run_thinking_forge, run_triple_forge
from .images import ImageStore
from .loop import derive_seed, run_session
from .objectives import format_results, verify_objectives
from .reasoner import Reasoner, TemplateError, load_templates
from .trace import TraceError, parse_trace, serialize_trace, session_events
from .types import Instruction, InstructionKind, LoopMode, LoopPolicy, ReflectionVariant, SessionStatus

log = logging.getLogger("reasonloop")

EXIT_OK, EXIT_CONFIG, EXIT_FAILED, EXIT_INCOMPLETE = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbelow(2**31)
        log.info("no --seed given; using %d", args.seed)
    return args.seed


def _backends(args, store: ImageStore):
    cfg = None
    if args.backend_config is not None:
        cfg = load_backend_config(args.backend_config)
    return build_backends(cfg, store, seed=args.seed)


def _templates(args):
    return load_templates(_existing(args.templates, "template directory")) if args.templates else None


def _policy(args) -> LoopPolicy:
    mode = LoopMode(args.mode)
    return LoopPolicy(
        mode=mode,
        max_reflection_rounds=args.max_reflections if mode is LoopMode.THINKING_REFLECTION else 0,
        reroll_attempts=args.reroll_attempts if mode is LoopMode.REROLL else 0,
        reflection_variant=ReflectionVariant(args.variant),
        stop_on_success_tag=not args.ignore_success_tag,
    )


# --- subcommands ------------------------------------------------------------


def cmd_edit(args) -> int:
    image = _existing(args.image, "image")
    seed = _seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = ImageStore(out)
    backends = _backends(args, store)
    reference = store.put(image.read_bytes())
    session, outcome = run_session(
        reference,
        Instruction(args.instruction, InstructionKind(args.kind)),
        _policy(args),
        backends,
        seed=seed,
        templates=_templates(args),
    )
    (out / "trace.jsonl").write_bytes(serialize_trace(session))
    _emit(
        {
            "seed": seed,
            "session_id": str(session.session_id),
            "status": session.status.value,
            "stop_reason": session.stop_reason,
            "chosen_round": session.chosen_round,
            "rounds": len(session.rounds),
            "final_image": str(out / outcome.final_image.uri) if outcome else None,
            "trace": str(out / "trace.jsonl"),
        }
    )
    return EXIT_FAILED if session.status is SessionStatus.FAILED else EXIT_OK


def cmd_bench(args) -> int:
    rows = read_manifest(_existing(args.manifest, "manifest"))
    if not rows:
        raise UsageError(f"manifest is empty: {args.manifest}")
    seed = _seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = ImageStore(out)
    budgets = [int(b) for b in args.budgets.split(",")] if args.budgets else None
    summary = run_batch(
        rows, _policy(args), _backends(args, store), out,
        seed=seed, budgets=budgets, workers=args.workers, templates=_templates(args),
    )
    brief = {k: v for k, v in summary.items() if k not in ("sessions", "budgets")}
    brief["summary"] = str(out / "summary.json")
    _emit(brief)
    return EXIT_OK if completion_ok(summary) else EXIT_INCOMPLETE


def cmd_forge(args) -> int:
    pool = read_pool(_existing(args.pool, "pool"))
    seed = _seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = ImageStore(out)
    backends = _backends(args, store)
    reasoner = Reasoner(backends.reasoner, _templates(args), seed=derive_seed(seed, "forge"))
    if args.kind == "thinking":
        target = CompositionTarget(total=args.total)
        report = run_thinking_forge(pool, reasoner, out, target, seed, args.workers)
    else:
        target = CompositionTarget(total=args.total)
        report = run_triple_forge(
            pool, backends.editors or [backends.generator], reasoner, store, out, target, seed, args.workers,
            base_dir=Path(args.pool).parent,
        )
    _emit({"seed": seed, "out": str(out), **report})
    return EXIT_OK


def cmd_verify_objectives(args) -> int:
    results = verify_objectives(args.seed if args.seed is not None else 0)
    if args.json:
        _emit([r.__dict__ for r in results])
    else:
        sys.stdout.write(format_results(results) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CONFIG


def _short(text: str | None, width: int = 72) -> str:
    text = " ".join((text or "").split())
    return text if len(text) <= width else text[: width - 3] + "..."


def render_timeline(session) -> str:
    """One line per trace event, in trace order."""
    lines = []
    for ev in session_events(session):
        kind = ev["type"]
        where = f"round {ev['round']}" if ev.get("round") is not None else ""
        if kind == "header":
            p = ev["policy"]
            lines.append(f"session {ev['session_id']}  mode={p['mode']}  seed={ev['seed']}")
            lines.append(f"{'':9} {'request':<9} {_short(ev['original_instruction']['text'])}")
            continue
        if kind == "think":
            detail = _short(ev["thought"]["text"]) if ev["thought"] else "(none)"
        elif kind == "edit":
            detail = f"{_short(ev['instruction']['text'], 56)} -> {ev['generated']['uri']}"
        elif kind == "describe":
            detail = _short(ev["target_description"])
        elif kind == "assess":
            a = ev["assessment"]
            detail = f"consistency {a['consistency_score']:g}/10, {len(a['conflicts'])} conflict(s)"
        elif kind == "conclude":
            c = ev["conclusion"]
            refine = c["refinement_instruction"]
            detail = c["tag"] + (f": {_short(refine['text'], 60)}" if refine else "")
            kind = "reflect"
        elif kind == "score":
            v = ev["vie"]
            detail = f"SC {v['semantic_consistency']:g}  PQ {v['perceptual_quality']:g}  overall {v['overall']:g}"
        elif kind == "retry":
            detail = f"{ev['role']} attempt {ev['attempt']} after {ev['delay_ms']} ms: {_short(ev['error'], 50)}"
        elif kind == "abort":
            detail = _short(ev["error"])
        else:
            chosen = ev["chosen_round"]
            detail = f"{ev['status']} ({ev['reason']})" + (f", chosen round {chosen}" if chosen is not None else "")
        lines.append(f"{where:<9} {kind:<9} {detail}")
    return "\n".join(lines)


def cmd_replay(args) -> int:
    path = _existing(args.trace, "trace")
    session = parse_trace(path.read_bytes())
    sys.stdout.write(render_timeline(session) + "\n")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def _common(p: argparse.ArgumentParser, *, backends: bool = True, out: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (random and logged if omitted)")
    if backends:
        p.add_argument("--backend-config", default=None, help="backend JSON config (default: simulated world)")
        p.add_argument("--templates", default=None, help="prompt template directory")
    if out:
        p.add_argument("--out", default="out", help="output directory")


def _policy_flags(p: argparse.ArgumentParser, mode: str) -> None:
    p.add_argument("--mode", choices=[m.value for m in LoopMode], default=mode)
    p.add_argument("--max-reflections", type=int, default=2)
    p.add_argument("--reroll-attempts", type=int, default=2)
    p.add_argument("--variant", choices=[v.value for v in ReflectionVariant], default="multi_round")
    p.add_argument("--ignore-success-tag", action="store_true", help="keep editing after a Success conclusion")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reasonloop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("edit", help="run one edit session")
    p.add_argument("--image", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--kind", choices=[k.value for k in InstructionKind], default="abstract")
    _policy_flags(p, "thinking_reflection")
    _common(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("bench", help="run a manifest of sessions and summarize")
    p.add_argument("--manifest", required=True)
    p.add_argument("--budgets", default=None, help="comma-separated reflection budgets to sweep, e.g. 0,1,2")
    p.add_argument("--workers", type=int, default=4)
    _policy_flags(p, "thinking_reflection")
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("forge", help="build a thinking-pair or reflection-triple dataset")
    p.add_argument("kind", choices=["thinking", "triples"])
    p.add_argument("--pool", required=True)
    p.add_argument("--total", type=int, default=None)
    p.add_argument("--workers", type=int, default=4)
    _common(p)
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("verify-objectives", help="run the loss verification suite")
    p.add_argument("--json", action="store_true")
    _common(p, backends=False, out=False)
    p.set_defaults(func=cmd_verify_objectives)

    p = sub.add_parser("replay", help="print a round-by-round timeline of a trace")
    p.add_argument("trace")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "command", None) == "forge" and args.total is None:
        args.total = 400 if args.kind == "thinking" else 500
    try:
        return args.func(args)
    except (UsageError, ConfigError, TemplateError, TraceError, ShortfallError, OSError, ValueError) as exc:
        print(f"reasonloop: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

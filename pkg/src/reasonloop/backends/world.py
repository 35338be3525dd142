"""A seeded simulated world: a coupled reasoner/generator pair with hidden flaws.

The generator writes its hidden state (target summary and flaw list) into a
tEXt chunk of every PNG it produces, so the state travels with the image
digest. Sessions are isolated by content addressing and every answer is a pure
function of (request, world seed, image bytes).

Dynamics:

* A fresh edit (one that does not name a recorded flaw) adds a flaw with
  probability ``flaw_probability``.
* A refinement edit names one or more recorded flaws; each named flaw is
  removed with probability ``correction_probability`` and no new flaw is added.
* Flaws made by an editor whose ``correction_probability`` is 0 are marked
  irrecoverable; the reasoner concludes ``<#Failed>`` on them.
* Quality on both axes is ``clamp(base_quality - 3*flaws + N(0, sd), 0, 10)``
  with noise fixed per image digest and axis.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass

from ..images import ImageStore, make_png, read_png_text
from ..types import ImageRef, InvariantError, VIEScore
from .base import BackendError, ChatRequest, ChatResult, EditRequest, EditResult

STATE_KEY = "reasonloop-world"

FLAW_KINDS = (
    "an unintended color shift in the background",
    "a duplicated object",
    "a distorted edge on the edited region",
    "a missing shadow under the edited object",
    "blurred texture on the main subject",
    "an extra element that was not requested",
)

SIMPLE_VERBS = frozenset(
    "add remove replace change increase decrease apply delete erase insert rotate crop "
    "recolor color paint turn convert blur sharpen brighten darken put place swap".split()
)


@dataclass(frozen=True)
class WorldConfig:
    flaw_probability: float = 0.5
    correction_probability: float = 0.9
    quality_noise_sd: float = 0.3
    base_quality: float = 8.0

    def __post_init__(self):
        for name in ("flaw_probability", "correction_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvariantError(name, "must lie in [0, 1]")
        if not self.quality_noise_sd >= 0:
            raise InvariantError("quality_noise_sd", "must be >= 0")
        if not 0.0 <= self.base_quality <= 10.0:
            raise InvariantError("base_quality", "must lie in [0, 10]")


def _rng(*parts) -> random.Random:
    digest = hashlib.sha256("|".join(map(str, parts)).encode("utf-8")).hexdigest()
    return random.Random(int(digest[:16], 16))


def looks_simple(text: str) -> bool:
    words = text.strip().split()
    return bool(words) and words[0].casefold().strip(",.") in SIMPLE_VERBS


class SimulatedWorld:
    def __init__(self, config: WorldConfig | None = None, seed: int = 0, store: ImageStore | None = None):
        self.config = config or WorldConfig()
        self.seed = seed
        self.store = store if store is not None else ImageStore()

    def reasoner(self) -> "SimulatedReasoner":
        return SimulatedReasoner(self)

    def generator(self, config: WorldConfig | None = None, name: str = "world") -> "SimulatedGenerator":
        return SimulatedGenerator(self, config or self.config, name)

    # hidden state

    def state(self, ref: ImageRef) -> dict | None:
        blob = read_png_text(self.store.read(ref)).get(STATE_KEY)
        return json.loads(blob) if blob else None

    def flaws(self, ref: ImageRef) -> list[dict]:
        st = self.state(ref)
        return list(st["flaws"]) if st else []

    def target_summary(self, reference: ImageRef, instruction: str) -> str:
        st = self.state(reference)
        base = st["target"] if st else f"reference image {reference.sha256[:8]}"
        return f"{base}, edited so that: {instruction.strip()}"

    def quality(self, ref: ImageRef) -> VIEScore:
        cfg = self.config
        level = cfg.base_quality - 3.0 * len(self.flaws(ref))
        rng = _rng(self.seed, "quality", ref.sha256)
        axes = []
        for _ in range(2):
            noise = rng.gauss(0.0, cfg.quality_noise_sd) if cfg.quality_noise_sd > 0 else 0.0
            axes.append(min(10.0, max(0.0, level + noise)))
        return VIEScore(*axes)


def simulated_world(config: WorldConfig | None = None, seed: int = 0, store: ImageStore | None = None):
    """Build a coupled ``(reasoner, generator)`` pair over one hidden world."""
    world = SimulatedWorld(config, seed, store)
    return world.reasoner(), world.generator()


class SimulatedGenerator:
    def __init__(self, world: SimulatedWorld, config: WorldConfig, name: str):
        self.world = world
        self.config = config
        self.name = name
        self.store = world.store

    def edit(self, request: EditRequest) -> EditResult:
        text = request.instruction.text
        parent = self.world.state(request.reference)
        rng = _rng(self.world.seed, self.name, request.request_id)
        flaws = list(parent["flaws"]) if parent else []
        targeted = [f for f in flaws if f["id"] in text]
        if targeted:
            target = parent["target"]
            for f in targeted:
                if f["recoverable"] and rng.random() < self.config.correction_probability:
                    flaws.remove(f)
        else:
            target = self.world.target_summary(request.reference, text)
            if rng.random() < self.config.flaw_probability:
                fid = f"{rng.getrandbits(24):06x}"
                kind = FLAW_KINDS[rng.randrange(len(FLAW_KINDS))]
                flaws.append(
                    {"id": fid, "desc": f"{kind} [flaw {fid}]", "recoverable": self.config.correction_probability > 0}
                )
        state = {"editor": self.name, "flaws": flaws, "parent": request.reference.sha256,
                 "request": request.request_id, "target": target}
        rgb = (rng.randrange(256), rng.randrange(256), rng.randrange(256))
        png = make_png(rgb, {STATE_KEY: json.dumps(state, sort_keys=True)})
        return EditResult(image=self.store.put(png))


class SimulatedReasoner:
    def __init__(self, world: SimulatedWorld):
        self.world = world
        self.calls: list[ChatRequest] = []

    def chat(self, request: ChatRequest) -> ChatResult:
        self.calls.append(request)
        handler = getattr(self, f"_{request.purpose}", None)
        if handler is None:
            raise BackendError(f"simulated reasoner cannot answer purpose {request.purpose!r}", request.request_id)
        return ChatResult(text=handler(request))

    # reflection

    def _think(self, req: ChatRequest) -> str:
        instr = req.slot("instruction", "").strip()
        if looks_simple(instr):
            return instr
        return f"{instr.rstrip('.')}. Keep everything else in the image unchanged."

    def _describe(self, req: ChatRequest) -> str:
        return self.world.target_summary(req.images[0], req.slot("instruction", ""))

    def _assessment(self, result: ImageRef) -> dict:
        flaws = self.world.flaws(result)
        return {
            "consistency_score": max(0, 10 - 3 * len(flaws)),
            "conflicts": [f["desc"] for f in flaws],
            "omissions": [],
            "hallucinations": [],
            "rationale": "matches the target" if not flaws else f"{len(flaws)} conflict(s) with the target",
        }

    def _assess(self, req: ChatRequest) -> str:
        return "```json\n" + json.dumps(self._assessment(req.images[-1])) + "\n```"

    def _conclusion(self, result: ImageRef) -> str:
        flaws = self.world.flaws(result)
        if not flaws:
            return "The result is consistent with the intended edit. <#Success>"
        if any(not f["recoverable"] for f in flaws):
            names = "; ".join(f["desc"] for f in flaws if not f["recoverable"])
            return f"The result has flaws further editing cannot recover: {names}. <#Failed>"
        fixes = " ".join(f"Remove {f['desc']}." for f in flaws)
        return f"The edit introduced {len(flaws)} flaw(s). <#Reflection> {fixes}"

    def _conclude_multi(self, req: ChatRequest) -> str:
        return self._conclusion(req.images[-1])

    _conclude_dual = _conclude_multi

    def _conclude_single(self, req: ChatRequest) -> str:
        result = req.images[-1]
        return "```json\n" + json.dumps(self._assessment(result)) + "\n```\n" + self._conclusion(result)

    def _score(self, req: ChatRequest) -> str:
        vie = self.world.quality(req.images[-1])
        return "```json\n" + json.dumps(
            {"semantic_consistency": vie.semantic_consistency, "perceptual_quality": vie.perceptual_quality}
        ) + "\n```"

    # dataset annotation

    def _classify(self, req: ChatRequest) -> str:
        return "simple" if looks_simple(req.slot("instruction", "")) else "complex"

    def _annotate_complex(self, req: ChatRequest) -> str:
        return self._think(req)

    def _annotate_simple(self, req: ChatRequest) -> str:
        instr = req.slot("instruction", "").strip().rstrip(".")
        return f"could you give the picture a different feel, something like: {instr[:1].lower()}{instr[1:]}"

    def _review(self, req: ChatRequest) -> str:
        return "accept"

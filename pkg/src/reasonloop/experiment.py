"""Reflection versus re-roll on the simulated world, at an equal generator budget."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .backends.world import SimulatedWorld, WorldConfig
from .images import ImageStore, make_png
from .loop import derive_seed, run_session
from .types import Instruction, LoopMode, LoopPolicy

INSTRUCTION = "make it look like autumn"


@dataclass(frozen=True)
class ArmResult:
    mode: str
    overall: tuple[float, ...]
    generator_calls: tuple[int, ...]

    @property
    def mean(self) -> float:
        return sum(self.overall) / len(self.overall)

    @property
    def variance(self) -> float:
        m = self.mean
        return sum((x - m) ** 2 for x in self.overall) / (len(self.overall) - 1)

    @property
    def stderr(self) -> float:
        return math.sqrt(self.variance / len(self.overall))


@dataclass(frozen=True)
class Comparison:
    reflection: ArmResult
    reroll: ArmResult

    @property
    def gap(self) -> float:
        return self.reflection.mean - self.reroll.mean

    @property
    def stderr(self) -> float:
        """Unpaired (Welch) standard error of the difference in means."""
        return math.sqrt(self.reflection.stderr**2 + self.reroll.stderr**2)

    @property
    def z(self) -> float:
        return self.gap / self.stderr


def reference_image(store: ImageStore, i: int):
    return store.put(make_png((i % 256, i // 256, 7), {"source": str(i)}))


def run_arm(world: SimulatedWorld, policy: LoopPolicy, sessions: int, seed: int) -> ArmResult:
    reasoner, generator = world.reasoner(), world.generator()
    overall, calls = [], []
    for i in range(sessions):
        ref = reference_image(world.store, i)
        session, outcome = run_session(ref, Instruction(INSTRUCTION), policy, (reasoner, generator),
                                       seed=derive_seed(seed, "session", i))
        overall.append(session.rounds[outcome.chosen_round].vie.overall)
        calls.append(len(session.rounds))
    return ArmResult(policy.mode.value, tuple(overall), tuple(calls))


def compare_reflection_reroll(
    config: WorldConfig = WorldConfig(0.5, 0.9, 0.3, 8.0),
    sessions: int = 200,
    seed: int = 0,
    budget: int = 2,
) -> Comparison:
    """Both arms get ``budget + 1`` generator calls at most; session ``i`` uses the same seed in each arm."""
    world = SimulatedWorld(config, seed=seed, store=ImageStore())
    reflection = run_arm(world, LoopPolicy(LoopMode.THINKING_REFLECTION, budget), sessions, seed)
    reroll = run_arm(world, LoopPolicy(LoopMode.REROLL, 0, reroll_attempts=budget), sessions, seed)
    return Comparison(reflection, reroll)

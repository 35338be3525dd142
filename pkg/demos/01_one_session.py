"""One edit session in the simulated world, round by round.

Run with ``python demos/01_one_session.py``.
"""

# %%
from reasonloop import Instruction, LoopMode, LoopPolicy, run_session
from reasonloop.backends.world import SimulatedWorld, WorldConfig
from reasonloop.cli import render_timeline
from reasonloop.images import ImageStore, make_png

# a world where every fresh edit slips in a flaw and each named flaw is fixed half the time
world = SimulatedWorld(WorldConfig(flaw_probability=1.0, correction_probability=0.5), seed=3, store=ImageStore())
reference = world.store.put(make_png((110, 150, 90), {"source": "demo"}))

# %%
policy = LoopPolicy(LoopMode.THINKING_REFLECTION, max_reflection_rounds=3)
session, outcome = run_session(reference, Instruction("make it feel like late autumn"), policy,
                               (world.reasoner(), world.generator()), seed=11)
print("thought:", session.thought.text)

# %%
# each round: what was asked, what the reviewer concluded, how it scored
for r in session.rounds:
    tag = r.conclusion.tag.value if r.conclusion else "-"
    print(f"round {r.index}: {tag:<10} overall={r.vie.overall:.2f}  flaws={len(world.flaws(r.generated))}")
    print(f"   asked: {r.instruction_used.text[:90]}")

print(f"\nstatus {outcome.status.value}, kept round {outcome.chosen_round} of {outcome.rounds_executed}")

# %%
# the same session as the replay subcommand would show it
print(render_timeline(session))

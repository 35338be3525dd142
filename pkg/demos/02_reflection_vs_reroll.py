"""Does reflecting on a bad edit beat simply trying again?

Both arms get the same number of generator calls per session. The reflection
arm reviews each result and names what to fix; the re-roll arm draws fresh
edits from the reference and keeps the best.
"""

# %%
import numpy as np

from reasonloop.backends.world import SimulatedWorld, WorldConfig
from reasonloop.experiment import compare_reflection_reroll, run_arm
from reasonloop.images import ImageStore
from reasonloop.loop import cumulative_best
from reasonloop.types import LoopMode, LoopPolicy

cmp = compare_reflection_reroll(sessions=200, seed=0)
for arm in (cmp.reflection, cmp.reroll):
    print(f"{arm.mode:<20} mean {arm.mean:.4f}  sd {arm.variance ** 0.5:.3f}  "
          f"generator calls {min(arm.generator_calls)}..{max(arm.generator_calls)}")
print(f"gap {cmp.gap:.4f}, {cmp.z:.2f} standard errors")

# %%
# re-roll has the higher spread: a flawed draw scores about 3 points lower and
# nothing repairs it, so the best-of-three only helps when some draw is clean
print("reroll sessions stuck below 6:", sum(x < 6 for x in cmp.reroll.overall))
print("reflection sessions stuck below 6:", sum(x < 6 for x in cmp.reflection.overall))

# %%
# how much each extra reflection buys: mean score per budget, then the running best
world = SimulatedWorld(WorldConfig(0.5, 0.9, 0.3, 8.0), seed=0, store=ImageStore())
means = [run_arm(world, LoopPolicy(LoopMode.THINKING_REFLECTION, b), 100, seed=1).mean for b in range(4)]
print("mean by budget:", np.round(means, 3))
print("cumulative best:", np.round(cumulative_best(means), 3))

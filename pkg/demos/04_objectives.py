"""The two training losses on toy models, and what each training stage may touch."""

# %%
import math

import numpy as np

from reasonloop.objectives import (
    AffineVectorField,
    FlowBatch,
    ObjectiveWeights,
    SoftmaxTokenModel,
    Stage,
    TokenBatch,
    UniformTokenModel,
    flow_matching_loss,
    format_results,
    joint_loss,
    ntp_loss,
    train_stage,
    verify_objectives,
)

rng = np.random.default_rng(0)

# %%
# next-token loss: a uniform model over V tokens pays ln V per token
batch = TokenBatch([[0, 1, 2, 3]], 8)
print(ntp_loss(batch, UniformTokenModel(8)), 4 * math.log(8))

# %%
# flow matching: regress the straight-line velocity x1 - x0 at a random time t
fb = FlowBatch.sample(rng.normal(size=(16, 2)), rng, 32, cond=rng.normal(size=(16, 1)))
field = AffineVectorField.random(2, 1, rng)
print("flow loss before training:", round(flow_matching_loss(fb, field), 4))

# %%
# joint loss adds the token loss at a small weight
print(joint_loss(2.0, 5.0, ObjectiveWeights(0.1)))

# %%
# stage training: the token side, the field side, then both
tok = SoftmaxTokenModel.random(8, rng)
tb = TokenBatch.random(rng, 6, 10, 8)
for stage in Stage:
    t0, f0 = tok.params.copy(), field.params.copy()
    history = train_stage(stage, tok, field, tb, fb, steps=100)
    print(f"{stage.value:<10} loss {history[0]:.3f} -> {history[-1]:.3f}  "
          f"token moved={not np.array_equal(t0, tok.params)}  field moved={not np.array_equal(f0, field.params)}")

# %%
print(format_results(verify_objectives(0)))

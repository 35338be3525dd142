"""Building the two training sets: thinking pairs and reflection triples."""

# %%
import json
import tempfile
from pathlib import Path

from reasonloop.backends import build_backends
from reasonloop.forge import CompositionTarget, PoolItem, largest_remainder, run_thinking_forge, run_triple_forge
from reasonloop.images import ImageStore
from reasonloop.reasoner import Reasoner

out = Path(tempfile.mkdtemp(prefix="forge-demo-"))

# %%
# an instruction pool of direct commands and looser, mood-style requests; simple
# commands feed two buckets (abstracted and passthrough), so they need the majority
simple = ["Remove the {}.", "Add a {} on the left.", "Turn the {} blue."]
vague = ["give it a {} feeling", "something more {} please", "could it feel {}"]
nouns, moods = ["car", "lamp", "tree", "bench", "kite"], ["wintry", "nostalgic", "calm", "festive", "eerie"]
pool = [PoolItem(f"s{i:03d}", simple[i % 3].format(nouns[i % 5])) for i in range(450)]
pool += [PoolItem(f"c{i:03d}", vague[i % 3].format(moods[i % 5])) for i in range(250)]

# %%
# 400 pairs split 0.31 / 0.44 / 0.25; the counts come from largest remainders
print("allocation:", largest_remainder(400, [0.31, 0.44, 0.25]))
reasoner = Reasoner(build_backends(None, ImageStore()).reasoner)
report = run_thinking_forge(pool, reasoner, out / "thinking", seed=0)
print(json.dumps(report["counts"]), report["fractions"])
first = json.loads((out / "thinking" / "thinking_pairs.jsonl").read_text().splitlines()[0])
print("example pair:", first)

# %%
# triples come from running editors and letting the reviewer tag each result
store = ImageStore(out / "triples")
backends = build_backends({"mode": "simulated", "world": {"flaw_probability": 0.5, "correction_probability": 1.0}}, store)
sources = [PoolItem(f"img{i:04d}", "Add snow to the roof.") for i in range(1200)]
report = run_triple_forge(sources, backends.editors, Reasoner(backends.reasoner), store, out / "triples",
                          CompositionTarget(total=500), seed=0)
print("available:", report["available"])
print("kept:", report["counts"], "ratio to failed:", report["ratio_to_failed"])
print("editor usage:", report["editor_usage"])
print("files in", out)

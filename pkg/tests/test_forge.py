import json
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_pool
from reasonloop.backends import PreconditionError, ScriptedGenerator, ScriptedReasoner, build_backends
from reasonloop.forge import (
    CompositionTarget,
    PoolItem,
    Provenance,
    ReflectionTriple,
    ReviewState,
    ShortfallError,
    ThinkingPair,
    TripleOutcome,
    annotate_pair,
    build_reflection_triples,
    classify_instruction,
    compose_thinking_dataset,
    forge_thinking_pairs,
    largest_remainder,
    passthrough_pair,
    review_pair,
    run_thinking_forge,
    run_triple_forge,
    tag_viescores,
)
from reasonloop.images import ImageStore, make_png
from reasonloop.reasoner import Label, Reasoner
from reasonloop.types import ImageRef, Instruction, InvariantError, VIEScore


def hamilton_oracle(total, weights):
    """Exact-arithmetic largest remainder, written independently of the library."""
    ws = [Fraction(w).limit_denominator(10**9) for w in weights]
    quotas = [total * w / sum(ws) for w in ws]
    floors = [q.numerator // q.denominator for q in quotas]
    left = total - sum(floors)
    ranked = sorted(range(len(ws)), key=lambda i: quotas[i] - floors[i], reverse=True)
    for i in ranked[:left]:
        floors[i] += 1
    return floors


def judge(sc=8, pq=8):
    return Reasoner(ScriptedReasoner({"score": json.dumps({"semantic_consistency": sc, "perceptual_quality": pq})}))


class TestAllocation:
    def test_default_400(self):
        assert largest_remainder(400, (0.31, 0.44, 0.25)) == [124, 176, 100]
        assert list(CompositionTarget().thinking_allocation().values()) == [124, 176, 100]

    def test_exact_quarters(self):
        assert largest_remainder(4, (0.25, 0.5, 0.25)) == [1, 2, 1]

    def test_remainders(self):
        assert largest_remainder(5, (3, 1, 1)) == [3, 1, 1]
        assert largest_remainder(7, (1, 1, 1)) == [3, 2, 2]

    @given(st.integers(0, 5000), st.lists(st.integers(1, 1000), min_size=1, max_size=6))
    def test_matches_oracle(self, total, weights):
        got = largest_remainder(total, weights)
        assert sum(got) == total
        assert sorted(got) == sorted(hamilton_oracle(total, weights))
        for g, w in zip(got, weights):
            assert abs(g - total * w / sum(weights)) < 1

    def test_target_validation(self):
        with pytest.raises(InvariantError, match="fractions"):
            CompositionTarget(fraction_simplified=0.5)
        with pytest.raises(InvariantError, match="triple_ratio"):
            CompositionTarget(triple_ratio=(3, 0, 1))


class TestSingleItems:
    def test_classify(self):
        r = Reasoner(ScriptedReasoner({"classify": "Simple."}))
        assert classify_instruction(Instruction("Remove the red car."), r) is Label.SIMPLE
        r = Reasoner(ScriptedReasoner({"classify": "complex"}))
        assert classify_instruction(Instruction("Make the image more dramatic with a vintage feel"), r) is Label.COMPLEX

    def test_annotate_complex(self):
        r = Reasoner(ScriptedReasoner({"annotate_complex": "Render the leaves yellow and desiccate the leaf tips."}))
        pair = annotate_pair(Instruction("symptoms of potassium deficiency in leaves"), Label.COMPLEX, r)
        assert pair.provenance is Provenance.SIMPLIFIED
        assert pair.concrete_instruction.text == "Render the leaves yellow and desiccate the leaf tips."

    def test_annotate_simple_goes_the_other_way(self):
        r = Reasoner(ScriptedReasoner({"annotate_simple": "make it pop"}))
        pair = annotate_pair(Instruction("Increase the image contrast."), Label.SIMPLE, r)
        assert pair.provenance is Provenance.ABSTRACTED
        assert pair.abstract_instruction.text == "make it pop"
        assert pair.concrete_instruction.text == "Increase the image contrast."

    def test_passthrough_invariant(self):
        pair = passthrough_pair(Instruction("Crop the image."))
        assert pair.abstract_instruction == pair.concrete_instruction
        with pytest.raises(InvariantError):
            ThinkingPair("x", Instruction("a"), Instruction("b"), Provenance.PASSTHROUGH)

    def test_review_verdicts(self):
        pair = ThinkingPair("x", Instruction("make it pop"), Instruction("Increase contrast."), Provenance.ABSTRACTED)
        assert review_pair(pair, Reasoner(ScriptedReasoner({"review": "accept"}))) is ReviewState.ACCEPTED
        assert review_pair(pair, Reasoner(ScriptedReasoner({"review": "reject"}))) is ReviewState.REJECTED

    def test_empty_concrete_rejected_without_call(self):
        backend = ScriptedReasoner({"review": "accept"})
        pair = ThinkingPair("x", Instruction("make it pop"), Instruction("..."), Provenance.SIMPLIFIED)
        assert review_pair(pair, Reasoner(backend)) is ReviewState.REJECTED
        assert backend.calls == []

    def test_review_needs_pending(self):
        pair = ThinkingPair("x", Instruction("a"), Instruction("b"), Provenance.SIMPLIFIED, ReviewState.ACCEPTED)
        with pytest.raises(PreconditionError):
            review_pair(pair, None)


def world_reasoner(store=None, **world):
    b = build_backends({"mode": "simulated", "world": world}, store or ImageStore())
    return b, Reasoner(b.reasoner)


class TestThinkingPipeline:
    def test_composition_400(self, pool_700):
        _, r = world_reasoner()
        result = forge_thinking_pairs(pool_700, r, seed=0)
        dataset = compose_thinking_dataset(result.pairs, CompositionTarget(), seed=0)
        counts = {p: sum(1 for x in dataset if x.provenance is p) for p in Provenance}
        assert [counts[p] for p in Provenance] == [124, 176, 100]
        assert len({x.id for x in dataset}) == 400

    def test_garbage_classifier_goes_to_rejects(self, tmp_path):
        r = Reasoner(ScriptedReasoner({"classify": "banana"}))
        result = forge_thinking_pairs([PoolItem("a", "Remove the car.")], r)
        assert result.pairs == [] and result.rejects[0]["stage"] == "classify"

    def test_empty_instruction_rejected_at_input(self):
        backend = ScriptedReasoner({})
        result = forge_thinking_pairs([PoolItem("a", "   ")], Reasoner(backend))
        assert result.rejects == [{"id": "a", "stage": "input", "error": "empty instruction"}]
        assert backend.calls == []

    def test_missing_passthrough_bucket(self):
        pairs = [ThinkingPair(f"s{i}", Instruction("a"), Instruction(f"b{i}"), Provenance.SIMPLIFIED, ReviewState.ACCEPTED)
                 for i in range(200)]
        pairs += [ThinkingPair(f"a{i}", Instruction(f"x{i}"), Instruction("y"), Provenance.ABSTRACTED, ReviewState.ACCEPTED)
                  for i in range(200)]
        with pytest.raises(ShortfallError, match="passthrough") as err:
            compose_thinking_dataset(pairs)
        assert err.value.deficits == {"passthrough": 100}

    def test_always_reject_is_shortfall(self, tmp_path):
        b, _ = world_reasoner()
        script = {"classify": "complex", "annotate_complex": "Do a concrete thing.", "review": "reject"}
        with pytest.raises(ShortfallError):
            run_thinking_forge(make_pool(5, 5), Reasoner(ScriptedReasoner(script)), tmp_path)
        assert sum(1 for _ in (tmp_path / "rejects.jsonl").open()) == 10

    def test_files_deterministic(self, tmp_path, pool_700):
        outs = []
        for d in ("a", "b"):
            _, r = world_reasoner()
            run_thinking_forge(pool_700, r, tmp_path / d, seed=3, workers=4)
            outs.append({f.name: f.read_bytes() for f in sorted((tmp_path / d).iterdir())})
        assert outs[0] == outs[1]
        assert set(outs[0]) == {"composition_report.json", "rejects.jsonl", "thinking_pairs.jsonl"}


class TestTriples:
    def _sources(self, store, n):
        return [(f"p{i}", store.put(make_png((i % 256, 3, 3), {"i": str(i)})), Instruction("Add snow to the roof."))
                for i in range(n)]

    def test_round_robin(self):
        store = ImageStore()
        editors = [ScriptedGenerator(store) for _ in range(4)]
        for i, e in enumerate(editors):
            e.name = f"e{i}"
        reflector = Reasoner(ScriptedReasoner({"describe": "d", "assess": '{"consistency_score": 9}',
                                               "conclude_multi": "fine <#Success>"}))
        result = build_reflection_triples(self._sources(store, 8), editors, reflector, CompositionTarget(total=8))
        assert result.editor_usage == {"e0": 2, "e1": 2, "e2": 2, "e3": 2}
        assert [len(e.calls) for e in editors] == [2, 2, 2, 2]

    def test_needs_an_editor(self):
        with pytest.raises(PreconditionError):
            build_reflection_triples([], [], judge())

    def test_flaw_free_world_is_all_success(self):
        b, r = world_reasoner(flaw_probability=0.0)
        result = build_reflection_triples(self._sources(b.store, 20), b.editors, r, CompositionTarget(total=20))
        assert result.missing == ["reflection", "failed"]
        assert all(t.outcome is TripleOutcome.SUCCESS and t.generated == t.corrected for t in result.triples)
        assert len(result.triples) == 20

    def test_reflection_items_are_corrected(self):
        b, r = world_reasoner(flaw_probability=1.0, correction_probability=1.0, quality_noise_sd=0.0)
        result = build_reflection_triples(self._sources(b.store, 10), b.editors[:4], r, CompositionTarget(total=10))
        for t in result.triples:
            assert t.outcome is TripleOutcome.REFLECTION
            assert t.reflection_instruction.text.startswith("Remove ")
            assert b.world.flaws(t.corrected) == []

    def test_success_identity_invariant(self):
        a, c = ImageRef.from_bytes(make_png((1, 1, 1)), "a"), ImageRef.from_bytes(make_png((2, 2, 2)), "c")
        with pytest.raises(InvariantError, match="corrected"):
            ReflectionTriple("x", a, Instruction("i"), a, None, c, TripleOutcome.SUCCESS)
        with pytest.raises(InvariantError, match="reflection_instruction"):
            ReflectionTriple("x", a, Instruction("i"), a, None, c, TripleOutcome.REFLECTION)

    def test_tag_viescores(self):
        store = ImageStore()
        ref = store.put(make_png((1, 2, 3)))
        t = ReflectionTriple("x", ref, Instruction("i"), ref, None, ref, TripleOutcome.SUCCESS)
        tagged, rejects = tag_viescores([t], judge(8, 8))
        assert tagged[0].vie == VIEScore(8, 8) and tagged[0].vie.overall == 8.0 and rejects == []
        tagged, rejects = tag_viescores([t], judge(-1, 8))
        assert tagged == [] and rejects[0]["stage"] == "vie"

    def test_world_judge_matches_quality(self):
        b, r = world_reasoner(flaw_probability=0.5, correction_probability=1.0, quality_noise_sd=0.0)
        result = build_reflection_triples(self._sources(b.store, 12), b.editors, r, CompositionTarget(total=12))
        tagged, _ = tag_viescores(result.triples, r)
        assert all(t.vie == b.world.quality(t.corrected) for t in tagged)

    def test_review_queue_rejects_persist(self, tmp_path):
        b, r = world_reasoner(flaw_probability=0.0)
        queue = tmp_path / "q.jsonl"
        build_reflection_triples(self._sources(b.store, 6), b.editors, r, CompositionTarget(total=6), review_queue=queue)
        rows = [json.loads(x) for x in queue.read_text().splitlines()]
        rows[0]["verdict"] = "reject"
        queue.write_text("".join(json.dumps(x) + "\n" for x in rows))
        result = build_reflection_triples(self._sources(b.store, 6), b.editors, r, CompositionTarget(total=6),
                                          review_queue=queue)
        assert result.screened_out == 1 and rows[0]["id"] not in {t.id for t in result.triples}
        assert json.loads(queue.read_text().splitlines()[0])["verdict"] == "reject"

    def test_triple_forge_ratio_500(self, tmp_path):
        store = ImageStore(tmp_path / "a")
        b = build_backends({"mode": "simulated", "world": {"flaw_probability": 0.5, "correction_probability": 1.0,
                                                           "quality_noise_sd": 0.0}}, store)
        pool = [PoolItem(f"p{i:03d}", "Add snow to the roof.") for i in range(500)]
        report = run_triple_forge(pool, b.editors, Reasoner(b.reasoner), store, tmp_path / "a")
        counts = report["counts"]
        unit = counts["failed"]
        assert unit > 0
        assert abs(counts["success"] / unit - 3) <= 0.3
        assert abs(counts["reflection"] / unit - 1) <= 0.1
        for line in (tmp_path / "a" / "reflection_triples.jsonl").read_text().splitlines():
            row = json.loads(line)
            if row["outcome"] == "success":
                assert row["generated"]["sha256"] == row["corrected"]["sha256"]

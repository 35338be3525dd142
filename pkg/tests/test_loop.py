import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reasonloop.backends import BackendUnreachable, ScriptedGenerator, ScriptedReasoner, SimulatedWorld, WorldConfig
from reasonloop.images import ImageStore, make_png
from reasonloop.loop import cumulative_best, derive_seed, run_session, select_stopping_round, session_uuid
from reasonloop.trace import serialize_trace
from reasonloop.types import Instruction, LoopMode, LoopPolicy, ReflectionVariant, SessionStatus, Tag, VIEScore


def fenced(obj) -> str:
    return "```json\n" + json.dumps(obj) + "\n```"


def score(sc, pq):
    return fenced({"semantic_consistency": sc, "perceptual_quality": pq})


CONCLUSION = {
    Tag.SUCCESS: "all good <#Success>",
    Tag.REFLECT: "sky too dark <#Reflection> Brighten the sky.",
    Tag.FAILED: "wrong subject <#Failed>",
}


def script(tags, scores):
    return {
        "think": "Add snow to the ground.",
        "describe": "a snowy park",
        "assess": fenced({"consistency_score": 5}),
        "conclude_multi": [CONCLUSION[t] for t in tags] or ["x <#Success>"],
        "score": [score(*s) for s in scores],
    }


@pytest.fixture
def store():
    return ImageStore()


@pytest.fixture
def ref(store):
    return store.put(make_png((10, 20, 30)))


class TestSelection:
    def test_argmax(self):
        assert select_stopping_round([(0, 6.0), (1, 7.2), (2, 7.1)]) == 1

    def test_tie_goes_to_earliest(self):
        assert select_stopping_round([(1, 7.0), (0, 7.0)]) == 0

    def test_singleton(self):
        assert select_stopping_round([(0, 3.3)]) == 0

    def test_accepts_vie(self):
        assert select_stopping_round([(0, VIEScore(4, 4)), (1, VIEScore(9, 4))]) == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            select_stopping_round([])


class TestCumulativeBest:
    def test_increasing_row_unchanged(self):
        row = [58.64, 60.08, 60.93, 60.99, 61.07]
        assert cumulative_best(row) == row

    def test_dip_is_carried(self):
        assert cumulative_best([58.64, 58.84, 59.00, 59.24, 59.09]) == [58.64, 58.84, 59.00, 59.24, 59.24]

    def test_decreasing(self):
        assert cumulative_best([5, 4, 3]) == [5, 5, 5]

    def test_empty(self):
        with pytest.raises(ValueError):
            cumulative_best([])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
    def test_monotone_and_dominating(self, xs):
        out = cumulative_best(xs)
        assert all(a <= b for a, b in zip(out, out[1:]))
        assert all(o >= x for o, x in zip(out, xs))
        assert out[-1] == max(xs)


class TestSeeds:
    def test_derive_seed_is_stable(self):
        assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
        assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
        assert 0 <= derive_seed(0) < 2**64

    def test_session_uuid(self):
        assert session_uuid(3) == session_uuid(3) != session_uuid(4)
        assert session_uuid(3).version == 4


class TestModes:
    def test_base_makes_no_reasoner_calls(self, store, ref):
        r, g = ScriptedReasoner({}), ScriptedGenerator(store)
        session, outcome = run_session(ref, Instruction("x"), LoopPolicy(LoopMode.BASE, 0), (r, g))
        assert r.calls == [] and len(g.calls) == 1
        assert g.calls[0].instruction.text == "x"
        assert outcome.chosen_round == 0 and session.thought is None

    def test_thinking_conditions_on_thought(self, store, ref):
        r, g = ScriptedReasoner(script([], [])), ScriptedGenerator(store)
        session, _ = run_session(ref, Instruction("winter please"), LoopPolicy(LoopMode.THINKING, 0), (r, g))
        assert g.calls[0].instruction.text == "Add snow to the ground."
        assert [c.purpose for c in r.calls] == ["think"]

    def test_refinement_edits_previous_image(self, store, ref):
        r = ScriptedReasoner(script([Tag.REFLECT, Tag.SUCCESS], [(5, 5), (7, 7)]))
        g = ScriptedGenerator(store)
        session, outcome = run_session(ref, Instruction("winter"), LoopPolicy(), (r, g))
        assert g.calls[1].reference == session.rounds[0].generated
        assert g.calls[1].instruction.text == "Brighten the sky."
        assert session.stop_reason == "success_tag"
        assert outcome.chosen_round == 1

    def test_scoring_and_reflection_judge_original_instruction(self, store, ref):
        r = ScriptedReasoner(script([Tag.SUCCESS], [(5, 5)]))
        run_session(ref, Instruction("winter"), LoopPolicy(), (r, ScriptedGenerator(store)))
        judged = [dict(c.slots)["instruction"] for c in r.calls if c.purpose in ("score", "describe", "conclude_multi")]
        assert set(judged) == {"winter"}

    def test_failed_stops_generation(self, store, ref):
        r = ScriptedReasoner(script([Tag.FAILED], [(3, 3)]))
        g = ScriptedGenerator(store)
        session, outcome = run_session(ref, Instruction("winter"), LoopPolicy(max_reflection_rounds=4), (r, g))
        assert session.status is SessionStatus.FAILED and len(g.calls) == 1
        assert outcome.final_image == session.rounds[0].generated

    def test_ignored_success_restarts_from_reference(self, store, ref):
        r = ScriptedReasoner(script([Tag.SUCCESS], [(5, 5), (6, 6), (4, 4)]))
        g = ScriptedGenerator(store)
        policy = LoopPolicy(stop_on_success_tag=False)
        session, outcome = run_session(ref, Instruction("winter"), policy, (r, g))
        assert len(g.calls) == 3 and all(c.reference == ref for c in g.calls)
        assert session.stop_reason == "budget_exhausted" and outcome.chosen_round == 1

    def test_reroll_uses_fresh_seeds_and_keeps_best(self, store, ref):
        r = ScriptedReasoner(script([], [(5, 5), (8, 8), (6, 6)]))
        g = ScriptedGenerator(store)
        policy = LoopPolicy(LoopMode.REROLL, 0, reroll_attempts=2)
        session, outcome = run_session(ref, Instruction("winter"), policy, (r, g))
        assert len({c.seed for c in g.calls}) == 3
        assert all(c.reference == ref for c in g.calls)
        assert outcome.chosen_round == 1 and session.stop_reason == "reroll_complete"
        assert not any(c.purpose.startswith("conclude") for c in r.calls)

    @pytest.mark.parametrize("variant, per_round", [("multi_round", 3), ("single_image", 2), ("dual_image", 1)])
    def test_reasoner_calls_recorded(self, store, ref, variant, per_round):
        s = script([Tag.REFLECT, Tag.SUCCESS], [(5, 5), (7, 7)])
        s["conclude_single"] = s["conclude_dual"] = s["conclude_multi"]
        policy = LoopPolicy(reflection_variant=ReflectionVariant(variant))
        session, _ = run_session(ref, Instruction("w"), policy, (ScriptedReasoner(s), ScriptedGenerator(store)))
        assert [r.reasoner_calls for r in session.rounds] == [per_round, per_round]


class TestFailures:
    def test_generator_down_mid_session_keeps_best_round(self, store, ref):
        ok = ScriptedGenerator(store)

        class Flaky:
            store = ok.store

            def __init__(self):
                self.n = 0

            def edit(self, request):
                self.n += 1
                if self.n == 2:
                    raise BackendUnreachable("dit down", request.request_id)
                return ok.edit(request)

        r = ScriptedReasoner(script([Tag.REFLECT], [(6, 6)]))
        session, outcome = run_session(ref, Instruction("w"), LoopPolicy(), (r, Flaky()))
        assert session.status is SessionStatus.STOPPED
        assert "round 1" in session.stop_reason
        assert outcome.chosen_round == 0

    def test_think_failure_stops_without_rounds(self, store, ref):
        r = ScriptedReasoner({"think": BackendUnreachable("mllm down")})
        session, outcome = run_session(ref, Instruction("w"), LoopPolicy(), (r, ScriptedGenerator(store)))
        assert session.status is SessionStatus.STOPPED and outcome is None and session.rounds == ()

    def test_protocol_error_aborts_round(self, store, ref):
        s = script([], [(6, 6)])
        s["conclude_multi"] = "no marker here"
        session, outcome = run_session(ref, Instruction("w"), LoopPolicy(), (ScriptedReasoner(s), ScriptedGenerator(store)))
        assert session.status is SessionStatus.STOPPED
        assert session.rounds[0].error and session.rounds[0].reasoner_calls == 4
        assert outcome.chosen_round == 0


# --- laws over random conclusion sequences ------------------------------------

@settings(max_examples=60, deadline=None)
@given(
    budget=st.integers(0, 4),
    tags=st.lists(st.sampled_from(list(Tag)), min_size=1, max_size=5),
    scores=st.lists(st.tuples(st.integers(0, 10), st.integers(0, 10)), min_size=1, max_size=5),
    stop_on_success=st.booleans(),
)
def test_budget_stopping_and_failed_laws(budget, tags, scores, stop_on_success):
    store = ImageStore()
    ref = store.put(make_png((1, 2, 3)))
    r, g = ScriptedReasoner(script(tags, scores)), ScriptedGenerator(store)
    policy = LoopPolicy(max_reflection_rounds=budget, stop_on_success_tag=stop_on_success)
    session, outcome = run_session(ref, Instruction("w"), policy, (r, g), seed=5)
    reflections = sum(1 for c in r.calls if c.purpose == "conclude_multi")
    assert reflections <= budget
    assert len(g.calls) <= budget + 1
    assert outcome.final_image == session.rounds[select_stopping_round(
        [(x.index, x.vie) for x in session.rounds])].generated
    for i, rnd in enumerate(session.rounds):
        if rnd.conclusion is not None and rnd.conclusion.tag is Tag.FAILED:
            assert i == len(session.rounds) - 1 and session.status is SessionStatus.FAILED


class TestDeterminism:
    def _trace(self, seed):
        store = ImageStore()
        ref = store.put(make_png((4, 4, 4)))
        world = SimulatedWorld(WorldConfig(0.5, 0.9, 0.3), seed=1, store=store)
        session, _ = run_session(ref, Instruction("make it snowy"), LoopPolicy(), (world.reasoner(), world.generator()),
                                 seed=seed)
        return serialize_trace(session)

    def test_same_seed_same_bytes(self):
        assert self._trace(9) == self._trace(9)

    def test_seed_matters(self):
        assert self._trace(9) != self._trace(10)

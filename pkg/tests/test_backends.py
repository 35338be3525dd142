import base64
import json

import httpx
import numpy as np
import pytest

from reasonloop.backends import (
    BackendHTTPError,
    BackendTimeout,
    BackendUnreachable,
    ChatRequest,
    ConfigError,
    ContentPolicyError,
    EditRequest,
    HTTPGenerator,
    HTTPReasoner,
    MalformedResponse,
    Message,
    PreconditionError,
    RetryPolicy,
    ScriptedGenerator,
    ScriptedReasoner,
    SimulatedWorld,
    TextPart,
    WorldConfig,
    build_backends,
    chat_complete,
    edit_image,
    load_backend_config,
    request_hash,
    simulated_world,
)
from reasonloop.backends.base import ImagePart
from reasonloop.images import ImageStore, make_png, read_png_text
from reasonloop.loop import derive_seed, run_session
from reasonloop.types import ImageRef, Instruction, InvariantError, LoopMode, LoopPolicy


@pytest.fixture
def store():
    return ImageStore()


@pytest.fixture
def ref(store):
    return store.put(make_png((3, 4, 5)))


def chat(text="hello", seed=None, images=()):
    parts = [ImagePart(i) for i in images] + [TextPart(text)]
    return ChatRequest(messages=(Message("user", parts),), seed=seed, purpose="describe")


class TestRequests:
    def test_chat_request_needs_user_message(self):
        with pytest.raises(PreconditionError):
            ChatRequest(messages=(Message("system", (TextPart("x"),)),))

    def test_steps_zero_is_precondition_error(self, ref):
        with pytest.raises(PreconditionError, match="steps"):
            EditRequest(ref, Instruction("x"), seed=1, steps=0)

    def test_request_hash_ignores_nothing_on_the_wire(self, ref):
        assert request_hash(chat("a")) != request_hash(chat("b"))
        assert request_hash(chat("a", seed=1)) != request_hash(chat("a", seed=2))
        assert request_hash(chat("a")) == request_hash(chat("a"))


class TestScripted:
    def test_hash_script_echo(self):
        req = chat("ping")
        backend = ScriptedReasoner({request_hash(req): "ok"})
        assert chat_complete(backend, req).text == "ok"

    def test_list_entries_consumed_then_repeat(self):
        backend = ScriptedReasoner({"describe": ["a", "b"]})
        assert [chat_complete(backend, chat()).text for _ in range(3)] == ["a", "b", "b"]

    def test_empty_text_is_malformed(self):
        with pytest.raises(MalformedResponse):
            chat_complete(ScriptedReasoner({"*": "  "}), chat())

    def test_generator_fixture_by_hash(self, store, ref):
        fixture = make_png((200, 0, 0), {"fixture": "1"})
        req = EditRequest(ref, Instruction("redden"), seed=3)
        gen = ScriptedGenerator(store, {request_hash(req): fixture})
        out = edit_image(gen, req)
        assert out.sha256 == ImageRef.from_bytes(fixture, "x").sha256

    def test_unscripted_generator_is_deterministic(self, store, ref):
        req = EditRequest(ref, Instruction("redden"), seed=3)
        assert edit_image(ScriptedGenerator(store), req) == edit_image(ScriptedGenerator(store), req)


# --- HTTP -------------------------------------------------------------------


def _client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def _reasoner(handler, store, budget=2, sleeps=None):
    return HTTPReasoner("http://mllm.test/v1/chat/completions", "m", store, api_key_env="RL_TEST_KEY",
                        retry=RetryPolicy(retry_budget=budget), client=_client(handler),
                        sleep=(sleeps.append if sleeps is not None else lambda s: None))


class TestHTTPReasoner:
    def test_wire_format_and_auth(self, store, ref, monkeypatch):
        monkeypatch.setenv("RL_TEST_KEY", "sekrit")
        seen = {}

        def handler(request: httpx.Request):
            seen["auth"] = request.headers.get("authorization")
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json={"choices": [{"message": {"content": "a park"}}],
                                             "usage": {"prompt_tokens": 5, "completion_tokens": 2}})

        result = chat_complete(_reasoner(handler, store), chat("describe", seed=9, images=[ref]))
        assert result.text == "a park"
        assert result.usage == {"prompt_tokens": 5, "completion_tokens": 2}
        assert seen["auth"] == "Bearer sekrit"
        content = seen["body"]["messages"][0]["content"]
        assert content[0]["image_url"]["url"].startswith("data:image/png;base64,")
        assert base64.b64decode(content[0]["image_url"]["url"].split(",", 1)[1]) == store.read(ref)
        assert seen["body"]["seed"] == 9

    def test_unreachable_gives_three_attempts(self, store):
        calls = []

        def handler(request):
            calls.append(1)
            raise httpx.ConnectError("refused")

        sleeps = []
        with pytest.raises(BackendUnreachable) as err:
            chat_complete(_reasoner(handler, store, budget=2, sleeps=sleeps), chat())
        assert len(calls) == 3
        assert sleeps == [0.25, 0.5]
        assert [r.attempt for r in err.value.retries] == [1, 2]
        assert err.value.request_id

    def test_timeout_class(self, store):
        def handler(request):
            raise httpx.ReadTimeout("slow")

        with pytest.raises(BackendTimeout):
            chat_complete(_reasoner(handler, store, budget=0), chat())

    def test_5xx_then_success_records_retry(self, store):
        replies = iter([httpx.Response(503, text="busy"),
                        httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})])
        result = chat_complete(_reasoner(lambda r: next(replies), store), chat())
        assert result.text == "ok"
        assert len(result.retries) == 1 and "503" in result.retries[0].error

    def test_4xx_not_retried(self, store):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(404, text="nope")

        with pytest.raises(BackendHTTPError) as err:
            chat_complete(_reasoner(handler, store), chat())
        assert err.value.status == 404 and len(calls) == 1

    def test_malformed_body(self, store):
        with pytest.raises(MalformedResponse):
            chat_complete(_reasoner(lambda r: httpx.Response(200, json={"nope": 1}), store), chat())
        with pytest.raises(MalformedResponse):
            chat_complete(_reasoner(lambda r: httpx.Response(200, text="<html>"), store), chat())


class TestHTTPGenerator:
    def _gen(self, handler, store):
        return HTTPGenerator("http://dit.test/edit", "dit", store, client=_client(handler), sleep=lambda s: None)

    def test_returns_recorded_image(self, store, ref):
        out_png = make_png((9, 9, 9))

        def handler(request):
            body = json.loads(request.content)
            assert body["num_inference_steps"] == 28 and body["guidance_scale"] == 4.0
            return httpx.Response(200, json={"data": [{"b64_json": base64.b64encode(out_png).decode()}]})

        image = edit_image(self._gen(handler, store), EditRequest(ref, Instruction("x"), seed=1))
        assert store.read(image) == out_png

    def test_refusal_is_distinct(self, store, ref):
        def handler(request):
            return httpx.Response(400, json={"error": {"code": "content_policy_violation", "message": "no"}})

        with pytest.raises(ContentPolicyError):
            edit_image(self._gen(handler, store), EditRequest(ref, Instruction("x"), seed=1))

    def test_non_image_payload(self, store, ref):
        def handler(request):
            return httpx.Response(200, json={"data": [{"b64_json": base64.b64encode(b"text").decode()}]})

        with pytest.raises(MalformedResponse):
            edit_image(self._gen(handler, store), EditRequest(ref, Instruction("x"), seed=1))


# --- simulated world --------------------------------------------------------


class TestWorld:
    def test_config_validation(self):
        with pytest.raises(InvariantError, match="flaw_probability"):
            WorldConfig(flaw_probability=1.5)
        with pytest.raises(InvariantError, match="quality_noise_sd"):
            WorldConfig(quality_noise_sd=-1)

    def test_seed_7_twice_is_identical(self, ref):
        def once():
            s = ImageStore()
            r = s.put(make_png((3, 4, 5)))
            _, gen = simulated_world(WorldConfig(), seed=7, store=s)
            return edit_image(gen, EditRequest(r, Instruction("make it snowy"), seed=11))

        assert once() == once()

    def test_state_lives_in_the_image(self, store, ref):
        world = SimulatedWorld(WorldConfig(flaw_probability=1.0), seed=1, store=store)
        img = edit_image(world.generator(), EditRequest(ref, Instruction("make it snowy"), seed=1))
        assert "reasonloop-world" in read_png_text(store.read(img))
        assert len(world.flaws(img)) == 1

    def test_flaw_free_world_succeeds_at_round_zero(self, store, ref):
        backends = simulated_world(WorldConfig(flaw_probability=0.0), seed=2, store=store)
        session, outcome = run_session(ref, Instruction("make it snowy"), LoopPolicy(), backends, seed=1)
        assert outcome.rounds_executed == 1 and session.status.value == "Succeeded"

    def test_certain_flaw_certain_fix(self, store, ref):
        world = SimulatedWorld(WorldConfig(1.0, 1.0, 0.0), seed=2, store=store)
        session, outcome = run_session(ref, Instruction("make it snowy"), LoopPolicy(), (world.reasoner(), world.generator()), seed=1)
        assert world.flaws(session.rounds[-1].generated) == []
        assert outcome.rounds_executed == 2
        assert outcome.chosen_round == 1

    def test_noise_free_score_is_base_quality(self, store, ref):
        world = SimulatedWorld(WorldConfig(0.0, 1.0, 0.0, 8.0), seed=0, store=store)
        img = edit_image(world.generator(), EditRequest(ref, Instruction("x"), seed=1))
        q = world.quality(img)
        assert (q.semantic_consistency, q.perceptual_quality, q.overall) == (8.0, 8.0, 8.0)

    def test_mean_residual_flaws_match_oracle(self, store):
        """Residual flaws after two reflections, compared with an independent Monte-Carlo oracle."""
        cfg = WorldConfig(0.5, 0.9, 0.3, 8.0)
        world = SimulatedWorld(cfg, seed=0, store=store)
        backends = (world.reasoner(), world.generator())
        residual = []
        for i in range(200):
            ref = store.put(make_png((i % 256, 1, 2), {"i": str(i)}))
            session, _ = run_session(ref, Instruction("make it snowy"), LoopPolicy(), backends,
                                     seed=derive_seed(0, "session", i))
            residual.append(len(world.flaws(session.rounds[-1].generated)))
        rng = np.random.default_rng(0)
        n = 200_000
        flawed = rng.random(n) < cfg.flaw_probability
        for _ in range(2):
            flawed &= rng.random(n) >= cfg.correction_probability
        expected = flawed.mean()
        assert abs(expected - 0.5 * 0.1**2) < 0.002
        se = max(np.std(residual, ddof=1), np.sqrt(expected * (1 - expected))) / np.sqrt(200)
        assert abs(np.mean(residual) - expected) <= 3 * se


class TestConfig:
    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(ConfigError, match="nope.json"):
            load_backend_config(tmp_path / "nope.json")

    def test_live_needs_endpoints(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"mode": "live", "reasoner": {"endpoint": "x"}}))
        with pytest.raises(ConfigError, match="reasoner"):
            load_backend_config(p)

    def test_simulated_editors(self, store):
        b = build_backends({"mode": "simulated", "editors": [{"name": "a"}, {"name": "b", "correction_probability": 0}]},
                           store)
        assert [e.name for e in b.editors] == ["a", "b"]
        assert b.editors[1].config.correction_probability == 0

    def test_live_mode_builds_http_clients(self, store):
        cfg = {"mode": "live", "reasoner": {"endpoint": "http://a", "model": "m", "api_key_env": "K"},
               "generator": {"endpoint": "http://b", "model": "g", "retry_budget": 1}}
        b = build_backends(cfg, store)
        assert isinstance(b.reasoner, HTTPReasoner) and b.generator.retry.retry_budget == 1

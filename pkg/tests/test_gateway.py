import difflib
import json
import math

import httpx
import pytest
from hypothesis import given, strategies as st

from thinkroute.checklist import FAVORS_NON_THINK, FAVORS_THINK, ChecklistQuestion, default_checklist
from thinkroute.gateway import (
    DROPPED_IDS,
    HARD_PROBE,
    NON_THINK,
    THINK,
    TOKEN_ESTIMATE,
    UNINFORMATIVE,
    GatewayConfig,
    GatewayError,
    HttpBackend,
    RankingParseError,
    StubBackend,
    build_messages,
    collect_dual_mode,
    load_dual_mode,
    parse_ranking,
    probe_checklist,
    rank,
    render_prompt,
)
from thinkroute.io import read_records
from thinkroute.ranking import PARSE_FAILURE, RankingInstance

CFG = GatewayConfig(max_concurrency=2)


def instance(iid="q1", n=4):
    cands = tuple((str(i + 1), f"passage {i + 1}") for i in range(n))
    return RankingInstance(iid, "IR", cands, {"2": 1}, n, context="what is a ranking")


class TestParse:
    def test_examples(self):
        assert parse_ranking("<output>Ranking result: [3, 1, 2]</output>", ["1", "2", "3"])[0].order == ("3", "1", "2")
        raw = "<thought>maybe [1, 2]?</thought><output>Ranking result: [2, 1]</output>"
        assert parse_ranking(raw, ["1", "2"])[0].order == ("2", "1")
        with pytest.raises(RankingParseError):
            parse_ranking("no brackets here", ["1"])
        with pytest.raises(RankingParseError):
            parse_ranking("<output>nothing</output>", ["1"])

    def test_drops_unknown_and_duplicates(self):
        ranking, dropped = parse_ranking("<output>[2, 9, 2, 'a']</output>", ["1", "2", "a"])
        assert ranking.order == ("2", "a") and dropped

    def test_unterminated_block(self):
        assert parse_ranking("<output>Ranking result: [1]", ["1"])[0].order == ("1",)

    @given(st.lists(st.sampled_from(["1", "2", "3", "x", " 4", ""]), max_size=10))
    def test_never_invalid(self, items):
        ranking, _ = parse_ranking("<output>[" + ",".join(items) + "]</output>", ["1", "2", "3", "4"])
        assert len(set(ranking.order)) == len(ranking.order)
        assert set(ranking.order) <= {"1", "2", "3", "4"}


class TestPrompts:
    def test_modes_differ_only_in_prefix(self):
        inst = instance()
        think, non = build_messages(inst, THINK), build_messages(inst, NON_THINK)
        assert think[0] == non[0]
        assert think[1] == {"role": "assistant", "content": "<thought>"}
        assert non[1] == {"role": "assistant", "content": "<output>"}
        a = json.dumps(think).splitlines()
        b = json.dumps(non).splitlines()
        diff = [d for d in difflib.ndiff(a, b) if d[0] in "+-"]
        assert all("<thought>" in d or "<output>" in d for d in diff)

    def test_self_select_has_no_prefill(self):
        assert len(build_messages(instance(), "SelfSelect")) == 1
        with pytest.raises(ValueError):
            build_messages(instance(), "Ponder")

    def test_rec_prompt(self):
        inst = RankingInstance("r", "Rec", (("a", "x"), ("b", "y")), {"a": 1}, 2, history=("h1", "h2"))
        text = render_prompt(inst)
        assert "- h1\n- h2" in text and "[a] x" in text


class TestRank:
    def test_stub_echo(self):
        backend = StubBackend(think_tokens=300, non_think_tokens=40)
        inst = instance()
        o = rank(inst, NON_THINK, backend, CFG)
        assert o.ranking.order == ("1", "2", "3", "4") and o.tokens == 40 and not o.flags
        t = rank(inst, THINK, backend, CFG)
        assert t.tokens == 300 and t.raw_text.startswith("<thought>")
        assert backend.calls[-1][-1]["content"] == "<thought>"

    def test_usage_missing(self):
        o = rank(instance(), NON_THINK, StubBackend(report_usage=False), CFG)
        assert TOKEN_ESTIMATE in o.flags and o.tokens > 0

    def test_parse_failure(self):
        class Garbage(StubBackend):
            def complete(self, messages, **kw):
                return {"choices": [{"message": {"content": "I refuse"}}], "usage": {"completion_tokens": 3}}

        o = rank(instance(), THINK, Garbage(), CFG)
        assert o.parse_failed and o.ranking.order == () and PARSE_FAILURE in o.flags

    def test_dropped_flag(self):
        class Extra(StubBackend):
            def complete(self, messages, **kw):
                return {"choices": [{"message": {"content": "Ranking result: [1, 99]</output>"}}]}

        o = rank(instance(), NON_THINK, Extra(), CFG)
        assert DROPPED_IDS in o.flags and o.ranking.order == ("1",)

    def test_malformed_response(self):
        class Broken(StubBackend):
            def complete(self, messages, **kw):
                return {"nope": 1}

        with pytest.raises(GatewayError):
            rank(instance(), NON_THINK, Broken(), CFG)


class TestProbe:
    def test_logits(self):
        backend = StubBackend(probe_logits=lambda prompt, q: (2.0, 0.0))
        res = probe_checklist(instance(), default_checklist(), backend, CFG)
        assert len(res.p_yes) == 10
        assert all(p == pytest.approx(0.8808, abs=1e-4) for p in res.p_yes.values())
        assert res.flags is None

    def test_hard_probe(self):
        backend = StubBackend(probe_logits=lambda prompt, q: (1.0, 0.0))
        cfg = GatewayConfig(supports_logprobs=False)
        res = probe_checklist(instance(), default_checklist()[:2], backend, cfg)
        assert set(res.p_yes.values()) == {1.0}
        assert set(res.flags.values()) == {HARD_PROBE}

    def test_uninformative(self):
        backend = StubBackend(probe_tokens=())
        res = probe_checklist(instance(), default_checklist()[:2], backend, CFG)
        assert set(res.p_yes.values()) == {0.5}
        assert set(res.flags.values()) == {UNINFORMATIVE}

    def test_one_sided_logprob(self):
        backend = StubBackend(probe_logits=lambda p, q: (3.0, 0.0), probe_tokens=("Yes",))
        res = probe_checklist(instance(), default_checklist()[:1], backend, CFG)
        assert 0.5 < next(iter(res.p_yes.values())) < 1.0

    def test_questions_are_isolated(self):
        backend = StubBackend()
        qs = [ChecklistQuestion("t", "Is it hard?", FAVORS_THINK, "p"), ChecklistQuestion("n", "Is it easy?", FAVORS_NON_THINK, "p")]
        probe_checklist(instance(), qs, backend, CFG)
        prompts = [c[0]["content"] for c in backend.calls]
        assert len(prompts) == 2
        assert sum("Is it hard?" in p for p in prompts) == 1 and sum("Is it easy?" in p for p in prompts) == 1

    def test_deterministic_default(self):
        a = probe_checklist(instance(), default_checklist(), StubBackend(), CFG)
        b = probe_checklist(instance(), default_checklist(), StubBackend(), CFG)
        assert a == b


class TestCollect:
    def test_three_instances(self, tmp_path):
        insts = [instance(f"q{i}") for i in range(3)]
        out = tmp_path / "log.jsonl"
        stats = collect_dual_mode(insts, StubBackend(), CFG, out)
        assert stats == {"skipped": 0, "written": 3, "failed": 0}
        recs = load_dual_mode(out)
        assert set(recs) == {"q0", "q1", "q2"}
        first = out.read_bytes()
        out2 = tmp_path / "log2.jsonl"
        collect_dual_mode(insts, StubBackend(), CFG, out2)
        assert out2.read_bytes() == first

    def test_resume(self, tmp_path):
        insts = [instance(f"q{i}") for i in range(4)]
        out = tmp_path / "log.jsonl"
        collect_dual_mode(insts[:2], StubBackend(), CFG, out)
        backend = StubBackend()
        stats = collect_dual_mode(insts, backend, CFG, out)
        assert stats["skipped"] == 2 and stats["written"] == 2
        assert len(backend.calls) == 4  # two modes for each new instance only
        _, records = read_records(out)
        assert [r["instance_id"] for r in records] == ["q0", "q1", "q2", "q3"]

    def test_errors_recorded_and_retried(self, tmp_path):
        class Flaky(StubBackend):
            def complete(self, messages, **kw):
                if "FAIL" in messages[0]["content"]:
                    raise GatewayError("boom")
                return super().complete(messages, **kw)

        bad = RankingInstance("bad", "IR", (("1", "a"), ("2", "b")), {"1": 1}, 2, context="FAIL")
        out = tmp_path / "log.jsonl"
        stats = collect_dual_mode([instance("ok"), bad], Flaky(), CFG, out)
        assert stats["failed"] == 1
        _, records = read_records(out)
        assert records[-1] == {"instance_id": "bad", "error": "boom"}
        assert set(load_dual_mode(out)) == {"ok"}
        stats = collect_dual_mode([instance("ok"), bad], StubBackend(), CFG, out)
        assert stats == {"skipped": 1, "written": 1, "failed": 0}
        assert set(load_dual_mode(out)) == {"ok", "bad"}
        _, records = read_records(out)
        assert len(records) == 2


class TestHttp:
    def reply(self):
        return {"choices": [{"message": {"role": "assistant", "content": "Ranking result: [2, 1]</output>"}}], "usage": {"completion_tokens": 7}}

    def test_payload_and_auth(self, monkeypatch):
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["auth"] = request.headers.get("authorization")
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json=self.reply())

        monkeypatch.setenv("MY_KEY", "sekrit")
        cfg = GatewayConfig(base_url="http://llm.test/v1/", api_key_env="MY_KEY", model="m")
        backend = HttpBackend(cfg, client=httpx.Client(transport=httpx.MockTransport(handler)))
        o = rank(instance(n=2), NON_THINK, backend, cfg)
        assert o.ranking.order == ("2", "1") and o.tokens == 7
        assert seen["url"] == "http://llm.test/v1/chat/completions"
        assert seen["auth"] == "Bearer sekrit"
        assert seen["body"]["messages"][-1] == {"role": "assistant", "content": "<output>"}
        assert seen["body"]["model"] == "m"

    def test_retries_then_succeeds(self):
        calls = []

        def handler(request):
            calls.append(1)
            if len(calls) < 3:
                return httpx.Response(503)
            return httpx.Response(200, json=self.reply())

        sleeps = []
        cfg = GatewayConfig(max_retries=3, backoff=0.1)
        backend = HttpBackend(cfg, client=httpx.Client(transport=httpx.MockTransport(handler)), sleep=sleeps.append)
        backend.complete([], max_tokens=5, temperature=0)
        assert len(calls) == 3 and sleeps == [0.1, 0.2]

    def test_gives_up(self):
        def handler(request):
            raise httpx.ConnectError("down")

        cfg = GatewayConfig(max_retries=2)
        backend = HttpBackend(cfg, client=httpx.Client(transport=httpx.MockTransport(handler)), sleep=lambda s: None)
        with pytest.raises(GatewayError, match="3 attempts"):
            backend.complete([], max_tokens=5, temperature=0)

    def test_client_error_not_retried(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(400, text="bad request")

        backend = HttpBackend(GatewayConfig(), client=httpx.Client(transport=httpx.MockTransport(handler)), sleep=lambda s: None)
        with pytest.raises(GatewayError, match="400"):
            backend.complete([], max_tokens=5, temperature=0)
        assert len(calls) == 1

    def test_logprob_request(self):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            top = [{"token": "Yes", "logprob": -0.1}, {"token": "No", "logprob": -2.4}]
            return httpx.Response(200, json={"choices": [{"message": {"content": "Yes"}, "logprobs": {"content": [{"token": "Yes", "logprob": -0.1, "top_logprobs": top}]}}]})

        cfg = GatewayConfig(top_logprobs=5)
        backend = HttpBackend(cfg, client=httpx.Client(transport=httpx.MockTransport(handler)))
        res = probe_checklist(instance(), default_checklist()[:1], backend, cfg)
        assert seen["logprobs"] is True and seen["top_logprobs"] == 5 and seen["max_tokens"] == 1
        assert next(iter(res.p_yes.values())) == pytest.approx(1 / (1 + math.exp(-2.3)))

    def test_config_validation(self):
        for bad in ({"timeout": 0}, {"max_retries": -1}, {"max_concurrency": 0}):
            with pytest.raises(ValueError):
                GatewayConfig(**bad)

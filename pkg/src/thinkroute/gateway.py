"""Chat-completion client that forces Think / Non-Think via an assistant prefix.

Two backends share one interface: :class:`HttpBackend` speaks the
OpenAI-compatible ``/chat/completions`` shape; :class:`StubBackend` is a
deterministic offline stand-in used by tests and the synthetic pipeline.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from .checklist import ChecklistQuestion, ProbeResult, extract_yes_no
from .io import append_record, iter_lines, write_records
from .ranking import PARSE_FAILURE, DualModeRecord, ModeOutcome, RankedList, RankingInstance

log = logging.getLogger(__name__)

NON_THINK = "NonThink"
THINK = "Think"
SELF_SELECT = "SelfSelect"
MODE_PREFIX = {NON_THINK: "<output>", THINK: "<thought>", SELF_SELECT: None}

TOKEN_ESTIMATE = "token-estimate"
HARD_PROBE = "hard-probe"
UNINFORMATIVE = "uninformative"
DROPPED_IDS = "dropped-ids"
RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class GatewayError(RuntimeError):
    pass


class RankingParseError(ValueError):
    pass


@dataclass(frozen=True)
class GatewayConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    api_key_env: str = "THINKROUTE_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    max_concurrency: int = 4
    temperature: float = 0.0
    max_tokens: int = 2048
    supports_logprobs: bool = True
    top_logprobs: int = 5
    backoff: float = 0.5

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")


# -- prompts -----------------------------------------------------------------

TASK_DESCRIPTION = {
    "IR": "rank the candidate passages by their relevance to the search query.",
    "Rec": "rank the candidate items by how likely the user is to interact with them next, given the user's interaction history.",
}

PROMPT_TEMPLATE = """You are a ranking assistant. Your task is to {task}

{context}

{candidates}

When generating the ranking:

- Rank only the candidate IDs listed above, each at most once, and return the top {k}.

Depending on the complexity of the ranking task, you may choose whether to include a
reasoning process:

  - If the case is simple and straightforward, directly output the result without reasoning.
  - If the case is ambiguous or difficult, include a reasoning process to justify your
ranking. The reasoning must be wrapped inside <thought> </thought> tags.

Your final output must strictly follow the required format.

## Output Format

<output>Ranking result: [ITEM IDS IN ORDER, SEPARATED BY COMMA]</output>"""


def render_prompt(instance: RankingInstance) -> str:
    if instance.context is not None:
        context = f"Query: {instance.context}"
    else:
        context = "User history (oldest first):\n" + "\n".join(f"- {h}" for h in instance.history)
    candidates = "Candidates:\n" + "\n".join(f"[{cid}] {text}" for cid, text in instance.candidates)
    return PROMPT_TEMPLATE.format(task=TASK_DESCRIPTION[instance.task], context=context, candidates=candidates, k=instance.k)


def build_messages(instance: RankingInstance, mode: str) -> list[dict]:
    """User turn plus, for forced modes, an assistant prefill holding the mode prefix."""
    if mode not in MODE_PREFIX:
        raise ValueError(f"unknown mode {mode!r}")
    messages = [{"role": "user", "content": render_prompt(instance)}]
    prefix = MODE_PREFIX[mode]
    if prefix is not None:
        messages.append({"role": "assistant", "content": prefix})
    return messages


_OUTPUT_BLOCK = re.compile(r"<output>(.*?)(?:</output>|$)", re.S)
_BRACKETS = re.compile(r"\[([^\[\]]*)\]")


def parse_ranking(raw: str, valid_ids: Sequence[str], instance_id: str = "") -> tuple[RankedList, bool]:
    """Ids from the bracket list inside the last ``<output>`` block.

    Returns ``(ranking, dropped)``; ``dropped`` is True if unknown ids were
    discarded. Duplicates keep their first position.
    """
    blocks = _OUTPUT_BLOCK.findall(raw)
    if not blocks:
        raise RankingParseError("no <output> block")
    lists = _BRACKETS.findall(blocks[-1])
    if not lists:
        raise RankingParseError("no bracketed id list in <output> block")
    valid = set(valid_ids)
    order: list[str] = []
    dropped = False
    for token in lists[-1].split(","):
        item = token.strip().strip("'\"")
        if not item:
            continue
        if item not in valid:
            dropped = True
        elif item not in order:
            order.append(item)
    return RankedList(instance_id, tuple(order)), dropped


def estimate_tokens(text: str) -> int:
    return len(text.split())


# -- backends ----------------------------------------------------------------


class ChatBackend(Protocol):
    def complete(self, messages: list[dict], *, max_tokens: int, temperature: float, logprobs: bool = False, top_logprobs: int = 0) -> dict:
        """Return an OpenAI-shaped chat completion response."""


class HttpBackend:
    """``POST {base_url}/chat/completions`` with bounded retries."""

    def __init__(self, config: GatewayConfig, client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        key = os.environ.get(config.api_key_env)
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.client = client or httpx.Client(timeout=config.timeout)
        self.headers = headers
        self.sleep = sleep

    def complete(self, messages, *, max_tokens, temperature, logprobs=False, top_logprobs=0) -> dict:
        payload = {
            "model": self.config.model,
            "messages": messages,
            "max_tokens": max_tokens,
            "temperature": temperature,
        }
        if logprobs:
            payload["logprobs"] = True
            payload["top_logprobs"] = top_logprobs
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            try:
                resp = self.client.post(url, json=payload, headers=self.headers, timeout=self.config.timeout)
                if resp.status_code in RETRYABLE_STATUS:
                    last = GatewayError(f"HTTP {resp.status_code}")
                else:
                    resp.raise_for_status()
                    return resp.json()
            except httpx.HTTPStatusError as exc:
                raise GatewayError(f"HTTP {exc.response.status_code}: {exc.response.text[:200]}") from exc
            except httpx.TransportError as exc:
                last = exc
            if attempt < self.config.max_retries:
                self.sleep(self.config.backoff * 2**attempt)
        raise GatewayError(f"request failed after {self.config.max_retries + 1} attempts: {last}")

    def close(self):
        self.client.close()


def _digest(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(parts).encode()).digest()[:8], "big")


class StubBackend:
    """Deterministic offline backend.

    Rankings echo the candidate order from the prompt. Think replies carry a
    ``<thought>`` block and ``think_tokens`` completion tokens, Non-Think replies
    ``non_think_tokens``. Probe replies return Yes/No logprobs from
    ``probe_logits(question_text)`` (default: a prompt hash), or only the
    sampled token when ``logprobs`` is disabled.
    """

    def __init__(
        self,
        think_tokens: int = 300,
        non_think_tokens: int = 40,
        probe_logits: Callable[[str, str], tuple[float, float]] | None = None,
        report_usage: bool = True,
        probe_tokens: Sequence[str] = ("Yes", "No"),
    ):
        self.think_tokens = think_tokens
        self.non_think_tokens = non_think_tokens
        self.probe_logits = probe_logits
        self.report_usage = report_usage
        self.probe_tokens = tuple(probe_tokens)
        self.calls: list[list[dict]] = []
        self._lock = threading.Lock()

    def complete(self, messages, *, max_tokens, temperature, logprobs=False, top_logprobs=0) -> dict:
        with self._lock:
            self.calls.append(messages)
        prompt = messages[0]["content"]
        prefill = messages[-1]["content"] if messages[-1]["role"] == "assistant" else ""
        if prompt.rstrip().endswith("Answer:"):
            return self._probe_reply(prompt, logprobs)
        ids = re.findall(r"^\[([^\]]+)\]", prompt, re.M)
        listing = "<output>Ranking result: [" + ", ".join(ids) + "]</output>"
        if prefill == "<thought>":
            body = " candidates compared step by step.</thought>" + listing
            tokens = self.think_tokens
        elif prefill == "<output>":
            body = listing[len("<output>") :]
            tokens = self.non_think_tokens
        else:
            body = listing
            tokens = self.non_think_tokens
        resp = {"choices": [{"message": {"role": "assistant", "content": body}, "finish_reason": "stop"}]}
        if self.report_usage:
            resp["usage"] = {"completion_tokens": tokens}
        return resp

    def _probe_reply(self, prompt: str, logprobs: bool) -> dict:
        question = prompt.rsplit("\n", 2)[-2].strip()
        if self.probe_logits is not None:
            yes, no = self.probe_logits(prompt, question)
        else:
            yes = (_digest(prompt, "yes") % 2001) / 500.0 - 2.0
            no = (_digest(prompt, "no") % 2001) / 500.0 - 2.0
        answer = "Yes" if yes >= no else "No"
        choice = {"message": {"role": "assistant", "content": answer}, "finish_reason": "length"}
        if logprobs:
            lse = max(yes, no) + math.log(math.exp(yes - max(yes, no)) + math.exp(no - max(yes, no)))
            top = []
            if "Yes" in self.probe_tokens:
                top.append({"token": "Yes", "logprob": yes - lse})
            if "No" in self.probe_tokens:
                top.append({"token": "No", "logprob": no - lse})
            top.append({"token": "Maybe", "logprob": min(yes, no) - lse - 5.0})
            top.sort(key=lambda t: -t["logprob"])
            choice["logprobs"] = {"content": [{"token": top[0]["token"], "logprob": top[0]["logprob"], "top_logprobs": top}]}
        return {"choices": [choice], "usage": {"completion_tokens": 1}}


# -- operations --------------------------------------------------------------


def _content(resp: Mapping) -> str:
    try:
        return resp["choices"][0]["message"]["content"] or ""
    except (KeyError, IndexError, TypeError):
        raise GatewayError("malformed completion response") from None


def rank(instance: RankingInstance, mode: str, backend: ChatBackend, config: GatewayConfig) -> ModeOutcome:
    """Generate one ranking in ``mode`` and parse it."""
    messages = build_messages(instance, mode)
    resp = backend.complete(messages, max_tokens=config.max_tokens, temperature=config.temperature)
    text = _content(resp)
    prefix = MODE_PREFIX[mode] or ""
    full = prefix + text
    flags = []
    completion = (resp.get("usage") or {}).get("completion_tokens")
    if completion is None:
        completion = estimate_tokens(text)
        flags.append(TOKEN_ESTIMATE)
    try:
        ranking, dropped = parse_ranking(full, instance.candidate_ids, instance.id)
        if dropped:
            flags.append(DROPPED_IDS)
    except RankingParseError as exc:
        log.info("%s/%s: %s", instance.id, mode, exc)
        ranking = RankedList(instance.id, ())
        flags.append(PARSE_FAILURE)
    return ModeOutcome(ranking, int(completion), full, tuple(flags))


def _yes_no_logprobs(resp: Mapping) -> tuple[float | None, float | None]:
    try:
        entries = resp["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
    except (KeyError, IndexError, TypeError):
        return None, None
    yes = no = None
    for e in entries:
        tok = str(e.get("token", "")).strip().lower()
        if tok == "yes" and yes is None:
            yes = float(e["logprob"])
        elif tok == "no" and no is None:
            no = float(e["logprob"])
    if (yes is None) != (no is None):
        # the absent answer ranks below every returned token
        floor = min(float(e["logprob"]) for e in entries) - math.log(2.0)
        yes = floor if yes is None else yes
        no = floor if no is None else no
    return yes, no


def probe_prompt(instance: RankingInstance, question: ChecklistQuestion) -> list[dict]:
    content = render_prompt(instance) + "\n\nDiagnostic question (answer Yes or No):\n" + question.text + "\nAnswer:"
    return [{"role": "user", "content": content}]


def probe_checklist(
    instance: RankingInstance,
    checklist: Sequence[ChecklistQuestion],
    backend: ChatBackend,
    config: GatewayConfig,
) -> ProbeResult:
    """One isolated single-token request per question; P(Yes) from Yes/No logprobs."""
    if not checklist:
        raise ValueError("checklist is empty")

    def ask(q: ChecklistQuestion) -> tuple[str, float, str | None]:
        resp = backend.complete(
            probe_prompt(instance, q),
            max_tokens=1,
            temperature=0.0,
            logprobs=config.supports_logprobs,
            top_logprobs=config.top_logprobs if config.supports_logprobs else 0,
        )
        if config.supports_logprobs:
            yes, no = _yes_no_logprobs(resp)
            if yes is None:
                return q.qid, 0.5, UNINFORMATIVE
            return q.qid, extract_yes_no(yes, no), None
        answer = _content(resp).strip().lower()
        if answer.startswith("yes"):
            return q.qid, 1.0, HARD_PROBE
        if answer.startswith("no"):
            return q.qid, 0.0, HARD_PROBE
        return q.qid, 0.5, UNINFORMATIVE

    with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
        answers = list(pool.map(ask, checklist))
    p_yes = {qid: p for qid, p, _ in answers}
    flags = {qid: f for qid, _, f in answers if f}
    return ProbeResult(instance.id, p_yes, flags or None)


def _completed_ids(path: Path) -> set[str]:
    if not path.exists():
        return set()
    done = set()
    for _, obj in iter_lines(path):
        if "_header" not in obj and "error" not in obj:
            done.add(obj["instance_id"])
    return done


def collect_dual_mode(
    instances: Sequence[RankingInstance],
    backend: ChatBackend,
    config: GatewayConfig,
    out_path: str | Path,
) -> dict[str, int]:
    """Run both modes per instance and append one record per line.

    Instances already present in ``out_path`` are skipped, so an interrupted
    run can be resumed. Failures are appended as ``{"instance_id", "error"}``
    lines and retried on the next run.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    done = _completed_ids(out_path)
    todo = [inst for inst in instances if inst.id not in done]
    lock = threading.Lock()
    stats = {"skipped": len(instances) - len(todo), "written": 0, "failed": 0}

    def run(inst: RankingInstance):
        try:
            non = rank(inst, NON_THINK, backend, config)
            think = rank(inst, THINK, backend, config)
            record = DualModeRecord(inst.id, non, think).to_dict()
            key = "written"
        except (GatewayError, httpx.HTTPError) as exc:
            record = {"instance_id": inst.id, "error": str(exc)}
            key = "failed"
        with lock:
            append_record(out_path, record)
            stats[key] += 1

    with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
        list(pool.map(run, todo))
    _canonicalize_log(out_path, [inst.id for inst in instances])
    return stats


def _canonicalize_log(path: Path, order: Sequence[str]) -> None:
    """Rewrite the log in input order (completion order varies with concurrency)."""
    complete: dict[str, dict] = {}
    errors: dict[str, dict] = {}
    for _, obj in iter_lines(path):
        if "_header" in obj:
            continue
        (errors if "error" in obj else complete)[obj["instance_id"]] = obj
    rank_of = {iid: i for i, iid in enumerate(order)}
    key = lambda iid: (rank_of.get(iid, len(rank_of)), iid)  # noqa: E731
    records = [complete[i] for i in sorted(complete, key=key)]
    records += [errors[i] for i in sorted(errors, key=key) if i not in complete]
    write_records(path, records)


def load_dual_mode(path: str | Path) -> dict[str, DualModeRecord]:
    """Latest complete record per instance; error lines are ignored."""
    out = {}
    for _, obj in iter_lines(path):
        if "_header" in obj or "error" in obj:
            continue
        rec = DualModeRecord.from_dict(obj)
        out[rec.instance_id] = rec
    return out

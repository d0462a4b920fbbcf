"""Synthetic ranking workloads with a planted "when does Think help" signal.

Each instance draws a latent difficulty ``z ~ U(0, 1)`` that drives:

* candidate-pool geometry: harder instances have negatives pulled toward
  the context, a less distinct target and a drifting history;
* mode quality: Non-Think's hit probability falls with ``z`` and Think's
  rises, so Think helps on the hard side (``z > crossover``) and hurts on
  the easy side;
* probe answers: checklist pairs lean with ``z`` under a shared yes-bias;
* Think's token count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checklist import FAVORS_THINK, ProbeResult, default_checklist
from .features import EmbeddingDump
from .gateway import estimate_tokens, render_prompt
from .ranking import DualModeRecord, ModeOutcome, RankedList, RankingInstance

GENRES = ("action", "drama", "comedy", "horror", "sci-fi", "romance", "mystery", "fantasy", "sports", "puzzle")
WORDS = (
    "classic", "indie", "deluxe", "remastered", "epic", "quiet", "dark", "bright", "lost", "hidden",
    "final", "first", "golden", "silent", "broken", "wild", "iron", "paper", "glass", "stone",
)


@dataclass(frozen=True)
class SynthParams:
    n_candidates: int = 50
    dim: int = 16
    task: str = "Rec"
    history_len: int = 8
    k: int = 20
    crossover: float = 0.5
    self_select_think_rate: float = 0.3


@dataclass
class SynthData:
    instances: list[RankingInstance]
    dumps: list[EmbeddingDump]
    records: list[DualModeRecord]
    probes: list[ProbeResult]
    self_select: list[ModeOutcome]
    truth: list[dict] = field(default_factory=list)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _text(rng: np.random.Generator, idx: int) -> str:
    n = int(rng.integers(3, 16))
    words = rng.choice(WORDS, size=n)
    return f"{GENRES[idx % len(GENRES)]} " + " ".join(words)


def _ranking(rng, instance_id, ids, target, rank, k) -> RankedList:
    others = [i for i in ids if i != target]
    rng.shuffle(others)
    pos = min(rank, len(ids)) - 1
    order = others[:pos] + [target] + others[pos:]
    return RankedList(instance_id, tuple(order[:k]))


def _hit_prob(base: float, slope: float, z: float, rng) -> float:
    return float(np.clip(base + slope * z + rng.normal(0, 0.05), 0.05, 0.95))


def generate(seed: int, n_instances: int, params: SynthParams = SynthParams()) -> SynthData:
    """Deterministic per ``seed``; instance ``i`` depends only on ``(seed, i)``."""
    if n_instances < 2:
        raise ValueError("need at least 2 instances")
    checklist = default_checklist()
    out = SynthData([], [], [], [], [], [])
    p = params
    k = min(p.k, p.n_candidates)
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i])
        iid = f"s{seed}-{i:05d}"
        z = float(rng.uniform())
        ids = [f"c{j}" for j in range(p.n_candidates)]
        target = ids[int(rng.integers(p.n_candidates))]
        u = _unit(rng.normal(size=p.dim))

        n_clusters = 1 + int(rng.integers(0, 2) + round(3 * z))
        centers = _unit(rng.normal(size=(n_clusters, p.dim)))
        pull = 0.2 + 1.6 * z + rng.normal(0, 0.1)
        assign = rng.integers(n_clusters, size=p.n_candidates)
        cands = _unit(pull * u + centers[assign] + (0.35 + 0.3 * z) * rng.normal(size=(p.n_candidates, p.dim)))
        t = ids.index(target)
        cands[t] = _unit((2.4 - 1.2 * z) * u + 0.5 * rng.normal(size=p.dim))

        texts = [_text(rng, int(rng.integers(len(GENRES)))) for _ in ids]
        if p.task == "Rec":
            drift = 0.3 + 1.4 * z
            hist = _unit(u + drift * rng.normal(size=(p.history_len, p.dim)))
            history = tuple(_text(rng, int(rng.integers(len(GENRES)))) for _ in range(p.history_len))
            inst = RankingInstance(iid, "Rec", tuple(zip(ids, texts)), {target: 1}, k, history=history)
            dump_kw = {"history": hist}
        else:
            query = _text(rng, int(rng.integers(len(GENRES))))
            inst = RankingInstance(iid, "IR", tuple(zip(ids, texts)), {target: 1}, k, context=query)
            dump_kw = {"context": _unit(u + (0.2 + 0.6 * z) * rng.normal(size=p.dim))}
        prompt_tokens = estimate_tokens(render_prompt(inst))
        dump = EmbeddingDump(iid, cands, prompt_tokens, **dump_kw)

        q_non = _hit_prob(0.8, -0.6, z, rng)
        q_think = _hit_prob(0.3, 0.4, z, rng)
        r_non = int(rng.geometric(q_non))
        r_think = int(rng.geometric(q_think))
        tok_non = int(25 + round(0.02 * prompt_tokens) + rng.poisson(5))
        tok_think = int(max(tok_non + 1, 150 + round(0.35 * prompt_tokens) + round(120 * z) + rng.normal(0, 30)))
        non = ModeOutcome(_ranking(rng, iid, ids, target, r_non, k), tok_non)
        think = ModeOutcome(_ranking(rng, iid, ids, target, r_think, k), tok_think)

        picks_think = bool(rng.uniform() < p.self_select_think_rate)
        q_self = max(0.05, (q_think if picks_think else q_non) - 0.05)
        self_outcome = ModeOutcome(
            _ranking(rng, iid, ids, target, int(rng.geometric(q_self)), k),
            tok_think if picks_think else tok_non,
        )

        bias = rng.uniform(0.2, 1.0)
        p_yes = {}
        for q in checklist:
            lean = 2.5 * (z - 0.5) if q.pair_id != "answer_confidence" else 0.0
            sign = 1.0 if q.direction == FAVORS_THINK else -1.0
            logit = bias + sign * lean + rng.normal(0, 0.6)
            p_yes[q.qid] = float(1.0 / (1.0 + np.exp(-logit)))

        out.instances.append(inst)
        out.dumps.append(dump)
        out.records.append(DualModeRecord(iid, non, think))
        out.probes.append(ProbeResult(iid, p_yes))
        out.self_select.append(self_outcome)
        out.truth.append({
            "instance_id": iid,
            "z": z,
            "think_helps": z > p.crossover,
            "q_non": q_non,
            "q_think": q_think,
            "self_select_mode": "Think" if picks_think else "NonThink",
        })
    return out

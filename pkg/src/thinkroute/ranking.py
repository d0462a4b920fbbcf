"""Ranking instances, listwise metrics and compute-aware advantage labels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

PARSE_FAILURE = "parse-failure"
TRADEOFF_TOKEN_WEIGHT = 1e-4


@dataclass(frozen=True)
class RankingInstance:
    """One query (IR) or user history (Rec) with its candidate pool."""

    id: str
    task: str
    candidates: tuple[tuple[str, str], ...]
    qrels: Mapping[str, int]
    k: int
    context: str | None = None
    history: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.task not in ("IR", "Rec"):
            raise ValueError(f"{self.id}: task must be IR or Rec, got {self.task!r}")
        if (self.context is None) == (self.history is None):
            raise ValueError(f"{self.id}: exactly one of context/history is required")
        ids = [c[0] for c in self.candidates]
        if len(ids) < 2:
            raise ValueError(f"{self.id}: at least 2 candidates required")
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.id}: duplicate candidate ids")
        if not 1 <= self.k <= len(ids):
            raise ValueError(f"{self.id}: k={self.k} outside [1, {len(ids)}]")
        unknown = set(self.qrels) - set(ids)
        if unknown:
            raise ValueError(f"{self.id}: qrels reference unknown items {sorted(unknown)}")
        if any(g < 0 for g in self.qrels.values()):
            raise ValueError(f"{self.id}: negative relevance grade")

    @property
    def candidate_ids(self) -> list[str]:
        return [c[0] for c in self.candidates]

    def truth_order(self) -> list[str]:
        """Candidates by descending grade; ties keep candidate order."""
        ids = self.candidate_ids
        return sorted(ids, key=lambda i: -self.qrels.get(i, 0))

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "task": self.task,
            "candidates": [list(c) for c in self.candidates],
            "qrels": dict(self.qrels),
            "k": self.k,
        }
        if self.context is not None:
            d["context"] = self.context
        else:
            d["history"] = list(self.history)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RankingInstance":
        hist = d.get("history")
        return cls(
            id=str(d["id"]),
            task=d["task"],
            candidates=tuple((str(a), str(b)) for a, b in d["candidates"]),
            qrels={str(k): int(v) for k, v in d["qrels"].items()},
            k=int(d["k"]),
            context=d.get("context"),
            history=tuple(hist) if hist is not None else None,
        )


@dataclass(frozen=True)
class RankedList:
    instance_id: str
    order: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.order)) != len(self.order):
            raise ValueError(f"{self.instance_id}: duplicate ids in ranking")


@dataclass(frozen=True)
class ModeOutcome:
    ranking: RankedList
    tokens: int
    raw_text: str | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.tokens < 0:
            raise ValueError("token count must be non-negative")

    @property
    def parse_failed(self) -> bool:
        return PARSE_FAILURE in self.flags

    def to_dict(self) -> dict:
        d = {"order": list(self.ranking.order), "tokens": self.tokens}
        if self.raw_text is not None:
            d["raw_text"] = self.raw_text
        if self.flags:
            d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, instance_id: str, d: Mapping) -> "ModeOutcome":
        return cls(
            ranking=RankedList(instance_id, tuple(str(i) for i in d["order"])),
            tokens=int(d["tokens"]),
            raw_text=d.get("raw_text"),
            flags=tuple(d.get("flags", ())),
        )


@dataclass(frozen=True)
class DualModeRecord:
    instance_id: str
    non_think: ModeOutcome
    think: ModeOutcome

    def __post_init__(self):
        for o in (self.non_think, self.think):
            if o.ranking.instance_id != self.instance_id:
                raise ValueError(f"{self.instance_id}: outcome belongs to {o.ranking.instance_id}")

    def outcome(self, think: bool) -> ModeOutcome:
        return self.think if think else self.non_think

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "non_think": self.non_think.to_dict(),
            "think": self.think.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DualModeRecord":
        iid = str(d["instance_id"])
        return cls(iid, ModeOutcome.from_dict(iid, d["non_think"]), ModeOutcome.from_dict(iid, d["think"]))


@dataclass(frozen=True)
class AdvantageLabel:
    instance_id: str
    advantage: float
    delta_utility: float
    delta_tokens: float
    weight: float = 1.0
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"weight must lie in (0, 1], got {self.weight}")

    def to_dict(self) -> dict:
        d = {
            "instance_id": self.instance_id,
            "advantage": self.advantage,
            "weight": self.weight,
            "delta_utility": self.delta_utility,
            "delta_tokens": self.delta_tokens,
        }
        if self.flags:
            d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdvantageLabel":
        return cls(
            instance_id=str(d["instance_id"]),
            advantage=float(d["advantage"]),
            delta_utility=float(d["delta_utility"]),
            delta_tokens=float(d["delta_tokens"]),
            weight=float(d.get("weight", 1.0)),
            flags=tuple(d.get("flags", ())),
        )


# -- metrics -----------------------------------------------------------------


def _order(ranking: RankedList | Sequence[str]) -> Sequence[str]:
    return ranking.order if isinstance(ranking, RankedList) else ranking


def has_relevant(qrels: Mapping[str, int]) -> bool:
    return any(g > 0 for g in qrels.values())


def dcg(grades: Sequence[float]) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(pos + 2) for pos, g in enumerate(grades))


def ndcg_at_k(ranking, qrels: Mapping[str, int], k: int) -> float:
    """NDCG@k with exponential gain ``2**rel - 1`` and ``log2(pos + 1)`` discount.

    Returns 0.0 when qrels hold no positive grade; check ``has_relevant``
    to tell that case apart from a genuinely bad ranking.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not has_relevant(qrels):
        return 0.0
    order = _order(ranking)[:k]
    actual = dcg([qrels.get(i, 0) for i in order])
    ideal = dcg(sorted(qrels.values(), reverse=True)[:k])
    return actual / ideal


def recall_at_k(ranking, qrels: Mapping[str, int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    positives = {i for i, g in qrels.items() if g > 0}
    if not positives:
        return 0.0
    hits = positives.intersection(_order(ranking)[:k])
    return len(hits) / len(positives)


def top1_agreement(ranking, qrels: Mapping[str, int]) -> int:
    order = _order(ranking)
    if not order:
        raise ValueError("empty ranking")
    best = max(qrels.values(), default=0)
    return int(qrels.get(order[0], 0) == best)


def pairwise_accuracy(pred, truth: Sequence[str]) -> float:
    """Fraction of common-item pairs ordered the same way in ``pred`` and ``truth``.

    Fewer than two common items is degenerate and scores 1.0.
    """
    rank = {item: pos for pos, item in enumerate(truth)}
    common = [i for i in _order(pred) if i in rank]
    n = len(common)
    if n < 2:
        return 1.0
    agree = 0
    for a in range(n):
        ra = rank[common[a]]
        for b in range(a + 1, n):
            agree += ra < rank[common[b]]
    return agree / (n * (n - 1) / 2)


def parse_metric(spec: str) -> tuple[str, int | None]:
    """``'ndcg@10'`` -> ``('ndcg', 10)``; ``'top1'`` -> ``('top1', None)``."""
    name, _, depth = spec.lower().partition("@")
    if name in ("ndcg", "recall"):
        if not depth.isdigit() or int(depth) < 1:
            raise ValueError(f"metric {spec!r} needs a positive depth, e.g. {name}@10")
        return name, int(depth)
    if name in ("top1", "pwacc") and not depth:
        return name, None
    raise ValueError(f"unknown metric {spec!r}")


def metric_fn(spec: str) -> Callable[[ModeOutcome | RankedList, RankingInstance], float]:
    """Utility callable ``(outcome, instance) -> float``; parse failures score 0."""
    name, depth = parse_metric(spec)

    def utility(outcome, instance: RankingInstance) -> float:
        if isinstance(outcome, ModeOutcome):
            if outcome.parse_failed:
                return 0.0
            outcome = outcome.ranking
        order = outcome.order
        if name == "ndcg":
            return ndcg_at_k(order, instance.qrels, depth)
        if name == "recall":
            return recall_at_k(order, instance.qrels, depth)
        if name == "top1":
            return float(top1_agreement(order, instance.qrels)) if order else 0.0
        return pairwise_accuracy(order, instance.truth_order())

    utility.__name__ = spec
    return utility


def advantage_label(
    record: DualModeRecord,
    instance: RankingInstance,
    lam: float,
    utility: str | Callable = "ndcg@10",
) -> AdvantageLabel:
    """Utility gain of Think over Non-Think minus ``lam`` times its extra tokens."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if record.instance_id != instance.id:
        raise ValueError(f"record {record.instance_id} does not match instance {instance.id}")
    fn = metric_fn(utility) if isinstance(utility, str) else utility
    u_think = fn(record.think, instance)
    u_non = fn(record.non_think, instance)
    d_u = u_think - u_non
    d_t = float(record.think.tokens - record.non_think.tokens)
    flags = ()
    if record.think.parse_failed or record.non_think.parse_failed:
        flags = (PARSE_FAILURE,)
    return AdvantageLabel(record.instance_id, d_u - lam * d_t, d_u, d_t, 1.0, flags)


def tradeoff_score(ndcg10: float, tokens: float) -> float:
    """NDCG@10 minus 1e-4 per generated token."""
    return ndcg10 - TRADEOFF_TOKEN_WEIGHT * tokens

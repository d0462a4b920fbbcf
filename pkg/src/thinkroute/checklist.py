"""Diagnostic checklist probes: layout, block-diagonal mask, Yes/No scoring.

Token positions in a :class:`ProbeLayout` are 1-based, matching how a
prompt is usually described (prefix tokens ``1..prefix_len``). The mask
matrix itself is an ordinary 0-based numpy array: ``allow[i - 1, j - 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .io import iter_lines, write_records

FAVORS_NON_THINK = "favors_non_think"
FAVORS_THINK = "favors_think"
_DIRECTIONS = (FAVORS_NON_THINK, FAVORS_THINK)


@dataclass(frozen=True)
class ChecklistQuestion:
    qid: str
    text: str
    direction: str
    pair_id: str

    def __post_init__(self):
        if self.direction not in _DIRECTIONS:
            raise ValueError(f"{self.qid}: unknown direction {self.direction!r}")

    def to_dict(self) -> dict:
        return {"qid": self.qid, "pair_id": self.pair_id, "direction": self.direction, "text": self.text}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChecklistQuestion":
        return cls(str(d["qid"]), d["text"], d["direction"], str(d["pair_id"]))


def validate_checklist(questions: Sequence[ChecklistQuestion]) -> None:
    qids = [q.qid for q in questions]
    if len(set(qids)) != len(qids):
        raise ValueError("duplicate qids in checklist")
    pairs: dict[str, list[str]] = {}
    for q in questions:
        pairs.setdefault(q.pair_id, []).append(q.direction)
    for pid, dirs in pairs.items():
        if sorted(dirs) != sorted(_DIRECTIONS):
            raise ValueError(f"pair {pid} must hold one question per direction, got {dirs}")


def load_checklist(path: str | Path) -> list[ChecklistQuestion]:
    qs = [ChecklistQuestion.from_dict(obj) for _, obj in iter_lines(path) if "_header" not in obj]
    validate_checklist(qs)
    return qs


def save_checklist(path: str | Path, questions: Sequence[ChecklistQuestion]) -> None:
    validate_checklist(questions)
    write_records(path, (q.to_dict() for q in questions))


def default_checklist() -> list[ChecklistQuestion]:
    """The shipped 5-pair checklist (``data/checklist.jsonl``)."""
    with resources.as_file(resources.files("thinkroute") / "data" / "checklist.jsonl") as p:
        return load_checklist(p)


@dataclass(frozen=True)
class ProbeBlock:
    qid: str
    start: int
    end: int
    answer_anchor: int


@dataclass(frozen=True)
class ProbeLayout:
    prefix_len: int
    blocks: tuple[ProbeBlock, ...]

    @property
    def total_len(self) -> int:
        return self.blocks[-1].end if self.blocks else self.prefix_len


def build_probe_layout(prefix_len: int, lengths: Sequence[int], qids: Sequence[str] | None = None) -> ProbeLayout:
    """Pack question blocks back to back after the shared prefix."""
    if prefix_len < 1:
        raise ValueError("prefix_len must be >= 1")
    qids = list(qids) if qids is not None else [f"q{i}" for i in range(len(lengths))]
    if len(qids) != len(lengths):
        raise ValueError("one qid per question length required")
    blocks = []
    pos = prefix_len
    for qid, n in zip(qids, lengths):
        if n <= 0:
            raise ValueError(f"{qid}: zero-length question")
        if n < 2:
            raise ValueError(f"{qid}: a block needs the question plus its answer anchor")
        blocks.append(ProbeBlock(qid, pos + 1, pos + n, pos + n))
        pos += n
    return ProbeLayout(prefix_len, tuple(blocks))


def _block_ids(layout: ProbeLayout) -> np.ndarray:
    """Per position (0-based): -1 for prefix, block index otherwise."""
    ids = np.full(layout.total_len, -1, dtype=int)
    for b, block in enumerate(layout.blocks):
        ids[block.start - 1 : block.end] = b
    return ids


def build_block_diagonal_mask(layout: ProbeLayout) -> np.ndarray:
    """Boolean ``allow[T, T]``: causal, and probes see only the prefix and themselves."""
    ids = _block_ids(layout)
    causal = np.tril(np.ones((ids.size, ids.size), dtype=bool))
    visible = (ids[None, :] == -1) | (ids[None, :] == ids[:, None])
    return causal & visible


def mask_to_runs(allow: np.ndarray) -> list[list[tuple[int, int]]]:
    """Run-length rows: for each query row, ``(start_col, length)`` runs of allowed keys (0-based)."""
    rows = []
    for row in np.asarray(allow, dtype=bool):
        padded = np.concatenate(([False], row, [False])).astype(np.int8)
        edges = np.flatnonzero(np.diff(padded))
        rows.append([(int(s), int(e - s)) for s, e in zip(edges[::2], edges[1::2])])
    return rows


def runs_to_mask(runs: Sequence[Sequence[tuple[int, int]]]) -> np.ndarray:
    n = len(runs)
    allow = np.zeros((n, n), dtype=bool)
    for i, row in enumerate(runs):
        for start, length in row:
            allow[i, start : start + length] = True
    return allow


def extract_yes_no(yes_logit: float, no_logit: float) -> float:
    """P(Yes) from a softmax restricted to the Yes/No pair."""
    if not (math.isfinite(yes_logit) and math.isfinite(no_logit)):
        raise ValueError("logits must be finite")
    m = max(yes_logit, no_logit)
    ey = math.exp(yes_logit - m)
    en = math.exp(no_logit - m)
    return ey / (ey + en)


@dataclass(frozen=True)
class ProbeResult:
    instance_id: str
    p_yes: dict[str, float]
    flags: dict[str, str] | None = None

    def __post_init__(self):
        bad = {q: p for q, p in self.p_yes.items() if not 0.0 <= p <= 1.0}
        if bad:
            raise ValueError(f"{self.instance_id}: probabilities outside [0, 1]: {bad}")

    def to_dict(self) -> dict:
        d = {"instance_id": self.instance_id, "p_yes": self.p_yes}
        if self.flags:
            d["flags"] = self.flags
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProbeResult":
        return cls(str(d["instance_id"]), {k: float(v) for k, v in d["p_yes"].items()}, d.get("flags") or None)


def aggregate_pairs(result: ProbeResult, checklist: Sequence[ChecklistQuestion]) -> dict[str, float]:
    """Per pair: P(Yes | Think-leaning question) - P(Yes | Non-Think-leaning question).

    Subtracting the paired answers cancels a shared yes-bias.
    """
    by_pair: dict[str, dict[str, str]] = {}
    for q in checklist:
        by_pair.setdefault(q.pair_id, {})[q.direction] = q.qid
    signals = {}
    for pid in sorted(by_pair):
        members = by_pair[pid]
        for direction in _DIRECTIONS:
            qid = members.get(direction)
            if qid is None or qid not in result.p_yes:
                raise KeyError(f"{result.instance_id}: missing probe answer for {qid or pid + '/' + direction}")
        signals[pid] = result.p_yes[members[FAVORS_THINK]] - result.p_yes[members[FAVORS_NON_THINK]]
    return signals


def signal_features(signals: Mapping[str, float]) -> dict[str, float]:
    """Checklist signals under their feature names (``chk_<pair_id>``)."""
    return {f"chk_{pid}": float(v) for pid, v in signals.items()}

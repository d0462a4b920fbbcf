"""Routing rule, η sweeps, validation Pareto frontier and deployment anchors."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .io import canonical_json
from .router import ModelFormatError

THINK = "Think"
NON_THINK = "NonThink"
ANCHORS = ("knee", "utopia", "epsilon", "umax", "manual")
POLICY_FORMAT = "thinkroute-policy"
POLICY_VERSION = 1


class InfeasibleTargetError(ValueError):
    """No frontier point reaches the requested utility."""

    def __init__(self, target: float, max_utility: float):
        super().__init__(f"utility target {target:.6g} exceeds the best achievable {max_utility:.6g}")
        self.target = target
        self.max_utility = max_utility


class NoKneeWarning(UserWarning):
    pass


def route(a_hat: float, delta_cost: float, eta: float) -> str:
    """Think iff ``a_hat - eta * delta_cost >= 0``."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    return THINK if a_hat - eta * delta_cost >= 0 else NON_THINK


def route_mask(a_hat: np.ndarray, delta_cost: np.ndarray, eta: float) -> np.ndarray:
    """Vectorized :func:`route`; True means Think."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    return np.asarray(a_hat) - eta * np.asarray(delta_cost) >= 0


@dataclass(frozen=True)
class FrontierPoint:
    eta: float
    mean_tokens: float
    utility: float
    think_fraction: float

    def to_dict(self) -> dict:
        return asdict(self)


def default_eta_grid(a_hat: np.ndarray, delta_cost: np.ndarray, n: int = 200) -> np.ndarray:
    """0, ``n`` log-spaced values across the flip thresholds, and one value past them all."""
    a_hat = np.asarray(a_hat, float)
    delta_cost = np.asarray(delta_cost, float)
    pos = a_hat[a_hat > 0]
    if pos.size == 0:
        return np.array([0.0, 1.0])
    lo = pos.min() / delta_cost.max()
    hi = pos.max() / delta_cost.min()
    inner = np.geomspace(lo, hi, n) if hi > lo else np.array([lo])
    return np.unique(np.concatenate(([0.0], inner, [2.0 * hi])))


@dataclass(frozen=True)
class SweepData:
    """Per-instance inputs to a sweep, aligned by position."""

    a_hat: np.ndarray
    delta_cost: np.ndarray
    tokens_think: np.ndarray
    tokens_non: np.ndarray
    utility_think: np.ndarray
    utility_non: np.ndarray

    def __post_init__(self):
        n = len(self.a_hat)
        if any(len(a) != n for a in (self.delta_cost, self.tokens_think, self.tokens_non, self.utility_think, self.utility_non)):
            raise ValueError("sweep inputs must all have the same length")
        if n == 0:
            raise ValueError("empty sweep input")
        if (np.asarray(self.delta_cost) < 1).any():
            raise ValueError("delta_cost estimates must be >= 1 (clamp upstream)")

    def evaluate(self, think: np.ndarray) -> tuple[float, float]:
        tokens = np.where(think, self.tokens_think, self.tokens_non)
        util = np.where(think, self.utility_think, self.utility_non)
        return float(tokens.mean()), float(util.mean())

    def point(self, eta: float) -> FrontierPoint:
        think = route_mask(self.a_hat, self.delta_cost, eta)
        t, u = self.evaluate(think)
        return FrontierPoint(float(eta), t, u, float(think.mean()))


def sweep_eta(data: SweepData, grid: Sequence[float] | None = None) -> list[FrontierPoint]:
    grid = default_eta_grid(data.a_hat, data.delta_cost) if grid is None else np.asarray(grid, float)
    if len(grid) < 2:
        raise ValueError("eta grid needs at least 2 values")
    return [data.point(float(e)) for e in grid]


def dominates(q: FrontierPoint, p: FrontierPoint) -> bool:
    return (
        q.mean_tokens <= p.mean_tokens
        and q.utility >= p.utility
        and (q.mean_tokens < p.mean_tokens or q.utility > p.utility)
    )


def pareto_filter(points: Sequence[FrontierPoint]) -> list[FrontierPoint]:
    """Non-dominated points sorted by tokens; exact duplicates collapse to one."""
    if not points:
        raise ValueError("need at least one point")
    # cheapest first, best utility first within equal cost
    ordered = sorted(points, key=lambda p: (p.mean_tokens, -p.utility, p.eta))
    front: list[FrontierPoint] = []
    best_u = -math.inf
    for p in ordered:
        if p.utility > best_u:
            if front and front[-1].mean_tokens == p.mean_tokens:
                continue
            front.append(p)
            best_u = p.utility
    return front


def _normalize(v: np.ndarray) -> np.ndarray:
    span = v.max() - v.min()
    return np.zeros_like(v) if span == 0 else (v - v.min()) / span


def normalized_axes(frontier: Sequence[FrontierPoint]) -> tuple[np.ndarray, np.ndarray]:
    t = np.array([p.mean_tokens for p in frontier], float)
    u = np.array([p.utility for p in frontier], float)
    return _normalize(t), _normalize(u)


def _argbest(keys: Sequence[tuple]) -> int:
    return min(range(len(keys)), key=lambda i: keys[i])


def find_knee_index(frontier: Sequence[FrontierPoint]) -> int | None:
    """Interior point farthest above the chord between the cheapest and costliest points."""
    if len(frontier) < 3:
        return None
    order = sorted(range(len(frontier)), key=lambda i: frontier[i].mean_tokens)
    t, u = normalized_axes(frontier)
    a, b = order[0], order[-1]
    dt, du = t[b] - t[a], u[b] - u[a]
    norm = math.hypot(dt, du)
    if norm == 0:
        return None
    dist = (dt * (u - u[a]) - du * (t - t[a])) / norm
    interior = order[1:-1]
    best = max(interior, key=lambda i: (dist[i], -frontier[i].mean_tokens))
    if dist[best] <= 1e-12:
        return None
    return best


def knee_point(frontier: Sequence[FrontierPoint]) -> FrontierPoint:
    """Efficiency-first anchor; see :func:`find_knee_index`.

    Fewer than 3 points falls back to the utopia anchor; a frontier with no
    point above its chord yields the cheapest point and a :class:`NoKneeWarning`.
    """
    if len(frontier) < 3:
        return utopia_point(frontier)
    idx = find_knee_index(frontier)
    if idx is None:
        warnings.warn("no knee: frontier is collinear or concave-up", NoKneeWarning, stacklevel=2)
        return min(frontier, key=lambda p: p.mean_tokens)
    return frontier[idx]


def utopia_point(frontier: Sequence[FrontierPoint], w_t: float = 1.0, w_u: float = 1.0) -> FrontierPoint:
    """Point minimizing ``w_t * T~^2 + w_u * (1 - U~)^2`` in normalized space."""
    if w_t < 0 or w_u < 0 or (w_t == 0 and w_u == 0):
        raise ValueError("utopia weights must be non-negative and not both zero")
    t, u = normalized_axes(frontier)
    obj = w_t * t**2 + w_u * (1 - u) ** 2
    return frontier[_argbest([(obj[i], frontier[i].mean_tokens) for i in range(len(frontier))])]


def epsilon_point(frontier: Sequence[FrontierPoint], u_base: float, epsilon: float) -> FrontierPoint:
    """Cheapest point with utility >= ``u_base + epsilon``."""
    target = u_base + epsilon
    feasible = [p for p in frontier if p.utility >= target]
    if not feasible:
        raise InfeasibleTargetError(target, max(p.utility for p in frontier))
    return min(feasible, key=lambda p: (p.mean_tokens, -p.utility))


def umax_point(frontier: Sequence[FrontierPoint]) -> FrontierPoint:
    if not frontier:
        raise ValueError("empty frontier")
    return frontier[_argbest([(-p.utility, p.mean_tokens) for p in frontier])]


def calibrate_eta(target_tokens: float, data: SweepData, grid: Sequence[float] | None = None, bisect_steps: int = 60) -> float:
    """η whose mean routed tokens are closest to ``target_tokens`` (ties -> larger η).

    Searches the grid first, then bisects inside the two neighbouring grid
    intervals for the budget crossing. Mean tokens only fall as η grows
    because every ΔT̂ >= 1.
    """
    grid = np.sort(default_eta_grid(data.a_hat, data.delta_cost) if grid is None else np.asarray(grid, float))
    cache: dict[float, float] = {}

    def gap(eta: float) -> float:
        if eta not in cache:
            cache[eta] = (data.point(eta).mean_tokens - target_tokens) ** 2
        return cache[eta]

    gaps = [gap(float(e)) for e in grid]
    best_i = max(range(len(grid)), key=lambda i: (-gaps[i], grid[i]))
    candidates = {float(grid[best_i])}
    for lo_i, hi_i in ((best_i - 1, best_i), (best_i, best_i + 1)):
        if lo_i < 0 or hi_i >= len(grid):
            continue
        lo, hi = float(grid[lo_i]), float(grid[hi_i])
        if data.point(lo).mean_tokens < target_tokens or data.point(hi).mean_tokens > target_tokens:
            continue
        for _ in range(bisect_steps):
            mid = 0.5 * (lo + hi)
            if data.point(mid).mean_tokens >= target_tokens:
                lo = mid
            else:
                hi = mid
        candidates.update((lo, hi))
    return max(candidates, key=lambda e: (-gap(e), e))


@dataclass(frozen=True)
class PolicyArtifact:
    anchor: str
    eta_frozen: float
    mean_tokens: float
    utility: float
    think_fraction: float
    parameters: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.anchor not in ANCHORS:
            raise ValueError(f"unknown anchor {self.anchor!r}")
        if not (self.eta_frozen >= 0 and math.isfinite(self.eta_frozen)):
            raise ValueError("eta_frozen must be finite and >= 0")

    def route(self, a_hat: float, delta_cost: float, model_hash: str | None = None) -> str:
        expected = self.provenance.get("model_hash")
        if model_hash is not None and expected is not None and model_hash != expected:
            warnings.warn(
                f"policy was frozen for model {expected[:12]}, routing with {model_hash[:12]}",
                RuntimeWarning,
                stacklevel=2,
            )
        return route(a_hat, delta_cost, self.eta_frozen)

    def dumps(self) -> str:
        body = {"format": POLICY_FORMAT, "version": POLICY_VERSION, **asdict(self)}
        body["checksum"] = hashlib.sha256(canonical_json(body).encode()).hexdigest()
        return canonical_json(body) + "\n"

    @classmethod
    def loads(cls, text: str | bytes) -> "PolicyArtifact":
        try:
            body = json.loads(text)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ModelFormatError(f"policy file is not valid JSON: {exc}") from None
        if not isinstance(body, dict) or body.get("format") != POLICY_FORMAT:
            raise ModelFormatError("not a policy file")
        if body.get("version") != POLICY_VERSION:
            raise ModelFormatError(f"unsupported policy version {body.get('version')!r}")
        checksum = body.pop("checksum", None)
        try:
            digest = hashlib.sha256(canonical_json(body).encode()).hexdigest()
        except ValueError:  # e.g. a corrupted exponent that overflows to inf
            raise ModelFormatError("policy file holds non-finite numbers") from None
        if checksum != digest:
            raise ModelFormatError("policy checksum mismatch (file corrupted or edited)")
        body.pop("format")
        body.pop("version")
        try:
            return cls(**body)
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(f"invalid policy payload: {exc}") from None


def freeze_policy(anchor: str, eta: float, point: FrontierPoint, parameters: Mapping | None = None, provenance: Mapping | None = None) -> PolicyArtifact:
    return PolicyArtifact(
        anchor=anchor,
        eta_frozen=float(eta),
        mean_tokens=point.mean_tokens,
        utility=point.utility,
        think_fraction=point.think_fraction,
        parameters=dict(parameters or {}),
        provenance=dict(provenance or {}),
    )


def solve_anchor(
    anchor: str,
    points: Sequence[FrontierPoint],
    data: SweepData,
    grid: Sequence[float] | None = None,
    w_t: float = 1.0,
    w_u: float = 1.0,
    u_base: float | None = None,
    epsilon: float = 0.0,
    eta: float | None = None,
) -> tuple[float, FrontierPoint, dict]:
    """Pick the anchor's frontier point and the η that realizes it on ``data``.

    Knee, Utopia and UMax calibrate η to the point's token level. Epsilon
    keeps the sweep η of its point, which meets the utility target by
    construction. ``u_base`` defaults to the always-Non-Think utility.
    """
    frontier = pareto_filter(points)
    params: dict = {}
    if anchor == "manual":
        if eta is None:
            raise ValueError("manual anchor needs an explicit eta")
        return float(eta), data.point(eta), {"eta": float(eta)}
    if anchor == "knee":
        target = knee_point(frontier)
    elif anchor == "utopia":
        target = utopia_point(frontier, w_t, w_u)
        params = {"w_T": w_t, "w_U": w_u}
    elif anchor == "umax":
        target = umax_point(frontier)
    elif anchor == "epsilon":
        if u_base is None:
            u_base = float(np.mean(data.utility_non))
        target = epsilon_point(frontier, u_base, epsilon)
        params = {"U_base": u_base, "epsilon": epsilon}
        return target.eta, data.point(target.eta), params
    else:
        raise ValueError(f"unknown anchor {anchor!r}")
    solved = calibrate_eta(target.mean_tokens, data, grid)
    params["target_tokens"] = target.mean_tokens
    return solved, data.point(solved), params

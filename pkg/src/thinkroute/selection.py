"""Feature refinement: lasso probe, cross-setting consistency, redundancy pruning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

ZERO_WEIGHT = "zero-weight"
INCONSISTENT = "inconsistent"
REDUNDANT = "redundant"


@dataclass
class LassoFit:
    coef: np.ndarray
    intercept: float
    objective_trace: list[float] = field(default_factory=list)
    n_sweeps: int = 0


def lasso_objective(X: np.ndarray, y: np.ndarray, coef: np.ndarray, intercept: float, alpha: float) -> float:
    r = y - intercept - X @ coef
    return float(r @ r / (2 * len(y)) + alpha * np.abs(coef).sum())


def soft_threshold(z: np.ndarray | float, t: float):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def fit_l1_probe(
    X: np.ndarray,
    y: np.ndarray,
    alpha: float,
    tol: float = 1e-8,
    max_sweeps: int = 10_000,
) -> LassoFit:
    """Cyclic coordinate descent on ``(1/2N)||y - b0 - Xb||^2 + alpha * ||b||_1``.

    The intercept is the mean of ``y`` (columns of a standardized ``X`` are centered).
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0; fit ordinary least squares explicitly instead")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    intercept = float(y.mean())
    r = y - intercept
    coef = np.zeros(p)
    col_sq = (X**2).sum(axis=0) / n
    fit = LassoFit(coef, intercept, [lasso_objective(X, y, coef, intercept, alpha)])
    for sweep in range(1, max_sweeps + 1):
        max_delta = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            old = coef[j]
            rho = X[:, j] @ r / n + col_sq[j] * old
            new = soft_threshold(rho, alpha) / col_sq[j]
            if new != old:
                r -= X[:, j] * (new - old)
                coef[j] = new
                max_delta = max(max_delta, abs(new - old))
        fit.objective_trace.append(lasso_objective(X, y, coef, intercept, alpha))
        fit.n_sweeps = sweep
        if max_delta < tol:
            break
    return fit


def alpha_grid(X: np.ndarray, y: np.ndarray, n: int = 10, ratio: float = 1e-3) -> np.ndarray:
    """Log grid from the null threshold ``max|X^T y|/N`` down by ``ratio``."""
    yc = np.asarray(y, float) - np.mean(y)
    a_max = float(np.abs(X.T @ yc).max() / len(yc))
    if a_max <= 0:
        return np.full(n, 1e-12)
    return np.geomspace(a_max, a_max * ratio, n)


def select_alpha(X: np.ndarray, y: np.ndarray, n_folds: int = 5, n_grid: int = 10, seed: int = 0) -> float:
    """Alpha with the lowest mean held-out squared error over ``n_folds`` folds."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    grid = alpha_grid(X, y, n_grid)
    folds = np.array_split(np.random.default_rng(seed).permutation(len(y)), n_folds)
    errors = np.zeros(len(grid))
    for held in folds:
        train = np.setdiff1d(np.arange(len(y)), held)
        for g, a in enumerate(grid):
            fit = fit_l1_probe(X[train], y[train], a, tol=1e-6, max_sweeps=1000)
            pred = fit.intercept + X[held] @ fit.coef
            errors[g] += ((y[held] - pred) ** 2).sum()
    # the sparser (larger) alpha wins ties
    return float(grid[int(np.argmin(errors))])


def consistency_filter(supports: Sequence[Iterable[str]], tau: float = 0.6) -> set[str]:
    """Features selected in at least a ``tau`` fraction of settings."""
    if not supports:
        raise ValueError("need at least one setting")
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    sets = [set(s) for s in supports]
    counts: dict[str, int] = {}
    for s in sets:
        for f in s:
            counts[f] = counts.get(f, 0) + 1
    return {f for f, c in counts.items() if c / len(sets) >= tau - 1e-12}


def quantile_classes(y: np.ndarray, n_bins: int = 3) -> np.ndarray:
    """Class index per instance from the y-quantiles (tertiles by default)."""
    edges = np.quantile(y, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(edges, y, side="right")


def _abs_corr(X: np.ndarray) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    norms = np.sqrt((Xc**2).sum(axis=0))
    safe = np.where(norms > 1e-12, norms, 1.0)
    c = (Xc.T @ Xc) / np.outer(safe, safe)
    c[norms <= 1e-12, :] = 0.0
    c[:, norms <= 1e-12] = 0.0
    return np.abs(c)


def redundancy_prune(
    X: np.ndarray,
    y: np.ndarray,
    names: Sequence[str],
    kept: Iterable[str],
    coef: Mapping[str, float],
    rho: float = 0.9,
    n_bins: int = 3,
    min_class_size: int = 3,
) -> set[str]:
    """Collapse groups of features that are redundant inside every label class.

    Two features are linked when their absolute within-class correlation
    exceeds ``rho`` in every usable class; each connected group keeps the
    member with the largest ``|coef|``.
    """
    kept = [n for n in names if n in set(kept)]
    if not kept:
        raise ValueError("kept set is empty")
    cols = [list(names).index(n) for n in kept]
    Xk = np.asarray(X, float)[:, cols]
    classes = quantile_classes(np.asarray(y, float), n_bins)
    linked = np.ones((len(kept), len(kept)), dtype=bool)
    used = 0
    for c in np.unique(classes):
        rows = classes == c
        if rows.sum() < min_class_size:
            log.warning("redundancy_prune: class %d has %d instances; skipped", c, int(rows.sum()))
            continue
        linked &= _abs_corr(Xk[rows]) > rho
        used += 1
    if used == 0:
        return set(kept)

    # connected components over the "redundant in every class" graph
    group = list(range(len(kept)))

    def root(i):
        while group[i] != i:
            group[i] = group[group[i]]
            i = group[i]
        return i

    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            if linked[i, j]:
                group[root(j)] = root(i)

    survivors = {}
    for i, name in enumerate(kept):
        g = root(i)
        best = survivors.get(g)
        if best is None or abs(coef.get(name, 0.0)) > abs(coef.get(best, 0.0)):
            survivors[g] = name
    return set(survivors.values())


@dataclass
class SelectionReport:
    schema: list[str]
    coefficients: dict[str, dict[str, float]]
    kept: list[str]
    dropped: dict[str, str]
    alpha: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.kept) & set(self.dropped):
            raise ValueError("kept and dropped overlap")
        if set(self.kept) | set(self.dropped) != set(self.schema):
            raise ValueError("kept and dropped must cover the schema")

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "kept": self.kept,
            "dropped": [{"feature": f, "reason": r} for f, r in self.dropped.items()],
            "coefficients": self.coefficients,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SelectionReport":
        return cls(
            list(d["schema"]),
            {k: dict(v) for k, v in d["coefficients"].items()},
            list(d["kept"]),
            {e["feature"]: e["reason"] for e in d["dropped"]},
            dict(d.get("alpha", {})),
        )


def select_features(
    X: np.ndarray,
    y: np.ndarray,
    names: Sequence[str],
    settings: Mapping[str, np.ndarray],
    tau: float = 0.6,
    rho: float = 0.9,
    alpha: float | None = None,
    always_keep: Iterable[str] = (),
    seed: int = 0,
) -> SelectionReport:
    """Run both refinement stages plus redundancy pruning.

    ``X`` must already be standardized. ``settings`` maps a setting name to
    the row indices belonging to it; each setting gets its own lasso probe.
    Features in ``always_keep`` survive regardless of the probes.
    """
    names = list(names)
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    coefs: dict[str, dict[str, float]] = {}
    alphas: dict[str, float] = {}
    supports = []
    for sname in sorted(settings):
        rows = np.asarray(settings[sname])
        a = alpha if alpha is not None else select_alpha(X[rows], y[rows], seed=seed)
        fit = fit_l1_probe(X[rows], y[rows], a)
        coefs[sname] = {n: float(c) for n, c in zip(names, fit.coef)}
        alphas[sname] = a
        supports.append({n for n, c in zip(names, fit.coef) if c != 0.0})

    forced = set(always_keep) & set(names)
    any_support = set().union(*supports)
    consistent = consistency_filter(supports, tau) | forced
    dropped = {}
    for n in names:
        if n in forced:
            continue
        if n not in any_support:
            dropped[n] = ZERO_WEIGHT
        elif n not in consistent:
            dropped[n] = INCONSISTENT
    survivors = [n for n in names if n not in dropped]
    if survivors:
        mean_abs = {n: float(np.mean([abs(c[n]) for c in coefs.values()])) for n in names}
        pruned = redundancy_prune(X, y, names, survivors, mean_abs, rho)
        # a forced feature keeps its place; its redundant partners stay too
        for n in survivors:
            if n not in pruned and n not in forced:
                dropped[n] = REDUNDANT
    kept = [n for n in names if n not in dropped]
    return SelectionReport(names, coefs, kept, dropped, alphas)

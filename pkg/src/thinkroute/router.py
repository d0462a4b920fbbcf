"""Gradient-boosted regression trees with a monotone-decreasing cost feature.

Squared loss with per-instance weights. Each tree is grown depth-first
with exhaustive split search. Monotone features use bounded leaves: every
node carries an admissible output interval ``[lo, hi]``. A split on a
decreasing feature must give ``left >= right`` and moves the children's
bounds to meet at the midpoint of their values. As a result every leaf
left of such a split outputs at least as much as every leaf right of it.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .features import COST_FEATURE, FeatureVector, feature_matrix
from .io import canonical_json

log = logging.getLogger(__name__)

MODEL_FORMAT = "thinkroute-router"
MODEL_VERSION = 1
DECREASING = -1
INCREASING = 1
TUKEY_C = 4.685
MAD_TO_SIGMA = 1.4826
WEIGHT_FLOOR = 0.05
_MIN_GAIN = 1e-12


class ModelFormatError(ValueError):
    """A serialized model or policy failed validation; nothing was loaded."""


class SchemaMismatchError(KeyError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_rounds: int = 200
    max_depth: int = 3
    learning_rate: float = 0.05
    min_samples_leaf: int = 5
    subsample: float = 0.8
    seed: int = 0
    reweight: str = "tukey"

    def __post_init__(self):
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")
        if self.reweight not in ("none", "tukey"):
            raise ValueError(f"unknown reweight scheme {self.reweight!r}")


@dataclass
class Tree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf holding ``value[i]``."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)
    gain: list[float] = field(default_factory=list)

    def add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        self.gain.append(0.0)
        return len(self.feature) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(X.shape[0], dtype=int)
        active = feat[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            go_left = X[rows, feat[n]] <= thr[n]
            node[rows] = np.where(go_left, left[n], right[n])
            active = feat[node] >= 0
        return np.asarray(self.value)[node]

    def scale(self, factor: float) -> None:
        self.value = [v * factor for v in self.value]

    def n_leaves(self) -> int:
        return sum(f < 0 for f in self.feature)


@dataclass
class RouterModel:
    schema: tuple[str, ...]
    trees: list[Tree]
    learning_rate: float
    base_score: float
    monotone: dict[str, int]
    config: TrainConfig | None = None
    train_loss: list[float] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.monotone) - set(self.schema)
        if unknown:
            raise ValueError(f"monotone map references unknown features {sorted(unknown)}")
        for t in self.trees:
            if any(f >= len(self.schema) for f in t.feature):
                raise ValueError("tree splits on a feature outside the schema")
            if not np.all(np.isfinite(t.value)):
                raise ValueError("non-finite leaf value")

    @property
    def schema_hash(self) -> str:
        return schema_hash(self.schema)

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.schema):
            raise SchemaMismatchError(f"expected {len(self.schema)} columns, got shape {X.shape}")
        out = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def predict(self, x: FeatureVector | Mapping[str, float]) -> float:
        feats = x.features if isinstance(x, FeatureVector) else x
        missing = [n for n in self.schema if n not in feats]
        if missing:
            raise SchemaMismatchError(f"missing features: {', '.join(missing)}")
        row = np.array([[feats[n] for n in self.schema]], dtype=float)
        return float(self.predict_matrix(row)[0])

    def predict_vectors(self, vectors: Sequence[FeatureVector]) -> np.ndarray:
        try:
            X = feature_matrix(vectors, self.schema)
        except KeyError as exc:
            raise SchemaMismatchError(str(exc)) from None
        return self.predict_matrix(X)


def schema_hash(schema: Sequence[str]) -> str:
    """Hash of the schema manifest text (one feature name per line)."""
    return hashlib.sha256(("\n".join(schema) + "\n").encode()).hexdigest()


def _weighted_sse(y, w, pred) -> float:
    r = y - pred
    return float((w * r * r).sum())


def _node_loss(W, S, v):
    # weighted SSE up to a constant: sum w (r - v)^2 = W v^2 - 2 v S + sum w r^2
    return W * v * v - 2.0 * v * S


@dataclass
class _Split:
    gain: float
    feature: int
    threshold: float
    left_value: float
    right_value: float


def _best_split(X, r, w, rows, lo, hi, monotone, min_leaf) -> _Split | None:
    """Exhaustive search over features and midpoints between distinct values."""
    n = rows.size
    if n < 2 * min_leaf:
        return None
    Xn = X[rows]
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    ws = w[rows][order]
    ss = (w[rows] * r[rows])[order]
    Wl = np.cumsum(ws, axis=0)[:-1]
    Sl = np.cumsum(ss, axis=0)[:-1]
    W, S = Wl[-1] + ws[-1], Sl[-1] + ss[-1]
    Wr, Sr = W - Wl, S - Sl
    vp = np.clip(S[0] / W[0], lo, hi)
    parent = _node_loss(W[0], S[0], vp)
    with np.errstate(divide="ignore", invalid="ignore"):
        vl = np.clip(Sl / Wl, lo, hi)
        vr = np.clip(Sr / Wr, lo, hi)
    gain = parent - _node_loss(Wl, Sl, vl) - _node_loss(Wr, Sr, vr)
    count_left = np.arange(1, n)[:, None]
    valid = (xs[:-1] < xs[1:]) & (count_left >= min_leaf) & (n - count_left >= min_leaf)
    valid &= np.isfinite(gain)
    for f, direction in monotone.items():
        if direction == DECREASING:
            valid[:, f] &= vl[:, f] >= vr[:, f]
        else:
            valid[:, f] &= vl[:, f] <= vr[:, f]
    gain = np.where(valid, gain, -np.inf)
    best = None
    for f in range(X.shape[1]):
        col = gain[:, f]
        top = col.max()
        if not top > _MIN_GAIN:
            continue
        # equal gains up to rounding: lowest threshold, then lowest feature index
        i = int(np.argmax(col >= top - _tie_tol(top)))
        g = col[i]
        if best is None or g > best.gain + _tie_tol(best.gain):
            thr = 0.5 * (xs[i, f] + xs[i + 1, f])
            best = _Split(float(g), f, float(thr), float(vl[i, f]), float(vr[i, f]))
    return best


def _tie_tol(g: float) -> float:
    return 1e-9 * max(1.0, abs(g))


def _leaf_value(r, w, rows, lo, hi) -> float:
    W = w[rows].sum()
    return float(np.clip((w[rows] * r[rows]).sum() / W, lo, hi))


def fit_tree(
    X: np.ndarray,
    residual: np.ndarray,
    w: np.ndarray,
    rows: np.ndarray,
    max_depth: int,
    min_samples_leaf: int,
    monotone: Mapping[int, int] | None = None,
) -> Tree:
    """One depth-limited regression tree on ``rows`` (weighted SSE)."""
    monotone = dict(monotone or {})
    tree = Tree()

    def grow(node_rows, depth, lo, hi) -> int:
        node = tree.add_node()
        split = None
        if depth < max_depth:
            split = _best_split(X, residual, w, node_rows, lo, hi, monotone, min_samples_leaf)
        if split is None:
            tree.value[node] = _leaf_value(residual, w, node_rows, lo, hi)
            return node
        go_left = X[node_rows, split.feature] <= split.threshold
        l_lo, l_hi, r_lo, r_hi = lo, hi, lo, hi
        direction = monotone.get(split.feature)
        if direction is not None:
            mid = 0.5 * (split.left_value + split.right_value)
            if direction == DECREASING:
                l_lo, r_hi = mid, mid
            else:
                l_hi, r_lo = mid, mid
        tree.feature[node] = split.feature
        tree.threshold[node] = split.threshold
        tree.gain[node] = split.gain
        tree.left[node] = grow(node_rows[go_left], depth + 1, l_lo, l_hi)
        tree.right[node] = grow(node_rows[~go_left], depth + 1, r_lo, r_hi)
        return node

    grow(np.asarray(rows), 0, -np.inf, np.inf)
    return tree


def _check_inputs(X, y, w):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    if X.ndim != 2 or not (X.shape[0] == y.size == w.size):
        raise ValueError(f"inconsistent shapes X={X.shape}, y={y.shape}, w={w.shape}")
    if X.shape[0] < 2:
        raise ValueError("training needs at least 2 samples")
    if np.isnan(X).any():
        raise ValueError("NaN feature value in training matrix")
    if not np.isfinite(y).all():
        raise ValueError("non-finite target")
    if (w <= 0).any() or not np.isfinite(w).all():
        raise ValueError("weights must be positive and finite")
    return X, y, w


def train(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray | None,
    config: TrainConfig,
    schema: Sequence[str],
    monotone: Mapping[str, int] | None = None,
) -> RouterModel:
    """Boost ``config.n_rounds`` trees on weighted squared loss.

    ``monotone`` defaults to ``{delta_cost_est: decreasing}`` when that
    feature is in the schema. If a round's tree would raise the full-sample
    weighted loss (possible with subsampling or clamped leaves), it is shrunk
    to its loss-optimal scale, or dropped when that scale is not positive, so
    training loss never goes up.
    """
    X, y, w = _check_inputs(X, y, w)
    schema = tuple(schema)
    if len(schema) != X.shape[1]:
        raise ValueError("schema length does not match X")
    if monotone is None:
        monotone = {COST_FEATURE: DECREASING} if COST_FEATURE in schema else {}
    mono_idx = {schema.index(n): d for n, d in monotone.items()}

    rng = np.random.default_rng(config.seed)
    base = float((w * y).sum() / w.sum())
    pred = np.full(y.size, base)
    trees: list[Tree] = []
    losses = [_weighted_sse(y, w, pred)]
    lr = config.learning_rate
    n_sub = max(2, int(round(config.subsample * y.size)))
    for _ in range(config.n_rounds):
        if config.subsample < 1.0:
            rows = np.sort(rng.choice(y.size, size=n_sub, replace=False))
        else:
            rows = np.arange(y.size)
        resid = y - pred
        tree = fit_tree(X, resid, w, rows, config.max_depth, config.min_samples_leaf, mono_idx)
        step = tree.predict(X)
        wt = (w * step * step).sum()
        if wt > 0 and _weighted_sse(y, w, pred + lr * step) > losses[-1]:
            best_scale = (w * resid * step).sum() / wt
            if best_scale <= 0:
                continue
            tree.scale(min(best_scale, lr) / lr)
            step = tree.predict(X)
        pred = pred + lr * step
        trees.append(tree)
        losses.append(_weighted_sse(y, w, pred))
    return RouterModel(schema, trees, lr, base, dict(monotone), config, losses)


def reweight_tukey(residuals: np.ndarray, c: float = TUKEY_C, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    """Tukey bisquare weights on a robust (MAD) residual scale, floored at ``floor``."""
    r = np.asarray(residuals, dtype=float)
    mad = float(np.median(np.abs(r - np.median(r))))
    if mad == 0.0:
        return np.ones_like(r)
    cutoff = c * MAD_TO_SIGMA * mad
    u = np.clip(r / cutoff, -1.0, 1.0)
    w = np.where(np.abs(r) < cutoff, (1.0 - u * u) ** 2, floor)
    return np.maximum(w, floor)


def train_router(
    X: np.ndarray,
    y: np.ndarray,
    schema: Sequence[str],
    config: TrainConfig = TrainConfig(),
    w: np.ndarray | None = None,
) -> tuple[RouterModel, np.ndarray]:
    """Warm-up fit, optional Tukey reweighting, final fit. Returns ``(model, weights)``."""
    X, y, w = _check_inputs(X, y, w)
    if config.reweight == "tukey":
        warm = train(X, y, w, config, schema)
        w = w * reweight_tukey(y - warm.predict_matrix(X))
    return train(X, y, w, config, schema), w


def feature_importance(model: RouterModel, normalize: bool = False) -> dict[str, float]:
    """Total split gain per feature (features never split on are omitted)."""
    gains: dict[str, float] = {}
    for t in model.trees:
        for f, g in zip(t.feature, t.gain):
            if f >= 0:
                name = model.schema[f]
                gains[name] = gains.get(name, 0.0) + g
    if normalize and gains:
        total = sum(gains.values())
        gains = {k: v / total for k, v in gains.items()}
    return gains


# -- serialization -------------------------------------------------------------


def _payload(model: RouterModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "schema": list(model.schema),
        "schema_hash": model.schema_hash,
        "monotone": {k: int(v) for k, v in sorted(model.monotone.items())},
        "learning_rate": model.learning_rate,
        "base_score": model.base_score,
        "config": asdict(model.config) if model.config else None,
        "trees": [asdict(t) for t in model.trees],
        "provenance": model.provenance,
    }


def save(model: RouterModel) -> bytes:
    """Canonical JSON text; a checksum over the body guards against corruption."""
    body = _payload(model)
    body["checksum"] = hashlib.sha256(canonical_json(body).encode()).hexdigest()
    return (canonical_json(body) + "\n").encode()


def load(data: bytes | str) -> RouterModel:
    try:
        body = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(body, dict) or body.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a router model file")
    if body.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {body.get('version')!r} (expected {MODEL_VERSION})")
    checksum = body.pop("checksum", None)
    try:
        digest = hashlib.sha256(canonical_json(body).encode()).hexdigest()
    except ValueError:  # e.g. a corrupted exponent that overflows to inf
        raise ModelFormatError("model file holds non-finite numbers") from None
    if checksum != digest:
        raise ModelFormatError("model checksum mismatch (file corrupted or edited)")
    try:
        schema = tuple(body["schema"])
        if schema_hash(schema) != body["schema_hash"]:
            raise ModelFormatError("schema hash does not match embedded schema")
        cfg = TrainConfig(**body["config"]) if body["config"] else None
        trees = [Tree(**t) for t in body["trees"]]
        return RouterModel(
            schema, trees, float(body["learning_rate"]), float(body["base_score"]),
            {k: int(v) for k, v in body["monotone"].items()}, cfg,
            provenance=dict(body.get("provenance") or {}),
        )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"invalid model payload: {exc}") from None

"""Segment pooling and ranking-aware instance statistics.

Every feature is computed from unit-normalized segment embeddings, so the
whole block is invariant to rescaling any individual embedding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

FEATURE_SCHEMA_VERSION = "1"

COMPLEXITY_FEATURES = (
    "ctx_drift_mean",
    "ctx_coherence",
    "cand_pairwise_cos_mean",
    "cand_pairwise_cos_std",
    "cand_cluster_entropy",
    "cand_spectral_entropy",
)
ALIGNMENT_FEATURES = (
    "align_centroid_cos",
    "align_max_cos",
    "align_top_margin",
    "align_cos_std",
    "align_softmax_entropy",
)
COST_FEATURE = "delta_cost_est"
BASE_SCHEMA = COMPLEXITY_FEATURES + ALIGNMENT_FEATURES + (COST_FEATURE,)

KMEANS_SEED = 0
KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 100
_ZERO_NORM = 1e-12


@dataclass(frozen=True)
class EmbeddingDump:
    instance_id: str
    candidates: np.ndarray
    prompt_tokens: int
    context: np.ndarray | None = None
    history: np.ndarray | None = None

    def __post_init__(self):
        if (self.context is None) == (self.history is None):
            raise ValueError(f"{self.instance_id}: exactly one of context/history is required")
        arrays = [self.candidates, self.context if self.context is not None else self.history]
        dim = self.candidates.shape[-1]
        if self.candidates.ndim != 2 or (self.history is not None and self.history.ndim != 2):
            raise ValueError(f"{self.instance_id}: candidate/history blocks must be 2-D")
        if any(a.shape[-1] != dim for a in arrays):
            raise ValueError(f"{self.instance_id}: inconsistent embedding dimension")
        if not all(np.isfinite(a).all() for a in arrays):
            raise ValueError(f"{self.instance_id}: non-finite embedding entries")
        if self.prompt_tokens < 0:
            raise ValueError(f"{self.instance_id}: prompt_tokens must be >= 0")

    @property
    def dim(self) -> int:
        return self.candidates.shape[1]

    @property
    def n_candidates(self) -> int:
        return self.candidates.shape[0]

    def context_vector(self) -> np.ndarray:
        """Query embedding, or the mean of history-item embeddings for Rec."""
        if self.context is not None:
            return self.context
        return self.history.mean(axis=0)

    def to_dict(self, decimals: int | None = None) -> dict:
        def enc(a):
            return (np.round(a, decimals) if decimals is not None else a).tolist()

        d = {
            "instance_id": self.instance_id,
            "dim": self.dim,
            "prompt_tokens": self.prompt_tokens,
            "candidates": enc(self.candidates),
        }
        if self.context is not None:
            d["context"] = enc(self.context)
        else:
            d["history"] = enc(self.history)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EmbeddingDump":
        dim = int(d["dim"])
        cands = np.asarray(d["candidates"], dtype=float).reshape(-1, dim)
        ctx = np.asarray(d["context"], dtype=float) if "context" in d else None
        hist = np.asarray(d["history"], dtype=float).reshape(-1, dim) if "history" in d else None
        if ctx is not None and ctx.shape != (dim,):
            raise ValueError(f"{d['instance_id']}: context has shape {ctx.shape}, expected ({dim},)")
        return cls(str(d["instance_id"]), cands, int(d["prompt_tokens"]), ctx, hist)


def pool_segment(states: np.ndarray, segment: Iterable[int], pooling: str = "mean") -> np.ndarray:
    """Mean of the rows of ``states`` (T x d) listed in ``segment`` (0-based)."""
    if pooling != "mean":
        raise ValueError(f"unsupported pooling {pooling!r}")
    idx = np.fromiter(segment, dtype=int)
    if idx.size == 0:
        raise ValueError("empty segment")
    if idx.min() < 0 or idx.max() >= states.shape[0]:
        raise IndexError(f"segment index out of range for {states.shape[0]} tokens")
    return states[idx].mean(axis=0)


def _unit_rows(a: np.ndarray) -> tuple[np.ndarray, bool]:
    """Row-normalize; zero rows stay zero so their cosines come out 0."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    zero = norms < _ZERO_NORM
    return np.where(zero, 0.0, a / np.where(zero, 1.0, norms)), bool(zero.any())


def _upper_pairs(sim: np.ndarray) -> np.ndarray:
    i, j = np.triu_indices(sim.shape[0], k=1)
    return sim[i, j]


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    p = p[p > 0]
    if p.size == 0:
        return 0.0
    p = p / p.sum()
    return float(-(p * np.log(p)).sum())


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
        else:
            centers.append(x[rng.choice(n, p=d2 / total)])
        d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans_labels(
    x: np.ndarray,
    k: int,
    restarts: int = KMEANS_RESTARTS,
    max_iter: int = KMEANS_MAX_ITER,
    seed: int = KMEANS_SEED,
) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` by inertia."""
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = _kmeans_pp_init(x, k, rng)
        labels = None
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new = d2.argmin(axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for c in range(k):
                members = labels == c
                if members.any():
                    centers[c] = x[members].mean(axis=0)
        inertia = ((x - centers[labels]) ** 2).sum()
        if inertia < best_inertia - 1e-12:
            best, best_inertia = labels, inertia
    return best


def complexity_features(dump: EmbeddingDump, n_clusters: int | None = None) -> dict[str, float]:
    """Context coherence/drift and candidate dispersion statistics."""
    n = dump.n_candidates
    if n < 2:
        raise ValueError(f"{dump.instance_id}: need at least 2 candidates")
    cands, zero_c = _unit_rows(dump.candidates)
    out: dict[str, float] = {}

    if dump.history is not None and dump.history.shape[0] > 1:
        hist, zero_h = _unit_rows(dump.history)
        consecutive = (hist[1:] * hist[:-1]).sum(axis=1)
        out["ctx_drift_mean"] = float(np.mean(1.0 - consecutive))
        out["ctx_coherence"] = float(_upper_pairs(hist @ hist.T).mean())
        zero_c |= zero_h
    else:
        out["ctx_drift_mean"] = 0.0
        out["ctx_coherence"] = 1.0

    pair_cos = _upper_pairs(cands @ cands.T)
    out["cand_pairwise_cos_mean"] = float(pair_cos.mean())
    out["cand_pairwise_cos_std"] = float(pair_cos.std())

    k = n_clusters if n_clusters is not None else min(5, n - 1)
    labels = kmeans_labels(cands, k)
    out["cand_cluster_entropy"] = entropy(np.bincount(labels, minlength=k))

    eig = np.linalg.eigvalsh(np.cov(cands, rowvar=False, bias=True).reshape(dump.dim, dump.dim))
    eig = np.clip(eig, 0.0, None)
    # rounding noise on a zero-spread pool must not register as spread
    eig[eig < 1e-12 * max(1.0, eig.max(initial=0.0))] = 0.0
    out["cand_spectral_entropy"] = entropy(eig)

    if zero_c:
        log.warning("%s: zero-norm embedding; its cosines were set to 0", dump.instance_id)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def alignment_features(dump: EmbeddingDump) -> dict[str, float]:
    """How well and how decisively the candidates match the context."""
    ctx, zero_x = _unit_rows(dump.context_vector())
    cands, zero_c = _unit_rows(dump.candidates)
    if zero_x or zero_c:
        log.warning("%s: zero-norm embedding; its cosines were set to 0", dump.instance_id)
    cos = cands @ ctx[0]
    centroid, _ = _unit_rows(cands.mean(axis=0))
    top = np.sort(cos)[::-1]
    return {
        "align_centroid_cos": float(centroid[0] @ ctx[0]),
        "align_max_cos": float(top[0]),
        "align_top_margin": float(top[0] - top[1]),
        "align_cos_std": float(cos.std()),
        "align_softmax_entropy": entropy(softmax(cos)),
    }


@dataclass(frozen=True)
class CostModel:
    """Linear predictor of Think's extra tokens from prompt size and pool size."""

    columns: tuple[str, ...]
    coef: tuple[float, ...]
    residual_scale: float

    def predict(self, prompt_tokens: float, n_candidates: float) -> float:
        row = {"intercept": 1.0, "prompt_tokens": float(prompt_tokens), "n_candidates": float(n_candidates)}
        value = sum(c * row[name] for name, c in zip(self.columns, self.coef))
        return max(1.0, float(value))

    def coefficient(self, name: str) -> float:
        return dict(zip(self.columns, self.coef)).get(name, 0.0)

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "coef": list(self.coef), "residual_scale": self.residual_scale}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CostModel":
        return cls(tuple(d["columns"]), tuple(float(c) for c in d["coef"]), float(d["residual_scale"]))

    @classmethod
    def constant(cls, value: float) -> "CostModel":
        return cls(("intercept",), (float(value),), 0.0)


def fit_cost_model(prompt_tokens: Sequence[float], n_candidates: Sequence[float], delta_tokens: Sequence[float]) -> CostModel:
    """Least squares of ΔT on (1, prompt_tokens, n_candidates).

    Regressors that are constant over the training set are dropped; if the
    remaining design is still rank deficient the model is the mean ΔT.
    """
    y = np.asarray(delta_tokens, dtype=float)
    if y.size < 2:
        raise ValueError("cost model needs at least 2 training records")
    raw = {"prompt_tokens": np.asarray(prompt_tokens, float), "n_candidates": np.asarray(n_candidates, float)}
    columns = ["intercept"] + [name for name, v in raw.items() if np.ptp(v) > 0]
    X = np.column_stack([np.ones_like(y)] + [raw[c] for c in columns[1:]])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        columns, X = ["intercept"], X[:, :1]
    if len(columns) == 1:
        log.info("cost model: intercept-only fallback")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    return CostModel(tuple(columns), tuple(float(c) for c in coef), float(resid.std()))


@dataclass(frozen=True)
class FeatureVector:
    instance_id: str
    features: dict[str, float]
    schema_version: str = FEATURE_SCHEMA_VERSION

    def __post_init__(self):
        bad = [k for k, v in self.features.items() if not np.isfinite(v)]
        if bad:
            raise ValueError(f"{self.instance_id}: non-finite features {bad}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.features)

    def to_dict(self) -> dict:
        return {"instance_id": self.instance_id, "schema_version": self.schema_version, "features": self.features}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureVector":
        return cls(str(d["instance_id"]), {k: float(v) for k, v in d["features"].items()}, d.get("schema_version", FEATURE_SCHEMA_VERSION))


def extract_features(dump: EmbeddingDump, cost_model: CostModel | None, extra: Mapping[str, float] | None = None) -> FeatureVector:
    """Complexity block, alignment block, then ``delta_cost_est``; ``extra`` (e.g. checklist signals) last."""
    if cost_model is None:
        raise ValueError("cost model is not fitted")
    feats = complexity_features(dump)
    feats.update(alignment_features(dump))
    feats[COST_FEATURE] = cost_model.predict(dump.prompt_tokens, dump.n_candidates)
    if extra:
        for name in sorted(extra):
            feats[name] = float(extra[name])
    return FeatureVector(dump.instance_id, feats)


def feature_matrix(vectors: Sequence[FeatureVector], schema: Sequence[str]) -> np.ndarray:
    X = np.empty((len(vectors), len(schema)))
    for r, v in enumerate(vectors):
        missing = [n for n in schema if n not in v.features]
        if missing:
            raise KeyError(f"{v.instance_id}: missing features {missing}")
        X[r] = [v.features[n] for n in schema]
    return X


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    constant: tuple[bool, ...] = field(default=())

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, float) - self.mean) / self.scale


def standardize(X: np.ndarray) -> tuple[Standardizer, np.ndarray]:
    """Per-column z-scores (population std); near-constant columns are only centered."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("standardize needs at least 2 vectors")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    const = std < 1e-12
    if const.any():
        log.info("standardize: %d constant feature(s) centered only", int(const.sum()))
    scale = np.where(const, 1.0, std)
    tf = Standardizer(mean, scale, tuple(bool(c) for c in const))
    return tf, tf.transform(X)

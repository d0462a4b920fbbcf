"""End-to-end stages over a working directory of line-delimited record files.

Each stage reads its inputs, checks their provenance headers, and writes
its outputs atomically with the hashes of the files it consumed.
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from . import router as rt
from .checklist import ProbeResult, aggregate_pairs, default_checklist, load_checklist, save_checklist, signal_features
from .features import COST_FEATURE, EmbeddingDump, FeatureVector, extract_features, feature_matrix, fit_cost_model, standardize
from .gateway import GatewayConfig, HttpBackend, StubBackend, collect_dual_mode, load_dual_mode, probe_checklist
from .io import (
    ProvenanceError,
    atomic_write_bytes,
    atomic_write_text,
    file_hash,
    iter_lines,
    make_header,
    read_json,
    read_records,
    verify_inputs,
    write_json,
    write_records,
)
from .policy import (
    THINK,
    FrontierPoint,
    PolicyArtifact,
    SweepData,
    freeze_policy,
    pareto_filter,
    solve_anchor,
    sweep_eta,
)
from .ranking import (
    AdvantageLabel,
    DualModeRecord,
    ModeOutcome,
    RankingInstance,
    advantage_label,
    metric_fn,
    pairwise_accuracy,
    parse_metric,
    recall_at_k,
    ndcg_at_k,
    top1_agreement,
    tradeoff_score,
)
from .selection import select_features
from .synth import SynthParams, generate

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
EVAL_METRICS = ("ndcg@5", "ndcg@10", "recall@5", "recall@10", "top1", "pwacc")
ARMS = ("NonThink", "Think", "Random", "SelfSelect", "Routed", "Oracle")

DEFAULT_FILES = {
    "instances": "instances.jsonl",
    "embeddings": "embeddings.jsonl",
    "dual_mode": "dual_mode.jsonl",
    "self_select": "self_select.jsonl",
    "probes": "probes.jsonl",
    "checklist": "checklist.jsonl",
    "synth_truth": "synth_truth.jsonl",
    "splits": "splits.jsonl",
    "labels": "labels.jsonl",
    "cost_model": "cost_model.json",
    "features": "features.jsonl",
    "schema": "schema.json",
    "selection": "selection.json",
    "selected_schema": "selected_schema.json",
    "model": "model.json",
    "train_log": "train_log.jsonl",
    "frontier": "frontier.jsonl",
    "policy": "policy.json",
    "decisions": "decisions.jsonl",
    "eval": "eval.json",
    "report_json": "report.json",
    "report_md": "report.md",
    "frontier_plot": "frontier_plot.csv",
}


class StageError(RuntimeError):
    """A stage cannot run: missing input, bad config or stale provenance."""


@dataclass
class SynthConfig:
    n_instances: int = 2000
    n_candidates: int = 50
    dim: int = 16
    task: str = "Rec"


@dataclass
class SelectConfig:
    tau: float = 0.6
    rho: float = 0.9
    alpha: float | None = None
    n_settings: int = 3


@dataclass
class PolicyConfig:
    anchor: str = "umax"
    w_T: float = 1.0
    w_U: float = 1.0
    epsilon: float = 0.0
    u_base: float | None = None
    eta: float | None = None


@dataclass
class EvalConfig:
    split: str = "test"
    baseline: str = "Think"
    random_p: float = 0.5
    random_seed: int = 1


@dataclass
class PipelineConfig:
    workdir: Path = Path("work")
    seed: int = 0
    lam: float = 1e-4
    utility: str = "ndcg@10"
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    checklist: str | None = None
    backend: str = "stub"
    files: dict[str, str] = field(default_factory=dict)
    synth: SynthConfig = field(default_factory=SynthConfig)
    select: SelectConfig = field(default_factory=SelectConfig)
    train: rt.TrainConfig = field(default_factory=rt.TrainConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        parse_metric(self.utility)
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError("split_fractions must be non-negative and sum to 1")
        unknown = set(self.files) - set(DEFAULT_FILES)
        if unknown:
            raise ValueError(f"unknown file roles {sorted(unknown)}")

    def path(self, role: str) -> Path:
        name = self.files.get(role, DEFAULT_FILES[role])
        p = Path(name)
        return p if p.is_absolute() else self.workdir / p


_SECTIONS = {
    "synth": SynthConfig,
    "select": SelectConfig,
    "train": rt.TrainConfig,
    "policy": PolicyConfig,
    "eval": EvalConfig,
    "gateway": GatewayConfig,
}


def config_from_dict(d: Mapping[str, Any], base_dir: Path | None = None) -> PipelineConfig:
    d = dict(d)
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    for name, cls in _SECTIONS.items():
        if name in d:
            section = dict(d[name] or {})
            allowed = {f.name for f in fields(cls)}
            bad = set(section) - allowed
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            d[name] = cls(**section)
    if "split_fractions" in d:
        d["split_fractions"] = tuple(d["split_fractions"])
    if "workdir" in d and base_dir is not None and not Path(d["workdir"]).is_absolute():
        d["workdir"] = base_dir / d["workdir"]
    return PipelineConfig(**d)


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    data: dict = {}
    base = None
    if path is not None:
        path = Path(path)
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        base = path.parent
    for key, value in (overrides or {}).items():
        target = data
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return config_from_dict(data, base)


def config_to_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    d["workdir"] = str(cfg.workdir)
    d["split_fractions"] = list(cfg.split_fractions)
    return d


# -- helpers -----------------------------------------------------------------


def _require(cfg: PipelineConfig, *roles: str) -> None:
    missing = [str(cfg.path(r)) for r in roles if not cfg.path(r).exists()]
    if missing:
        raise StageError("missing input file(s): " + ", ".join(missing))


def check_provenance(cfg: PipelineConfig, role: str) -> dict | None:
    """Verify the hashes recorded in ``role``'s header against the files on disk."""
    path = cfg.path(role)
    if path.suffix == ".jsonl":
        header, _ = read_records(path)
    else:
        header = read_json(path).get("provenance")
    if header:
        roles = [r for r in (header.get("inputs") or {}) if r in DEFAULT_FILES and cfg.path(r).exists()]
        try:
            verify_inputs(header, {r: cfg.path(r) for r in roles})
        except ProvenanceError as exc:
            raise ProvenanceError(f"{path.name} is stale: {exc}; rerun the stage that writes it") from None
    return header


def _inputs(cfg: PipelineConfig, *roles: str) -> dict[str, Path]:
    return {r: cfg.path(r) for r in roles if cfg.path(r).exists()}


def load_instances(cfg: PipelineConfig) -> dict[str, RankingInstance]:
    _, recs = read_records(cfg.path("instances"))
    out = {}
    for r in recs:
        inst = RankingInstance.from_dict(r)
        if inst.id in out:
            raise StageError(f"duplicate instance id {inst.id}")
        out[inst.id] = inst
    return out


def load_splits(cfg: PipelineConfig) -> dict[str, str]:
    _require(cfg, "splits")
    _, recs = read_records(cfg.path("splits"))
    return {r["instance_id"]: r["split"] for r in recs}


def ids_in(cfg: PipelineConfig, split: str) -> list[str]:
    if split not in SPLITS:
        raise StageError(f"unknown split {split!r}")
    return [iid for iid, s in load_splits(cfg).items() if s == split]


def load_features(cfg: PipelineConfig) -> dict[str, FeatureVector]:
    _, recs = read_records(cfg.path("features"))
    return {r["instance_id"]: FeatureVector.from_dict(r) for r in recs}


def load_labels(cfg: PipelineConfig) -> tuple[dict, dict[str, AdvantageLabel]]:
    header, recs = read_records(cfg.path("labels"))
    return header or {}, {r["instance_id"]: AdvantageLabel.from_dict(r) for r in recs}


def load_model(cfg: PipelineConfig) -> rt.RouterModel:
    return rt.load(cfg.path("model").read_bytes())


def load_outcomes(path: Path) -> dict[str, ModeOutcome]:
    _, recs = read_records(path)
    return {r["instance_id"]: ModeOutcome.from_dict(r["instance_id"], r) for r in recs}


# -- stages ------------------------------------------------------------------


def stage_synth(cfg: PipelineConfig) -> list[Path]:
    s = cfg.synth
    data = generate(cfg.seed, s.n_instances, SynthParams(n_candidates=s.n_candidates, dim=s.dim, task=s.task))
    meta = {"generator": "synth", "seed": cfg.seed, "n_instances": s.n_instances}
    outs = {
        "instances": [i.to_dict() for i in data.instances],
        "embeddings": [d.to_dict(decimals=6) for d in data.dumps],
        "dual_mode": [r.to_dict() for r in data.records],
        "self_select": [{"instance_id": i.id, **o.to_dict()} for i, o in zip(data.instances, data.self_select)],
        "probes": [p.to_dict() for p in data.probes],
        "synth_truth": data.truth,
    }
    for role, records in outs.items():
        write_records(cfg.path(role), records, make_header(role, **meta))
    save_checklist(cfg.path("checklist"), default_checklist())
    return [cfg.path(r) for r in (*outs, "checklist")]


def stage_ingest(cfg: PipelineConfig) -> list[Path]:
    """Validate instances (and any dual-mode log / dumps), then assign splits."""
    _require(cfg, "instances")
    instances = load_instances(cfg)
    if cfg.path("dual_mode").exists():
        logged = load_dual_mode(cfg.path("dual_mode"))
        unknown = set(logged) - set(instances)
        if unknown:
            raise StageError(f"dual-mode log has {len(unknown)} unknown instance ids")
        for iid, rec in logged.items():
            valid = set(instances[iid].candidate_ids)
            for o in (rec.think, rec.non_think):
                if not set(o.ranking.order) <= valid:
                    raise StageError(f"{iid}: logged ranking uses ids outside the candidate set")
    if cfg.path("embeddings").exists():
        for _, obj in iter_lines(cfg.path("embeddings")):
            if "_header" in obj:
                continue
            dump = EmbeddingDump.from_dict(obj)
            inst = instances.get(dump.instance_id)
            if inst is None:
                raise StageError(f"embedding dump for unknown instance {dump.instance_id}")
            if dump.n_candidates != len(inst.candidates):
                raise StageError(f"{dump.instance_id}: {dump.n_candidates} candidate embeddings for {len(inst.candidates)} candidates")
    ids = sorted(instances)
    perm = np.random.default_rng(cfg.seed).permutation(len(ids))
    n_train = int(round(cfg.split_fractions[0] * len(ids)))
    n_val = int(round(cfg.split_fractions[1] * len(ids)))
    split_of = {}
    for rank, idx in enumerate(perm):
        split_of[ids[idx]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    records = [{"instance_id": iid, "split": split_of[iid]} for iid in ids]
    header = make_header("splits", _inputs(cfg, "instances"), seed=cfg.seed, fractions=list(cfg.split_fractions))
    write_records(cfg.path("splits"), records, header)
    return [cfg.path("splits")]


def stage_label(cfg: PipelineConfig) -> list[Path]:
    _require(cfg, "instances", "dual_mode")
    instances = load_instances(cfg)
    logged = load_dual_mode(cfg.path("dual_mode"))
    missing = set(instances) - set(logged)
    if missing:
        raise StageError(f"dual-mode log lacks {len(missing)} instance(s), e.g. {sorted(missing)[0]}")
    fn = metric_fn(cfg.utility)
    labels = [advantage_label(logged[iid], instances[iid], cfg.lam, fn).to_dict() for iid in sorted(instances)]
    header = make_header("labels", _inputs(cfg, "instances", "dual_mode"), **{"lambda": cfg.lam, "utility": cfg.utility})
    write_records(cfg.path("labels"), labels, header)
    return [cfg.path("labels")]


def _backend(cfg: PipelineConfig):
    if cfg.backend == "stub":
        return StubBackend()
    if cfg.backend == "http":
        return HttpBackend(cfg.gateway)
    raise StageError(f"unknown backend {cfg.backend!r}")


def _checklist(cfg: PipelineConfig):
    if cfg.checklist:
        return load_checklist(cfg.checklist)
    if cfg.path("checklist").exists():
        return load_checklist(cfg.path("checklist"))
    return default_checklist()


def stage_probe(cfg: PipelineConfig) -> list[Path]:
    _require(cfg, "instances")
    instances = load_instances(cfg)
    checklist = _checklist(cfg)
    backend = _backend(cfg)
    results = [probe_checklist(instances[iid], checklist, backend, cfg.gateway).to_dict() for iid in sorted(instances)]
    header = make_header("probes", _inputs(cfg, "instances"), backend=cfg.backend)
    write_records(cfg.path("probes"), results, header)
    return [cfg.path("probes")]


def stage_collect(cfg: PipelineConfig) -> list[Path]:
    _require(cfg, "instances")
    instances = load_instances(cfg)
    stats = collect_dual_mode([instances[i] for i in sorted(instances)], _backend(cfg), cfg.gateway, cfg.path("dual_mode"))
    log.info("collect: %s", stats)
    if stats["failed"]:
        log.warning("collect: %d instance(s) failed; rerun to retry them", stats["failed"])
    return [cfg.path("dual_mode")]


def stage_features(cfg: PipelineConfig) -> list[Path]:
    """Fit the ΔT cost model on train, then featurize every instance."""
    _require(cfg, "instances", "embeddings", "dual_mode", "splits")
    check_provenance(cfg, "splits")
    instances = load_instances(cfg)
    logged = load_dual_mode(cfg.path("dual_mode"))
    splits = load_splits(cfg)
    dumps = {}
    for _, obj in iter_lines(cfg.path("embeddings")):
        if "_header" not in obj:
            d = EmbeddingDump.from_dict(obj)
            dumps[d.instance_id] = d
    missing = set(instances) - set(dumps)
    if missing:
        raise StageError(f"no embedding dump for {len(missing)} instance(s)")

    train_ids = [i for i in sorted(instances) if splits.get(i) == "train" and i in logged]
    cost = fit_cost_model(
        [dumps[i].prompt_tokens for i in train_ids],
        [dumps[i].n_candidates for i in train_ids],
        [logged[i].think.tokens - logged[i].non_think.tokens for i in train_ids],
    )
    signals: dict[str, dict[str, float]] = {}
    roles = ["instances", "embeddings", "dual_mode", "splits"]
    if cfg.path("probes").exists():
        checklist = _checklist(cfg)
        _, recs = read_records(cfg.path("probes"))
        for r in recs:
            res = ProbeResult.from_dict(r)
            signals[res.instance_id] = signal_features(aggregate_pairs(res, checklist))
        roles.append("probes")
        lacking = set(instances) - set(signals)
        if lacking:
            raise StageError(f"probe results missing for {len(lacking)} instance(s)")

    vectors = [extract_features(dumps[i], cost, signals.get(i)) for i in sorted(instances)]
    schema = list(vectors[0].names)
    for v in vectors:
        if list(v.names) != schema:
            raise StageError(f"{v.instance_id}: feature schema differs from the rest of the dataset")
    header = make_header("features", _inputs(cfg, *roles))
    write_json(cfg.path("cost_model"), {**cost.to_dict(), "provenance": make_header("cost_model", _inputs(cfg, "embeddings", "dual_mode", "splits"))})
    write_records(cfg.path("features"), (v.to_dict() for v in vectors), header)
    write_json(cfg.path("schema"), {"features": schema, "schema_hash": rt.schema_hash(schema)})
    return [cfg.path("cost_model"), cfg.path("features"), cfg.path("schema")]


def _matrix(cfg, ids, schema):
    feats = load_features(cfg)
    try:
        return feature_matrix([feats[i] for i in ids], schema)
    except KeyError as exc:
        raise StageError(f"feature file does not match the schema: {exc}") from None


def _read_schema(path: Path) -> list[str]:
    manifest = read_json(path)
    names = list(manifest["features"])
    if manifest.get("schema_hash") != rt.schema_hash(names):
        raise StageError(f"{path.name}: schema hash does not match its feature list")
    return names


def stage_select(cfg: PipelineConfig) -> list[Path]:
    _require(cfg, "features", "schema", "labels", "splits")
    for role in ("features", "labels"):
        check_provenance(cfg, role)
    schema = _read_schema(cfg.path("schema"))
    _, labels = load_labels(cfg)
    train_ids = [i for i in ids_in(cfg, "train") if i in labels]
    X = _matrix(cfg, train_ids, schema)
    y = np.array([labels[i].advantage for i in train_ids])
    _, Xs = standardize(X)
    rows = np.random.default_rng(cfg.seed).permutation(len(train_ids))
    settings = {f"part{j}": np.sort(part) for j, part in enumerate(np.array_split(rows, cfg.select.n_settings))}
    report = select_features(
        Xs, y, schema, settings,
        tau=cfg.select.tau, rho=cfg.select.rho, alpha=cfg.select.alpha,
        always_keep=[COST_FEATURE], seed=cfg.seed,
    )
    prov = make_header("selection", _inputs(cfg, "features", "schema", "labels", "splits"))
    write_json(cfg.path("selection"), {**report.to_dict(), "provenance": prov})
    write_json(cfg.path("selected_schema"), {"features": report.kept, "schema_hash": rt.schema_hash(report.kept), "provenance": prov})
    return [cfg.path("selection"), cfg.path("selected_schema")]


def stage_train(cfg: PipelineConfig) -> list[Path]:
    _require(cfg, "features", "labels", "splits")
    schema_role = "selected_schema" if cfg.path("selected_schema").exists() else "schema"
    schema = _read_schema(cfg.path(schema_role))
    for role in ("features", "labels", schema_role):
        check_provenance(cfg, role)
    _, labels = load_labels(cfg)
    train_ids = [i for i in ids_in(cfg, "train") if i in labels]
    X = _matrix(cfg, train_ids, schema)
    y = np.array([labels[i].advantage for i in train_ids])
    w = np.array([labels[i].weight for i in train_ids])
    model, weights = rt.train_router(X, y, schema, cfg.train, w)
    model.provenance = make_header("model", _inputs(cfg, "features", "labels", "splits", schema_role))
    cfg.path("model").parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(cfg.path("model"), rt.save(model))
    log_records = [{"round": r, "weighted_sse": loss} for r, loss in enumerate(model.train_loss)]
    header = make_header("train_log", _inputs(cfg, "features", "labels"), n_train=len(train_ids),
                         mean_weight=float(weights.mean()), min_weight=float(weights.min()))
    write_records(cfg.path("train_log"), log_records, header)
    return [cfg.path("model"), cfg.path("train_log")]


def sweep_inputs(cfg: PipelineConfig, split: str, model: rt.RouterModel | None = None) -> tuple[list[str], SweepData]:
    """Predictions, ΔT̂ and logged outcomes for every instance of ``split``."""
    _require(cfg, "model", "features", "dual_mode", "instances", "splits")
    model = model or load_model(cfg)
    feats = load_features(cfg)
    instances = load_instances(cfg)
    logged = load_dual_mode(cfg.path("dual_mode"))
    ids = [i for i in ids_in(cfg, split) if i in logged]
    if not ids:
        raise StageError(f"no logged instances in split {split!r}")
    vectors = [feats[i] for i in ids]
    try:
        a_hat = model.predict_vectors(vectors)
    except rt.SchemaMismatchError as exc:
        raise StageError(f"features do not match the model schema: {exc}") from None
    fn = metric_fn(cfg.utility)
    data = SweepData(
        a_hat=a_hat,
        delta_cost=np.array([v.features[COST_FEATURE] for v in vectors]),
        tokens_think=np.array([logged[i].think.tokens for i in ids], float),
        tokens_non=np.array([logged[i].non_think.tokens for i in ids], float),
        utility_think=np.array([fn(logged[i].think, instances[i]) for i in ids]),
        utility_non=np.array([fn(logged[i].non_think, instances[i]) for i in ids]),
    )
    return ids, data


def stage_sweep(cfg: PipelineConfig) -> list[Path]:
    check_provenance(cfg, "model")
    _, data = sweep_inputs(cfg, "val")
    points = sweep_eta(data)
    front = set(pareto_filter(points))
    records = [{**p.to_dict(), "non_dominated": p in front} for p in points]
    header = make_header(
        "frontier", _inputs(cfg, "model", "features", "dual_mode", "splits"), split="val", utility=cfg.utility,
        always_think={"mean_tokens": float(data.tokens_think.mean()), "utility": float(data.utility_think.mean())},
        always_non_think={"mean_tokens": float(data.tokens_non.mean()), "utility": float(data.utility_non.mean())},
    )
    write_records(cfg.path("frontier"), records, header)
    return [cfg.path("frontier")]


def source_date() -> str:
    """Timestamp for frozen artifacts; honours SOURCE_DATE_EPOCH, else the epoch."""
    import datetime as dt

    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return dt.datetime.fromtimestamp(epoch, dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def stage_policy(cfg: PipelineConfig) -> list[Path]:
    _require(cfg, "frontier")
    check_provenance(cfg, "frontier")
    _, data = sweep_inputs(cfg, "val")
    _, recs = read_records(cfg.path("frontier"))
    points = [FrontierPoint(r["eta"], r["mean_tokens"], r["utility"], r["think_fraction"]) for r in recs]
    p = cfg.policy
    eta, point, params = solve_anchor(
        p.anchor, points, data, grid=[pt.eta for pt in points],
        w_t=p.w_T, w_u=p.w_U, u_base=p.u_base, epsilon=p.epsilon, eta=p.eta,
    )
    provenance = {
        "model_hash": file_hash(cfg.path("model")),
        "data_hash": file_hash(cfg.path("features")),
        "frontier_hash": file_hash(cfg.path("frontier")),
        "timestamp": source_date(),
        "inputs": make_header("policy", _inputs(cfg, "model", "features", "frontier", "dual_mode"))["inputs"],
    }
    artifact = freeze_policy(p.anchor, eta, point, params, provenance)
    atomic_write_text(cfg.path("policy"), artifact.dumps())
    return [cfg.path("policy")]


def load_policy(cfg: PipelineConfig) -> PolicyArtifact:
    return PolicyArtifact.loads(cfg.path("policy").read_text(encoding="utf-8"))


def stage_route(cfg: PipelineConfig, split: str | None = None) -> list[Path]:
    split = split or cfg.eval.split
    _require(cfg, "policy", "model", "features", "splits")
    policy = load_policy(cfg)
    model = load_model(cfg)
    model_hash = file_hash(cfg.path("model"))
    feats = load_features(cfg)
    ids = ids_in(cfg, split)
    missing = [i for i in ids if i not in feats]
    if missing:
        raise StageError(f"no features for {len(missing)} instance(s) in split {split!r}")
    try:
        a_hat = model.predict_vectors([feats[i] for i in ids])
    except rt.SchemaMismatchError as exc:
        raise StageError(f"features do not match the model schema: {exc}") from None
    records = []
    for n, (iid, a) in enumerate(zip(ids, a_hat)):
        dc = feats[iid].features[COST_FEATURE]
        mode = policy.route(float(a), dc, model_hash if n == 0 else None)
        records.append({"instance_id": iid, "mode": mode, "a_hat": float(a), "delta_cost_est": dc})
    header = make_header("decisions", _inputs(cfg, "policy", "model", "features", "splits"),
                         split=split, eta=policy.eta_frozen, anchor=policy.anchor)
    write_records(cfg.path("decisions"), records, header)
    return [cfg.path("decisions")]


# -- evaluation and reporting ------------------------------------------------


def evaluate_outcome(outcome: ModeOutcome, instance: RankingInstance) -> dict[str, float]:
    """All report metrics for one outcome; parse failures score 0 everywhere."""
    order = () if outcome.parse_failed else outcome.ranking.order
    q = instance.qrels
    out = {}
    for spec in EVAL_METRICS:
        name, depth = parse_metric(spec)
        if name == "ndcg":
            out[spec] = ndcg_at_k(order, q, depth)
        elif name == "recall":
            out[spec] = recall_at_k(order, q, depth)
        elif name == "top1":
            out[spec] = float(top1_agreement(order, q)) if order else 0.0
        else:
            out[spec] = pairwise_accuracy(order, instance.truth_order()) if order else 0.0
    return out


def _arm_summary(outcomes: Sequence[ModeOutcome], instances: Sequence[RankingInstance], think: Sequence[bool] | None) -> dict:
    per = [evaluate_outcome(o, i) for o, i in zip(outcomes, instances)]
    summary = {m: float(np.mean([p[m] for p in per])) for m in EVAL_METRICS}
    summary["tokens"] = float(np.mean([o.tokens for o in outcomes]))
    summary["tradeoff"] = tradeoff_score(summary["ndcg@10"], summary["tokens"])
    if think is not None:
        summary["think_fraction"] = float(np.mean(think))
    return summary


def evaluate_arms(
    records: Sequence[DualModeRecord],
    instances: Sequence[RankingInstance],
    routed_think: Sequence[bool] | None,
    utility: str = "ndcg@10",
    random_p: float = 0.5,
    random_seed: int = 1,
    self_select: Sequence[ModeOutcome] | None = None,
) -> dict[str, dict]:
    """Per-arm mean metrics from logged outcomes (no new generation).

    Oracle takes the mode with the higher utility and the cheaper mode on ties.
    """
    fn = metric_fn(utility)
    u_think = np.array([fn(r.think, i) for r, i in zip(records, instances)])
    u_non = np.array([fn(r.non_think, i) for r, i in zip(records, instances)])
    t_think = np.array([r.think.tokens for r in records])
    t_non = np.array([r.non_think.tokens for r in records])
    oracle = (u_think > u_non) | ((u_think == u_non) & (t_think < t_non))
    coin = np.random.default_rng(random_seed).uniform(size=len(records)) < random_p
    choices = {"NonThink": np.zeros(len(records), bool), "Think": np.ones(len(records), bool), "Random": coin, "Oracle": oracle}
    if routed_think is not None:
        choices["Routed"] = np.asarray(routed_think, bool)
    arms = {}
    for name in ARMS:
        if name == "SelfSelect":
            if self_select is not None:
                arms[name] = _arm_summary(self_select, instances, None)
            continue
        if name not in choices:
            continue
        pick = choices[name]
        arms[name] = _arm_summary([r.outcome(bool(t)) for r, t in zip(records, pick)], instances, pick)
    return arms


def stage_eval(cfg: PipelineConfig) -> list[Path]:
    _require(cfg, "decisions", "dual_mode", "instances")
    check_provenance(cfg, "decisions")
    _, decisions = read_records(cfg.path("decisions"))
    instances = load_instances(cfg)
    logged = load_dual_mode(cfg.path("dual_mode"))
    ids = [d["instance_id"] for d in decisions]
    missing = [i for i in ids if i not in logged]
    if missing:
        raise StageError(f"dual-mode log lacks {len(missing)} routed instance(s), e.g. {missing[0]}")
    self_sel = None
    roles = ["decisions", "dual_mode", "instances"]
    if cfg.path("self_select").exists():
        outcomes = load_outcomes(cfg.path("self_select"))
        if all(i in outcomes for i in ids):
            self_sel = [outcomes[i] for i in ids]
            roles.append("self_select")
    arms = evaluate_arms(
        [logged[i] for i in ids], [instances[i] for i in ids],
        [d["mode"] == THINK for d in decisions], cfg.utility,
        cfg.eval.random_p, cfg.eval.random_seed, self_sel,
    )
    header = make_header("eval", _inputs(cfg, *roles))
    body = {"n_instances": len(ids), "utility": cfg.utility, "arms": arms, "provenance": header}
    write_json(cfg.path("eval"), body)
    return [cfg.path("eval")]


def relative_delta(ours: float, base: float) -> float | None:
    """``(ours - base) / base``; None when the baseline is zero."""
    if base == 0:
        return None
    return (ours - base) / base


def build_report(arms: Mapping[str, Mapping[str, float]], baseline: str) -> dict:
    if baseline not in arms:
        raise StageError(f"baseline arm {baseline!r} not in report (have {sorted(arms)})")
    base = arms[baseline]
    deltas = {}
    for name, summary in arms.items():
        deltas[name] = {m: relative_delta(v, base[m]) for m, v in summary.items() if m in base and m not in ("think_fraction", "tradeoff")}
    tradeoff = {name: tradeoff_score(s["ndcg@10"], s["tokens"]) for name, s in arms.items() if "ndcg@10" in s and "tokens" in s}
    return {"baseline": baseline, "arms": dict(arms), "relative_delta": deltas, "tradeoff": tradeoff}


def _pct(v: float | None) -> str:
    return "undefined" if v is None else f"{100 * v:+.2f}%"


def render_markdown(report: Mapping) -> str:
    arms = report["arms"]
    metrics = [m for m in (*EVAL_METRICS, "tokens") if all(m in s for s in arms.values())]
    lines = [f"# Routing report (baseline: {report['baseline']})", ""]
    lines.append("| arm | " + " | ".join(metrics) + " | trade-off | think frac |")
    lines.append("|---" * (len(metrics) + 3) + "|")
    for name, s in arms.items():
        cells = [f"{100 * s[m]:.2f}" if m != "tokens" else f"{s[m]:.0f}" for m in metrics]
        tf = s.get("think_fraction")
        trade = report["tradeoff"].get(name)
        lines.append(
            f"| {name} | " + " | ".join(cells)
            + f" | {'' if trade is None else f'{100 * trade:.2f}'} | {'' if tf is None else f'{tf:.3f}'} |"
        )
    lines += ["", f"## Relative change vs {report['baseline']}", ""]
    lines.append("| arm | " + " | ".join(metrics) + " |")
    lines.append("|---" * (len(metrics) + 1) + "|")
    for name, d in report["relative_delta"].items():
        if name == report["baseline"]:
            continue
        lines.append(f"| {name} | " + " | ".join(_pct(d.get(m)) for m in metrics) + " |")
    return "\n".join(lines) + "\n"


def stage_report(cfg: PipelineConfig, baseline: str | None = None) -> list[Path]:
    _require(cfg, "eval")
    body = read_json(cfg.path("eval"))
    report = build_report(body["arms"], baseline or cfg.eval.baseline)
    report["provenance"] = make_header("report", _inputs(cfg, "eval", "frontier"))
    write_json(cfg.path("report_json"), report)
    atomic_write_text(cfg.path("report_md"), render_markdown(report))
    outputs = [cfg.path("report_json"), cfg.path("report_md")]
    if cfg.path("frontier").exists():
        _, recs = read_records(cfg.path("frontier"))
        rows = ["eta,mean_tokens,utility,think_fraction,non_dominated"]
        rows += [f"{r['eta']!r},{r['mean_tokens']!r},{r['utility']!r},{r['think_fraction']!r},{int(r['non_dominated'])}" for r in recs]
        atomic_write_text(cfg.path("frontier_plot"), "\n".join(rows) + "\n")
        outputs.append(cfg.path("frontier_plot"))
    return outputs


STAGES = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "label": stage_label,
    "collect": stage_collect,
    "probe": stage_probe,
    "features": stage_features,
    "select": stage_select,
    "train": stage_train,
    "sweep": stage_sweep,
    "policy": stage_policy,
    "route": stage_route,
    "eval": stage_eval,
    "report": stage_report,
}

PIPELINE_ORDER = ("ingest", "label", "features", "select", "train", "sweep", "policy", "route", "eval", "report")


def run_pipeline(cfg: PipelineConfig, with_synth: bool = False) -> list[Path]:
    outputs = []
    for name in (("synth",) if with_synth else ()) + PIPELINE_ORDER:
        log.info("stage %s", name)
        outputs += STAGES[name](cfg)
    return outputs

"""Command-line interface: ``adapter-uda <subcommand> [options]``.

Progress goes to stderr (one line per epoch); stdout carries only the paths
of files written. Exit codes: 0 success, 1 validation error, 2 runtime or
training failure, 3 partial experiment failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .analysis import (
    aggregate_results,
    extract_hidden,
    pca_project_2d,
    render_table,
    significance_csv,
    significance_report,
    similarity_matrix,
    write_hidden_matrix,
)
from .data import (
    DomainSplits,
    SynthSpec,
    Vocab,
    build_vocab,
    encode_texts,
    gen_generic_corpus,
    gen_synthetic,
    mix_domains,
    read_dataset,
    write_dataset,
)
from .errors import (
    AdapterUDAError,
    ChecksumError,
    ConfigError,
    DataError,
    FingerprintMismatch,
    SchemaError,
    ShapeError,
)
from .model import Group, ModelConfig, init_model
from .persistence import Scope, backbone_fingerprint, load_adapter_bundle, save_checkpoint
from .training import (
    MethodVariant,
    PretrainConfig,
    RunPlan,
    UDADatasets,
    evaluate_accuracy,
    history_csv,
    pretrain_backbone,
    run_method,
    train_domain_fusion,
    train_task,
)

log = logging.getLogger("adapter_uda")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
_VALIDATION_ERRORS = (ConfigError, DataError, SchemaError, FingerprintMismatch, ChecksumError, ShapeError)

# RunPlan fields a config may override; the rest come from the run itself
_PLAN_KEYS = {f.name for f in fields(RunPlan)} - {"variant", "source", "targets", "seed", "model"}


# ---------------------------------------------------------------- config helpers


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return d


def _strict(d: dict, allowed, where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed: {sorted(allowed)}")


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()


@dataclass
class DataSource:
    """Either a dataset directory or an inline synthetic spec."""

    path: Optional[str] = None
    synthetic: Optional[SynthSpec] = None

    @classmethod
    def from_dict(cls, d, base_dir: str) -> "DataSource":
        if not isinstance(d, dict):
            raise ConfigError("data: expected an object with 'path' or 'synthetic'")
        _strict(d, {"path", "synthetic"}, "data")
        if ("path" in d) == ("synthetic" in d):
            raise ConfigError("data: give exactly one of 'path' and 'synthetic'")
        if "path" in d:
            return cls(path=os.path.normpath(os.path.join(base_dir, d["path"])))
        return cls(synthetic=SynthSpec.from_dict(d["synthetic"]))

    def to_dict(self) -> dict:
        return {"path": self.path} if self.path else {"synthetic": self.synthetic.to_dict()}

    def load(self) -> Tuple[List[DomainSplits], Optional[SynthSpec]]:
        if self.synthetic is not None:
            return gen_synthetic(self.synthetic), self.synthetic
        if not os.path.isdir(self.path):
            raise DataError(f"dataset directory {self.path} does not exist")
        spec = None
        spec_path = os.path.join(self.path, "spec.json")
        if os.path.exists(spec_path):
            spec = SynthSpec.from_dict(_load_json(spec_path))
        return read_dataset(self.path), spec


def _pretrain_from(d) -> Optional[PretrainConfig]:
    if d is None:
        return None
    if not isinstance(d, dict):
        raise ConfigError("pretrain: expected an object or null")
    _strict(d, {f.name for f in fields(PretrainConfig)}, "pretrain")
    return PretrainConfig(**d)


def _plan_overrides(d) -> dict:
    if not isinstance(d, dict):
        raise ConfigError("plan: expected an object")
    _strict(d, _PLAN_KEYS, "plan")
    return dict(d)


def _variant(v) -> MethodVariant:
    try:
        return MethodVariant.parse(v)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"unknown variant {v!r}; choose from {[m.value for m in MethodVariant]}") from exc


@dataclass
class Scheme:
    source: str
    targets: List[str]

    @property
    def name(self) -> str:
        return f"{self.source}->{'+'.join(self.targets)}"

    @property
    def dirname(self) -> str:
        return f"{self.source}_to_{'+'.join(self.targets)}"


def _scheme_from(d) -> Scheme:
    if not isinstance(d, dict):
        raise ConfigError("schemes: every entry must be an object with 'source' and 'targets'")
    _strict(d, {"source", "targets"}, "scheme")
    if "source" not in d or not d.get("targets"):
        raise ConfigError("scheme needs 'source' and a nonempty 'targets' list")
    s = Scheme(str(d["source"]), [str(t) for t in d["targets"]])
    if s.source in s.targets:
        raise ConfigError(f"scheme {s.name}: source {s.source!r} is also a target")
    return s


@dataclass
class RunConfig:
    """Single-run config used by ``pretrain-fusion`` and ``finetune``."""

    data: DataSource
    source: str
    targets: List[str]
    variant: MethodVariant = MethodVariant.ADA_TSA
    seed: int = 0
    model: dict = field(default_factory=dict)
    plan: dict = field(default_factory=dict)
    pretrain: Optional[PretrainConfig] = None
    vocab_max_size: Optional[int] = None

    KEYS = ("data", "source", "targets", "variant", "seed", "model", "plan", "pretrain", "vocab_max_size")

    @classmethod
    def from_dict(cls, d: dict, base_dir: str) -> "RunConfig":
        _strict(d, cls.KEYS, "run config")
        for k in ("data", "source", "targets"):
            if k not in d:
                raise ConfigError(f"run config: missing required key {k!r}")
        scheme = _scheme_from({"source": d["source"], "targets": d["targets"]})
        ModelConfig.from_dict(d.get("model", {}))
        return cls(
            data=DataSource.from_dict(d["data"], base_dir),
            source=scheme.source,
            targets=scheme.targets,
            variant=_variant(d.get("variant", "ADA_TSA")),
            seed=int(d.get("seed", 0)),
            model=dict(d.get("model", {})),
            plan=_plan_overrides(d.get("plan", {})),
            pretrain=_pretrain_from(d.get("pretrain")),
            vocab_max_size=d.get("vocab_max_size"),
        )


@dataclass
class ExperimentConfig:
    data: DataSource
    schemes: List[Scheme]
    variants: List[MethodVariant]
    seeds: List[int]
    model: dict = field(default_factory=dict)
    plan: dict = field(default_factory=dict)
    pretrain: Optional[PretrainConfig] = None
    vocab_max_size: Optional[int] = None
    save_checkpoints: bool = True

    KEYS = ("data", "schemes", "variants", "seeds", "model", "plan", "pretrain", "vocab_max_size", "save_checkpoints")

    @classmethod
    def from_dict(cls, d: dict, base_dir: str) -> "ExperimentConfig":
        _strict(d, cls.KEYS, "experiment config")
        if "data" not in d:
            raise ConfigError("experiment config: missing required key 'data'")
        seeds = d.get("seeds", [0, 1, 2, 3, 4])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a nonempty list of integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be distinct")
        variants = [_variant(v) for v in d.get("variants", [v.value for v in MethodVariant])]
        if not variants:
            raise ConfigError("variants must be nonempty")
        ModelConfig.from_dict(d.get("model", {}))
        return cls(
            data=DataSource.from_dict(d["data"], base_dir),
            schemes=[_scheme_from(s) for s in d.get("schemes", [])],
            variants=variants,
            seeds=list(seeds),
            model=dict(d.get("model", {})),
            plan=_plan_overrides(d.get("plan", {})),
            pretrain=_pretrain_from(d.get("pretrain")),
            vocab_max_size=d.get("vocab_max_size"),
            save_checkpoints=bool(d.get("save_checkpoints", True)),
        )

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "schemes": [asdict(s) for s in self.schemes],
            "variants": [v.value for v in self.variants],
            "seeds": self.seeds,
            "model": self.model,
            "plan": self.plan,
            "pretrain": None if self.pretrain is None else self.pretrain.to_dict(),
            "vocab_max_size": self.vocab_max_size,
            "save_checkpoints": self.save_checkpoints,
        }


# ---------------------------------------------------------------- shared plumbing


@dataclass
class Workspace:
    """Loaded data, vocabulary and (optionally pre-trained) backbone."""

    splits: List[DomainSplits]
    vocab: Vocab
    model: ModelConfig
    backbone_state: Optional[Dict[str, np.ndarray]]
    pretrain_history: list = field(default_factory=list)

    @property
    def domains(self) -> List[str]:
        return [d.name for d in self.splits]


def _prepare(data: DataSource, model: dict, pretrain: Optional[PretrainConfig], vocab_max_size,
             backbone_seed: int) -> Workspace:
    splits, spec = data.load()
    generic: List[str] = []
    if pretrain is not None:
        if spec is None:
            raise ConfigError("pretrain needs a synthetic spec (inline, or spec.json in the dataset directory)")
        generic = gen_generic_corpus(spec, pretrain.n_docs)
    vocab = build_vocab([d.texts() for d in splits] + ([generic] if generic else []), vocab_max_size)
    cfg = ModelConfig.from_dict({**model, "vocab_size": len(vocab)})
    state, hist = None, []
    if pretrain is not None:
        log.info("pre-training backbone on %d generic documents", len(generic))
        state, hist = pretrain_backbone(cfg, encode_texts(vocab, "generic", generic), pretrain, backbone_seed)
    return Workspace(splits, vocab, cfg, state, hist)


def _check_domains(ws: Workspace, source: str, targets: Sequence[str]) -> None:
    missing = [d for d in [source, *targets] if d not in ws.domains]
    if missing:
        raise ConfigError(f"unknown domains {missing}; dataset has {ws.domains}")


def _make_plan(variant, source, targets, seed, model: ModelConfig, overrides: dict) -> RunPlan:
    try:
        return RunPlan(variant, source, list(targets), seed=seed, model=model, **overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _write_text(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _emit(paths: Sequence[str]) -> None:
    for p in paths:
        print(p)
    sys.stdout.flush()


def _vocab_meta(vocab: Vocab) -> dict:
    return {"vocab": vocab.itos[4:]}


def _load_model(checkpoint: str, bundle: Optional[str]):
    from .persistence import read_checkpoint, store_from_checkpoint

    ckpt = read_checkpoint(checkpoint)
    params = store_from_checkpoint(ckpt)
    if "vocab" not in ckpt.meta:
        raise SchemaError(f"{checkpoint}: checkpoint carries no vocabulary")
    vocab = Vocab(ckpt.meta["vocab"])
    if bundle:
        params = load_adapter_bundle(params, bundle)
    return params, vocab


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    d = _load_json(args.config)
    spec = SynthSpec.from_dict(d)
    if args.seed is not None:
        spec = SynthSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    splits = gen_synthetic(spec)
    _emit(write_dataset(splits, spec, args.out))
    return EXIT_OK


def _run_config(args) -> RunConfig:
    rc = RunConfig.from_dict(_load_json(args.config), os.path.dirname(os.path.abspath(args.config)))
    if args.seed is not None:
        rc.seed = args.seed
    return rc


def cmd_pretrain_fusion(args) -> int:
    """Domain-fusion phase only: MLM on the shuffled source+target mixture."""
    rc = _run_config(args)
    if not rc.variant.uses_fusion:
        raise ConfigError(f"variant {rc.variant.value} has no domain-fusion phase")
    ws = _prepare(rc.data, rc.model, rc.pretrain, rc.vocab_max_size, rc.plan.get("backbone_seed", 0))
    _check_domains(ws, rc.source, rc.targets)
    plan = _make_plan(rc.variant, rc.source, rc.targets, rc.seed, ws.model, rc.plan)
    data = UDADatasets.from_splits(ws.splits, ws.vocab, rc.source, rc.targets)
    params = init_model(plan.model, plan.seed, backbone_seed=plan.backbone_seed, backbone_state=ws.backbone_state)
    mixed = mix_domains(data.source_train.unlabeled(), list(data.target_train.values()), seed=plan.seed)
    mixed_dev = mix_domains(data.source_dev.unlabeled(), list(data.target_dev.values()), seed=plan.seed)
    params, hist = train_domain_fusion(params, mixed, plan, mixed_dev)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "fusion.ckpt")
    save_checkpoint(params, ckpt, Scope.FULL, meta={**_vocab_meta(ws.vocab), "plan": plan.to_dict(), "phase": "fusion"})
    _emit([ckpt, _write_text(os.path.join(args.out, "history.csv"), history_csv(ws.pretrain_history + hist))])
    return EXIT_OK


def cmd_finetune(args) -> int:
    """Task phase on labeled source data, optionally starting from a fusion checkpoint."""
    rc = _run_config(args)
    ws = _prepare(rc.data, rc.model, None if args.init else rc.pretrain, rc.vocab_max_size,
                  rc.plan.get("backbone_seed", 0))
    _check_domains(ws, rc.source, rc.targets)
    if args.init:
        params, vocab = _load_model(args.init, None)
        ws.vocab, ws.model = vocab, params.config
    plan = _make_plan(rc.variant, rc.source, rc.targets, rc.seed, ws.model, rc.plan)
    if not args.init:
        params = init_model(plan.model, plan.seed, backbone_seed=plan.backbone_seed, backbone_state=ws.backbone_state)
    elif params.config.adapters_enabled != plan.variant.uses_adapters:
        raise ConfigError(f"checkpoint {args.init} does not match variant {plan.variant.value}")
    data = UDADatasets.from_splits(ws.splits, ws.vocab, rc.source, rc.targets)
    params, hist = train_task(params, data.source_train, data.source_dev, plan)
    os.makedirs(args.out, exist_ok=True)
    written = []
    model_path = os.path.join(args.out, "model.ckpt")
    save_checkpoint(params, model_path, Scope.FULL, meta={**_vocab_meta(ws.vocab), "plan": plan.to_dict()})
    written.append(model_path)
    if params.names([Group.ADAPTER]):
        bundle = os.path.join(args.out, "bundle.ckpt")
        save_checkpoint(params, bundle, Scope.ADAPTER_ONLY, meta={"plan": plan.to_dict()})
        written.append(bundle)
    metrics = {
        "source_dev_accuracy": evaluate_accuracy(params, data.source_dev),
        "target_test_accuracy": {t: evaluate_accuracy(params, c) for t, c in data.target_test.items()},
    }
    written.append(_write_text(os.path.join(args.out, "metrics.json"), json.dumps(metrics, indent=2, sort_keys=True) + "\n"))
    written.append(_write_text(os.path.join(args.out, "history.csv"), history_csv(ws.pretrain_history + hist)))
    _emit(written)
    return EXIT_OK


def _merge_flags(args, keys: Sequence[str]) -> None:
    """Fill unset flags from an optional ``--config`` object using the same key names."""
    if not args.config:
        return
    d = _load_json(args.config)
    _strict(d, keys, args.command)
    for k in keys:
        if getattr(args, k, None) in (None, []) and k in d:
            setattr(args, k, d[k])


def cmd_evaluate(args) -> int:
    _merge_flags(args, ("checkpoint", "bundle", "data", "domains", "split"))
    if not args.checkpoint or not args.data:
        raise ConfigError("evaluate needs --checkpoint and --data")
    params, vocab = _load_model(args.checkpoint, args.bundle)
    splits = {d.name: d for d in read_dataset(args.data)}
    domains = args.domains or sorted(splits)
    unknown = [d for d in domains if d not in splits]
    if unknown:
        raise ConfigError(f"unknown domains {unknown}; dataset has {sorted(splits)}")
    split = args.split or "test"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", "split", "n", "accuracy"])
    for name in domains:
        rows = getattr(splits[name], split)
        corpus = encode_texts(vocab, name, [t for _, t in rows], [y for y, _ in rows])
        acc = evaluate_accuracy(params, corpus)
        log.info("%s/%s accuracy %.4f", name, split, acc)
        w.writerow([name, split, len(rows), repr(acc)])
    os.makedirs(args.out, exist_ok=True)
    _emit([_write_text(os.path.join(args.out, "accuracy.csv"), buf.getvalue())])
    return EXIT_OK


def cmd_similarity(args) -> int:
    _merge_flags(args, ("data", "k", "split"))
    if not args.data:
        raise ConfigError("similarity needs --data")
    splits = read_dataset(args.data)
    if len(splits) < 2:
        raise DataError("similarity needs at least two domains")
    k = int(args.k if args.k is not None else 10000)
    mat = similarity_matrix([(d.name, d.texts(args.split)) for d in splits], k=k)
    os.makedirs(args.out, exist_ok=True)
    _emit([
        _write_text(os.path.join(args.out, "similarity.csv"), mat.to_csv()),
        _write_text(os.path.join(args.out, "similarity.json"), mat.to_json()),
    ])
    return EXIT_OK


def _read_corpus_file(spec: str) -> Tuple[str, List[str]]:
    """``NAME=PATH`` or ``PATH``; lines may carry a leading ``label<TAB>``.

    Without ``NAME=`` the file stem is used, or the parent directory for
    ``train``/``dev``/``test`` files.
    """
    name, _, path = spec.rpartition("=")
    if not name:
        name = os.path.splitext(os.path.basename(path))[0]
        if name in ("train", "dev", "test"):  # <domain>/<split>.tsv from a dataset tree
            name = os.path.basename(os.path.dirname(os.path.abspath(path))) or name
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc.strerror}") from exc
    return name, [ln.split("\t", 1)[1] if "\t" in ln else ln for ln in lines]


def cmd_project_hidden(args) -> int:
    _merge_flags(args, ("checkpoint", "bundle", "corpus", "pooling", "label"))
    if not args.checkpoint or not args.corpus:
        raise ConfigError("project-hidden needs --checkpoint and at least one --corpus")
    params, vocab = _load_model(args.checkpoint, args.bundle)
    label = args.label or "coords"
    os.makedirs(args.out, exist_ok=True)
    written, mats, names = [], [], []
    seen = set()
    for spec in args.corpus:
        name, texts = _read_corpus_file(spec)
        if name in seen:
            raise ConfigError(f"duplicate corpus name {name!r}")
        seen.add(name)
        h = extract_hidden(params, encode_texts(vocab, name, texts), pooling=args.pooling or "mean")
        path = os.path.join(args.out, f"hidden_{name}.bin")
        write_hidden_matrix(path, h)
        written.append(path)
        mats.append(h)
        names += [name] * len(h)
    coords, explained = pca_project_2d(np.concatenate(mats).astype(np.float64))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", "x", "y"])
    for name, (x, y) in zip(names, coords):
        w.writerow([name, repr(float(x)), repr(float(y))])
    written.append(_write_text(os.path.join(args.out, f"{label}.csv"), buf.getvalue()))
    written.append(_write_text(os.path.join(args.out, f"{label}.explained.json"),
                               json.dumps({"explained_variance": [float(v) for v in explained]}) + "\n"))
    _emit(written)
    return EXIT_OK


# ---------------------------------------------------------------- experiment

# worker globals, set once per process (inherited on fork, or via the initializer)
_W: dict = {}


def _worker_init(precision: str, datasets: Dict[str, UDADatasets], backbone_state, debug: bool) -> None:
    T.set_precision(precision)
    T.set_debug(debug)
    _W["datasets"] = datasets
    _W["backbone"] = backbone_state


def _run_one(job: dict) -> dict:
    plan = RunPlan.from_dict(job["plan"])
    out = {"id": job["id"], "status": "ok"}
    try:
        res = run_method(plan, _W["datasets"][job["scheme"]], _W["backbone"])
    except Exception as exc:  # recorded, the remaining runs continue
        log.error("run %s failed: %s: %s", job["id"], type(exc).__name__, exc)
        out.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return out
    rdir = job["dir"]
    os.makedirs(rdir, exist_ok=True)
    files = {"history": _write_text(os.path.join(rdir, "history.csv"), history_csv(res.history))}
    if job["save_checkpoints"]:
        if plan.variant.uses_adapters:
            files["bundle"] = os.path.join(rdir, "bundle.ckpt")
            save_checkpoint(res.params, files["bundle"], Scope.ADAPTER_ONLY, meta={"run": job["id"]})
        else:
            files["model"] = os.path.join(rdir, "model.ckpt")
            save_checkpoint(res.params, files["model"], Scope.FULL, meta={**job["vocab_meta"], "run": job["id"]})
    out.update(
        target_accuracy=res.target_accuracy,
        mean_accuracy=float(np.mean([res.target_accuracy[t] for t in plan.targets])),
        source_dev_accuracy=res.source_dev_accuracy,
        files=files,
    )
    return out


def cmd_experiment(args) -> int:
    cfg_path = os.path.abspath(args.config)
    ec = ExperimentConfig.from_dict(_load_json(cfg_path), os.path.dirname(cfg_path))
    if args.seed is not None:
        ec.seeds = [args.seed]
    backbone_seed = ec.plan.get("backbone_seed", 0)
    ws = _prepare(ec.data, ec.model, ec.pretrain, ec.vocab_max_size, backbone_seed)
    if not ec.schemes:
        ec.schemes = [Scheme(s, [t for t in ws.domains if t != s]) for s in ws.domains]
    for s in ec.schemes:
        _check_domains(ws, s.source, s.targets)
    for v in ec.variants:  # fail fast on bad overrides, before any training
        _make_plan(v, ec.schemes[0].source, ec.schemes[0].targets, ec.seeds[0], ws.model, ec.plan)

    out = args.out
    os.makedirs(out, exist_ok=True)
    written = []
    vocab_path = os.path.join(out, "vocab.json")
    ws.vocab.save(vocab_path)
    written.append(vocab_path)
    backbone_file = None
    if ws.backbone_state is not None:
        base = init_model(ws.model, 0, backbone_seed=backbone_seed, backbone_state=ws.backbone_state)
        backbone_file = os.path.join(out, "backbone.ckpt")
        save_checkpoint(base, backbone_file, Scope.FULL, meta=_vocab_meta(ws.vocab))
        written.append(backbone_file)
        written.append(_write_text(os.path.join(out, "pretrain_history.csv"), history_csv(ws.pretrain_history)))

    datasets = {s.name: UDADatasets.from_splits(ws.splits, ws.vocab, s.source, s.targets) for s in ec.schemes}
    jobs = []
    for s in ec.schemes:
        for v in ec.variants:
            for seed in ec.seeds:
                plan = _make_plan(v, s.source, s.targets, seed, ws.model, ec.plan)
                rel = os.path.join("runs", s.dirname, v.value, f"seed{seed}")
                jobs.append({
                    "id": f"{s.name}/{v.value}/seed{seed}",
                    "scheme": s.name,
                    "variant": v.value,
                    "seed": seed,
                    "plan": plan.to_dict(),
                    "dir": os.path.join(out, rel),
                    "rel": rel,
                    "save_checkpoints": ec.save_checkpoints,
                    "vocab_meta": _vocab_meta(ws.vocab),
                })
    log.info("experiment: %d runs (%d schemes x %d variants x %d seeds), jobs=%d",
             len(jobs), len(ec.schemes), len(ec.variants), len(ec.seeds), args.jobs)

    init = (T.get_precision(), datasets, ws.backbone_state, T.debug_enabled())
    if args.jobs <= 1:
        _worker_init(*init)
        results = [_run_one(j) for j in jobs]
    else:
        with cf.ProcessPoolExecutor(max_workers=args.jobs, initializer=_worker_init, initargs=init) as pool:
            results = list(pool.map(_run_one, jobs))
    # join barrier: aggregation only sees finished runs, in job order

    records, runs, failed = [], [], []
    per_target = io.StringIO()
    pw = csv.writer(per_target, lineterminator="\n")
    pw.writerow(["scheme", "variant", "seed", "target", "accuracy"])
    for job, res in zip(jobs, results):
        entry = {k: job[k] for k in ("id", "scheme", "variant", "seed", "plan")}
        entry["dir"] = job["rel"]
        entry["status"] = res["status"]
        if res["status"] != "ok":
            entry["error"] = res["error"]
            failed.append(job["id"])
        else:
            records.append((job["scheme"], job["variant"], res["mean_accuracy"]))
            entry["target_accuracy"] = res["target_accuracy"]
            entry["source_dev_accuracy"] = res["source_dev_accuracy"]
            entry["files"] = {k: os.path.relpath(v, out) for k, v in res["files"].items()}
            written.extend(res["files"].values())
            for t in job["plan"]["targets"]:
                pw.writerow([job["scheme"], job["variant"], job["seed"], t, repr(res["target_accuracy"][t])])
        runs.append(entry)

    if records:
        table = aggregate_results(records)
        report = significance_report(table)
        written.append(_write_text(os.path.join(out, "results.csv"), table.to_csv()))
        written.append(_write_text(os.path.join(out, "significance.csv"), significance_csv(report)))
        written.append(_write_text(os.path.join(out, "table.txt"), render_table(table, report)))
    written.append(_write_text(os.path.join(out, "runs.csv"), per_target.getvalue()))
    manifest = {
        "config": ec.to_dict(),
        "config_hash": config_hash(ec.to_dict()),
        "precision": T.get_precision(),
        "model": ws.model.to_dict(),
        "vocab": "vocab.json",
        "backbone": None if backbone_file is None else os.path.relpath(backbone_file, out),
        "backbone_fingerprint": backbone_fingerprint(
            init_model(ws.model, 0, backbone_seed=backbone_seed, backbone_state=ws.backbone_state)
        ) if ws.backbone_state is not None else None,
        "runs": runs,
        "failed": failed,
    }
    written.append(_write_text(os.path.join(out, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n"))
    _emit(written)
    if failed:
        log.error("%d of %d runs failed", len(failed), len(jobs))
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel runs (experiment only)")
    common.add_argument("--precision", choices=["single", "double"], default="single")
    common.add_argument("--debug", action="store_true", help="finiteness checks after every op")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adapter-uda", description="Adapter-based unsupervised domain adaptation.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate a synthetic multi-domain dataset")
    sub.add_parser("pretrain-fusion", parents=[common], help="domain-fusion MLM training on source+targets")
    ft = sub.add_parser("finetune", parents=[common], help="task fine-tuning on labeled source data")
    ft.add_argument("--init", help="start from this checkpoint (e.g. pretrain-fusion output)")

    ev = sub.add_parser("evaluate", parents=[common], help="accuracy of a checkpoint on dataset splits")
    ev.add_argument("--checkpoint")
    ev.add_argument("--bundle", help="adapter bundle to apply on top of --checkpoint")
    ev.add_argument("--data", help="dataset directory")
    ev.add_argument("--domains", nargs="*", default=[])
    ev.add_argument("--split", choices=["train", "dev", "test"])

    si = sub.add_parser("similarity", parents=[common], help="vocabulary-overlap matrix between domains")
    si.add_argument("--data", help="dataset directory")
    si.add_argument("--k", type=int, help="top-K words per domain (default 10000)")
    si.add_argument("--split", choices=["train", "dev", "test"], help="restrict to one split (default: all)")

    ph = sub.add_parser("project-hidden", parents=[common], help="export hidden states and 2-D PCA coordinates")
    ph.add_argument("--checkpoint")
    ph.add_argument("--bundle")
    ph.add_argument("--corpus", nargs="*", default=[], help="corpus files, as PATH or NAME=PATH")
    ph.add_argument("--pooling", choices=["mean", "first"])
    ph.add_argument("--label", help="basename of the coordinate file (default: coords)")

    sub.add_parser("experiment", parents=[common], help="full variants x schemes x seeds grid")
    return p


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-fusion": cmd_pretrain_fusion,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "similarity": cmd_similarity,
    "project-hidden": cmd_project_hidden,
    "experiment": cmd_experiment,
}
_NEEDS_CONFIG = {"gen-data", "pretrain-fusion", "finetune", "experiment"}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    if args.command in _NEEDS_CONFIG and not args.config:
        parser.error(f"{args.command} requires --config")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    prev_precision, prev_debug = T.get_precision(), T.debug_enabled()
    T.set_precision(args.precision)
    T.set_debug(args.debug)
    try:
        return _COMMANDS[args.command](args)
    except _VALIDATION_ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_VALIDATION
    except (AdapterUDAError, OSError, FloatingPointError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    finally:
        T.set_precision(prev_precision)
        T.set_debug(prev_debug)


if __name__ == "__main__":
    sys.exit(main())

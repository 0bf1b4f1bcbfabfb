"""Adam with warm-up/linear-decay, domain-fusion MLM training, task
fine-tuning, and the four experimental arms.

Phase parameter groups::

    variant    fusion (MLM)            task
    ADA_TSA    ADAPTER + MLM_HEAD      ADAPTER + TASK_HEAD
    ADA_FT     -                       ADAPTER + TASK_HEAD
    FULL_TSA   FROZEN + MLM_HEAD       FROZEN + TASK_HEAD
    FULL_FT    -                       FROZEN + TASK_HEAD

``FROZEN`` names the backbone group; the full-parameter variants train it.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import DomainCorpus, mask_for_mlm, mix_domains, pad_batch
from .errors import ConfigError, ContractError, DataError, FreezingViolation, NonFiniteError
from .model import (
    Group,
    ModelConfig,
    ParameterStore,
    cls_logits,
    encode,
    init_model,
    mlm_logits,
)

logger = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
DEFAULT_WARMUP = 1000


class MethodVariant(str, enum.Enum):
    FULL_FT = "FULL_FT"
    FULL_TSA = "FULL_TSA"
    ADA_FT = "ADA_FT"
    ADA_TSA = "ADA_TSA"

    @property
    def uses_adapters(self) -> bool:
        return self in (MethodVariant.ADA_FT, MethodVariant.ADA_TSA)

    @property
    def uses_fusion(self) -> bool:
        return self in (MethodVariant.FULL_TSA, MethodVariant.ADA_TSA)

    @property
    def label(self) -> str:
        return {"FULL_FT": "Full-FT", "FULL_TSA": "Full-TSA", "ADA_FT": "Ada-FT", "ADA_TSA": "Ada-TSA"}[self.value]

    @classmethod
    def parse(cls, s: str) -> "MethodVariant":
        key = s.strip().upper().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown method variant {s!r}; expected one of {[v.value for v in cls]}") from None


def fusion_groups(variant: MethodVariant) -> Tuple[Group, ...]:
    base = Group.ADAPTER if variant.uses_adapters else Group.FROZEN
    return (base, Group.MLM_HEAD)


def task_groups(variant: MethodVariant) -> Tuple[Group, ...]:
    base = Group.ADAPTER if variant.uses_adapters else Group.FROZEN
    return (base, Group.TASK_HEAD)


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Schedule:
    peak_lr: float
    total_steps: int
    warmup_steps: int = DEFAULT_WARMUP

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"warmup_steps must satisfy 0 < warmup <= total ({self.warmup_steps}, {self.total_steps})"
            )

    @classmethod
    def for_phase(cls, peak_lr: float, total_steps: int, warmup_steps: int = DEFAULT_WARMUP) -> "Schedule":
        """Phases shorter than the warm-up get ``total_steps // 10`` warm-up steps."""
        if total_steps < warmup_steps:
            warmup_steps = max(1, total_steps // 10)
        return cls(peak_lr, total_steps, warmup_steps)


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear ramp 0 -> peak over the warm-up, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    w, n, peak = schedule.warmup_steps, schedule.total_steps, schedule.peak_lr
    if step <= w:
        return peak * step / w
    return peak * (n - step) / (n - w)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    names: List[str]
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params: ParameterStore, names: Optional[Sequence[str]] = None) -> "AdamState":
        names = list(params.trainable_names() if names is None else names)
        st = cls(names)
        for n in names:
            st.m[n] = np.zeros_like(params[n].data)
            st.v[n] = np.zeros_like(params[n].data)
        return st


def adam_step(params: ParameterStore, state: AdamState, lr: float, grads: Optional[Dict[str, np.ndarray]] = None) -> None:
    """One bias-corrected Adam update of the tensors tracked by ``state``.

    ``grads`` defaults to each tensor's ``.grad``. A gradient on any tensor
    outside ``state.names`` is a freezing violation. Missing gradients on
    tracked tensors count as zero.
    """
    tracked = set(state.names)
    if grads is None:
        grads = {n: t.grad for n, t in params.tensors.items() if t.grad is not None}
    stray = sorted(n for n, g in grads.items() if g is not None and n not in tracked)
    if stray:
        raise FreezingViolation(f"gradient present for tensors outside the trainable set: {stray[:5]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for n in state.names:
        p = params[n]
        g = grads.get(n)
        m, v = state.m[n], state.v[n]
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - (lr * update).astype(p.dtype)).astype(p.dtype, copy=False)


def clip_grad_norm(params: ParameterStore, names: Sequence[str], max_norm: float) -> float:
    sq = 0.0
    for n in names:
        g = params[n].grad
        if g is not None:
            sq += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for n in names:
            if params[n].grad is not None:
                params[n].grad = params[n].grad * np.asarray(scale, dtype=params[n].dtype)
    return norm


# ---------------------------------------------------------------- plans


@dataclass
class RunPlan:
    variant: MethodVariant
    source: str
    targets: List[str]
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    backbone_seed: int = 0
    epochs_fusion: int = 10
    epochs_task: int = 10
    batch_size: int = 16
    fusion_batch_size: int = 32
    lr_adapter: float = 5e-5
    lr_full: float = 2e-5
    warmup_steps: int = DEFAULT_WARMUP
    mask_prob: float = 0.15
    clip_norm: float = 1.0

    def __post_init__(self):
        self.variant = MethodVariant.parse(self.variant) if isinstance(self.variant, str) else self.variant
        self.targets = list(self.targets)
        if self.source in self.targets:
            raise ConfigError(f"source domain {self.source!r} also listed as a target")
        if self.model.adapters_enabled != self.variant.uses_adapters:
            self.model = self.model.replace(adapters_enabled=self.variant.uses_adapters)
        for name in ("epochs_fusion", "epochs_task", "batch_size", "fusion_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def peak_lr(self) -> float:
        return self.lr_adapter if self.variant.uses_adapters else self.lr_full

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunPlan":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class HistoryRow:
    phase: str
    epoch: int
    step: int
    lr: float
    train_loss: float
    dev_metric: float


HISTORY_FIELDS = ["phase", "epoch", "step", "lr", "train_loss", "dev_metric"]


def history_csv(rows: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for r in rows:
        w.writerow([r.phase, r.epoch, r.step, repr(float(r.lr)), repr(float(r.train_loss)), repr(float(r.dev_metric))])
    return buf.getvalue()


# ---------------------------------------------------------------- helpers


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *stream])


def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i: i + batch_size]


def frozen_digest(params: ParameterStore) -> str:
    return hashlib.sha256(params.group_bytes(Group.FROZEN)).hexdigest()


def _check_finite_params(params: ParameterStore, names: Sequence[str]) -> None:
    for n in names:
        if not np.all(np.isfinite(params[n].data)):
            raise NonFiniteError(f"parameter {n} became non-finite")


def _snapshot(params: ParameterStore, names: Sequence[str]) -> Dict[str, np.ndarray]:
    return {n: params[n].data.copy() for n in names}


def _mlm_loss(params: ParameterStore, ids: np.ndarray, rng, mask_prob: float):
    batch = mask_for_mlm(ids, mask_prob, rng, params.config.vocab_size)
    sel = np.flatnonzero(batch.loss_mask.reshape(-1))
    if sel.size == 0:
        return None
    hidden = encode(params, batch.input_ids).hidden_states
    flat = T.reshape(hidden, (-1, params.config.hidden))
    logits = mlm_logits(params, T.take_rows(flat, sel))
    return T.cross_entropy(logits, batch.target_ids.reshape(-1)[sel])


def mlm_eval_loss(params: ParameterStore, corpus: DomainCorpus, mask_prob: float = 0.15, seed: int = 0,
                  batch_size: int = 64) -> float:
    """Token-weighted MLM loss with a fixed corruption seed (comparable across epochs)."""
    rng = _rng(seed, 99)
    total, count = 0.0, 0
    with T.no_grad():
        for ix in _batches(len(corpus), batch_size, None):
            ids = pad_batch([corpus.documents[i] for i in ix], params.config.max_len)
            batch = mask_for_mlm(ids, mask_prob, rng, params.config.vocab_size)
            sel = np.flatnonzero(batch.loss_mask.reshape(-1))
            if sel.size == 0:
                continue
            hidden = encode(params, batch.input_ids).hidden_states
            flat = T.reshape(hidden, (-1, params.config.hidden))
            loss = T.cross_entropy(mlm_logits(params, T.take_rows(flat, sel)), batch.target_ids.reshape(-1)[sel])
            total += float(loss.data) * sel.size
            count += sel.size
    if count == 0:
        raise DataError("dev corpus yielded no maskable tokens")
    return total / count


def predict(params: ParameterStore, corpus: DomainCorpus, batch_size: int = 64) -> np.ndarray:
    if len(corpus) == 0:
        raise DataError(f"{corpus.domain_id}: cannot evaluate an empty corpus")
    preds = []
    with T.no_grad():
        for ix in _batches(len(corpus), batch_size, None):
            ids = pad_batch([corpus.documents[i] for i in ix], params.config.max_len)
            logits = cls_logits(params, encode(params, ids).hidden_states).data
            preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds)


def evaluate_accuracy(params: ParameterStore, corpus: DomainCorpus, batch_size: int = 64) -> float:
    """Fraction of argmax-correct predictions (ties go to the smaller class index)."""
    if corpus.labels is None:
        raise DataError(f"{corpus.domain_id}: accuracy needs labels")
    preds = predict(params, corpus, batch_size)
    return float(np.mean(preds == np.asarray(corpus.labels)))


# ---------------------------------------------------------------- phases


def _run_phase(
    params: ParameterStore,
    phase: str,
    groups: Tuple[Group, ...],
    n_items: int,
    batch_size: int,
    epochs: int,
    peak_lr: float,
    plan: RunPlan,
    loss_fn: Callable,
    dev_fn: Callable[[], float],
    higher_is_better: bool,
    stream: int,
) -> List[HistoryRow]:
    params.set_trainable(groups)
    names = params.trainable_names()
    frozen_before = {g: params.group_bytes(g) for g in Group if g not in groups}
    state = AdamState.for_params(params, names)
    steps_per_epoch = math.ceil(n_items / batch_size)
    sched = Schedule.for_phase(peak_lr, steps_per_epoch * epochs, plan.warmup_steps)
    history: List[HistoryRow] = []
    best_metric, best_state = None, None
    step = 0
    lr = 0.0
    for epoch in range(1, epochs + 1):
        order_rng = _rng(plan.seed, stream, epoch)
        losses = []
        for ix in _batches(n_items, batch_size, order_rng):
            loss = loss_fn(ix, _rng(plan.seed, stream, epoch, step))
            step += 1
            if loss is None:
                continue
            if not np.isfinite(loss.data):
                raise NonFiniteError(f"{phase}: non-finite loss at step {step}")
            T.backward(loss)
            clip_grad_norm(params, names, plan.clip_norm)
            lr = lr_at(sched, step)
            adam_step(params, state, lr)
            params.zero_grad()
            if T.debug_enabled():
                _check_finite_params(params, names)
            losses.append(float(loss.data))
        T.get_tape().reset()
        metric = dev_fn()
        history.append(HistoryRow(phase, epoch, step, lr, float(np.mean(losses)) if losses else float("nan"), metric))
        logger.info("%s %s seed=%d epoch %d/%d train_loss=%.4f dev=%.4f", plan.variant.value, phase, plan.seed,
                    epoch, epochs, history[-1].train_loss, metric)
        better = best_metric is None or (metric > best_metric if higher_is_better else metric < best_metric)
        if better:
            best_metric, best_state = metric, _snapshot(params, names)
    params.load_state(best_state)
    params.set_trainable(())
    for g, before in frozen_before.items():
        if params.group_bytes(g) != before:
            raise FreezingViolation(f"group {g.value} changed during the {phase} phase")
    return history


def train_domain_fusion(
    params: ParameterStore, mixed: DomainCorpus, plan: RunPlan, dev: Optional[DomainCorpus] = None
) -> Tuple[ParameterStore, List[HistoryRow]]:
    """MLM training on the mixed-domain corpus; keeps the epoch with the best dev MLM loss."""
    if not plan.variant.uses_fusion:
        raise ContractError(f"{plan.variant.value} has no domain-fusion phase")
    if len(mixed) == 0:
        raise DataError("domain-fusion corpus is empty")
    if mixed.labels is not None:
        raise ContractError("the domain-fusion corpus must be unlabeled")
    dev = dev if dev is not None and len(dev) else mixed
    max_len = params.config.max_len

    def loss_fn(ix, rng):
        ids = pad_batch([mixed.documents[i] for i in ix], max_len)
        return _mlm_loss(params, ids, rng, plan.mask_prob)

    history = _run_phase(
        params, "fusion", fusion_groups(plan.variant), len(mixed), plan.fusion_batch_size, plan.epochs_fusion,
        plan.peak_lr, plan, loss_fn, lambda: mlm_eval_loss(params, dev, plan.mask_prob, plan.seed),
        higher_is_better=False, stream=1,
    )
    return params, history


def train_task(
    params: ParameterStore, train: DomainCorpus, dev: DomainCorpus, plan: RunPlan
) -> Tuple[ParameterStore, List[HistoryRow]]:
    """Supervised fine-tuning on labeled source data; keeps the best source-dev accuracy epoch."""
    if train.labels is None or dev.labels is None:
        raise DataError("task fine-tuning needs labeled source train and dev sets")
    C = params.config.n_classes
    train.validate(params.config.vocab_size, C)
    dev.validate(params.config.vocab_size, C)
    labels = np.asarray(train.labels, dtype=np.int64)
    max_len = params.config.max_len

    def loss_fn(ix, rng):
        ids = pad_batch([train.documents[i] for i in ix], max_len)
        logits = cls_logits(params, encode(params, ids).hidden_states)
        return T.cross_entropy(logits, labels[ix])

    history = _run_phase(
        params, "task", task_groups(plan.variant), len(train), plan.batch_size, plan.epochs_task,
        plan.peak_lr, plan, loss_fn, lambda: evaluate_accuracy(params, dev),
        higher_is_better=True, stream=2,
    )
    return params, history


# ---------------------------------------------------------------- backbone pre-training


@dataclass
class PretrainConfig:
    """MLM pre-training of the backbone on generic text (stand-in for a PrLM)."""

    n_docs: int = 2000
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    warmup_steps: int = DEFAULT_WARMUP
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def pretrain_backbone(
    config: ModelConfig, corpus: DomainCorpus, pre: PretrainConfig, backbone_seed: int = 0
) -> Tuple[Dict[str, np.ndarray], List[HistoryRow]]:
    """Train every backbone tensor (plus a throwaway MLM head) with the MLM loss.

    Returns the backbone state to pass as ``init_model(backbone_state=...)``.
    The last tenth of ``corpus`` is held out for epoch selection.
    """
    if len(corpus) < 10:
        raise DataError("pre-training corpus needs at least 10 documents")
    n_dev = max(1, len(corpus) // 10)
    train = DomainCorpus(corpus.domain_id, corpus.documents[:-n_dev])
    dev = DomainCorpus(corpus.domain_id, corpus.documents[-n_dev:])
    cfg = config.replace(adapters_enabled=False)
    params = init_model(cfg, pre.seed, backbone_seed=backbone_seed)
    plan = RunPlan(
        MethodVariant.FULL_TSA, corpus.domain_id, [], seed=pre.seed, model=cfg,
        epochs_fusion=pre.epochs, fusion_batch_size=pre.batch_size, lr_full=pre.lr,
        warmup_steps=pre.warmup_steps,
    )
    _, history = train_domain_fusion(params, train, plan, dev)
    for row in history:
        row.phase = "pretrain"
    return {n: params[n].data.copy() for n in params.names([Group.FROZEN])}, history


# ---------------------------------------------------------------- full pipeline


@dataclass
class UDADatasets:
    """Everything one adaptation scheme needs.

    Target training/dev corpora are stored unlabeled; target labels exist
    only in ``target_test``, which the training path never receives.
    """

    source_train: DomainCorpus
    source_dev: DomainCorpus
    target_train: Dict[str, DomainCorpus]
    target_dev: Dict[str, DomainCorpus]
    target_test: Dict[str, DomainCorpus]

    def __post_init__(self):
        self.target_train = {k: v.unlabeled() for k, v in self.target_train.items()}
        self.target_dev = {k: v.unlabeled() for k, v in self.target_dev.items()}

    @classmethod
    def from_splits(cls, splits, vocab, source: str, targets: Sequence[str]) -> "UDADatasets":
        """Encode generated/loaded :class:`~adapter_uda.data.DomainSplits` for one scheme."""
        from .data import encode_texts

        by_name = {d.name: d for d in splits}
        unknown = [n for n in [source, *targets] if n not in by_name]
        if unknown:
            raise DataError(f"unknown domains {unknown}; available: {sorted(by_name)}")

        def enc(name, split, labeled):
            rows = getattr(by_name[name], split)
            texts = [t for _, t in rows]
            return encode_texts(vocab, name, texts, [y for y, _ in rows] if labeled else None)

        return cls(
            source_train=enc(source, "train", True),
            source_dev=enc(source, "dev", True),
            target_train={t: enc(t, "train", False) for t in targets},
            target_dev={t: enc(t, "dev", False) for t in targets},
            target_test={t: enc(t, "test", True) for t in targets},
        )


@dataclass
class RunResult:
    plan: RunPlan
    params: ParameterStore
    target_accuracy: Dict[str, float]
    source_dev_accuracy: float
    history: List[HistoryRow]


def _train_pipeline(plan: RunPlan, source_train: DomainCorpus, source_dev: DomainCorpus,
                    target_train: Sequence[DomainCorpus], target_dev: Sequence[DomainCorpus],
                    backbone_state=None):
    params = init_model(plan.model, plan.seed, backbone_seed=plan.backbone_seed, backbone_state=backbone_state)
    history: List[HistoryRow] = []
    if plan.variant.uses_fusion:
        mixed = mix_domains(source_train, target_train, seed=plan.seed)
        mixed_dev = mix_domains(source_dev, target_dev, seed=plan.seed)
        params, h = train_domain_fusion(params, mixed, plan, mixed_dev)
        history += h
    params, h = train_task(params, source_train, source_dev, plan)
    history += h
    return params, history


def run_method(plan: RunPlan, datasets: UDADatasets, backbone_state=None) -> RunResult:
    """Train one arm and evaluate it on every target test set.

    ``backbone_state`` optionally supplies pre-trained backbone weights
    (see :func:`pretrain_backbone`); otherwise the seeded random backbone is used.
    """
    missing = [t for t in plan.targets if t not in datasets.target_test]
    if missing:
        raise DataError(f"no test set for target domains {missing}")
    params, history = _train_pipeline(
        plan,
        datasets.source_train,
        datasets.source_dev,
        [datasets.target_train[t].unlabeled() for t in plan.targets if t in datasets.target_train],
        [datasets.target_dev[t].unlabeled() for t in plan.targets if t in datasets.target_dev],
        backbone_state,
    )
    acc = {t: evaluate_accuracy(params, datasets.target_test[t]) for t in plan.targets}
    src_dev = evaluate_accuracy(params, datasets.source_dev)
    return RunResult(plan, params, acc, src_dev, history)

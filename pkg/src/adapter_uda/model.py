"""Mini transformer encoder with bottleneck adapters and MLM/classification heads.

Weights are stored ``[in, out]`` so a projection is ``x @ W + b``.

Backbone initialization (the stand-in for pre-trained weights) draws from a
seeded generator independent of the adapter and head streams, so the same
``backbone_seed`` always yields the same backbone regardless of whether
adapters are enabled:

* token embeddings ~ N(0, 1), position embeddings ~ N(0, 0.1^2)
* every backbone projection matrix ~ N(0, 1/fan_in); biases 0
* layer-norm gamma 1, beta 0

Adapters: ``down.weight`` ~ N(0, 0.02^2), ``up.weight`` and both biases zero,
so a fresh adapter is an exact identity. Heads use N(0, 0.02^2) weights and
zero biases.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

PAD_ID = 0
_MASK_VALUE = -1e9


class Group(str, enum.Enum):
    """Parameter groups.

    ``FROZEN`` is the backbone: fixed in the adapter variants, trained only by
    the full-parameter variants.
    """

    FROZEN = "FROZEN"
    ADAPTER = "ADAPTER"
    MLM_HEAD = "MLM_HEAD"
    TASK_HEAD = "TASK_HEAD"


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 128
    adapter_dim: int = 16
    vocab_size: int = 2000
    max_len: int = 32
    n_classes: int = 2
    adapters_enabled: bool = True
    dropout: float = 0.0
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "ffn_dim", "adapter_dim", "vocab_size", "max_len", "n_classes"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.hidden % self.heads:
            raise ConfigError(f"heads: {self.heads} does not divide hidden={self.hidden}")
        if self.adapter_dim >= self.hidden:
            raise ConfigError(f"adapter_dim: must be < hidden ({self.adapter_dim} >= {self.hidden})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        d = self.to_dict()
        d.update(kw)
        return ModelConfig(**d)


class ParameterStore:
    """Ordered ``name -> Tensor`` map with a group tag per parameter."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.tensors: Dict[str, Tensor] = {}
        self.groups: Dict[str, Group] = {}

    def add(self, name: str, data: np.ndarray, group: Group) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(data, name=name)
        self.tensors[name] = t
        self.groups[name] = Group(group)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self, groups: Optional[Iterable[Group]] = None) -> List[str]:
        if groups is None:
            return list(self.tensors)
        groups = {Group(g) for g in groups}
        return [n for n in self.tensors if self.groups[n] in groups]

    def set_trainable(self, groups: Iterable[Group]) -> None:
        groups = {Group(g) for g in groups}
        for n, t in self.tensors.items():
            t.requires_grad = self.groups[n] in groups
            t.grad = None

    def trainable_names(self) -> List[str]:
        return [n for n, t in self.tensors.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.config)
        for n, t in self.tensors.items():
            nt = out.add(n, t.data.copy(), self.groups[n])
            nt.requires_grad = t.requires_grad
        return out

    def state(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            self.tensors[n].data = arr.copy()

    def group_bytes(self, group: Group = Group.FROZEN) -> bytes:
        return b"".join(self.tensors[n].data.tobytes() for n in sorted(self.names([group])))

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(self.config)
        for n, t in self.tensors.items():
            out.add(n, t.data.astype(dtype), self.groups[n])
        return out


@dataclass
class EncoderOutput:
    hidden_states: Tensor
    all_hidden_states: List[Tensor] = field(default_factory=list)
    attention_mask: Optional[np.ndarray] = None


# ---------------------------------------------------------------- init

_STREAM_BACKBONE, _STREAM_ADAPTER, _STREAM_MLM, _STREAM_TASK = range(4)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def init_backbone(store: ParameterStore, seed: int) -> None:
    c = store.config
    dt = T.default_dtype()
    rng = _rng(seed, _STREAM_BACKBONE)
    H, F = c.hidden, c.ffn_dim

    def mat(n_in, n_out):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)).astype(dt)

    def zeros(n):
        return np.zeros(n, dtype=dt)

    store.add("embed.token", rng.normal(0.0, 1.0, size=(c.vocab_size, H)).astype(dt), Group.FROZEN)
    store.add("embed.position", rng.normal(0.0, 0.1, size=(c.max_len, H)).astype(dt), Group.FROZEN)
    for i in range(c.layers):
        p = f"layer{i}."
        for proj in ("query", "key", "value", "output"):
            store.add(p + f"attn.{proj}.weight", mat(H, H), Group.FROZEN)
            store.add(p + f"attn.{proj}.bias", zeros(H), Group.FROZEN)
        store.add(p + "attn_norm.gamma", np.ones(H, dtype=dt), Group.FROZEN)
        store.add(p + "attn_norm.beta", zeros(H), Group.FROZEN)
        store.add(p + "ffn.in.weight", mat(H, F), Group.FROZEN)
        store.add(p + "ffn.in.bias", zeros(F), Group.FROZEN)
        store.add(p + "ffn.out.weight", mat(F, H), Group.FROZEN)
        store.add(p + "ffn.out.bias", zeros(H), Group.FROZEN)
        store.add(p + "ffn_norm.gamma", np.ones(H, dtype=dt), Group.FROZEN)
        store.add(p + "ffn_norm.beta", zeros(H), Group.FROZEN)


def init_adapters(store: ParameterStore, seed: int) -> None:
    c = store.config
    dt = T.default_dtype()
    rng = _rng(seed, _STREAM_ADAPTER)
    H, m = c.hidden, c.adapter_dim
    for i in range(c.layers):
        p = f"layer{i}.adapter."
        store.add(p + "down.weight", rng.normal(0.0, 0.02, size=(H, m)).astype(dt), Group.ADAPTER)
        store.add(p + "down.bias", np.zeros(m, dtype=dt), Group.ADAPTER)
        store.add(p + "up.weight", np.zeros((m, H), dtype=dt), Group.ADAPTER)
        store.add(p + "up.bias", np.zeros(H, dtype=dt), Group.ADAPTER)


def init_mlm_head(store: ParameterStore, seed: int) -> None:
    c = store.config
    dt = T.default_dtype()
    rng = _rng(seed, _STREAM_MLM)
    H, V = c.hidden, c.vocab_size
    store.add("mlm.dense.weight", rng.normal(0.0, 0.02, size=(H, H)).astype(dt), Group.MLM_HEAD)
    store.add("mlm.dense.bias", np.zeros(H, dtype=dt), Group.MLM_HEAD)
    store.add("mlm.norm.gamma", np.ones(H, dtype=dt), Group.MLM_HEAD)
    store.add("mlm.norm.beta", np.zeros(H, dtype=dt), Group.MLM_HEAD)
    store.add("mlm.decoder.weight", rng.normal(0.0, 0.02, size=(H, V)).astype(dt), Group.MLM_HEAD)
    store.add("mlm.decoder.bias", np.zeros(V, dtype=dt), Group.MLM_HEAD)


def init_task_head(store: ParameterStore, seed: int) -> None:
    c = store.config
    dt = T.default_dtype()
    rng = _rng(seed, _STREAM_TASK)
    H, C = c.hidden, c.n_classes
    store.add("cls.pooler.weight", rng.normal(0.0, 0.02, size=(H, H)).astype(dt), Group.TASK_HEAD)
    store.add("cls.pooler.bias", np.zeros(H, dtype=dt), Group.TASK_HEAD)
    store.add("cls.out.weight", rng.normal(0.0, 0.02, size=(H, C)).astype(dt), Group.TASK_HEAD)
    store.add("cls.out.bias", np.zeros(C, dtype=dt), Group.TASK_HEAD)


def init_model(
    config: ModelConfig,
    seed: int,
    backbone_seed: Optional[int] = None,
    backbone_state: Optional[Dict[str, np.ndarray]] = None,
) -> ParameterStore:
    """Build a fully initialized store.

    ``backbone_seed`` defaults to ``seed``. ``backbone_state`` (name -> array
    for every backbone tensor, e.g. from a pre-training run) overrides the
    random backbone.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError(f"expected ModelConfig, got {type(config).__name__}")
    store = ParameterStore(config)
    init_backbone(store, seed if backbone_seed is None else backbone_seed)
    if backbone_state is not None:
        names = store.names([Group.FROZEN])
        missing = [n for n in names if n not in backbone_state]
        if missing:
            raise ConfigError(f"backbone_state lacks tensors {missing[:5]}")
        for n in names:
            arr = np.asarray(backbone_state[n])
            if arr.shape != store[n].shape:
                raise ShapeError(f"backbone_state[{n!r}] has shape {arr.shape}, expected {store[n].shape}")
            store[n].data = arr.astype(store[n].dtype, copy=True)
    if config.adapters_enabled:
        init_adapters(store, seed)
    init_mlm_head(store, seed)
    init_task_head(store, seed)
    return store


# ---------------------------------------------------------------- forward


def adapter_forward(x: Tensor, down_w: Tensor, down_b: Tensor, up_w: Tensor, up_b: Tensor) -> Tensor:
    """Residual bottleneck: ``x + gelu(x @ down_w + down_b) @ up_w + up_b``."""
    if x.shape[-1] != down_w.shape[0] or up_w.shape[1] != x.shape[-1]:
        raise ShapeError(
            f"adapter expects trailing dim {down_w.shape[0]} -> {up_w.shape[1]}, got input {x.shape}"
        )
    inner = T.gelu(T.linear(x, down_w, down_b))
    return T.add(x, T.linear(inner, up_w, up_b))


def layer_adapter(params: ParameterStore, layer: int):
    p = f"layer{layer}.adapter."
    return (params[p + "down.weight"], params[p + "down.bias"], params[p + "up.weight"], params[p + "up.bias"])


def _check_ids(token_ids: np.ndarray, config: ModelConfig) -> np.ndarray:
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise ShapeError(f"token_ids must be [B, T], got shape {ids.shape}")
    if ids.shape[1] > config.max_len:
        raise DataError(f"sequence length {ids.shape[1]} exceeds max_len {config.max_len}")
    bad = (ids < 0) | (ids >= config.vocab_size)
    if bad.any():
        b, t = (int(v) for v in np.argwhere(bad)[0])
        raise DataError(f"token id {ids[b, t]} at position ({b}, {t}) outside vocabulary of {config.vocab_size}")
    return ids.astype(np.int64)


def self_attention(params: ParameterStore, layer: int, h: Tensor, additive_mask: np.ndarray, config: ModelConfig) -> Tensor:
    B, S, H = h.shape
    A, d = config.heads, config.head_dim
    p = f"layer{layer}.attn."

    def heads(name):
        y = T.linear(h, params[p + name + ".weight"], params[p + name + ".bias"])
        return T.transpose(T.reshape(y, (B, S, A, d)), (0, 2, 1, 3))

    q, k, v = heads("query"), heads("key"), heads("value")
    scores = T.mul(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(d))
    scores = T.add(scores, Tensor(additive_mask, dtype=h.dtype))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, S, H))
    return T.linear(ctx, params[p + "output.weight"], params[p + "output.bias"])


def encode(
    params: ParameterStore,
    token_ids,
    config: Optional[ModelConfig] = None,
    *,
    keep_all: bool = False,
    dropout_rng: Optional[np.random.Generator] = None,
) -> EncoderOutput:
    config = config or params.config
    ids = _check_ids(token_ids, config)
    B, S = ids.shape
    eps = config.layer_norm_eps
    attn_mask = ids != PAD_ID
    additive = np.where(attn_mask, 0.0, _MASK_VALUE).reshape(B, 1, 1, S)

    positions = T.take_rows(params["embed.position"], np.arange(S))
    h = T.add(T.embedding(params["embed.token"], ids), positions)
    h = T.dropout(h, config.dropout, dropout_rng)
    hidden = []
    for i in range(config.layers):
        p = f"layer{i}."
        attn = T.dropout(self_attention(params, i, h, additive, config), config.dropout, dropout_rng)
        h = T.layer_norm(T.add(h, attn), params[p + "attn_norm.gamma"], params[p + "attn_norm.beta"], eps)
        ff = T.linear(T.gelu(T.linear(h, params[p + "ffn.in.weight"], params[p + "ffn.in.bias"])),
                      params[p + "ffn.out.weight"], params[p + "ffn.out.bias"])
        ff = T.dropout(ff, config.dropout, dropout_rng)
        h = T.layer_norm(T.add(h, ff), params[p + "ffn_norm.gamma"], params[p + "ffn_norm.beta"], eps)
        if config.adapters_enabled:
            h = adapter_forward(h, *layer_adapter(params, i))
        if keep_all:
            hidden.append(h)
    return EncoderOutput(hidden_states=h, all_hidden_states=hidden, attention_mask=attn_mask)


def mlm_logits(params: ParameterStore, hidden: Tensor) -> Tensor:
    """Dense -> GELU -> LayerNorm -> vocabulary projection. Works on any ``[..., H]``."""
    x = T.gelu(T.linear(hidden, params["mlm.dense.weight"], params["mlm.dense.bias"]))
    x = T.layer_norm(x, params["mlm.norm.gamma"], params["mlm.norm.beta"], params.config.layer_norm_eps)
    return T.linear(x, params["mlm.decoder.weight"], params["mlm.decoder.bias"])


def cls_logits(params: ParameterStore, hidden: Tensor) -> Tensor:
    """First-token pooling -> tanh pooler -> class logits ``[B, C]``."""
    if hidden.ndim != 3 or hidden.shape[1] < 1:
        raise ShapeError(f"cls_logits expects [B, T>=1, H], got {hidden.shape}")
    pooled = T.select(hidden, 1, 0)
    pooled = T.tanh(T.linear(pooled, params["cls.pooler.weight"], params["cls.pooler.bias"]))
    return T.linear(pooled, params["cls.out.weight"], params["cls.out.bias"])


# ---------------------------------------------------------------- accounting


def adapter_param_count(layers: int, hidden: int, adapter_dim: int) -> int:
    return layers * (2 * hidden * adapter_dim + adapter_dim + hidden)


def count_params(params) -> Dict[str, int]:
    """Exact element counts: ``total``, one entry per group, and ``trainable``.

    ``trainable`` is ADAPTER + TASK_HEAD when adapters are enabled, otherwise
    FROZEN + TASK_HEAD (the full-parameter variants).

    Accepts a :class:`ParameterStore` or a ``ModelConfig`` (counted
    analytically, so real-scale configurations need no allocation).
    """
    if isinstance(params, ModelConfig):
        shapes = param_shapes(params)
    else:
        shapes = {n: (t.shape, params.groups[n]) for n, t in params.tensors.items()}
    counts = {g.value: 0 for g in Group}
    for shape, group in shapes.values():
        counts[Group(group).value] += int(np.prod(shape))
    counts["total"] = sum(counts[g.value] for g in Group)
    adapters_on = counts[Group.ADAPTER.value] > 0
    counts["trainable"] = counts[Group.TASK_HEAD.value] + (
        counts[Group.ADAPTER.value] if adapters_on else counts[Group.FROZEN.value]
    )
    return counts


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """Name -> (shape, group) for ``config`` without allocating tensors."""
    H, F, m, V, C = config.hidden, config.ffn_dim, config.adapter_dim, config.vocab_size, config.n_classes
    out = {"embed.token": ((V, H), Group.FROZEN), "embed.position": ((config.max_len, H), Group.FROZEN)}
    for i in range(config.layers):
        p = f"layer{i}."
        for proj in ("query", "key", "value", "output"):
            out[p + f"attn.{proj}.weight"] = ((H, H), Group.FROZEN)
            out[p + f"attn.{proj}.bias"] = ((H,), Group.FROZEN)
        out[p + "attn_norm.gamma"] = ((H,), Group.FROZEN)
        out[p + "attn_norm.beta"] = ((H,), Group.FROZEN)
        out[p + "ffn.in.weight"] = ((H, F), Group.FROZEN)
        out[p + "ffn.in.bias"] = ((F,), Group.FROZEN)
        out[p + "ffn.out.weight"] = ((F, H), Group.FROZEN)
        out[p + "ffn.out.bias"] = ((H,), Group.FROZEN)
        out[p + "ffn_norm.gamma"] = ((H,), Group.FROZEN)
        out[p + "ffn_norm.beta"] = ((H,), Group.FROZEN)
    if config.adapters_enabled:
        for i in range(config.layers):
            p = f"layer{i}.adapter."
            out[p + "down.weight"] = ((H, m), Group.ADAPTER)
            out[p + "down.bias"] = ((m,), Group.ADAPTER)
            out[p + "up.weight"] = ((m, H), Group.ADAPTER)
            out[p + "up.bias"] = ((H,), Group.ADAPTER)
    out["mlm.dense.weight"] = ((H, H), Group.MLM_HEAD)
    out["mlm.dense.bias"] = ((H,), Group.MLM_HEAD)
    out["mlm.norm.gamma"] = ((H,), Group.MLM_HEAD)
    out["mlm.norm.beta"] = ((H,), Group.MLM_HEAD)
    out["mlm.decoder.weight"] = ((H, V), Group.MLM_HEAD)
    out["mlm.decoder.bias"] = ((V,), Group.MLM_HEAD)
    out["cls.pooler.weight"] = ((H, H), Group.TASK_HEAD)
    out["cls.pooler.bias"] = ((H,), Group.TASK_HEAD)
    out["cls.out.weight"] = ((H, C), Group.TASK_HEAD)
    out["cls.out.bias"] = ((C,), Group.TASK_HEAD)
    return out

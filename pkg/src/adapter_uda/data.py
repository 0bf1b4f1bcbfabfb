"""Corpora, word-level vocabulary, MLM corruption, domain mixing, and the
synthetic multi-domain generator.

File formats
------------
* unlabeled corpus: UTF-8, one document per line
* labeled corpus: UTF-8 TSV, ``label<TAB>text`` per line
* generated dataset: ``<domain>/{train,dev,test}.tsv`` plus ``spec.json``
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

PAD, UNK, MASK, BOS = "[PAD]", "[UNK]", "[MASK]", "[BOS]"
RESERVED = (PAD, UNK, MASK, BOS)
PAD_ID, UNK_ID, MASK_ID, BOS_ID = range(4)
N_RESERVED = len(RESERVED)


def tokenize(text: str) -> List[str]:
    return text.lower().split()


class Vocab:
    """Word-level vocabulary; ids 0-3 are PAD, UNK, MASK, BOS."""

    def __init__(self, words: Sequence[str], freqs: Optional[Dict[str, int]] = None):
        self.itos: List[str] = list(RESERVED) + [w for w in words]
        self.stoi: Dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary contains duplicate words")
        self.freqs: Dict[str, int] = dict(freqs or {})

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.stoi.get(w, UNK_ID) for w in tokenize(text)], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids if i not in (PAD_ID, BOS_ID))

    def to_dict(self) -> dict:
        return {"words": self.itos[N_RESERVED:], "freqs": self.freqs}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(d["words"], d.get("freqs"))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def word_frequencies(texts: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for t in texts:
        counts.update(tokenize(t))
    return counts


def rank_words(counts: Counter) -> List[str]:
    """Words by descending frequency, ties broken lexicographically."""
    return sorted(counts, key=lambda w: (-counts[w], w))


def build_vocab(corpora: Sequence[Sequence[str]], max_size: Optional[int] = None) -> Vocab:
    """Build a vocabulary from one or more raw-text corpora.

    ``max_size`` bounds the total size including the four reserved tokens;
    the least frequent words are dropped (and encode to UNK).
    """
    if isinstance(corpora, str):
        raise TypeError("corpora must be a list of corpora (lists of documents)")
    counts: Counter = Counter()
    for corpus in corpora:
        if isinstance(corpus, str):
            corpus = [corpus]
        counts.update(word_frequencies(corpus))
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = [w for w in rank_words(counts) if w not in RESERVED]
    if max_size is not None:
        if max_size <= N_RESERVED:
            raise ConfigError(f"max_size must exceed {N_RESERVED} reserved tokens, got {max_size}")
        ranked = ranked[: max_size - N_RESERVED]
    return Vocab(ranked, {w: counts[w] for w in ranked})


@dataclass
class DomainCorpus:
    domain_id: str
    documents: List[np.ndarray]
    labels: Optional[List[int]] = None

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.documents):
            raise DataError(
                f"{self.domain_id}: {len(self.labels)} labels for {len(self.documents)} documents"
            )

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def unlabeled(self) -> "DomainCorpus":
        return DomainCorpus(self.domain_id, list(self.documents), None)

    def validate(self, vocab_size: int, n_classes: Optional[int] = None) -> None:
        for i, doc in enumerate(self.documents):
            if len(doc) and (doc.min() < 0 or doc.max() >= vocab_size):
                raise DataError(f"{self.domain_id}: document {i} has a token id outside [0, {vocab_size})")
        if self.labels is not None and n_classes is not None:
            for i, y in enumerate(self.labels):
                if not 0 <= y < n_classes:
                    raise DataError(f"{self.domain_id}: label {y} of document {i} outside [0, {n_classes})")


def encode_texts(vocab: Vocab, domain_id: str, texts: Sequence[str], labels=None) -> DomainCorpus:
    return DomainCorpus(domain_id, [vocab.encode(t) for t in texts], None if labels is None else list(labels))


def pad_batch(documents: Sequence[np.ndarray], max_len: int, add_bos: bool = True) -> np.ndarray:
    """``[B, T]`` id matrix: optional BOS, truncation to ``max_len``, PAD fill.

    T is the longest (truncated) row, so short batches stay short.
    """
    rows = []
    for doc in documents:
        d = np.asarray(doc, dtype=np.int64)
        if add_bos:
            d = np.concatenate([[BOS_ID], d])
        rows.append(d[:max_len])
    width = max(1, max(len(r) for r in rows))
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


# ---------------------------------------------------------------- splitting / mixing


def split_train_dev(corpus: DomainCorpus, ratio: float = 0.8, seed: int = 0) -> Tuple[DomainCorpus, DomainCorpus]:
    """Seeded, stratified (when labeled) train/dev split."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"ratio must be in (0, 1), got {ratio}")
    n = len(corpus)
    if n == 0:
        raise DataError(f"{corpus.domain_id}: cannot split an empty corpus")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)

    train_idx: List[int] = []
    dev_idx: List[int] = []
    stratify = corpus.labels is not None
    if stratify:
        counts = Counter(corpus.labels)
        if min(counts.values()) < 2:
            logger.warning("%s: a class has fewer than 2 documents; splitting without stratification", corpus.domain_id)
            stratify = False
    if stratify:
        labels = np.asarray(corpus.labels)
        n_train_total = int(round(n * ratio))
        by_class = {c: [int(i) for i in order if labels[i] == c] for c in sorted(counts)}
        # largest-remainder allocation keeps the per-class split within one document
        exact = {c: len(ix) * ratio for c, ix in by_class.items()}
        take = {c: int(np.floor(v)) for c, v in exact.items()}
        short = n_train_total - sum(take.values())
        for c in sorted(exact, key=lambda c: (-(exact[c] - take[c]), c))[:max(short, 0)]:
            take[c] += 1
        chosen = set()
        for c, ix in by_class.items():
            chosen.update(ix[: take[c]])
        train_idx = [int(i) for i in order if i in chosen]
        dev_idx = [int(i) for i in order if i not in chosen]
    else:
        n_train = int(round(n * ratio))
        train_idx = [int(i) for i in order[:n_train]]
        dev_idx = [int(i) for i in order[n_train:]]

    def subset(ix):
        docs = [corpus.documents[i] for i in ix]
        labs = None if corpus.labels is None else [corpus.labels[i] for i in ix]
        return DomainCorpus(corpus.domain_id, docs, labs)

    return subset(train_idx), subset(dev_idx)


def mix_domains(source: DomainCorpus, targets: Sequence[DomainCorpus], seed: int = 0) -> DomainCorpus:
    """Shuffled union of source and target documents, labels dropped."""
    parts = [source, *targets]
    docs = [d for c in parts for d in c.documents]
    if not docs:
        raise DataError("mix_domains: every corpus is empty")
    order = np.random.default_rng(seed).permutation(len(docs))
    name = "+".join(c.domain_id for c in parts)
    return DomainCorpus(name, [docs[i] for i in order], None)


# ---------------------------------------------------------------- MLM corruption


@dataclass
class MlmBatch:
    input_ids: np.ndarray
    target_ids: np.ndarray
    loss_mask: np.ndarray
    lengths: np.ndarray

    @property
    def n_selected(self) -> int:
        return int(self.loss_mask.sum())


def mask_for_mlm(
    token_ids: np.ndarray,
    mask_prob: float = 0.15,
    seed=0,
    vocab_size: Optional[int] = None,
) -> MlmBatch:
    """BERT-style corruption of a padded ``[B, T]`` batch.

    Every non-special position (PAD, BOS, ... excluded) is selected
    independently with ``mask_prob``; a selected position becomes MASK with
    probability 0.8, a uniformly random non-reserved id with 0.1, and stays
    unchanged with 0.1. ``seed`` may be an int or a ``numpy`` Generator.
    """
    if not 0.0 <= mask_prob <= 1.0:
        raise ConfigError(f"mask_prob must be in [0, 1], got {mask_prob}")
    ids = np.asarray(token_ids, dtype=np.int64)
    if vocab_size is None:
        vocab_size = int(ids.max()) + 1
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    candidate = ids >= N_RESERVED
    selected = (rng.random(ids.shape) < mask_prob) & candidate
    action = rng.random(ids.shape)
    random_ids = rng.integers(N_RESERVED, max(vocab_size, N_RESERVED + 1), size=ids.shape)
    corrupted = ids.copy()
    to_mask = selected & (action < 0.8)
    to_random = selected & (action >= 0.8) & (action < 0.9)
    corrupted[to_mask] = MASK_ID
    corrupted[to_random] = random_ids[to_random]
    return MlmBatch(corrupted, ids.copy(), selected, (ids != PAD_ID).sum(axis=1))


# ---------------------------------------------------------------- synthetic domains


@dataclass
class SynthSpec:
    """Parameters of the synthetic multi-domain sentiment generator.

    Content words come from a shared pool with probability
    ``shared_fraction`` and from the domain's own pool otherwise. Each
    document carries cue words whose majority polarity is its label; cue
    words are shared across domains, except that a cue is replaced by one of
    the domain's own polarity words with probability ``domain_cue_rate``.

    The shared cue lexicon is cut into ``n_domains`` slices; with probability
    ``cue_locality`` a shared cue comes from the domain's own slice instead of
    the whole lexicon, so each domain favours different sentiment words.
    """

    n_domains: int = 3
    domain_names: Optional[List[str]] = None
    docs_per_domain: int = 1000
    test_docs_per_domain: int = 400
    train_ratio: float = 0.8
    doc_length: Tuple[int, int] = (12, 24)
    shared_pool_size: int = 400
    domain_pool_size: int = 400
    shared_fraction: float = 0.9
    cue_words: int = 8
    domain_cue_words: int = 8
    domain_cue_rate: float = 0.0
    cue_locality: float = 0.0
    cues_per_doc: Tuple[int, int] = (3, 5)
    cue_noise: float = 0.2
    zipf_exponent: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.doc_length = tuple(self.doc_length)
        self.cues_per_doc = tuple(self.cues_per_doc)
        if self.domain_names is not None:
            self.domain_names = list(self.domain_names)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ConfigError(f"shared_fraction must be in [0, 1], got {self.shared_fraction}")
        if not 0.0 <= self.domain_cue_rate <= 1.0:
            raise ConfigError(f"domain_cue_rate must be in [0, 1], got {self.domain_cue_rate}")
        if not 0.0 <= self.cue_locality <= 1.0:
            raise ConfigError(f"cue_locality must be in [0, 1], got {self.cue_locality}")
        if self.cue_locality > 0 and self.cue_words < self.n_domains:
            raise ConfigError("cue_words must be >= n_domains when cue_locality > 0")
        if not 0.0 <= self.cue_noise < 0.5:
            raise ConfigError(f"cue_noise must be in [0, 0.5), got {self.cue_noise}")
        if self.n_domains < 1:
            raise ConfigError("n_domains must be >= 1")
        if self.domain_names is not None and len(self.domain_names) != self.n_domains:
            raise ConfigError("domain_names must have n_domains entries")
        if self.domain_names is not None and len(set(self.domain_names)) != self.n_domains:
            raise ConfigError("domain_names must be distinct")
        for name in ("shared_pool_size", "domain_pool_size", "cue_words", "docs_per_domain", "test_docs_per_domain"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.domain_cue_rate > 0 and self.domain_cue_words < 1:
            raise ConfigError("domain_cue_words must be >= 1 when domain_cue_rate > 0")
        lo, hi = self.doc_length
        clo, chi = self.cues_per_doc
        if not (1 <= lo <= hi):
            raise ConfigError(f"invalid doc_length range {self.doc_length}")
        if not (1 <= clo <= chi) or chi > lo:
            raise ConfigError(f"cues_per_doc {self.cues_per_doc} must be within [1, min doc length]")
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigError("train_ratio must be in (0, 1)")

    @property
    def names(self) -> List[str]:
        return self.domain_names or [f"d{i}" for i in range(self.n_domains)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["doc_length"] = list(self.doc_length)
        d["cues_per_doc"] = list(self.cues_per_doc)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DomainSplits:
    """Raw text for one generated domain."""

    name: str
    train: List[Tuple[int, str]] = field(default_factory=list)
    dev: List[Tuple[int, str]] = field(default_factory=list)
    test: List[Tuple[int, str]] = field(default_factory=list)

    def texts(self, split: Optional[str] = None) -> List[str]:
        splits = (split,) if split else ("train", "dev", "test")
        return [t for s in splits for _, t in getattr(self, s)]


def _zipf_probs(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def gen_synthetic(spec: SynthSpec) -> List[DomainSplits]:
    """Generate labeled train/dev/test text for every domain (deterministic per seed)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shared = [f"w{i}" for i in range(spec.shared_pool_size)]
    shared_p = _zipf_probs(len(shared), spec.zipf_exponent)
    cues = {1: [f"pos{i}" for i in range(spec.cue_words)], 0: [f"neg{i}" for i in range(spec.cue_words)]}
    lo, hi = spec.doc_length
    clo, chi = spec.cues_per_doc
    out = []
    for k, name in enumerate(spec.names):
        lo_c = k * spec.cue_words // spec.n_domains
        hi_c = (k + 1) * spec.cue_words // spec.n_domains
        own = [f"{name}_w{i}" for i in range(spec.domain_pool_size)]
        own_p = _zipf_probs(len(own), spec.zipf_exponent)
        own_cues = {
            1: [f"{name}_pos{i}" for i in range(spec.domain_cue_words)],
            0: [f"{name}_neg{i}" for i in range(spec.domain_cue_words)],
        }
        total = spec.docs_per_domain + spec.test_docs_per_domain
        # exactly balanced labels, then shuffled
        labels = np.array([i % 2 for i in range(total)])
        rng.shuffle(labels)
        docs = []
        for y in labels:
            length = int(rng.integers(lo, hi + 1))
            n_cue = int(rng.integers(clo, chi + 1))
            from_shared = rng.random(length) < spec.shared_fraction
            shared_ix = rng.choice(len(shared), size=length, p=shared_p)
            own_ix = rng.choice(len(own), size=length, p=own_p)
            words = [shared[a] if s else own[b] for s, a, b in zip(from_shared, shared_ix, own_ix)]
            # cue polarities: flip with cue_noise, but keep a strict majority for y
            pol = np.where(rng.random(n_cue) < spec.cue_noise, 1 - y, y)
            while (pol == y).sum() * 2 <= n_cue:
                pol[int(np.flatnonzero(pol != y)[0])] = y
            slots = rng.choice(length, size=n_cue, replace=False)
            for slot, p in zip(slots, pol):
                if rng.random() < spec.domain_cue_rate:
                    words[slot] = own_cues[int(p)][int(rng.integers(spec.domain_cue_words))]
                elif rng.random() < spec.cue_locality:
                    words[slot] = cues[int(p)][int(rng.integers(lo_c, hi_c))]
                else:
                    words[slot] = cues[int(p)][int(rng.integers(spec.cue_words))]
            docs.append((int(y), " ".join(words)))
        labeled, test = docs[: spec.docs_per_domain], docs[spec.docs_per_domain:]
        index = DomainCorpus(name, [np.array([i]) for i in range(len(labeled))], [y for y, _ in labeled])
        train_ix, dev_ix = split_train_dev(index, spec.train_ratio, seed=int(rng.integers(2**31)))
        out.append(DomainSplits(
            name,
            [labeled[int(d[0])] for d in train_ix.documents],
            [labeled[int(d[0])] for d in dev_ix.documents],
            test,
        ))
    return out


def gen_generic_corpus(spec: SynthSpec, n_docs: int, seed: Optional[int] = None) -> List[str]:
    """Unlabeled "general language" text for backbone pre-training.

    Documents use only the shared pool and the shared cue words, so every
    domain-specific word is absent (the backbone never sees domain jargon).
    """
    if n_docs < 1:
        raise ConfigError("n_docs must be >= 1")
    generic = SynthSpec(**{
        **spec.to_dict(),
        "n_domains": 1,
        "domain_names": ["generic"],
        "docs_per_domain": n_docs,
        "test_docs_per_domain": 1,
        "shared_fraction": 1.0,
        "domain_cue_rate": 0.0,
        "cue_locality": 0.0,
        "seed": spec.seed + 7919 if seed is None else seed,
    })
    d = gen_synthetic(generic)[0]
    return [t for _, t in d.train + d.dev]


# ---------------------------------------------------------------- file I/O


def write_labeled_tsv(path: str, rows: Iterable[Tuple[int, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for y, text in rows:
            if "\t" in text or "\n" in text:
                raise DataError("document text may not contain tabs or newlines")
            fh.write(f"{int(y)}\t{text}\n")


def read_labeled_tsv(path: str) -> List[Tuple[int, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            label, sep, text = line.partition("\t")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected 'label<TAB>text'")
            try:
                y = int(label)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: label {label!r} is not an integer") from exc
            if y < 0:
                raise DataError(f"{path}:{lineno}: negative label {y}")
            rows.append((y, text))
    return rows


def write_unlabeled(path: str, texts: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in texts:
            fh.write(t.replace("\n", " ") + "\n")


def read_unlabeled(path: str) -> List[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def write_dataset(splits: Sequence[DomainSplits], spec: SynthSpec, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for d in splits:
        ddir = os.path.join(out_dir, d.name)
        os.makedirs(ddir, exist_ok=True)
        for split in ("train", "dev", "test"):
            path = os.path.join(ddir, f"{split}.tsv")
            write_labeled_tsv(path, getattr(d, split))
            written.append(path)
    spec_path = os.path.join(out_dir, "spec.json")
    with open(spec_path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(spec_path)
    return written


def read_dataset(root: str) -> List[DomainSplits]:
    """Load every ``<domain>/{train,dev,test}.tsv`` under ``root`` (sorted by name)."""
    names = sorted(
        d for d in os.listdir(root)
        if os.path.isdir(os.path.join(root, d)) and os.path.exists(os.path.join(root, d, "train.tsv"))
    )
    if not names:
        raise DataError(f"no domain directories found under {root}")
    out = []
    for name in names:
        parts = {}
        for split in ("train", "dev", "test"):
            path = os.path.join(root, name, f"{split}.tsv")
            parts[split] = read_labeled_tsv(path) if os.path.exists(path) else []
        out.append(DomainSplits(name, **parts))
    return out


def dataset_vocab(splits: Sequence[DomainSplits], max_size: Optional[int] = None) -> Vocab:
    """Backbone vocabulary over the text of every domain (labels are never read)."""
    return build_vocab([d.texts() for d in splits], max_size)

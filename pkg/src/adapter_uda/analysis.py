"""Domain similarity, Welch's t-test, hidden-state export/projection, and
result aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .data import DomainCorpus, pad_batch, rank_words, word_frequencies
from .errors import ContractError, DataError

CorpusLike = Union[Sequence[str], Counter, DomainCorpus]


# ---------------------------------------------------------------- similarity


def _counts(corpus: CorpusLike) -> Counter:
    if isinstance(corpus, Counter):
        return corpus
    if isinstance(corpus, DomainCorpus):
        c: Counter = Counter()
        for doc in corpus.documents:
            c.update(int(i) for i in doc)
        return c
    if isinstance(corpus, str):
        corpus = [corpus]
    return word_frequencies(corpus)


def top_words(corpus: CorpusLike, k: int) -> List:
    counts = _counts(corpus)
    if isinstance(next(iter(counts), ""), str):
        return rank_words(counts)[:k]
    return sorted(counts, key=lambda w: (-counts[w], w))[:k]


def domain_similarity(corpus_a: CorpusLike, corpus_b: CorpusLike, k: int = 10000) -> float:
    """Overlap of the two domains' top-``k`` most frequent words.

    With ``k' = min(k, |V_a|, |V_b|)`` the score is ``|A & B| / k'`` where A
    and B are each domain's ``k'`` most frequent words (ties broken
    lexicographically).
    """
    ca, cb = _counts(corpus_a), _counts(corpus_b)
    if not ca or not cb:
        raise DataError("domain_similarity needs two nonempty corpora")
    kk = min(k, len(ca), len(cb))
    a = set(top_words(ca, kk))
    b = set(top_words(cb, kk))
    return len(a & b) / kk


@dataclass
class SimilarityMatrix:
    domains: List[str]
    matrix: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", *self.domains])
        for name, row in zip(self.domains, self.matrix):
            w.writerow([name, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"domains": self.domains, "matrix": self.matrix.tolist()}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SimilarityMatrix":
        d = json.loads(text)
        return cls(list(d["domains"]), np.asarray(d["matrix"], dtype=float))


def similarity_matrix(corpora: Union[Mapping[str, CorpusLike], Sequence[Tuple[str, CorpusLike]]],
                      k: int = 10000) -> SimilarityMatrix:
    items = list(corpora.items()) if isinstance(corpora, Mapping) else list(corpora)
    if len(items) < 2:
        raise DataError("similarity_matrix needs at least two corpora")
    names = [n for n, _ in items]
    counts = [_counts(c) for _, c in items]
    n = len(items)
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            if i == j:
                mat[i, i] = 1.0 if counts[i] else 0.0
            else:
                mat[i, j] = mat[j, i] = domain_similarity(counts[i], counts[j], k)
    return SimilarityMatrix(names, mat)


# ---------------------------------------------------------------- Welch t-test


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc_regularized needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-tailed tail probability ``P(|T| >= |t|)`` for Student's t."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return float(min(1.0, max(0.0, betainc_regularized(df / 2.0, 0.5, x))))


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float
    degenerate: bool = False


def welch_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> WelchResult:
    """Unpaired two-tailed Welch t-test.

    Both samples constant: equal means give ``t=0, p=1``; unequal means give
    ``p=0`` with ``degenerate=True`` (t is +/-inf, df is n_a + n_b - 2).
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ContractError(f"each sample needs >= 2 values, got {a.size} and {b.size}")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    sa, sb = va / a.size, vb / b.size
    se2 = sa + sb
    if se2 == 0.0:
        df = float(a.size + b.size - 2)
        if ma == mb:
            return WelchResult(0.0, df, 1.0, degenerate=True)
        return WelchResult(math.copysign(math.inf, ma - mb), df, 0.0, degenerate=True)
    t = (ma - mb) / math.sqrt(se2)
    df = se2 * se2 / ((sa * sa) / (a.size - 1) + (sb * sb) / (b.size - 1))
    return WelchResult(float(t), float(df), student_t_sf2(t, df))


def significance_flag(p: float) -> str:
    """Table marks: ``‡`` for p < 0.01, ``†`` for p < 0.05."""
    if p < 0.01:
        return "‡"
    if p < 0.05:
        return "†"
    return ""


# ---------------------------------------------------------------- hidden states


def extract_hidden(params, corpus: DomainCorpus, pooling: str = "mean", batch_size: int = 64) -> np.ndarray:
    """Per-document pooled final-layer hidden state, ``[N, H]`` float32.

    ``pooling`` is ``"mean"`` (over non-PAD positions, BOS included) or
    ``"first"``.
    """
    from .model import encode

    if pooling not in ("mean", "first"):
        raise ValueError(f"pooling must be 'mean' or 'first', got {pooling!r}")
    if len(corpus) == 0:
        raise DataError(f"{corpus.domain_id}: cannot extract hidden states from an empty corpus")
    rows = []
    with T.no_grad():
        for i in range(0, len(corpus), batch_size):
            ids = pad_batch(corpus.documents[i: i + batch_size], params.config.max_len)
            h = encode(params, ids).hidden_states.data.astype(np.float64)
            if pooling == "first":
                rows.append(h[:, 0])
            else:
                m = (ids != 0)[..., None]
                rows.append((h * m).sum(axis=1) / m.sum(axis=1))
    return np.concatenate(rows).astype(np.float32)


_HIDDEN_HEADER = struct.Struct("<QQ")


def write_hidden_matrix(path: str, mat: np.ndarray) -> None:
    """Binary matrix: ``N, H`` as little-endian u64, then row-major LE float32."""
    mat = np.ascontiguousarray(mat, dtype="<f4")
    if mat.ndim != 2:
        raise ContractError(f"expected a 2-D matrix, got shape {mat.shape}")
    with open(path, "wb") as fh:
        fh.write(_HIDDEN_HEADER.pack(*mat.shape))
        fh.write(mat.tobytes())


def read_hidden_matrix(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HIDDEN_HEADER.size:
        raise DataError(f"{path}: truncated header")
    n, h = _HIDDEN_HEADER.unpack_from(raw)
    body = raw[_HIDDEN_HEADER.size:]
    if len(body) != n * h * 4:
        raise DataError(f"{path}: expected {n * h * 4} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(n, h).copy()


def write_matrix_csv(path: str, mat: np.ndarray, labels: Optional[Sequence[str]] = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ([] if labels is None else ["domain"]) + [f"c{j}" for j in range(mat.shape[1])]
        w.writerow(head)
        for i, row in enumerate(mat):
            w.writerow(([] if labels is None else [labels[i]]) + [repr(float(v)) for v in row])


# ---------------------------------------------------------------- PCA


class DegenerateGeometryError(ContractError):
    pass


def _top_eigvec(mat: np.ndarray, tol: float, max_iter: int) -> Tuple[np.ndarray, float]:
    n = mat.shape[0]
    # deterministic, non-symmetric start avoids orthogonality to the target by construction
    v = np.linspace(1.0, 2.0, n)
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        if w @ v < 0:
            w = -w
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    return v, float(v @ mat @ v)


def pca_project_2d(points, tol: float = 1e-9, max_iter: int = 10000) -> Tuple[np.ndarray, np.ndarray]:
    """Project onto the top two principal directions found by power iteration.

    Returns ``(coords [N, 2], explained_variance [2])``; explained variances
    are the sample-covariance eigenvalues, in descending order. Each
    direction's sign is fixed so its largest-magnitude entry is positive.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ContractError(f"pca_project_2d needs an [N>=3, D] matrix, got shape {x.shape}")
    xc = x - x.mean(axis=0)
    if not np.any(xc):
        raise DegenerateGeometryError("all points are identical; no principal directions exist")
    cov = xc.T @ xc / (x.shape[0] - 1)
    comps, vals = [], []
    work = cov.copy()
    for _ in range(2):
        v, lam = _top_eigvec(work, tol, max_iter)
        lam = max(lam, 0.0)
        if v.size and v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        vals.append(lam)
        work = work - lam * np.outer(v, v)
    if x.shape[1] == 1:
        comps[1] = np.zeros(1)
        vals[1] = 0.0
    basis = np.stack(comps, axis=1)
    return xc @ basis, np.asarray(vals)


# ---------------------------------------------------------------- aggregation

VARIANT_ORDER = ["FULL_FT", "FULL_TSA", "ADA_FT", "ADA_TSA"]


@dataclass
class ResultRow:
    scheme: str
    variant: str
    accuracies: List[float]

    @property
    def n(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        if self.n < 2:
            return 0.0
        return float(np.std(self.accuracies, ddof=1))


@dataclass
class ResultTable:
    rows: List[ResultRow]
    averages: Dict[str, float] = field(default_factory=dict)

    def cell(self, scheme: str, variant: str) -> ResultRow:
        for r in self.rows:
            if r.scheme == scheme and r.variant == variant:
                return r
        raise KeyError((scheme, variant))

    @property
    def schemes(self) -> List[str]:
        return list(dict.fromkeys(r.scheme for r in self.rows))

    @property
    def variants(self) -> List[str]:
        seen = list(dict.fromkeys(r.variant for r in self.rows))
        return sorted(seen, key=lambda v: (VARIANT_ORDER.index(v) if v in VARIANT_ORDER else 99, v))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        width = max((r.n for r in self.rows), default=0)
        w.writerow(["scheme", "variant", "mean", "std", *[f"seed{i}" for i in range(width)]])
        for r in self.rows:
            w.writerow([r.scheme, r.variant, f"{r.mean:.6f}", f"{r.std:.6f}", *[f"{a:.6f}" for a in r.accuracies]])
        for v in self.variants:
            w.writerow(["Avg.", v, f"{self.averages[v]:.6f}", "", *[""] * width])
        return buf.getvalue()


def aggregate_results(records: Iterable[Tuple[str, str, float]]) -> ResultTable:
    """Group ``(scheme, variant, accuracy)`` records into mean/std cells.

    Seed order inside a cell follows record order. The Avg. row per variant is
    the arithmetic mean of that variant's cell means.
    """
    cells: Dict[Tuple[str, str], List[float]] = {}
    for scheme, variant, acc in records:
        cells.setdefault((scheme, str(variant)), []).append(float(acc))
    rows = [ResultRow(s, v, accs) for (s, v), accs in cells.items()]
    table = ResultTable(rows)
    for v in table.variants:
        table.averages[v] = float(np.mean([r.mean for r in rows if r.variant == v]))
    return table


def significance_report(table: ResultTable, reference: str = "ADA_TSA") -> List[dict]:
    """Welch test of every variant against ``reference`` in each scheme."""
    out = []
    for scheme in table.schemes:
        try:
            ref = table.cell(scheme, reference)
        except KeyError:
            continue
        for v in table.variants:
            if v == reference:
                continue
            try:
                other = table.cell(scheme, v)
            except KeyError:
                continue
            if ref.n < 2 or other.n < 2:
                res = None
            else:
                res = welch_t_test(ref.accuracies, other.accuracies)
            out.append({
                "scheme": scheme,
                "variant": v,
                "reference": reference,
                "t": None if res is None else res.t,
                "df": None if res is None else res.df,
                "p": None if res is None else res.p,
                "flag": "" if res is None else significance_flag(res.p),
            })
    return out


def significance_csv(report: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "variant", "reference", "t", "df", "p", "flag"])
    for r in report:
        w.writerow([r["scheme"], r["variant"], r["reference"],
                    *("" if r[k] is None else repr(float(r[k])) for k in ("t", "df", "p")), r["flag"]])
    return buf.getvalue()


def render_table(table: ResultTable, report: Optional[Sequence[dict]] = None, reference: str = "ADA_TSA") -> str:
    """Plain-text table: one row per scheme, ``mean ± std`` (in %) per variant."""
    from .training import MethodVariant

    flags = {(r["scheme"], r["variant"]): r["flag"] for r in (report or [])}
    variants = table.variants
    heads = ["src -> tgt"] + [MethodVariant(v).label if v in VARIANT_ORDER else v for v in variants]
    body = []
    for s in table.schemes:
        line = [s]
        for v in variants:
            try:
                c = table.cell(s, v)
            except KeyError:
                line.append("-")
                continue
            line.append(f"{100 * c.mean:.2f}{flags.get((s, v), '')} ± {100 * c.std:.2f}")
        body.append(line)
    avg = ["Avg."] + [f"{100 * table.averages[v]:.2f}" for v in variants]
    widths = [max(len(r[i]) for r in [heads, *body, avg]) for i in range(len(heads))]

    def fmt(r):
        return " | ".join(c.ljust(w) for c, w in zip(r, widths))

    rule = "-+-".join("-" * w for w in widths)
    lines = [fmt(heads), rule, *map(fmt, body), rule, fmt(avg)]
    if report:
        lines.append(f"† p < 0.05, ‡ p < 0.01 (Welch t-test against {reference})")
    return "\n".join(lines) + "\n"

import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapter_uda.data import (
    BOS_ID,
    MASK_ID,
    N_RESERVED,
    PAD_ID,
    UNK_ID,
    DomainCorpus,
    SynthSpec,
    Vocab,
    build_vocab,
    dataset_vocab,
    encode_texts,
    gen_generic_corpus,
    gen_synthetic,
    mask_for_mlm,
    mix_domains,
    pad_batch,
    rank_words,
    read_dataset,
    read_labeled_tsv,
    split_train_dev,
    tokenize,
    write_dataset,
    write_labeled_tsv,
)
from adapter_uda.errors import ConfigError, DataError

SMALL = dict(docs_per_domain=100, test_docs_per_domain=40, shared_pool_size=60, domain_pool_size=60)


def test_tokenize_lowercases_and_splits():
    assert tokenize("  Hello  WORLD\tagain ") == ["hello", "world", "again"]


def test_vocab_ranking_and_reserved():
    v = build_vocab([["b a a", "c b a"]])
    assert v.itos[:N_RESERVED] == ["[PAD]", "[UNK]", "[MASK]", "[BOS]"]
    assert (PAD_ID, UNK_ID, MASK_ID, BOS_ID) == (0, 1, 2, 3)
    assert v.itos[N_RESERVED:] == ["a", "b", "c"]
    assert v.encode("a zzz c").tolist() == [v.stoi["a"], UNK_ID, v.stoi["c"]]
    assert rank_words(Counter({"y": 2, "x": 2, "z": 3})) == ["z", "x", "y"]


def test_vocab_max_size_counts_reserved():
    v = build_vocab([["a a a b b c"]], max_size=N_RESERVED + 2)
    assert len(v) == N_RESERVED + 2
    assert v.encode("c")[0] == UNK_ID
    with pytest.raises(ConfigError):
        build_vocab([["a"]], max_size=N_RESERVED)
    with pytest.raises(DataError):
        build_vocab([[]])


def test_vocab_save_load(tmp_path):
    v = build_vocab([["x y z z"]])
    v.save(tmp_path / "v.json")
    w = Vocab.load(tmp_path / "v.json")
    assert w.itos == v.itos and w.decode(w.encode("z y")) == "z y"


def test_pad_batch_bos_truncation():
    out = pad_batch([np.array([5, 6, 7]), np.array([8])], max_len=3)
    assert out.tolist() == [[BOS_ID, 5, 6], [BOS_ID, 8, PAD_ID]]
    assert pad_batch([np.array([5])], 4, add_bos=False).tolist() == [[5]]


def test_split_stratified_and_deterministic():
    docs = [np.array([i]) for i in range(50)]
    labels = [0] * 30 + [1] * 20
    c = DomainCorpus("d", docs, labels)
    tr, dv = split_train_dev(c, 0.8, seed=1)
    assert len(tr) == 40 and len(dv) == 10
    assert Counter(tr.labels) == {0: 24, 1: 16}
    tr2, _ = split_train_dev(c, 0.8, seed=1)
    assert [d[0] for d in tr.documents] == [d[0] for d in tr2.documents]
    seen = sorted(int(d[0]) for d in tr.documents + dv.documents)
    assert seen == list(range(50))


def test_split_small_class_falls_back(caplog):
    c = DomainCorpus("d", [np.array([i]) for i in range(6)], [0, 0, 0, 0, 0, 1])
    tr, dv = split_train_dev(c, 0.5, seed=0)
    assert len(tr) + len(dv) == 6
    assert "stratification" in caplog.text


def test_split_errors():
    with pytest.raises(ConfigError):
        split_train_dev(DomainCorpus("d", [np.array([1])]), 1.0)
    with pytest.raises(DataError):
        split_train_dev(DomainCorpus("d", []), 0.5)


def test_mix_domains_drops_labels_and_keeps_all():
    a = DomainCorpus("a", [np.array([1]), np.array([2])], [0, 1])
    b = DomainCorpus("b", [np.array([3])], None)
    m = mix_domains(a, [b], seed=0)
    assert m.labels is None
    assert sorted(int(d[0]) for d in m.documents) == [1, 2, 3]


def test_masking_statistics():
    rng = np.random.default_rng(0)
    ids = rng.integers(N_RESERVED, 500, size=(1000, 100))
    b = mask_for_mlm(ids, 0.15, seed=3, vocab_size=500)
    sel = b.loss_mask
    assert abs(sel.mean() - 0.15) < 0.005
    masked = (b.input_ids == MASK_ID) & sel
    unchanged = (b.input_ids == ids) & sel
    random = sel & ~masked & ~unchanged
    n = sel.sum()
    # random replacements can coincide with the original id (1/496 chance), counted as "unchanged"
    assert abs(masked.sum() / n - 0.8) < 0.02
    assert abs(unchanged.sum() / n - 0.1) < 0.02
    assert abs(random.sum() / n - 0.1) < 0.02
    assert np.array_equal(b.target_ids, ids)
    assert np.array_equal(b.input_ids[~sel], ids[~sel])


def test_masking_skips_reserved():
    ids = np.array([[BOS_ID, 7, 8, PAD_ID, PAD_ID], [BOS_ID, UNK_ID, 9, 10, PAD_ID]])
    b = mask_for_mlm(ids, 1.0, seed=0, vocab_size=20)
    assert not b.loss_mask[ids < N_RESERVED].any()
    assert b.loss_mask[ids >= N_RESERVED].all()
    assert (b.input_ids[b.loss_mask] >= 0).all()
    with pytest.raises(ConfigError):
        mask_for_mlm(ids, 1.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), p=st.floats(0.0, 1.0))
def test_masking_properties(seed, p):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 30, size=(4, 9))
    b = mask_for_mlm(ids, p, seed=seed, vocab_size=30)
    assert not b.loss_mask[ids < N_RESERVED].any()
    changed = b.input_ids != ids
    assert not (changed & ~b.loss_mask).any()
    assert ((b.input_ids[changed] == MASK_ID) | (b.input_ids[changed] >= N_RESERVED)).all()
    again = mask_for_mlm(ids, p, seed=seed, vocab_size=30)
    assert np.array_equal(again.input_ids, b.input_ids)


def test_spec_validation():
    with pytest.raises(ConfigError, match="shared_fraction"):
        SynthSpec(shared_fraction=1.5)
    with pytest.raises(ConfigError, match="unknown"):
        SynthSpec.from_dict({"n_domain": 3})
    with pytest.raises(ConfigError):
        SynthSpec(n_domains=2, domain_names=["a", "a"])
    s = SynthSpec(n_domains=2, **SMALL)
    assert SynthSpec.from_dict(s.to_dict()) == s


def test_generator_shape_balance_and_determinism():
    spec = SynthSpec(n_domains=3, **SMALL)
    a, b = gen_synthetic(spec), gen_synthetic(spec)
    assert [d.name for d in a] == ["d0", "d1", "d2"]
    assert a == b
    for d in a:
        assert len(d.train) == 80 and len(d.dev) == 20 and len(d.test) == 40
        labels = [y for y, _ in d.train + d.dev + d.test]
        assert Counter(labels) == {0: 70, 1: 70}
    assert gen_synthetic(SynthSpec(n_domains=3, seed=1, **SMALL)) != a


def test_cues_keep_label_majority():
    spec = SynthSpec(n_domains=1, cue_noise=0.45, **SMALL)
    for y, text in gen_synthetic(spec)[0].train:
        words = text.split()
        pos = sum(w.startswith("pos") for w in words)
        neg = sum(w.startswith("neg") for w in words)
        assert (pos > neg) if y == 1 else (neg > pos)


def test_shared_fraction_controls_domain_words():
    def own_share(sf):
        d = gen_synthetic(SynthSpec(n_domains=2, shared_fraction=sf, **SMALL))[1]
        words = " ".join(d.texts()).split()
        return np.mean([w.startswith("d1_") for w in words])

    assert own_share(1.0) == 0.0
    assert own_share(0.2) > 0.5 > own_share(0.9)


def test_domain_cues_and_generic_corpus():
    spec = SynthSpec(n_domains=2, domain_cue_rate=1.0, **SMALL)
    d = gen_synthetic(spec)[0]
    words = " ".join(d.texts()).split()
    assert any(w.startswith("d0_pos") for w in words)
    assert not any(w.startswith(("pos", "neg")) for w in words)
    generic = gen_generic_corpus(spec, 50)
    assert len(generic) == 50
    assert not any("_" in w for t in generic for w in t.split())


def test_dataset_round_trip(tmp_path):
    spec = SynthSpec(n_domains=2, **SMALL)
    splits = gen_synthetic(spec)
    written = write_dataset(splits, spec, str(tmp_path))
    assert os.path.join(str(tmp_path), "spec.json") in written
    back = read_dataset(str(tmp_path))
    assert back == splits
    assert len(dataset_vocab(back)) == len(dataset_vocab(splits))


def test_tsv_rejects_tabs_and_bad_rows(tmp_path):
    with pytest.raises(DataError):
        write_labeled_tsv(tmp_path / "x.tsv", [(1, "a\tb")])
    (tmp_path / "bad.tsv").write_text("notalabel\thello\n")
    with pytest.raises(DataError):
        read_labeled_tsv(tmp_path / "bad.tsv")


def test_encode_and_validate():
    v = build_vocab([["a b"]])
    c = encode_texts(v, "x", ["a b", "b"], [0, 1])
    c.validate(len(v), 2)
    with pytest.raises(DataError):
        c.validate(len(v) - 1)
    with pytest.raises(DataError):
        DomainCorpus("x", [np.array([1])], [0, 1])

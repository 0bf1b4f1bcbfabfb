import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from adapter_uda.analysis import (
    DegenerateGeometryError,
    SimilarityMatrix,
    aggregate_results,
    betainc_regularized,
    domain_similarity,
    extract_hidden,
    pca_project_2d,
    read_hidden_matrix,
    render_table,
    significance_csv,
    significance_flag,
    significance_report,
    similarity_matrix,
    student_t_sf2,
    welch_t_test,
    write_hidden_matrix,
)
from adapter_uda.data import SynthSpec, build_vocab, encode_texts, gen_synthetic
from adapter_uda.errors import ContractError, DataError
from adapter_uda.model import ModelConfig, init_model


def test_overlap_hand_example():
    assert domain_similarity(["a b c"], ["b c d"], k=3) == 2 / 3
    assert domain_similarity(["a b"], ["a b"], k=10) == 1.0
    assert domain_similarity(["a b"], ["c d"], k=10) == 0.0


def test_overlap_uses_top_k_by_frequency():
    a = ["x x x y y z"]
    b = ["x x w w w z"]
    assert domain_similarity(a, b, k=1) == 0.0
    assert domain_similarity(a, b, k=2) == 0.5


def test_similarity_matrix_properties_and_files():
    spec = SynthSpec(n_domains=3, docs_per_domain=80, test_docs_per_domain=20, shared_pool_size=40,
                     domain_pool_size=40)
    splits = gen_synthetic(spec)
    m = similarity_matrix({d.name: d.texts() for d in splits}, k=50)
    assert np.array_equal(m.matrix, m.matrix.T)
    assert np.all(np.diag(m.matrix) == 1.0)
    assert np.all((m.matrix >= 0) & (m.matrix <= 1))
    back = SimilarityMatrix.from_json(m.to_json())
    assert back.domains == m.domains and np.array_equal(back.matrix, m.matrix)
    rows = list(csv.reader(io.StringIO(m.to_csv())))
    assert rows[0] == ["domain", "d0", "d1", "d2"]
    with pytest.raises(DataError):
        similarity_matrix({"a": ["x"]})


def test_similarity_orders_shared_fraction():
    def off_diag(sf):
        spec = SynthSpec(n_domains=3, docs_per_domain=200, test_docs_per_domain=20, shared_fraction=sf)
        m = similarity_matrix([(d.name, d.texts()) for d in gen_synthetic(spec)], k=300).matrix
        return m[~np.eye(3, dtype=bool)].mean()

    assert off_diag(0.9) > off_diag(0.2)


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2.0, 3.0, 0.7), (10.5, 0.5, 0.99), (1.0, 1.0, 0.0), (3, 4, 1.0)])
def test_betainc_against_scipy(a, b, x):
    assert betainc_regularized(a, b, x) == pytest.approx(special.betainc(a, b, x), abs=1e-12)


def test_student_t_two_sided():
    for t, df in [(0.0, 3.0), (2.1, 4.5), (-7.3, 1.2), (40.0, 30.0)]:
        assert student_t_sf2(t, df) == pytest.approx(2 * stats.t.sf(abs(t), df), abs=1e-12)


def test_welch_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.normal(0.8, rng.uniform(0.001, 0.05), size=rng.integers(2, 9))
        b = rng.normal(0.8, rng.uniform(0.001, 0.05), size=rng.integers(2, 9))
        r, ref = welch_t_test(a, b), stats.ttest_ind(a, b, equal_var=False)
        assert r.t == pytest.approx(ref.statistic, abs=1e-9)
        assert r.df == pytest.approx(ref.df, abs=1e-9)
        assert r.p == pytest.approx(ref.pvalue, abs=1e-9)


def test_welch_degenerate_cases():
    r = welch_t_test([0.5, 0.5, 0.5], [0.5, 0.5])
    assert r.degenerate and r.p == 1.0 and r.t == 0.0
    r = welch_t_test([0.6, 0.6], [0.5, 0.5])
    assert r.degenerate and r.p == 0.0
    with pytest.raises(ContractError):
        welch_t_test([1.0], [1.0, 2.0])


def test_significance_flags():
    assert significance_flag(0.001) == "‡"
    assert significance_flag(0.03) == "†"
    assert significance_flag(0.2) == ""


def test_pca_matches_eigendecomposition():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 6)) @ np.diag([5, 3, 1, 0.5, 0.2, 0.1])
    coords, explained = pca_project_2d(x)
    vals, vecs = np.linalg.eigh(np.cov(x.T))
    np.testing.assert_allclose(explained, vals[::-1][:2], rtol=1e-8)
    ref = (x - x.mean(0)) @ vecs[:, ::-1][:, :2]
    for j in range(2):
        np.testing.assert_allclose(np.abs(coords[:, j]), np.abs(ref[:, j]), atol=1e-6)
    again, _ = pca_project_2d(x)
    assert np.array_equal(coords, again)


def test_pca_degenerate():
    with pytest.raises(DegenerateGeometryError):
        pca_project_2d(np.ones((5, 3)))
    with pytest.raises(ContractError):
        pca_project_2d(np.zeros((2, 3)))


def test_hidden_matrix_binary_layout(tmp_path):
    m = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "h.bin"
    write_hidden_matrix(path, m)
    raw = path.read_bytes()
    assert raw[:16] == (2).to_bytes(8, "little") + (3).to_bytes(8, "little")
    assert np.array_equal(np.frombuffer(raw[16:], "<f4").reshape(2, 3), m)
    assert np.array_equal(read_hidden_matrix(path), m)
    path.write_bytes(raw[:-1])
    with pytest.raises(DataError):
        read_hidden_matrix(path)


def test_extract_hidden_shapes():
    v = build_vocab([["a b c d"]])
    c = encode_texts(v, "x", ["a b", "c d a", "b"])
    p = init_model(ModelConfig(layers=1, hidden=8, heads=2, ffn_dim=16, adapter_dim=2, vocab_size=len(v)), 0)
    for pooling in ("mean", "first"):
        h = extract_hidden(p, c, pooling=pooling)
        assert h.shape == (3, 8) and h.dtype == np.float32
    with pytest.raises(ValueError):
        extract_hidden(p, c, pooling="max")


def _records():
    return [("s", "ADA_TSA", a) for a in (0.90, 0.91, 0.92)] + \
           [("s", "ADA_FT", a) for a in (0.80, 0.81, 0.79)] + \
           [("t", "ADA_TSA", a) for a in (0.7, 0.7, 0.71)] + \
           [("t", "ADA_FT", a) for a in (0.69, 0.71, 0.7)]


def test_result_table_and_csv():
    table = aggregate_results(_records())
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert rows[0] == ["scheme", "variant", "mean", "std", "seed0", "seed1", "seed2"]
    cell = table.cell("s", "ADA_TSA")
    assert cell.mean == pytest.approx(0.91) and cell.std == pytest.approx(0.01)
    assert table.averages["ADA_FT"] == pytest.approx((0.8 + 0.7) / 2)
    assert rows[-1][0] == "Avg."
    assert table.variants == ["ADA_FT", "ADA_TSA"]


def test_significance_report_matches_scipy():
    table = aggregate_results(_records())
    report = significance_report(table)
    assert len(report) == 2
    for r in report:
        ref = stats.ttest_ind(table.cell(r["scheme"], "ADA_TSA").accuracies,
                              table.cell(r["scheme"], r["variant"]).accuracies, equal_var=False)
        assert r["p"] == pytest.approx(ref.pvalue, abs=1e-9)
        assert r["flag"] == ("‡" if ref.pvalue < 0.01 else "†" if ref.pvalue < 0.05 else "")
    assert "‡" in significance_csv(report)
    assert "np." not in significance_csv(report)
    assert all(type(r["p"]) is float for r in report)
    text = render_table(table, report)
    assert "Ada-TSA" in text and "‡" in text


def test_std_single_seed_is_zero():
    table = aggregate_results([("s", "ADA_FT", 0.5)])
    assert table.cell("s", "ADA_FT").std == 0.0
    assert significance_report(table) == []


@settings(max_examples=25, deadline=None)
@given(st.lists(st.text(alphabet="abcdef", min_size=1, max_size=3), min_size=1, max_size=30),
       st.lists(st.text(alphabet="abcdef", min_size=1, max_size=3), min_size=1, max_size=30),
       st.integers(1, 20))
def test_overlap_symmetric_and_bounded(wa, wb, k):
    a, b = [" ".join(wa)], [" ".join(wb)]
    s = domain_similarity(a, b, k)
    assert 0.0 <= s <= 1.0
    assert s == domain_similarity(b, a, k)
    assert domain_similarity(a, a, k) == 1.0


def test_similarity_json_is_plain_json():
    m = similarity_matrix({"a": ["x y"], "b": ["y z"]}, k=2)
    d = json.loads(m.to_json())
    assert d["domains"] == ["a", "b"] and d["matrix"][0][1] == 0.5

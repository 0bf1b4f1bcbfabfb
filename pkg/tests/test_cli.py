import csv
import json
import os

import numpy as np
import pytest

from adapter_uda.analysis import read_hidden_matrix
from adapter_uda.cli import main

SPEC = {"n_domains": 3, "docs_per_domain": 40, "test_docs_per_domain": 20, "shared_pool_size": 20,
        "domain_pool_size": 20, "cue_words": 4, "seed": 0}
MODEL = {"layers": 1, "hidden": 16, "heads": 2, "ffn_dim": 32, "adapter_dim": 4, "max_len": 32}
PLAN = {"epochs_fusion": 1, "epochs_task": 1, "lr_adapter": 3e-3, "lr_full": 1e-3}


def _json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = _json(root / "spec.in.json", SPEC)
    assert main(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    return root / "data"


def test_gen_data_deterministic(tmp_path, dataset):
    cfg = _json(tmp_path / "s.json", SPEC)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    for dom in ("d0", "d1", "d2"):
        for split in ("train", "dev", "test"):
            rel = os.path.join(dom, f"{split}.tsv")
            assert (tmp_path / "a" / rel).read_bytes() == (dataset / rel).read_bytes()
    assert main(["gen-data", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "d0" / "train.tsv").read_bytes() != (dataset / "d0" / "train.tsv").read_bytes()


def test_gen_data_invalid_spec_writes_nothing(tmp_path):
    cfg = _json(tmp_path / "bad.json", {**SPEC, "shared_fraction": 2.0})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "out")]) == 1
    assert not (tmp_path / "out").exists()
    cfg = _json(tmp_path / "typo.json", {**SPEC, "n_domain": 3})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "out")]) == 1


def test_bad_config_file_is_validation_error(tmp_path):
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["gen-data", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path)]) == 1
    assert main(["gen-data", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 1


def test_missing_config_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["experiment"])
    assert exc.value.code == 2


def test_similarity(tmp_path, dataset):
    assert main(["similarity", "--data", str(dataset), "--k", "50", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "similarity.csv")
    assert rows[0] == ["domain", "d0", "d1", "d2"]
    m = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    assert np.array_equal(m, m.T) and np.all(np.diag(m) == 1.0)
    doc = json.loads((tmp_path / "similarity.json").read_text())
    assert doc["domains"] == ["d0", "d1", "d2"]


def test_similarity_config_rejects_unknown_keys(tmp_path, dataset):
    cfg = _json(tmp_path / "c.json", {"data": str(dataset), "topk": 5})
    assert main(["similarity", "--config", cfg, "--out", str(tmp_path)]) == 1


def _run_cfg(tmp_path, dataset, **extra):
    return _json(tmp_path / "run.json", {"data": {"path": str(dataset)}, "source": "d0", "targets": ["d1", "d2"],
                                         "model": MODEL, "plan": PLAN, **extra})


def test_fusion_finetune_evaluate_pipeline(tmp_path, dataset):
    cfg = _run_cfg(tmp_path, dataset)
    assert main(["pretrain-fusion", "--config", cfg, "--out", str(tmp_path / "fu")]) == 0
    assert main(["finetune", "--config", cfg, "--init", str(tmp_path / "fu" / "fusion.ckpt"),
                 "--out", str(tmp_path / "ft")]) == 0
    metrics = json.loads((tmp_path / "ft" / "metrics.json").read_text())
    assert set(metrics["target_test_accuracy"]) == {"d1", "d2"}
    hist = _rows(tmp_path / "ft" / "history.csv")
    assert [r[0] for r in hist[1:]] == ["task"]

    # the bundle applied to a different head/adapter init reproduces the exporting model
    assert main(["evaluate", "--checkpoint", str(tmp_path / "ft" / "model.ckpt"), "--data", str(dataset),
                 "--domains", "d1", "d2", "--out", str(tmp_path / "e1")]) == 0
    assert main(["evaluate", "--checkpoint", str(tmp_path / "fu" / "fusion.ckpt"),
                 "--bundle", str(tmp_path / "ft" / "bundle.ckpt"), "--data", str(dataset),
                 "--domains", "d1", "d2", "--out", str(tmp_path / "e2")]) == 0
    a, b = _rows(tmp_path / "e1" / "accuracy.csv"), _rows(tmp_path / "e2" / "accuracy.csv")
    assert a == b and a[0] == ["domain", "split", "n", "accuracy"]
    assert {r[0]: float(r[3]) for r in a[1:]} == metrics["target_test_accuracy"]


def test_fusion_rejects_variant_without_fusion(tmp_path, dataset):
    cfg = _run_cfg(tmp_path, dataset, variant="ADA_FT")
    assert main(["pretrain-fusion", "--config", cfg, "--out", str(tmp_path / "x")]) == 1
    assert not (tmp_path / "x").exists()


def test_finetune_unknown_domain_and_plan_key(tmp_path, dataset):
    cfg = _json(tmp_path / "r.json", {"data": {"path": str(dataset)}, "source": "d0", "targets": ["d9"]})
    assert main(["finetune", "--config", cfg, "--out", str(tmp_path / "x")]) == 1
    cfg = _run_cfg(tmp_path, dataset, plan={"learning_rate": 1.0})
    assert main(["finetune", "--config", cfg, "--out", str(tmp_path / "x")]) == 1


def test_bundle_on_wrong_backbone_is_rejected(tmp_path, dataset):
    cfg = _run_cfg(tmp_path, dataset, variant="ADA_FT")
    assert main(["finetune", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    other = _run_cfg(tmp_path, dataset, variant="ADA_FT", plan={**PLAN, "backbone_seed": 7})
    assert main(["finetune", "--config", other, "--out", str(tmp_path / "b")]) == 0
    code = main(["evaluate", "--checkpoint", str(tmp_path / "b" / "model.ckpt"),
                 "--bundle", str(tmp_path / "a" / "bundle.ckpt"), "--data", str(dataset), "--out", str(tmp_path)])
    assert code == 1


def test_corrupted_checkpoint_exit_code(tmp_path, dataset):
    cfg = _run_cfg(tmp_path, dataset, variant="ADA_FT")
    assert main(["finetune", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    ck = tmp_path / "a" / "model.ckpt"
    raw = bytearray(ck.read_bytes())
    raw[100] ^= 0xFF
    ck.write_bytes(bytes(raw))
    assert main(["evaluate", "--checkpoint", str(ck), "--data", str(dataset), "--out", str(tmp_path)]) == 1


def test_project_hidden(tmp_path, dataset):
    cfg = _run_cfg(tmp_path, dataset, variant="ADA_FT")
    assert main(["finetune", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    corpora = [str(dataset / d / "test.tsv") for d in ("d0", "d1")]
    assert main(["project-hidden", "--checkpoint", str(tmp_path / "a" / "model.ckpt"),
                 "--corpus", *corpora, "--label", "tsne", "--out", str(tmp_path / "p")]) == 0
    rows = _rows(tmp_path / "p" / "tsne.csv")
    assert rows[0] == ["domain", "x", "y"]
    assert [r[0] for r in rows[1:]] == ["d0"] * 20 + ["d1"] * 20
    h = read_hidden_matrix(tmp_path / "p" / "hidden_d0.bin")
    assert h.shape == (20, MODEL["hidden"])
    ex = json.loads((tmp_path / "p" / "tsne.explained.json").read_text())["explained_variance"]
    assert len(ex) == 2 and ex[0] >= ex[1] >= 0


def test_project_hidden_duplicate_names(tmp_path, dataset):
    cfg = _run_cfg(tmp_path, dataset, variant="ADA_FT")
    assert main(["finetune", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    p = str(dataset / "d0" / "test.tsv")
    assert main(["project-hidden", "--checkpoint", str(tmp_path / "a" / "model.ckpt"),
                 "--corpus", f"x={p}", f"x={p}", "--out", str(tmp_path / "p")]) == 1


def _exp_cfg(tmp_path, dataset, **extra):
    return _json(tmp_path / "exp.json", {
        "data": {"path": str(dataset)},
        "schemes": [{"source": "d0", "targets": ["d1", "d2"]}],
        "variants": ["ADA_TSA", "FULL_FT"], "seeds": [0, 1],
        "model": MODEL, "plan": PLAN, **extra,
    })


def test_experiment_outputs_and_determinism(tmp_path, dataset):
    cfg = _exp_cfg(tmp_path, dataset)
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "r1")]) == 0
    assert main(["experiment", "--config", cfg, "--jobs", "2", "--out", str(tmp_path / "r2")]) == 0
    for name in ("results.csv", "significance.csv", "runs.csv", "table.txt"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes(), name
    res = _rows(tmp_path / "r1" / "results.csv")
    assert res[0] == ["scheme", "variant", "mean", "std", "seed0", "seed1"]
    manifest = json.loads((tmp_path / "r1" / "manifest.json").read_text())
    assert manifest["failed"] == [] and len(manifest["runs"]) == 4
    for run in manifest["runs"]:
        for rel in run["files"].values():
            assert not os.path.isabs(rel) and (tmp_path / "r1" / rel).exists()
    assert (tmp_path / "r1" / "runs" / "d0_to_d1+d2" / "ADA_TSA" / "seed0" / "bundle.ckpt").exists()
    assert (tmp_path / "r1" / "runs" / "d0_to_d1+d2" / "FULL_FT" / "seed1" / "model.ckpt").exists()


def test_experiment_rejects_unknown_keys_before_training(tmp_path, dataset):
    cfg = _exp_cfg(tmp_path, dataset, epochs=3)
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "r")]) == 1
    assert not (tmp_path / "r").exists()
    cfg = _exp_cfg(tmp_path, dataset, variants=["LORA"])
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "r")]) == 1

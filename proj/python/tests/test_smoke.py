import json

import numpy as np
import pytest

import semtok

SMALL_ENCODER = {"d_model": 16, "d_ff": 32, "n_layers": 1, "n_heads": 2, "embed_dim": 16}


def test_version():
    assert semtok.version().startswith("semtok ")


def test_weight_table_law():
    assert semtok.weight_table([0.0] * 8) == pytest.approx(list(range(1, 9)), abs=0)
    w = semtok.weight_table([0.0, 0.3, -1.0, 2.0, 0.1, -0.5, 0.0, 1.0])
    assert all(b > a for a, b in zip(w, w[1:]))
    with pytest.raises(ValueError):
        semtok.weight_table([0.0] * 7)


def test_person_beside_tree_ranks():
    record = {
        "sample_id": "person-beside-tree",
        "d": 1,
        "l": [0.0],
        "V": [[1.0], [2.0]],
        "U": [[3.0]],
        "E": [[0, 1, 0]],
        "N": {},
        "caption": [2],
    }
    ranks = semtok.build_ranks(record, 5)
    assert ranks.shape == (5, 5)
    person, tree, beside = 1, 2, 3
    assert ranks[person, beside] == 6 and ranks[tree, beside] == 6
    assert ranks[beside, person] == 5 and ranks[beside, tree] == 5
    assert ranks[person, tree] == 7
    assert ranks[4].sum() == 0 and ranks[:, 4].sum() == 0


def test_invalid_record_raises():
    with pytest.raises(ValueError):
        semtok.build_ranks({"sample_id": "x", "d": 1, "l": [0.0], "V": [[1.0]], "U": [], "E": [[0, 3, 0]],
                            "N": {}, "caption": [2]}, 4)


def test_generate_is_deterministic():
    a = semtok.generate(6, seed=3)
    b = semtok.generate(6, seed=3)
    assert a == b
    assert [r["sample_id"] for r in a] == [f"scene-{i:06d}" for i in range(6)]
    assert semtok.generate(6, seed=4) != a


def test_pipeline(tmp_path):
    data = tmp_path / "data"
    code, out, err = semtok.run_cli("gen-data", "-o", data, "--train-scenes", 16, "--val-scenes", 8)
    assert code == 0, err
    assert json.loads(out)["train"]["scenes"] == 16

    result = semtok.train(data / "train.jsonl", tmp_path / "run",
                          {"epochs": 2, "batch_size": 8, "warmup_epochs": 1}, SMALL_ENCODER)
    assert result["steps"] == 4
    assert [r["event"] for r in result["log"]].count("epoch") == 2
    assert np.isfinite(result["last_loss"])

    images, texts = semtok.embed(result["checkpoint"], data / "val.jsonl")
    assert images.shape == (8, 16) and texts.shape == (8, 16)
    np.testing.assert_allclose(np.linalg.norm(images, axis=1), 1.0, atol=1e-12)
    report = semtok.similarity_report(images, texts)
    assert 0.0 <= report["t2i_top1"] <= 1.0
    assert semtok.similarity_report(images, images)["t2i_top1"] == 1.0

    code, out, _ = semtok.run_cli("eval", "--checkpoint", result["checkpoint"], "--corpus", data / "val.jsonl",
                                  "-o", tmp_path / "eval")
    assert code == 0
    assert json.loads(out)["retrieval"]["t2i_top1"] == pytest.approx(report["t2i_top1"])


def test_training_errors_map_to_python(tmp_path):
    with pytest.raises(ValueError):
        semtok.train(tmp_path / "missing.jsonl", tmp_path / "run", {"batch_size": 1})
    code, _, err = semtok.run_cli("train", "-o", tmp_path / "x", "--set", "train.momentum=1")
    assert code != 0 and "momentum" in err

import json

import numpy as np
import pytest

from graphfpn import cli
from graphfpn.pipeline import TrainConfig
from graphfpn.segmentation import save_ppm
from graphfpn.synthetic import gen_dataset


@pytest.fixture(scope="module")
def micro_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "micro.json"
    path.write_text(json.dumps(TrainConfig.micro().to_json()))
    return str(path)


@pytest.fixture(scope="module")
def trained_ckpt(tmp_path_factory, micro_config_path):
    out = tmp_path_factory.mktemp("ckpt") / "model.bin"
    rc = cli.main(["train", "--config", micro_config_path, "--out", str(out)])
    assert rc == 0
    return str(out)


def test_segment_and_graph_commands(tmp_path):
    img = gen_dataset(0, 1, 16)[0].image
    ppm = tmp_path / "img.ppm"
    save_ppm(img, ppm)
    hjson = tmp_path / "h.json"
    assert cli.main(["segment", str(ppm), "--n", "16", "--out", str(hjson)]) == 0
    doc = json.loads(hjson.read_text())
    assert [lvl["count"] for lvl in doc["levels"]] == [16, 4, 1, 1, 1]

    gjson = tmp_path / "g.json"
    assert cli.main(["graph", str(hjson), "--out", str(gjson)]) == 0
    gdoc = json.loads(gjson.read_text())
    assert gdoc["level_counts"] == [16, 4, 1, 1, 1]
    assert all(e["kept"] for e in gdoc["hierarchical_edges"])


def test_dataset_and_eval_commands(tmp_path, trained_ckpt):
    data_dir = tmp_path / "data"
    assert cli.main(
        ["dataset", "--seed", "5", "--n", "2", "--size", "16", "--out", str(data_dir)]
    ) == 0
    assert len(list(data_dir.glob("*.ppm"))) == 2
    assert cli.main(["eval", "--ckpt", trained_ckpt, "--data", str(data_dir)]) == 0


def test_forward_command(tmp_path, trained_ckpt):
    img = gen_dataset(9, 1, 16)[0].image
    ppm = tmp_path / "img.ppm"
    save_ppm(img, ppm)
    out = tmp_path / "fwd.json"
    rc = cli.main(
        ["forward", str(ppm), "--ckpt", trained_ckpt, "--out", str(out), "--dump-features"]
    )
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["level_counts"][0] == len(doc["predictions"])
    assert len(doc["fused_pyramid"]) == 5


def test_train_seed_env_override(tmp_path, micro_config_path, monkeypatch):
    out_a = tmp_path / "a.bin"
    out_b = tmp_path / "b.bin"
    monkeypatch.setenv(cli.SEED_ENV, "11")
    assert cli.main(["train", "--config", micro_config_path, "--out", str(out_a)]) == 0
    monkeypatch.delenv(cli.SEED_ENV)
    assert cli.main(["train", "--config", micro_config_path, "--seed", "11", "--out", str(out_b)]) == 0
    assert out_a.read_bytes() == out_b.read_bytes()


def test_gradcheck_command_micro():
    assert cli.main(["gradcheck", "--level", "micro"]) == 0

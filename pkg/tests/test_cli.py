import json

import pytest

from pathinfer.cli import run
from pathinfer.config import RunConfig
from pathinfer.errors import ConfigError

CONFIG = """\
# tiny planar run
dataset = planar
n_points = 80        # points in the unit square
knn = 5
n_trajectories = 24
observations_per_traj = 3
horizon = 2
epochs = 2
lr = 0.01
mlp_hidden = 8, 8
gcn_dim = 4
num_observations = 3
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(CONFIG)
    return p


def pipeline(tmp_path, cfg_file, tag):
    data, out = tmp_path / f"data_{tag}", tmp_path / f"out_{tag}"
    common = ["--config", str(cfg_file), "--data-dir", str(data), "--out-dir", str(out)]
    assert run(["generate", *common]) == 0
    assert run(["train", *common]) == 0
    assert run(["evaluate", *common]) == 0
    return data, out, common


def test_end_to_end_and_determinism(tmp_path, cfg_file, capsys):
    data_a, out_a, common = pipeline(tmp_path, cfg_file, "a")
    data_b, out_b, _ = pipeline(tmp_path, cfg_file, "b")
    for name in ("model.ckpt", "metrics.json", "loss_curve.tsv"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    for name in ("train.cfg", "evaluate.cfg"):
        assert (out_a / name).exists()
    assert (data_a / "generate.cfg").exists()
    metrics = json.loads((out_a / "metrics.json").read_text())
    assert set(metrics) == {"model", "uniform", "uniform_nb", "reweighted"}
    assert "choice acc %" in capsys.readouterr().out

    pred = tmp_path / "pred.jsonl"
    assert run(["predict", *common, "--top", "3", "--output", str(pred)]) == 0
    rows = [json.loads(line) for line in pred.read_text().splitlines()]
    assert rows
    for t in {r["trajectory"] for r in rows}:
        lls = [r["log_likelihood"] for r in rows if r["trajectory"] == t]
        assert len(lls) <= 3 and lls == sorted(lls, reverse=True)

    draws = tmp_path / "draws.jsonl"
    assert run(["sample", *common, "--n", "4", "--output", str(draws)]) == 0
    assert len(draws.read_text().splitlines()) % 4 == 0

    assert run(["export-latent", *common, "--index", "1"]) == 0
    edges = (out_a / "latent_1.edges.tsv").read_text().splitlines()
    assert edges[0] == "edge_id\tsrc\tdst\tweight"
    marginal = (out_a / "latent_1.marginal.tsv").read_text().splitlines()
    assert marginal[0] == "node_id\tmass" and len(marginal) == 81


def test_unknown_flag_exits_1(capsys):
    assert run(["train", "--no-such-flag"]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_subcommand_exits_1():
    assert run(["fly"]) == 1


def test_unknown_config_key_exits_1(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("epochz = 3\n")
    assert run(["generate", "--config", str(p)]) == 1


def test_missing_data_exits_2(tmp_path):
    assert run(["train", "--data-dir", str(tmp_path / "nothing")]) == 2


def test_non_finite_loss_exits_3(tmp_path, capsys):
    d = tmp_path / "d"
    d.mkdir()
    (d / "nodes.tsv").write_text("id\tf0\n0\tnan\n1\t1.0\n2\t1.0\n")
    (d / "edges.tsv").write_text("src\tdst\n0\t1\n1\t0\n1\t2\n2\t1\n0\t2\n2\t0\n")
    (d / "train.jsonl").write_text('{"horizon": 1, "observations": [[[0, 1.0]]], '
                                   '"suffix": [1], "target": [[1, 1.0]]}\n')
    assert run(["train", "--data-dir", str(d), "--out-dir", str(tmp_path / "o"),
                "--set", "epochs=1"]) == 3
    assert "non-finite" in capsys.readouterr().err


def test_config_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\n\nlr = 0.5  # trailing\nmlp_hidden = 4, 5\nencoder_kind = nonparametric_diffusion\n")
    cfg = RunConfig.from_file(p)
    assert cfg["lr"] == 0.5 and cfg["mlp_hidden"] == [4, 5]
    assert cfg.section("train").encoder.encoder_kind == "nonparametric_diffusion"
    cfg.dump(tmp_path / "out.cfg")
    again = RunConfig.from_file(tmp_path / "out.cfg")
    assert again.as_dict() == cfg.as_dict()
    with pytest.raises(ConfigError):
        RunConfig({"lr": "fast"})
    p.write_text("just words\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(p)

import csv
import json

import pytest

from lora_ntk.cli import main
from lora_ntk.io import read_dataset
from lora_ntk.landscape import toy_instance


def run(tmp_path, *argv):
    return main([*argv, "--out-dir", str(tmp_path)])


def summary(tmp_path, cmd):
    return json.loads((tmp_path / f"{cmd.replace('-', '_')}_summary.json").read_text())


def test_toy_c_rank1_exit_codes(tmp_path):
    assert run(tmp_path, "toy", "--which", "c", "--rank", "1") == 2
    s = summary(tmp_path, "toy")
    assert s["verdict"] == "fail" and s["seed"] == 0
    assert run(tmp_path, "toy", "--which", "c", "--rank", "1", "--check", "floor") == 0


def test_toy_c_rank2_passes_and_writes_trace(tmp_path):
    assert run(tmp_path, "toy", "--which", "c", "--rank", "2") == 0
    rows = list(csv.reader((tmp_path / "toy_trace.csv").open()))
    assert rows[0] == ["seed", "epoch", "factored_risk", "regularized_risk", "grad_norm"]
    assert len(rows) > 2


def test_gen_data_and_train(tmp_path):
    data = tmp_path / "d.lntk"
    assert main(["gen-data", "--out", str(data), "--blocks", "3x3", "--samples", "3", "--outputs", "2",
                 "--loss", "cross_entropy", "--seed", "4", "--out-dir", str(tmp_path)]) == 0
    d = read_dataset(data)
    assert (d.n_samples, d.output_dim, d.shape.blocks) == (3, 2, ((3, 3),))
    assert run(tmp_path, "train-prox", "--data", str(data), "--lambda", "0.05") == 0
    assert run(tmp_path, "reduce-rank", "--data", str(data), "--lambda", "0.05") == 0
    assert run(tmp_path, "train-lora", "--data", str(data), "--lambda", "0.05", "--epochs", "50",
               "--step-size", "0.5") in (0, 2)
    assert "final_losses" in summary(tmp_path, "train-lora")


def test_gen_data_toy_file(tmp_path):
    data = tmp_path / "c.lntk"
    assert main(["gen-data", "--toy", "c", "--out", str(data), "--out-dir", str(tmp_path)]) == 0
    assert data.stat().st_size == 191
    assert read_dataset(data).labels.ravel().tolist() == toy_instance("c").labels.ravel().tolist()


def test_landscape_rank_deficient_verdict(tmp_path):
    code = run(tmp_path, "landscape", "--blocks", "3x3", "--samples", "2", "--outputs", "1", "--runs", "3")
    s = summary(tmp_path, "landscape")
    assert code == 0 and s["verdict"] == "pass"
    text = json.dumps(s)
    assert "sosp" in text


def test_gen_bound_prints_lambda(tmp_path, capsys):
    code = run(tmp_path, "gen-bound", "--outputs", "1", "--samples", "100", "--feature-bound", "1",
               "--eta", "0.01831563888873418", "--slack-eps", "0")
    out = capsys.readouterr().out
    assert code == 0
    assert "lambda = 1.6" in out
    assert "excess_risk_bound = 3.2" in out


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("rank = 1\nseed = 3\n")
    assert run(tmp_path, "toy", "--which", "a", "--config", str(cfg), "--seed", "5") == 0
    s = summary(tmp_path, "toy")
    assert s["config"]["rank"] == 1 and s["seed"] == 5


@pytest.mark.parametrize(
    "argv",
    [
        ["toy"],
        ["toy", "--which", "z"],
        ["nope"],
        ["train-lora", "--data", "/nonexistent/file.lntk"],
    ],
)
def test_usage_errors(tmp_path, argv):
    try:
        code = run(tmp_path, *argv)
    except SystemExit as e:
        code = e.code
    assert code == 1


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 1\n")
    assert run(tmp_path, "toy", "--which", "a", "--config", str(cfg)) == 1


def test_report_verify(tmp_path, capsys):
    assert run(tmp_path, "toy", "--which", "b", "--rank", "1") == 0
    path = tmp_path / "toy_summary.json"
    assert main(["report", "--verify", str(path)]) == 0
    assert "reproduced" in capsys.readouterr().out

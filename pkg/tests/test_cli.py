import json
import os

import pytest

from fedcausal import cli


def write_config(tmp_path, estimator, dgp, train=None, kernel=None, name="cfg.json"):
    cfg = {"dgp": dgp, "estimator": estimator, "train": train or {"max_rounds": 3, "learning_rate": 0.01, "optimizer": "adam"},
           "kernel": kernel or {}, "eval": {"fractions": [0.5, 0.5, 0.0], "split_seed": 1}}
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def pipeline(cfg, runs, capsys, transport="inproc"):
    assert cli.main(["gen", "--config", cfg, "--runs", runs]) == 0
    root = capsys.readouterr().out.strip()
    assert cli.main(["train", "--config", cfg, "--runs", runs, "--transport", transport]) == 0
    assert cli.main(["estimate", "--config", cfg, "--runs", runs]) == 0
    assert cli.main(["eval", "--config", cfg, "--runs", runs]) == 0
    out = capsys.readouterr().out
    return root, out


CASES = {
    "fedci": ({"name": "fedci", "n_mc": 2}, {"n": 12, "m": 2, "dx": 3}),
    "causalrff": ({"name": "causalrff", "N": 10, "burn_in": 5, "aux": {"B": 6}}, {"n": 12, "m": 2, "dx": 4}),
    "causalfi": ({"name": "causalfi", "hidden": [4], "K": 3, "N": 2, "M": 2, "pseudo_count": 10,
                  "surrogate": {"hidden": [4]}}, {"n": 12, "m": 2, "dx": 2, "d": 2}),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_full_pipeline(tmp_path, capsys, name):
    est, dgp = CASES[name]
    kernel = {"B": 6} if name == "causalrff" else None
    cfg = write_config(tmp_path, est, dgp, kernel=kernel)
    root, out = pipeline(cfg, str(tmp_path / "runs"), capsys)
    assert "sqrt_pehe=" in out
    manifest = json.loads(open(os.path.join(root, "manifest.json")).read())
    assert manifest["config_hash"] == os.path.basename(root)
    assert os.path.exists(os.path.join(root, "train", "rounds.csv"))
    assert os.path.exists(os.path.join(root, "metrics", "report.csv"))
    if name == "causalrff":
        assert set(manifest["bounds"]) == {"latent", "treatment", "outcome"}
    if name == "causalfi":
        assert os.path.exists(os.path.join(root, "estimates", "effect_samples.json"))


def test_fedci_without_inter_dependency(tmp_path, capsys):
    est, dgp = CASES["fedci"]
    cfg = write_config(tmp_path, est, dgp)
    runs = str(tmp_path / "runs")
    cli.main(["gen", "--config", cfg, "--runs", runs])
    assert cli.main(["train", "--config", cfg, "--runs", runs, "--no-inter-dependency"]) == 0
    assert cli.main(["estimate", "--config", cfg, "--runs", runs, "--no-inter-dependency"]) == 0
    assert cli.main(["eval", "--config", cfg, "--runs", runs]) == 0
    assert "fedci_no_inter_dependency" in capsys.readouterr().out


def test_socket_transport_matches_inproc(tmp_path, capsys):
    est, dgp = CASES["fedci"]
    a = write_config(tmp_path, est, dgp)
    root_a, _ = pipeline(a, str(tmp_path / "inproc"), capsys)
    root_b, _ = pipeline(a, str(tmp_path / "socket"), capsys, transport="socket")
    pa = open(os.path.join(root_a, "train", "params.json")).read()
    pb = open(os.path.join(root_b, "train", "params.json")).read()
    assert pa == pb


def test_seed_from_environment_changes_run(tmp_path, capsys, monkeypatch):
    est, dgp = CASES["fedci"]
    cfg = write_config(tmp_path, est, dgp)
    runs = str(tmp_path / "runs")
    cli.main(["gen", "--config", cfg, "--runs", runs])
    first = capsys.readouterr().out.strip()
    monkeypatch.setenv("FEDCAUSAL_SEED", "9")
    cli.main(["gen", "--config", cfg, "--runs", runs])
    assert capsys.readouterr().out.strip() != first
    monkeypatch.setenv("FEDCAUSAL_SEED", "nine")
    assert cli.main(["gen", "--config", cfg, "--runs", runs]) == cli.EXIT_CONFIG


@pytest.mark.parametrize("body", [
    "not json",
    json.dumps({"extra": {}}),
    json.dumps({"estimator": {"name": "lasso"}}),
    json.dumps({"dgp": {"colour": 1}}),
    json.dumps({"train": {"max_rounds": 0}}),
    json.dumps({"train": {"optimizer": "rmsprop"}}),
])
def test_config_errors_exit_2(tmp_path, body):
    p = tmp_path / "bad.json"
    p.write_text(body)
    runs = str(tmp_path / "runs")
    code = cli.main(["gen", "--config", str(p), "--runs", runs])
    if code == 0:
        code = cli.main(["train", "--config", str(p), "--runs", runs])
    assert code == cli.EXIT_CONFIG


def test_train_before_gen_is_config_error(tmp_path):
    cfg = write_config(tmp_path, *CASES["fedci"])
    assert cli.main(["train", "--config", cfg, "--runs", str(tmp_path / "runs")]) == cli.EXIT_CONFIG


def test_worker_without_coordinator_is_protocol_error(tmp_path, capsys):
    est, dgp = CASES["fedci"]
    cfg = write_config(tmp_path, est, dgp)
    runs = str(tmp_path / "runs")
    cli.main(["gen", "--config", cfg, "--runs", runs])
    root = capsys.readouterr().out.strip()
    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    code = cli.main(["worker", "--connect", f"127.0.0.1:{port}", "--data", os.path.join(root, "data", "source_1.csv"),
                     "--source-id", "1", "--fractions", "0.5,0.5,0"])
    assert code == cli.EXIT_PROTOCOL


def test_divergent_training_is_numerical_failure(tmp_path, capsys):
    est, dgp = CASES["causalfi"]
    cfg = write_config(tmp_path, est, dgp, train={"max_rounds": 3, "learning_rate": 0.01, "optimizer": "sgd"})
    runs = str(tmp_path / "runs")
    cli.main(["gen", "--config", cfg, "--runs", runs])
    assert cli.main(["train", "--config", cfg, "--runs", runs]) == cli.EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_empty_training_split_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, *CASES["fedci"])
    runs = str(tmp_path / "runs")
    cli.main(["gen", "--config", cfg, "--runs", runs])
    root = capsys.readouterr().out.strip()
    code = cli.main(["worker", "--connect", "127.0.0.1:1", "--data", os.path.join(root, "data", "source_1.csv"),
                     "--source-id", "1", "--fractions", "0.01,0.99,0"])
    assert code == cli.EXIT_CONFIG


def test_selftest(capsys):
    assert cli.main(["selftest"]) == 0
    assert "selftest ok" in capsys.readouterr().out

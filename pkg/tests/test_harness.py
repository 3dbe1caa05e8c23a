import json
import math

import numpy as np
import pytest

from flipsim import analytic, cli, harness
from flipsim.datasets import make_synthetic, save_csv
from flipsim.formats import IntFormat, encode_int, encode_int_codes
from flipsim.modelio import save_model
from flipsim.netsim import DenseLayer, MLPNetwork
from flipsim.trainer import TrainConfig, train_mlp


def write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def model_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("m")
    train, _ = harness.load_dataset("blobs:n_per_class=40")
    net = train_mlp(train, TrainConfig(width=8, epochs=5, target="aq8", learning_rate=0.01))
    path = d / "net.json"
    save_model(net, path)
    return str(path)


def test_unknown_key_is_an_error(tmp_path):
    cfg = write(tmp_path / "c.ini", "[sweep]\nmodel = a\ndataset = blobs\ntrails = 3\n")
    with pytest.raises(harness.ConfigError, match="trails"):
        harness.read_config(cfg, "sweep")
    cfg = write(tmp_path / "d.ini", "[sweeep]\nmodel = a\n")
    with pytest.raises(harness.ConfigError):
        harness.read_config(cfg, "sweep")


def test_p_grid_parsing():
    assert harness.parse_p_grid("0, 0.5,1") == [0.0, 0.5, 1.0]
    assert harness.parse_p_grid(None) == list(harness.SWEEP_GRID)
    assert harness.parse_p_grid("fine") == list(harness.THRESHOLD_GRID)
    with pytest.raises(harness.ConfigError):
        harness.parse_p_grid("0.1, 2")
    with pytest.raises(harness.ConfigError):
        harness.parse_p_grid("x")


def test_half_accuracy_threshold():
    assert harness.half_accuracy_threshold([0.1, 0.01, 0.2], [0.6, 0.9, 0.3], 1.0) == 0.2
    assert harness.half_accuracy_threshold([0.1], [0.9], 1.0) == math.inf


def test_sweep_at_zero_has_no_spread(tmp_path, model_file):
    cfg = write(tmp_path / "c.ini",
                f"[sweep]\nmodel = {model_file}\ndataset = blobs:n_per_class=40\n"
                "p_grid = 0\ntrials = 4\n")
    rows = harness.cmd_sweep(cfg, out=tmp_path / "o.csv")
    assert len(rows) == 1 and rows[0].std_accuracy == 0.0 and rows[0].mean_mse == 0.0
    assert rows[0].flippable_bits > 0
    assert harness.read_csv(tmp_path / "o.csv") == rows


def test_sweep_output_independent_of_threads(tmp_path, model_file):
    cfg = write(tmp_path / "c.ini",
                f"[sweep]\nmodel = {model_file}\ndataset = blobs:n_per_class=40\n"
                "p_grid = 0.001, 0.01, 0.1\ntrials = 16\nseed = 5\n")
    harness.cmd_sweep(cfg, out=tmp_path / "a.csv", threads=1)
    harness.cmd_sweep(cfg, out=tmp_path / "b.csv", threads=4)
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0] == harness.CSV_VERSION
    assert lines[1] == ",".join(harness.COLUMNS)


def test_analyze_single_int_neuron():
    fmt = IntFormat(4)
    w = [[3, -2, 0]]
    net = MLPNetwork([DenseLayer(encode_int_codes(w, fmt), fmt, bias=False)], 1)
    x = np.array([[0.5, -1.0, 2.0]])
    rows = harness.analyze_model(net, x, [0.0, 0.01, 0.1, 0.3])
    neuron = analytic.NeuronInstance(x[0], [encode_int(v, fmt) for v in w[0]], fmt)
    layer_rows = [r for r in rows if r.layer == "0"]
    assert layer_rows[0].predicted_mse == 0.0
    for r in layer_rows:
        assert r.predicted_mse == pytest.approx(analytic.int_neuron_mse(neuron, r.p).total,
                                                rel=1e-12, abs=0)
    vals = [r.predicted_mse for r in layer_rows]
    assert vals == sorted(vals)


def test_analyze_rejects_lut(tmp_path):
    from flipsim.recovery import antisymmetric_network
    with pytest.raises(harness.ConfigError):
        harness.analyze_model(antisymmetric_network(2, [4], 2, 2), np.zeros((1, 2)), [0.1])


def test_csv_dataset_is_accepted(tmp_path, model_file):
    save_csv(make_synthetic("blobs", 10, 4, seed=9), tmp_path / "d.csv")
    train, test = harness.load_dataset(str(tmp_path / "d.csv"))
    assert len(train) == len(test) == 40
    with pytest.raises(harness.ConfigError):
        harness.load_dataset("no-such-file.csv")
    with pytest.raises(harness.ConfigError):
        harness.load_dataset("blobs:colour=red")


def test_matched_dense_width():
    w = harness.matched_dense_width(1000, 2, 4, 3)
    census = lambda h: (2 + 1) * h + (h + 1) * h + (h + 1) * 4
    assert all(abs(census(w) - 1000) <= abs(census(v) - 1000) for v in range(1, 200))


def test_ablation_flags_divergence_and_continues(tmp_path, monkeypatch):
    real = harness.train_model

    def flaky(train_set, config, *a, **k):
        if config.width == 4:
            from flipsim.trainer import TrainingDivergedError
            raise TrainingDivergedError("boom")
        return real(train_set, config, *a, **k)

    monkeypatch.setattr(harness, "train_model", flaky)
    points = harness.cmd_ablate("width", ["4", "8"], "blobs:n_per_class=30", 0, 3,
                                [0.0, 0.1], out=str(tmp_path / "a.csv"))
    status = {p.value: p.status for p in points}
    assert status["4"] != "ok" and status["8"] == "ok"
    assert (tmp_path / "a.csv.summary.csv").exists()


# command line ----------------------------------------------------------------------


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_oracle(capsys):
    code, out, _ = run(["oracle"], capsys)
    assert code == 0
    assert out.count("PASS") == len(out.strip().splitlines()) >= 7


def test_cli_error_line(tmp_path, capsys):
    cfg = write(tmp_path / "c.ini", "[sweep]\nmodel = x\ndataset = blobs\nbogus = 1\n")
    code, _, err = run(["sweep", "--config", cfg], capsys)
    assert code == 2
    msg = json.loads(err.strip().splitlines()[-1])
    assert msg["status"] == "error" and msg["command"] == "sweep"
    code, _, err = run(["sweep", "--config", str(tmp_path / "missing.ini")], capsys)
    assert code == 2


def test_cli_train_then_sweep_and_analyze(tmp_path, capsys):
    cfg = write(tmp_path / "t.ini", "[train]\ndataset = blobs:n_per_class=30\n"
                                    "epochs = 3\nwidth = 8\ndepth = 2\n")
    model = tmp_path / "m.json"
    code, out, _ = run(["train", "--config", cfg, "--out", str(model), "--target", "aq8"], capsys)
    assert code == 0 and json.loads(out)["format"] == "aq-int8"
    scfg = write(tmp_path / "s.ini", f"[sweep]\nmodel = {model}\ndataset = blobs:n_per_class=30\n"
                                     "p_grid = 0, 0.01\n")
    code, out, _ = run(["sweep", "--config", scfg, "--trials", "3", "--threads", "2"], capsys)
    assert code == 0 and out.startswith(harness.CSV_VERSION)
    acfg = write(tmp_path / "a.ini", f"[analyze]\nmodel = {model}\ndataset = blobs:n_per_class=30\n"
                                     "p_grid = 0, 0.01\n")
    code, out, _ = run(["analyze", "--config", acfg, "--out", str(tmp_path / "a.csv")], capsys)
    assert code == 0
    text = (tmp_path / "a.csv").read_text().splitlines()
    zero = [l for l in text[2:] if l.split(",")[2] == "0.0"]
    assert zero and all(float(l.split(",")[3]) == 0.0 for l in zero)


def test_cli_recovery_constructed(tmp_path, capsys):
    code, out, err = run(["recovery", "--depths", "2,3", "--mode", "constructed",
                          "--trials", "2", "--dataset", "blobs:n_per_class=20"], capsys)
    assert code == 0
    rows = [l.split(",") for l in out.splitlines()[2:]]
    p1 = {r[0]: float(r[4]) for r in rows if float(r[2]) == 1.0}
    assert len(p1) == 2
    reports = [json.loads(l) for l in err.splitlines()]
    assert [r["depth"] for r in reports] == [2, 3]


def test_cli_rejects_bad_counts(capsys):
    code, _, err = run(["oracle", "--trials", "0"], capsys)
    assert code == 2 and "trials" in err

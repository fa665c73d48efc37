import csv
import json

import numpy as np
import pytest

from dcgst.cli import SUMMARY_HEADER, STAGES_HEADER, main, parse_config, parse_seeds, run_experiment
from dcgst.graphdata import save_graph
from dcgst.synthetic import make_sbm

FAST_FLAGS = ["--max-stages", "2", "--q-steps", "10", "--hidden", "8", "--m", "4", "--e", "8"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("sbm_small")
    save_graph(make_sbm(n=80, feature_dim=40, topic_size=8, signal=0.3, seed=2), root)
    return root


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_parse_example(dataset):
    spec = parse_config(["--dataset", str(dataset), "--label-rate", "0.02", "--method", "dcgst", "--bias", "ppr",
                         "--seeds", "0..9"])
    assert spec.seeds == list(range(10))
    assert spec.split_mode == "ppr_bias" and spec.method == "dcgst" and spec.label_rate == 0.02
    cfg = spec.train_config(0)
    assert (cfg.alpha, cfg.beta, cfg.gamma) == (8.0, 0.3, 0.1)
    assert (cfg.lr, cfg.l2, cfg.lam, cfg.tau) == (0.01, 5e-4, 0.5, 1.2)


def test_explicit_cora_weights_match_preset(dataset):
    explicit = parse_config(["--dataset", str(dataset), "--alpha", "8", "--beta", "0.3", "--gamma", "0.1"])
    implicit = parse_config(["--dataset", str(dataset)])
    assert explicit.train_config(0) == implicit.train_config(0)


def test_citeseer_preset_from_directory_name(tmp_path):
    spec = parse_config(["--dataset", str(tmp_path / "citeseer_export")])
    assert (spec.train_config(0).alpha, spec.train_config(0).gamma) == (18.0, 0.4)


@pytest.mark.parametrize("argv", [
    ["--label-rate", "0.9"],
    ["--label-rate", "0"],
    ["--method", "gat"],
    ["--bogus-flag", "1"],
    ["--seeds", "5..2"],
])
def test_bad_input_exits_with_usage_error(dataset, argv):
    with pytest.raises(SystemExit) as exc:
        parse_config(["--dataset", str(dataset)] + argv)
    assert exc.value.code == 2


def test_seed_syntax():
    assert parse_seeds("0..4") == [0, 1, 2, 3, 4]
    assert parse_seeds("1,3,7") == [1, 3, 7]
    assert parse_seeds("0..2,9") == [0, 1, 2, 9]


def test_flags_override_config_file(dataset, tmp_path):
    conf = tmp_path / "run.yaml"
    conf.write_text("alpha: 1.5\nbeta: 0.7\nseeds: 0..2\nmax-stages: 4\n")
    spec = parse_config(["--dataset", str(dataset), "--config", str(conf), "--alpha", "2.5"])
    cfg = spec.train_config(0)
    assert cfg.alpha == 2.5 and cfg.beta == 0.7 and cfg.gamma == 0.1 and cfg.max_stages == 4
    assert spec.seeds == [0, 1, 2]
    as_json = tmp_path / "run.json"
    as_json.write_text(json.dumps({"gamma": 0.9}))
    assert parse_config(["--dataset", str(dataset), "--config", str(as_json)]).train_config(0).gamma == 0.9


def test_unknown_config_key_rejected(dataset, tmp_path):
    conf = tmp_path / "bad.yaml"
    conf.write_text("alhpa: 3\n")
    with pytest.raises(SystemExit):
        parse_config(["--dataset", str(dataset), "--config", str(conf)])


def test_gcn_method_outputs(dataset, tmp_path):
    out = tmp_path / "gcn"
    code = main(["--dataset", str(dataset), "--label-rate", "0.1", "--method", "gcn", "--seeds", "0,1",
                 "--out-dir", str(out)])
    assert code == 0
    stages, summary = _read(out / "stages.csv"), _read(out / "summary.csv")
    assert stages[0] == STAGES_HEADER and summary[0] == SUMMARY_HEADER
    assert [row[2] for row in stages[1:]] == ["0", "0"]
    assert len(summary) == 2 and summary[1][5] == "2"
    accs = [float(r[6]) for r in stages[1:]]
    assert float(summary[1][3]) == pytest.approx(np.mean(accs), abs=1e-5)
    assert float(summary[1][4]) == pytest.approx(np.std(accs, ddof=1), abs=1e-5)


def test_dcgst_two_seeds_and_byte_identical_rerun(dataset, tmp_path):
    argv = ["--dataset", str(dataset), "--label-rate", "0.1", "--bias", "ppr", "--method", "dcgst",
            "--seeds", "0..1"] + FAST_FLAGS
    assert main(argv + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out-dir", str(tmp_path / "b")]) == 0
    for name in ("stages.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = _read(tmp_path / "a" / "stages.csv")[1:]
    groups = {}
    for row in rows:
        groups.setdefault(row[0], []).append(int(row[7]))
    assert len(groups) == 2
    assert all(sizes == sorted(sizes) for sizes in groups.values())


def test_threaded_run_matches_serial(dataset, tmp_path, monkeypatch):
    argv = ["--dataset", str(dataset), "--label-rate", "0.1", "--method", "st", "--seeds", "0..2"] + FAST_FLAGS
    main(argv + ["--out-dir", str(tmp_path / "serial")])
    monkeypatch.setenv("DCGST_THREADS", "3")
    main(argv + ["--out-dir", str(tmp_path / "threaded")])
    assert (tmp_path / "serial" / "stages.csv").read_bytes() == (tmp_path / "threaded" / "stages.csv").read_bytes()


def test_failed_seed_gives_nonzero_exit(dataset, tmp_path):
    (dataset / "splits.json").write_text(json.dumps({"labeled": [], "validation": [0], "test": [1, 2, 3]}))
    try:
        spec = parse_config(["--dataset", str(dataset), "--method", "st", "--out-dir", str(tmp_path)])
        assert run_experiment(spec) == 1
        assert _read(tmp_path / "summary.csv") == [SUMMARY_HEADER]
    finally:
        (dataset / "splits.json").unlink()


def test_timing_flag_records_seconds(dataset, tmp_path):
    main(["--dataset", str(dataset), "--label-rate", "0.1", "--method", "gcn", "--out-dir", str(tmp_path),
          "--timing"])
    assert float(_read(tmp_path / "stages.csv")[1][9]) > 0

import csv
import json
import os
import subprocess
import sys

import pytest

from chestsep import cli
from chestsep.spectral import read_matrix_csv

FAST = ["--max-iter", "20", "--window-length", "256", "--components", "4", "4", "2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "--n", "1", "--seed", "3", "--duration", "5", "--db-size", "2", "--out", str(out)]) == 0
    return out


def separate(dataset, out, *extra):
    mix = dataset / "mixtures" / "mix_000" / "mixture.wav"
    return cli.main(["separate", "--in", str(mix), "--out", str(out), "--heart-db", str(dataset / "heart_db"),
                     "--lung-db", str(dataset / "lung_db"), *FAST, *extra])


def exit_code(argv):
    """Status the console script would return, including argparse exits."""
    try:
        return cli.main(argv)
    except SystemExit as exc:
        return exc.code


def read_bytes(d):
    return {f: (d / f).read_bytes() for f in sorted(os.listdir(d)) if not (d / f).is_dir()}


def test_golden_defaults():
    cfg = cli.RunConfig()
    d = cfg.to_dict()
    assert d["stft"]["window_length"] == 2048
    assert d["stft"]["overlap_fraction"] == 0.75
    assert d["stft"]["window_kind"] == "hann"
    assert d["components"] == [20, 20, 10]
    assert d["nmf"]["sparsity"] == 0.001
    assert d["nmf"]["max_iter"] == 500
    assert d["nmf"]["beta"] == 1.0
    assert d["method"] == "nmcf"
    assert cli.RunConfig(method="supervised").effective_components == (20, 20, 0)


def test_defaults_survive_empty_command_line(monkeypatch):
    monkeypatch.delenv(cli.CONFIG_ENV, raising=False)
    args = cli.build_parser().parse_args(["separate", "--in", "x.wav", "--out", "o"])
    assert cli.resolve_config(args).to_dict() == cli.RunConfig().to_dict()


def test_config_from_env_and_flag_override(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"nmf": {"max_iter": 7, "sparsity": 0.5}, "method": "shah"}))
    monkeypatch.setenv(cli.CONFIG_ENV, str(path))
    parser = cli.build_parser()
    cfg = cli.resolve_config(parser.parse_args(["separate", "--in", "x", "--out", "o"]))
    assert (cfg.nmf.max_iter, cfg.nmf.sparsity, cfg.method) == (7, 0.5, "shah")
    assert cfg.nmf.beta == 1.0
    cfg = cli.resolve_config(parser.parse_args(["separate", "--in", "x", "--out", "o", "--max-iter", "9",
                                                "--method", "cq"]))
    assert (cfg.nmf.max_iter, cfg.nmf.sparsity, cfg.method) == (9, 0.5, "cq")


def test_run_config_round_trip():
    cfg = cli.RunConfig(components=(3, 4, 5), method="semi_supervised")
    assert cli.RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_usage_errors(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv(cli.CONFIG_ENV, raising=False)
    assert exit_code([]) == 1
    assert exit_code(["separate", "--out", "o"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "red"}))
    assert cli.main(["separate", "--in", "x", "--out", "o", "--config", str(bad)]) == 1
    assert "unknown config keys" in capsys.readouterr().err
    assert cli.main(["separate", "--in", "x", "--out", "o", "--overlap", "0.3333"]) == 1
    assert cli.main(["bench", "--data", str(tmp_path), "--out", "o", "--methods", "magic"]) == 1


def test_missing_database_names_manifest(tmp_path, dataset, capsys):
    missing = tmp_path / "nowhere"
    mix = dataset / "mixtures" / "mix_000" / "mixture.wav"
    code = cli.main(["separate", "--in", str(mix), "--out", str(tmp_path / "o"), "--heart-db", str(missing),
                     "--lung-db", str(dataset / "lung_db")])
    assert code == 2
    assert "manifest" in capsys.readouterr().err
    # nmcf without any database is a usage error
    assert cli.main(["separate", "--in", str(mix), "--out", str(tmp_path / "o")]) == 1


def test_missing_input_is_data_error(tmp_path):
    assert cli.main(["separate", "--in", str(tmp_path / "none.wav"), "--out", str(tmp_path / "o"),
                     "--method", "shah"]) == 2


def test_separate_outputs(tmp_path, dataset):
    out = tmp_path / "run"
    assert separate(dataset, out, "--masks") == 0
    files = set(os.listdir(out))
    assert {"heart.wav", "lung.wav", "noise.wav", "cost_trace.csv", "config.json", "run_config.json",
            "factors.npz", "mask_heart.csv"} <= files
    snap = json.loads((out / "run_config.json").read_text())
    assert snap["nmf"]["max_iter"] == 20 and snap["components"] == [4, 4, 2]
    rows = list(csv.reader(open(out / "cost_trace.csv")))
    assert len(rows) == 22  # header, initial cost, 20 iterations


def test_seed_repeat_is_byte_identical(tmp_path, dataset):
    assert separate(dataset, tmp_path / "a", "--seed", "7", "--masks") == 0
    assert separate(dataset, tmp_path / "b", "--seed", "7", "--masks") == 0
    a, b = read_bytes(tmp_path / "a"), read_bytes(tmp_path / "b")
    assert a.keys() == b.keys()
    assert a == b
    assert separate(dataset, tmp_path / "c", "--seed", "8") == 0
    assert (tmp_path / "c" / "heart.wav").read_bytes() != a["heart.wav"]


def test_run_config_snapshot_reproduces_run(tmp_path, dataset):
    assert separate(dataset, tmp_path / "a", "--seed", "5") == 0
    mix = dataset / "mixtures" / "mix_000" / "mixture.wav"
    assert cli.main(["separate", "--in", str(mix), "--out", str(tmp_path / "b"),
                     "--config", str(tmp_path / "a" / "run_config.json")]) == 0
    for stem in ("heart.wav", "lung.wav", "noise.wav", "cost_trace.csv"):
        assert (tmp_path / "a" / stem).read_bytes() == (tmp_path / "b" / stem).read_bytes()


@pytest.mark.parametrize("method", ["shah", "cq", "semi_supervised", "supervised"])
def test_other_methods(tmp_path, dataset, method):
    out = tmp_path / method
    assert separate(dataset, out, "--method", method) == 0
    assert {"heart.wav", "lung.wav"} <= set(os.listdir(out))
    # FAST asks for a noise block, so only the clustering baselines lack a noise stem
    assert ("noise.wav" in os.listdir(out)) == (method not in ("shah", "cq"))


def test_supervised_default_has_no_noise_block(tmp_path, dataset):
    mix = dataset / "mixtures" / "mix_000" / "mixture.wav"
    out = tmp_path / "sup"
    assert cli.main(["separate", "--in", str(mix), "--out", str(out), "--method", "supervised",
                     "--heart-db", str(dataset / "heart_db"), "--lung-db", str(dataset / "lung_db"),
                     "--max-iter", "10", "--window-length", "256"]) == 0
    assert "noise.wav" not in os.listdir(out)
    assert json.loads((out / "run_config.json").read_text())["components"] == [20, 20, 0]


def test_segment(tmp_path, dataset):
    assert separate(dataset, tmp_path / "s", "--method", "shah", "--segment", "1.0", "3.0") == 0
    snap = json.loads((tmp_path / "s" / "config.json").read_text())
    assert snap["segment"] == [1.0, 3.0]


def test_synth_ten_mixtures(tmp_path):
    out = tmp_path / "syn"
    assert cli.main(["synth", "--preset", "default", "--n", "10", "--seed", "1", "--duration", "2",
                     "--db-size", "1", "--out", str(out)]) == 0
    dirs = sorted(os.listdir(out / "mixtures"))
    assert len(dirs) == 10
    for d in dirs:
        assert {"mixture.wav", "heart.wav", "lung.wav", "noise.wav", "manifest.json"} <= set(os.listdir(out / "mixtures" / d))
    m = json.loads((out / "mixtures" / "mix_000" / "manifest.json").read_text())
    assert m["spec"]["seed"] == 1 and 70 <= m["spec"]["heart"]["rate_bpm"] <= 220
    assert (out / "heart_db" / "manifest.json").is_file() and (out / "lung_db" / "manifest.json").is_file()


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["synth", "--n", "1", "--seed", "4", "--duration", "2", "--db-size", "1",
                         "--out", str(tmp_path / name)]) == 0
    for sub in ("mixtures/mix_000", "heart_db", "lung_db"):
        assert read_bytes(tmp_path / "a" / sub) == read_bytes(tmp_path / "b" / sub)


def test_inspect_masks(tmp_path, dataset):
    run = tmp_path / "run"
    assert separate(dataset, run) == 0
    assert cli.main(["inspect", "--run", str(run), "--what", "masks"]) == 0
    out = run / "inspect"
    csvs = sorted(p for p in os.listdir(out) if p.endswith(".csv"))
    assert csvs == ["mask_heart.csv", "mask_lung.csv", "mask_noise.csv"]
    values, freqs = read_matrix_csv(out / "mask_heart.csv")
    assert values.shape[0] == 129 and freqs.size == 129
    assert values.shape[1] > 1
    assert json.loads((out / "blocks.json").read_text())


@pytest.mark.parametrize("what, name", [("dictionary", "dictionary.csv"), ("activations", "activations.csv")])
def test_inspect_factors(tmp_path, dataset, what, name):
    run = tmp_path / "run"
    assert separate(dataset, run) == 0
    assert cli.main(["inspect", "--run", str(run), "--what", what, "--out", str(tmp_path / "x"), "--png"]) == 0
    assert (tmp_path / "x" / name).is_file()
    assert (tmp_path / "x" / name.replace(".csv", ".png")).is_file()


def test_inspect_missing_run(tmp_path):
    assert cli.main(["inspect", "--run", str(tmp_path / "missing")]) == 2


def test_bench_single_mixture(tmp_path, dataset):
    out = tmp_path / "bench"
    assert cli.main(["bench", "--data", str(dataset), "--out", str(out), *FAST]) == 0
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert sorted(r["method"] for r in rows) == ["cq", "mixture", "nmcf", "shah"]
    pv = list(csv.DictReader(open(out / "pvalues.csv")))
    assert pv and all(r["p_value"] == "insufficient-n" for r in pv)
    assert "HR MAE" in (out / "report.txt").read_text()


def test_bench_empty_dataset(tmp_path):
    (tmp_path / "mixtures").mkdir()
    assert cli.main(["bench", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--methods", "shah"]) == 2


def test_console_entry_point_exit_code():
    res = subprocess.run([sys.executable, "-m", "chestsep", "inspect"], capture_output=True, text=True)
    assert res.returncode == 1
    assert "--run" in res.stderr

import csv
import socket
import subprocess
import sys
import time

import pytest

from fedcl.cli import main
from fedcl.config import ExperimentConfig, dump_config
from fedcl.data import load_dataset


def small_config(tmp_path, **extra):
    sections = dict(
        experiment={"rounds": 1, "clients": 2, "batch_size": 16},
        data={"num_classes": 4, "per_class_n": 40, "test_per_class": 10, "dim": 8},
        model={"hidden": (12,), "feature_dim": 4},
        bank={"capacity": 32, "upload_size": 8},
        neighbor={"candidates": 16},
        probe={"linear_epochs": 2, "fn_queries": 20},
        output={"dir": str(tmp_path / "runs")},
    )
    for name, vals in extra.items():
        sections.setdefault(name, {}).update(vals)
    path = tmp_path / "exp.ini"
    path.write_text(dump_config(ExperimentConfig().replace(**sections)))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_default_config(tmp_path):
    out = tmp_path / "gen"
    assert main(["generate", "--out", str(out)]) == 0
    ds = load_dataset(out / "dataset.fcld")
    assert len(ds) == 10 * 200
    first = (out / "dataset.fcld").read_bytes()
    assert main(["generate", "--out", str(out)]) == 0
    assert (out / "dataset.fcld").read_bytes() == first
    assert sum(len(load_dataset(out / f"shard_{c}.fcld")) for c in range(5)) == 2000


def test_generate_bad_output_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["generate", "--out", str(blocker / "sub")]) == 2
    assert str(blocker / "sub") in capsys.readouterr().err


def test_simulate_smoke(tmp_path):
    cfg = small_config(tmp_path)
    start = time.perf_counter()
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert time.perf_counter() - start < 10
    rows = read_rows(tmp_path / "o" / "metrics.csv")
    assert len(rows) == 1
    assert (tmp_path / "o" / "model.npz").exists()
    assert main(["validate-metrics", str(tmp_path / "o" / "metrics.csv"), "--rows", "1"]) == 0
    assert main(["validate-metrics", str(tmp_path / "o" / "metrics.csv"), "--rows", "2"]) == 1


def test_mode_flag_switches_neigh_column(tmp_path):
    cfg = small_config(tmp_path, experiment={"rounds": 2})
    for mode in ("cl", "cl_ff", "cl_ff_nm"):
        out = tmp_path / mode
        assert main(["simulate", "--config", str(cfg), "--mode", mode, "--out", str(out)]) == 0
        neigh = [float(r["neigh_loss"]) for r in read_rows(out / "metrics.csv")]
        assert all(r["mode"] == mode for r in read_rows(out / "metrics.csv"))
        assert any(v > 0 for v in neigh) == (mode == "cl_ff_nm")


def test_missing_required_key(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[experiment]\nrounds = 1\nclients = 2\nmode = cl\n")
    assert main(["simulate", "--config", str(path)]) == 1
    assert "experiment.seed" in capsys.readouterr().err


def test_unknown_key_and_bad_value(tmp_path, capsys):
    path = small_config(tmp_path)
    path.write_text(path.read_text().replace("[bank]", "[bank]\nsize = 3"))
    assert main(["simulate", "--config", str(path)]) == 1
    assert "bank.size" in capsys.readouterr().err


def test_rounds_and_seed_overrides(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["simulate", "--config", str(cfg), "--rounds", "3", "--seed", "5", "--out", str(tmp_path / "o")]) == 0
    assert len(read_rows(tmp_path / "o" / "metrics.csv")) == 3
    assert "seed = 5" in (tmp_path / "o" / "config.ini").read_text()


def test_ablate_single_repeat_has_zero_std(tmp_path, capsys):
    cfg = small_config(tmp_path)
    assert main(["ablate", "--config", str(cfg), "--repeats", "1", "--out", str(tmp_path / "a")]) == 0
    lines = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("mode,knn_mean,knn_std")
    rows = [line.split(",") for line in lines[1:]]
    assert [r[0] for r in rows] == ["cl", "cl_ff", "cl_ff_nm"]
    assert all(float(r[2]) == 0.0 and float(r[5]) == 0.0 for r in rows)
    assert "cl_ff_nm" in capsys.readouterr().out


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _drop_wall(rows):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]


def test_serve_and_clients_as_processes_match_simulate(tmp_path):
    cfg = small_config(tmp_path, experiment={"rounds": 2})
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "sim")]) == 0
    port = str(_free_port())
    base = [sys.executable, "-m", "fedcl"]
    server = subprocess.Popen(base + ["serve", "--config", str(cfg), "--port", port, "--out", str(tmp_path / "wire")],
                              stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    assert "listening" in server.stdout.readline()
    clients = [subprocess.Popen(base + ["client", "--config", str(cfg), "--port", port, "--client-id", str(c),
                                        "--shard", str(tmp_path / "data" / f"shard_{c}.fcld")],
                                stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True) for c in range(2)]
    for proc in clients + [server]:
        out, err = proc.communicate(timeout=120)
        assert proc.returncode == 0, err
    sim = _drop_wall(read_rows(tmp_path / "sim" / "metrics.csv"))
    wire = _drop_wall(read_rows(tmp_path / "wire" / "metrics.csv"))
    assert sim == wire


def test_client_without_server_is_runtime_error(tmp_path, capsys):
    cfg = small_config(tmp_path)
    assert main(["client", "--config", str(cfg), "--port", str(_free_port()), "--client-id", "0"]) == 2
    assert main(["client", "--config", str(cfg), "--client-id", "5"]) == 1


@pytest.mark.parametrize("argv", [[], ["bogus"]])
def test_bad_usage_exits_nonzero(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code != 0

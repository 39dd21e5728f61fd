import csv
import itertools
import json

import numpy as np
import pytest

from lacoot import ot
from lacoot.cli import main
from lacoot.compression import CompressionReport
from lacoot.config import ConfigError, read_config, to_text
from lacoot.net import load_checkpoint
from lacoot.training import Distance

SMALL = ["--dataset", "blobs", "--n-samples", "300", "--n-classes", "3", "--noise", "0.8",
         "--input-dim", "4", "--widths", "4,4,4", "--epochs", "4"]


def write_config(path, **sections):
    path.write_text(to_text({"meta": {"format_version": 1}, **sections}), encoding="utf-8")
    return path


# --- config ----------------------------------------------------------------------------

def test_defaults_are_the_rings_fixture():
    cfg = read_config()
    assert cfg.dataset.kind.value == "rings" and cfg.dataset.n_samples == 2000
    assert cfg.net.widths == (16,) * 7 and cfg.net.lift_activation == "linear"
    assert cfg.train.distance is Distance.MAX_SLICED and cfg.train.distance_cfg.seed is None


def test_config_file_and_override_precedence(tmp_path):
    p = write_config(tmp_path / "c.ini", train={"lambda": 0.5, "seed_mode": "seeded", "n_proj": 7},
                     sweep={"lambda": "0,1"})
    cfg = read_config(p, {"train.lambda": "2.0"})
    assert cfg.train.lam == 2.0
    assert cfg.train.distance_cfg.n_proj == 7 and cfg.train.distance_cfg.seed == 0
    assert cfg.sweep.lam == (0.0, 1.0)


@pytest.mark.parametrize("sections, match", [
    ({"train": {"bogus": 1}}, "unknown key"),
    ({"extra": {"a": 1}}, "unknown section"),
    ({"train": {"distance": "cosine"}}, "cosine"),
    ({"train": {"seed_mode": "sometimes"}}, "seed_mode"),
    ({"sweep": {"lambda": ""}}, "empty"),
    ({"dataset": {"split": "0.5,0.5,0.5"}}, "split"),
])
def test_config_errors(tmp_path, sections, match):
    p = write_config(tmp_path / "c.ini", **sections)
    with pytest.raises(ConfigError, match=match):
        read_config(p)


def test_config_version_and_missing_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[meta]\nformat_version = 2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="format_version"):
        read_config(p)
    with pytest.raises(ConfigError, match="no such"):
        read_config(tmp_path / "nope.ini")


def test_sweep_cells_cross_product():
    cfg = read_config(None, {"sweep.lambda": "0,1", "sweep.n_proj": "2,4,8", "sweep.seeds": "0,1"})
    cells = cfg.cells()
    assert len(cells) == 12
    labels, cell = cells[-1]
    assert labels == {"lam": 1.0, "n_proj": 8, "seed": 1}
    assert cell.train.lam == 1.0 and cell.train.distance_cfg.n_proj == 8 and cell.train.seed == 1


# --- CLI runs --------------------------------------------------------------------------

def test_compress_writes_three_parseable_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["compress", *SMALL, "--out-dir", str(out)]) == 0
    report = CompressionReport.from_json((out / "report.json").read_text())
    net = load_checkpoint(out / "model.ckpt")
    with open(out / "plot_data.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "cpl", "macs", "accuracy", "mean_distance"]
    assert len(rows) == 1 + len(report.removal_order)
    assert report.removal_order
    assert int(rows[-1]["cpl"]) == report.cpl_trajectory[-1]
    assert net.critical_path_length() <= report.dense_cpl
    assert json.loads(capsys.readouterr().out.splitlines()[0])["directory"] == str(out)


def test_lambda_sweep_writes_one_report_per_value(tmp_path):
    out = tmp_path / "sweep"
    assert main(["compress", *SMALL, "--sweep-lambda", "0,1", "--out-dir", str(out)]) == 0
    lams = []
    for d in sorted(out.iterdir()):
        lams.append(json.loads((d / "report.json").read_text())["config"]["train"]["lam"])
    assert lams == [0.0, 1.0]


def test_seeded_runs_are_byte_identical(tmp_path):
    args = ["compress", *SMALL, "--seed-mode", "seeded", "--seed", "5"]
    assert main([*args, "--out-dir", str(tmp_path / "a")]) == 0
    assert main([*args, "--out-dir", str(tmp_path / "b")]) == 0
    for name in ("report.json", "plot_data.csv", "model.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_flag_changes_the_run(tmp_path):
    for s in ("1", "2"):
        assert main(["compress", *SMALL, "--seed", s, "--out-dir", str(tmp_path / s)]) == 0
    assert (tmp_path / "1" / "report.json").read_bytes() != (tmp_path / "2" / "report.json").read_bytes()


def test_train_and_eval(tmp_path, capsys):
    out = tmp_path / "t"
    assert main(["train", *SMALL, "--out-dir", str(out)]) == 0
    log = json.loads((out / "train_log.json").read_text())
    assert len(log["training_log"]) == 4
    capsys.readouterr()
    assert main(["eval", *SMALL, str(out / "model.ckpt")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["val_accuracy"] == pytest.approx(log["val_accuracy"])
    assert result["cpl"] == 7


def test_epsilon_and_heal_flags(tmp_path):
    out = tmp_path / "e"
    assert main(["compress", *SMALL, "--epsilon", "1e9", "--heal-epochs", "1", "--out-dir", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert sorted(report["removal_order"]) == [0, 1, 2]
    assert report["healed_accuracy"] is not None


def test_ablate_n_proj_nested_column(tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", *SMALL, "--sweep-n-proj", "1,5,40", "--out-dir", str(out)]) == 0
    with open(out / "ablation.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["n_proj"]) for r in rows] == [1, 5, 40]
    nested = [float(r["nested_mean_distance"]) for r in rows]
    assert nested[0] <= nested[1] <= nested[2]
    for col in ("final_accuracy", "mean_distance", "cpl", "macs"):
        assert all(r[col] != "" for r in rows)


def test_ablate_distance_axis_with_seeds(tmp_path):
    out = tmp_path / "ab"
    args = ["ablate", *SMALL, "--sweep-distance", "max_sliced,mean_l2", "--sweep-seeds", "0,1",
            "--out-dir", str(out)]
    assert main(args) == 0
    with open(out / "ablation.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["distance"] for r in rows] == ["max_sliced", "mean_l2"]
    assert all(r["n_runs"] == "2" for r in rows)
    assert len(list(out.iterdir())) == 5


def test_ablate_axis_count_and_conflicts(tmp_path, capsys):
    assert main(["ablate", *SMALL, "--out-dir", str(tmp_path)]) == 2
    three = ["--sweep-lambda", "0,1", "--sweep-n-proj", "1,2", "--sweep-batch-size", "8,16"]
    assert main(["ablate", *SMALL, *three, "--out-dir", str(tmp_path)]) == 2
    clash = ["--sweep-n-proj", "1,2", "--distance", "mmd"]
    assert main(["ablate", *SMALL, *clash, "--out-dir", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err.splitlines()[-1])
    assert err["error"] == "ConfigError" and "n_proj" in err["message"]


def test_config_error_exit_code(tmp_path, capsys):
    p = write_config(tmp_path / "c.ini", train={"nonsense": 1})
    assert main(["compress", "--config", str(p)]) == 2
    assert "nonsense" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, capsys):
    p = tmp_path / "d.csv"
    p.write_text("a,label\n1,0\nx,1\n", encoding="utf-8")
    assert main(["train", "--csv", str(p), "--out-dir", str(tmp_path)]) == 3
    err = json.loads(capsys.readouterr().err)
    assert "row 3" in err["message"]


# --- distances subcommand ---------------------------------------------------------------

def write_cloud(path, rows):
    path.write_text("x0,x1\n" + "".join(f"{float(a)!r},{float(b)!r}\n" for a, b in rows), encoding="utf-8")
    return path


def run_distance(capsys, *args):
    assert main(["distances", *map(str, args)]) == 0
    return float(capsys.readouterr().out)


def test_distances_identical_files(tmp_path, capsys):
    rows = np.random.default_rng(0).standard_normal((6, 2))
    a = write_cloud(tmp_path / "a.csv", rows)
    for metric in ("max_sliced", "sliced", "exact", "mmd", "kl_diag_gaussian", "mean_l1", "mean_l2"):
        assert run_distance(capsys, a, a, "--metric", metric) == 0.0


def test_distances_point_mass_and_format(tmp_path, capsys):
    a = write_cloud(tmp_path / "a.csv", [(0.0, 0.0)])
    b = write_cloud(tmp_path / "b.csv", [(3.0, 4.0)])
    assert main(["distances", str(a), str(b), "--max-mode", "projected_ascent"]) == 0
    text = capsys.readouterr().out.strip()
    assert abs(float(text) - 5.0) < 1e-3
    assert text == f"{float(text):.12g}"


def test_distances_max_sliced_below_exact(tmp_path, capsys):
    rng = np.random.default_rng(1)
    mu, nu = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    a, b = write_cloud(tmp_path / "a.csv", mu), write_cloud(tmp_path / "b.csv", nu)
    oracle = min(np.sqrt(np.mean([np.sum((mu[i] - nu[j]) ** 2) for i, j in enumerate(perm)]))
                 for perm in itertools.permutations(range(5)))
    assert run_distance(capsys, a, b, "--metric", "exact") == pytest.approx(oracle, rel=1e-11)
    assert run_distance(capsys, a, b) <= oracle + 1e-9


def test_distances_errors_name_the_file(tmp_path, capsys):
    a = write_cloud(tmp_path / "a.csv", [(0.0, 0.0), (1.0, 1.0)])
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,x1\n0,oops\n", encoding="utf-8")
    assert main(["distances", str(a), str(bad)]) == 3
    assert "bad.csv" in capsys.readouterr().err
    wide = tmp_path / "wide.csv"
    wide.write_text("x0,x1,x2\n0,0,0\n1,1,1\n", encoding="utf-8")
    assert main(["distances", str(a), str(wide)]) == 3
    assert "wide.csv" in capsys.readouterr().err
    assert main(["distances", str(a), str(tmp_path / "missing.csv")]) == 3
    assert "missing.csv" in capsys.readouterr().err


def test_distances_seeded_output_is_stable(tmp_path, capsys):
    rng = np.random.default_rng(2)
    a = write_cloud(tmp_path / "a.csv", rng.standard_normal((20, 2)))
    b = write_cloud(tmp_path / "b.csv", rng.standard_normal((20, 2)))
    first = run_distance(capsys, a, b, "--metric", "sliced", "--seed", "3")
    assert run_distance(capsys, a, b, "--metric", "sliced", "--seed", "3") == first
    assert ot.sliced_wasserstein(ot.as_point_cloud(np.loadtxt(a, delimiter=",", skiprows=1)),
                                 np.loadtxt(b, delimiter=",", skiprows=1),
                                 ot.DistanceConfig(seed=3)) == pytest.approx(first, rel=1e-11)

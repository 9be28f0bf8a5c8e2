import csv
import filecmp
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from agnostic_net import checkpoint
from agnostic_net.cli import main
from agnostic_net.dann import TrainConfig, make_network, train_supervised
from agnostic_net.data import load_dataset
from agnostic_net.pgm import read_pgm
from agnostic_net.report import line_chart_svg, text_table

TINY = ["--n-target", "8", "--n-context", "8", "--n-test", "4"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(out), *TINY, "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "train"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--epochs", "2", "--alpha-max", "0.5",
                 "--seed", "1"]) == 0
    return out


class TestGenData:
    def test_default_counts(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "d")]) == 0
        by_split = {}
        for r in rows(tmp_path / "d/manifest.csv"):
            by_split[r["split"]] = by_split.get(r["split"], 0) + 1
        assert by_split["target_train"] == 2 * 500 and by_split["context_train"] == 2 * 1000
        assert by_split["target_test_iid"] == by_split["target_test_swapped"] == by_split["context_test"] == 100

    def test_rho_half_manifest(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "d"), "--n-target", "200", "--n-context", "1",
                     "--n-test", "1", "--rho", "0.5"]) == 0
        train_rows = [r for r in rows(tmp_path / "d/manifest.csv") if r["split"] == "target_train"]
        match = np.mean([r["target_label"] == r["protected_label"] for r in train_rows])
        assert abs(match - 0.5) <= 0.05

    def test_same_seed_same_tree(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-data", "--out", str(tmp_path / name), *TINY, "--seed", "9"]) == 0
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
        for sub in cmp.subdirs.values():
            assert not sub.diff_files

    def test_refuses_non_empty_without_force(self, data_dir, capsys):
        assert main(["gen-data", "--out", str(data_dir), *TINY]) == 1
        assert "--force" in capsys.readouterr().err

    def test_force_overwrites(self, tmp_path):
        out = tmp_path / "d"
        assert main(["gen-data", "--out", str(out), *TINY]) == 0
        assert main(["gen-data", "--out", str(out), *TINY, "--force"]) == 0

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("AGNOSTIC_NET_SEED", "42")
        assert main(["gen-data", "--out", str(tmp_path / "d"), *TINY]) == 0
        assert load_dataset(tmp_path / "d").spec.seed == 42


class TestTrain:
    def test_outputs(self, trained):
        report = rows(trained / "report.csv")
        assert [int(r["epoch"]) for r in report] == [0, 1, 2]
        assert float(report[-1]["alpha"]) == 0.5
        assert (trained / "model.ckpt").read_text().startswith("agnostic-net-checkpoint 1\n")
        assert (trained / "run_manifest.json").exists()

    def test_alpha_zero_is_supervised_baseline(self, data_dir, tmp_path):
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--alpha-max", "0",
                     "--epochs", "2", "--seed", "4"]) == 0
        net = checkpoint.load(tmp_path / "model.ckpt")
        dataset = load_dataset(data_dir)
        cfg = TrainConfig.from_dict({**TrainConfig.desk(alpha_max=0.0, epochs=2, seed=4).to_dict(),
                                     "alpha_ramp_epochs": 1})
        plain = make_network(dataset, seed=4, protected=False)
        train_supervised(plain, dataset, cfg)
        for name, p in plain.params.items():
            assert net.params[name].data.tobytes() == p.data.tobytes()

    def test_manifest_replay_is_bitwise(self, trained, tmp_path):
        assert main(["train", "--manifest", str(trained / "run_manifest.json"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "report.csv").read_bytes() == (trained / "report.csv").read_bytes()
        assert (tmp_path / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()

    def test_missing_dataset(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) != 0
        assert "does not exist" in capsys.readouterr().err

    def test_missing_architecture_file(self, data_dir, tmp_path):
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--arch", "missing.arch"]) != 0

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--bogus"])
        assert exc.value.code != 0

    def test_missing_required_flag(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--out", str(tmp_path)])
        assert exc.value.code != 0


@pytest.fixture(scope="module")
def sweep_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    assert main(["sweep", "--data", str(data_dir), "--out", str(out), "--alphas", "0,0.8", "--repeats", "3",
                 "--epochs", "1", "--probe-epochs", "1", "--adversary-steps", "1"]) == 0
    return out


class TestSweepAndReport:
    def test_grid_size(self, sweep_dir):
        result = rows(sweep_dir / "sweep.csv")
        assert len(result) == 6
        assert [float(r["alpha"]) for r in result] == [0.0] * 3 + [0.8] * 3

    def test_replay(self, sweep_dir, tmp_path):
        assert main(["sweep", "--manifest", str(sweep_dir / "run_manifest.json"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "sweep.csv").read_bytes() == (sweep_dir / "sweep.csv").read_bytes()
        assert (tmp_path / "sweep_summary.csv").read_bytes() == (sweep_dir / "sweep_summary.csv").read_bytes()

    def test_report_means_match_rows(self, sweep_dir, tmp_path):
        assert main(["report", str(sweep_dir / "sweep.csv"), "--out", str(tmp_path)]) == 0
        table = (tmp_path / "sweep.txt").read_text().splitlines()
        result = rows(sweep_dir / "sweep.csv")
        for line in table[3:]:
            alpha = float(line.split()[0])
            group = [r for r in result if float(r["alpha"]) == alpha]
            mean = np.mean([float(r["probe_acc"]) for r in group])
            std = np.std([float(r["probe_acc"]) for r in group])
            assert f"{mean:.4f} +- {std:.4f}" in line
        ET.parse(tmp_path / "sweep.svg")

    def test_report_on_run_csv(self, trained, tmp_path):
        assert main(["report", str(trained / "report.csv"), "--out", str(tmp_path)]) == 0
        assert "acc_target_test" in (tmp_path / "report.txt").read_text()
        root = ET.parse(tmp_path / "report.svg").getroot()
        assert root.tag.endswith("svg")

    def test_report_missing_csv(self, tmp_path):
        assert main(["report", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) != 0


class TestProbeAndMaps:
    def test_probe(self, trained, data_dir, tmp_path):
        assert main(["probe", "--model", str(trained / "model.ckpt"), "--data", str(data_dir), "--out",
                     str(tmp_path), "--probe-epochs", "2"]) == 0
        acc = float(rows(tmp_path / "probe.csv")[0]["probe_acc"])
        assert 0.0 <= acc <= 1.0

    def test_actmap(self, trained, data_dir, tmp_path):
        model = str(trained / "model.ckpt")
        assert main(["actmap", "--model", model, "--compare", model, "--data", str(data_dir),
                     "--out", str(tmp_path), "--top", "2"]) == 0
        act = read_pgm(tmp_path / "target_test_iid/00000.act.pgm")
        assert act.shape == (32, 32) and act.max() <= 1.0
        assert len(rows(tmp_path / "actmap.csv")) == 8
        ranked = rows(tmp_path / "least_correlated.csv")
        assert len(ranked) == 2 and float(ranked[0]["pearson"]) == pytest.approx(1.0)

    def test_actmap_unknown_split(self, trained, data_dir, tmp_path):
        assert main(["actmap", "--model", str(trained / "model.ckpt"), "--data", str(data_dir),
                     "--out", str(tmp_path), "--split", "nope"]) != 0


class TestCheckpoint:
    def test_round_trip_is_exact(self, tiny_dataset, tmp_path):
        net = make_network(tiny_dataset, seed=8)
        checkpoint.save(net, tmp_path / "m.ckpt")
        back = checkpoint.load(tmp_path / "m.ckpt")
        assert back.arch == net.arch and back.input_shape == net.input_shape
        for name, p in net.params.items():
            assert back.params[name].data.tobytes() == p.data.tobytes()

    @pytest.mark.parametrize("mangle", [
        lambda t: t.replace("agnostic-net-checkpoint 1", "something else"),
        lambda t: t.replace("end architecture", ""),
        lambda t: t.replace("shape: 8 1 3 3", "shape: 8 1 3 2"),
        lambda t: t.replace("param features.0.bias", "param features.9.bias"),
    ])
    def test_corrupt_files_rejected(self, tiny_dataset, mangle):
        text = checkpoint.dumps(make_network(tiny_dataset, seed=0))
        with pytest.raises(ValueError):
            checkpoint.loads(mangle(text))


def test_text_table_alignment():
    out = text_table(["a", "bb"], [[1, 0.5], [22, float("nan")]]).splitlines()
    assert out == [" a      bb", "--  ------", " 1  0.5000", "22     nan"]


def test_chart_breaks_line_at_nan():
    svg = line_chart_svg({"s": ([0, 1, 2, 3], [0.1, float("nan"), 0.3, 0.4])})
    assert svg.count("<polyline") == 2
    ET.fromstring(svg)

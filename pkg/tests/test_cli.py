import csv
import hashlib
import json

import pytest

from physopt.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main

TINY = ["--set", "train.epochs=2", "--set", "model.width=4", "--set", "model.modes=2",
        "--set", "model.depth=1", "--set", "basis.n_terms=8", "--set", "dataset.n=6",
        "--set", "train.batch_size=2"]


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = root / "train"
    assert main(["train", "--family", "poisson", "--out-dir", str(out), *TINY]) == EXIT_OK
    return root, out / "model.ckpt"


class TestGenerate:
    def test_deterministic_and_manifest(self, tmp_path):
        for name in ("a", "b"):
            assert main(["generate", "--family", "helmholtz", "--n", "5",
                         "--out-dir", str(tmp_path / name)]) == EXIT_OK
        a, b = (tmp_path / n / "dataset.ndjson" for n in ("a", "b"))
        assert a.read_bytes() == b.read_bytes()
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["command"] == "generate"
        assert manifest["files"]["dataset.ndjson"] == hashlib.sha256(a.read_bytes()).hexdigest()
        assert "config.yaml" in manifest["files"]

    def test_refuses_to_overwrite(self, tmp_path):
        args = ["generate", "--n", "2", "--out-dir", str(tmp_path)]
        assert main(args) == EXIT_OK
        assert main(args) == EXIT_IO
        assert main(args + ["--force"]) == EXIT_OK

    def test_empty_dataset(self, tmp_path):
        assert main(["generate", "--n", "0", "--out-dir", str(tmp_path)]) == EXIT_OK
        assert len((tmp_path / "dataset.ndjson").read_text().splitlines()) == 1


class TestConfigErrors:
    @pytest.mark.parametrize("override", ["solver.L=0", "nonsense.key=1", "train.epochs=-3",
                                          "model.scale_mode=global", "landscape.loss=energy",
                                          "model.gamma_fourier=-2"])
    def test_bad_overrides(self, tmp_path, override):
        assert main(["generate", "--out-dir", str(tmp_path), "--set", override]) == EXIT_CONFIG

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("family: nlrd\ndataset:\n  n: 2\n")
        assert main(["generate", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_OK
        header = json.loads((tmp_path / "o" / "dataset.ndjson").read_text().splitlines()[0])
        assert header["family"] == "nlrd"

    def test_invalid_yaml(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("family: [unclosed\n")
        assert main(["generate", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_missing_checkpoint(self, tmp_path):
        code = main(["bench-baselines", "--out-dir", str(tmp_path), "--checkpoint", str(tmp_path / "none")])
        assert code == EXIT_IO

    def test_thread_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PHYSOPT_THREADS", "zero")
        assert main(["generate", "--n", "1", "--out-dir", str(tmp_path)]) == EXIT_CONFIG


class TestPipeline:
    def test_train_outputs(self, trained):
        root, ckpt = trained
        assert ckpt.exists()
        hist = rows(root / "train" / "history.csv")
        assert hist[0] == ["epoch", "train_rmse", "test_rmse", "lr"] and len(hist) == 3

    def test_infer(self, trained, tmp_path):
        _, ckpt = trained
        inst = tmp_path / "inst.json"
        inst.write_text(json.dumps({"family": "poisson", "params": {"a": [1.0] * 16},
                                    "bc": {"u0": 0.5, "v0": -1.0}}))
        out = tmp_path / "o"
        assert main(["infer", "--checkpoint", str(ckpt), "--instance", str(inst),
                     "--out-dir", str(out)]) == EXIT_OK
        sol = rows(out / "solution.csv")
        assert sol[0] == ["x", "u"] and len(sol) == 65
        assert len(rows(out / "trace.csv")) == 4  # header + L+1 iterates

    def test_bench_baselines(self, trained, tmp_path):
        _, ckpt = trained
        out = tmp_path / "b"
        assert main(["bench-baselines", "--family", "poisson", "--checkpoint", str(ckpt), "--steps", "4",
                     "--out-dir", str(out), "--set", "dataset.n=10", "--set", "bench.n_instances=2"]) == EXIT_OK
        summary = rows(out / "summary.csv")
        assert [r[0] for r in summary[1:]] == ["learned", "sgd", "adam", "lbfgs"]
        learned = [r for r in rows(out / "traces.csv")[1:] if r[0] == "learned"]
        assert len({r[1] for r in learned}) == 3

    def test_landscape_with_checkpoint(self, trained, tmp_path):
        _, ckpt = trained
        out = tmp_path / "l"
        assert main(["landscape", "--family", "poisson", "--checkpoint", str(ckpt), "--res", "5",
                     "--out-dir", str(out), "--set", "dataset.n=5"]) == EXIT_OK
        kinds = {r[0] for r in rows(out / "landscape.csv")[1:]}
        assert kinds == {"grid", "trajectory"}


class TestStandalone:
    def test_conditioning_rows(self, tmp_path):
        assert main(["bench-conditioning", "--K", "2,3,4", "--eps", "1e-2",
                     "--out-dir", str(tmp_path)]) == EXIT_OK
        table = rows(tmp_path / "conditioning.csv")
        assert len(table) == 4
        assert [int(r[0]) for r in table[1:]] == [2, 3, 4]
        assert all(float(r[2]) >= int(r[0]) ** 4 for r in table[1:])

    def test_landscape_minimum_at_anchor(self, tmp_path):
        out = tmp_path / "l"
        assert main(["landscape", "--family", "helmholtz", "--res", "11", "--out-dir", str(out),
                     "--set", "dataset.n=5"]) == EXIT_OK
        grid = [r for r in rows(out / "landscape.csv")[1:] if r[0] == "grid"]
        best = min(grid, key=lambda r: float(r[5]))
        assert float(best[3]) == 0.0 and float(best[4]) == 0.0
        again = tmp_path / "l2"
        main(["landscape", "--family", "helmholtz", "--res", "11", "--out-dir", str(again),
              "--set", "dataset.n=5"])
        assert (out / "landscape.csv").read_bytes() == (again / "landscape.csv").read_bytes()

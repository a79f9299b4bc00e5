import json

import numpy as np
import pytest

from driftreg import cli, graphnet

TINY_NET = ["--k", "6", "--epochs", "2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for s in (1, 2, 3):
        assert cli.main(["synth", "--n", "200", "--seed", str(s), "--outlier-frac", "0.1",
                         "--supervision-count", "20", "--eval-count", "20",
                         "--out", str(root / f"case{s}")]) == 0
    assert cli.main(["pretrain", "--cases", str(root / "case1"), str(root / "case2"),
                     "--out", str(root / "w.json"), "--count", "96", *TINY_NET]) == 0
    return root


def read_csv(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


class TestSynth:
    def test_case_directory(self, workspace):
        names = sorted(p.name for p in (workspace / "case1").iterdir())
        assert names == ["eval.csv", "fixed.csv", "meta.json", "moving.csv", "supervision.csv"]

    def test_bad_kind_exits_nonzero(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "--kind", "cube", "--out", str(tmp_path / "x")])
        assert exc.value.code != 0


class TestRegister:
    def test_cpd_rows(self, workspace, tmp_path):
        assert cli.main(["register", "--method", "cpd", "--case", str(workspace / "case3"),
                         "--iters", "20", "--count", "150", "--out", str(tmp_path)]) == 0
        disp = read_csv(tmp_path / "displacements.csv")
        assert disp.shape == (150, 6)
        assert read_csv(tmp_path / "warped_eval.csv").shape == (20, 3)

    def test_alpha_zero_matches_cpd(self, workspace, tmp_path):
        common = ["--case", str(workspace / "case3"), "--iters", "15", "--count", "100", "--alpha", "0"]
        assert cli.main(["register", "--method", "cpd", "--out", str(tmp_path / "a"), *common]) == 0
        assert cli.main(["register", "--method", "feat-cpd", "--weights", str(workspace / "w.json"),
                         "--out", str(tmp_path / "b"), *common]) == 0
        assert (tmp_path / "a" / "displacements.csv").read_bytes() == \
            (tmp_path / "b" / "displacements.csv").read_bytes()

    def test_missing_weights(self, workspace, tmp_path, capsys):
        code = cli.main(["register", "--method", "knn", "--case", str(workspace / "case3"),
                         "--out", str(tmp_path)])
        assert code != 0
        assert "weights" in capsys.readouterr().err

    def test_missing_case(self, tmp_path):
        assert cli.main(["register", "--method", "cpd", "--case", str(tmp_path / "none")]) != 0


class TestConfig:
    def test_file_and_override(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"params": {"alpha": 0.1, "iters": 7, "count": 50}}))
        args = cli.make_parser().parse_args(["register", "--method", "cpd", "--case", "x",
                                             "--config", str(path), "--iters", "9"])
        cfg = cli.build_config(args)
        assert cfg.cpd.alpha == 0.1 and cfg.cpd.iterations == 9 and cfg.count == 50

    @pytest.mark.parametrize("params", [{"bogus": 1}, {"w": 1.5}, {"count": 0}, {"iters": "many"}])
    def test_invalid(self, tmp_path, params):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"params": params}))
        args = cli.make_parser().parse_args(["register", "--method", "cpd", "--case", "x",
                                             "--config", str(path)])
        with pytest.raises(cli.ConfigError):
            cli.build_config(args)

    def test_finetune_defaults(self):
        cfg = cli.build_config(cli.make_parser().parse_args(["register", "--method", "cpd", "--case", "x"]))
        assert (cfg.finetune_params.rho, cfg.finetune_params.beta, cfg.finetune_params.iterations) == (0.25, 0.5, 15)
        assert cfg.count == 4096 and cfg.repeats == 10


class TestFinetuneEvaluate:
    def test_finetune_writes_weights(self, workspace, tmp_path):
        out = tmp_path / "ft.json"
        assert cli.main(["finetune", "--cases", str(workspace / "case1"), "--weights", str(workspace / "w.json"),
                         "--out", str(out), "--steps", "2", "--count", "64", "--unroll", "3"]) == 0
        assert graphnet.load_params(out).k == 6

    def _evaluate(self, workspace, out, extra=()):
        args = ["evaluate", "--case", str(workspace / "case1"), str(workspace / "case3"),
                "--methods", "initial,cpd,feat-cpd", "--weights", str(workspace / "w.json"),
                "--repeats", "2", "--count", "100", "--iters", "15", "--out", str(out), *extra]
        assert cli.main(args) == 0
        return (out / "results.csv").read_bytes()

    def test_rows_and_determinism(self, workspace, tmp_path):
        a = self._evaluate(workspace, tmp_path / "a")
        b = self._evaluate(workspace, tmp_path / "b")
        assert a == b
        assert (tmp_path / "a" / "results.svg").read_bytes() == (tmp_path / "b" / "results.svg").read_bytes()
        lines = a.decode().splitlines()
        assert len(lines) == 1 + 2 * 3
        assert [l.split(",")[1] for l in lines[1:4]] == ["initial", "cpd", "feat-cpd"]
        assert (tmp_path / "a" / "pvalues.csv").exists()

    def test_parallel_matches_serial(self, workspace, tmp_path, monkeypatch):
        serial = self._evaluate(workspace, tmp_path / "s")
        monkeypatch.setenv("DRIFTREG_THREADS", "2")
        assert self._evaluate(workspace, tmp_path / "p") == serial

    def test_loo(self, workspace, tmp_path):
        args = ["evaluate", "--case", str(workspace / "case1"), str(workspace / "case2"),
                "--methods", "initial,knn,end-to-end", "--loo", "--repeats", "1", "--count", "80",
                "--iters", "5", "--steps", "1", "--unroll", "2", "--out", str(tmp_path), *TINY_NET]
        assert cli.main(args) == 0
        assert len((tmp_path / "results.csv").read_text().splitlines()) == 1 + 2 * 3

    def test_unknown_method(self, workspace, tmp_path):
        assert cli.main(["evaluate", "--case", str(workspace / "case1"), "--methods", "icp",
                         "--out", str(tmp_path)]) != 0

    def test_end_to_end_needs_weights(self, workspace, tmp_path):
        assert cli.main(["evaluate", "--case", str(workspace / "case1"), "--methods", "end-to-end",
                         "--out", str(tmp_path)]) != 0

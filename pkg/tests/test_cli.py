import json
import os

import pytest

from regtransfer.cli import MANIFEST, SCHEMAS, load_config, main, to_csv
from regtransfer.errors import ConfigError


def run(tmp_path, name, *args, sub="out"):
    out = tmp_path / sub
    code = main([name, "--out", str(out), *args])
    return code, out


def write(tmp_path, text, fname="run.ini"):
    p = tmp_path / fname
    p.write_text(text)
    return str(p)


def files(out):
    return {f: (out / f).read_bytes() for f in sorted(os.listdir(out))}


class TestConfig:
    def test_defaults_fill_every_key(self):
        cfg, seed = load_config("approx-rates", None)
        assert set(cfg) == set(SCHEMAS["approx-rates"])
        assert seed is None

    def test_ini_with_run_section(self, tmp_path):
        path = write(tmp_path, "alpha = 1.2\nn_max = 5\n[run]\nseed = 17\n")
        cfg, seed = load_config("approx-rates", path)
        assert cfg["alpha"] == 1.2 and cfg["n_max"] == 5 and seed == 17

    def test_named_section(self, tmp_path):
        path = write(tmp_path, "[lindeberg]\npair = commuting\ncouplings = 0.1, 0.05\n")
        cfg, _ = load_config("lindeberg", path)
        assert cfg["pair"] == "commuting" and cfg["couplings"] == (0.1, 0.05)

    def test_unknown_key_named(self, tmp_path):
        path = write(tmp_path, "alphaa = 1.2\n")
        with pytest.raises(ConfigError) as exc:
            load_config("approx-rates", path)
        assert exc.value.key == "alphaa"

    def test_unknown_section(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config("approx-rates", write(tmp_path, "[extra]\nx = 1\n"))

    def test_bad_choice(self, tmp_path):
        with pytest.raises(ConfigError) as exc:
            load_config("simulate", write(tmp_path, "kind = sideways\n"))
        assert exc.value.key == "kind"

    def test_manifest_for_other_experiment(self, tmp_path):
        path = write(tmp_path, json.dumps({"experiment": "simulate", "config": {}}), "m.json")
        with pytest.raises(ConfigError):
            load_config("distance", path)

    def test_csv_formatting(self):
        text = to_csv(["a", "b", "c"], [(1, 0.1, True)])
        assert text == "a,b,c\n1,0.10000000000000001,true\n"


class TestMain:
    def test_unknown_key_exit_code(self, tmp_path, capsys):
        code, _ = run(tmp_path, "approx-rates", "--config", write(tmp_path, "alphaa = 1\n"))
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["key"] == "alphaa" and "alphaa" in err["message"]

    def test_missing_config_file(self, tmp_path):
        code, _ = run(tmp_path, "approx-rates", "--config", str(tmp_path / "nope.ini"))
        assert code == 2

    def test_check_only_validates(self, tmp_path, capsys):
        code, out = run(tmp_path, "simulate", "--check", "--seed", "5")
        assert code == 0
        assert not out.exists()
        echo = json.loads(capsys.readouterr().out)
        assert echo["seed"] == 5 and echo["config"]["N"] == 10_000

    def test_seed_range(self, tmp_path):
        assert run(tmp_path, "simulate", "--check", "--seed", str(2**64))[0] == 2

    def test_approx_rates_columns(self, tmp_path):
        code, out = run(tmp_path, "approx-rates")
        assert code == 0
        header = (out / "approx-rates.csv").read_text().splitlines()[0]
        assert header == "n,r_n,eps_n,lambda_n,phi_delta,slope"
        man = json.loads((out / MANIFEST).read_text())
        assert man["experiment"] == "approx-rates" and man["status"] == "pass"
        assert "approx-rates.csv" in man["outputs"]
        assert set(man["versions"]) >= {"regtransfer", "numpy", "python"}

    def test_csv_uses_lf_and_dot_decimal(self, tmp_path):
        _, out = run(tmp_path, "approx-rates")
        raw = (out / "approx-rates.csv").read_bytes()
        assert b"\r" not in raw and b";" not in raw

    def test_manifest_replay_with_other_worker_count(self, tmp_path):
        cfg = write(tmp_path, "N = 3000\nlevel = 3\ndt = 0.05\n")
        code, first = run(tmp_path, "simulate", "--config", cfg, "--seed", "99", sub="a")
        assert code == 0
        code, replay = run(tmp_path, "simulate", "--config", str(first / MANIFEST), "--workers", "3", sub="b")
        assert code == 0
        assert files(first) == files(replay)

    def test_seed_changes_output(self, tmp_path):
        cfg = write(tmp_path, "N = 500\nlevel = 2\ndt = 0.1\n")
        _, a = run(tmp_path, "simulate", "--config", cfg, "--seed", "1", sub="a")
        _, b = run(tmp_path, "simulate", "--config", cfg, "--seed", "2", sub="b")
        assert (a / "simulate.csv").read_bytes() != (b / "simulate.csv").read_bytes()

    @pytest.mark.parametrize("name", ["distance", "interp-bound", "ibp-verify", "weights-verify"])
    def test_experiments_pass_with_defaults(self, tmp_path, name):
        code, out = run(tmp_path, name)
        assert code == 0
        man = json.loads((out / MANIFEST).read_text())
        for f in man["outputs"]:
            lines = (out / f).read_text().splitlines()
            assert len(lines) >= 2 and "," in lines[0]

    def test_failed_check_exit_code(self, tmp_path):
        # no quadrature reaches this residual tolerance
        code, out = run(tmp_path, "ibp-verify", "--config", write(tmp_path, "tol = 1e-30\n"))
        assert code == 1
        assert json.loads((out / MANIFEST).read_text())["status"] == "fail"

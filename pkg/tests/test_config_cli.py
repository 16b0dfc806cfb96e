"""Configuration parsing and the command-line runner."""

import hashlib
import json
from pathlib import Path

import pytest

from roughscheme import cli
from roughscheme.config import ConfigError, ExperimentConfig, build_config, eval_int, parse_config, serialize


class TestConfig:
    def test_empty_rate_section_uses_defaults(self):
        cfg = parse_config("[rate]\n")
        assert cfg.hurst == 0.4
        assert cfg.ns == tuple(2**k for k in range(6, 13))
        assert cfg.mc_reps == 1000
        assert cfg.schemes == ("modified", "classical")
        assert cfg.refinement == 32 and cfg.seed == 0

    @pytest.mark.parametrize("command", ["simulate", "rate", "clt"])
    @pytest.mark.parametrize("hurst", [0.6, 0.5, 1 / 3, 0.2])
    def test_hurst_outside_regime(self, command, hurst):
        with pytest.raises(ConfigError, match="outside"):
            build_config(command, f"[{command}]\nhurst = {hurst}\n", env={})

    def test_constants_accept_wider_range(self):
        assert build_config("constants", "[constants]\nhurst = 0.3\n", env={}).hurst == 0.3

    @pytest.mark.parametrize("text", [
        "[rate]\nhurst = 0.35\nns = 2**6,2**7,2**8,2**9\nmc_reps = 10\nseed = 42\nfield.sigma = 0.5\n",
        "[simulate]\nschemes = modified,taylor\nhorizon_T = 2.5\n",
        "[clt]\n",
        "[rate]\nsynthetic_exponent = -0.3\nns = 64,128\n",
    ])
    def test_round_trip(self, text):
        cfg = parse_config(text)
        assert parse_config(serialize(cfg)) == cfg

    @pytest.mark.parametrize("command,text", [
        ("rate", "[rate]\nbogus = 1\n"),
        ("rate", "[nope]\nhurst = 0.4\n"),
        ("rate", "[rate]\nhurst = abc\n"),
        ("rate", "[rate]\nns = 64,128\n"),
        ("simulate", "[simulate]\nschemes = heun\n"),
        ("rate", "not an ini"),
    ])
    def test_rejected(self, command, text):
        with pytest.raises(ConfigError):
            build_config(command, text, env={})

    def test_aliases_and_case(self):
        cfg = build_config("rate", "[rate]\nH = 0.45\nReps = 7\nn = 8,16,32,64\n", env={})
        assert (cfg.hurst, cfg.mc_reps, cfg.ns) == (0.45, 7, (8, 16, 32, 64))

    def test_precedence(self):
        text = "[simulate]\nseed = 1\nmc_reps = 3\n"
        env = {"ROUGHSCHEME_SEED": "2", "ROUGHSCHEME_REFINEMENT": "64"}
        cfg = build_config("simulate", text, env=env, overrides={"seed": 3, "threads": None})
        assert (cfg.seed, cfg.refinement, cfg.mc_reps, cfg.threads) == (3, 64, 3, 1)
        assert build_config("simulate", text, env=env).seed == 2

    @pytest.mark.parametrize("text,value", [("1024", 1024), ("2**10", 1024), ("2^10", 1024), (" 7 ", 7)])
    def test_eval_int(self, text, value):
        assert eval_int(text) == value

    def test_dims(self):
        assert ExperimentConfig("simulate").dims == (2, 2)
        assert ExperimentConfig("simulate", field="geometric").dims == (1, 1)


def run(tmp_path, name, *args, config=None):
    out = tmp_path / name
    argv = list(args) + ["--out", str(out)]
    if config is not None:
        cfg = tmp_path / f"{name}.ini"
        cfg.write_text(config)
        argv += ["--config", str(cfg)]
    return cli.main(argv), out


class TestCli:
    def test_constants(self, tmp_path):
        code, out = run(tmp_path, "c", "constants", config="[constants]\nk_max = 8\nquad_n = 64\n")
        assert code == 0
        lines = (out / "constants.csv").read_text().splitlines()
        assert lines[0] == "k,Qk,Pk"
        q, p = (float(x) for x in lines[-2].split(",")[1:])
        assert q > p
        summary = json.loads((out / "summary.json").read_text())
        assert summary["Q_greater_than_P"] is True

    def test_synthetic_rate(self, tmp_path):
        text = "[rate]\nsynthetic_exponent = -0.3\nns = 2**6,2**7,2**8,2**9,2**10,2**11,2**12\n"
        code, out = run(tmp_path, "r", "rate", config=text)
        assert code == 0
        rows = (out / "slopes.csv").read_text().splitlines()
        assert rows[0] == "scheme,slope,slope_stderr"
        assert rows[1].startswith("synthetic,")
        assert float(rows[1].split(",")[1]) == pytest.approx(-0.3, abs=1e-12)

    def test_byte_identical_reruns(self, tmp_path):
        text = "[simulate]\nns = 64\nschemes = modified,classical,taylor\nseed = 9\n"
        _, a = run(tmp_path, "a", "simulate", config=text)
        _, b = run(tmp_path, "b", "simulate", config=text)
        for name in ("trajectory_modified.csv", "trajectory_classical.csv", "trajectory_taylor.csv", "reference.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        _, c = run(tmp_path, "c", "simulate", "--seed", "10", config=text)
        assert (a / "reference.csv").read_bytes() != (c / "reference.csv").read_bytes()

    def test_manifest(self, tmp_path):
        code, out = run(tmp_path, "m", "fbm", "--seed", "5", config="[fbm]\nns = 32\nmc_reps = 3\n")
        assert code == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["exit_code"] == 0 and man["config"]["seed"] == 5
        assert set(man["files"]) == {"fbm_r0.csv", "fbm_r1.csv", "fbm_r2.csv", "summary.json"}
        for name, digest in man["files"].items():
            assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
        assert {"version", "git", "started_utc", "wall_clock_s"} <= set(man)

    def test_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ROUGHSCHEME_SEED", "123")
        _, out = run(tmp_path, "e", "fbm", config="[fbm]\nns = 16\n")
        assert json.loads((out / "manifest.json").read_text())["config"]["seed"] == 123

    def test_bad_config_exit_code(self, tmp_path, capsys):
        code, out = run(tmp_path, "x", "rate", config="[rate]\nhurst = 0.6\n")
        assert code == 1
        assert "outside" in capsys.readouterr().err
        assert not (out / "manifest.json").exists()

    @pytest.mark.parametrize("argv", [["bogus"], [], ["rate", "--seed", "x"]])
    def test_usage_errors_exit_one(self, argv):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 1

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["constants", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path)]) == 1

    def test_check_single_criterion(self, tmp_path):
        code, out = run(tmp_path, "k", "check", "--only", "2")
        summary = json.loads((out / "summary.json").read_text())
        assert [c["number"] for c in summary["criteria"]] == [2]
        assert code == (0 if summary["criteria"][0]["passed"] else 2)
        assert (out / "acceptance.csv").exists()


CONFIGS = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.ini"))


@pytest.mark.parametrize("path", CONFIGS, ids=[p.stem for p in CONFIGS])
def test_bundled_configs_parse(path):
    cfg = parse_config(path.read_text())
    assert parse_config(serialize(cfg)) == cfg

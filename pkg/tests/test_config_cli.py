import filecmp
import json

import pytest

from pdmpctl.cli import MANIFEST, main
from pdmpctl.config import EXAMPLE_CONFIG, ConfigError, load_config, parse_config

SMALL_TOY = """\
[run]
model = toy
seed = 3
paths = 40

[toy]
name = {name}
t = {t}
mode = 0

[value]
n_times = 21
jump_cap = 3

[dual]
budget = 4
paths = 20

[bsde]
ladder = 0, 2
dt = 0.01

[simulate]
z_points = 3
policy = max
"""

SMALL_HH = """\
[run]
model = hh
seed = 5
paths = 4

[hh]
sites = ChR2
K = 8
T = 0.5
kappa = 0.0

[dual]
budget = 3
paths = 4
"""


def write(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def run(cmd, cfg, out):
    out.mkdir(exist_ok=True)
    return main([cmd, "--config", str(cfg), "--out", str(out)])


class TestConfig:
    def test_example_parses(self):
        cfg = parse_config(EXAMPLE_CONFIG)
        assert cfg.run.model == "toy" and cfg.bsde.ladder == (1, 2, 5, 10, 50)
        assert len(cfg.source_hash) == 64

    @pytest.mark.parametrize("text, where", [
        ("[run]\nseed = x\n", "run.seed"),
        ("[toy]\ncolour = red\n", "toy.colour"),
        ("[hh]\nC_m = -1\n", "hh.C_m"),
        ("[hh]\nwidth = 3\n", "hh.width"),
        ("[hh]\nsites = Ca\n", "hh.sites"),
        ("[bsde]\ndt = 0.5\n", "bsde.dt"),
        ("[toy]\nt = 2.0\n", "toy.t"),
        ("[dual]\nlambda0 = 1, -1\n", "dual.lambda0"),
        ("[simulate]\npolicy = random\n", "simulate.policy"),
    ])
    def test_error_names_key(self, text, where):
        with pytest.raises(ConfigError) as err:
            parse_config(text)
        assert str(err.value).startswith(where)

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="^extra"):
            parse_config("[extra]\nx = 1\n")

    def test_hh_values(self):
        cfg = parse_config("[run]\nmodel = hh\n[hh]\nsites = K, ChR2\nV_ref = 20, 0, 1\nh_gate = off\n")
        assert cfg.hh.N == 2 and not cfg.hh.h_gate
        assert cfg.hh.V_ref.tolist() == [20.0, 0.0, 1.0]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.ini")

    def test_shipped_demo_configs(self):
        from pathlib import Path

        root = Path(__file__).resolve().parents[1] / "demos" / "configs"
        for path in sorted(root.glob("*.ini")):
            load_config(path)


class TestExitCodes:
    def test_missing_out_dir(self, tmp_path):
        cfg = write(tmp_path, SMALL_TOY.format(name="switching", t=0.0))
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "absent")]) == 2

    def test_bad_config(self, tmp_path):
        cfg = write(tmp_path, "[run]\nmodel = moon\n")
        assert run("simulate", cfg, tmp_path / "o") == 2

    def test_toy_only_command_on_hh(self, tmp_path):
        cfg = write(tmp_path, SMALL_HH)
        assert run("value", cfg, tmp_path / "o") == 2

    def test_track_needs_hh(self, tmp_path):
        cfg = write(tmp_path, SMALL_TOY.format(name="switching", t=0.0))
        assert run("track", cfg, tmp_path / "o") == 2

    def test_unknown_command(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["fly", "--config", "x", "--out", str(tmp_path)])
        assert err.value.code == 2

    def test_override_validation(self, tmp_path):
        cfg = write(tmp_path, SMALL_TOY.format(name="switching", t=0.0))
        (tmp_path / "o").mkdir()
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--paths", "1"]) == 2


class TestCommands:
    def test_simulate_is_reproducible(self, tmp_path):
        cfg = write(tmp_path, SMALL_TOY.format(name="switching", t=0.0))
        assert run("simulate", cfg, tmp_path / "a") == 0
        assert run("simulate", cfg, tmp_path / "b") == 0
        for name in ("trajectories.csv", "simulate_summary.json"):
            assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)
        manifest = json.loads((tmp_path / "a" / MANIFEST).read_text())
        assert manifest["outputs"] == ["trajectories.csv", "simulate_summary.json"]

    def test_seed_override_changes_output(self, tmp_path):
        cfg = write(tmp_path, SMALL_TOY.format(name="switching", t=0.0))
        run("simulate", cfg, tmp_path / "a")
        (tmp_path / "b").mkdir()
        main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "4"])
        assert not filecmp.cmp(tmp_path / "a" / "trajectories.csv", tmp_path / "b" / "trajectories.csv",
                               shallow=False)

    def test_zero_cost_value(self, tmp_path):
        cfg = write(tmp_path, SMALL_TOY.format(name="zero-cost", t=0.0))
        assert run("value", cfg, tmp_path / "o") == 0
        summary = json.loads((tmp_path / "o" / "value_summary.json").read_text())
        assert summary["value_at_start"] == 0.0 and summary["oracle_sup_error"] == 0.0

    def test_start_at_horizon(self, tmp_path):
        cfg = write(tmp_path, SMALL_TOY.format(name="switching", t=1.0))
        assert run("value", cfg, tmp_path / "v") == 0
        assert run("simulate", cfg, tmp_path / "s") == 0
        value = json.loads((tmp_path / "v" / "value_summary.json").read_text())
        sim = json.loads((tmp_path / "s" / "simulate_summary.json").read_text())
        assert value["value_at_start"] == 0.5
        assert sim["cost_mean"] == 0.5 and sim["jumps_max"] == 0

    def test_dual_and_bsde(self, tmp_path):
        cfg = write(tmp_path, SMALL_TOY.format(name="switching", t=0.0))
        assert run("dual", cfg, tmp_path / "d") == 0
        assert run("bsde", cfg, tmp_path / "b") == 0
        dual = json.loads((tmp_path / "d" / "dual_summary.json").read_text())
        assert dual["evaluations"] <= 4
        ladder = json.loads((tmp_path / "b" / "bsde_summary.json").read_text())["ladder"]
        assert [r["n"] for r in ladder] == [0, 2]
        assert all(b <= a + 1e-12 for a, b in zip(ladder[0]["values"], ladder[1]["values"]))

    def test_track_without_misfit(self, tmp_path):
        cfg = write(tmp_path, SMALL_HH)
        assert run("track", cfg, tmp_path / "o") == 0
        summary = json.loads((tmp_path / "o" / "track_summary.json").read_text())
        costs = summary["costs"]
        assert costs["zero"]["mean"] == 0.0
        assert costs["max"]["mean"] == pytest.approx(5.0 * 0.5)

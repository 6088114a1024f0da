import numpy as np
import pytest

from satfed import cli, experiment
from satfed.config import parse_config

SMALL_CONFIG = """\
schema_version = 1
seed = 0

[model]
n_layers = 1
n_experts = 2
top_k = 1
d_in = 2
d_hidden = 2
d_out = 2
n_classes = 2

[data]
n_clusters = 2
devices_per_cluster = 1
samples_per_device = 8
trial_size = 4
modality_separation = 4.0

[train]
scheme = "async"
eta_expert = 0.05
eta_gate = 0.05
lora_rank = 2
total_cycles = 3
gate_init = "modality_aligned"
"""

BOUND_PARAMS = """\
l_smooth = 1.0
g_expert = 1.0
g_gate = 1.0
sigma_expert_sq = 1.0
sigma_gate_sq = 1.0
zeta_expert_sq = 0.0
gamma = 1.0
n_clusters = 2
init_gap = 1.0
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.toml"
    path.write_text(SMALL_CONFIG)
    return path


class TestExperimentBuild:
    def test_build_deterministic(self):
        cfg = parse_config(SMALL_CONFIG)
        s1 = experiment.build(cfg)
        s2 = experiment.build(cfg)
        np.testing.assert_array_equal(s1.relevance.p, s2.relevance.p)
        assert s1.assignment.groups == s2.assignment.groups
        for k in s1.params.values:
            np.testing.assert_array_equal(s1.params.values[k],
                                          s2.params.values[k])

    def test_seed_changes_data(self):
        cfg = parse_config(SMALL_CONFIG)
        s1 = experiment.build(cfg, seed=0)
        s2 = experiment.build(cfg, seed=1)
        assert not np.array_equal(s1.datasets[0].pooled().X,
                                  s2.datasets[0].pooled().X)

    def test_plan_length(self):
        cfg = parse_config(SMALL_CONFIG)
        setup = experiment.build(cfg)
        assert len(setup.plan) == cfg.train.total_cycles * setup.cycle_len

    def test_gate_alignment_applied(self):
        cfg = parse_config(SMALL_CONFIG)
        setup = experiment.build(cfg)
        g = setup.params.values["gate.0"]
        for m in range(2):
            direction = setup.specs[m].means.mean(axis=0)
            cos = g[m] @ direction / (np.linalg.norm(g[m])
                                      * np.linalg.norm(direction))
            assert cos == pytest.approx(1.0)

    def test_link_rate_default_is_generous(self):
        cfg = parse_config(SMALL_CONFIG)
        rate, budget = experiment.link_rate(cfg)
        assert rate > 1e6
        assert budget == int(rate * 600 // 8)

    def test_metrics_csv_shape(self):
        cfg = parse_config(SMALL_CONFIG)
        setup = experiment.build(cfg)
        result = experiment.run(setup)
        text = experiment.metrics_csv(result, "async")
        lines = text.strip().splitlines()
        assert lines[0] == experiment.CSV_HEADER
        assert len(lines) == 1 + len(setup.plan)
        # grad variance annotated on evaluation rounds
        assert any(line.split(",")[5] for line in lines[1:])

    def test_unknown_scheme_rejected(self):
        cfg = parse_config(SMALL_CONFIG)
        setup = experiment.build(cfg)
        with pytest.raises(ValueError):
            experiment.make_run(setup, "sync")

    def test_summary_text_mentions_key_fields(self):
        cfg = parse_config(SMALL_CONFIG)
        setup = experiment.build(cfg)
        result = experiment.run(setup)
        text = experiment.summary_text(setup, result, "async")
        for token in ("scheme:", "rounds:", "total uplink:", "expert groups:"):
            assert token in text


class TestRunCommand:
    def test_writes_all_outputs(self, tmp_path, config_file):
        out = tmp_path / "out"
        rc = cli.main(["run", "--config", str(config_file),
                       "--out", str(out), "--quiet"])
        assert rc == cli.EXIT_OK
        for name in ("metrics.csv", "assignment.txt", "contactplan.txt",
                     "checkpoint.bin", "summary.txt"):
            assert (out / name).exists(), name

    def test_metrics_byte_identical_across_runs(self, tmp_path, config_file):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            assert cli.main(["run", "--config", str(config_file),
                             "--out", str(out), "--quiet"]) == cli.EXIT_OK
        assert (out1 / "metrics.csv").read_bytes() == \
            (out2 / "metrics.csv").read_bytes()

    def test_seed_override_changes_metrics(self, tmp_path, config_file):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        cli.main(["run", "--config", str(config_file), "--out", str(out1),
                  "--quiet"])
        cli.main(["run", "--config", str(config_file), "--out", str(out2),
                  "--seed", "5", "--quiet"])
        assert (out1 / "metrics.csv").read_text() != \
            (out2 / "metrics.csv").read_text()

    def test_missing_config_exit_2(self, tmp_path):
        rc = cli.main(["run", "--config", str(tmp_path / "nope.toml"),
                       "--out", str(tmp_path / "o"), "--quiet"])
        assert rc == cli.EXIT_CONFIG

    def test_invalid_config_exit_2(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("schema_version = 1\nseed = 0\n[train]\nscheme = \"x\"\n")
        rc = cli.main(["run", "--config", str(bad),
                       "--out", str(tmp_path / "o"), "--quiet"])
        assert rc == cli.EXIT_CONFIG


class TestSplitCommand:
    def test_prints_and_writes(self, tmp_path, config_file, capsys):
        out = tmp_path / "split"
        rc = cli.main(["split", "--config", str(config_file),
                       "--out", str(out)])
        assert rc == cli.EXIT_OK
        captured = capsys.readouterr().out
        assert "assignment:" in captured
        assert (out / "assignment.txt").exists()
        assert (out / "split.txt").exists()


class TestLinkbudgetCommand:
    def test_reports_rate(self, config_file, capsys):
        rc = cli.main(["linkbudget", "--config", str(config_file)])
        assert rc == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "uplink rate:" in out
        assert "contact plan" in out

    def test_warns_when_link_down(self, tmp_path, capsys):
        path = tmp_path / "cfg.toml"
        path.write_text(SMALL_CONFIG + "[link]\nelevation_deg = 5.0\n")
        rc = cli.main(["linkbudget", "--config", str(path)])
        assert rc == cli.EXIT_OK
        assert "link is down" in capsys.readouterr().out


class TestBoundsCommand:
    def test_tabulates_hand_values(self, tmp_path, capsys):
        params = tmp_path / "bounds.toml"
        params.write_text(BOUND_PARAMS)
        rc = cli.main(["bounds", "--params", str(params), "--cycles", "100"])
        assert rc == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "12.05" in out
        assert "8.05" in out

    def test_empty_cycles_exit_2(self, tmp_path):
        params = tmp_path / "bounds.toml"
        params.write_text(BOUND_PARAMS)
        assert cli.main(["bounds", "--params", str(params)]) == cli.EXIT_CONFIG

    def test_unknown_key_exit_2(self, tmp_path):
        params = tmp_path / "bounds.toml"
        params.write_text(BOUND_PARAMS + "extra = 1.0\n")
        rc = cli.main(["bounds", "--params", str(params), "--cycles", "4"])
        assert rc == cli.EXIT_CONFIG

    def test_invalid_value_exit_2(self, tmp_path):
        params = tmp_path / "bounds.toml"
        params.write_text(BOUND_PARAMS.replace("gamma = 1.0", "gamma = 0.1"))
        rc = cli.main(["bounds", "--params", str(params), "--cycles", "4"])
        assert rc == cli.EXIT_CONFIG

    def test_unreadable_params_exit_3(self, tmp_path):
        params = tmp_path / "bounds.toml"
        params.write_text("not toml [")
        rc = cli.main(["bounds", "--params", str(params), "--cycles", "4"])
        assert rc == cli.EXIT_RUNTIME


class TestCompareCommand:
    def test_produces_report(self, tmp_path, config_file):
        out = tmp_path / "cmp"
        rc = cli.main(["compare", "--config", str(config_file),
                       "--out", str(out), "--seeds", "0",
                       "--schemes", "baseline", "async", "--quiet"])
        assert rc == cli.EXIT_OK
        report = (out / "report.csv").read_text()
        lines = report.strip().splitlines()
        assert len(lines) == 3  # header + two schemes
        assert (out / "report.txt").exists()
        assert (out / "baseline_seed0" / "metrics.csv").exists()
        assert (out / "async_seed0" / "metrics.csv").exists()

    def test_compare_deterministic(self, tmp_path, config_file):
        outs = []
        for name in ("c1", "c2"):
            out = tmp_path / name
            cli.main(["compare", "--config", str(config_file),
                      "--out", str(out), "--seeds", "0",
                      "--schemes", "async", "--quiet"])
            outs.append((out / "report.csv").read_bytes())
        assert outs[0] == outs[1]

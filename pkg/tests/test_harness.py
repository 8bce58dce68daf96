import csv
import re

import numpy as np
import pytest

from ddql import agents
from ddql.evaluation import ScorePanel, point_statistic
from ddql.harness import cli
from ddql.harness import config as config_mod
from ddql.harness.compare import GridMismatchError, compare, load_series
from ddql.harness.config import ConfigError, load, load_preset, loads
from ddql.harness.oracle import oracle_tables
from ddql.harness.runner import METRIC_COLUMNS, read_metrics, run_experiment
from ddql.tabular import value_iteration

TINY = """\
experiment.id = {id}
experiment.seeds = {seeds}
experiment.total_steps = 600
env.name = gridworld
env.width = 3
env.height = 3
env.max_steps = 30
agent.algorithm = {algo}
agent.hidden_sizes = 8
agent.minibatch_size = 8
agent.replay_start_size = 50
agent.replay_capacity = 1000
agent.epsilon_anneal_steps = 200
agent.target_interval = 10
eval.interval = 60
eval.phase_length = 100
"""


def tiny(tmp_path, id="tiny", seeds="1 2 3", algo="ddql", extra=""):
    path = tmp_path / f"{id}.cfg"
    path.write_text(TINY.format(id=id, seeds=seeds, algo=algo) + extra)
    return path


def metric_columns(csv_path):
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [i for i, c in enumerate(rows[0]) if c != "wallclock_seconds"]
    return [[r[i] for i in keep] for r in rows]


class TestConfig:
    def test_presets_load(self):
        desk = load_preset("desk")
        assert desk.total_steps == 150_000 and desk.seeds == tuple(range(10))
        assert desk.agent.hidden_sizes == (64, 64) and desk.agent.target_interval == 200
        full = load_preset("paper-fullscale")
        assert full.agent.target_interval == 7500 and full.max_steps == 27_000
        assert full.sticky_prob == 0.25 and full.agent.clip_rewards
        assert full.eval_interval == 250_000 and full.eval_phase_length == 125_000

    def test_preset_auto_fields_follow_algorithm(self):
        cfg = load_preset("desk", agent__algorithm="dqn")
        assert cfg.agent.head_mode == "single" and cfg.agent.update_frequency == 4

    def test_inherits_preset_and_overrides(self):
        cfg = loads("preset = desk\nexperiment.id = mine\nagent.gamma = 0.9\n")
        assert cfg.experiment_id == "mine" and cfg.agent.gamma == 0.9
        assert cfg.agent.replay_start_size == 1000

    @pytest.mark.parametrize("text,match", [
        ("preset = desk\nagent.bogus = 1\n", "unknown key"),
        ("preset = desk\nmystery.key = 1\n", "unknown key"),
        ("preset = desk\nagent.gamma = lots\n", "bad value"),
        ("preset = desk\nagent.gamma = 1.5\n", "agent"),
        ("preset = desk\nexperiment.seeds = 1 1\n", "distinct"),
        ("preset = desk\nenv.slip_prob = 2\n", "env"),
        ("preset = desk\nenv.n_arms = 3\n", "unknown key"),
        ("experiment.id = x\npreset = desk\n", "first"),
        ("preset = nope\n", "preset"),
        ("preset = desk\nagent.gamma\n", "key = value"),
        ("env.name = gridworld\n", "missing"),
    ])
    def test_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            loads(text)

    def test_text_round_trip(self, tmp_path):
        cfg = load(tiny(tmp_path))
        again = loads(cfg.to_text())
        assert again == cfg

    def test_seed_offset(self, tmp_path):
        cfg = load(tiny(tmp_path)).with_seed_offset(10)
        assert cfg.seeds == (11, 12, 13)

    def test_output_root_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv(config_mod.OUTPUT_ROOT_VAR, str(tmp_path))
        cfg = load(tiny(tmp_path))
        assert cfg.output_path() == tmp_path / "runs" / "tiny"


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs_root")
    a = run_experiment(tiny(root, "tiny-a"), root=root)
    b = run_experiment(tiny(root, "tiny-b"), root=root)
    dqn = run_experiment(tiny(root, "tiny-dqn", algo="dqn"), root=root)
    return root, a, b, dqn


class TestRunner:
    def test_row_accounting(self, tiny_runs):
        _, a, _, _ = tiny_runs
        assert a.ok and len(a.runs) == 3
        for r in a.runs:
            cols = read_metrics(r.csv_path)
            assert list(cols["phase_index"]) == list(range(10))
            assert list(cols["env_steps"]) == list(range(60, 601, 60))
            assert r.checkpoint_path.exists()
            assert np.all(cols["overestimation"] == cols["q_hat"] - cols["g_hat"])

    def test_csv_header_and_labels(self, tiny_runs):
        _, a, _, dqn = tiny_runs
        with open(a.runs[0].csv_path) as fh:
            assert tuple(fh.readline().strip().split(",")) == METRIC_COLUMNS
        assert set(read_metrics(a.runs[0].csv_path)["algorithm"]) == {"dh_ddql"}
        assert set(read_metrics(dqn.runs[0].csv_path)["algorithm"]) == {"dqn"}

    def test_experiments_are_deterministic(self, tiny_runs):
        _, a, b, _ = tiny_runs
        for ra, rb in zip(a.runs, b.runs):
            ca, cb = metric_columns(ra.csv_path), metric_columns(rb.csv_path)
            strip = lambda rows: [r[2:] for r in rows]  # noqa: E731
            assert strip(ca) == strip(cb)

    def test_seed_order_irrelevant(self, tiny_runs, tmp_path):
        root, a, _, _ = tiny_runs
        rev = run_experiment(tiny(tmp_path, "tiny-a", seeds="3 1"), root=tmp_path)
        by_seed = {r.seed: r for r in a.runs}
        for r in rev.runs:
            assert metric_columns(r.csv_path) == metric_columns(by_seed[r.seed].csv_path)

    def test_abort_is_isolated(self, tmp_path, monkeypatch):
        real_init, real_update = agents.DeepQAgent.initialize, agents.gradient_update

        def initialize(self, env):
            real_init(self, env)
            self.state_.aux["poison"] = self.random_state == 2
            return self

        def gradient_update(config, state):
            if state.aux.get("poison") and state.env_steps > 300:
                raise agents.DivergenceError("non-finite loss nan")
            return real_update(config, state)

        monkeypatch.setattr(agents.DeepQAgent, "initialize", initialize)
        monkeypatch.setattr(agents, "gradient_update", gradient_update)
        res = run_experiment(tiny(tmp_path), root=tmp_path)
        assert not res.ok
        status = {r.seed: r for r in res.runs}
        assert status[2].aborted and not status[1].aborted and not status[3].aborted
        marker = res.output_dir / "tiny-seed2.ABORTED"
        assert marker.exists() and "non-finite" in marker.read_text()
        assert 0 < status[2].n_rows < 10 and status[1].n_rows == 10
        assert not status[2].checkpoint_path.exists()

    def test_experiment_cfg_written(self, tiny_runs):
        _, a, _, _ = tiny_runs
        assert loads((a.output_dir / "experiment.cfg").read_text()).experiment_id == "tiny-a"


class TestCompare:
    def test_identical_data_gives_zero_delta(self, tiny_runs, tmp_path):
        root, *_ = tiny_runs
        res = compare(["tiny-a", "tiny-b"], "return", "mean", root / "runs", tmp_path, charts=False)
        per_env = [r for r in res.rows if r["env"] != "ALL"]
        assert [r["delta_auc"] for r in per_env] == [0.0, 0.0]
        assert res.table_path.exists()

    def test_iqm_matches_eval_module(self, tiny_runs, tmp_path):
        root, *_ = tiny_runs
        base = {"gridworld": (-1.0, 1.0)}
        res = compare(["tiny-a"], "return", "iqm", root / "runs", tmp_path, base, charts=False,
                      n_resamples=1000)
        agg = [r for r in res.rows if r["env"] == "ALL"][0]
        s = load_series("tiny-a", root / "runs")
        curves, _ = s.curves("gridworld", "mean_eval_return")
        panel = ScorePanel({"gridworld": [np.mean(c) for c in curves]}, base)
        assert agg["aggregate"] == point_statistic(panel, "iqm")
        assert agg["ci_low"] <= agg["aggregate"] <= agg["ci_high"]

    def test_charts_have_traces(self, tiny_runs, tmp_path):
        root, *_ = tiny_runs
        res = compare(["a=tiny-a", "dqn=tiny-dqn"], "overestimation", "mean", root / "runs", tmp_path)
        curves = [p for p in res.chart_paths if p.name.startswith("curves_")][0].read_text()
        assert curves.startswith("<?xml")
        for label in ("a", "dqn"):
            assert len(re.findall(rf"^trace env=gridworld series={label} ", curves, re.M)) == 3
            assert len(re.findall(rf"^mean env=gridworld series={label} ", curves, re.M)) == 1
        assert all(p.exists() for p in res.chart_paths)

    def test_merged_series(self, tiny_runs, tmp_path):
        root, *_ = tiny_runs
        run_experiment(tiny(tmp_path, "tiny-ext", seeds="4 5"), root=root)
        res = compare(["both=tiny-a+tiny-ext"], "return", "mean", root / "runs", tmp_path, charts=False)
        assert res.rows[0]["n_seeds"] == 5
        with pytest.raises(GridMismatchError):
            compare(["dup=tiny-a+tiny-b"], runs_dir=root / "runs", out_dir=tmp_path, charts=False)

    def test_grid_mismatch(self, tiny_runs, tmp_path):
        root, *_ = tiny_runs
        run_experiment(tiny(tmp_path, "tiny-two", seeds="1 2"), root=root)
        with pytest.raises(GridMismatchError):
            compare(["tiny-a", "tiny-two"], runs_dir=root / "runs", out_dir=tmp_path, charts=False)

    def test_missing_experiment(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            compare(["nothing"], runs_dir=tmp_path, charts=False)


class TestOracle:
    def test_maxbias(self):
        t = oracle_tables("maxbias", 0.99)
        assert t.q_star[0, 0] == pytest.approx(-0.099, abs=1e-9)
        assert t.q_star[0, 1] == 0.0
        assert oracle_tables("maxbias", 0.5).q_star[0, 1] == 0.0

    def test_deterministic_gridworld_matches_enumeration(self):
        t = oracle_tables("gridworld", 0.9, width=3, height=2, slip_prob=0.0, step_reward=-0.1)
        mdp = t.mdp
        # brute force: best discounted return over all action sequences of length <= 6
        def best(cell, depth):
            if cell == 5:
                return 0.0
            if depth == 0:
                return -np.inf
            out = -np.inf
            for a in range(4):
                nxt = int(np.argmax(mdp.transition[cell, a]))
                out = max(out, mdp.reward[cell, a, nxt] + 0.9 * best(nxt, depth - 1))
            return out

        for s in range(5):
            for a in range(4):
                nxt = int(np.argmax(mdp.transition[s, a]))
                assert t.q_star[s, a] == pytest.approx(mdp.reward[s, a, nxt] + 0.9 * best(nxt, 6))

    def test_uniform_policy_respects_mask(self):
        t = oracle_tables("maxbias", 0.9, n_arms=4)
        assert np.all(np.isfinite(t.q_uniform))
        np.testing.assert_allclose(t.q_star, value_iteration(t.mdp))


class TestCli:
    def test_oracle(self, tmp_path, capsys):
        out_csv = tmp_path / "o.csv"
        assert cli.main(["oracle", "maxbias", "--gamma", "0.99", "--csv", str(out_csv)]) == 0
        text = capsys.readouterr().out
        assert "-0.099000" in text
        rows = list(csv.DictReader(out_csv.open()))
        assert float(rows[0]["q_star"]) == pytest.approx(-0.099)

    def test_validate(self, tmp_path, capsys):
        path = tiny(tmp_path)
        assert cli.main(["validate", str(path), "--seed-offset", "5"]) == 0
        assert "[6, 7, 8]" in capsys.readouterr().out
        bad = tmp_path / "bad.cfg"
        bad.write_text("preset = desk\nagent.nope = 1\n")
        assert cli.main(["validate", str(bad)]) == 2
        assert "unknown key" in capsys.readouterr().err

    def test_train_and_compare_under_env_root(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(config_mod.OUTPUT_ROOT_VAR, str(tmp_path))
        path = tiny(tmp_path, "cli", seeds="0 1", extra="eval.interval = 300\n")
        assert cli.main(["train", str(path), "--seed-offset", "1"]) == 0
        assert (tmp_path / "runs" / "cli" / "cli-seed2.csv").exists()
        capsys.readouterr()
        assert cli.main(["compare", "cli", "--metric", "overestimation", "--stat", "median",
                         "--no-charts"]) == 0
        assert "cli" in capsys.readouterr().out

    def test_output_root_flag(self, tmp_path, capsys):
        assert cli.main(["--output-root", str(tmp_path), "oracle", "gridworld", "--param", "width=2",
                         "--param", "height=2"]) == 0
        assert (tmp_path / "oracle_gridworld.csv").exists()

    def test_unsupported_env(self, capsys):
        assert cli.main(["oracle", "pong"]) == 2

import csv
import json

import pytest
from pydantic import ValidationError

import lofo.cli as cli
from lofo.cli import build_parser, main, resolve_config
from lofo.config import PRESETS, ExperimentConfig, load_config, preset

TINY = ["--preset", "minigrid-lite", "--buffer", "fifo", "--capacity", "1000",
        "--phase1-steps", "60", "--phase2-steps", "60", "--eval-period", "60",
        "--eval-episodes", "1", "--seeds", "0"]
LAYOUT = {"curve.csv", "hist_p1.csv", "hist_p2.csv", "reward_p1.csv", "reward_p2.csv",
          "config.json"}


def parse(*argv):
    return resolve_config(build_parser().parse_args(["run", *argv]))


# --- configuration -------------------------------------------------------------

@pytest.mark.parametrize("name", PRESETS)
def test_presets_validate_without_overrides(name):
    cfg = load_config(preset_name=name)
    assert cfg.name == name


def test_mountaincar_defaults_follow_published_tables():
    cfg = load_config(preset_name="mountaincar")
    assert (cfg.buffer.d_local, cfg.buffer.n_local) == (0.005, 1)
    e = cfg.locality.embedding
    assert (e.hidden, e.embed_dim, e.activation) == ([64, 64, 64], 16, "tanh")
    assert (e.lr, e.beta, e.num_negatives, e.batch_size, e.collect_steps, e.epochs) == \
        (1e-4, 10.0, 128, 32, 100_000, 5)
    a = cfg.agent
    assert (a.value_lr, a.model_lr, a.epsilon, a.warmup_steps, a.target_sync) == \
        (5e-6, 5e-5, 0.5, 50_000, 500)
    assert (a.model_steps, a.planning_steps, a.model_batch, a.planning_batch) == (5, 5, 32, 32)
    assert a.model_net.hidden == [64, 64, 63, 64, 64] and a.q_net.hidden == [64, 64, 64, 64]
    s = cfg.schedule
    assert (s.phase1_steps, s.phase2_steps, s.eval_period, s.eval_episodes) == \
        (1_500_000, 3_000_000, 10_000, 10)
    assert len(cfg.seeds) == 10


def test_minigrid_preset_values():
    cfg = load_config(preset_name="minigrid")
    assert (cfg.buffer.d_local, cfg.buffer.n_local) == (0.001, 100)
    a = cfg.agent
    assert (a.value_lr, a.model_lr, a.epsilon, a.warmup_steps, a.target_sync) == \
        (6.25e-5, 1e-4, 0.5, 2000, 5000)
    lite = load_config(preset_name="minigrid-lite").schedule
    assert (lite.phase1_steps, lite.phase2_steps) == (100_000, 200_000)


def test_unknown_keys_are_rejected_everywhere():
    doc = preset("minigrid-lite")
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({**doc, "colour": "red"})
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({**doc, "agent": {**doc["agent"], "lr": 1.0}})


def test_precedence_preset_then_file_then_flags(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"schedule": {"eval_period": 500, "eval_episodes": 3},
                                "agent": {"epsilon": 0.2}}))
    cfg = parse("--preset", "minigrid-lite", "--config", str(path), "--eval-period", "700")
    assert cfg.schedule.eval_period == 700          # flag beats file
    assert cfg.schedule.eval_episodes == 3          # file beats preset
    assert cfg.agent.epsilon == 0.2
    assert cfg.schedule.phase1_steps == 100_000     # preset fills the rest


def test_best_fifo_baseline_flags():
    cfg = parse("--preset", "mountaincar", "--buffer", "fifo", "--capacity", "4500000")
    assert cfg.buffer.kind == "fifo" and cfg.buffer.capacity == 4_500_000
    assert cfg.buffer.d_local is None and cfg.locality.source == "none"
    assert cfg.agent == load_config(preset_name="mountaincar").agent


def test_lofo_flags_merge_into_preset_buffer():
    cfg = parse("--preset", "minigrid-lite", "--n-local", "50")
    assert (cfg.buffer.kind, cfg.buffer.d_local, cfg.buffer.n_local) == ("lofo", 0.001, 50)


# --- exit codes ----------------------------------------------------------------

@pytest.mark.parametrize("argv", [
    ["run", "--preset", "minigrid-lite", "--d-local", "-1"],
    ["run", "--preset", "minigrid-lite", "--d-local", "0"],
    ["run", "--preset", "nope"],
    ["run"],
    ["frobnicate"],
    [],
    ["run", "--preset", "minigrid-lite", "--seeds", "a,b"],
    ["sweep", *TINY, "--grid", "novalue"],
])
def test_invalid_input_exits_one(argv, tmp_path, monkeypatch):
    monkeypatch.setenv("LOFO_OUT", str(tmp_path))
    assert main(argv) == 1
    assert not any(tmp_path.iterdir())


def test_unknown_key_in_config_file_exits_one(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"buffer": {"kind": "lofo", "radius": 1}}))
    assert main(["run", "--preset", "minigrid-lite", "--config", str(path)]) == 1


def test_runtime_failure_exits_two(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("simulated")
    monkeypatch.setattr(cli, "run_seeds", boom)
    assert main(["run", *TINY, "--out", str(tmp_path)]) == 2


# --- commands ------------------------------------------------------------------

def test_run_writes_artifact_layout(tmp_path):
    assert main(["run", *TINY, "--seeds", "0,1", "--name", "demo", "--out", str(tmp_path)]) == 0
    root = tmp_path / "demo"
    for seed in ("0", "1"):
        assert {p.name for p in (root / seed).iterdir()} == LAYOUT
        resolved = json.loads((root / seed / "config.json").read_text())
        # defaults are expanded, so the copy alone reproduces the run
        assert resolved["agent"]["gamma"] == 0.99 and resolved["grid"]["x_bins"] == 20
        assert ExperimentConfig.model_validate(resolved).seeds == [0, 1]
    rows = list(csv.reader((root / "curve.csv").open()))
    assert rows[0] == ["step", "phase", "mean_return", "stderr", "n_runs"]
    assert [r[0] for r in rows[1:]] == ["60", "120"] and rows[1][4] == "2"


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("LOFO_OUT", str(tmp_path))
    assert main(["run", *TINY, "--name", "envroot"]) == 0
    assert (tmp_path / "envroot" / "0" / "curve.csv").exists()


def test_parallel_workers_match_serial(tmp_path):
    argv = ["run", *TINY, "--seeds", "0,1"]
    assert main([*argv, "--name", "serial", "--out", str(tmp_path)]) == 0
    assert main([*argv, "--name", "pool", "--workers", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "serial" / "curve.csv").read_bytes() == \
        (tmp_path / "pool" / "curve.csv").read_bytes()


def test_empty_sweep_is_a_no_op(tmp_path):
    assert main(["sweep", *TINY, "--out", str(tmp_path)]) == 0
    assert not any(tmp_path.iterdir())


def test_single_cell_sweep_equals_run(tmp_path):
    assert main(["run", *TINY, "--name", "r", "--out", str(tmp_path)]) == 0
    assert main(["sweep", *TINY, "--name", "s", "--grid", "buffer.capacity=1000",
                 "--out", str(tmp_path)]) == 0
    run_rows = list(csv.reader((tmp_path / "r" / "curve.csv").open()))
    sweep_rows = list(csv.reader((tmp_path / "s" / "sweep.csv").open()))
    assert sweep_rows[0] == ["buffer.capacity", *run_rows[0]]
    assert [r[1:] for r in sweep_rows[1:]] == run_rows[1:]


def test_sweep_grid_is_cartesian(tmp_path):
    assert main(["sweep", *TINY, "--name", "g", "--grid", "buffer.capacity=500,1000",
                 "--grid", "agent.epsilon=0.1,0.5", "--out", str(tmp_path)]) == 0
    rows = list(csv.reader((tmp_path / "g" / "sweep.csv").open()))[1:]
    cells = {(r[0], r[1]) for r in rows}
    assert cells == {("500", "0.1"), ("500", "0.5"), ("1000", "0.1"), ("1000", "0.5")}
    assert len(rows) == 4 * 2


def test_sweep_reports_partial_failure(tmp_path, monkeypatch):
    real = cli.run_seeds

    def flaky(config, root, name=None):
        if config.buffer.capacity == 500:
            raise RuntimeError("simulated")
        return real(config, root, name)

    monkeypatch.setattr(cli, "run_seeds", flaky)
    assert main(["sweep", *TINY, "--name", "f", "--grid", "buffer.capacity=500,1000",
                 "--out", str(tmp_path)]) == 2
    failures = json.loads((tmp_path / "f" / "sweep_failures.json").read_text())
    assert [f["cell"] for f in failures] == ["buffer.capacity=500"]
    rows = list(csv.reader((tmp_path / "f" / "sweep.csv").open()))[1:]
    assert {r[0] for r in rows} == {"1000"}


def test_train_locality_is_reproducible(tmp_path):
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps({"locality": {"embedding": {
        "collect_steps": 400, "epochs": 1, "num_negatives": 4, "hidden": [8]}}}))
    base = ["train-locality", "--preset", "mountaincar-lite", "--config", str(cfg)]
    a, b = tmp_path / "new" / "dir" / "a.json", tmp_path / "b.json"
    assert main([*base, "--output", str(a)]) == 0
    assert main([*base, "--output", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_oracle_command(capsys):
    assert main(["oracle", "--preset", "minigrid-lite"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["task_A"]["value"] == pytest.approx(3.7157, abs=1e-4)
    assert report["task_B"]["method"] == "dp-exact"


def test_export_renders_pgms(tmp_path):
    assert main(["run", *TINY, "--name", "x", "--out", str(tmp_path)]) == 0
    run_dir = tmp_path / "x" / "0"
    assert main(["export", str(run_dir), "--scale", "2"]) == 0
    for stem in ("hist_p1", "hist_p2", "reward_p1", "reward_p2"):
        assert (run_dir / f"{stem}.pgm").read_bytes().startswith(b"P5 16 16 255\n")
    assert main(["export", str(tmp_path / "missing")]) == 1

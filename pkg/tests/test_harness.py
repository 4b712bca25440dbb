import csv
import json
from dataclasses import fields

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsnpe import cli
from tsnpe.config import ConfigError, load_config, parse_override, run_config_keys
from tsnpe.engine import RunConfig

FAST = """
[run]
task = toy1d
rounds = 2
simulations = 200

[density]
components = 2
hidden = 10

[train]
batch_size = 50
max_epochs = 10
patience = 3

[truncation]
epsilon = 1e-3
m_threshold = 2000
k = 64

[metrics]
samples = 2000
c2st_samples = 500
"""


@pytest.fixture
def fast_ini(tmp_path):
    path = tmp_path / "fast.ini"
    path.write_text(FAST)
    return path


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def test_empty_config_gives_defaults():
    exp = load_config("")
    assert exp.run == RunConfig()
    assert exp.out is None and exp.observations == ()


def test_config_values_and_types():
    exp = load_config(FAST + "\n[output]\ndir = somewhere\nobservations = 0, 2\n")
    assert exp.run.rounds == 2 and exp.run.components == 2
    assert exp.run.train.batch_size == 50 and exp.run.epsilon == 1e-3
    assert exp.out == "somewhere" and exp.observations == (0, 2)
    assert exp.text.startswith("\n[run]")


def test_every_run_field_is_configurable():
    missing = {f.name for f in fields(RunConfig)} - run_config_keys() - {"train"}
    assert missing == set()


def test_all_errors_reported_together():
    text = "[run]\nrounds = two\nbogus = 1\n[nonsense]\na = 1\n[truncation]\nsampler = mh\n"
    with pytest.raises(ConfigError) as info:
        load_config(text, ["density.backend=maf", "noequals"])
    msg = "\n".join(info.value.errors)
    for needle in ("run.rounds", "run.bogus", "[nonsense]", "sampler", "backend", "noequals"):
        assert needle in msg


def test_overrides_beat_file_values():
    exp = load_config(FAST, ["run.rounds=5", "truncation.epsilon=0.01"])
    assert exp.run.rounds == 5 and exp.run.epsilon == 0.01


def test_benchmark_section_validation():
    with pytest.raises(ConfigError, match="methods is empty"):
        load_config("[benchmark]\ntasks = toy1d\nmethods =\nbudgets = 100\n")
    exp = load_config("[benchmark]\ntasks = toy1d, slcp\nbudgets = 100, 200\nseeds = 3\n")
    assert exp.benchmark.tasks == ("toy1d", "slcp") and exp.benchmark.seeds == (3,)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(["run", "train", "density"]), st.from_regex(r"[a-z_]{1,10}", fullmatch=True),
       st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc")), max_size=10))
def test_parse_override_round_trip(section, key, value):
    assert parse_override(f"{section}.{key}={value}") == (section, key, value.strip())


@pytest.mark.parametrize("bad", ["rounds=3", "run.rounds", ".x=1", "run.=1"])
def test_parse_override_rejects_malformed(bad):
    with pytest.raises(ConfigError):
        parse_override(bad)


def test_integer_fields_reject_fractions():
    with pytest.raises(ConfigError, match="integer"):
        load_config("[run]\nrounds = 2.5\n")
    assert load_config("[run]\nsimulations = 1e3\n").run.simulations == 1000


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def test_run_persists_config_and_rounds(tmp_path, fast_ini, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(fast_ini), "--out", str(out), "--set", "run.seed=4"]) == 0
    d = out / "toy1d_tsnpe_s4"
    assert (d / "config.ini").read_text() == FAST
    assert (d / "overrides.txt").read_text() == "run.seed=4\n"
    assert json.loads((d / "config.json").read_text())["seed"] == 4
    assert sorted(p.name for p in d.glob("round_*")) == ["round_1", "round_2"]
    assert "final status ok" in capsys.readouterr().out


def test_run_twice_gives_identical_metrics(tmp_path, fast_ini):
    for sub in ("a", "b"):
        assert cli.main(["run", "--config", str(fast_ini), "--out", str(tmp_path / sub)]) == 0
    for r in (1, 2):
        rel = f"toy1d_tsnpe_s0/round_{r}/metrics.json"
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_rounds_flag_gives_single_round(tmp_path, fast_ini):
    assert cli.main(["run", "--config", str(fast_ini), "--out", str(tmp_path), "--rounds", "1"]) == 0
    assert [p.name for p in (tmp_path / "toy1d_tsnpe_s0").glob("round_*")] == ["round_1"]


def test_multiple_observations_get_separate_directories(tmp_path, fast_ini):
    args = ["run", "--config", str(fast_ini), "--out", str(tmp_path), "--rounds", "1",
            "--set", "output.observations=0,1"]
    assert cli.main(args) == 0
    a = json.loads((tmp_path / "toy1d_tsnpe_s0_o0" / "config.json").read_text())
    b = json.loads((tmp_path / "toy1d_tsnpe_s0_o1" / "config.json").read_text())
    assert (a["observation"], b["observation"]) == (0, 1)


def test_env_var_sets_default_output(tmp_path, fast_ini, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.output_root(None) == tmp_path / "env"
    assert cli.output_root(None, "cfg") == cli.Path("cfg")
    assert cli.output_root("cli", "cfg") == cli.Path("cli")
    assert cli.main(["run", "--config", str(fast_ini), "--rounds", "1"]) == 0
    assert (tmp_path / "env" / "toy1d_tsnpe_s0" / "round_1" / "metrics.json").exists()


def test_malformed_key_exits_with_config_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nroundz = 3\n")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "run.roundz" in capsys.readouterr().err


def test_missing_config_file_is_config_error(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "none.ini")]) == cli.EXIT_CONFIG


def test_sampler_and_training_failures_have_distinct_codes(tmp_path, fast_ini, monkeypatch):
    from tsnpe.density import TrainingError
    from tsnpe.truncation import SamplerError

    def boom(exc):
        def f(*a, **k):
            raise exc
        return f

    monkeypatch.setattr(cli, "run", boom(SamplerError("no draws")))
    assert cli.main(["run", "--config", str(fast_ini), "--out", str(tmp_path)]) == cli.EXIT_SAMPLER
    monkeypatch.setattr(cli, "run", boom(TrainingError("nan loss")))
    assert cli.main(["run", "--config", str(fast_ini), "--out", str(tmp_path)]) == cli.EXIT_TRAINING
    assert len({cli.EXIT_OK, cli.EXIT_INPUT, cli.EXIT_CONFIG, cli.EXIT_SAMPLER, cli.EXIT_TRAINING}) == 5


def test_resume_flag_continues_run(tmp_path, fast_ini):
    args = ["run", "--config", str(fast_ini), "--out", str(tmp_path)]
    assert cli.main(args) == 0
    d = tmp_path / "toy1d_tsnpe_s0"
    before = (d / "round_2" / "metrics.json").read_bytes()
    (d / "round_2" / "metrics.json").unlink()
    assert cli.main(args + ["--resume"]) == 0
    assert (d / "round_2" / "metrics.json").read_bytes() == before


# ---------------------------------------------------------------------------
# coverage
# ---------------------------------------------------------------------------


def test_coverage_command_writes_curve(tmp_path, fast_ini, capsys):
    assert cli.main(["run", "--config", str(fast_ini), "--out", str(tmp_path)]) == 0
    d = tmp_path / "toy1d_tsnpe_s0"
    code = cli.main(["coverage", str(d), "--round", "1", "--m", "100", "--p", "100", "--strategy", "truncated"])
    assert code == 0
    assert "max deviation" in capsys.readouterr().out
    with open(d / "round_1" / "coverage.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["confidence_level", "empirical_coverage"] and len(rows) == 102
    assert float(rows[-1][1]) == 1.0


def test_coverage_on_absent_round_names_path(tmp_path, fast_ini, capsys):
    assert cli.main(["run", "--config", str(fast_ini), "--out", str(tmp_path), "--rounds", "1"]) == 0
    d = tmp_path / "toy1d_tsnpe_s0"
    assert cli.main(["coverage", str(d), "--round", "3", "--m", "100", "--p", "100"]) == cli.EXIT_INPUT
    assert "round_3" in capsys.readouterr().err
    (d / "round_1" / "estimator.bin").unlink()
    assert cli.main(["coverage", str(d), "--m", "100", "--p", "100"]) == cli.EXIT_INPUT
    assert "estimator.bin" in capsys.readouterr().err
    assert cli.main(["coverage", str(tmp_path / "nowhere")]) == cli.EXIT_INPUT


# ---------------------------------------------------------------------------
# benchmark and report
# ---------------------------------------------------------------------------

BENCH = FAST.replace("task = toy1d", "task = gaussian_linear") + """
[benchmark]
tasks = gaussian_linear
methods = npe, apt, tsnpe
budgets = 400, 600
seeds = 0, 1
rounds = 2
"""


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    ini = root / "bench.ini"
    ini.write_text(BENCH)
    assert cli.main(["benchmark", "--config", str(ini), "--out", str(root / "out")]) == 0
    return root


def test_benchmark_grid_creates_cells_and_table(bench_dir):
    out = bench_dir / "out"
    runs = [p for p in out.iterdir() if p.is_dir()]
    assert len(runs) == 12
    rows = cli.read_table(out / "benchmark.csv")
    assert {r["method"] for r in rows} == {"npe", "apt", "tsnpe"}
    npe_rounds = {r["round"] for r in rows if r["method"] == "npe"}
    assert npe_rounds == {"1"}
    metrics = {(r["method"], r["metric"]) for r in rows}
    assert ("tsnpe", "true_posterior_mass_in_hpr") in metrics and ("apt", "c2st") in metrics
    assert ("apt", "prior_mass_in_hpr") not in metrics


def test_benchmark_rerun_is_identical(bench_dir):
    ini = bench_dir / "bench.ini"
    assert cli.main(["benchmark", "--config", str(ini), "--out", str(bench_dir / "again")]) == 0
    assert (bench_dir / "again" / "benchmark.csv").read_bytes() == (bench_dir / "out" / "benchmark.csv").read_bytes()


def test_benchmark_empty_methods_is_error(tmp_path):
    code = cli.main(["benchmark", "--tasks", "toy1d", "--methods", "", "--budgets", "400", "--out",
                     str(tmp_path)])
    assert code == cli.EXIT_CONFIG


def test_benchmark_records_failed_cells(tmp_path, fast_ini):
    # 150 simulations over 2 rounds leaves 75 per round, below twice the batch size
    code = cli.main(["benchmark", "--config", str(fast_ini), "--tasks", "gaussian_linear", "--methods", "tsnpe",
                     "--budgets", "150", "--seeds", "0", "--bench-rounds", "2", "--out", str(tmp_path)])
    assert code == 0
    rows = cli.read_table(tmp_path / "benchmark.csv")
    assert rows[0]["metric"] == "status" and rows[0]["value"].startswith("failed")


def test_report_on_benchmark_table(bench_dir):
    assert cli.main(["report", str(bench_dir / "out")]) == 0
    rep = bench_dir / "out" / "report"
    with open(rep / "pivot_gaussian_linear.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["n_seeds"] == "2" for r in rows)
    assert all(float(r["min"]) <= float(r["median"]) <= float(r["max"]) for r in rows)
    first = (rep / "summary.md").read_bytes()
    assert cli.main(["report", str(bench_dir / "out" / "benchmark.csv")]) == 0
    assert (rep / "summary.md").read_bytes() == first  # idempotent


def test_report_on_run_dir(tmp_path, fast_ini):
    assert cli.main(["run", "--config", str(fast_ini), "--out", str(tmp_path), "--set", "coverage.enabled=true",
                     "--set", "coverage.m=100", "--set", "coverage.p=100"]) == 0
    d = tmp_path / "toy1d_tsnpe_s0"
    assert cli.main(["report", str(d)]) == 0
    with open(d / "report" / "coverage_round_2.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["level", "coverage"] and len(rows) == 102
    with open(d / "report" / "metrics.csv") as fh:
        assert len(list(csv.reader(fh))) == 3
    assert "# Run report" in (d / "report" / "summary.md").read_text()


def test_report_missing_input(tmp_path):
    assert cli.main(["report", str(tmp_path / "missing")]) == cli.EXIT_INPUT
    assert cli.main(["report", str(tmp_path)]) == cli.EXIT_INPUT

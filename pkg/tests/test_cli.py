import json
import math

import pytest

from reservoir_transformers import aucc as A
from reservoir_transformers import cli
from reservoir_transformers.errors import ConfigError, NumericError
from oracles import scan_time_to_fraction

SMOKE = {
    "task": "copy", "vocab_size": 6, "min_len": 2, "max_len": 5, "n_train": 24, "n_val": 6, "n_test": 6,
    "d_model": 16, "heads": 2, "layers": 3, "decoder_layers": 1, "dtype": "float64",
    "batch_size": 8, "max_steps": 4, "eval_interval_steps": 2, "eval_examples": 6, "warmup_steps": 0,
    "seeds": [1, 2],
    "variants": [
        {"model": "transformer"},
        {"model": "ffn_res", "n_reservoir": 1},
    ],
}


def write_config(tmp_path, obj=SMOKE):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(obj))
    return path


# -- configuration --------------------------------------------------------------------------


def test_parse_config_variants_inherit_base():
    cfgs = cli.parse_config(SMOKE)
    assert [c.model for c in cfgs] == ["transformer", "ffn_res"]
    assert cfgs[1].d_model == 16 and str(cfgs[1].stack_pattern()) == "LRL"
    assert cfgs[0].metric == "bleu" and cfgs[0].direction == "higher_better"


@pytest.mark.parametrize("patch,field", [
    ({"bogus": 1}, "bogus"),
    ({"max_steps": 0}, "max_steps"),
    ({"seeds": []}, "seeds"),
    ({"trainer_mode": "magic"}, "trainer_mode"),
    ({"layerdrop_p": 1.0, "trainer_mode": "layerdrop"}, "layerdrop_p"),
    ({"pattern": "LRLL"}, "pattern"),
    ({"n_reservoir": 3}, "n_reservoir"),
    ({"t_hat_seconds": -1}, "t_hat_seconds"),
])
def test_config_errors_name_the_field(patch, field):
    with pytest.raises(ConfigError, match=field):
        cli.parse_config({**SMOKE, "variants": [{"model": "x"}], **patch})


def test_duplicate_variant_names_rejected():
    with pytest.raises(ConfigError, match="unique"):
        cli.parse_config({**SMOKE, "variants": [{"model": "a"}, {"model": "a"}]})


def test_char_lm_config_builds_lm_spec():
    cfg = cli.ExperimentConfig(task="char_lm", layers=3, n_reservoir=1, kind="ffn_reservoir", context=16)
    spec = cfg.model_spec(1, 20)
    assert spec.mode == "lm" and str(spec.decoder_pattern) == "LRL"
    assert cfg.direction == "lower_better"


# -- runs -----------------------------------------------------------------------------------


def test_run_experiment_writes_artifacts_deterministically(tmp_path):
    cfgs = cli.parse_config(SMOKE)
    a = cli.run_experiment(cfgs, virtual_clock=True, out=tmp_path / "a")
    b = cli.run_experiment(cfgs, virtual_clock=True, out=tmp_path / "b")
    assert len(a["curves"]) == 4 and len(a["reports"]) == 2
    for pa, pb in zip(a["curves"], b["curves"]):
        assert pa.read_text() == pb.read_text()
    curve = A.read_curves_csv(tmp_path / "a" / "curves" / "ffn_res__seed2.csv")[0]
    assert curve.times == (0.0, 2.0, 4.0)
    rows = {r["model"]: r for r in cli.read_comparison_csv(a["comparison"])}
    assert rows["transformer"]["ratio"] == 1.0
    assert rows["transformer"]["trainable"] == rows["transformer"]["total"]
    assert rows["ffn_res"]["trainable"] < rows["ffn_res"]["total"]
    assert rows["ffn_res"]["frozen"] == 1
    assert max(r["aucc_normalized"] for r in rows.values()) == 1.0


def test_run_single_timing_excludes_evaluation():
    cfg = cli.parse_config({**SMOKE, "variants": [{"model": "t"}]})[0]
    res = cli.run_single(cfg, 1)
    times = res["curve"].times
    assert times[0] == 0.0 and all(b > a for a, b in zip(times, times[1:]))
    assert res["seconds_per_step"] > 0
    # training clock at the last checkpoint equals the summed step times
    assert times[-1] == pytest.approx(res["seconds_per_step"] * cfg.max_steps, rel=1e-9)


@pytest.mark.parametrize("mode", ["layerdrop", "backskip"])
def test_other_trainer_modes_run(mode):
    cfg = cli.parse_config({**SMOKE, "trainer_mode": mode, "backskip_warmup": 1,
                            "variants": [{"model": "m", "n_reservoir": 1}]})[0]
    res = cli.run_single(cfg, 1, virtual_clock=True)
    assert len(res["curve"]) == 3


def test_char_lm_run():
    cfg = cli.ExperimentConfig(task="char_lm", corpus_chars=4000, context=16, d_model=16, heads=2, layers=3,
                               n_reservoir=1, batch_size=4, max_steps=2, eval_interval_steps=1,
                               eval_examples=2, seeds=[1], dtype="float64")
    res = cli.run_single(cfg, 1, virtual_clock=True)
    assert res["curve"].direction == "lower_better"
    assert all(0 < v < 10 for v in res["curve"].values)


# -- comparison -----------------------------------------------------------------------------


def report(model, ttm, layers=6, family=None, frozen=0):
    summary = {
        "family": family or model, "layers": layers, "frozen": frozen, "pattern": "L" * layers,
        "max_metric": {"mean": 30.0, "std": 0.0}, "time_to_max": {"mean": ttm, "std": 0.0},
        "time_to_95": {"mean": ttm / 2, "std": 0.0}, "time_to_99": {"mean": ttm, "std": 0.0},
        "seconds_per_epoch": {"mean": 1.0, "std": 0.0}, "trainable": 10, "total": 10,
    }
    return A.AuccReport(model, 100.0, {1: 1.0}, 1.0, 0.0, 1.0, summary=summary)


def test_compare_ratio_matches_equal_depth_baseline():
    reports = [report("transformer6", 100.0), report("transformer8", 200.0, layers=8, family="transformer6"),
               report("res8", 100.0, layers=8, frozen=2)]
    rows = {r["model"]: r for r in cli.compare(reports, "transformer6")}
    assert rows["transformer6"]["ratio"] == 1.0
    assert rows["res8"]["ratio"] == 0.5


def test_compare_unknown_baseline():
    with pytest.raises(ConfigError, match="baseline"):
        cli.compare([report("a", 1.0)], "b")


def test_time_to_95_column_matches_scan():
    c = A.ConvergenceCurve("m", 1, [0, 10, 20, 30, 40], [0.0, 20.0, 28.0, 29.5, 30.0])
    assert A.time_to_fraction(c, 0.95) == scan_time_to_fraction(c.times, c.values, 0.95) == 30.0


def test_comparison_csv_roundtrip(tmp_path):
    rows = cli.compare([report("a", 10.0), report("b", 5.0, family="a")], "a")
    cli.write_comparison_csv(rows, tmp_path / "t.csv")
    back = cli.read_comparison_csv(tmp_path / "t.csv")
    assert [r["ratio"] for r in rows] == [1.0, 0.5]
    assert back == rows


# -- command line --------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMOKE, "variants": SMOKE["variants"][:1]})
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg), "--seeds", "3", "--virtual-clock", "--out", str(out)]) == 0
    assert (out / "curves" / "transformer__seed3.csv").exists()
    capsys.readouterr()
    assert cli.main(["aucc", "--curves", str(out / "curves" / "*.csv"), "--t-hat", "4"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload[0]["normalized"] == 1.0
    assert cli.main(["compare", "--reports", str(out / "reports" / "*.json"), "--baseline", "transformer"]) == 0
    assert "transformer" in capsys.readouterr().out


def test_cli_error_exit_codes(tmp_path, capsys):
    bad = write_config(tmp_path, {**SMOKE, "max_steps": 0})
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "max_steps" in capsys.readouterr().err
    assert cli.main(["aucc", "--curves", str(tmp_path / "none*.csv"), "--t-hat", "1"]) == 2
    (tmp_path / "x.json").write_text("{not json")
    assert cli.main(["run", "--config", str(tmp_path / "x.json")]) == 2


def test_numeric_error_exit_code(monkeypatch, tmp_path, capsys):
    def boom(*a, **k):
        raise NumericError("loss is nan", step=2)

    monkeypatch.setattr(cli, "run_experiment", boom)
    assert cli.main(["run", "--config", str(write_config(tmp_path))]) == 3
    assert "step 2" in capsys.readouterr().err


def test_workers_env_validation(monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "zero")
    with pytest.raises(ConfigError, match=cli.WORKERS_ENV):
        cli._workers()
    monkeypatch.setenv(cli.WORKERS_ENV, "2")
    assert cli._workers() == 2


def test_parallel_workers_match_serial(monkeypatch, tmp_path):
    cfgs = cli.parse_config({**SMOKE, "variants": SMOKE["variants"][:1]})
    serial = cli.run_experiment(cfgs, virtual_clock=True, out=tmp_path / "s")
    monkeypatch.setenv(cli.WORKERS_ENV, "2")
    parallel = cli.run_experiment(cfgs, virtual_clock=True, out=tmp_path / "p")
    assert serial["aucc"]["transformer"].per_seed == parallel["aucc"]["transformer"].per_seed
    assert not math.isnan(serial["rows"][0]["ratio"])

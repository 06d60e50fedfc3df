import json

import pandas as pd
import pytest

from bacon_cli import main
from config_run import RunConfig, load_config, write_config_file
from evaluation.replicates import REPLICATE_COLUMNS, run_replicates, summarize_replicates
from pipeline import predict_new_subjects, run_pipeline, run_stage
from shared.artifacts import RunDirectory, read_cocluster, read_json, read_stamp
from shared.errors import ConfigError, DataError
from shared.models import EvalReport
from synth.generators import generate_dataset

SHORT_CHAINS = {"burn_in": 10, "kept": 20, "thin": 2, "log_every": 1000}


@pytest.fixture
def sim_paths(tmp_path):
    params = {"n": 40, "p": 24, "r0": 0.975, "size_s": 2, "window": [0.2, 0.8]}
    return generate_dataset("response", params, seed=11, out_dir=tmp_path / "sim")


def make_config(sim_paths, run_dir, **overrides):
    values = dict(
        input=str(sim_paths["design"]),
        responses=str(sim_paths["responses"]),
        truth=str(sim_paths["truth"]),
        run_dir=str(run_dir),
        rep_mode="b",
        stages="1,2,eval",
        **SHORT_CHAINS,
    )
    values.update(overrides)
    return RunConfig(**values)


def test_synth_then_fit_writes_every_artifact(sim_paths, tmp_path):
    config = make_config(sim_paths, tmp_path / "run")
    results = run_pipeline(config)
    assert [r.stage for r in results] == ["ingest", "stage1", "ls_allocation", "stage2", "predict", "eval"]
    assert not any(r.skipped for r in results)

    run_dir = RunDirectory(config.run_dir)
    for path in (run_dir.design, run_dir.column_map, run_dir.responses, run_dir.cocluster,
                 run_dir.ls_allocation, run_dir.regression, run_dir.predictions, run_dir.eval, run_dir.manifest):
        assert path.exists(), path
    pihat = read_cocluster(run_dir.cocluster)
    alloc = read_json(run_dir.ls_allocation)
    assert pihat.shape == (len(alloc["labels"]), len(alloc["labels"]))
    assert alloc["q"] == max(alloc["labels"]) + 1

    report = EvalReport.model_validate(read_json(run_dir.eval))
    assert 0.0 <= report.tau_hat <= 1.0
    assert report.q_hat == alloc["q"]
    assert report.tpr is not None and report.tnr is not None
    assert report.pct_mse_reduction is not None and report.oracle_pct_mse_reduction is not None
    assert report.d_ci[0] <= report.d_ci[1]

    predictions = pd.read_csv(run_dir.predictions)
    assert list(predictions.columns) == ["subject_id", "mean", "lower", "upper", "y"]
    assert len(predictions) == len(read_json(run_dir.responses)["test_idx"])
    assert (predictions["lower"] <= predictions["upper"]).all()


def test_rerun_skips_and_config_changes_rerun_downstream(sim_paths, tmp_path):
    config = make_config(sim_paths, tmp_path / "run")
    run_pipeline(config)
    again = run_pipeline(config)
    assert all(r.skipped for r in again)

    changed = run_pipeline(config.model_copy(update={"sigma_beta2": 10.0}))
    skipped = {r.stage: r.skipped for r in changed}
    assert skipped == {"ingest": True, "stage1": True, "ls_allocation": True,
                       "stage2": False, "predict": False, "eval": False}

    forced = run_pipeline(config, force=True)
    assert not any(r.skipped for r in forced)


def test_same_seed_gives_byte_identical_chains(sim_paths, tmp_path):
    first = make_config(sim_paths, tmp_path / "a")
    second = make_config(sim_paths, tmp_path / "b")
    run_pipeline(first)
    run_pipeline(second)
    for stage in ("stage1", "stage2"):
        a = RunDirectory(first.run_dir).chain_file(stage, 0).read_bytes()
        b = RunDirectory(second.run_dir).chain_file(stage, 0).read_bytes()
        assert a == b
    assert RunDirectory(first.run_dir).cocluster.read_bytes() == RunDirectory(second.run_dir).cocluster.read_bytes()


def test_multiple_chains_are_pooled(sim_paths, tmp_path):
    config = make_config(sim_paths, tmp_path / "run", chains=2, workers=2, stages="1")
    run_pipeline(config)
    run_dir = RunDirectory(config.run_dir)
    assert run_dir.chain_file("stage1", 1).exists()
    assert len(read_stamp(run_dir, "stage1").extra["seconds_per_sweep"]) == 2


def test_latent_vector_mode_runs_refinement(sim_paths, tmp_path):
    config = make_config(sim_paths, tmp_path / "run", rep_mode="c", stages="1,1b,2,eval")
    results = run_pipeline(config)
    assert "stage1b" in [r.stage for r in results]
    run_dir = RunDirectory(config.run_dir)
    configuration = pd.read_csv(run_dir.ls_configuration)
    alloc = read_json(run_dir.ls_allocation)
    assert configuration.shape == (40, alloc["q"] + 1)
    assert set(configuration.drop(columns=["subject_id"]).stack().unique()) <= {0, 1}
    samples = [json.loads(line) for line in run_dir.chain_file("stage2", 0).read_text().splitlines()]
    assert all(rep == -1 for s in samples for rep in s["reps"])


def test_stage_needs_its_upstream(sim_paths, tmp_path):
    config = make_config(sim_paths, tmp_path / "empty")
    with pytest.raises(DataError):
        run_stage("stage2", config)
    with pytest.raises(ConfigError):
        run_stage("stage9", config)


def test_missing_inputs_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        run_pipeline(RunConfig(run_dir=str(tmp_path / "run"), stages="1"))
    with pytest.raises(ConfigError):
        RunConfig(stages="1,3").selected_stages()


def test_new_subjects_are_scored(sim_paths, tmp_path):
    config = make_config(sim_paths, tmp_path / "run")
    run_pipeline(config)
    design = pd.read_csv(sim_paths["design"]).head(3)
    design["subject_id"] = ["new-a", "new-b", "new-c"]
    design.to_csv(tmp_path / "new.csv", index=False)
    out = predict_new_subjects(config, tmp_path / "new.csv")
    frame = pd.read_csv(out)
    assert frame["subject_id"].tolist() == ["new-a", "new-b", "new-c"]
    assert list(frame.columns) == ["subject_id", "mean", "lower", "upper"]

    design.drop(columns=[design.columns[1]]).to_csv(tmp_path / "short.csv", index=False)
    with pytest.raises(DataError):
        predict_new_subjects(config, tmp_path / "short.csv")


def test_config_file_round_trip(tmp_path, monkeypatch):
    monkeypatch.delenv("BACON_SEED", raising=False)
    config = RunConfig(seed=7, kept=33, rep_mode="c", run_dir=str(tmp_path / "r"))
    write_config_file(config, tmp_path / "run.env")
    loaded = load_config(str(tmp_path / "run.env"))
    assert loaded == config
    monkeypatch.setenv("BACON_SEED", "99")
    assert load_config(str(tmp_path / "run.env")).seed == 99
    assert load_config(str(tmp_path / "run.env"), {"seed": 5}).seed == 5
    (tmp_path / "bad.env").write_text("colour=blue\n")
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "bad.env"))
    with pytest.raises(ConfigError):
        load_config(None, {"r_floor": "0.3"})


def test_config_hash_ignores_runtime_keys():
    base = RunConfig()
    assert base.config_hash() == RunConfig(run_dir="elsewhere", workers=8).config_hash()
    assert base.config_hash() != RunConfig(seed=1).config_hash()


def test_replicate_table(tmp_path):
    base = RunConfig(run_dir=str(tmp_path / "reps"), workers=2, **SHORT_CHAINS)
    frame = run_replicates("bacon", {"n": 30, "p": 16}, 2, base)
    assert list(frame.columns) == REPLICATE_COLUMNS
    assert set(frame["replicate"]) == {0, 1}
    assert {"bacon", "kmeans"} <= set(frame["method"])
    assert (tmp_path / "reps" / "replicates.csv").exists()
    summary = summarize_replicates(frame)
    tau_row = summary[(summary["method"] == "bacon") & (summary["metric"] == "tau_hat")]
    assert tau_row["count"].iloc[0] == 2


def test_cli_exit_codes(sim_paths, tmp_path):
    run_dir = str(tmp_path / "cli")
    chain_flags = ["--burn_in", "5", "--kept", "10", "--thin", "1", "--log_every", "1000"]
    assert main(["synth", "--out", str(tmp_path / "s2"), "--param", "n=20", "--param", "p=12"]) == 0
    assert main(["synth", "--out", str(tmp_path / "s3"), "--param", "oops"]) == 2
    assert main(["fit", "--run_dir", run_dir, "--stages", "1"]) == 2
    assert main(["fit", "--input", str(sim_paths["design"]), "--truth", str(sim_paths["truth"]),
                 "--run_dir", run_dir, "--stages", "1,eval", *chain_flags]) == 0
    assert main(["report", "--run_dir", run_dir]) == 0
    assert main(["eval", "--run_dir", run_dir, "--truth", str(sim_paths["truth"]), *chain_flags]) == 0
    assert main(["report", "--run_dir", str(tmp_path / "nothing")]) == 3

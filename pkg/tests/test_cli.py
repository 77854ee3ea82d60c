import hashlib
import subprocess
import sys
import time

import pytest

from salient_grounding import cli, config, evalbench
from salient_grounding import pipeline as pl
from salient_grounding.synthdata import load_dataset


def run_cli(*argv, out):
    return cli.main([*argv, "--profile", "test", "--out", str(out)])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_data_is_reproducible(tmp_path):
    for sub in ("a", "b"):
        assert run_cli("gen-data", out=tmp_path / sub) == 0
    for name in ("videos.dcf", "queries.tsv", "manifest.txt"):
        assert sha(tmp_path / "a" / "dataset" / name) == sha(tmp_path / "b" / "dataset" / name)
    assert (tmp_path / "a" / "run.log").read_text().count("sha256=") == 3
    assert "profile=test" in (tmp_path / "a" / "config.txt").read_text()


def test_seed_flag_changes_the_data(tmp_path):
    run_cli("gen-data", out=tmp_path / "a")
    cli.main(["gen-data", "--profile", "test", "--seed", "7", "--out", str(tmp_path / "b")])
    assert sha(tmp_path / "a" / "dataset" / "videos.dcf") != sha(tmp_path / "b" / "dataset" / "videos.dcf")


def test_flops_report_reproduces_published_rows(tmp_path, capsys):
    assert run_cli("flops-report", out=tmp_path) == 0
    rows = (tmp_path / "flops.csv").read_text().splitlines()
    assert rows[0] == "source,sidekick,expert,total,reduction_pct"
    totals = {(r.split(",")[0], r.split(",")[2]): float(r.split(",")[3]) for r in rows[1:]}
    assert totals[("ego4d-nlq", "30%")] == 222.1
    assert totals[("ego4d-nlq", "50%")] == 355.7
    assert totals[("ego4d-goalstep", "30%")] == 686.3
    assert totals[("ego4d-goalstep", "50%")] == 1100.7
    assert "222.1" in capsys.readouterr().out


def test_flops_report_custom_costs(tmp_path):
    assert cli.main(["flops-report", "--profile", "test", "--out", str(tmp_path), "--d-full", "10",
                     "--e-full", "100", "--ratios", "0.2"]) == 0
    assert "custom,100%,20%,30.0,70.0" in (tmp_path / "flops.csv").read_text()
    assert cli.main(["flops-report", "--out", str(tmp_path), "--d-full", "10"]) == cli.EXIT_INPUT


def test_flops_report_is_fast_from_a_fresh_interpreter(tmp_path):
    t0 = time.time()
    res = subprocess.run([sys.executable, "-m", "salient_grounding.cli", "flops-report", "--profile", "test",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert time.time() - t0 < 5


def test_missing_inputs_exit_with_input_code(tmp_path):
    assert run_cli("select", out=tmp_path) == cli.EXIT_INPUT
    assert "gen-data" in (tmp_path / "run.log").read_text()
    assert run_cli("eval", out=tmp_path / "x") == cli.EXIT_INPUT
    assert cli.main(["gen-data", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == cli.EXIT_INPUT
    assert cli.main(["gen-data", "--profile", "test", "--set", "data.n_videos=zero",
                     "--out", str(tmp_path)]) == cli.EXIT_INPUT


def test_corrupt_container_is_reported(tmp_path):
    run_cli("gen-data", out=tmp_path)
    path = tmp_path / "dataset" / "videos.dcf"
    path.write_bytes(path.read_bytes()[:-3])
    assert run_cli("train-sidekick", out=tmp_path) == cli.EXIT_INPUT
    assert "truncated" in (tmp_path / "run.log").read_text()


def test_config_file_and_override_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("profile = test\nratio = 0.4\ngrounder.levels = 3\n")
    cfg = config.load(f, None, {"ratio": "0.6"})
    assert cfg.profile == "test" and cfg.ratio == 0.6 and cfg.grounder.levels == 3


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in ("gen-data", "train-sidekick", "select", "extract", "train-grounder", "infer", "eval"):
        assert run_cli(cmd, out=out) == 0, cmd
    return out


def test_pipeline_writes_every_artifact(full_run):
    for name in ("dataset/videos.dcf", "ckpt/encoders.dcf", "ckpt/grounder.dcf", "ckpt/sidekick_losses.tsv",
                 "selection.dcf", "features.dcf", "preds.tsv", "report.txt", "run.log", "config.txt"):
        assert (full_run / name).exists(), name
    report = (full_run / "report.txt").read_text()
    assert "R1@0.5=" in report and "version=" in report


def test_eval_matches_in_process_evaluation(full_run):
    cfg = config.load(None, "test")
    ds = load_dataset(full_run / "dataset", cfg)
    preds = pl.parse_predictions((full_run / "preds.tsv").read_text())
    gts = {q.qid: q.span for q in ds.queries}
    assert set(preds) == {q.qid for q in ds.split("val")}
    rep = evalbench.evaluate([[p[:2] for p in preds[q]] for q in preds], [gts[q] for q in preds])
    written = evalbench.EvalReport.from_key_values((full_run / "report.txt").read_text())
    assert written.n_queries == rep.n_queries
    for k, v in rep.recalls.items():
        assert written.recalls[k] == pytest.approx(v, abs=1e-4)


def test_eval_rejects_unknown_query(full_run, tmp_path):
    bad = tmp_path / "preds.tsv"
    bad.write_text("not-a-query\t0.0\t1.0\t0.5\n")
    rc = cli.main(["eval", "--profile", "test", "--out", str(full_run), "--preds", str(bad)])
    assert rc == cli.EXIT_CHECK

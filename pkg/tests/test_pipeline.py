import json
import os
import shutil
import subprocess
import sys

import pytest

from asrtl import cli, pipeline
from asrtl.audio import read_manifest, read_wav, resample, write_wav
from asrtl.features import read_archive
from asrtl.nnet import TrainLog
from asrtl.pipeline import (ConfigError, MissingArtifactError, PipelineError, StageContext, experiment_grid,
                            load_config, read_csv, run_all, run_stage, source_utt, subseed)

TINY = """\
[experiment]
seed = 3
out_dir = run

[corpus]
parent_utts = 30
child_utts = 16
child_dev_utts = 6
parent_phones = 8
child_phones = 6
parent_words = 20
child_words = 10

[gmm]
passes = 3
max_gauss = 40

[ivector]
dim = 4
ubm_components = 4
iters = 2

[nnet]
tdnn_dim = 8
cell_dim = 4
parent_epochs = 1
epochs = 1
minibatch = 4
parent_minibatch = 4
diagnostic_utts = 4

[transfer]
k = 2
lr_multiplier = 0, 1

[decoder]
beam = 8
nbest = 3
"""


def write_cfg(tmp_path, text=TINY, name="exp.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    cfg = load_config(write_cfg(d))
    run_all(cfg)
    return cfg


# ---- config -------------------------------------------------------------------

def test_defaults_and_overrides(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "[experiment]\nseed = 4\n"), ["nnet.minibatch=16", "transfer.k=2,4"])
    assert cfg.seed == 4
    assert cfg["nnet.minibatch"] == 16
    assert cfg["transfer.k"] == [2, 4]
    assert cfg["transfer.lr_multiplier"] == [0.0, 0.25, 1.0]
    assert cfg["nnet.lr_initial"] == 0.001
    assert cfg.out_dir == os.path.join(str(tmp_path), "runs", "default")


@pytest.mark.parametrize("text,line", [
    ("[experiment]\nseed = 1\n[nnet]\nbogus = 3\n", 4),
    ("[experiment]\nseed = x\n", 2),
    ("\n\n[nope]\nseed = 1\n", 3),
    ("seed = 1\n", 1),
    ("[experiment]\nseed = 1\nthis line is garbage\n", 3),
    ("[nnet]\nminibatch = 4\nminibatch = 5\n", 3),
    ("[corpus]\n\nshared_fraction = 1.5\n", 3),
    ("[features]\nsample_rate = 4000\n", 2),
])
def test_config_errors_carry_line_numbers(tmp_path, text, line):
    path = write_cfg(tmp_path, text)
    with pytest.raises(ConfigError, match=r"exp\.ini:%d" % line):
        load_config(path)


def test_config_error_kinds(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "missing.ini"))
    path = write_cfg(tmp_path, "[experiment]\nseed = 1\n")
    with pytest.raises(ConfigError, match="--set"):
        load_config(path, ["nnet.minibatch"])
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(path, ["nnet.nothing=1"])
    with pytest.raises(ConfigError, match="--set nnet.minibatch"):
        load_config(path, ["nnet.minibatch=abc"])
    with pytest.raises(ConfigError):
        load_config(path, ["nnet.lr_final=0.1"])
    with pytest.raises(ConfigError):
        load_config(path, ["corpus.source=manifest"])


def test_subseed_is_stable_and_distinct():
    assert subseed(0, "prep", "a") == subseed(0, "prep", "a")
    assert len({subseed(0, "prep", "a"), subseed(1, "prep", "a"), subseed(0, "gmm", "a"),
                subseed(0, "prep", "b")}) == 4
    assert 0 <= subseed(5, "x", "y") < 2 ** 31


def test_experiment_grid_order(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "[transfer]\nk = 2, 4, 6\n"))
    grid = experiment_grid(cfg)
    assert [g[0] for g in grid][:4] == ["baseline", "k2_x0", "k2_x0.25", "k2_x1"]
    assert len(grid) == 10  # 3 x 3 grid plus the baseline
    assert len({tc.seed for _, tc in grid}) == 1


def test_source_utt():
    assert source_utt("sp0.9-child-00001") == "child-00001"
    assert source_utt("sp1.1-x") == "x"
    assert source_utt("child-00001") == "child-00001"


# ---- stage DAG -----------------------------------------------------------------

def test_score_before_decode_names_decode(tmp_path):
    cfg = load_config(write_cfg(tmp_path))
    os.makedirs(os.path.join(cfg.out_dir, "prep"))
    with open(os.path.join(cfg.out_dir, "prep", "DONE.json"), "w") as f:
        json.dump({"outputs": {}}, f)
    with pytest.raises(MissingArtifactError) as e:
        run_stage("score", cfg)
    assert e.value.stage == "decode"
    assert "decode" in str(e.value)


def test_undeclared_input_rejected(tiny_run):
    ctx = StageContext(tiny_run, "score")
    with pytest.raises(PipelineError):
        ctx.input("train-gmm", "child/final.amg")
    with pytest.raises(MissingArtifactError):
        ctx.input("decode", "no-such-file.hyp")


def test_markers_cover_every_stage(tiny_run):
    for stage in pipeline.STAGES:
        with open(os.path.join(tiny_run.out_dir, stage, "DONE.json")) as f:
            marker = json.load(f)
        assert marker["stage"] == stage
        declared = set(pipeline.UPSTREAM[stage])
        assert {k.split("/", 1)[0] for k in marker["inputs"]} <= declared
        for rel, digest in marker["outputs"].items():
            assert pipeline.file_hash(os.path.join(tiny_run.out_dir, stage, rel)) == digest


def test_report_shapes(tiny_run):
    root = tiny_run.out_dir
    rows = read_csv(os.path.join(root, "results.csv"))
    assert [r["config"] for r in rows] == ["baseline", "k2_x0", "k2_x1"]
    assert all(float(r["cer"]) >= 0 for r in rows)
    assert set(rows[0]) == {"config", "k", "x", "ivector_source", "cer", "wer", "final_valid_logprob",
                            "iterations"}
    timing = read_csv(os.path.join(root, "timing.csv"))
    assert [r["config"] for r in timing] == ["baseline", "k2_x0", "k2_x1"]
    for r in rows:
        log = TrainLog.from_csv(os.path.join(root, "curves", r["config"] + ".csv"))
        assert len(log.records) == int(r["iterations"]) + 1


def test_rerun_train_parent_identical(tiny_run):
    path = os.path.join(tiny_run.out_dir, "train-parent", "parent.net")
    before = pipeline.file_hash(path)
    run_stage("train-parent", tiny_run)
    assert pipeline.file_hash(path) == before


def test_end_to_end_deterministic(tiny_run, tmp_path):
    again = load_config(write_cfg(tmp_path), ["experiment.out_dir=run2"])
    run_all(again)
    a = open(os.path.join(tiny_run.out_dir, "results.csv")).read()
    b = open(os.path.join(again.out_dir, "results.csv")).read()
    assert a == b


def test_manifest_source(tiny_run, tmp_path):
    src = os.path.join(tiny_run.out_dir, "gen-corpus")
    dirs = {}
    for name in pipeline.SETS:
        dst = tmp_path / name
        shutil.copytree(os.path.join(src, name), dst)
        dirs[name] = str(dst)
    # one child file arrives at 16 kHz and must be brought back to 8 kHz
    rows = read_manifest(os.path.join(dirs["child"], "manifest.tsv"))
    utt0, wav0 = rows[0][0], rows[0][1]
    assert wav0.startswith(dirs["child"])
    write_wav(wav0, resample(read_wav(wav0), 16000))
    text = TINY + "\n".join(["", "[features]", "augment = false"]) + "\n"
    cfg = load_config(write_cfg(tmp_path, text), ["corpus.source=manifest",
                                                 "corpus.parent_dir=%s" % dirs["parent"],
                                                 "corpus.child_dir=%s" % dirs["child"],
                                                 "corpus.child_dev_dir=%s" % dirs["child_dev"],
                                                 "experiment.out_dir=man"])
    run_stage("gen-corpus", cfg)
    run_stage("prep", cfg)
    ref = open(os.path.join(tiny_run.out_dir, "prep", "child", "text")).read()
    assert open(os.path.join(cfg.out_dir, "prep", "child", "text")).read() == ref
    a = read_archive(os.path.join(tiny_run.out_dir, "prep", "child", "gmm.fea"))
    b = read_archive(os.path.join(cfg.out_dir, "prep", "child", "gmm.fea"))
    assert b[utt0].num_frames == a[utt0].num_frames


# ---- command line ----------------------------------------------------------------

def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    good = write_cfg(tmp_path)
    bad = write_cfg(tmp_path, "[nnet]\nminibatch = many\n", "bad.ini")
    assert cli.main(["score", "--config", bad]) == 3
    assert "bad.ini:2" in capsys.readouterr().err
    assert cli.main(["score", "--config", good]) == 4
    assert "prep" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        cli.main(["no-such-stage", "--config", good])
    assert e.value.code == 2

    def boom(name, cfg):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(pipeline, "run_stage", boom)
    assert cli.main(["prep", "--config", good]) == 5
    assert "disk on fire" in capsys.readouterr().err
    monkeypatch.setattr(pipeline, "run_stage", lambda name, cfg: None)
    assert cli.main(["prep", "--config", good, "--set", "nnet.minibatch=2"]) == 0


def test_console_script_usage():
    out = subprocess.run([sys.executable, "-m", "asrtl.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "--config" in out.stdout and "--set" in out.stdout

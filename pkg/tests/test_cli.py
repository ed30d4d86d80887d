import hashlib
import json
import re
from pathlib import Path

import cv2
import numpy as np
import pytest

from sealbench import __version__, cli
from sealbench.exceptions import EigensolverError
from sealbench.features import DistanceMatrix, average_matrices, pool_variance
from sealbench.imaging import load_image, save_image
from sealbench.seal import upscale
from sealbench.testset import SETestSetManifest

TABLE1_CSV = """model,AR,RPR_I,RPR_A,RPR_U
BSRNet,0.59,0.42,0.72,0.27
RealESRNet-GD,0.43,0.37,0.74,0.33
SwinIR,0.41,0.24,0.58,0.29
RealESRNet,0.27,0.28,0.63,0.28
SRResNet,0.00,0.02,0.00,0.03
DASR,0.00,0.01,0.00,0.02
RDSR,0.08,0.23,0.63,0.21
"""


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def inputs(tmp_path_factory, astronaut, data_dir):
    root = tmp_path_factory.mktemp("inputs")
    save_image(cv2.resize(astronaut, (64, 64), interpolation=cv2.INTER_AREA), root / "ref.png")
    save_image(cv2.resize(astronaut[:256, 256:], (64, 64), interpolation=cv2.INTER_AREA), root / "ref2.png")
    (root / "clean").mkdir()
    for name in ("astronaut", "chelsea", "coffee"):
        img = load_image(data_dir / f"{name}.png")
        save_image(cv2.resize(img, (60, 48), interpolation=cv2.INTER_AREA), root / "clean" / f"{name}.png")
    return root


@pytest.fixture(scope="module")
def pipeline(inputs, tmp_path_factory):
    """pool -> cluster -> build-testset -> lines, shared by the read-only tests below."""
    run = tmp_path_factory.mktemp("run")
    assert cli.main(["pool", "--references", str(inputs / "ref.png"), "--n", "30", "--seed", "7",
                     "--out", str(run / "pool")]) == 0
    assert cli.main(["cluster", "--pool", str(run / "pool"), "--k", "5", "--out", str(run / "cl")]) == 0
    assert cli.main(["build-testset", "--recipes", str(run / "cl" / "representatives.jsonl"),
                     "--clean", str(inputs / "clean"), "--out", str(run / "ts")]) == 0
    assert cli.main(["lines", "--testset", str(run / "ts"), "--gt", str(inputs / "clean"),
                     "--out", str(run / "line.csv")]) == 0
    return run


def _fake_model(run, method):
    m = SETestSetManifest.load(run / "ts")
    out = run / f"sr_{method}"
    for case in m.cases:
        (out / case.case_id).mkdir(parents=True, exist_ok=True)
        for e in case.entries:
            save_image(upscale(load_image(m.lr_path(e)), 4, method), out / case.case_id / f"{e.image_id}.png")
    return out


def test_pool_twice_identical(inputs, tmp_path, monkeypatch):
    hashes = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.chdir(d)
        assert cli.main(["pool", "--references", str(inputs / "ref.png"), "--n", "12", "--seed", "7", "--out", "p"]) == 0
        hashes.append((sha(d / "p/pool.json"), sha(d / "p/recipes.jsonl"), sha(d / "p/pool_summary.json")))
    assert hashes[0] == hashes[1]


def test_pool_missing_reference(tmp_path, capsys):
    missing = tmp_path / "nowhere.png"
    assert cli.main(["pool", "--references", str(missing), "--n", "5", "--out", str(tmp_path / "p")]) == 3
    assert str(missing) in capsys.readouterr().err


def test_pool_summary_variance(pipeline):
    summary = json.loads((pipeline / "pool/pool_summary.json").read_text())
    m = DistanceMatrix.load(pipeline / "pool/distances/ref.hist-l1.sealdm")
    assert summary["variance"]["ref"] == pool_variance(m)
    assert m.n == 30


def test_cluster_outputs(pipeline):
    reps = (pipeline / "cl/representatives.jsonl").read_text().splitlines()
    assert len(reps) == 5
    doc = json.loads((pipeline / "cl/cluster.json").read_text())
    assert len(doc["representatives"]) == 5 and sum(doc["cluster_sizes"]) == 30
    assert doc["matrix"].startswith("single reference")
    pool_recipes = (pipeline / "pool/recipes.jsonl").read_text().splitlines()
    for r in doc["representatives"]:
        assert pool_recipes[r["pool_index"]] in reps


def test_cluster_two_references_averages(inputs, tmp_path):
    assert cli.main(["pool", "--references", str(inputs / "ref.png"), str(inputs / "ref2.png"), "--n", "20",
                     "--seed", "1", "--out", str(tmp_path / "p")]) == 0
    assert cli.main(["cluster", "--pool", str(tmp_path / "p"), "--k", "3", "--out", str(tmp_path / "c")]) == 0
    doc = json.loads((tmp_path / "c/cluster.json").read_text())
    assert doc["matrix"].startswith("average of per-reference matrices")
    avg = average_matrices([DistanceMatrix.load(tmp_path / f"p/distances/{r}.hist-l1.sealdm") for r in ("ref", "ref2")])
    assert np.array_equal(avg.values, DistanceMatrix.load(tmp_path / "p/distances/average.hist-l1.sealdm").values)


def test_cluster_k_too_large(pipeline, tmp_path):
    assert cli.main(["cluster", "--pool", str(pipeline / "pool"), "--k", "31", "--out", str(tmp_path)]) == 2
    assert cli.main(["cluster", "--pool", str(pipeline / "pool"), "--k", "1", "--out", str(tmp_path)]) == 2


def test_cluster_eigensolver_failure(pipeline, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise EigensolverError("no convergence")

    monkeypatch.setattr(cli, "spectral_cluster", boom)
    assert cli.main(["cluster", "--pool", str(pipeline / "pool"), "--k", "3", "--out", str(tmp_path)]) == 4


def test_build_testset_counts_and_verify(pipeline, capsys):
    m = SETestSetManifest.load(pipeline / "ts")
    assert m.K == 5 and sum(len(c.entries) for c in m.cases) == 15
    assert cli.main(["verify", str(pipeline / "ts"), "--replay"]) == 0
    assert cli.main(["verify", str(pipeline / "pool")]) == 0


def test_verify_detects_tampering(pipeline, tmp_path):
    import shutil

    shutil.copytree(pipeline / "ts", tmp_path / "ts")
    victim = next((tmp_path / "ts/cases").rglob("*.png"))
    save_image(np.zeros((12, 15, 3), np.uint8), victim)
    assert cli.main(["verify", str(tmp_path / "ts")]) == 5


def test_threads_do_not_change_outputs(inputs, tmp_path, monkeypatch):
    outs = []
    for threads, env in ((None, "3"), ("2", None)):
        if env:
            monkeypatch.setenv("SEAL_THREADS", env)
        else:
            monkeypatch.delenv("SEAL_THREADS", raising=False)
        d = tmp_path / f"t{threads}{env}"
        d.mkdir()
        monkeypatch.chdir(d)
        args = ["pool", "--references", str(inputs / "ref.png"), "--n", "10", "--out", "p"]
        if threads:
            args += ["--threads", threads]
        assert cli.main(args) == 0
        outs.append((sha(d / "p/pool.json"), sha(d / "p/distances/ref.hist-l1.sealdm")))
    # the worker count is not part of the echoed run config
    assert outs[0] == outs[1]
    monkeypatch.setenv("SEAL_THREADS", "many")
    assert cli.main(["pool", "--references", str(inputs / "ref.png"), "--n", "4", "--out", "q"]) == 2


def test_config_file_and_overrides(inputs, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"seed": 3, "n": 6, "references": [str(inputs / "ref.png")],
                               "pipeline": {"jpeg_quality": [40, 50]}}))
    assert cli.main(["pool", "--config", str(cfg), "--n", "8", "--out", str(tmp_path / "p")]) == 0
    doc = json.loads((tmp_path / "p/pool.json").read_text())
    echo = doc["config"]["run_config"]
    assert doc["n"] == 8 and echo["n"] == 8 and echo["seed"] == 3
    assert echo["pipeline"]["jpeg_quality"] == [40, 50] and doc["config"]["tool_version"] == __version__
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sede": 1}))
    assert cli.main(["pool", "--config", str(bad), "--out", str(tmp_path / "q")]) == 2
    bad.write_text("{not json")
    assert cli.main(["pool", "--config", str(bad), "--out", str(tmp_path / "q")]) == 2


def test_score_eval_rank_report(pipeline, inputs, capsys):
    run = pipeline
    for method in ("nearest", "bilinear", "bicubic"):
        sr = _fake_model(run, method)
        assert cli.main(["score", "--testset", str(run / "ts"), "--sr", str(sr), "--gt", str(inputs / "clean"),
                         "--model", method, "--out", str(run / f"{method}.csv")]) == 0
        assert cli.main(["eval", "--scores", str(run / f"{method}.csv"), "--line", str(run / "line.csv"),
                         "--out", str(run / f"{method}.json")]) == 0
    nearest = json.loads((run / "nearest.json").read_text())
    assert nearest["AR"] == 0 and all(c["RPR"] == 0.5 for c in nearest["cases"])
    assert nearest["config_echo"]["tool_version"] == __version__
    bicubic = json.loads((run / "bicubic.json").read_text())
    assert bicubic["AR"] == 1

    capsys.readouterr()
    reports = [str(run / f"{m}.json") for m in ("nearest", "bilinear", "bicubic")]
    assert cli.main(["rank", *reports, "--out", str(run / "rank.json")]) == 0
    ranked = json.loads((run / "rank.json").read_text())
    assert ranked["models"][0]["model_id"] == "bicubic" and ranked["models"][-1]["rank"] == "x"
    assert (run / "rank.txt").read_text() == capsys.readouterr().out

    svg_path = run / "chart.svg"
    assert cli.main(["report", "--line", str(run / "line.csv"), "--reports", reports[1], reports[2],
                     "--out", str(svg_path)]) == 0
    svg = svg_path.read_text()
    polylines = re.findall(r'<polyline[^>]*points="([^"]*)"', svg)
    assert len(polylines) == 2 + 2
    assert all(len(p.split()) == 5 for p in polylines)
    assert __version__ in svg


def test_rank_table1_fixture(tmp_path, capsys):
    (tmp_path / "t1.csv").write_text(TABLE1_CSV)
    assert cli.main(["rank", "--summary", str(tmp_path / "t1.csv")]) == 0
    lines = capsys.readouterr().out.splitlines()[1:]
    assert [ln.split()[-1] for ln in lines] == ["1", "2", "3", "4", "×", "×", "×"]
    assert [ln.split()[0] for ln in lines[:4]] == ["BSRNet", "RealESRNet-GD", "SwinIR", "RealESRNet"]


def test_rank_exclusive_flag_changes_table1(tmp_path, capsys):
    (tmp_path / "t1.csv").write_text(TABLE1_CSV)
    assert cli.main(["rank", "--summary", str(tmp_path / "t1.csv"), "--exclusive"]) == 0
    lines = capsys.readouterr().out.splitlines()[1:]
    assert [ln.split()[0] for ln in lines[1:3]] == ["SwinIR", "RealESRNet-GD"]


def test_score_missing_outputs_exit5(pipeline, inputs, tmp_path):
    assert cli.main(["score", "--testset", str(pipeline / "ts"), "--sr", str(tmp_path), "--gt", str(inputs / "clean"),
                     "--model", "m", "--out", str(tmp_path / "s.csv")]) == 5


def test_eval_mismatched_line_exit5(pipeline, tmp_path):
    (tmp_path / "s.csv").write_text("model,metric,case_id,image_id,value\nm,psnr,other,a,20\n")
    assert cli.main(["eval", "--scores", str(tmp_path / "s.csv"), "--line", str(pipeline / "line.csv"),
                     "--out", str(tmp_path / "r.json")]) == 5


def test_toy_command(inputs, tmp_path, capsys):
    assert cli.main(["toy", "--kind", "Blur100", "--reference", str(inputs / "ref.png"), "--out", str(tmp_path),
                     "--evaluate", "--restarts", "2"]) == 0
    doc = json.loads((tmp_path / "toy.json").read_text())
    assert doc["count"] == 100 and set(doc["purity"]) == {"hist-l1", "mse", "ssim-dissimilarity"}
    assert len(list((tmp_path / "images").glob("*.png"))) == 100


def test_version(capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["--version"])
    assert ei.value.code == 0 and __version__ in capsys.readouterr().out

import re

import cv2
import numpy as np
import pytest

from sealbench.degrade import PipelineConfig, sample_recipe
from sealbench.exceptions import DataMismatchError, DegenerateLineError
from sealbench.imaging import make_rng, save_image
from sealbench.plot import report_svg
from sealbench.seal import LineSet, SealReport, builtin_line, upscale, upscaler_scores
from sealbench.testset import build_se_testset


@pytest.fixture(scope="module")
def se5(tmp_path_factory, data_dir):
    from sealbench.imaging import load_image

    root = tmp_path_factory.mktemp("se5")
    clean = []
    for name in ("astronaut", "chelsea", "coffee"):
        p = root / f"{name}.png"
        save_image(cv2.resize(load_image(data_dir / f"{name}.png"), (96, 80), interpolation=cv2.INTER_AREA), p)
        clean.append(p)
    # mild recipes keep the fixture in the regime where interpolation quality matters
    cfg = PipelineConfig(noise_sigma=(1, 3), blur_sigma=(0.1, 0.6), jpeg_quality=(90, 95), poisson_log10_scale=(3.5, 4))
    rng = make_rng(21)
    recipes = [sample_recipe(rng, cfg, recipe_id=f"r{i}") for i in range(5)]
    return build_se_testset(recipes, clean, root / "ts"), clean


def test_upscale_shape():
    img = np.zeros((5, 7, 3), np.uint8)
    for m in ("nearest", "bilinear", "bicubic"):
        assert upscale(img, 4, m).shape == (20, 28, 3)


def test_nearest_never_better_than_bicubic_on_average(se5):
    m, clean = se5
    near = upscaler_scores(m, clean, "nearest")
    cub = upscaler_scores(m, clean, "bicubic")
    assert np.mean(list(near.values())) <= np.mean(list(cub.values()))


def test_builtin_line_provenance_and_gate(se5):
    m, clean = se5
    line = builtin_line(m, clean, "nearest", "bicubic")
    assert line.provenance == "builtin-upscaler(nearest|bicubic)" and line.K == 5
    # the reversed pairing inverts on at least one case and must be rejected
    with pytest.raises(DegenerateLineError):
        builtin_line(m, clean, "bicubic", "nearest")


def test_builtin_line_missing_gt(se5):
    m, clean = se5
    with pytest.raises(DataMismatchError):
        upscaler_scores(m, clean[:1])


def _line_and_reports(k=7, models=3):
    ids = [f"c{i}" for i in range(k)]
    acc = [20 + (i * 3) % k for i in range(k)]
    line = LineSet(ids, acc, [a + 2 for a in acc], "psnr")
    reps = [SealReport("m%d" % j, 0.5, 0.1, None, None, ids, [a + j for a in acc]) for j in range(models)]
    return line, reps


def test_svg_structure():
    line, reps = _line_and_reports()
    svg = report_svg(line, reps, title="demo <&>")
    pts = re.findall(r'<polyline[^>]*points="([^"]*)"', svg)
    assert len(pts) == len(reps) + 2 and all(len(p.split()) == 7 for p in pts)
    assert "demo &lt;&amp;&gt;" in svg and svg.count("<svg") == 1
    assert report_svg(line, reps) == report_svg(line, reps)


def test_svg_cases_sorted_by_difficulty():
    line, reps = _line_and_reports()
    svg = report_svg(line, reps[:1])
    acc_pts = re.findall(r'<polyline[^>]*points="([^"]*)"', svg)[0].split()
    ys = [float(p.split(",")[1]) for p in acc_pts]
    # ascending acceptance score means decreasing SVG y
    assert ys == sorted(ys, reverse=True)


def test_svg_rejects_foreign_report():
    line, reps = _line_and_reports()
    reps[0].case_ids = ["x"] * 7
    with pytest.raises(DataMismatchError):
        report_svg(line, reps)

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sealbench.degrade import (
    DegradationRecipe,
    DegradationStep,
    PipelineConfig,
    RecipeDegrader,
    apply_recipe,
    apply_step,
    gaussian_kernel,
    parse_recipe,
    read_recipes_jsonl,
    sample_recipe,
    serialize_recipe,
    write_recipes_jsonl,
)
from sealbench.exceptions import ConfigError, ParamError, RecipeParseError, SizeError
from sealbench.imaging import make_rng, to_float
from sealbench.iqa import psnr

FD = DegradationStep.final_downsample


def _recipe(*steps, sf=4):
    return DegradationRecipe("t", "shuffled", tuple(steps) + (FD(sf),), sf)


# ------------------------------------------------------------------ steps


@pytest.mark.parametrize(
    "make",
    [
        lambda: DegradationStep.gaussian_blur(0.0),
        lambda: DegradationStep.gaussian_blur(16.5),
        lambda: DegradationStep.gaussian_blur(1.0, kernel_size=4),
        lambda: DegradationStep.gaussian_blur(1.0, kernel_size=23),
        lambda: DegradationStep.resize(0.0),
        lambda: DegradationStep.resize(4.5),
        lambda: DegradationStep.resize(1.0, "lanczos"),
        lambda: DegradationStep.jpeg(0),
        lambda: DegradationStep.jpeg(101),
        lambda: DegradationStep.gaussian_noise(-1.0, 1),
        lambda: DegradationStep.gaussian_noise(5.0, None),
        lambda: DegradationStep.poisson_noise(0.0, 1),
        lambda: DegradationStep("jpeg", {"quality": 50}, seed=3),
        lambda: DegradationStep("sharpen", {}),
    ],
)
def test_invalid_steps_rejected(make):
    with pytest.raises(ParamError):
        make()


def test_bounds_inclusive():
    DegradationStep.gaussian_blur(16.0, kernel_size=3)
    DegradationStep.resize(4.0)
    DegradationStep.jpeg(1)
    DegradationStep.jpeg(100)


def test_recipe_needs_single_trailing_downsample():
    blur = DegradationStep.gaussian_blur(1.0)
    with pytest.raises(ParamError):
        DegradationRecipe("r", "shuffled", (blur,))
    with pytest.raises(ParamError):
        DegradationRecipe("r", "shuffled", (FD(4), blur))
    with pytest.raises(ParamError):
        DegradationRecipe("r", "shuffled", (FD(4), FD(4)))
    with pytest.raises(ParamError):
        DegradationRecipe("r", "shuffled", (FD(2),), scale_factor=4)


def test_zero_noise_is_identity(small_natural):
    out = apply_step(small_natural, DegradationStep.gaussian_noise(0.0, 7))
    assert np.array_equal(out, to_float(small_natural))


def test_unit_resize_is_identity(small_natural):
    out = apply_step(small_natural, DegradationStep.resize(1.0, "bilinear"))
    assert np.array_equal(out, to_float(small_natural))


def test_blur_of_impulse_is_kernel():
    img = np.zeros((31, 31, 3))
    img[15, 15] = 1.0
    out = apply_step(img, DegradationStep.gaussian_blur(1.5, kernel_size=13))
    ax = np.arange(-6, 7, dtype=float)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * 1.5**2))
    g /= g.sum()
    for c in range(3):
        assert np.allclose(out[9:22, 9:22, c], g, atol=1e-6, rtol=0)
    outside = np.ones((31, 31), bool)
    outside[9:22, 9:22] = False
    assert np.all(np.abs(out[outside]) < 1e-6)


@pytest.mark.parametrize("sx,sy,angle", [(1.0, 3.0, 0.3), (2.5, 0.7, 2.0), (1.2, 1.2, 1.0)])
def test_anisotropic_kernel_matches_covariance_form(sx, sy, angle):
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    inv = np.linalg.inv(rot @ np.diag([sx**2, sy**2]) @ rot.T)
    ax = np.arange(-7, 8, dtype=float)
    pts = np.stack(np.meshgrid(ax, ax), axis=-1)  # (row, col, [x, y])
    expo = np.einsum("...i,ij,...j->...", pts, inv, pts)
    ref = np.exp(-0.5 * expo)
    ref /= ref.sum()
    assert np.allclose(gaussian_kernel(sx, sy, angle, 15), ref, atol=1e-12)


def test_blur_preserves_constant_mean():
    img = np.full((40, 40, 3), 0.37)
    out = apply_step(img, DegradationStep.gaussian_blur(2.0, 0.8, 0.6, 15))
    assert abs(out.mean() - 0.37) < 1e-6


def test_noise_step_replay_and_salt(small_natural):
    step = DegradationStep.gaussian_noise(10.0, 42)
    a, b = apply_step(small_natural, step), apply_step(small_natural, step)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, apply_step(small_natural, step, salt=(1,)))


@pytest.mark.parametrize(
    "step",
    [
        DegradationStep.gaussian_noise(10.0, 3, gray=True),
        DegradationStep.speckle_noise(20.0, 3),
        DegradationStep.poisson_noise(100.0, 3),
        DegradationStep.poisson_noise(300.0, 3, gray=True),
    ],
)
def test_noise_kinds_stay_in_range(step, small_natural):
    out = apply_step(small_natural, step)
    assert out.min() >= 0 and out.max() <= 1 and out.shape == small_natural.shape
    assert not np.array_equal(out, to_float(small_natural))


def test_gray_noise_is_same_across_channels():
    img = np.full((16, 16, 3), 0.5)
    out = apply_step(img, DegradationStep.gaussian_noise(5.0, 9, gray=True))
    assert np.array_equal(out[:, :, 0], out[:, :, 1]) and np.array_equal(out[:, :, 1], out[:, :, 2])


def test_jpeg_step_quantizes(small_natural):
    out = apply_step(small_natural, DegradationStep.jpeg(30))
    assert np.array_equal(out, np.rint(out * 255) / 255)


def test_order_sensitivity(small_natural):
    blur, noise = DegradationStep.gaussian_blur(2.0, kernel_size=11), DegradationStep.gaussian_noise(15.0, 5)
    a = apply_recipe(small_natural, _recipe(blur, noise))
    b = apply_recipe(small_natural, _recipe(noise, blur))
    assert not np.array_equal(a, b)


# ---------------------------------------------------------------- recipes


def test_degenerate_recipe_is_plain_bicubic_downsample(small_natural):
    import cv2

    r = _recipe(DegradationStep.resize(1.0, "bilinear"), DegradationStep.gaussian_noise(0.0, 1))
    out = apply_recipe(small_natural, r)
    ref = np.clip(cv2.resize(to_float(small_natural), (16, 16), interpolation=cv2.INTER_CUBIC), 0, 1)
    assert out.shape == (16, 16, 3)
    assert np.array_equal(out, ref)


def test_recipe_requires_divisible_input(small_natural):
    with pytest.raises(SizeError):
        apply_recipe(small_natural[:63], _recipe())


def test_sampled_recipes_give_quarter_size(small_natural):
    import cv2

    gt = cv2.resize(small_natural, (128, 128))
    rng = make_rng(3)
    for _ in range(8):
        r = sample_recipe(rng)
        out = apply_recipe(gt, r)
        assert out.shape == (32, 32, 3)
        assert np.array_equal(out, apply_recipe(gt, r))


def test_forced_family():
    cfg = PipelineConfig(p_shuffled=1.0, p_high_order=0.0)
    rng = make_rng(0)
    assert all(sample_recipe(rng, cfg).family == "shuffled" for _ in range(20))
    cfg = PipelineConfig(p_shuffled=0.0, p_high_order=1.0)
    r = sample_recipe(make_rng(0), cfg)
    assert r.family == "high-order"
    kinds = [s.kind for s in r.steps]
    assert kinds[0] == "gaussian-blur" and kinds[1] == "resize" and kinds[3] == "jpeg" and len(kinds) == 9


def test_sampling_deterministic():
    a = [sample_recipe(make_rng(11)) for _ in range(3)]
    b = [sample_recipe(make_rng(11)) for _ in range(3)]
    assert a == b


def test_recipe_regenerates_from_source_seed():
    r = sample_recipe(make_rng(4))

    class Fixed:
        def integers(self, *a, **k):
            return np.uint64(r.source_seed)

    assert sample_recipe(Fixed()) == r


def test_family_fraction_within_binomial_bound():
    rng = make_rng(2024)
    fam = [sample_recipe(rng).family for _ in range(10_000)]
    frac = fam.count("shuffled") / len(fam)
    assert 0.47 <= frac <= 0.53


def test_pipeline_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(p_shuffled=0.7, p_high_order=0.7)
    with pytest.raises(ConfigError):
        PipelineConfig(noise_sigma=(10, 300))
    with pytest.raises(ConfigError):
        PipelineConfig(kernel_size=(8, 8))
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"bogus": 1})
    cfg = PipelineConfig(jpeg_quality=(50, 60))
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# ---------------------------------------------------------- serialization

MINIMAL = (
    '{"schema_version":1,"recipe_id":"mini","family":"shuffled","scale_factor":2,"source_seed":5,'
    '"steps":[{"kind":"gaussian-blur","sigma_x":1.5,"sigma_y":0.5,"angle":0.25,"kernel_size":9},'
    '{"kind":"gaussian-noise","sigma":12,"gray":true,"seed":77},'
    '{"kind":"final-downsample","scale_factor":2}]}'
)


def test_parse_hand_written_recipe():
    r = parse_recipe(MINIMAL)
    assert r.recipe_id == "mini" and r.family == "shuffled" and r.scale_factor == 2 and r.source_seed == 5
    assert [s.kind for s in r.steps] == ["gaussian-blur", "gaussian-noise", "final-downsample"]
    assert r.steps[0].params == {"sigma_x": 1.5, "sigma_y": 0.5, "angle": 0.25, "kernel_size": 9}
    assert r.steps[1].params == {"sigma": 12.0, "gray": True} and r.steps[1].seed == 77
    assert r.steps[0].seed is None


def test_serialization_is_canonical():
    r = parse_recipe(MINIMAL)
    text = serialize_recipe(r)
    assert serialize_recipe(parse_recipe(text)) == text
    assert text.startswith('{"schema_version":1,"recipe_id":"mini"')


def test_unknown_kind_names_kind():
    bad = MINIMAL.replace('"gaussian-noise"', '"salt-noise"')
    with pytest.raises(RecipeParseError) as ei:
        parse_recipe(bad)
    assert "salt-noise" in str(ei.value) and ei.value.position == "steps[1].kind"


def test_syntax_error_has_offset():
    with pytest.raises(RecipeParseError) as ei:
        parse_recipe(MINIMAL[:40])
    assert isinstance(ei.value.position, int)


def test_bad_param_is_parse_error():
    with pytest.raises(RecipeParseError):
        parse_recipe(MINIMAL.replace('"kernel_size":9', '"kernel_size":10'))
    with pytest.raises(RecipeParseError):
        parse_recipe(MINIMAL.replace('"schema_version":1', '"schema_version":2'))


def test_jsonl_roundtrip(tmp_path):
    rng = make_rng(1)
    rs = [sample_recipe(rng) for _ in range(5)]
    write_recipes_jsonl(rs, tmp_path / "r.jsonl")
    assert read_recipes_jsonl(tmp_path / "r.jsonl") == rs


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_roundtrip_any_sampled_recipe(seed):
    r = sample_recipe(make_rng(seed))
    assert parse_recipe(serialize_recipe(r)) == r


def test_more_noise_lowers_psnr(small_natural):
    import cv2

    gt = cv2.resize(small_natural, (128, 128))
    clean = apply_recipe(gt, _recipe())
    vals = []
    for sigma in (5.0, 10.0, 20.0):
        out = apply_recipe(gt, _recipe(DegradationStep.gaussian_noise(sigma, 8)))
        vals.append(psnr(out, clean))
    assert all(math.isfinite(v) for v in vals)
    assert vals[0] > vals[1] > vals[2]


def test_degrader_estimator(small_natural):
    r = _recipe(DegradationStep.jpeg(50))
    est = RecipeDegrader(recipe=r, quantize=True).fit()
    assert est.get_params() == {"recipe": r, "quantize": True}
    out = est.transform([small_natural])
    assert out[0].dtype == np.uint8 and out[0].shape == (16, 16, 3)
    with pytest.raises(ParamError):
        RecipeDegrader().fit()

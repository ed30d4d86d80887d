"""Degradation operators, replayable recipes and the sampling pipelines.

A :class:`DegradationRecipe` is an ordered list of fully parameterized
:class:`DegradationStep` objects. Stochastic steps carry their own noise seed,
so applying a recipe is a pure function of (image, recipe).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import cv2
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigError, ParamError, RecipeParseError, SizeError
from .imaging import check_image, draw_seed, jpeg_roundtrip, make_rng, to_float, to_uint8

SCHEMA_VERSION = 1

# Parameter names per kind, in canonical serialization order.
STEP_PARAMS = {
    "gaussian-blur": ("sigma_x", "sigma_y", "angle", "kernel_size"),
    "resize": ("scale", "mode"),
    "gaussian-noise": ("sigma", "gray"),
    "poisson-noise": ("scale", "gray"),
    "speckle-noise": ("sigma", "gray"),
    "jpeg": ("quality",),
    "final-downsample": ("scale_factor",),
}
STOCHASTIC_KINDS = frozenset({"gaussian-noise", "poisson-noise", "speckle-noise"})
RESIZE_MODES = {"area": cv2.INTER_AREA, "bilinear": cv2.INTER_LINEAR, "bicubic": cv2.INTER_CUBIC}
FAMILIES = ("shuffled", "high-order")

_INT_PARAMS = {"kernel_size", "quality", "scale_factor"}
_BOOL_PARAMS = {"gray"}
_STR_PARAMS = {"mode"}

MAX_BLUR_SIGMA = 16.0
MAX_NOISE_SIGMA = 255.0
MAX_RESIZE_SCALE = 4.0


def _check_range(name, value, lo, hi, lo_open=False):
    ok = (value > lo if lo_open else value >= lo) and value <= hi
    if not ok or math.isnan(value):
        bracket = "(" if lo_open else "["
        raise ParamError(f"{name}={value} outside {bracket}{lo}, {hi}]")


def _normalize_params(kind, params):
    if kind not in STEP_PARAMS:
        raise ParamError(f"unknown step kind {kind!r}")
    expected = STEP_PARAMS[kind]
    missing = [p for p in expected if p not in params]
    extra = [p for p in params if p not in expected]
    if missing or extra:
        raise ParamError(f"{kind}: missing {missing}, unexpected {extra}")
    out = {}
    for name in expected:
        value = params[name]
        if name in _BOOL_PARAMS:
            if not isinstance(value, (bool, np.bool_)):
                raise ParamError(f"{kind}.{name} must be a boolean")
            out[name] = bool(value)
        elif name in _STR_PARAMS:
            if not isinstance(value, str):
                raise ParamError(f"{kind}.{name} must be a string")
            out[name] = value
        elif name in _INT_PARAMS:
            if isinstance(value, (bool, np.bool_)) or int(value) != value:
                raise ParamError(f"{kind}.{name} must be an integer")
            out[name] = int(value)
        else:
            if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, float, np.number)):
                raise ParamError(f"{kind}.{name} must be a number")
            out[name] = float(value)
    return out


def _validate_step(kind, p):
    if kind == "gaussian-blur":
        _check_range("sigma_x", p["sigma_x"], 0.0, MAX_BLUR_SIGMA, lo_open=True)
        _check_range("sigma_y", p["sigma_y"], 0.0, MAX_BLUR_SIGMA, lo_open=True)
        if not math.isfinite(p["angle"]):
            raise ParamError("angle must be finite")
        k = p["kernel_size"]
        if k % 2 == 0 or not 3 <= k <= 21:
            raise ParamError(f"kernel_size must be odd in [3, 21], got {k}")
    elif kind == "resize":
        _check_range("scale", p["scale"], 0.0, MAX_RESIZE_SCALE, lo_open=True)
        if p["mode"] not in RESIZE_MODES:
            raise ParamError(f"resize mode must be one of {sorted(RESIZE_MODES)}, got {p['mode']!r}")
    elif kind in ("gaussian-noise", "speckle-noise"):
        _check_range("sigma", p["sigma"], 0.0, MAX_NOISE_SIGMA)
    elif kind == "poisson-noise":
        if not (p["scale"] > 0 and math.isfinite(p["scale"])):
            raise ParamError(f"poisson scale must be positive, got {p['scale']}")
    elif kind == "jpeg":
        if not 1 <= p["quality"] <= 100:
            raise ParamError(f"jpeg quality must be in [1, 100], got {p['quality']}")
    elif kind == "final-downsample":
        if p["scale_factor"] < 1:
            raise ParamError("scale_factor must be >= 1")


@dataclass(frozen=True)
class DegradationStep:
    """One degradation operator with all of its parameters.

    Noise sigmas are on the 8-bit scale (a sigma of 25 adds noise with standard
    deviation 25/255 to [0, 1] data). Blur angles are in radians.
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        params = _normalize_params(self.kind, dict(self.params))
        _validate_step(self.kind, params)
        object.__setattr__(self, "params", params)
        if self.kind in STOCHASTIC_KINDS:
            if self.seed is None or isinstance(self.seed, bool) or int(self.seed) != self.seed:
                raise ParamError(f"{self.kind} requires an integer noise seed")
            if not 0 <= int(self.seed) < 2**64:
                raise ParamError("noise seed must fit in 64 unsigned bits")
            object.__setattr__(self, "seed", int(self.seed))
        elif self.seed is not None:
            raise ParamError(f"{self.kind} is deterministic and takes no seed")

    @classmethod
    def gaussian_blur(cls, sigma_x, sigma_y=None, angle=0.0, kernel_size=21):
        sigma_y = sigma_x if sigma_y is None else sigma_y
        return cls("gaussian-blur", dict(sigma_x=sigma_x, sigma_y=sigma_y, angle=angle, kernel_size=kernel_size))

    @classmethod
    def resize(cls, scale, mode="bicubic"):
        return cls("resize", dict(scale=scale, mode=mode))

    @classmethod
    def gaussian_noise(cls, sigma, seed, gray=False):
        return cls("gaussian-noise", dict(sigma=sigma, gray=gray), seed)

    @classmethod
    def poisson_noise(cls, scale, seed, gray=False):
        return cls("poisson-noise", dict(scale=scale, gray=gray), seed)

    @classmethod
    def speckle_noise(cls, sigma, seed, gray=False):
        return cls("speckle-noise", dict(sigma=sigma, gray=gray), seed)

    @classmethod
    def jpeg(cls, quality):
        return cls("jpeg", dict(quality=quality))

    @classmethod
    def final_downsample(cls, scale_factor=4):
        return cls("final-downsample", dict(scale_factor=scale_factor))

    def to_dict(self):
        d = {"kind": self.kind}
        d.update(self.params)
        if self.seed is not None:
            d["seed"] = self.seed
        return d


@dataclass(frozen=True)
class DegradationRecipe:
    recipe_id: str
    family: str
    steps: tuple
    scale_factor: int = 4
    source_seed: int = 0

    def __post_init__(self):
        steps = tuple(self.steps)
        object.__setattr__(self, "steps", steps)
        if self.family not in FAMILIES:
            raise ParamError(f"pipeline family must be one of {FAMILIES}, got {self.family!r}")
        finals = [i for i, s in enumerate(steps) if s.kind == "final-downsample"]
        if len(finals) != 1 or finals[0] != len(steps) - 1:
            raise ParamError("a recipe needs exactly one final-downsample step, placed last")
        if steps[-1].params["scale_factor"] != self.scale_factor:
            raise ParamError("final-downsample factor disagrees with recipe scale_factor")

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "recipe_id": self.recipe_id,
            "family": self.family,
            "scale_factor": self.scale_factor,
            "source_seed": self.source_seed,
            "steps": [s.to_dict() for s in self.steps],
        }


def serialize_recipe(recipe):
    """Canonical single-line JSON text for ``recipe``."""
    return json.dumps(recipe.to_dict(), separators=(",", ":"), allow_nan=False)


def recipe_from_dict(doc, where=""):
    if not isinstance(doc, dict):
        raise RecipeParseError("recipe must be a JSON object", where or "$")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise RecipeParseError(f"unsupported schema_version {version!r}", f"{where}schema_version")
    for key in ("recipe_id", "family", "scale_factor", "steps"):
        if key not in doc:
            raise RecipeParseError(f"missing field {key!r}", f"{where}{key}")
    if not isinstance(doc["steps"], list):
        raise RecipeParseError("steps must be a list", f"{where}steps")
    steps = []
    for i, raw in enumerate(doc["steps"]):
        at = f"{where}steps[{i}]"
        if not isinstance(raw, dict) or "kind" not in raw:
            raise RecipeParseError("step must be an object with a 'kind'", at)
        kind = raw["kind"]
        if kind not in STEP_PARAMS:
            raise RecipeParseError(f"unknown step kind {kind!r}", f"{at}.kind")
        params = {k: v for k, v in raw.items() if k not in ("kind", "seed")}
        try:
            steps.append(DegradationStep(kind, params, raw.get("seed")))
        except ParamError as exc:
            raise RecipeParseError(str(exc), at) from exc
    try:
        return DegradationRecipe(
            recipe_id=str(doc["recipe_id"]),
            family=doc["family"],
            steps=tuple(steps),
            scale_factor=int(doc["scale_factor"]),
            source_seed=int(doc.get("source_seed", 0)),
        )
    except (ParamError, TypeError, ValueError) as exc:
        raise RecipeParseError(str(exc), where or "$") from exc


def parse_recipe(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RecipeParseError(f"invalid JSON: {exc.msg}", exc.pos) from exc
    return recipe_from_dict(doc)


def write_recipes_jsonl(recipes, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in recipes:
            fh.write(serialize_recipe(r) + "\n")


def read_recipes_jsonl(path):
    recipes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                recipes.append(parse_recipe(line))
            except RecipeParseError as exc:
                raise RecipeParseError(f"{path}:{lineno}: {exc}") from exc
    return recipes


# --------------------------------------------------------------------- operators


def gaussian_kernel(sigma_x, sigma_y, angle, kernel_size):
    """Normalized, rotated 2-D Gaussian kernel of odd size ``kernel_size``."""
    half = kernel_size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    c, s = math.cos(angle), math.sin(angle)
    # coordinates in the kernel's principal frame
    u = c * xx + s * yy
    v = -s * xx + c * yy
    k = np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
    return k / k.sum()


def _blur(img, p):
    kernel = gaussian_kernel(p["sigma_x"], p["sigma_y"], p["angle"], p["kernel_size"])
    # kernel is point-symmetric, so correlation == convolution; large kernels go
    # through a DFT whose rounding can leave values a hair outside [0, 1]
    out = cv2.filter2D(img, cv2.CV_64F, kernel, borderType=cv2.BORDER_REFLECT_101)
    return np.clip(out, 0.0, 1.0)


def _resize_to(img, width, height, mode):
    if width < 1 or height < 1:
        raise SizeError(f"resize would produce {width}x{height}")
    if (height, width) == img.shape[:2]:
        return img.copy()
    out = cv2.resize(img, (width, height), interpolation=RESIZE_MODES[mode])
    return np.clip(out, 0.0, 1.0)


def _noise_shape(img, gray):
    return (img.shape[0], img.shape[1], 1) if gray else img.shape


def _gaussian_noise(img, p, rng):
    noise = rng.normal(0.0, p["sigma"] / 255.0, _noise_shape(img, p["gray"]))
    return np.clip(img + noise, 0.0, 1.0)


def _speckle_noise(img, p, rng):
    noise = rng.normal(0.0, p["sigma"] / 255.0, _noise_shape(img, p["gray"]))
    return np.clip(img + img * noise, 0.0, 1.0)


def _poisson_noise(img, p, rng):
    vals = p["scale"]
    if p["gray"]:
        luma = img @ np.array([0.299, 0.587, 0.114])
        noise = rng.poisson(luma * vals) / vals - luma
        out = img + noise[:, :, None]
    else:
        out = rng.poisson(img * vals) / vals
    return np.clip(out, 0.0, 1.0)


def apply_step(image, step, target_size=None, salt=()):
    """Apply one step to ``image`` and return a float64 [0, 1] image.

    ``target_size`` (width, height) overrides the output size of a
    final-downsample step. ``salt`` is mixed into the noise seed; the empty
    salt reproduces the step's own noise realization.
    """
    img = to_float(check_image(image))
    kind, p = step.kind, step.params
    if kind == "gaussian-blur":
        return _blur(img, p)
    if kind == "resize":
        h, w = img.shape[:2]
        return _resize_to(img, int(round(w * p["scale"])), int(round(h * p["scale"])), p["mode"])
    if kind == "final-downsample":
        h, w = img.shape[:2]
        if target_size is None:
            f = p["scale_factor"]
            target_size = (w // f, h // f)
        return _resize_to(img, int(target_size[0]), int(target_size[1]), "bicubic")
    if kind == "jpeg":
        return to_float(jpeg_roundtrip(to_uint8(img), p["quality"]))
    rng = make_rng(step.seed, *salt)
    if kind == "gaussian-noise":
        return _gaussian_noise(img, p, rng)
    if kind == "speckle-noise":
        return _speckle_noise(img, p, rng)
    if kind == "poisson-noise":
        return _poisson_noise(img, p, rng)
    raise ParamError(f"unknown step kind {kind!r}")  # pragma: no cover


def apply_recipe(image, recipe, salt=()):
    """Run every step of ``recipe``; output size is input size / scale factor."""
    img = to_float(check_image(image))
    h, w = img.shape[:2]
    f = recipe.scale_factor
    if h % f or w % f:
        raise SizeError(f"image {w}x{h} is not divisible by scale factor {f}")
    for step in recipe.steps:
        target = (w // f, h // f) if step.kind == "final-downsample" else None
        img = apply_step(img, step, target_size=target, salt=salt)
    return img


# --------------------------------------------------------------------- sampling


@dataclass(frozen=True)
class PipelineConfig:
    """Mixture weights and parameter ranges for :func:`sample_recipe`.

    Ranges are inclusive ``(low, high)`` pairs. The defaults are conventions of
    this package, not reproductions of any published pipeline.
    """

    p_shuffled: float = 0.5
    p_high_order: float = 0.5
    blur_sigma: tuple = (0.1, 4.0)
    anisotropic_prob: float = 0.5
    kernel_size: tuple = (7, 21)
    resize_scale: tuple = (0.5, 1.5)
    resize_modes: tuple = ("area", "bilinear", "bicubic")
    noise_kinds: tuple = ("gaussian", "poisson", "speckle")
    noise_sigma: tuple = (1.0, 40.0)
    poisson_log10_scale: tuple = (2.0, 4.0)
    gray_noise_prob: float = 0.4
    jpeg_quality: tuple = (30, 95)
    high_order_rounds: int = 2
    scale_factor: int = 4

    def __post_init__(self):
        for name in ("blur_sigma", "kernel_size", "resize_scale", "noise_sigma",
                     "poisson_log10_scale", "jpeg_quality", "resize_modes", "noise_kinds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        probs = (self.p_shuffled, self.p_high_order)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError(f"family probabilities must be nonnegative and sum to 1, got {probs}")

        def rng_check(name, lo_bound, hi_bound, lo_open=False):
            lo, hi = getattr(self, name)
            bad_lo = lo <= lo_bound if lo_open else lo < lo_bound
            if lo > hi or bad_lo or hi > hi_bound:
                raise ConfigError(f"{name}={getattr(self, name)} is empty or outside bounds")

        rng_check("blur_sigma", 0.0, MAX_BLUR_SIGMA, lo_open=True)
        rng_check("noise_sigma", 0.0, MAX_NOISE_SIGMA)
        rng_check("resize_scale", 0.0, MAX_RESIZE_SCALE, lo_open=True)
        rng_check("jpeg_quality", 1, 100)
        rng_check("kernel_size", 3, 21)
        rng_check("poisson_log10_scale", -3.0, 9.0)
        lo, hi = self.kernel_size
        if not [k for k in range(lo, hi + 1) if k % 2 == 1]:
            raise ConfigError("kernel_size range contains no odd size")
        for name in ("anisotropic_prob", "gray_noise_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        if not self.resize_modes or set(self.resize_modes) - set(RESIZE_MODES):
            raise ConfigError(f"resize_modes must be a nonempty subset of {sorted(RESIZE_MODES)}")
        if not self.noise_kinds or set(self.noise_kinds) - {"gaussian", "poisson", "speckle"}:
            raise ConfigError("noise_kinds must be a nonempty subset of gaussian/poisson/speckle")
        if self.high_order_rounds < 1 or self.scale_factor < 1:
            raise ConfigError("high_order_rounds and scale_factor must be >= 1")

    def to_dict(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def _sample_stage(stage, rng, cfg):
    if stage == "blur":
        lo, hi = cfg.blur_sigma
        sx = float(rng.uniform(lo, hi))
        if rng.random() < cfg.anisotropic_prob:
            sy = float(rng.uniform(lo, hi))
            angle = float(rng.uniform(0.0, math.pi))
        else:
            sy, angle = sx, 0.0
        sizes = [k for k in range(cfg.kernel_size[0], cfg.kernel_size[1] + 1) if k % 2 == 1]
        ksize = sizes[int(rng.integers(len(sizes)))]
        return DegradationStep.gaussian_blur(sx, sy, angle, ksize)
    if stage == "resize":
        scale = float(rng.uniform(*cfg.resize_scale))
        mode = cfg.resize_modes[int(rng.integers(len(cfg.resize_modes)))]
        return DegradationStep.resize(scale, mode)
    if stage == "noise":
        kind = cfg.noise_kinds[int(rng.integers(len(cfg.noise_kinds)))]
        gray = bool(rng.random() < cfg.gray_noise_prob)
        seed = draw_seed(rng)
        if kind == "poisson":
            scale = float(10.0 ** rng.uniform(*cfg.poisson_log10_scale))
            return DegradationStep.poisson_noise(scale, seed, gray)
        sigma = float(rng.uniform(*cfg.noise_sigma))
        if kind == "gaussian":
            return DegradationStep.gaussian_noise(sigma, seed, gray)
        return DegradationStep.speckle_noise(sigma, seed, gray)
    if stage == "jpeg":
        lo, hi = cfg.jpeg_quality
        return DegradationStep.jpeg(int(rng.integers(lo, hi + 1)))
    raise ValueError(stage)  # pragma: no cover


STAGES = ("blur", "resize", "noise", "jpeg")


def sample_recipe(rng, config=None, recipe_id=None):
    """Draw one recipe from the shuffled/high-order mixture.

    Only one value (the recipe's ``source_seed``) is drawn from ``rng``; all
    parameters come from a generator seeded by it, so a recipe can be
    regenerated from its source seed and the config alone.
    """
    cfg = config if config is not None else PipelineConfig()
    source_seed = draw_seed(rng)
    sub = make_rng(source_seed)
    if sub.random() < cfg.p_shuffled:
        family = "shuffled"
        order = [STAGES[i] for i in sub.permutation(len(STAGES))]
    else:
        family = "high-order"
        order = list(STAGES) * cfg.high_order_rounds
    steps = [_sample_stage(stage, sub, cfg) for stage in order]
    steps.append(DegradationStep.final_downsample(cfg.scale_factor))
    if recipe_id is None:
        recipe_id = f"{family}-{source_seed:016x}"
    return DegradationRecipe(recipe_id, family, tuple(steps), cfg.scale_factor, source_seed)


class RecipeDegrader(TransformerMixin, BaseEstimator):
    """Transformer applying a fixed recipe to a batch of HR images.

    ``transform`` returns a list of float64 LR images (or ``uint8`` when
    ``quantize=True``).
    """

    def __init__(self, recipe=None, quantize=False):
        self.recipe = recipe
        self.quantize = quantize

    def fit(self, X=None, y=None):
        if not isinstance(self.recipe, DegradationRecipe):
            raise ParamError("recipe must be a DegradationRecipe")
        self.scale_factor_ = self.recipe.scale_factor
        return self

    def transform(self, X):
        if not hasattr(self, "scale_factor_"):
            self.fit()
        out = [apply_recipe(img, self.recipe) for img in X]
        return [to_uint8(o) for o in out] if self.quantize else out

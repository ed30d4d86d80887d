"""Full-reference IQA (PSNR, SSIM) and the canonical per-image score table.

Both metrics quantize their inputs to 8 bits and by default work on the
Rec. 601 luma channel ``0.299 R + 0.587 G + 0.114 B`` on the [0, 255] scale.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .exceptions import (
    DataMismatchError,
    DuplicateKeyError,
    MissingOutputError,
    ParamError,
    ScoreParseError,
    SizeError,
)
from .imaging import check_image, crop_to_multiple, load_image, to_uint8

MAX_VALUE = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * MAX_VALUE) ** 2
SSIM_C2 = (0.03 * MAX_VALUE) ** 2

ORIENTATIONS = ("higher-better", "lower-better")
KNOWN_ORIENTATION = {"psnr": "higher-better", "ssim": "higher-better", "lpips": "lower-better"}
CSV_HEADER = ["model", "metric", "case_id", "image_id", "value"]

_LUMA = np.array([0.299, 0.587, 0.114])


def luminance(image):
    """Luma plane of the 8-bit quantized image, float64 on [0, 255]."""
    return to_uint8(image).astype(np.float64) @ _LUMA


def _prepare(a, b, channel, crop_border):
    a, b = check_image(a, "a"), check_image(b, "b")
    if a.shape != b.shape:
        raise SizeError(f"size mismatch: {a.shape} vs {b.shape}")
    if channel == "y":
        pa, pb = luminance(a), luminance(b)
    elif channel == "rgb":
        pa, pb = to_uint8(a).astype(np.float64), to_uint8(b).astype(np.float64)
    else:
        raise ParamError(f"channel must be 'y' or 'rgb', got {channel!r}")
    if crop_border:
        c = int(crop_border)
        if 2 * c >= min(pa.shape[:2]):
            raise SizeError(f"crop_border={c} leaves no pixels")
        pa, pb = pa[c:-c, c:-c], pb[c:-c, c:-c]
    return pa, pb


def psnr(a, b, channel="y", crop_border=0):
    """PSNR in dB with MAX = 255; identical inputs give ``math.inf``."""
    pa, pb = _prepare(a, b, channel, crop_border)
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(MAX_VALUE**2 / mse)


def gaussian_window_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()


_WIN = gaussian_window_1d()
_PAD = SSIM_WINDOW // 2


def _filter_valid(plane):
    # separable Gaussian; the border region is cropped so padding never matters
    out = cv2.sepFilter2D(plane, cv2.CV_64F, _WIN, _WIN, borderType=cv2.BORDER_REFLECT)
    return out[_PAD:-_PAD, _PAD:-_PAD]


@dataclass(frozen=True)
class SSIMStats:
    """Per-image local statistics, reusable across many SSIM pairs."""

    plane: np.ndarray
    mu: np.ndarray
    var: np.ndarray


def ssim_stats(plane):
    plane = np.ascontiguousarray(plane, dtype=np.float64)
    if min(plane.shape[:2]) < SSIM_WINDOW:
        raise SizeError(f"SSIM needs both sides >= {SSIM_WINDOW}, got {plane.shape[:2]}")
    mu = _filter_valid(plane)
    var = _filter_valid(plane * plane) - mu * mu
    return SSIMStats(plane, mu, var)


def ssim_from_stats(sa, sb):
    cov = _filter_valid(sa.plane * sb.plane) - sa.mu * sb.mu
    num = (2.0 * sa.mu * sb.mu + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (sa.mu**2 + sb.mu**2 + SSIM_C1) * (sa.var + sb.var + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b, crop_border=0):
    """Mean SSIM over all valid 11x11 Gaussian windows of the luma planes."""
    pa, pb = _prepare(a, b, "y", crop_border)
    return ssim_from_stats(ssim_stats(pa), ssim_stats(pb))


METRICS = {"psnr": psnr, "ssim": lambda a, b, channel="y", crop_border=0: ssim(a, b, crop_border)}


# ------------------------------------------------------------------ score table


@dataclass(frozen=True)
class ScoreRow:
    case_id: str
    image_id: str
    value: float


def orientation_for(metric, orientation=None):
    known = KNOWN_ORIENTATION.get(metric.lower())
    if orientation is None:
        if known is None:
            raise ParamError(f"orientation of metric {metric!r} is unknown; pass it explicitly")
        return known
    if orientation not in ORIENTATIONS:
        raise ParamError(f"orientation must be one of {ORIENTATIONS}")
    if known is not None and orientation != known:
        raise ParamError(f"{metric} is {known}; cannot override to {orientation}")
    return orientation


@dataclass
class ScoreTable:
    """Per-(case, image) scores of one model under one metric."""

    model_id: str
    metric: str
    orientation: str = None
    rows: list = field(default_factory=list)

    def __post_init__(self):
        self.orientation = orientation_for(self.metric, self.orientation)
        rows = [r if isinstance(r, ScoreRow) else ScoreRow(*r) for r in self.rows]
        seen = set()
        for r in rows:
            key = (r.case_id, r.image_id)
            if key in seen:
                raise DuplicateKeyError(f"duplicate row for case {r.case_id!r}, image {r.image_id!r}")
            seen.add(key)
            self._check_value(r.value)
        self.rows = sorted(rows, key=lambda r: (r.case_id, r.image_id))

    def _check_value(self, v):
        if math.isnan(v):
            raise ParamError("NaN score")
        m = self.metric.lower()
        if m == "psnr" and v < 0:
            raise ParamError(f"negative PSNR {v}")
        if m == "ssim" and not -1.0 <= v <= 1.0:
            raise ParamError(f"SSIM {v} outside [-1, 1]")
        if math.isinf(v) and (m != "psnr" or v < 0):
            raise ParamError(f"infinite value {v} not allowed for {self.metric}")

    @property
    def case_ids(self):
        return sorted({r.case_id for r in self.rows})

    def by_case(self):
        out = {}
        for r in self.rows:
            out.setdefault(r.case_id, []).append(r.value)
        return out

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([self.model_id, self.metric, r.case_id, r.image_id, _fmt(r.value)])


def _fmt(v):
    return "inf" if math.isinf(v) else repr(float(v))


def ingest_scores(path, orientation=None):
    """Read a ``model,metric,case_id,image_id,value`` CSV into a ScoreTable.

    The file must hold one model and one metric. ``inf`` is accepted for PSNR.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ScoreParseError("empty file", 1) from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise ScoreParseError(f"expected header {','.join(CSV_HEADER)}", 1)
        model = metric = None
        rows, seen = [], {}
        for lineno, rec in enumerate(reader, 2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 5:
                raise ScoreParseError(f"expected 5 fields, got {len(rec)}", lineno)
            m_id, met, case_id, image_id, raw = (c.strip() for c in rec)
            if model is None:
                model, metric = m_id, met
            elif (m_id, met) != (model, metric):
                raise ScoreParseError("a score file must hold a single model and metric", lineno)
            try:
                value = float(raw)
            except ValueError:
                raise ScoreParseError(f"non-numeric value {raw!r}", lineno) from None
            if math.isnan(value):
                raise ScoreParseError("NaN value", lineno)
            if math.isinf(value) and (metric.lower() != "psnr" or value < 0):
                raise ScoreParseError(f"infinite value not allowed for {metric}", lineno)
            key = (case_id, image_id)
            if key in seen:
                raise DuplicateKeyError(
                    f"line {lineno}: duplicate (case {case_id!r}, image {image_id!r}), first on line {seen[key]}"
                )
            seen[key] = lineno
            rows.append(ScoreRow(case_id, image_id, value))
    if model is None:
        raise ScoreParseError("no data rows", 2)
    try:
        return ScoreTable(model, metric, orientation, rows)
    except ParamError as exc:
        raise ScoreParseError(str(exc)) from exc


def _gt_lookup(gt_images):
    if isinstance(gt_images, dict):
        return {str(k): Path(v) for k, v in gt_images.items()}
    return {Path(p).stem: Path(p) for p in gt_images}


def score_outputs(sr_dir, gt_images, manifest, metric="psnr", model_id="model",
                  channel="y", crop_border=0, n_jobs=1):
    """Score SR outputs laid out as ``<sr_dir>/<case_id>/<image_id>.png``.

    GT images are center-cropped to a multiple of the manifest scale factor.
    All missing outputs are reported together in a :class:`MissingOutputError`.
    """
    if metric not in METRICS:
        raise ParamError(f"metric must be one of {sorted(METRICS)}; ingest other metrics from CSV")
    sr_dir = Path(sr_dir)
    gts = _gt_lookup(gt_images)
    pairs, missing = [], []
    for case in manifest.cases:
        for entry in case.entries:
            if entry.image_id not in gts:
                raise DataMismatchError(f"no GT image for image id {entry.image_id!r}")
            sr_path = sr_dir / case.case_id / f"{entry.image_id}.png"
            if not sr_path.is_file():
                missing.append((case.case_id, entry.image_id))
            else:
                pairs.append((case.case_id, entry.image_id, sr_path))
    if missing:
        raise MissingOutputError(missing)

    gt_cache = {i: crop_to_multiple(load_image(p), manifest.scale_factor) for i, p in gts.items()}
    fn = METRICS[metric]

    def one(pair):
        case_id, image_id, sr_path = pair
        sr, gt = load_image(sr_path), gt_cache[image_id]
        if sr.shape != gt.shape:
            raise SizeError(f"{sr_path}: SR output {sr.shape} does not match GT {gt.shape}")
        return ScoreRow(case_id, image_id, fn(sr, gt, channel=channel, crop_border=crop_border))

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            rows = list(pool.map(one, pairs))
    else:
        rows = [one(p) for p in pairs]
    return ScoreTable(model_id, metric, None, rows)


def finite_mean(values, what="values"):
    """Mean of the finite entries, warning when infinities are dropped."""
    vals = [v for v in values if math.isfinite(v)]
    if len(vals) != len(values):
        warnings.warn(f"excluded {len(values) - len(vals)} infinite {what} from the average", RuntimeWarning)
    if not vals:
        return None
    return math.fsum(vals) / len(vals)

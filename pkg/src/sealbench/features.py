"""Histogram features, pairwise distances and distance-matrix I/O."""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DecodeError, ParamError, SizeError
from .imaging import check_image, to_uint8
from .iqa import luminance, ssim, ssim_from_stats, ssim_stats

N_BINS = 256
FEATURE_LEN = 3 * N_BINS
METRIC_IDS = ("hist-l1", "mse", "ssim-dissimilarity")

_MAGIC = b"SEALDM01"


def histogram(image):
    """768-bin feature: R, G and B 256-bin histograms, each normalized to sum 1."""
    img = to_uint8(check_image(image))
    npix = img.shape[0] * img.shape[1]
    blocks = [np.bincount(img[:, :, c].ravel(), minlength=N_BINS) / npix for c in range(3)]
    return np.concatenate(blocks).astype(np.float64)


def _check_feature(f, name):
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (FEATURE_LEN,):
        raise SizeError(f"{name} must have length {FEATURE_LEN}, got shape {f.shape}")
    return f


def hist_l1(a, b):
    a, b = _check_feature(a, "a"), _check_feature(b, "b")
    return float(np.sum(np.abs(a - b)))


def mse_distance(a, b):
    """Mean squared difference over all 8-bit samples."""
    a, b = to_uint8(check_image(a, "a")), to_uint8(check_image(b, "b"))
    if a.shape != b.shape:
        raise SizeError(f"size mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def ssim_dissimilarity(a, b):
    return 1.0 - ssim(a, b)


@dataclass
class DistanceMatrix:
    values: np.ndarray
    metric: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise SizeError(f"distance matrix must be square, got {v.shape}")
        if not np.array_equal(v, v.T):
            raise ParamError("distance matrix must be exactly symmetric")
        if np.any(np.diag(v) != 0) or np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ParamError("distance matrix needs a zero diagonal and finite nonnegative entries")
        self.values = v

    @property
    def n(self):
        return self.values.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        return DistanceMatrix(self.values[np.ix_(idx, idx)], self.metric)

    def save(self, path):
        """Binary layout: magic, n (u64), metric-id length (u16) + utf-8, then n*n f64, all little-endian."""
        mid = self.metric.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<QH", self.n, len(mid)))
            fh.write(mid)
            fh.write(self.values.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != _MAGIC:
            raise DecodeError(f"{path}: not a distance-matrix file")
        n, mlen = struct.unpack_from("<QH", data, 8)
        off = 8 + struct.calcsize("<QH")
        metric = data[off : off + mlen].decode("utf-8")
        off += mlen
        if len(data) - off != 8 * n * n:
            raise DecodeError(f"{path}: truncated matrix payload")
        values = np.frombuffer(data, dtype="<f8", offset=off).reshape(n, n).astype(np.float64)
        return cls(values, metric)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in self.values:
                w.writerow([repr(float(x)) for x in row])


def _row_blocks(n, n_jobs, block=64):
    return [(i, min(i + block, n)) for i in range(0, n, block)]


def _run_blocks(fn, n, n_jobs):
    blocks = _row_blocks(n, n_jobs)
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            list(pool.map(fn, blocks))
    else:
        for b in blocks:
            fn(b)


def _mirror_upper(m):
    # every entry is computed once for i <= j; the lower triangle is copied
    il = np.tril_indices(m.shape[0], -1)
    m[il] = m.T[il]
    np.fill_diagonal(m, 0.0)
    return m


def _hist_matrix(items, n_jobs):
    feats = np.stack([
        _check_feature(x, "feature") if np.ndim(x) == 1 else histogram(x) for x in items
    ])
    n = len(feats)
    out = np.zeros((n, n))

    def fill(block):
        i0, i1 = block
        out[i0:i1, i0:] = cdist(feats[i0:i1], feats[i0:], "cityblock")

    _run_blocks(fill, n, n_jobs)
    return _mirror_upper(out)


def _mse_matrix(items, n_jobs, chunk=1 << 16):
    imgs = [to_uint8(check_image(x)) for x in items]
    shape = imgs[0].shape
    if any(im.shape != shape for im in imgs):
        raise SizeError("all images must share one size for the mse metric")
    flat = np.stack([im.ravel() for im in imgs])
    n, p = flat.shape
    # integer-valued float64 products and sums stay exact below 2**53
    gram = np.zeros((n, n))
    for c0 in range(0, p, chunk):
        x = flat[:, c0 : c0 + chunk].astype(np.float64)
        gram += x @ x.T
    sq = np.diag(gram).copy()
    out = (sq[:, None] + sq[None, :] - 2.0 * gram) / p
    out = np.maximum(out, 0.0)
    out = np.triu(out)
    return _mirror_upper(out)


def _ssim_matrix(items, n_jobs):
    imgs = [check_image(x) for x in items]
    shape = imgs[0].shape
    if any(im.shape != shape for im in imgs):
        raise SizeError("all images must share one size for the ssim metric")
    stats = [ssim_stats(luminance(im)) for im in imgs]
    n = len(stats)
    out = np.zeros((n, n))

    def fill(block):
        i0, i1 = block
        for i in range(i0, i1):
            for j in range(i + 1, n):
                out[i, j] = 1.0 - ssim_from_stats(stats[i], stats[j])

    _run_blocks(fill, n, n_jobs)
    return _mirror_upper(out)


def distance_matrix(items, metric="hist-l1", n_jobs=1):
    """Full symmetric pairwise distance matrix with a zero diagonal.

    For ``hist-l1`` the items may be images or precomputed 768-bin features;
    the other metrics need images of one common size. The result does not
    depend on ``n_jobs``.
    """
    items = list(items)
    if len(items) < 2:
        raise SizeError("need at least two items")
    if metric == "hist-l1":
        values = _hist_matrix(items, n_jobs)
    elif metric == "mse":
        values = _mse_matrix(items, n_jobs)
    elif metric == "ssim-dissimilarity":
        values = _ssim_matrix(items, n_jobs)
    else:
        raise ParamError(f"metric must be one of {METRIC_IDS}, got {metric!r}")
    # 1 - SSIM can dip below zero by rounding only when SSIM > 1, which it cannot
    return DistanceMatrix(np.maximum(values, 0.0), metric)


def pool_variance(m):
    """Population variance of the off-diagonal entries."""
    v = m.values if isinstance(m, DistanceMatrix) else np.asarray(m, dtype=np.float64)
    n = v.shape[0]
    if n < 2:
        raise SizeError("need n >= 2")
    off = v[~np.eye(n, dtype=bool)]
    return float(np.var(off))


def average_matrices(ms):
    """Entrywise mean of distance matrices sharing size and metric."""
    ms = list(ms)
    if not ms:
        raise SizeError("need at least one matrix")
    n, metric = ms[0].n, ms[0].metric
    for m in ms[1:]:
        if m.n != n or m.metric != metric:
            raise SizeError("matrices differ in size or metric")
    if len(ms) == 1:
        return DistanceMatrix(ms[0].values.copy(), metric)
    acc = np.zeros((n, n))
    for m in ms:
        acc += m.values
    acc /= len(ms)
    # keep exact symmetry after floating-point accumulation
    return DistanceMatrix(_mirror_upper(np.triu(acc)), metric)


class HistogramFeatures(TransformerMixin, BaseEstimator):
    """Stateless transformer: a sequence of images -> ``(n, 768)`` features."""

    def fit(self, X, y=None):
        self.n_features_out_ = FEATURE_LEN
        return self

    def transform(self, X):
        return np.stack([histogram(x) for x in X])

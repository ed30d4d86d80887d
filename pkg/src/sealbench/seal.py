"""SEAL metrics over score tables and reference lines, plus model ranking.

A line set gives two per-case reference levels: an acceptance score and a
strictly better excellence score. A model's per-case mean score is placed
between them with a logistic map (RPR), and summarized by the acceptance rate
(AR), the RPR interquartile range (RPR_I) and the mean RPR over acceptable and
unacceptable cases (RPR_A, RPR_U).
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cmp_to_key
from pathlib import Path

import cv2

from . import __version__
from .exceptions import (
    ConfigError,
    DataMismatchError,
    DegenerateLineError,
    DuplicateKeyError,
    EmptyCaseError,
    ParamError,
)
from .imaging import crop_to_multiple, load_image
from .iqa import METRICS, ORIENTATIONS, finite_mean, orientation_for

DEFAULT_CUTOFF = 0.25
DEFAULT_THRESHOLDS = (0.02, 0.02, 0.05, 0.05)
RANK_METRICS = (("AR", "ar", True), ("RPR_I", "rpr_i", False), ("RPR_A", "rpr_a", True), ("RPR_U", "rpr_u", True))
THRESHOLD_EPS = 1e-9
N_GROUPS = 5
UPSCALERS = {"nearest": cv2.INTER_NEAREST, "bilinear": cv2.INTER_LINEAR, "bicubic": cv2.INTER_CUBIC}


def sigmoid(x):
    """Logistic function; exact 0.5 at 0 and no overflow for large |x|."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _better(a, b, orientation):
    return a > b if orientation == "higher-better" else a < b


# --------------------------------------------------------------------- lines


@dataclass
class LineSet:
    case_ids: list
    acceptance: list
    excellence: list
    metric: str
    orientation: str = None
    provenance: str = "ingested-table"

    def __post_init__(self):
        self.orientation = orientation_for(self.metric, self.orientation)
        self.case_ids = [str(c) for c in self.case_ids]
        self.acceptance = [float(v) for v in self.acceptance]
        self.excellence = [float(v) for v in self.excellence]
        if not (len(self.case_ids) == len(self.acceptance) == len(self.excellence)):
            raise ParamError("case ids, acceptance and excellence must have equal lengths")
        if not self.case_ids:
            raise ParamError("a line set needs at least one case")
        if len(set(self.case_ids)) != len(self.case_ids):
            raise DuplicateKeyError("duplicate case id in line set")
        bad = []
        for c, qac, qex in zip(self.case_ids, self.acceptance, self.excellence):
            if not (math.isfinite(qac) and math.isfinite(qex)):
                raise ParamError(f"case {c!r}: line scores must be finite")
            if not _better(qex, qac, self.orientation):
                bad.append(c)
        if bad:
            raise DegenerateLineError(
                f"excellence is not strictly better than acceptance on {len(bad)} case(s): {', '.join(bad[:10])}"
            )

    @property
    def K(self):
        return len(self.case_ids)

    def index(self):
        return {c: i for i, c in enumerate(self.case_ids)}

    def fingerprint(self):
        h = hashlib.sha256()
        for c, a, e in zip(self.case_ids, self.acceptance, self.excellence):
            h.update(f"{c}\t{a!r}\t{e!r}\n".encode())
        return h.hexdigest()

    def context(self):
        return {"metric": self.metric, "orientation": self.orientation, "line_sha256": self.fingerprint()}

    def sidecar_dict(self):
        return {"metric": self.metric, "orientation": self.orientation, "provenance": self.provenance,
                "K": self.K, "tool_version": __version__}

    def save(self, path):
        """Write ``case_id,acceptance,excellence`` CSV plus ``<path>.json`` sidecar."""
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case_id", "acceptance", "excellence"])
            for row in zip(self.case_ids, self.acceptance, self.excellence):
                w.writerow([row[0], repr(row[1]), repr(row[2])])
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(self.sidecar_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        sidecar = path.with_name(path.name + ".json")
        if not sidecar.is_file():
            raise ConfigError(f"missing line sidecar {sidecar}")
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        ids, acc, exc = [], [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader, [])]
            if header != ["case_id", "acceptance", "excellence"]:
                raise ConfigError(f"{path}: expected header case_id,acceptance,excellence")
            for lineno, rec in enumerate(reader, 2):
                if not rec:
                    continue
                if len(rec) != 3:
                    raise ConfigError(f"{path}:{lineno}: expected 3 fields")
                try:
                    ids.append(rec[0].strip())
                    acc.append(float(rec[1]))
                    exc.append(float(rec[2]))
                except ValueError:
                    raise ConfigError(f"{path}:{lineno}: non-numeric score") from None
        return cls(ids, acc, exc, meta["metric"], meta.get("orientation"), meta.get("provenance", "ingested-table"))

    @classmethod
    def from_tables(cls, acceptance_table, excellence_table, provenance="ingested-table"):
        """Build a line set from the score tables of the two line models."""
        if (acceptance_table.metric, acceptance_table.orientation) != (excellence_table.metric, excellence_table.orientation):
            raise DataMismatchError("line tables use different metrics")
        qa, _ = distributed_performance(acceptance_table)
        qe, _ = distributed_performance(excellence_table)
        if set(qa) != set(qe):
            raise DataMismatchError("line tables cover different cases")
        ids = sorted(qa)
        return cls(ids, [qa[c] for c in ids], [qe[c] for c in ids], acceptance_table.metric,
                   acceptance_table.orientation, provenance)


# ------------------------------------------------------------------- metrics


def distributed_performance(table):
    """Per-case mean scores and their unweighted mean over cases.

    Returns ``(qd, qd_ave)`` where ``qd`` maps case id to mean score, in
    sorted case order. Infinite values are dropped with a warning.
    """
    qd = {}
    for case_id, values in sorted(table.by_case().items()):
        m = finite_mean(values, what=f"scores in case {case_id!r}")
        if m is None:
            raise EmptyCaseError(f"case {case_id!r} has no finite scores")
        qd[case_id] = m
    if not qd:
        raise EmptyCaseError("score table has no rows")
    return qd, math.fsum(qd.values()) / len(qd)


def _aligned(qd, line):
    if isinstance(qd, dict):
        if set(qd) != set(line.case_ids):
            missing = sorted(set(line.case_ids) - set(qd))
            extra = sorted(set(qd) - set(line.case_ids))
            raise DataMismatchError(f"case ids differ from the line set (missing {missing[:5]}, extra {extra[:5]})")
        return [float(qd[c]) for c in line.case_ids]
    vals = [float(v) for v in qd]
    if len(vals) != line.K:
        raise DataMismatchError(f"expected {line.K} per-case scores, got {len(vals)}")
    return vals


def acceptable_cases(qd, line):
    """Case ids whose score is strictly better than the acceptance line."""
    vals = _aligned(qd, line)
    return [c for c, v, a in zip(line.case_ids, vals, line.acceptance) if _better(v, a, line.orientation)]


def acceptance_rate(qd, line):
    """Fraction of cases strictly better than the acceptance line; ties do not count."""
    return len(acceptable_cases(qd, line)) / line.K


def rpr(qd, qac, qex, orientation="higher-better"):
    if orientation not in ORIENTATIONS:
        raise ParamError(f"orientation must be one of {ORIENTATIONS}")
    if not _better(qex, qac, orientation):
        raise DegenerateLineError(f"excellence {qex} is not strictly better than acceptance {qac}")
    if orientation == "higher-better":
        return sigmoid((qd - qac) / (qex - qac))
    return sigmoid((qac - qd) / (qac - qex))


def _percentile(sorted_vals, p):
    h = (len(sorted_vals) - 1) * p
    lo = math.floor(h)
    hi = math.ceil(h)
    return sorted_vals[lo] + (h - lo) * (sorted_vals[hi] - sorted_vals[lo])


def rpr_iqr(rprs):
    """75th minus 25th percentile with linear interpolation at ``h = (n - 1) p``."""
    vals = sorted(float(v) for v in rprs)
    if not vals:
        raise ParamError("rpr_iqr needs at least one value")
    return _percentile(vals, 0.75) - _percentile(vals, 0.25)


def rpr_partition_means(rprs, case_ids=None):
    """``(RPR_A, RPR_U, acceptable_ids)``; RPR >= 0.5 counts as acceptable.

    An empty side yields ``None`` rather than zero.
    """
    rprs = [float(v) for v in rprs]
    ids = list(case_ids) if case_ids is not None else list(range(len(rprs)))
    if len(ids) != len(rprs):
        raise ParamError("case ids and rprs differ in length")
    acc = [r for r in rprs if r >= 0.5]
    una = [r for r in rprs if r < 0.5]
    mean = lambda xs: math.fsum(xs) / len(xs) if xs else None  # noqa: E731
    return mean(acc), mean(una), [c for c, r in zip(ids, rprs) if r >= 0.5]


# -------------------------------------------------------------------- report


@dataclass
class SealReport:
    model_id: str
    ar: float
    rpr_i: float
    rpr_a: float | None
    rpr_u: float | None
    case_ids: list = field(default_factory=list)
    qd: list = field(default_factory=list)
    qd_ave: float | None = None
    rprs: list = field(default_factory=list)
    acceptable_case_ids: list = field(default_factory=list)
    context: dict | None = None

    def __post_init__(self):
        if not 0.0 <= self.ar <= 1.0:
            raise ParamError(f"AR {self.ar} outside [0, 1]")
        if self.rpr_i < 0:
            raise ParamError("RPR_I must be nonnegative")

    @property
    def K(self):
        return len(self.case_ids)

    @classmethod
    def from_summary(cls, model_id, ar, rpr_i, rpr_a=None, rpr_u=None, context=None):
        """A report carrying only the four ranking metrics (e.g. from a results table)."""
        return cls(str(model_id), float(ar), float(rpr_i),
                   None if rpr_a is None else float(rpr_a), None if rpr_u is None else float(rpr_u),
                   context=context)

    def to_dict(self):
        return {
            "kind": "seal-report",
            "tool_version": __version__,
            "model_id": self.model_id,
            "context": self.context,
            "K": self.K,
            "AR": self.ar,
            "RPR_I": self.rpr_i,
            "RPR_A": self.rpr_a,
            "RPR_U": self.rpr_u,
            "Qd_ave": self.qd_ave,
            "acceptable_case_ids": self.acceptable_case_ids,
            "cases": [{"case_id": c, "Qd": q, "RPR": r} for c, q, r in zip(self.case_ids, self.qd, self.rprs)],
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("kind") != "seal-report":
            raise ConfigError("not a SEAL report document")
        cases = doc.get("cases", [])
        return cls(doc["model_id"], doc["AR"], doc["RPR_I"], doc.get("RPR_A"), doc.get("RPR_U"),
                   [c["case_id"] for c in cases], [c["Qd"] for c in cases], doc.get("Qd_ave"),
                   [c["RPR"] for c in cases], list(doc.get("acceptable_case_ids", [])), doc.get("context"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def evaluate(table, line):
    """Assemble the full metric suite for one model's score table."""
    if table.metric.lower() != line.metric.lower() or table.orientation != line.orientation:
        raise DataMismatchError(
            f"table metric {table.metric}/{table.orientation} differs from line {line.metric}/{line.orientation}"
        )
    qd_map, qd_ave = distributed_performance(table)
    qd = _aligned(qd_map, line)
    rprs = [rpr(q, a, e, line.orientation) for q, a, e in zip(qd, line.acceptance, line.excellence)]
    rpr_a, rpr_u, _ = rpr_partition_means(rprs, line.case_ids)
    return SealReport(
        model_id=table.model_id,
        ar=acceptance_rate(qd, line),
        rpr_i=rpr_iqr(rprs),
        rpr_a=rpr_a,
        rpr_u=rpr_u,
        case_ids=list(line.case_ids),
        qd=qd,
        qd_ave=qd_ave,
        rprs=rprs,
        acceptable_case_ids=acceptable_cases(qd, line),
        context=line.context(),
    )


# ------------------------------------------------------------------- ranking


@dataclass
class Decision:
    winner: str
    loser: str
    metric: str
    difference: float | None
    threshold: float | None

    def to_dict(self):
        return {"winner": self.winner, "loser": self.loser, "decided_by": self.metric,
                "difference": self.difference, "threshold": self.threshold}


class Comparator:
    """Pairwise coarse-to-fine comparison of two reports.

    Metrics are visited in order AR, RPR_I, RPR_A, RPR_U; the first whose
    absolute difference reaches its threshold decides (``inclusive=True``
    means a difference equal to the threshold decides). A metric missing on
    either side is skipped. If nothing decides, higher AR and then the
    smaller model id win, recorded as a "full tie".
    """

    def __init__(self, thresholds=DEFAULT_THRESHOLDS, inclusive=True, eps=THRESHOLD_EPS):
        thresholds = tuple(float(t) for t in thresholds)
        if len(thresholds) != len(RANK_METRICS) or any(t < 0 for t in thresholds):
            raise ConfigError(f"need {len(RANK_METRICS)} nonnegative thresholds")
        self.thresholds = thresholds
        self.inclusive = inclusive
        self.eps = eps

    def _decides(self, diff, thr):
        if self.inclusive:
            return abs(diff) >= thr - self.eps
        return abs(diff) > thr + self.eps

    def decide(self, a, b):
        for (name, attr, higher), thr in zip(RANK_METRICS, self.thresholds):
            va, vb = getattr(a, attr), getattr(b, attr)
            if va is None or vb is None:
                continue
            diff = va - vb
            if self._decides(diff, thr):
                a_wins = diff > 0 if higher else diff < 0
                w, l = (a, b) if a_wins else (b, a)
                return Decision(w.model_id, l.model_id, name, abs(diff), thr)
        if a.ar != b.ar:
            w, l = (a, b) if a.ar > b.ar else (b, a)
        else:
            w, l = (a, b) if a.model_id < b.model_id else (b, a)
        return Decision(w.model_id, l.model_id, "full tie", abs(a.ar - b.ar), None)

    def __call__(self, a, b):
        if a.model_id == b.model_id:
            return 0
        return -1 if self.decide(a, b).winner == a.model_id else 1


@dataclass
class RankingOutcome:
    ranked: list
    excluded: list
    trace: list
    intransitive: list
    cutoff: float
    thresholds: tuple
    inclusive: bool
    context: dict | None = None

    def ranks(self):
        out = {r.model_id: i + 1 for i, r in enumerate(self.ranked)}
        out.update({r.model_id: None for r in self.excluded})
        return out

    def to_dict(self):
        def row(r, rank):
            return {"model_id": r.model_id, "rank": rank, "AR": r.ar, "RPR_I": r.rpr_i, "RPR_A": r.rpr_a, "RPR_U": r.rpr_u}

        return {
            "kind": "ranking-outcome",
            "tool_version": __version__,
            "cutoff": self.cutoff,
            "thresholds": list(self.thresholds),
            "inclusive_thresholds": self.inclusive,
            "context": self.context,
            "models": [row(r, i + 1) for i, r in enumerate(self.ranked)] + [row(r, "x") for r in self.excluded],
            "decisions": [d.to_dict() for d in self.trace],
            "intransitive_triples": [list(t) for t in self.intransitive],
        }

    def to_text(self):
        """Fixed-width table: model, AR, RPR_I, RPR_A, RPR_U, rank (excluded shown as ×)."""

        def fmt(v):
            return "  -  " if v is None else f"{v:5.2f}"

        rows = [(r, str(i + 1)) for i, r in enumerate(self.ranked)] + [(r, "×") for r in self.excluded]
        width = max([5] + [len(r.model_id) for r, _ in rows])
        lines = [f"{'Model':<{width}}  {'AR':>5}  {'RPR_I':>5}  {'RPR_A':>5}  {'RPR_U':>5}  Rank"]
        for r, rank in rows:
            lines.append(f"{r.model_id:<{width}}  {fmt(r.ar)}  {fmt(r.rpr_i)}  {fmt(r.rpr_a)}  {fmt(r.rpr_u)}  {rank:>4}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def find_intransitive(reports, comparator):
    """All triples ``(a, b, c)`` with a beating b, b beating c and c beating a."""
    wins = {}
    for a, b in itertools.combinations(reports, 2):
        d = comparator.decide(a, b)
        wins[(d.winner, d.loser)] = True
    out = []
    for a, b, c in itertools.combinations(sorted(r.model_id for r in reports), 3):
        if (a, b) in wins and (b, c) in wins and (c, a) in wins:
            out.append((a, b, c))
        elif (a, c) in wins and (c, b) in wins and (b, a) in wins:
            out.append((a, c, b))
    return out


def rank_models(reports, cutoff=DEFAULT_CUTOFF, thresholds=DEFAULT_THRESHOLDS, inclusive=True):
    """Exclude models with AR below ``cutoff`` and order the rest coarse to fine.

    The order is a stable sort, with the pairwise comparator, of the reports
    pre-sorted by model id, so it does not depend on input order.
    """
    reports = list(reports)
    ids = [r.model_id for r in reports]
    if len(set(ids)) != len(ids):
        raise DuplicateKeyError("model ids must be unique")
    contexts = {json.dumps(r.context, sort_keys=True) for r in reports if r.context is not None}
    if len(contexts) > 1:
        raise DataMismatchError("reports were computed against different metrics or line sets")
    context = json.loads(contexts.pop()) if contexts else None

    comp = Comparator(thresholds, inclusive)
    reports.sort(key=lambda r: r.model_id)
    kept = [r for r in reports if r.ar >= cutoff]
    excluded = sorted((r for r in reports if r.ar < cutoff), key=lambda r: (-r.ar, r.model_id))
    ranked = sorted(kept, key=cmp_to_key(comp))
    trace = [comp.decide(a, b) for a, b in zip(ranked, ranked[1:])]
    return RankingOutcome(ranked, excluded, trace, find_intransitive(kept, comp), cutoff, comp.thresholds,
                          inclusive, context)


def read_summary_csv(path):
    """Read ``model,AR,RPR_I,RPR_A,RPR_U`` rows into summary reports (blank = absent)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"model", "AR", "RPR_I", "RPR_A", "RPR_U"}
        if reader.fieldnames is None or not need <= {f.strip() for f in reader.fieldnames}:
            raise ConfigError(f"{path}: expected columns model,AR,RPR_I,RPR_A,RPR_U")
        for lineno, row in enumerate(reader, 2):
            row = {k.strip(): (v or "").strip() for k, v in row.items()}
            try:
                vals = [None if row[k] in ("", "-") else float(row[k]) for k in ("AR", "RPR_I", "RPR_A", "RPR_U")]
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric metric value") from None
            if vals[0] is None or vals[1] is None:
                raise ConfigError(f"{path}:{lineno}: AR and RPR_I are required")
            out.append(SealReport.from_summary(row["model"], *vals))
    return out


# -------------------------------------------------------------- difficulty


def difficulty_order(line):
    """Cases from hardest to easiest by acceptance score, split into 5 groups.

    Returns ``(order, groups)``: ``order`` is the index permutation and
    ``groups`` lists case ids per group, earlier groups taking the remainder.
    """
    k = line.K
    if k < N_GROUPS:
        raise ParamError(f"difficulty grouping needs at least {N_GROUPS} cases, got {k}")
    sign = 1.0 if line.orientation == "higher-better" else -1.0
    order = sorted(range(k), key=lambda i: (sign * line.acceptance[i], i))
    base, rem = divmod(k, N_GROUPS)
    groups, start = [], 0
    for g in range(N_GROUPS):
        size = base + (1 if g < rem else 0)
        groups.append([line.case_ids[i] for i in order[start : start + size]])
        start += size
    return order, groups


# ------------------------------------------------------------ builtin lines


def upscale(image, factor, method="bicubic"):
    """Classical upscaling of an 8-bit image by an integer factor."""
    if method not in UPSCALERS:
        raise ParamError(f"upscaler must be one of {sorted(UPSCALERS)}")
    h, w = image.shape[:2]
    return cv2.resize(image, (w * factor, h * factor), interpolation=UPSCALERS[method])


def upscaler_scores(manifest, gt_images, upscaler="bicubic", metric="psnr", channel="y", crop_border=0):
    """Per-case mean IQA of a classical upscaler on an SE test set."""
    if metric not in METRICS:
        raise ParamError(f"metric must be one of {sorted(METRICS)}")
    gts = {str(k): v for k, v in gt_images.items()} if isinstance(gt_images, dict) else {Path(p).stem: p for p in gt_images}
    cache = {}
    out = {}
    for case in manifest.cases:
        vals = []
        for e in case.entries:
            if e.image_id not in gts:
                raise DataMismatchError(f"no GT image for image id {e.image_id!r}")
            if e.image_id not in cache:
                cache[e.image_id] = crop_to_multiple(load_image(gts[e.image_id]), manifest.scale_factor)
            sr = upscale(load_image(manifest.lr_path(e)), manifest.scale_factor, upscaler)
            vals.append(METRICS[metric](sr, cache[e.image_id], channel=channel, crop_border=crop_border))
        m = finite_mean(vals, what=f"{upscaler} scores in case {case.case_id!r}")
        if m is None:
            raise EmptyCaseError(f"case {case.case_id!r}: no finite {upscaler} scores")
        out[case.case_id] = m
    return out


def builtin_line(manifest, gt_images, acceptance="nearest", excellence="bicubic", metric="psnr",
                 channel="y", crop_border=0):
    """Line set from two classical upscalers; fails if the pairing inverts on any case."""
    qa = upscaler_scores(manifest, gt_images, acceptance, metric, channel, crop_border)
    qe = upscaler_scores(manifest, gt_images, excellence, metric, channel, crop_border)
    ids = manifest.case_ids
    return LineSet(ids, [qa[c] for c in ids], [qe[c] for c in ids], metric, None,
                   f"builtin-upscaler({acceptance}|{excellence})")

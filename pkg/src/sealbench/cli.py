"""``sealbench`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 eigensolver
failure, 5 data mismatch (missing outputs, case/metric disagreement, failed
verification).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .cluster import AffinityConfig, spectral_cluster
from .degrade import PipelineConfig, read_recipes_jsonl, write_recipes_jsonl
from .exceptions import (
    ConfigError,
    DataMismatchError,
    DecodeError,
    DegenerateLineError,
    DuplicateKeyError,
    EigensolverError,
    ParamError,
    RecipeParseError,
    ScoreParseError,
    SizeError,
)
from .features import METRIC_IDS, DistanceMatrix, average_matrices, distance_matrix, pool_variance
from .iqa import ingest_scores, score_outputs
from .plot import write_report_svg
from .seal import (
    DEFAULT_CUTOFF,
    DEFAULT_THRESHOLDS,
    LineSet,
    SealReport,
    builtin_line,
    evaluate,
    rank_models,
    read_summary_csv,
)
from .testset import (
    NOISE_MODES,
    SETestSetManifest,
    TOY_KINDS,
    build_pool,
    build_se_testset,
    build_toy,
    load_pool,
    pool_features,
    verify_pool,
    verify_testset,
)
from .imaging import load_image

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_EIGEN, EXIT_DATA = 0, 2, 3, 4, 5
IMAGE_SUFFIXES = {".png", ".bmp", ".jpg", ".jpeg"}

log = logging.getLogger("sealbench")


@dataclass
class RunConfig:
    """Everything a run depends on; echoed into each output it writes."""

    seed: int = 0
    n: int = 100
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    affinity: AffinityConfig = field(default_factory=AffinityConfig)
    k: int = 100
    restarts: int = 10
    distance_metric: str = "hist-l1"
    references: list = field(default_factory=list)
    clean_images: list = field(default_factory=list)
    output: str | None = None
    metric: str = "psnr"
    noise_mode: str = "per-image"
    thresholds: list = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    cutoff: float = DEFAULT_CUTOFF

    def validate(self):
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.distance_metric not in METRIC_IDS:
            raise ConfigError(f"distance_metric must be one of {METRIC_IDS}")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"noise_mode must be one of {NOISE_MODES}")
        if len(self.thresholds) != 4 or any(t < 0 for t in self.thresholds):
            raise ConfigError("thresholds must be four nonnegative numbers")
        if not 0.0 <= self.cutoff <= 1.0:
            raise ConfigError("cutoff must lie in [0, 1]")
        return self

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else v
        return out

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "pipeline" in doc:
            doc["pipeline"] = PipelineConfig.from_dict(doc["pipeline"])
        if "affinity" in doc:
            try:
                doc["affinity"] = AffinityConfig(**doc["affinity"])
            except TypeError as exc:
                raise ConfigError(f"bad affinity config: {exc}") from None
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _require_paths(paths, what):
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"{what} not found: {p}")


def _image_files(items):
    """Expand directories into their sorted image files."""
    out = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            out += sorted(str(q) for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
        else:
            out.append(str(p))
    return out


def _threads(args):
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("SEAL_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"SEAL_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("SEAL_THREADS must be >= 1")
        return n
    return 1


def load_run_config(args):
    """Config file first, then every flag that was given explicitly."""
    doc = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = RunConfig.from_dict(doc)
    flag_map = {"seed": "seed", "n": "n", "k": "k", "restarts": "restarts", "distance_metric": "distance_metric",
                "references": "references", "clean": "clean_images", "out": "output", "metric": "metric",
                "noise_mode": "noise_mode", "thresholds": "thresholds", "cutoff": "cutoff"}
    for flag, name in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, name, v)
    aff = {}
    for flag, key in (("affinity", "kernel"), ("n_neighbors", "n_neighbors"), ("sigma", "sigma")):
        v = getattr(args, flag, None)
        if v is not None:
            aff[key] = v
    if getattr(args, "mutual", False):
        aff["mutual"] = True
    if aff:
        base = cfg.affinity.to_dict()
        base.update(aff)
        if isinstance(base["sigma"], str) and base["sigma"] not in ("median", "mean"):
            try:
                base["sigma"] = float(base["sigma"])
            except ValueError:
                raise ConfigError(f"bad sigma {base['sigma']!r}") from None
        cfg.affinity = AffinityConfig(**base)
    return cfg.validate()


def _write_json(path, doc):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _echo(cfg, command):
    return {"command": command, "tool_version": __version__, "run_config": cfg.to_dict()}


def _out_dir(cfg, default):
    out = Path(cfg.output or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands


def cmd_pool(args):
    cfg = load_run_config(args)
    if not cfg.references:
        raise ConfigError("pool needs at least one --references image")
    _require_paths(cfg.references, "reference image")
    out = _out_dir(cfg, "pool")
    threads = _threads(args)
    pool = build_pool(cfg.references, cfg.n, cfg.pipeline, cfg.seed, out, n_jobs=threads,
                      config_echo=_echo(cfg, "pool"))
    (out / "distances").mkdir(exist_ok=True)
    summary = {"pool_id": pool.pool_id, "n": pool.n, "references": pool.reference_ids,
               "distance_metric": cfg.distance_metric, "variance": {}}
    mats = []
    for rid in pool.reference_ids:
        if cfg.distance_metric == "hist-l1":
            items = pool_features(pool, rid)
        else:
            items = [load_image(pool.image_path(rid, i)) for i in range(pool.n)]
        m = distance_matrix(items, cfg.distance_metric, n_jobs=threads)
        m.save(out / "distances" / f"{rid}.{cfg.distance_metric}.sealdm")
        summary["variance"][rid] = pool_variance(m)
        mats.append(m)
    if len(mats) > 1:
        avg = average_matrices(mats)
        avg.save(out / "distances" / f"average.{cfg.distance_metric}.sealdm")
        summary["variance"]["average"] = pool_variance(avg)
    summary.update(_echo(cfg, "pool"))
    _write_json(out / "pool_summary.json", summary)
    print(f"pool {pool.pool_id}: n={pool.n}, references={', '.join(pool.reference_ids)}")
    for rid, v in summary["variance"].items():
        print(f"  variance[{rid}] ({cfg.distance_metric}) = {v!r}")
    print(f"manifest: {out / 'pool.json'}")
    return EXIT_OK


def _pool_matrix(pool, metric, threads):
    mats = []
    for rid in pool.reference_ids:
        cached = Path(pool.root) / "distances" / f"{rid}.{metric}.sealdm"
        if cached.is_file():
            m = DistanceMatrix.load(cached)
        elif metric == "hist-l1":
            m = distance_matrix(pool_features(pool, rid), metric, n_jobs=threads)
        else:
            m = distance_matrix([load_image(pool.image_path(rid, i)) for i in range(pool.n)], metric, n_jobs=threads)
        if m.n != pool.n:
            raise DataMismatchError(f"{cached}: matrix size {m.n} does not match pool size {pool.n}")
        mats.append(m)
    return average_matrices(mats)


def cmd_cluster(args):
    cfg = load_run_config(args)
    _require_paths([args.pool], "pool manifest")
    pool = load_pool(args.pool)
    if cfg.k > pool.n:
        raise ConfigError(f"k={cfg.k} exceeds the pool size n={pool.n}")
    threads = _threads(args)
    d = _pool_matrix(pool, cfg.distance_metric, threads)
    res = spectral_cluster(d, cfg.k, cfg.affinity, seed=cfg.seed, n_init=cfg.restarts)
    out = _out_dir(cfg, "cluster")
    reps = [pool.recipes[i] for i in res.medoid_indices]
    write_recipes_jsonl(reps, out / "representatives.jsonl")
    extra = {
        "kind": "cluster-result",
        "pool_id": pool.pool_id,
        "distance_metric": cfg.distance_metric,
        "matrix": ("average of per-reference matrices over " + ", ".join(pool.reference_ids)
                   if len(pool.reference_ids) > 1 else f"single reference {pool.reference_ids[0]}"),
        "representatives": [{"cluster": c, "pool_index": int(i), "recipe_id": pool.recipes[i].recipe_id}
                            for c, i in enumerate(res.medoid_indices)],
        "cluster_sizes": [int((res.assignments == c).sum()) for c in range(res.k)],
    }
    extra.update(_echo(cfg, "cluster"))
    res.save_json(out / "cluster.json", extra)
    print(f"clustered {pool.n} items into k={res.k}; objective={res.objective:.6g}")
    print(f"representatives: {out / 'representatives.jsonl'}")
    return EXIT_OK


def cmd_build_testset(args):
    cfg = load_run_config(args)
    _require_paths([args.recipes], "recipes file")
    if not cfg.clean_images:
        raise ConfigError("build-testset needs --clean images or a directory")
    _require_paths(cfg.clean_images, "clean image")
    recipes = read_recipes_jsonl(args.recipes)
    clean = _image_files(cfg.clean_images)
    out = _out_dir(cfg, "testset")
    m = build_se_testset(recipes, clean, out, noise_mode=cfg.noise_mode, testset_id=args.testset_id,
                         n_jobs=_threads(args), seed=cfg.seed, config_echo=_echo(cfg, "build-testset"))
    print(f"test set {m.testset_id}: K={m.K} cases x {len(m.clean_images)} images -> {out / 'manifest.json'}")
    return EXIT_OK


def cmd_score(args):
    cfg = load_run_config(args)
    _require_paths([args.testset, args.sr, args.gt], "input")
    manifest = SETestSetManifest.load(args.testset)
    gts = _image_files([args.gt])
    table = score_outputs(args.sr, gts, manifest, metric=cfg.metric, model_id=args.model,
                          crop_border=args.crop_border, n_jobs=_threads(args))
    out = Path(args.out)
    table.to_csv(out)
    _write_json(out.with_name(out.name + ".json"), _echo(cfg, "score") | {"testset_id": manifest.testset_id})
    print(f"wrote {len(table.rows)} {cfg.metric} scores for {args.model} -> {out}")
    return EXIT_OK


def cmd_lines(args):
    cfg = load_run_config(args)
    _require_paths([args.testset, args.gt], "input")
    manifest = SETestSetManifest.load(args.testset)
    line = builtin_line(manifest, _image_files([args.gt]), args.acceptance, args.excellence, cfg.metric,
                        crop_border=args.crop_border)
    out = Path(args.out)
    line.save(out)
    sidecar = out.with_name(out.name + ".json")
    doc = json.loads(sidecar.read_text(encoding="utf-8"))
    doc["config_echo"] = _echo(cfg, "lines")
    _write_json(sidecar, doc)
    print(f"wrote {line.provenance} line set with K={line.K} -> {out}")
    return EXIT_OK


def cmd_eval(args):
    cfg = load_run_config(args)
    _require_paths([args.scores, args.line], "input")
    table = ingest_scores(args.scores)
    line = LineSet.load(args.line)
    report = evaluate(table, line)
    doc = report.to_dict()
    doc["config_echo"] = _echo(cfg, "eval")
    _write_json(args.out, doc)
    print(f"{report.model_id}: AR={report.ar:.4f} RPR_I={report.rpr_i:.4f} "
          f"RPR_A={_fmt_opt(report.rpr_a)} RPR_U={_fmt_opt(report.rpr_u)}")
    return EXIT_OK


def _fmt_opt(v):
    return "absent" if v is None else f"{v:.4f}"


def cmd_rank(args):
    cfg = load_run_config(args)
    reports = []
    if args.summary:
        _require_paths([args.summary], "summary table")
        reports += read_summary_csv(args.summary)
    if args.reports:
        _require_paths(args.reports, "report")
        reports += [SealReport.load(p) for p in args.reports]
    if not reports:
        raise ConfigError("rank needs --summary and/or report files")
    outcome = rank_models(reports, cfg.cutoff, cfg.thresholds, inclusive=not args.exclusive)
    text = outcome.to_text()
    sys.stdout.write(text)
    if outcome.intransitive:
        print(f"warning: {len(outcome.intransitive)} intransitive triple(s) found", file=sys.stderr)
    if args.out:
        doc = outcome.to_dict()
        doc["config_echo"] = _echo(cfg, "rank")
        _write_json(args.out, doc)
        Path(args.out).with_suffix(".txt").write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_report(args):
    cfg = load_run_config(args)
    _require_paths([args.line] + args.reports, "input")
    line = LineSet.load(args.line)
    reports = [SealReport.load(p) for p in args.reports]
    ctx = line.context()
    for r in reports:
        if r.context is not None and r.context != ctx:
            raise DataMismatchError(f"report {r.model_id!r} was computed against a different line set")
    write_report_svg(args.out, line, reports, title=args.title)
    # echo as an XML comment keeps the chart structure untouched
    svg = Path(args.out).read_text(encoding="utf-8")
    echo = json.dumps(_echo(cfg, "report")).replace("--", "- -")
    Path(args.out).write_text(svg.replace("\n", f"\n<!-- {echo} -->\n", 1), encoding="utf-8")
    print(f"wrote chart of {len(reports)} model(s) over K={line.K} cases -> {args.out}")
    return EXIT_OK


def cmd_toy(args):
    cfg = load_run_config(args)
    _require_paths([args.reference], "reference image")
    out = _out_dir(cfg, f"toy-{args.kind}")
    toy = build_toy(args.kind, args.reference, seed=cfg.seed, out_dir=out)
    summary = {"kind": toy.kind, "count": len(toy.items), "labels": sorted(set(toy.labels))}
    if args.evaluate:
        from .cluster import purity

        k = len(summary["labels"])
        summary["purity"] = {}
        for metric in METRIC_IDS:
            d = distance_matrix(toy.images, metric, n_jobs=_threads(args))
            res = spectral_cluster(d, k, cfg.affinity, seed=cfg.seed, n_init=cfg.restarts)
            summary["purity"][metric] = purity(res.assignments, toy.labels)
            print(f"{toy.kind} {metric}: purity={summary['purity'][metric]:.3f}")
    summary.update(_echo(cfg, "toy"))
    _write_json(out / "toy.json", summary)
    print(f"{toy.kind}: {len(toy.items)} images -> {out}")
    return EXIT_OK


def cmd_verify(args):
    _require_paths([args.manifest], "manifest")
    path = Path(args.manifest)
    if path.is_dir():
        path = path / ("pool.json" if (path / "pool.json").is_file() else "manifest.json")
    kind = json.loads(path.read_text(encoding="utf-8")).get("kind")
    if kind == "degradation-pool":
        problems = verify_pool(load_pool(path))
    elif kind == "se-testset":
        problems = verify_testset(SETestSetManifest.load(path), replay=args.replay)
    else:
        raise ConfigError(f"{path}: unknown manifest kind {kind!r}")
    for a, b, what in problems:
        print(f"{a}/{b}: {what}")
    if problems:
        print(f"verification FAILED: {len(problems)} problem(s)")
        return EXIT_DATA
    print(f"verified {path}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; explicit flags override it")
    common.add_argument("--threads", type=int, help="worker cap (falls back to SEAL_THREADS, then 1)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory or file")

    p = argparse.ArgumentParser(prog="sealbench", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pool", parents=[common], help="sample recipes and build a degradation pool")
    s.add_argument("--references", nargs="+")
    s.add_argument("--n", type=int)
    s.add_argument("--distance-metric", choices=METRIC_IDS)
    s.set_defaults(func=cmd_pool)

    s = sub.add_parser("cluster", parents=[common], help="spectral clustering of a pool into K representatives")
    s.add_argument("--pool", required=True, help="pool directory or pool.json")
    s.add_argument("--k", type=int)
    s.add_argument("--restarts", type=int)
    s.add_argument("--distance-metric", choices=METRIC_IDS)
    s.add_argument("--affinity", choices=("knn", "gaussian"))
    s.add_argument("--n-neighbors", type=int)
    s.add_argument("--sigma", help="'median', 'mean' or a positive number")
    s.add_argument("--mutual", action="store_true")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("build-testset", parents=[common], help="apply representative recipes to clean images")
    s.add_argument("--recipes", required=True)
    s.add_argument("--clean", nargs="+", help="clean images or directories")
    s.add_argument("--noise-mode", choices=NOISE_MODES)
    s.add_argument("--testset-id")
    s.set_defaults(func=cmd_build_testset)

    s = sub.add_parser("score", parents=[common], help="score SR outputs into a score-table CSV")
    s.add_argument("--testset", required=True)
    s.add_argument("--sr", required=True, help="directory laid out as <case-id>/<image-id>.png")
    s.add_argument("--gt", required=True, help="directory of clean GT images")
    s.add_argument("--model", required=True)
    s.add_argument("--metric", choices=("psnr", "ssim"))
    s.add_argument("--crop-border", type=int, default=0)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("lines", parents=[common], help="acceptance/excellence lines from classical upscalers")
    s.add_argument("--testset", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--acceptance", default="nearest", choices=("nearest", "bilinear", "bicubic"))
    s.add_argument("--excellence", default="bicubic", choices=("nearest", "bilinear", "bicubic"))
    s.add_argument("--metric", choices=("psnr", "ssim"))
    s.add_argument("--crop-border", type=int, default=0)
    s.set_defaults(func=cmd_lines)

    s = sub.add_parser("eval", parents=[common], help="SEAL report for one model")
    s.add_argument("--scores", required=True)
    s.add_argument("--line", required=True, help="line CSV (sidecar <line>.json next to it)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rank", parents=[common], help="coarse-to-fine ranking of models")
    s.add_argument("reports", nargs="*", help="SEAL report JSON files")
    s.add_argument("--summary", help="CSV with columns model,AR,RPR_I,RPR_A,RPR_U")
    s.add_argument("--cutoff", type=float)
    s.add_argument("--thresholds", type=float, nargs=4)
    s.add_argument("--exclusive", action="store_true", help="a difference equal to the threshold does not decide")
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("report", parents=[common], help="SVG chart of per-case scores")
    s.add_argument("--line", required=True)
    s.add_argument("--reports", nargs="+", required=True)
    s.add_argument("--title")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("toy", parents=[common], help="labeled blur/noise toy set")
    s.add_argument("--kind", required=True, choices=TOY_KINDS)
    s.add_argument("--reference", required=True)
    s.add_argument("--evaluate", action="store_true", help="cluster with each distance metric and print purity")
    s.add_argument("--restarts", type=int)
    s.set_defaults(func=cmd_toy)

    s = sub.add_parser("verify", help="re-check the hashes of a pool or test-set manifest")
    s.add_argument("manifest")
    s.add_argument("--replay", action="store_true", help="also regenerate every test-set image")
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except EigensolverError as exc:
        code, msg = EXIT_EIGEN, exc
    except (DataMismatchError, DegenerateLineError, SizeError) as exc:
        code, msg = EXIT_DATA, exc
    except (ConfigError, ParamError, RecipeParseError, ScoreParseError, DuplicateKeyError) as exc:
        code, msg = EXIT_CONFIG, exc
    except (OSError, DecodeError) as exc:
        code, msg = EXIT_IO, exc
    print(f"sealbench: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

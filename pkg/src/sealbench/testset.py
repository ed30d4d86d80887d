"""Degradation pools, SE test sets and the labeled toy sets.

On-disk layout
--------------
Pool::

    <out>/pool.json                 manifest (schema-versioned)
    <out>/recipes.jsonl             one recipe per line
    <out>/images/<ref-id>/<recipe-id>.png

SE test set::

    <out>/manifest.json
    <out>/cases/<case-id>/<image-id>.png
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .degrade import (
    DegradationStep,
    PipelineConfig,
    apply_recipe,
    apply_step,
    read_recipes_jsonl,
    recipe_from_dict,
    sample_recipe,
    write_recipes_jsonl,
)
from .exceptions import ConfigError, DecodeError, ParamError
from .features import histogram
from .imaging import (
    RNG_ALGORITHM,
    crop_to_multiple,
    draw_seed,
    encode_image,
    load_image,
    make_rng,
    sha256_bytes,
    sha256_file,
    stable_hash64,
    to_uint8,
)

MANIFEST_SCHEMA = 1
NOISE_MODES = ("per-image", "frozen")


def _write_json_atomic(doc, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def _unique_ids(paths):
    ids, seen = [], {}
    for p in paths:
        stem = Path(p).stem
        n = seen.get(stem, 0)
        seen[stem] = n + 1
        ids.append(stem if n == 0 else f"{stem}_{n}")
    return ids


def _map(fn, items, n_jobs):
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _salt_for(noise_mode, image_id):
    if noise_mode == "frozen":
        return ()
    return (stable_hash64(image_id),)


# ------------------------------------------------------------------------ pools


@dataclass
class DegradationPool:
    pool_id: str
    references: list
    reference_ids: list
    n: int
    recipes: list
    images: dict
    hashes: dict
    master_seed: int
    scale_factor: int
    config: dict = field(default_factory=dict)
    root: Path | None = None
    features: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {
            "schema_version": MANIFEST_SCHEMA,
            "kind": "degradation-pool",
            "tool_version": __version__,
            "pool_id": self.pool_id,
            "rng_algorithm": RNG_ALGORITHM,
            "master_seed": self.master_seed,
            "n": self.n,
            "scale_factor": self.scale_factor,
            "references": [
                {"reference_id": rid, "path": str(p)} for rid, p in zip(self.reference_ids, self.references)
            ],
            "recipes_file": "recipes.jsonl",
            "images": {
                rid: [{"recipe_id": r.recipe_id, "path": path, "sha256": h}
                      for r, path, h in zip(self.recipes, self.images[rid], self.hashes[rid])]
                for rid in self.reference_ids
            },
            "config": self.config,
        }

    def image_path(self, ref_id, i):
        return Path(self.root) / self.images[ref_id][i]


def _degrade_png(args):
    ref, recipe, salt = args
    lr = to_uint8(apply_recipe(ref, recipe, salt=salt))
    data = encode_image(lr, "png")
    return lr, data


def build_pool(references, n, config=None, seed=0, out_dir=None, n_jobs=1, pool_id=None, config_echo=None):
    """Sample ``n`` recipes from ``seed`` and apply each to every reference.

    When ``out_dir`` is given, images, ``recipes.jsonl`` and ``pool.json`` are
    written; the manifest is written last. Histogram features are kept in
    ``pool.features[ref_id]`` either way.
    """
    if n < 2:
        raise ParamError("a pool needs n >= 2")
    cfg = config if config is not None else PipelineConfig()
    references = [str(p) for p in references]
    if not references:
        raise ParamError("at least one reference image is required")
    ref_ids = _unique_ids(references)
    refs = [crop_to_multiple(load_image(p), cfg.scale_factor) for p in references]

    rng = make_rng(seed)
    recipes = [sample_recipe(rng, cfg, recipe_id=f"r{i:05d}") for i in range(n)]

    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
    images, hashes, feats = {}, {}, {}
    for rid, ref in zip(ref_ids, refs):
        if root is not None:
            (root / "images" / rid).mkdir(parents=True, exist_ok=True)
        results = _map(_degrade_png, [(ref, r, ()) for r in recipes], n_jobs)
        rel_paths, digests, rows = [], [], []
        for recipe, (lr, data) in zip(recipes, results):
            rel = f"images/{rid}/{recipe.recipe_id}.png"
            if root is not None:
                (root / rel).write_bytes(data)
            rel_paths.append(rel)
            digests.append(sha256_bytes(data))
            rows.append(histogram(lr))
        images[rid], hashes[rid], feats[rid] = rel_paths, digests, np.stack(rows)

    pool = DegradationPool(
        pool_id=pool_id or f"pool-{seed}-{n}",
        references=references,
        reference_ids=ref_ids,
        n=n,
        recipes=recipes,
        images=images,
        hashes=hashes,
        master_seed=int(seed),
        scale_factor=cfg.scale_factor,
        config=config_echo if config_echo is not None else {"pipeline": cfg.to_dict()},
        root=root,
        features=feats,
    )
    if root is not None:
        write_recipes_jsonl(recipes, root / "recipes.jsonl")
        _write_json_atomic(pool.to_dict(), root / "pool.json")
    return pool


def load_pool(path):
    """Read ``pool.json`` (or the directory holding it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "pool.json"
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("kind") != "degradation-pool":
        raise ConfigError(f"{path} is not a pool manifest")
    root = path.parent
    recipes = read_recipes_jsonl(root / doc["recipes_file"])
    ref_ids = [r["reference_id"] for r in doc["references"]]
    images = {rid: [e["path"] for e in doc["images"][rid]] for rid in ref_ids}
    hashes = {rid: [e["sha256"] for e in doc["images"][rid]] for rid in ref_ids}
    return DegradationPool(
        pool_id=doc["pool_id"],
        references=[r["path"] for r in doc["references"]],
        reference_ids=ref_ids,
        n=doc["n"],
        recipes=recipes,
        images=images,
        hashes=hashes,
        master_seed=doc["master_seed"],
        scale_factor=doc["scale_factor"],
        config=doc.get("config", {}),
        root=root,
    )


def pool_features(pool, ref_id):
    """Histogram features for one reference, loaded from disk if not cached."""
    if ref_id not in pool.features:
        pool.features[ref_id] = np.stack([histogram(load_image(pool.image_path(ref_id, i)))
                                          for i in range(pool.n)])
    return pool.features[ref_id]


def replay_pool_hashes(pool, n_jobs=1):
    """Recompute every pool image from (reference, recipe) and return the hashes."""
    out = {}
    for rid, ref_path in zip(pool.reference_ids, pool.references):
        ref = crop_to_multiple(load_image(ref_path), pool.scale_factor)
        results = _map(_degrade_png, [(ref, r, ()) for r in pool.recipes], n_jobs)
        out[rid] = [sha256_bytes(data) for _, data in results]
    return out


# ---------------------------------------------------------------- SE test sets


@dataclass
class SEEntry:
    image_id: str
    path: str
    sha256: str


@dataclass
class SECase:
    case_id: str
    recipe: object
    entries: list


@dataclass
class SETestSetManifest:
    testset_id: str
    scale_factor: int
    noise_mode: str
    clean_images: list
    cases: list
    seed: int | None = None
    config: dict = field(default_factory=dict)
    root: Path | None = field(default=None, compare=False)

    @property
    def K(self):
        return len(self.cases)

    @property
    def case_ids(self):
        return [c.case_id for c in self.cases]

    def lr_path(self, entry):
        return Path(self.root) / entry.path

    def to_dict(self):
        return {
            "schema_version": MANIFEST_SCHEMA,
            "kind": "se-testset",
            "tool_version": __version__,
            "testset_id": self.testset_id,
            "rng_algorithm": RNG_ALGORITHM,
            "scale_factor": self.scale_factor,
            "noise_mode": self.noise_mode,
            "seed": self.seed,
            "K": self.K,
            "clean_images": self.clean_images,
            "cases": [
                {
                    "case_id": c.case_id,
                    "recipe": c.recipe.to_dict(),
                    "images": [{"image_id": e.image_id, "path": e.path, "sha256": e.sha256} for e in c.entries],
                }
                for c in self.cases
            ],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, doc, root=None):
        if doc.get("kind") != "se-testset" or doc.get("schema_version") != MANIFEST_SCHEMA:
            raise ConfigError("not an SE test-set manifest of a supported schema version")
        cases = [
            SECase(
                c["case_id"],
                recipe_from_dict(c["recipe"], where=f"cases[{i}].recipe."),
                [SEEntry(e["image_id"], e["path"], e["sha256"]) for e in c["images"]],
            )
            for i, c in enumerate(doc["cases"])
        ]
        if doc.get("K", len(cases)) != len(cases):
            raise ConfigError("manifest K disagrees with its case list")
        return cls(doc["testset_id"], doc["scale_factor"], doc["noise_mode"], doc["clean_images"],
                   cases, doc.get("seed"), doc.get("config", {}), Path(root) if root else None)

    def save(self, path=None):
        path = Path(path) if path else Path(self.root) / "manifest.json"
        _write_json_atomic(self.to_dict(), path)
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), root=path.parent)


def _render_case_image(args):
    clean, recipe, salt = args
    return encode_image(to_uint8(apply_recipe(clean, recipe, salt=salt)), "png")


def build_se_testset(recipes, clean_images, out_dir, noise_mode="per-image", testset_id=None,
                     n_jobs=1, seed=None, config_echo=None):
    """Apply each of the K recipes to every clean image (K x M LR files).

    With ``noise_mode="per-image"`` each step's noise seed is salted with a
    stable hash of the image id, so images of one case get different but
    replayable noise; ``"frozen"`` reuses the recipe's own seeds.
    """
    if noise_mode not in NOISE_MODES:
        raise ParamError(f"noise_mode must be one of {NOISE_MODES}")
    recipes = list(recipes)
    if not recipes:
        raise ParamError("need at least one recipe")
    sf = recipes[0].scale_factor
    if any(r.scale_factor != sf for r in recipes):
        raise ParamError("all recipes must share one scale factor")
    clean_paths = [str(p) for p in clean_images]
    if not clean_paths:
        raise ParamError("need at least one clean image")
    image_ids = _unique_ids(clean_paths)
    cleans = [crop_to_multiple(load_image(p), sf) for p in clean_paths]

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cases, jobs = [], []
    for i, recipe in enumerate(recipes):
        case_id = f"case_{i:03d}"
        (root / "cases" / case_id).mkdir(parents=True, exist_ok=True)
        entries = []
        for image_id, clean in zip(image_ids, cleans):
            rel = f"cases/{case_id}/{image_id}.png"
            entries.append(SEEntry(image_id, rel, ""))
            jobs.append((clean, recipe, _salt_for(noise_mode, image_id)))
        cases.append(SECase(case_id, recipe, entries))

    blobs = iter(_map(_render_case_image, jobs, n_jobs))
    for case in cases:
        for entry in case.entries:
            data = next(blobs)
            (root / entry.path).write_bytes(data)
            entry.sha256 = sha256_bytes(data)

    clean_list = [{"image_id": iid, "path": p, "sha256": sha256_file(p)} for iid, p in zip(image_ids, clean_paths)]
    manifest = SETestSetManifest(
        testset_id=testset_id or f"se-{len(recipes)}x{len(clean_paths)}",
        scale_factor=sf,
        noise_mode=noise_mode,
        clean_images=clean_list,
        cases=cases,
        seed=seed,
        config=config_echo or {},
        root=root,
    )
    manifest.save()
    return manifest


def verify_testset(manifest, replay=False):
    """Return ``(case_id, image_id, problem)`` tuples; empty means verified.

    With ``replay=True`` every LR image is also regenerated from its recipe
    and clean image and compared byte-for-byte.
    """
    problems = []
    cleans = {}
    if replay:
        for c in manifest.clean_images:
            cleans[c["image_id"]] = crop_to_multiple(load_image(c["path"]), manifest.scale_factor)
    for case in manifest.cases:
        for e in case.entries:
            p = manifest.lr_path(e)
            if not p.is_file():
                problems.append((case.case_id, e.image_id, "missing"))
                continue
            if sha256_file(p) != e.sha256:
                problems.append((case.case_id, e.image_id, "hash mismatch"))
                continue
            if replay:
                data = _render_case_image((cleans[e.image_id], case.recipe, _salt_for(manifest.noise_mode, e.image_id)))
                if sha256_bytes(data) != e.sha256:
                    problems.append((case.case_id, e.image_id, "replay mismatch"))
    return problems


def verify_pool(pool):
    problems = []
    for rid in pool.reference_ids:
        for i, (rel, h) in enumerate(zip(pool.images[rid], pool.hashes[rid])):
            p = Path(pool.root) / rel
            if not p.is_file():
                problems.append((rid, pool.recipes[i].recipe_id, "missing"))
            elif sha256_file(p) != h:
                problems.append((rid, pool.recipes[i].recipe_id, "hash mismatch"))
    return problems


# -------------------------------------------------------------------- toy sets

TOY_KINDS = ("Blur100", "Noise100", "BN100")
BLUR_RANGE = (0.1, 4.0)
NOISE_RANGE = (1.0, 40.0)
BLUR_EDGES = (1.0, 2.0, 3.0)
TOY_BLUR_KERNEL = 21


def _band_label(value, lo, hi, edges=None):
    """1-based band: the first band is closed, later bands are left-open."""
    if edges is None:
        width = (hi - lo) / 4.0
        edges = (lo + width, lo + 2 * width, lo + 3 * width)
    for i, e in enumerate(edges):
        if value <= e:
            return i + 1
    return len(edges) + 1


def blur_label(sigma):
    return _band_label(sigma, *BLUR_RANGE, edges=BLUR_EDGES)


def noise_label(sigma):
    return _band_label(sigma, *NOISE_RANGE)


@dataclass
class ToyItem:
    image_id: str
    family: str
    param: float
    label: int
    image: np.ndarray = field(repr=False, default=None)
    path: str | None = None


@dataclass
class LabeledToySet:
    kind: str
    items: list

    @property
    def labels(self):
        return [it.label for it in self.items]

    @property
    def images(self):
        return [it.image for it in self.items]


def _toy_items(family, ref, rng, count=100):
    items = []
    for i in range(count):
        if family == "blur":
            sigma = float(rng.uniform(*BLUR_RANGE))
            step = DegradationStep.gaussian_blur(sigma, kernel_size=TOY_BLUR_KERNEL)
            label = blur_label(sigma)
        else:
            sigma = float(rng.uniform(*NOISE_RANGE))
            step = DegradationStep.gaussian_noise(sigma, draw_seed(rng))
            label = noise_label(sigma)
        img = to_uint8(apply_step(ref, step))
        items.append(ToyItem(f"{family}_{i:03d}", family, sigma, label, img))
    return items


def build_toy(kind, reference, seed=0, out_dir=None):
    """Labeled blur/noise toy set from one reference image.

    Blur and noise halves use independent generators derived from ``seed``,
    so BN100 is exactly the union of Blur100 and Noise100 for the same seed
    (noise labels shifted to 5..8).
    """
    if kind not in TOY_KINDS:
        raise ParamError(f"kind must be one of {TOY_KINDS}")
    ref = load_image(reference)
    items = []
    if kind in ("Blur100", "BN100"):
        items += _toy_items("blur", ref, make_rng(seed, 1))
    if kind in ("Noise100", "BN100"):
        noise = _toy_items("noise", ref, make_rng(seed, 2))
        if kind == "BN100":
            for it in noise:
                it.label += 4
        items += noise
    toy = LabeledToySet(kind, items)
    if out_dir is not None:
        root = Path(out_dir)
        (root / "images").mkdir(parents=True, exist_ok=True)
        for it in items:
            rel = f"images/{it.image_id}.png"
            (root / rel).write_bytes(encode_image(it.image, "png"))
            it.path = rel
        with open(root / "labels.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "path", "family", "param", "label"])
            for it in items:
                w.writerow([it.image_id, it.path, it.family, repr(it.param), it.label])
    return toy


def load_toy(out_dir, kind=None):
    root = Path(out_dir)
    items = []
    with open(root / "labels.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                img = load_image(root / row["path"])
            except DecodeError:
                raise
            items.append(ToyItem(row["image_id"], row["family"], float(row["param"]),
                                 int(row["label"]), img, row["path"]))
    return LabeledToySet(kind or root.name, items)

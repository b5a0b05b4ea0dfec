"""Deterministic synthetic Gram-smear generator.

Produces smear-like images with pixel-exact instance masks, grouped into
synthetic patients with per-patient appearance styles, so the whole
pipeline can be verified end to end without clinical data.  Cells are
rendered as disks (cocci), capsules (rods), or capsule chains
(pseudohyphae) in Gram-positive violet or Gram-negative pink, over a pale
background with ring-shaped distractors that deliberately mimic red blood
cells but own no mask instance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bagging import DatasetManifest, ManifestEntry, write_manifest
from .imaging import InstanceMask, RasterImage, read_mask, write_image_png, write_mask_png


class SynthError(ValueError):
    pass


GRAM_COLORS = {
    "positive": np.array([95.0, 60.0, 135.0]),   # crystal-violet
    "negative": np.array([205.0, 105.0, 130.0]),  # safranin pink
}
BACKGROUND = np.array([235.0, 228.0, 225.0])
ARRANGEMENT_GROUP_SIZES = {"single": (1, 1), "pair": (2, 2), "chain": (4, 7), "cluster": (4, 8)}


@dataclass(frozen=True)
class MorphotypeSpec:
    name: str
    shape: str                     # rod | coccus | pseudohypha
    arrangement: str               # single | pair | chain | cluster
    gram: str                      # positive | negative
    size_mean: float               # coccus: diameter px; rod/pseudohypha: length px
    size_std: float
    cells_per_image: tuple[int, int]

    def __post_init__(self):
        if self.shape not in ("rod", "coccus", "pseudohypha"):
            raise SynthError(f"unknown shape {self.shape!r}")
        if self.arrangement not in ARRANGEMENT_GROUP_SIZES:
            raise SynthError(f"unknown arrangement {self.arrangement!r}")
        if self.gram not in GRAM_COLORS:
            raise SynthError(f"unknown gram {self.gram!r}")
        if self.size_mean <= 0 or self.size_std < 0:
            raise SynthError("sizes must be positive")
        if self.shape == "pseudohypha" and self.arrangement != "single":
            raise SynthError("pseudohyphae are placed as single filaments")


@dataclass(frozen=True)
class PatientStyle:
    patient_id: str
    hue_shift: float = 0.0          # degrees-ish; realized as R/B seesaw
    brightness: float = 1.0
    blur_sigma: float = 0.0
    density_multiplier: float = 1.0


@dataclass(frozen=True)
class CategoryDef:
    """A dataset category: one morphotype, or a mixture for "other"."""

    name: str
    morphotypes: tuple[MorphotypeSpec, ...]


@dataclass(frozen=True)
class SceneTruth:
    image: RasterImage
    mask: InstanceMask
    label: int
    primitives: tuple[dict, ...]    # one rasterizable record per instance


@dataclass(frozen=True)
class DatasetSpec:
    categories: tuple[CategoryDef, ...]
    patients_per_category: int = 7
    images_per_patient: int = 10
    image_width: int = 384
    image_height: int = 384
    distractor_range: tuple[int, int] = (3, 7)
    noise_std: float = 2.5
    mode: str = "bacteria"          # bacteria | fungi


# ---------------------------------------------------------------------------
# primitive rasterization (shared by generation and verification)
# ---------------------------------------------------------------------------


def rasterize_primitive(prim: dict, height: int, width: int) -> np.ndarray:
    """Boolean pixel set of a primitive, clipped to the image bounds."""
    out = np.zeros((height, width), dtype=bool)
    kind = prim["kind"]
    if kind == "disk":
        _fill_disk(out, prim["cy"], prim["cx"], prim["radius"])
    elif kind == "capsule":
        _fill_capsule(out, prim["p0"], prim["p1"], prim["radius"])
    elif kind == "capsule_chain":
        for seg in prim["segments"]:
            _fill_capsule(out, seg["p0"], seg["p1"], seg["radius"])
    else:
        raise SynthError(f"unknown primitive kind {kind!r}")
    return out


def _fill_disk(out: np.ndarray, cy: float, cx: float, radius: float):
    h, w = out.shape
    r0 = max(0, int(math.floor(cy - radius)))
    r1 = min(h, int(math.ceil(cy + radius)) + 1)
    c0 = max(0, int(math.floor(cx - radius)))
    c1 = min(w, int(math.ceil(cx + radius)) + 1)
    if r0 >= r1 or c0 >= c1:
        return
    rr, cc = np.mgrid[r0:r1, c0:c1]
    out[r0:r1, c0:c1] |= (rr - cy) ** 2 + (cc - cx) ** 2 <= radius**2


def _fill_capsule(out: np.ndarray, p0, p1, radius: float):
    h, w = out.shape
    (y0, x0), (y1, x1) = p0, p1
    r0 = max(0, int(math.floor(min(y0, y1) - radius)))
    r1 = min(h, int(math.ceil(max(y0, y1) + radius)) + 1)
    c0 = max(0, int(math.floor(min(x0, x1) - radius)))
    c1 = min(w, int(math.ceil(max(x0, x1) + radius)) + 1)
    if r0 >= r1 or c0 >= c1:
        return
    rr, cc = np.mgrid[r0:r1, c0:c1]
    vy, vx = y1 - y0, x1 - x0
    seg_len2 = vy * vy + vx * vx
    if seg_len2 == 0:
        t = np.zeros_like(rr, dtype=np.float64)
    else:
        t = ((rr - y0) * vy + (cc - x0) * vx) / seg_len2
        t = np.clip(t, 0.0, 1.0)
    d2 = (rr - (y0 + t * vy)) ** 2 + (cc - (x0 + t * vx)) ** 2
    out[r0:r1, c0:c1] |= d2 <= radius**2


# ---------------------------------------------------------------------------
# cell group construction
# ---------------------------------------------------------------------------


def _cell_primitives(spec: MorphotypeSpec, rng: np.random.Generator,
                     group_center, count: int) -> list[dict]:
    """Primitive records for one arrangement group around group_center."""
    cy, cx = group_center
    prims = []
    if spec.shape == "coccus":
        radius = lambda: max(2.0, rng.normal(spec.size_mean, spec.size_std) / 2.0)
        if spec.arrangement == "single":
            prims.append({"kind": "disk", "cy": cy, "cx": cx, "radius": radius()})
        elif spec.arrangement in ("pair", "chain"):
            theta = rng.uniform(0, math.pi)
            dy, dx = math.sin(theta), math.cos(theta)
            radii = [radius() for _ in range(count)]
            step_at = np.cumsum([0.0] + [radii[i] + radii[i + 1] + 4.0
                                         for i in range(count - 1)])
            mid = step_at[-1] / 2.0
            for r, s in zip(radii, step_at):
                prims.append({"kind": "disk", "cy": cy + dy * (s - mid),
                              "cx": cx + dx * (s - mid), "radius": r})
        else:  # cluster: jittered ring packing with explicit spacing
            radii = [radius() for _ in range(count)]
            placed = []
            for r in radii:
                for _ in range(200):
                    rho = rng.uniform(0, spec.size_mean * 1.9)
                    phi = rng.uniform(0, 2 * math.pi)
                    y, x = cy + rho * math.sin(phi), cx + rho * math.cos(phi)
                    if all((y - py) ** 2 + (x - px) ** 2 >= (r + pr + 4.0) ** 2
                           for py, px, pr in placed):
                        placed.append((y, x, r))
                        break
                else:
                    placed.append((cy + len(placed) * (2 * r + 4.0), cx, r))
            for y, x, r in placed:
                prims.append({"kind": "disk", "cy": y, "cx": x, "radius": r})
    elif spec.shape == "rod":
        for i in range(count):
            length = max(8.0, rng.normal(spec.size_mean, spec.size_std))
            width = max(3.0, 0.3 * length)
            theta = rng.uniform(0, math.pi)
            dy, dx = math.sin(theta), math.cos(theta)
            off = i * (spec.size_mean * 0.6 + 6.0)
            oy, ox = cy + off * dx, cx - off * dy   # stack side by side
            half = (length - width) / 2.0
            prims.append({"kind": "capsule",
                          "p0": (oy - dy * half, ox - dx * half),
                          "p1": (oy + dy * half, ox + dx * half),
                          "radius": width / 2.0})
    else:  # pseudohypha: wiggly chain of capsule segments, one instance
        n_seg = int(rng.integers(3, 7))
        seg_len = max(12.0, rng.normal(spec.size_mean, spec.size_std))
        width = rng.uniform(8.0, 12.0)
        theta = rng.uniform(0, 2 * math.pi)
        y, x = cy, cx
        segments = []
        for _ in range(n_seg):
            y2 = y + math.sin(theta) * seg_len
            x2 = x + math.cos(theta) * seg_len
            segments.append({"p0": (y, x), "p1": (y2, x2), "radius": width / 2.0})
            y, x = y2, x2
            theta += rng.uniform(-0.5, 0.5)
        prims.append({"kind": "capsule_chain", "segments": segments})
    return prims


def _dilate(mask: np.ndarray, px: int) -> np.ndarray:
    return ndimage.binary_dilation(mask, iterations=px,
                                   structure=np.ones((3, 3), dtype=bool))


def generate_image(
    spec: MorphotypeSpec,
    style: PatientStyle,
    seed,
    width: int = 384,
    height: int = 384,
    label: int = 0,
    distractor_range: tuple[int, int] = (3, 7),
    noise_std: float = 2.5,
) -> SceneTruth:
    """Render one synthetic smear; mask is exact by construction.

    Cells are placed with a guaranteed >= 2 px gap between instances so
    ground truth instances are never merged by connected-component
    segmentation.  Fully determined by (spec, style, seed).
    """
    rng = np.random.default_rng(seed)
    target = int(rng.integers(spec.cells_per_image[0], spec.cells_per_image[1] + 1))

    # style-adjusted palette
    shift = np.array([style.hue_shift, 0.0, -style.hue_shift])
    bg = np.clip(BACKGROUND * style.brightness + shift, 0, 255)
    cell_base = np.clip(GRAM_COLORS[spec.gram] * style.brightness + shift, 0, 255)
    ring_color = np.clip(bg * 0.93 + np.array([9.0, -4.0, -7.0]), 0, 255)

    img = np.ones((height, width, 3), dtype=np.float64) * bg

    n_rings = int(round(rng.integers(distractor_range[0], distractor_range[1] + 1)
                        * style.density_multiplier))
    for _ in range(max(0, n_rings)):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        r_out = rng.uniform(14, 24)
        r_in = r_out - rng.uniform(3, 5)
        ring = np.zeros((height, width), dtype=bool)
        _fill_disk(ring, cy, cx, r_out)
        inner = np.zeros_like(ring)
        _fill_disk(inner, cy, cx, r_in)
        ring &= ~inner
        img[ring] = ring_color

    mask = np.zeros((height, width), dtype=np.int32)
    occupied = np.zeros((height, width), dtype=bool)
    primitives: list[dict] = []
    placed = 0
    attempts = 0
    while placed < target:
        attempts += 1
        if attempts > 500:
            raise SynthError(
                f"could not place {target} cells of {spec.name} in {width}x{height}")
        lo, hi = ARRANGEMENT_GROUP_SIZES[spec.arrangement]
        group_n = min(int(rng.integers(lo, hi + 1)), target - placed)
        margin = spec.size_mean * (2.5 if spec.arrangement == "cluster" else 1.2) + 8
        gy = rng.uniform(margin, height - margin)
        gx = rng.uniform(margin, width - margin)
        prims = _cell_primitives(spec, rng, (gy, gx), group_n)
        rasters = [rasterize_primitive(p, height, width) for p in prims]
        if any(r.sum() == 0 for r in rasters):
            continue
        group_union = np.zeros((height, width), dtype=bool)
        ok = True
        for r in rasters:
            # keep cells off the border and >= 2 px apart (no 8-adjacency)
            if r[0, :].any() or r[-1, :].any() or r[:, 0].any() or r[:, -1].any():
                ok = False
                break
            if (_dilate(r, 1) & (occupied | _dilate(group_union, 1))).any():
                ok = False
                break
            group_union |= r
        if not ok:
            continue
        for prim, r in zip(prims, rasters):
            instance_id = len(primitives) + 1
            mask[r] = instance_id
            jitter = rng.normal(0, 6, size=3)
            img[r] = np.clip(cell_base + jitter, 0, 255)
            primitives.append(prim)
        occupied |= _dilate(group_union, 1)
        placed += sum(1 for _ in rasters)

    img += rng.normal(0.0, noise_std, size=img.shape)
    if style.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(style.blur_sigma, style.blur_sigma, 0))
    pixels = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return SceneTruth(
        image=RasterImage(pixels),
        mask=InstanceMask(mask),
        label=label,
        primitives=tuple(primitives),
    )


# ---------------------------------------------------------------------------
# default category sets
# ---------------------------------------------------------------------------


def _cat(name, shape, arrangement, gram, size_mean, size_std, cells) -> CategoryDef:
    return CategoryDef(name, (MorphotypeSpec(name, shape, arrangement, gram,
                                             size_mean, size_std, cells),))


def default_bacteria_categories() -> tuple[CategoryDef, ...]:
    """Six distinguishable morphotypes plus an "other" mixture.

    cluster-tight and cluster-loose form a deliberately confusable pair:
    identical geometry except for the spread of cell sizes, mirroring
    within-genus lookalikes.
    """
    other = CategoryDef("other", (
        MorphotypeSpec("other-pink-coccus", "coccus", "single", "negative", 15.0, 1.5, (3, 6)),
        MorphotypeSpec("other-violet-pair-rod", "rod", "pair", "positive", 20.0, 2.0, (3, 6)),
        MorphotypeSpec("other-pink-chain", "coccus", "chain", "negative", 12.0, 1.0, (4, 7)),
    ))
    return (
        _cat("rod-violet", "rod", "single", "positive", 26.0, 3.0, (3, 5)),
        _cat("rod-pink", "rod", "single", "negative", 26.0, 3.0, (3, 5)),
        _cat("coccus-pairs", "coccus", "pair", "positive", 14.0, 1.2, (3, 5)),
        _cat("coccus-chains", "coccus", "chain", "positive", 12.0, 1.0, (4, 6)),
        _cat("cluster-tight", "coccus", "cluster", "positive", 13.0, 0.8, (5, 8)),
        _cat("cluster-loose", "coccus", "cluster", "positive", 13.0, 3.6, (5, 8)),
        other,
    )


def default_fungi_categories() -> tuple[CategoryDef, ...]:
    other = CategoryDef("other", (
        MorphotypeSpec("other-med-blasto", "coccus", "pair", "positive", 36.0, 4.0, (2, 4)),
        MorphotypeSpec("other-pink-blasto", "coccus", "single", "negative", 30.0, 4.0, (2, 4)),
    ))
    return (
        _cat("blasto-small", "coccus", "single", "positive", 26.0, 3.0, (2, 5)),
        _cat("blasto-large", "coccus", "single", "positive", 48.0, 5.0, (2, 4)),
        _cat("pseudohypha", "pseudohypha", "single", "positive", 40.0, 6.0, (1, 3)),
        other,
    )


def default_bacteria_spec() -> DatasetSpec:
    return DatasetSpec(categories=default_bacteria_categories(), mode="bacteria")


def default_fungi_spec() -> DatasetSpec:
    return DatasetSpec(categories=default_fungi_categories(), mode="fungi",
                       image_width=512, image_height=512)


def spec_to_json(spec: DatasetSpec) -> dict:
    return {
        "mode": spec.mode,
        "patients_per_category": spec.patients_per_category,
        "images_per_patient": spec.images_per_patient,
        "image_width": spec.image_width,
        "image_height": spec.image_height,
        "distractor_range": list(spec.distractor_range),
        "noise_std": spec.noise_std,
        "categories": [
            {"name": c.name, "morphotypes": [
                {**asdict(m), "cells_per_image": list(m.cells_per_image)}
                for m in c.morphotypes]}
            for c in spec.categories
        ],
    }


def spec_from_json(doc: dict) -> DatasetSpec:
    cats = []
    for c in doc["categories"]:
        morphs = tuple(
            MorphotypeSpec(
                name=m["name"], shape=m["shape"], arrangement=m["arrangement"],
                gram=m["gram"], size_mean=m["size_mean"], size_std=m["size_std"],
                cells_per_image=tuple(m["cells_per_image"]),
            )
            for m in c["morphotypes"]
        )
        cats.append(CategoryDef(c["name"], morphs))
    return DatasetSpec(
        categories=tuple(cats),
        patients_per_category=doc["patients_per_category"],
        images_per_patient=doc["images_per_patient"],
        image_width=doc["image_width"],
        image_height=doc["image_height"],
        distractor_range=tuple(doc["distractor_range"]),
        noise_std=doc["noise_std"],
        mode=doc.get("mode", "bacteria"),
    )


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def patient_style_for(seed: int, category_index: int, patient_index: int,
                      patient_id: str) -> PatientStyle:
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(7001, category_index, patient_index)))
    return PatientStyle(
        patient_id=patient_id,
        hue_shift=float(rng.uniform(-6, 6)),
        brightness=float(rng.uniform(0.94, 1.06)),
        blur_sigma=float(rng.uniform(0.0, 0.5)),
        density_multiplier=float(rng.uniform(0.8, 1.3)),
    )


def generate_dataset(spec: DatasetSpec, seed: int, out_dir: str | Path,
                     threads: int = 1) -> DatasetManifest:
    """Write images, masks, and a manifest; a pure function of (spec, seed).

    Per-image RNG streams derive from (seed, category, patient, image), so
    worker count cannot change the output.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    category_names = tuple(c.name for c in spec.categories)

    tasks = []
    for ci, cat in enumerate(spec.categories):
        for pi in range(spec.patients_per_category):
            patient_id = f"{cat.name}-p{pi:02d}"
            style = patient_style_for(seed, ci, pi, patient_id)
            for ii in range(spec.images_per_patient):
                tasks.append((ci, cat, pi, ii, patient_id, style))

    def build(task) -> ManifestEntry:
        ci, cat, pi, ii, patient_id, style = task
        bag_id = f"{cat.name}-p{pi:02d}-i{ii:02d}"
        img_seed = np.random.SeedSequence(entropy=seed, spawn_key=(ci, pi, ii))
        morph_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(9001, ci, pi, ii)))
        morph = cat.morphotypes[int(morph_rng.integers(0, len(cat.morphotypes)))]
        scene = generate_image(
            morph, style, img_seed,
            width=spec.image_width, height=spec.image_height, label=ci,
            distractor_range=spec.distractor_range, noise_std=spec.noise_std,
        )
        img_path = out_dir / "images" / f"{bag_id}.png"
        mask_path = out_dir / "masks" / f"{bag_id}.png"
        write_image_png(scene.image, img_path)
        write_mask_png(scene.mask, mask_path)
        return ManifestEntry(bag_id=bag_id, patient_id=patient_id, label=ci,
                             image_path=str(img_path), mask_path=str(mask_path))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(build, tasks))
    else:
        entries = [build(t) for t in tasks]
    manifest = DatasetManifest(entries=tuple(entries), category_names=category_names)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    (out_dir / "dataset-spec.json").write_text(json.dumps(spec_to_json(spec), indent=2))
    return manifest


def generate_embeddings(
    manifest: DatasetManifest, separability: float, dim: int, seed: int,
    out_path: str | Path,
) -> int:
    """Per-category Gaussian clusters keyed by patch_id, written as EMB1.

    Cluster centers are random unit directions scaled by `separability`;
    within-cluster scatter is unit normal, so separability 0 makes the
    categories indistinguishable.  Returns the number of rows written.
    """
    from .model import write_embedding_file

    if separability < 0:
        raise SynthError("separability must be >= 0")
    n_cat = len(manifest.category_names)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(4242,)))
    directions = rng.normal(size=(n_cat, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = directions * separability

    ids, rows = [], []
    for e in manifest.entries:
        mask = read_mask(e.mask_path)
        bag_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(4243, hash_bag(e.bag_id))))
        for instance_id in range(1, mask.n_instances + 1):
            ids.append(f"{e.bag_id}:{instance_id:04d}")
            rows.append(centers[e.label] + bag_rng.normal(size=dim))
    vectors = np.array(rows, dtype=np.float32) if rows else np.zeros((0, dim), np.float32)
    write_embedding_file(out_path, ids, vectors)
    return len(ids)


def hash_bag(bag_id: str) -> int:
    """Stable non-negative hash (process-seed independent, unlike hash())."""
    import zlib

    return zlib.crc32(bag_id.encode())

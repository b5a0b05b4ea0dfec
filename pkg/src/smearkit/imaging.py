"""Raster and instance-mask primitives.

Images are 8-bit RGB rasters; instance masks assign every pixel an integer
instance id (0 = background) with ids forming a contiguous range 1..N.
This module provides tiled segmentation, cross-tile mask merging, a
parametric color-threshold baseline segmenter, and per-instance geometry
(centroid, diameter, diameter filtering), plus PNG and RLE-JSON mask I/O.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


class ImagingError(ValueError):
    """Raised on malformed images, masks, or incompatible arguments."""


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RasterImage:
    """An 8-bit RGB raster, stored as an (H, W, 3) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if not isinstance(p, np.ndarray) or p.ndim != 3 or p.shape[2] != 3:
            raise ImagingError("image must be an (H, W, 3) array")
        if p.dtype != np.uint8:
            raise ImagingError("image samples must be uint8")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ImagingError("image must be at least 1x1")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class InstanceMask:
    """Per-pixel instance labels: 0 is background, instances are 1..N."""

    labels: np.ndarray

    def __post_init__(self):
        m = self.labels
        if not isinstance(m, np.ndarray) or m.ndim != 2:
            raise ImagingError("mask must be a 2-D array")
        if not np.issubdtype(m.dtype, np.integer):
            raise ImagingError("mask labels must be integers")
        if m.size and m.min() < 0:
            raise ImagingError("mask labels must be non-negative")
        ids = np.unique(m)
        ids = ids[ids > 0]
        n = len(ids)
        if n and (ids[0] != 1 or ids[-1] != n):
            raise ImagingError("instance ids must form a contiguous range 1..N")
        object.__setattr__(self, "_n_instances", n)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_instances(self) -> int:
        return self._n_instances

    def pixels_of(self, instance_id: int) -> np.ndarray:
        """(P, 2) array of (row, col) coordinates of one instance."""
        if not 1 <= instance_id <= self.n_instances:
            raise ImagingError(f"unknown instance id {instance_id}")
        rows, cols = np.nonzero(self.labels == instance_id)
        return np.stack([rows, cols], axis=1)

    @staticmethod
    def empty(height: int, width: int) -> "InstanceMask":
        return InstanceMask(np.zeros((height, width), dtype=np.int32))


@dataclass(frozen=True)
class SegmenterParams:
    """Parameters of the color-threshold baseline segmenter."""

    chroma_threshold: float = 40.0
    min_area: int = 20
    max_area: int = 100_000
    connectivity: int = 8

    def __post_init__(self):
        if self.min_area < 1:
            raise ImagingError("min_area must be >= 1")
        if self.min_area > self.max_area:
            raise ImagingError("min_area must not exceed max_area")
        if self.connectivity not in (4, 8):
            raise ImagingError("connectivity must be 4 or 8")


@dataclass(frozen=True)
class TilePlan:
    """A disjoint cover of an image by tiles of at most tile_size pixels.

    Tiles are (row_offset, col_offset, tile_width, tile_height).
    """

    tile_size: int
    image_width: int
    image_height: int
    tiles: tuple = field(default_factory=tuple)


def tile_image(img: RasterImage, tile_size: int = 1024) -> TilePlan:
    """Partition an image into tiles; edge tiles are clamped, never padded."""
    if tile_size < 1:
        raise ImagingError("tile_size must be >= 1")
    tiles = []
    for row in range(0, img.height, tile_size):
        th = min(tile_size, img.height - row)
        for col in range(0, img.width, tile_size):
            tw = min(tile_size, img.width - col)
            tiles.append((row, col, tw, th))
    return TilePlan(
        tile_size=tile_size,
        image_width=img.width,
        image_height=img.height,
        tiles=tuple(tiles),
    )


# ---------------------------------------------------------------------------
# baseline segmentation
# ---------------------------------------------------------------------------


def estimate_background(img: RasterImage) -> np.ndarray:
    """Per-channel median color; smear backgrounds dominate pixel counts."""
    return np.median(img.pixels.reshape(-1, 3), axis=0)


def chroma_distance(pixels: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Color distance with the gray (luminance) component projected out.

    Both pixel and reference colors are reduced to their deviation from
    their own channel mean before taking the Euclidean distance, so a
    darker or brighter version of the same hue scores near zero.
    """
    p = pixels.astype(np.float32)
    r = np.asarray(reference, dtype=np.float32)
    p_chroma = p - p.mean(axis=-1, keepdims=True)
    r_chroma = r - r.mean()
    d = p_chroma - r_chroma
    return np.sqrt(np.sum(d * d, axis=-1))


def _relabel_raster_order(labels: np.ndarray) -> np.ndarray:
    """Relabel instances contiguously, ordered by first pixel in raster scan."""
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    if len(ids) == 0:
        return np.zeros_like(labels, dtype=np.int32)
    order = np.argsort(first, kind="stable")
    lut = np.zeros(int(ids.max()) + 1, dtype=np.int32)
    lut[ids[order]] = np.arange(1, len(ids) + 1, dtype=np.int32)
    return lut[labels]


def _connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    return np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _filter_component_areas(labels: np.ndarray, min_area: int, max_area: int) -> np.ndarray:
    if labels.max() == 0:
        return labels.astype(np.int32)
    areas = np.bincount(labels.ravel())
    bad = (areas < min_area) | (areas > max_area)
    bad[0] = False
    out = labels.copy()
    out[bad[labels]] = 0
    return _relabel_raster_order(out)


def segment_baseline(
    img: RasterImage,
    params: SegmenterParams,
    background: np.ndarray | None = None,
) -> InstanceMask:
    """Threshold chroma distance from the background color, then label.

    Connected components whose area falls within [min_area, max_area]
    become instances, with ids assigned in raster-scan order of each
    component's first pixel.  `background` overrides the internal
    estimate; the tiled pipeline passes the whole-image estimate so
    per-tile results match whole-image segmentation exactly.
    """
    if background is None:
        background = estimate_background(img)
    dist = chroma_distance(img.pixels, background)
    fg = dist > params.chroma_threshold
    labels, _ = ndimage.label(fg, structure=_connectivity_structure(params.connectivity))
    labels = _relabel_raster_order(labels)
    labels = _filter_component_areas(labels, params.min_area, params.max_area)
    return InstanceMask(labels)


def merge_tile_masks(tile_masks: list[InstanceMask], plan: TilePlan) -> InstanceMask:
    """Reassemble per-tile masks, unifying instances that touch across tiles.

    Any two instances with 8-adjacent pixels lying in different tiles are
    merged under one id; final ids are relabeled contiguously in raster
    order of each merged instance's first pixel.
    """
    if len(tile_masks) != len(plan.tiles):
        raise ImagingError("expected one mask per tile")
    canvas = np.zeros((plan.image_height, plan.image_width), dtype=np.int64)
    owner = np.full((plan.image_height, plan.image_width), -1, dtype=np.int32)
    offset = 0
    for idx, (mask, (row, col, tw, th)) in enumerate(zip(tile_masks, plan.tiles)):
        if mask.height != th or mask.width != tw:
            raise ImagingError(
                f"tile {idx} mask is {mask.width}x{mask.height}, plan says {tw}x{th}"
            )
        region = mask.labels.astype(np.int64)
        shifted = np.where(region > 0, region + offset, 0)
        canvas[row : row + th, col : col + tw] = shifted
        owner[row : row + th, col : col + tw] = idx
        offset += mask.n_instances

    parent = list(range(offset + 1))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    def shifted(arr, dr, dc):
        h, w = arr.shape
        a = arr[max(0, -dr) : h - max(0, dr), max(0, -dc) : w - max(0, dc)]
        b = arr[max(0, dr) : h - max(0, -dr), max(0, dc) : w - max(0, -dc)]
        return a, b

    # cross-tile 8-adjacency: four directional shifts cover all pixel pairs
    for dr, dc in [(0, 1), (1, 0), (1, 1), (1, -1)]:
        a, b = shifted(canvas, dr, dc)
        oa, ob = shifted(owner, dr, dc)
        sel = (a > 0) & (b > 0) & (oa != ob)
        if sel.any():
            pairs = np.unique(np.stack([a[sel], b[sel]], axis=1), axis=0)
            for pa, pb in pairs:
                union(int(pa), int(pb))

    roots = np.array([find(i) for i in range(offset + 1)], dtype=np.int64)
    merged = roots[canvas]
    return InstanceMask(_relabel_raster_order(merged))


def segment_tiled(
    img: RasterImage, params: SegmenterParams, tile_size: int = 1024
) -> InstanceMask:
    """Tile, segment each tile, merge, then apply the area filter.

    The background color is estimated once on the whole image and the
    area filter runs after merging, so the result is pixel-identical
    (up to relabeling) to `segment_baseline` on the untiled image.
    """
    plan = tile_image(img, tile_size)
    background = estimate_background(img)
    raw = SegmenterParams(
        chroma_threshold=params.chroma_threshold,
        min_area=1,
        max_area=np.iinfo(np.int64).max,
        connectivity=params.connectivity,
    )
    tile_masks = []
    for row, col, tw, th in plan.tiles:
        tile = RasterImage(img.pixels[row : row + th, col : col + tw])
        tile_masks.append(segment_baseline(tile, raw, background=background))
    merged = merge_tile_masks(tile_masks, plan)
    return InstanceMask(_filter_component_areas(merged.labels, params.min_area, params.max_area))


# ---------------------------------------------------------------------------
# per-instance geometry
# ---------------------------------------------------------------------------


def centroid(mask: InstanceMask, instance_id: int) -> tuple[float, float]:
    """Arithmetic mean (row, col) of an instance's pixel coordinates."""
    pts = mask.pixels_of(instance_id)
    return float(pts[:, 0].mean()), float(pts[:, 1].mean())


def _hull_vertices(pts: np.ndarray) -> np.ndarray:
    """Convex hull (Andrew monotone chain) over integer pixel centers."""
    pts = np.unique(pts, axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(points):
        out = []
        for p in points:
            while len(out) >= 2:
                o, a = out[-2], out[-1]
                cross = (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])
                if cross <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _max_pairwise_distance(pts: np.ndarray) -> float:
    if len(pts) < 2:
        return 0.0
    p = pts.astype(np.float64)
    d2 = np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1)
    return float(np.sqrt(d2.max()))


def _longest_inside_chord(mask_bool: np.ndarray, pts: np.ndarray) -> float:
    """Longest segment between pixel centers lying entirely inside the mask."""
    p = pts.astype(np.float64)
    d2 = np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(len(pts), k=1)
    order = np.argsort(d2[iu], kind="stable")[::-1]
    for k in order:
        i, j = iu[0][k], iu[1][k]
        if _segment_inside(mask_bool, pts[i], pts[j]):
            return float(np.sqrt(d2[i, j]))
    return 0.0


def _segment_inside(mask_bool: np.ndarray, a: np.ndarray, b: np.ndarray) -> bool:
    n = int(max(abs(b[0] - a[0]), abs(b[1] - a[1]))) * 2 + 1
    t = np.linspace(0.0, 1.0, n)
    rows = np.rint(a[0] + (b[0] - a[0]) * t).astype(int)
    cols = np.rint(a[1] + (b[1] - a[1]) * t).astype(int)
    return bool(mask_bool[rows, cols].all())


def mask_diameter(mask: InstanceMask, instance_id: int, mode: str = "feret") -> float:
    """Instance diameter in pixels.

    "feret" (default): maximum Euclidean distance between any two pixel
    centers of the instance.  "chord": longest segment whose entire
    length stays within the instance, which can be shorter for
    non-convex shapes.  Instances above 2000 pixels use convex-hull
    vertices, which attain the same maximum exactly.
    """
    if mode not in ("feret", "chord"):
        raise ImagingError(f"unknown diameter mode {mode!r}")
    pts = mask.pixels_of(instance_id)
    if mode == "chord":
        return _longest_inside_chord(mask.labels == instance_id, pts)
    if len(pts) > 2000:
        pts = _hull_vertices(pts)
    return _max_pairwise_distance(pts)


def filter_by_diameter(mask: InstanceMask, max_diameter: float) -> InstanceMask:
    """Drop instances with diameter strictly greater than max_diameter."""
    if max_diameter <= 0:
        raise ImagingError("max_diameter must be positive")
    out = mask.labels.copy()
    for instance_id in range(1, mask.n_instances + 1):
        if mask_diameter(mask, instance_id) > max_diameter:
            out[out == instance_id] = 0
    return InstanceMask(_relabel_raster_order(out))


# ---------------------------------------------------------------------------
# instance matching / IoU
# ---------------------------------------------------------------------------


def instance_iou(a: InstanceMask, id_a: int, b: InstanceMask, id_b: int) -> float:
    """Pixel-set intersection over union between two instances."""
    pa = a.labels == id_a
    pb = b.labels == id_b
    inter = np.count_nonzero(pa & pb)
    union = np.count_nonzero(pa | pb)
    return inter / union if union else 0.0

def matched_iou_score(pred: InstanceMask, truth: InstanceMask) -> float:
    """Greedy one-to-one instance matching score in [0, 1].

    Pairs are matched in descending IoU order; the summed matched IoU is
    divided by max(n_pred, n_truth), so spurious and missed instances
    both pull the score down.  Two empty masks score 1.0; predicting
    instances on an empty truth scores 0.0.
    """
    np_, nt = pred.n_instances, truth.n_instances
    if np_ == 0 and nt == 0:
        return 1.0
    if np_ == 0 or nt == 0:
        return 0.0
    pairs = []
    for ip in range(1, np_ + 1):
        pa = pred.labels == ip
        overlapping = np.unique(truth.labels[pa])
        for it in overlapping[overlapping > 0]:
            pairs.append((instance_iou(pred, ip, truth, int(it)), ip, int(it)))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_t, total = set(), set(), 0.0
    for iou, ip, it in pairs:
        if ip in used_p or it in used_t:
            continue
        used_p.add(ip)
        used_t.add(it)
        total += iou
    return total / max(np_, nt)


# ---------------------------------------------------------------------------
# I/O: PNG images, PNG + RLE-JSON masks
# ---------------------------------------------------------------------------


def write_image_png(img: RasterImage, path: str | Path):
    Image.fromarray(img.pixels, mode="RGB").save(path, format="PNG")


def read_image_png(path: str | Path) -> RasterImage:
    with Image.open(path) as im:
        return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8))


def write_mask_png(mask: InstanceMask, path: str | Path):
    """16-bit single-channel PNG of instance ids."""
    if mask.n_instances > np.iinfo(np.uint16).max:
        raise ImagingError("mask has too many instances for 16-bit PNG")
    Image.fromarray(mask.labels.astype(np.uint16)).save(path, format="PNG")


def read_mask_png(path: str | Path) -> InstanceMask:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ImagingError(f"{path} is not a single-channel mask PNG")
    return InstanceMask(arr.astype(np.int32))


def mask_to_rle(mask: InstanceMask) -> dict:
    """JSON-ready RLE over row-major pixel order: [start, run, start, run, ...]."""
    flat = mask.labels.ravel()
    instances = {i: [] for i in range(1, mask.n_instances + 1)}
    if flat.size:
        change = np.flatnonzero(np.diff(flat)) + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [flat.size]])
        for s, e in zip(starts, ends):
            v = int(flat[s])
            if v > 0:
                instances[v].extend([int(s), int(e - s)])
    return {
        "width": mask.width,
        "height": mask.height,
        "instances": [{"id": i, "rle": runs} for i, runs in sorted(instances.items())],
    }


def mask_from_rle(doc: dict) -> InstanceMask:
    w, h = int(doc["width"]), int(doc["height"])
    flat = np.zeros(w * h, dtype=np.int32)
    for inst in doc["instances"]:
        runs = inst["rle"]
        for k in range(0, len(runs), 2):
            start, run = runs[k], runs[k + 1]
            if start < 0 or start + run > flat.size:
                raise ImagingError("RLE run exceeds mask bounds")
            flat[start : start + run] = inst["id"]
    return InstanceMask(flat.reshape(h, w))


def write_mask_json(mask: InstanceMask, path: str | Path):
    Path(path).write_text(json.dumps(mask_to_rle(mask)))


def read_mask_json(path: str | Path) -> InstanceMask:
    return mask_from_rle(json.loads(Path(path).read_text()))


def read_mask(path: str | Path) -> InstanceMask:
    """Dispatch on extension: .png or .json."""
    p = Path(path)
    if p.suffix == ".json":
        return read_mask_json(p)
    return read_mask_png(p)


def content_hash(*arrays: np.ndarray) -> str:
    """Stable short hex digest of array contents (CRC32 chain)."""
    crc = 0
    for a in arrays:
        crc = zlib.crc32(np.ascontiguousarray(a).tobytes(), crc)
        crc = zlib.crc32(str(a.shape).encode(), crc)
    return f"{crc:08x}"

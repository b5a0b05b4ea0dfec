"""Cell-centered patch extraction and MIL bag assembly.

A bag is the unit the classifier sees: all patches cut from one
microscopic image, tagged with the image's patient id and species label.
Bacteria mode cuts 96x96 patches at each instance centroid; fungi mode
cuts 800x800 context windows and downscales them to 224x224.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import ImagingError, InstanceMask, RasterImage, centroid

log = logging.getLogger(__name__)

BACTERIA_PATCH = 96
FUNGI_CROP = 800
FUNGI_PATCH = 224
JITTER_MARGIN = 8


class BaggingError(ValueError):
    pass


@dataclass(frozen=True)
class Patch:
    """One cell-centered crop plus provenance."""

    pixels: np.ndarray            # (S, S, 3) uint8
    center: tuple[int, int]       # (row, col) crop anchor in the source image
    source_instance: int
    patch_id: str
    # wider crop retained for translate-jitter augmentation; None once a
    # patch has round-tripped through an archive
    jitter_source: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class Bag:
    bag_id: str
    patient_id: str
    image_ref: str
    label: int
    patches: tuple[Patch, ...]

    @property
    def flagged_empty(self) -> bool:
        return len(self.patches) == 0


@dataclass(frozen=True)
class ManifestEntry:
    bag_id: str
    patient_id: str
    label: int
    image_path: str
    mask_path: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    category_names: tuple[str, ...]

    def __post_init__(self):
        ids = [e.bag_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise BaggingError("bag_ids must be unique")
        c = len(self.category_names)
        for e in self.entries:
            if not 0 <= e.label < c:
                raise BaggingError(f"label {e.label} out of range for {c} categories")

    @property
    def patients(self) -> tuple[str, ...]:
        seen = dict.fromkeys(e.patient_id for e in self.entries)
        return tuple(seen)

    def patient_label(self, patient_id: str) -> int:
        """Majority label of a patient's bags (warns if they disagree)."""
        votes: dict[int, int] = {}
        for e in self.entries:
            if e.patient_id == patient_id:
                votes[e.label] = votes.get(e.label, 0) + 1
        if not votes:
            raise BaggingError(f"unknown patient {patient_id}")
        if len(votes) > 1:
            log.warning("patient %s has mixed labels %s; using majority", patient_id, votes)
        return max(votes.items(), key=lambda kv: (kv[1], -kv[0]))[0]


def write_manifest(manifest: DatasetManifest, path: str | Path):
    """JSON Lines: a header object with category names, then one entry per bag."""
    with open(path, "w") as f:
        f.write(json.dumps({"category_names": list(manifest.category_names)}) + "\n")
        for e in manifest.entries:
            f.write(json.dumps({
                "bag_id": e.bag_id,
                "patient_id": e.patient_id,
                "label": e.label,
                "image": e.image_path,
                "mask": e.mask_path,
            }) + "\n")


def read_manifest(path: str | Path) -> DatasetManifest:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise BaggingError(f"{path} is empty")
    header = json.loads(lines[0])
    if "category_names" not in header:
        raise BaggingError(f"{path} has no category_names header line")
    entries = []
    for line in lines[1:]:
        if not line.strip():
            continue
        d = json.loads(line)
        entries.append(ManifestEntry(
            bag_id=d["bag_id"],
            patient_id=d["patient_id"],
            label=int(d["label"]),
            image_path=d["image"],
            mask_path=d["mask"],
        ))
    return DatasetManifest(entries=tuple(entries), category_names=tuple(header["category_names"]))


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------


def _reflect_indices(start: int, size: int, n: int) -> np.ndarray:
    """Coordinates start..start+size-1 folded into [0, n) by mirror reflection.

    Matches numpy's "reflect" convention (the edge sample is not repeated),
    for arbitrarily far out-of-bounds coordinates.
    """
    idx = np.arange(start, start + size)
    if n == 1:
        return np.zeros(size, dtype=np.int64)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _crop_reflect(pixels: np.ndarray, row0: int, col0: int, size: int) -> np.ndarray:
    """size x size crop with reflect padding for out-of-bounds regions."""
    h, w = pixels.shape[:2]
    if row0 >= 0 and col0 >= 0 and row0 + size <= h and col0 + size <= w:
        return np.ascontiguousarray(pixels[row0 : row0 + size, col0 : col0 + size])
    rows = _reflect_indices(row0, size, h)
    cols = _reflect_indices(col0, size, w)
    return np.ascontiguousarray(pixels[np.ix_(rows, cols)])


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def extract_bacteria_patches(
    img: RasterImage, mask: InstanceMask, id_prefix: str = "patch"
) -> list[Patch]:
    """One 96x96 patch per instance, centered at the rounded centroid."""
    return _extract(img, mask, BACTERIA_PATCH, id_prefix, with_margin=True)


def _extract(img, mask, size, id_prefix, with_margin):
    if (mask.height, mask.width) != (img.height, img.width):
        raise ImagingError("mask dimensions must match the image")
    half = size // 2
    patches = []
    for instance_id in range(1, mask.n_instances + 1):
        cr, cc = centroid(mask, instance_id)
        row_c, col_c = _round_half_up(cr), _round_half_up(cc)
        row0, col0 = row_c - half, col_c - half
        pix = _crop_reflect(img.pixels, row0, col0, size)
        margin = None
        if with_margin:
            m = JITTER_MARGIN
            margin = _crop_reflect(img.pixels, row0 - m, col0 - m, size + 2 * m)
        patches.append(Patch(
            pixels=pix,
            center=(row_c, col_c),
            source_instance=instance_id,
            patch_id=f"{id_prefix}:{instance_id:04d}",
            jitter_source=margin,
        ))
    return patches


def extract_fungi_patches(
    img: RasterImage, mask: InstanceMask, id_prefix: str = "patch"
) -> list[Patch]:
    """800x800 reflect-padded crop per instance, downscaled to 224x224.

    Callers are expected to have dropped oversized instances with
    filter_by_diameter first.
    """
    raw = _extract(img, mask, FUNGI_CROP, id_prefix, with_margin=False)
    out = []
    for p in raw:
        out.append(Patch(
            pixels=bilinear_resize(p.pixels, FUNGI_PATCH, FUNGI_PATCH),
            center=p.center,
            source_instance=p.source_instance,
            patch_id=p.patch_id,
        ))
    return out


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centered coordinates, uint8 rounded."""
    if out_h < 1 or out_w < 1:
        raise BaggingError("output dims must be >= 1")
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    src = img.astype(np.float64)

    def axis_coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0.0, n_in - 1.0)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = x - lo
        return lo, hi, frac

    r_lo, r_hi, r_f = axis_coords(out_h, in_h)
    c_lo, c_hi, c_f = axis_coords(out_w, in_w)
    top = src[r_lo][:, c_lo] * (1 - c_f)[None, :, None] + src[r_lo][:, c_hi] * c_f[None, :, None]
    bot = src[r_hi][:, c_lo] * (1 - c_f)[None, :, None] + src[r_hi][:, c_hi] * c_f[None, :, None]
    out = top * (1 - r_f)[:, None, None] + bot * r_f[:, None, None]
    return np.floor(out + 0.5).clip(0, 255).astype(np.uint8)


def build_bag(entry: ManifestEntry, patches: list[Patch]) -> Bag:
    """Deterministic bag; zero patches flags the bag instead of dropping it."""
    ordered = sorted(patches, key=lambda p: p.source_instance)
    if not ordered:
        log.warning("bag %s has no patches; flagged empty", entry.bag_id)
    return Bag(
        bag_id=entry.bag_id,
        patient_id=entry.patient_id,
        image_ref=entry.image_path,
        label=entry.label,
        patches=tuple(ordered),
    )


# ---------------------------------------------------------------------------
# patch archives
# ---------------------------------------------------------------------------

BAGS_MAGIC = b"BAGS"


def _png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_patch_dir(patches: list[Patch], directory: str | Path):
    """One PNG per patch plus an index JSON mapping patch_id -> file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for i, p in enumerate(patches):
        name = f"patch_{i:06d}.png"
        (directory / name).write_bytes(_png_bytes(p.pixels))
        index[p.patch_id] = name
    (directory / "index.json").write_text(json.dumps(index, indent=0))


def read_patch_dir(directory: str | Path) -> list[Patch]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    patches = []
    for patch_id, name in index.items():
        with Image.open(directory / name) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        patches.append(Patch(pixels=pixels, center=(0, 0), source_instance=0,
                             patch_id=patch_id))
    return patches


def write_patch_container(patches: list[Patch], path: str | Path):
    """Packed container: magic, u32 LE count, length-prefixed PNG blobs.

    Patch ids are written to a sidecar `<path>.index.json` in blob order.
    """
    path = Path(path)
    with open(path, "wb") as f:
        f.write(BAGS_MAGIC)
        f.write(struct.pack("<I", len(patches)))
        for p in patches:
            blob = _png_bytes(p.pixels)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
    Path(str(path) + ".index.json").write_text(
        json.dumps([p.patch_id for p in patches]))


def read_patch_container(path: str | Path) -> list[Patch]:
    path = Path(path)
    ids = json.loads(Path(str(path) + ".index.json").read_text())
    patches = []
    with open(path, "rb") as f:
        if f.read(4) != BAGS_MAGIC:
            raise BaggingError(f"{path} is not a patch container")
        (count,) = struct.unpack("<I", f.read(4))
        if count != len(ids):
            raise BaggingError("container count disagrees with index")
        for i in range(count):
            (n,) = struct.unpack("<I", f.read(4))
            with Image.open(io.BytesIO(f.read(n))) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
            patches.append(Patch(pixels=pixels, center=(0, 0), source_instance=0,
                                 patch_id=ids[i]))
    return patches

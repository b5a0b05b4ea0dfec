"""Active-learning annotation service.

Machine-proposed segmentation masks are queued for human review; each
verdict is one of OK (keep the predicted mask as ground truth), CLEAR
(replace it with an empty mask, teaching the segmenter to predict
nothing here), or SKIP (exclude the patch from training entirely).
Decisions land in an append-only JSON Lines log; the materialized ground
truth is a pure fold over that log, so replaying it reproduces the store
exactly.  A small threaded HTTP server exposes the queue, decision,
stats, export, and refit endpoints plus static files for the review UI.
"""

from __future__ import annotations

import io
import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from itertools import product
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image

from .imaging import (InstanceMask, RasterImage, SegmenterParams, content_hash,
                      estimate_background, matched_iou_score, read_image_png,
                      read_mask_png, segment_baseline, tile_image, write_mask_png)

ACTIONS = ("OK", "CLEAR", "SKIP")
DEFAULT_LEASE_SECONDS = 300.0


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class ProposedItem:
    item_id: str
    image: RasterImage
    mask: InstanceMask


@dataclass(frozen=True)
class Decision:
    item_id: str
    action: str
    reviewer: str
    timestamp: float


def render_overlay(image: RasterImage, mask: InstanceMask) -> np.ndarray:
    """Source pixels with instance contours painted green.

    A contour pixel is a labeled pixel with a 4-neighbor carrying a
    different label (or background); all other pixels equal the source.
    """
    labels = mask.labels
    fg = labels > 0
    contour = np.zeros_like(fg)
    for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        shifted = np.roll(labels, (dr, dc), axis=(0, 1))
        edge = fg & (shifted != labels)
        # roll wraps around; mask out the wrapped border rows/cols
        if dr == 1:
            edge[0, :] = fg[0, :]
        elif dr == -1:
            edge[-1, :] = fg[-1, :]
        if dc == 1:
            edge[:, 0] = fg[:, 0]
        elif dc == -1:
            edge[:, -1] = fg[:, -1]
        contour |= edge
    out = image.pixels.copy()
    out[contour] = (0, 255, 0)
    return out


def propose_items(params: SegmenterParams, images: list[RasterImage],
                  patch_size: int = 256) -> list[ProposedItem]:
    """Tile each image into review patches and segment each patch.

    The background color is estimated on the whole source image.  Item
    ids are content hashes of (patch pixels, predicted mask, params), so
    identical inputs always produce identical ids.
    """
    items = []
    for img in images:
        background = estimate_background(img)
        for row, col, tw, th in tile_image(img, patch_size).tiles:
            patch = RasterImage(img.pixels[row : row + th, col : col + tw])
            mask = segment_baseline(patch, params, background=background)
            item_id = content_hash(
                patch.pixels, mask.labels,
                np.array([params.chroma_threshold, params.min_area,
                          params.max_area, params.connectivity]))
            items.append(ProposedItem(item_id=item_id, image=patch, mask=mask))
    return items


def _png_bytes(arr: np.ndarray, mode: str = "RGB") -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


class AnnotationStore:
    """Disk-backed item registry + append-only decision log + leases.

    Layout under root: items/<id>.{image,mask,overlay}.png, items.jsonl
    (proposal order), decisions.jsonl (append-only).  Restart replays
    both files; leases are transient and expire after lease_seconds.
    """

    def __init__(self, root: str | Path, lease_seconds: float = DEFAULT_LEASE_SECONDS,
                 clock=time.time):
        self.root = Path(root)
        (self.root / "items").mkdir(parents=True, exist_ok=True)
        self.lease_seconds = lease_seconds
        self._clock = clock
        self._lock = threading.RLock()
        self._item_order: list[str] = []
        self._items: set[str] = set()
        self._decisions: dict[str, Decision] = {}
        self._log: list[Decision] = []
        self._leases: dict[str, tuple[str, float]] = {}
        self._replay()

    # -- persistence -------------------------------------------------------

    @property
    def _items_path(self) -> Path:
        return self.root / "items.jsonl"

    @property
    def _log_path(self) -> Path:
        return self.root / "decisions.jsonl"

    def _replay(self):
        if self._items_path.exists():
            for line in self._items_path.read_text().splitlines():
                if line.strip():
                    item_id = json.loads(line)["item_id"]
                    if item_id not in self._items:
                        self._items.add(item_id)
                        self._item_order.append(item_id)
        if self._log_path.exists():
            for line in self._log_path.read_text().splitlines():
                if line.strip():
                    d = json.loads(line)
                    decision = Decision(d["item_id"], d["action"], d["reviewer"],
                                        d["ts"])
                    self._log.append(decision)
                    self._decisions[decision.item_id] = decision

    # -- item lifecycle ----------------------------------------------------

    def add_items(self, items: list[ProposedItem]) -> int:
        """Queue proposals; re-proposing an existing id is a no-op."""
        added = 0
        with self._lock:
            for item in items:
                if item.item_id in self._items:
                    continue
                base = self.root / "items" / item.item_id
                Path(str(base) + ".image.png").write_bytes(
                    _png_bytes(item.image.pixels))
                write_mask_png(item.mask, str(base) + ".mask.png")
                Path(str(base) + ".overlay.png").write_bytes(
                    _png_bytes(render_overlay(item.image, item.mask)))
                with open(self._items_path, "a") as f:
                    f.write(json.dumps({"item_id": item.item_id,
                                        "width": item.image.width,
                                        "height": item.image.height}) + "\n")
                self._items.add(item.item_id)
                self._item_order.append(item.item_id)
                added += 1
        return added

    def _lease_active(self, item_id: str, now: float) -> bool:
        lease = self._leases.get(item_id)
        return lease is not None and lease[1] > now

    def next_item(self, reviewer: str) -> dict | None:
        """Lease the first available pending item; None when drained."""
        with self._lock:
            now = self._clock()
            for item_id in self._item_order:
                if item_id in self._decisions:
                    continue
                if self._lease_active(item_id, now):
                    continue
                expires = now + self.lease_seconds
                self._leases[item_id] = (reviewer, expires)
                return {"item_id": item_id, "reviewer": reviewer,
                        "lease_expires": expires}
            return None

    def record_decision(self, item_id: str, action: str, reviewer: str) -> Decision:
        """Append to the log and update the materialized outcome.

        Re-deciding a decided item overwrites its effect; the log keeps
        every event.
        """
        if action not in ACTIONS:
            raise StoreError(f"action must be one of {ACTIONS}, got {action!r}")
        with self._lock:
            if item_id not in self._items:
                raise KeyError(f"unknown item {item_id!r}")
            decision = Decision(item_id, action, reviewer, self._clock())
            with open(self._log_path, "a") as f:
                f.write(json.dumps({"item_id": decision.item_id,
                                    "action": decision.action,
                                    "reviewer": decision.reviewer,
                                    "ts": decision.timestamp}) + "\n")
            self._log.append(decision)
            self._decisions[item_id] = decision
            self._leases.pop(item_id, None)
            return decision

    def stats(self) -> dict:
        with self._lock:
            now = self._clock()
            decided = len(self._decisions)
            leased = sum(1 for i in self._item_order
                         if i not in self._decisions and self._lease_active(i, now))
            pending = len(self._item_order) - decided - leased
            actions = {a: 0 for a in ACTIONS}
            for d in self._decisions.values():
                actions[d.action] += 1
            return {"pending": pending, "leased": leased, "decided": decided,
                    "actions": actions, "total": len(self._item_order)}

    # -- item payloads -----------------------------------------------------

    def _item_file(self, item_id: str, kind: str) -> Path:
        if item_id not in self._items:
            raise KeyError(f"unknown item {item_id!r}")
        return self.root / "items" / f"{item_id}.{kind}.png"

    def item_png(self, item_id: str, kind: str) -> bytes:
        if kind not in ("image", "mask", "overlay"):
            raise StoreError(f"unknown payload kind {kind!r}")
        return self._item_file(item_id, kind).read_bytes()

    def item_image(self, item_id: str) -> RasterImage:
        return read_image_png(self._item_file(item_id, "image"))

    def item_mask(self, item_id: str) -> InstanceMask:
        return read_mask_png(self._item_file(item_id, "mask"))

    # -- ground truth ------------------------------------------------------

    def ground_truth(self) -> list[tuple[str, RasterImage, InstanceMask]]:
        """Materialized (item, image, mask) pairs: OK keeps the predicted
        mask, CLEAR substitutes an empty one, SKIP is excluded."""
        out = []
        with self._lock:
            outcomes = dict(self._decisions)
        for item_id in sorted(outcomes):
            d = outcomes[item_id]
            if d.action == "SKIP":
                continue
            image = self.item_image(item_id)
            if d.action == "OK":
                mask = self.item_mask(item_id)
            else:
                mask = InstanceMask.empty(image.height, image.width)
            out.append((item_id, image, mask))
        return out

    def export_training_set(self, out_dir: str | Path) -> int:
        """Write accepted pairs in the standard mask formats; returns count."""
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        pairs = self.ground_truth()
        with open(out / "manifest.jsonl", "w") as f:
            for item_id, image, mask in pairs:
                img_path = out / "images" / f"{item_id}.png"
                mask_path = out / "masks" / f"{item_id}.png"
                img_path.write_bytes(_png_bytes(image.pixels))
                write_mask_png(mask, mask_path)
                f.write(json.dumps({"item_id": item_id,
                                    "image": f"images/{item_id}.png",
                                    "mask": f"masks/{item_id}.png"}) + "\n")
        return len(pairs)


# ---------------------------------------------------------------------------
# segmenter refit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamGrid:
    chroma_thresholds: tuple[float, ...] = (20.0, 30.0, 40.0, 55.0, 70.0)
    min_areas: tuple[int, ...] = (1, 10, 20, 40)
    max_areas: tuple[int, ...] = (100_000,)


def refit_segmenter(
    store: AnnotationStore,
    grid: ParamGrid = ParamGrid(),
    incumbent: SegmenterParams | None = None,
    connectivity: int = 8,
) -> tuple[SegmenterParams, dict]:
    """Exhaustive grid search maximizing mean matched-IoU over accepted GT.

    Ties break toward the lowest threshold, then the smallest min_area.
    Including the incumbent in the candidate set guarantees the result
    never scores below it.
    """
    pairs = store.ground_truth()
    if not pairs:
        raise StoreError("no usable ground truth; review some items first")
    candidates = [
        SegmenterParams(chroma_threshold=t, min_area=a, max_area=m,
                        connectivity=connectivity)
        for t, a, m in product(sorted(grid.chroma_thresholds),
                               sorted(grid.min_areas), sorted(grid.max_areas))
    ]
    if incumbent is not None and incumbent not in candidates:
        candidates.append(incumbent)

    def score(params: SegmenterParams) -> float:
        total = 0.0
        for _, image, gt in pairs:
            pred = segment_baseline(image, params)
            total += matched_iou_score(pred, gt)
        return total / len(pairs)

    best, best_score = None, -1.0
    scores = []
    for params in candidates:
        s = score(params)
        scores.append({"chroma_threshold": params.chroma_threshold,
                       "min_area": params.min_area, "max_area": params.max_area,
                       "mean_iou": s})
        if s > best_score:
            best, best_score = params, s
    report = {"n_ground_truth": len(pairs), "best_mean_iou": best_score,
              "candidates": scores}
    return best, report


# ---------------------------------------------------------------------------
# HTTP server
# ---------------------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    store: AnnotationStore = None
    ui_dir: Path | None = None
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):   # quiet by default
        pass

    def _send_json(self, obj, status: int = 200):
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_bytes(self, body: bytes, content_type: str, status: int = 200):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if not length:
            return {}
        return json.loads(self.rfile.read(length).decode() or "{}")

    def do_GET(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        try:
            if url.path.startswith("/api/queue/next"):
                reviewer = parse_qs(url.query).get("reviewer", ["anonymous"])[0]
                item = self.store.next_item(reviewer)
                if item is None:
                    self.send_response(204)
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                item["image_url"] = f"/api/items/{item['item_id']}/image"
                item["mask_url"] = f"/api/items/{item['item_id']}/mask"
                item["overlay_url"] = f"/api/items/{item['item_id']}/overlay"
                self._send_json(item)
            elif url.path == "/api/stats":
                self._send_json(self.store.stats())
            elif len(parts) == 4 and parts[:2] == ["api", "items"]:
                self._send_bytes(self.store.item_png(parts[2], parts[3]), "image/png")
            else:
                self._serve_static(url.path)
        except KeyError as e:
            self._send_json({"error": str(e)}, status=404)
        except (StoreError, ValueError) as e:
            self._send_json({"error": str(e)}, status=400)

    def do_POST(self):
        url = urlparse(self.path)
        try:
            body = self._read_body()
            if url.path == "/api/decisions":
                decision = self.store.record_decision(
                    body["item_id"], body["action"], body.get("reviewer", "anonymous"))
                self._send_json({"ok": True, "item_id": decision.item_id,
                                 "action": decision.action})
            elif url.path == "/api/export":
                out_dir = body.get("out_dir") or str(self.store.root / "export")
                n = self.store.export_training_set(out_dir)
                self._send_json({"ok": True, "exported": n, "dir": out_dir})
            elif url.path == "/api/refit":
                grid = ParamGrid(
                    chroma_thresholds=tuple(body.get("chroma_thresholds",
                                                     ParamGrid.chroma_thresholds)),
                    min_areas=tuple(body.get("min_areas", ParamGrid.min_areas)),
                    max_areas=tuple(body.get("max_areas", ParamGrid.max_areas)))
                params, report = refit_segmenter(self.store, grid)
                self._send_json({"ok": True,
                                 "params": {"chroma_threshold": params.chroma_threshold,
                                            "min_area": params.min_area,
                                            "max_area": params.max_area,
                                            "connectivity": params.connectivity},
                                 "report": report})
            else:
                self._send_json({"error": "not found"}, status=404)
        except KeyError as e:
            self._send_json({"error": f"missing or unknown: {e}"}, status=404)
        except (StoreError, ValueError) as e:
            self._send_json({"error": str(e)}, status=400)

    def _serve_static(self, path: str):
        if self.ui_dir is None:
            if path == "/":
                self._send_bytes(
                    b"<html><body><p>smearkit annotation server; no UI bundle "
                    b"installed. API at /api/.</p></body></html>", "text/html")
                return
            self._send_json({"error": "not found"}, status=404)
            return
        rel = path.lstrip("/") or "index.html"
        target = (self.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) or not target.is_file():
            self._send_json({"error": "not found"}, status=404)
            return
        types = {".html": "text/html", ".js": "text/javascript",
                 ".css": "text/css", ".png": "image/png", ".map": "application/json"}
        self._send_bytes(target.read_bytes(),
                         types.get(target.suffix, "application/octet-stream"))


class ReviewServer:
    """Threaded HTTP server bound to an AnnotationStore."""

    def __init__(self, store: AnnotationStore, host: str = "127.0.0.1",
                 port: int = 8765, ui_dir: str | Path | None = None):
        handler = type("BoundHandler", (_Handler,), {
            "store": store,
            "ui_dir": Path(ui_dir) if ui_dir else None,
        })
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.store = store

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    def serve_forever(self):
        self.httpd.serve_forever()

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        thread.start()
        return thread

    def shutdown(self):
        self.httpd.shutdown()
        self.httpd.server_close()

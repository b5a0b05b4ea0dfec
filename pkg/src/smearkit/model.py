"""Bag classifier: patch encoder, multi-head attention pooling, linear head.

Per patch k the encoder produces an embedding h_k.  Each attention head
scores e_k = w . tanh(V h_k), softmaxes the scores over the bag, and
pools z_i = sum_k a_ik h_k; the concatenation of all head outputs feeds
one fully connected classifier.  The encoder is either a small trainable
CNN or a frozen lookup table of precomputed embeddings keyed by patch id.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .bagging import Bag, Patch


class ModelError(ValueError):
    pass


# channel means/stds are fixed constants so inference never depends on
# dataset statistics
INPUT_MEAN = 0.5
INPUT_STD = 0.25

DEFAULT_CATEGORY_COUNT = {"bacteria": 15, "fungi": 4}
DEFAULT_PATCH_SIZE = {"bacteria": 96, "fungi": 224}


@dataclass(frozen=True)
class ModelConfig:
    mode: str                      # bacteria | fungi
    n_categories: int
    encoder: str = "builtin-cnn"   # builtin-cnn | frozen-table
    embed_dim: int = 128           # D
    attn_heads: int = 4            # H
    attn_width: int = 128          # L
    cnn_channels: tuple[int, ...] = (16, 32, 64, 128)
    patch_size: int = 96

    def __post_init__(self):
        if self.mode not in ("bacteria", "fungi"):
            raise ModelError(f"unknown mode {self.mode!r}")
        if self.encoder not in ("builtin-cnn", "frozen-table"):
            raise ModelError(f"unknown encoder {self.encoder!r}")
        if self.attn_heads < 1:
            raise ModelError("need at least one attention head")
        if self.encoder == "builtin-cnn":
            if self.cnn_channels[-1] != self.embed_dim:
                raise ModelError("embed_dim must equal the last CNN channel count")
            if self.patch_size % (2 ** len(self.cnn_channels)):
                raise ModelError("patch_size must be divisible by 2^n_blocks")

    @staticmethod
    def for_mode(mode: str, n_categories: int | None = None, **overrides) -> "ModelConfig":
        base = ModelConfig(
            mode=mode,
            n_categories=n_categories or DEFAULT_CATEGORY_COUNT[mode],
            encoder="builtin-cnn" if mode == "bacteria" else "frozen-table",
            patch_size=DEFAULT_PATCH_SIZE[mode],
        )
        return replace(base, **overrides) if overrides else base

    def to_json(self) -> dict:
        return {
            "mode": self.mode, "n_categories": self.n_categories,
            "encoder": self.encoder, "embed_dim": self.embed_dim,
            "attn_heads": self.attn_heads, "attn_width": self.attn_width,
            "cnn_channels": list(self.cnn_channels), "patch_size": self.patch_size,
        }

    @staticmethod
    def from_json(doc: dict) -> "ModelConfig":
        return ModelConfig(
            mode=doc["mode"], n_categories=doc["n_categories"], encoder=doc["encoder"],
            embed_dim=doc["embed_dim"], attn_heads=doc["attn_heads"],
            attn_width=doc["attn_width"], cnn_channels=tuple(doc["cnn_channels"]),
            patch_size=doc["patch_size"],
        )


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """He-style fan-in initialization, fully determined by the seed."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11,)))
    store = ParamStore()
    if config.encoder == "builtin-cnn":
        c_in = 3
        for i, c_out in enumerate(config.cnn_channels):
            fan_in = c_in * 9
            store.add(f"enc.conv{i}.w",
                      rng.normal(0, np.sqrt(2.0 / fan_in), (c_out, c_in, 3, 3)).astype(dtype))
            store.add(f"enc.conv{i}.b", np.zeros(c_out, dtype=dtype))
            c_in = c_out
    d, l, h = config.embed_dim, config.attn_width, config.attn_heads
    for i in range(h):
        store.add(f"attn.head{i}.V", rng.normal(0, np.sqrt(1.0 / d), (l, d)).astype(dtype))
        store.add(f"attn.head{i}.w", rng.normal(0, np.sqrt(1.0 / l), (l,)).astype(dtype))
    store.add("clf.W", rng.normal(0, np.sqrt(1.0 / (h * d)), (config.n_categories, h * d)).astype(dtype))
    store.add("clf.b", np.zeros(config.n_categories, dtype=dtype))
    return store


# ---------------------------------------------------------------------------
# forward components
# ---------------------------------------------------------------------------


def normalize_patches(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(P, S, S, 3) uint8 -> standardized channels-last floats."""
    x = pixels.astype(np.dtype(dtype))
    x /= 255.0
    x -= INPUT_MEAN
    x /= INPUT_STD
    return x


def encode(params: ParamStore, config: ModelConfig, x: Tensor) -> Tensor:
    """Stacked patches (P, S, S, 3) -> embeddings (P, D)."""
    if config.encoder != "builtin-cnn":
        raise ModelError("encode requires the builtin CNN encoder")
    if x.shape[1] != config.patch_size or x.shape[2] != config.patch_size:
        raise ModelError(
            f"patch is {x.shape[1]}x{x.shape[2]}, model expects {config.patch_size}")
    out = x
    for i in range(len(config.cnn_channels)):
        # fused conv3x3 + relu + maxpool2x2 (identical math, cache-staged)
        out = ad.conv_block(out, params[f"enc.conv{i}.w"], params[f"enc.conv{i}.b"])
    return ad.global_avg_pool(out)


def transpose2d(a: Tensor) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data.T))

    def back(g):
        ad._accumulate(a, np.ascontiguousarray(g.T))

    ad._record(out, (a,), back)
    return out


def attention_weights(v: Tensor, w: Tensor, hmat: Tensor) -> Tensor:
    """Softmax attention over a bag: (K, D) embeddings -> (1, K) weights."""
    if hmat.shape[0] < 1:
        raise ModelError("attention over an empty bag")
    scores = ad.matmul(ad.tanh(ad.matmul(hmat, transpose2d(v))),
                       ad.reshape(w, (w.shape[0], 1)))        # (K, 1)
    return ad.softmax(ad.reshape(scores, (1, hmat.shape[0])))


def mil_pool(params: ParamStore, config: ModelConfig, hmat: Tensor) -> Tensor:
    """(K, D) -> (1, H*D): per-head attention-weighted means, concatenated."""
    if hmat.shape[0] < 1:
        raise ModelError("cannot pool an empty bag")
    pooled = []
    for i in range(config.attn_heads):
        a = attention_weights(params[f"attn.head{i}.V"], params[f"attn.head{i}.w"], hmat)
        pooled.append(ad.matmul(a, hmat))                     # (1, D)
    return ad.concat(pooled, axis=-1)


def classify(params: ParamStore, config: ModelConfig, z: Tensor) -> Tensor:
    """(1, H*D) pooled vector -> (1, C) logits."""
    expected = config.attn_heads * config.embed_dim
    if z.shape[-1] != expected:
        raise ModelError(f"pooled vector has length {z.shape[-1]}, expected {expected}")
    return ad.add(ad.matmul(z, transpose2d(params["clf.W"])), params["clf.b"])


def forward_embeddings(params: ParamStore, config: ModelConfig, hmat: Tensor) -> Tensor:
    return classify(params, config, mil_pool(params, config, hmat))


# ---------------------------------------------------------------------------
# frozen embedding table + EMB1 file format
# ---------------------------------------------------------------------------

EMB_MAGIC = b"EMB1"


def write_embedding_file(path: str | Path, ids: list[str], vectors: np.ndarray):
    """Magic, u32 count, u32 D, float32 rows, then a JSON id index."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ModelError("vectors must be (len(ids), D)")
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<II", len(ids), vectors.shape[1]))
        f.write(np.ascontiguousarray(vectors).astype("<f4").tobytes())
        f.write(json.dumps(list(ids)).encode())


def read_embedding_file(path: str | Path) -> tuple[list[str], np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != EMB_MAGIC:
        raise ModelError(f"{path} is not an embedding file")
    count, dim = struct.unpack("<II", raw[4:12])
    nbytes = count * dim * 4
    vectors = np.frombuffer(raw[12 : 12 + nbytes], dtype="<f4").reshape(count, dim)
    ids = json.loads(raw[12 + nbytes :].decode())
    if len(ids) != count:
        raise ModelError(f"{path}: id index disagrees with row count")
    return list(ids), vectors.astype(np.float32)


class FrozenEmbeddingTable:
    """Read-only patch_id -> embedding map for the frozen-encoder mode."""

    def __init__(self, ids: list[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
            raise ModelError("ids and vectors disagree")
        self.dim = int(vectors.shape[1])
        self._index = {pid: i for i, pid in enumerate(ids)}
        if len(self._index) != len(ids):
            raise ModelError("duplicate patch ids in embedding table")
        self._vectors = vectors
        self._vectors.flags.writeable = False

    @staticmethod
    def from_file(path: str | Path) -> "FrozenEmbeddingTable":
        return FrozenEmbeddingTable(*read_embedding_file(path))

    def lookup(self, patch_ids: list[str]) -> np.ndarray:
        rows = []
        for pid in patch_ids:
            i = self._index.get(pid)
            if i is None:
                raise ModelError(f"no embedding for patch_id {pid!r}")
            rows.append(i)
        return self._vectors[rows].copy()

    def fingerprint(self) -> bytes:
        return self._vectors.tobytes()


# ---------------------------------------------------------------------------
# bundled model
# ---------------------------------------------------------------------------


class MilModel:
    """Config + parameters + optional frozen table, with bag-level forward."""

    def __init__(self, config: ModelConfig, params: ParamStore,
                 table: FrozenEmbeddingTable | None = None):
        if config.encoder == "frozen-table":
            if table is None:
                raise ModelError("frozen-table mode needs an embedding table")
            if table.dim != config.embed_dim:
                raise ModelError(
                    f"table dim {table.dim} != model embed_dim {config.embed_dim}")
        self.config = config
        self.params = params
        self.table = table

    def bag_embeddings(self, bag: Bag) -> Tensor:
        """(K, D) embedding matrix for one bag."""
        if bag.flagged_empty:
            raise ModelError(f"bag {bag.bag_id} is empty")
        if self.config.encoder == "frozen-table":
            return Tensor(self.table.lookup([p.patch_id for p in bag.patches]))
        pixels = np.stack([p.pixels for p in bag.patches])
        dtype = self.params["clf.W"].dtype
        return encode(self.params, self.config,
                      Tensor(normalize_patches(pixels, dtype=dtype)))

    def forward_bag(self, bag: Bag) -> np.ndarray:
        """Logits (C,) for one bag, outside any tape."""
        logits = forward_embeddings(self.params, self.config, self.bag_embeddings(bag))
        return logits.data.reshape(-1).copy()

    def bag_vector(self, bag: Bag) -> np.ndarray:
        """Pooled (H*D,) representation for embedding export."""
        z = mil_pool(self.params, self.config, self.bag_embeddings(bag))
        return z.data.reshape(-1).copy()

    def save(self, path: str | Path):
        ad.save_checkpoint(self.params.to_arrays(), path)
        Path(str(path) + ".config.json").write_text(json.dumps(self.config.to_json()))

    @staticmethod
    def load(path: str | Path, table: FrozenEmbeddingTable | None = None) -> "MilModel":
        config = ModelConfig.from_json(
            json.loads(Path(str(path) + ".config.json").read_text()))
        arrays = ad.load_checkpoint(path)
        params = init_params(config, seed=0,
                             dtype=next(iter(arrays.values())).dtype)
        params.load_arrays(arrays)
        return MilModel(config, params, table)

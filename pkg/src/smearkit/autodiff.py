"""Dense-tensor numerical core with reverse-mode differentiation.

Just enough machinery for the patch encoder, attention pooling, and
classifier: tensors wrap row-major numpy arrays (float32 working
precision, float64 for gradient verification), operations record onto an
explicit tape, and backward walks the tape once in reverse creation
order.  Accumulation order is fixed everywhere so results are
byte-stable across runs and thread counts.  Any non-finite value is a
hard error at the op that produced it.
"""

from __future__ import annotations

import json
import struct
import threading
import zlib
from pathlib import Path

import numpy as np

_DTYPES = (np.float32, np.float64)
_CONV_CHUNK_BYTES = 2_500_000   # im2col working-set budget per GEMM
_local = threading.local()


class AutodiffError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """An operation produced (or was handed) NaN or Inf."""


def _ensure_finite(op: str, arr: np.ndarray):
    # a float64 pairwise sum is one cheap pass: any NaN/Inf poisons it, and
    # legitimately finite data cannot overflow the float64 accumulator
    if not np.isfinite(arr.sum(dtype=np.float64)):
        if np.isfinite(arr).all():
            return
        raise NonFiniteError(f"non-finite values in output of {op}")


class Tensor:
    """A dense tensor; immutable by convention once created."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float32)
        _ensure_finite("tensor", arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Creation-ordered record of operations for one backward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False


def _active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn):
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append((out, parents, backward_fn))


def _accumulate(t: Tensor, g: np.ndarray):
    """Route a gradient contribution into the active backward walk's sink."""
    if not t.requires_grad:
        return
    sink = _local.sink
    key = id(t)
    slot = sink.get(key)
    if slot is None:
        sink[key] = [t, g.copy()]
    else:
        slot[1] += g


def _walk(tape: Tape, loss: Tensor) -> dict:
    """One reverse pass; returns {id: [tensor, grad]} for the leaves."""
    if loss.data.shape != ():
        raise AutodiffError("loss must be a scalar")
    sink: dict[int, list] = {}
    prev = getattr(_local, "sink", None)
    _local.sink = sink
    try:
        sink[id(loss)] = [loss, np.ones((), dtype=loss.dtype)]
        for out, parents, backward_fn in reversed(tape.nodes):
            slot = sink.pop(id(out), None)
            if slot is None:
                continue
            backward_fn(slot[1])
    finally:
        _local.sink = prev
    return sink


def backward(tape: Tape, loss: Tensor):
    """Propagate d(loss) through every recorded node exactly once.

    Gradients land on the .grad of the leaf tensors (parameters and any
    other requires_grad leaves), accumulating with whatever is there.
    """
    for t, g in _walk(tape, loss).values():
        t.grad = g if t.grad is None else t.grad + g


def backward_grads(tape: Tape, loss: Tensor) -> dict[int, list]:
    """Like backward, but returns {id(tensor): [tensor, grad]} untouched.

    Safe for concurrent per-thread tapes over shared (read-only)
    parameters: nothing is written to the tensors themselves.
    """
    return _walk(tape, loss)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _binary_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise AutodiffError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _binary_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    _ensure_finite("matmul", out.data)

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    _record(out, (a, b), back)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a rank-1 bias broadcast over rows."""
    _binary_dtype(a, b, "add")
    bias_mode = b.data.ndim == 1 and a.data.ndim > 1 and a.shape[-1] == b.shape[0]
    if not bias_mode and a.shape != b.shape:
        raise AutodiffError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    _ensure_finite("add", out.data)

    def back(g):
        _accumulate(a, g)
        if bias_mode:
            _accumulate(b, g.reshape(-1, b.shape[0]).sum(axis=0))
        else:
            _accumulate(b, g)

    _record(out, (a, b), back)
    return out


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    out = Tensor(a.data * s)
    _ensure_finite("scalar_mul", out.data)

    def back(g):
        _accumulate(a, g * s)

    _record(out, (a,), back)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def back(g):
        _accumulate(a, g * (a.data > 0))

    _record(out, (a,), back)
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))

    def back(g):
        _accumulate(a, g * (1.0 - out.data * out.data))

    _record(out, (a,), back)
    return out


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis; rows sum to 1."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))
    _ensure_finite("softmax", out.data)

    def back(g):
        s = out.data
        _accumulate(a, (g - (g * s).sum(axis=-1, keepdims=True)) * s)

    _record(out, (a,), back)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def back(g):
        _accumulate(a, g.reshape(a.shape))

    _record(out, (a,), back)
    return out


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise AutodiffError("concat: need at least one tensor")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def back(g):
        offsets = np.cumsum([0] + sizes)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    _record(out, tuple(tensors), back)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    _ensure_finite("sum_all", out.data)

    def back(g):
        _accumulate(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    _record(out, (a,), back)
    return out


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise AutodiffError("gather_rows expects a 2-D tensor")
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise AutodiffError("gather_rows: index out of range")
    out = Tensor(a.data[indices])

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, indices, g)
        _accumulate(a, ga)

    _record(out, (a,), back)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, channels-last.

    x: (N, H, W, C); w: (F, C, 3, 3); b: (F,).  One GEMM over unfolded
    3x3 windows; channels-last keeps the unfold and all gradient
    reshapes contiguous.  The backward pass reuses the unfolded matrix
    for the weight gradient and scatters the input gradient with nine
    fixed-order shifted adds.
    """
    _binary_dtype(x, w, "conv2d")
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise AutodiffError("conv2d expects x (N,H,W,C) and w (F,C,3,3)")
    n, h, wd, c = x.shape
    f = w.shape[0]
    if w.shape[1] != c or b.shape != (f,):
        raise AutodiffError("conv2d: channel mismatch")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    wmat = np.ascontiguousarray(
        w.data.transpose(2, 3, 1, 0)).reshape(9 * c, f)     # (ky,kx,C) x F
    # unfolded windows are rebuilt in cache-sized sample chunks: on
    # bandwidth-poor machines one whole-batch im2col buffer thrashes memory
    chunk = max(1, _CONV_CHUNK_BYTES // (h * wd * 9 * c * x.data.itemsize))
    cols_buf = np.empty((chunk, h, wd, 9, c), dtype=x.dtype)

    def unfold(lo, hi):
        cb = cols_buf[: hi - lo]
        for ky in range(3):
            for kx in range(3):
                cb[:, :, :, ky * 3 + kx, :] = xp[lo:hi, ky : ky + h, kx : kx + wd, :]
        return cb.reshape((hi - lo) * h * wd, 9 * c)

    out_arr = np.empty((n, h, wd, f), dtype=x.dtype)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        np.matmul(unfold(lo, hi), wmat, out=out_arr[lo:hi].reshape(-1, f))
    out_arr += b.data
    out = Tensor(out_arr)
    _ensure_finite("conv2d", out.data)

    def back(g):
        gw = np.zeros((9 * c, f), dtype=x.dtype)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            cb = unfold(lo, hi)
            g_mat = g[lo:hi].reshape(-1, f)
            gw += cb.T @ g_mat
            if gxp is not None:
                g_cols = (g_mat @ wmat.T).reshape(hi - lo, h, wd, 9, c)
                for ky in range(3):
                    for kx in range(3):
                        gxp[lo:hi, ky : ky + h, kx : kx + wd, :] += \
                            g_cols[:, :, :, ky * 3 + kx, :]
        _accumulate(w, gw.reshape(3, 3, c, f).transpose(3, 2, 0, 1))
        _accumulate(b, g.reshape(-1, f).sum(axis=0))
        if gxp is not None:
            _accumulate(x, gxp[:, 1 : 1 + h, 1 : 1 + wd, :])

    _record(out, (x, w, b), back)
    return out


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, channels-last; requires even spatial dims.

    Two single-axis stages (width pairs, then height pairs) with a
    first-wins tie rule, so the backward scatter is pure elementwise
    masking and fully deterministic.
    """
    if x.data.ndim != 4:
        raise AutodiffError("maxpool2d expects (N,H,W,C)")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise AutodiffError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    v = x.data.reshape(n, h, w // 2, 2, c)
    take_right = v[:, :, :, 1, :] > v[:, :, :, 0, :]
    m1 = np.where(take_right, v[:, :, :, 1, :], v[:, :, :, 0, :])
    u = m1.reshape(n, h // 2, 2, w // 2, c)
    take_down = u[:, :, 1, :, :] > u[:, :, 0, :, :]
    out = Tensor(np.where(take_down, u[:, :, 1, :, :], u[:, :, 0, :, :]))

    def back(g):
        gu = np.zeros((n, h // 2, 2, w // 2, c), dtype=x.dtype)
        gu[:, :, 0, :, :] = np.where(take_down, 0, g)
        gu[:, :, 1, :, :] = np.where(take_down, g, 0)
        g1 = gu.reshape(n, h, w // 2, c)
        gv = np.zeros((n, h, w // 2, 2, c), dtype=x.dtype)
        gv[:, :, :, 0, :] = np.where(take_right, 0, g1)
        gv[:, :, :, 1, :] = np.where(take_right, g1, 0)
        _accumulate(x, gv.reshape(n, h, w, c))

    _record(out, (x,), back)
    return out


def conv_block(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused conv3x3(stride 1, pad 1) + bias + relu + maxpool2x2.

    Semantically identical to maxpool2d(relu(conv2d(x, w, b))) but tuned
    for the encoder hot path: the unfolded window matrix is built once
    and kept for the backward pass, pooling stores only two boolean
    selection masks, and the unpool scatter is four strided masked
    writes.  The relu gate needs no stored mask because only
    pool-selected positions receive gradient, and their gate equals
    (pooled output > 0).
    """
    _binary_dtype(x, w, "conv_block")
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise AutodiffError("conv_block expects x (N,H,W,C) and w (F,C,3,3)")
    n, h, wd, c = x.shape
    f = w.shape[0]
    if w.shape[1] != c or b.shape != (f,):
        raise AutodiffError("conv_block: channel mismatch")
    if h % 2 or wd % 2:
        raise AutodiffError(f"conv_block needs even spatial dims, got {h}x{wd}")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(9 * c, f)
    cols = np.empty((n, h, wd, 9, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky * 3 + kx, :] = xp[:, ky : ky + h, kx : kx + wd, :]
    del xp
    cols = cols.reshape(n * h * wd, 9 * c)
    z = np.empty((n * h * wd, f), dtype=x.dtype)
    np.matmul(cols, wmat, out=z)
    z += b.data
    np.maximum(z, 0, out=z)
    v = z.reshape(n, h, wd // 2, 2, f)
    take_right = v[:, :, :, 1, :] > v[:, :, :, 0, :]
    m1 = np.where(take_right, v[:, :, :, 1, :], v[:, :, :, 0, :])
    u = m1.reshape(n, h // 2, 2, wd // 2, f)
    take_down = u[:, :, 1, :, :] > u[:, :, 0, :, :]
    out = Tensor(np.where(take_down, u[:, :, 1, :, :], u[:, :, 0, :, :]))
    del z, v, m1, u
    _ensure_finite("conv_block", out.data)

    def back(g):
        g = g * (out.data > 0)          # relu gate on the selected positions
        # selected column parity at the selected row of each 2x2 window
        tr_sel = np.where(take_down, take_right[:, 1::2, :, :],
                          take_right[:, 0::2, :, :])
        g_conv = np.empty((n, h, wd, f), dtype=x.dtype)
        for down in (0, 1):
            rows = g_conv[:, down::2, :, :]
            row_hit = take_down if down else ~take_down
            for right in (0, 1):
                col_hit = tr_sel if right else ~tr_sel
                rows[:, :, right::2, :] = g * (row_hit & col_hit)
        g_mat = g_conv.reshape(n * h * wd, f)
        _accumulate(w, (cols.T @ g_mat).reshape(3, 3, c, f).transpose(3, 2, 0, 1))
        _accumulate(b, g_mat.sum(axis=0))
        if x.requires_grad:
            gxp = np.zeros((n, h + 2, wd + 2, c), dtype=x.dtype)
            chunk = max(1, _CONV_CHUNK_BYTES // (h * wd * 9 * c * x.data.itemsize))
            gcols_buf = np.empty((chunk * h * wd, 9 * c), dtype=x.dtype)
            for lo in range(0, n, chunk):
                hi = min(n, lo + chunk)
                m = hi - lo
                gcb = gcols_buf[: m * h * wd]
                np.matmul(g_mat[lo * h * wd : hi * h * wd], wmat.T, out=gcb)
                g_cols = gcb.reshape(m, h, wd, 9, c)
                for ky in range(3):
                    for kx in range(3):
                        gxp[lo:hi, ky : ky + h, kx : kx + wd, :] += \
                            g_cols[:, :, :, ky * 3 + kx, :]
            _accumulate(x, gxp[:, 1 : 1 + h, 1 : 1 + wd, :])

    _record(out, (x, w, b), back)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise AutodiffError("global_avg_pool expects (N,H,W,C)")
    n, h, w, c = x.shape
    out = Tensor(x.data.mean(axis=(1, 2)))

    def back(g):
        _accumulate(x, np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(x.dtype))

    _record(out, (x,), back)
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label]; accepts one row or a batch."""
    data = logits.data
    squeeze = data.ndim == 1
    if squeeze:
        data = data[None, :]
    labels_arr = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = data.shape
    if labels_arr.shape != (n,):
        raise AutodiffError(f"cross_entropy: {n} rows but labels shape {labels_arr.shape}")
    if labels_arr.min() < 0 or labels_arr.max() >= c:
        raise AutodiffError("cross_entropy: label out of range")
    m = data.max(axis=1, keepdims=True)
    z = data - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    losses = lse - data[np.arange(n), labels_arr]
    out = Tensor(losses.mean().astype(data.dtype))
    _ensure_finite("cross_entropy", out.data)

    def back(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels_arr] -= 1.0
        gl = p * (g / n)
        _accumulate(logits, gl[0] if squeeze else gl)

    _record(out, (logits,), back)
    return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameter tensors with stable iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(array), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def gradients(self) -> list[np.ndarray]:
        """Per-parameter gradients in store order; zeros when unreachable."""
        return [t.grad if t.grad is not None else np.zeros_like(t.data)
                for t in self._params.values()]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k, t in self._params.items():
            if k not in arrays:
                raise AutodiffError(f"missing parameter {k!r}")
            a = np.asarray(arrays[k], dtype=t.dtype)
            if a.shape != t.data.shape:
                raise AutodiffError(f"shape mismatch for {k!r}: {a.shape} vs {t.data.shape}")
            t.data = a.copy()

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for k, t in self._params.items():
            out.add(k, t.data.astype(dtype))
        return out


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_CKPT_VERSION = 1


def save_checkpoint(arrays: dict[str, np.ndarray], path: str | Path):
    """JSON header + concatenated little-endian tensor data + CRC32."""
    names = list(arrays)
    dtype = np.dtype(np.float64) if any(
        np.asarray(arrays[n]).dtype == np.float64 for n in names) else np.dtype(np.float32)
    header = json.dumps({
        "version": _CKPT_VERSION,
        "names": names,
        "shapes": [list(np.asarray(arrays[n]).shape) for n in names],
        "dtype": dtype.name,
    }).encode()
    body = b"".join(
        np.ascontiguousarray(np.asarray(arrays[n], dtype=dtype)).astype(
            dtype.newbyteorder("<")).tobytes()
        for n in names)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(header + body)))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<I", raw[:4])
    header_bytes = raw[4 : 4 + hlen]
    body = raw[4 + hlen : -4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(header_bytes + body) != crc:
        raise AutodiffError(f"checkpoint {path} failed CRC32 validation")
    header = json.loads(header_bytes)
    if header["version"] != _CKPT_VERSION:
        raise AutodiffError(f"unsupported checkpoint version {header['version']}")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    out = {}
    offset = 0
    for name, shape in zip(header["names"], header["shapes"]):
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(body[offset : offset + nbytes], dtype=dtype)
        out[name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(body):
        raise AutodiffError(f"checkpoint {path} has trailing data")
    return out


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def grad_check(fn, params: ParamStore, eps: float = 1e-6, tol: float = 1e-5):
    """Compare reverse-mode gradients against central finite differences.

    fn is a zero-argument callable returning a scalar Tensor computed
    from `params`.  Returns a report with the max relative error, where
    relative error is |a - b| / max(1, |a|, |b|).
    """
    with Tape() as tape:
        loss = fn()
    params.zero_grad()
    backward(tape, loss)
    analytic = [g.copy() for g in params.gradients()]

    max_err = 0.0
    worst = None
    for (name, t), ga in zip(params.items(), analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(gflat[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > max_err:
                max_err = err
                worst = (name, i, a, numeric)
    return GradCheckReport(max_rel_err=max_err, tol=tol, worst=worst)


class GradCheckReport:
    def __init__(self, max_rel_err: float, tol: float, worst):
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.worst = worst

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __repr__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e}, "
                f"tol={self.tol:.1e}, worst={self.worst})")

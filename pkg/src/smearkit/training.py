"""Training recipe: cross-entropy, AdamW, OneCycle, EMA, bag augmentation.

Bacteria mode trains encoder + pooling + classifier end to end and keeps
an EMA shadow of the weights for evaluation; fungi mode trains only
pooling + classifier over frozen per-patch embeddings and uses no EMA.
Given a fixed seed, training is bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .bagging import Bag, Patch
from .model import MilModel, ModelConfig, normalize_patches, encode, forward_embeddings

# re-exported: the loss is a differentiable op and lives with the tape code
from .autodiff import cross_entropy  # noqa: F401


class TrainingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamWState:
    """First/second moment estimates plus the step counter."""

    def __init__(self, params: ParamStore, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(t.data) for t in params.tensors()]
        self.v = [np.zeros_like(t.data) for t in params.tensors()]


def adamw_step(state: AdamWState, params: ParamStore, grads: list[np.ndarray], lr: float):
    """One decoupled-weight-decay Adam update, in place."""
    tensors = params.tensors()
    if len(grads) != len(tensors):
        raise TrainingError("one gradient per parameter required")
    if lr <= 0:
        raise TrainingError("lr must be positive")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for theta, m, v, g in zip(tensors, state.m, state.v, grads):
        if g.shape != theta.data.shape:
            raise TrainingError("gradient shape mismatch")
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        m_hat = m / bc1
        v_hat = v / bc2
        theta.data = (theta.data
                      - lr * m_hat / (np.sqrt(v_hat) + state.eps)
                      - lr * state.weight_decay * theta.data)


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OneCycleSchedule:
    total_steps: int
    steps_per_epoch: int
    max_lr: float = 3e-4
    warmup_epochs: int = 10
    div_start: float = 25.0
    div_final: float = 1e4

    def __post_init__(self):
        if self.total_steps < 2:
            raise TrainingError("schedule needs at least 2 steps")
        if not 0 < self.warmup_steps < self.total_steps - 1:
            raise TrainingError(
                f"warmup ({self.warmup_steps} steps) must fit inside "
                f"total_steps ({self.total_steps})")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def onecycle_lr(sched: OneCycleSchedule, step: int) -> float:
    """Cosine ramp to max_lr over the warmup, cosine anneal afterwards."""
    if not 0 <= step < sched.total_steps:
        raise TrainingError(f"step {step} outside [0, {sched.total_steps})")
    w = sched.warmup_steps
    if step == w:
        return sched.max_lr
    if step < w:
        lo = sched.max_lr / sched.div_start
        return lo + (sched.max_lr - lo) * 0.5 * (1.0 - math.cos(math.pi * step / w))
    final = sched.max_lr / sched.div_final
    if step == sched.total_steps - 1:
        return final
    span = sched.total_steps - 1 - w
    frac = (step - w) / span
    return final + (sched.max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------


class EmaState:
    """Shadow copy of the parameters, updated every optimizer step."""

    def __init__(self, params: ParamStore, decay: float = 0.999):
        if not 0.0 <= decay <= 1.0:
            raise TrainingError("decay must be in [0, 1]")
        self.decay = decay
        self.shadow = {k: t.data.copy() for k, t in params.items()}


def ema_update(ema: EmaState, params: ParamStore):
    d = ema.decay
    for k, t in params.items():
        s = ema.shadow[k]
        if s.shape != t.data.shape:
            raise TrainingError(f"shadow shape mismatch for {k!r}")
        s *= d
        s += (1.0 - d) * t.data


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotations: tuple[int, ...] = (0, 90, 180, 270)   # exact pixel permutations
    translate_jitter: int = 8
    patch_dropout_p: float = 0.2

    def __post_init__(self):
        for p in (self.hflip_p, self.vflip_p):
            if not 0.0 <= p <= 1.0:
                raise TrainingError("flip probabilities must be in [0, 1]")
        if not 0.0 <= self.patch_dropout_p < 1.0:
            raise TrainingError("patch_dropout_p must be in [0, 1)")
        if any(r not in (0, 90, 180, 270) for r in self.rotations):
            raise TrainingError("rotations must be multiples of 90 degrees")


def _jittered_crop(patch: Patch, dy: int, dx: int) -> np.ndarray:
    """Re-crop the patch shifted by (dy, dx) from its wider source window."""
    size = patch.size
    src = patch.jitter_source
    if src is None:
        # archived patches lost their margin; reconstruct one by reflection
        m = max(abs(dy), abs(dx))
        src = np.pad(patch.pixels, ((m, m), (m, m), (0, 0)), mode="reflect")
        off = m
    else:
        off = (src.shape[0] - size) // 2
        if not (-off <= dy <= off and -off <= dx <= off):
            raise TrainingError(f"jitter {dy},{dx} exceeds margin {off}")
    r0, c0 = off + dy, off + dx
    return src[r0 : r0 + size, c0 : c0 + size]


def augment_bag(rng: np.random.Generator, bag: Bag, cfg: AugmentConfig) -> Bag:
    """Independent per-patch flips, right-angle rotations, and jitter crops."""
    out = []
    for p in bag.patches:
        dy = int(rng.integers(-cfg.translate_jitter, cfg.translate_jitter + 1)) \
            if cfg.translate_jitter else 0
        dx = int(rng.integers(-cfg.translate_jitter, cfg.translate_jitter + 1)) \
            if cfg.translate_jitter else 0
        pix = _jittered_crop(p, dy, dx) if (dy or dx) else p.pixels
        if cfg.hflip_p and rng.random() < cfg.hflip_p:
            pix = pix[:, ::-1]
        if cfg.vflip_p and rng.random() < cfg.vflip_p:
            pix = pix[::-1, :]
        rot = cfg.rotations[int(rng.integers(0, len(cfg.rotations)))]
        if rot:
            pix = np.rot90(pix, k=rot // 90)
        out.append(Patch(pixels=np.ascontiguousarray(pix), center=p.center,
                         source_instance=p.source_instance, patch_id=p.patch_id,
                         jitter_source=p.jitter_source))
    return Bag(bag_id=bag.bag_id, patient_id=bag.patient_id, image_ref=bag.image_ref,
               label=bag.label, patches=tuple(out))


def patch_dropout(rng: np.random.Generator, bag: Bag, p: float) -> Bag:
    """Drop each patch with probability p; always keeps at least one."""
    if not 0.0 <= p < 1.0:
        raise TrainingError("dropout probability must be in [0, 1)")
    keep = rng.random(len(bag.patches)) >= p
    if not keep.any():
        keep[int(rng.integers(0, len(bag.patches)))] = True
    kept = tuple(pz for pz, k in zip(bag.patches, keep) if k)
    return Bag(bag_id=bag.bag_id, patient_id=bag.patient_id, image_ref=bag.image_ref,
               label=bag.label, patches=kept)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    mode: str                       # bacteria | fungi
    epochs: int = 150
    bag_batch: int = 8
    seed: int = 0
    use_ema: bool = True
    ema_decay: float = 0.999
    max_lr: float = 3e-4
    warmup_epochs: int = 10
    div_start: float = 25.0
    div_final: float = 1e4
    weight_decay: float = 0.01
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @staticmethod
    def for_mode(mode: str, **overrides) -> "TrainConfig":
        base = TrainConfig(mode=mode) if mode == "bacteria" else \
            TrainConfig(mode=mode, epochs=45, use_ema=False)
        return replace(base, **overrides) if overrides else base

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "mode", "epochs", "bag_batch", "seed", "use_ema", "ema_decay", "max_lr",
            "warmup_epochs", "div_start", "div_final", "weight_decay")}
        d["augment"] = {
            "hflip_p": self.augment.hflip_p, "vflip_p": self.augment.vflip_p,
            "rotations": list(self.augment.rotations),
            "translate_jitter": self.augment.translate_jitter,
            "patch_dropout_p": self.augment.patch_dropout_p,
        }
        return d

    @staticmethod
    def from_json(doc: dict) -> "TrainConfig":
        doc = dict(doc)
        aug = doc.pop("augment", None)
        if aug is not None:
            aug = dict(aug)
            if "rotations" in aug:
                aug["rotations"] = tuple(aug["rotations"])
            doc["augment"] = AugmentConfig(**aug)
        return TrainConfig(**doc)


@dataclass
class TrainResult:
    params: dict                    # raw weights after the last step
    ema_params: dict | None         # EMA shadow (bacteria mode)
    history: list[tuple[int, float, float]]   # (epoch, mean_loss, lr)

    @property
    def eval_params(self) -> dict:
        return self.ema_params if self.ema_params is not None else self.params


def _batch_loss(model: MilModel, bags: list[Bag], dtype) -> Tensor:
    """Mean cross-entropy over a batch of bags on the active tape.

    All patches in the batch run through the encoder as one stack (big
    GEMMs; the fused conv blocks stage through cache-sized chunks), then
    each bag's rows are pooled and classified separately.
    """
    config, params = model.config, model.params
    if config.encoder == "builtin-cnn":
        pixels = np.concatenate([np.stack([p.pixels for p in b.patches]) for b in bags])
        hmat = encode(params, config, Tensor(normalize_patches(pixels, dtype=dtype)))
    else:
        hmat = Tensor(np.concatenate(
            [model.table.lookup([p.patch_id for p in b.patches]) for b in bags]
        ).astype(dtype))
    logits_rows = []
    offset = 0
    for b in bags:
        k = len(b.patches)
        rows = ad.gather_rows(hmat, np.arange(offset, offset + k))
        logits_rows.append(forward_embeddings(params, config, rows))
        offset += k
    logits = ad.concat(logits_rows, axis=0) if len(logits_rows) > 1 else logits_rows[0]
    labels = np.array([b.label for b in bags], dtype=np.int64)
    return cross_entropy(logits, labels)


def train(model: MilModel, bags: list[Bag], cfg: TrainConfig) -> TrainResult:
    """Train in place; returns final (and EMA) weights plus loss history.

    The whole batch runs on one tape with a fixed reduction order;
    worker-thread counts elsewhere in the pipeline cannot change the
    result (core scaling happens inside the BLAS GEMMs).
    """
    usable = [b for b in bags if not b.flagged_empty]
    skipped = len(bags) - len(usable)
    if skipped:
        import logging
        logging.getLogger(__name__).warning(
            "%d empty bags excluded from training", skipped)
    if not usable:
        raise TrainingError("no non-empty training bags")
    if model.config.encoder == "frozen-table":
        for b in usable:
            model.table.lookup([p.patch_id for p in b.patches])  # raises if missing
    if cfg.epochs == 0:
        return TrainResult(params=model.params.to_arrays(), ema_params=None, history=[])

    dtype = model.params["clf.W"].dtype
    n = len(usable)
    steps_per_epoch = (n + cfg.bag_batch - 1) // cfg.bag_batch
    sched = OneCycleSchedule(
        total_steps=cfg.epochs * steps_per_epoch, steps_per_epoch=steps_per_epoch,
        max_lr=cfg.max_lr, warmup_epochs=cfg.warmup_epochs,
        div_start=cfg.div_start, div_final=cfg.div_final)
    opt = AdamWState(model.params, weight_decay=cfg.weight_decay)
    ema = EmaState(model.params, decay=cfg.ema_decay) if cfg.use_ema else None
    pixel_augment = model.config.encoder == "builtin-cnn"

    history = []
    step = 0
    lr = float("nan")
    for epoch in range(cfg.epochs):
        order_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(101, epoch)))
        order = order_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.bag_batch):
            batch = []
            for bi in order[start : start + cfg.bag_batch]:
                bag = usable[int(bi)]
                rng = np.random.default_rng(np.random.SeedSequence(
                    entropy=cfg.seed, spawn_key=(103, epoch, int(bi))))
                if pixel_augment:
                    bag = augment_bag(rng, bag, cfg.augment)
                if cfg.augment.patch_dropout_p:
                    bag = patch_dropout(rng, bag, cfg.augment.patch_dropout_p)
                batch.append(bag)
            model.params.zero_grad()
            with Tape() as tape:
                loss = _batch_loss(model, batch, dtype)
            ad.backward(tape, loss)
            lr = onecycle_lr(sched, step)
            adamw_step(opt, model.params, model.params.gradients(), lr)
            if ema is not None:
                ema_update(ema, model.params)
            epoch_loss += loss.item() * len(batch)
            step += 1
        history.append((epoch, epoch_loss / n, lr))
    return TrainResult(
        params=model.params.to_arrays(),
        ema_params=dict(ema.shadow) if ema is not None else None,
        history=history,
    )


def write_history_csv(history: list[tuple[int, float, float]], path):
    with open(path, "w") as f:
        f.write("epoch,mean_loss,lr\n")
        for epoch, loss, lr in history:
            f.write(f"{epoch},{loss:.9g},{lr:.9g}\n")

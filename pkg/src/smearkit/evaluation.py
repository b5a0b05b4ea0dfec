"""Patient-stratified evaluation protocol and metrics.

Three-fold cross-validation splits whole patients (never images) between
train and test in roughly 2:1 proportion per fold.  Reports carry
bag-level accuracy, per-category recall, row-normalized percentage
confusion matrices aggregated as mean +/- sample std across folds, and
one-vs-rest ROC AUC computed by exact pair counting.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bagging import (Bag, DatasetManifest, build_bag, extract_bacteria_patches,
                      extract_fungi_patches)
from .imaging import filter_by_diameter, read_image_png, read_mask
from .model import FrozenEmbeddingTable, MilModel, ModelConfig, init_params, \
    write_embedding_file
from .training import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

FUNGI_DIAMETER_LIMIT = 400.0


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# fold assignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignment: dict[str, int]          # patient_id -> fold index

    def test_patients(self, fold: int) -> set[str]:
        return {p for p, f in self.assignment.items() if f == fold}

    def train_patients(self, fold: int) -> set[str]:
        return {p for p, f in self.assignment.items() if f != fold}


def patient_stratified_folds(manifest: DatasetManifest, k: int = 3,
                             seed: int = 0) -> FoldAssignment:
    """Shuffle each category's patients by seed, deal them round-robin.

    The starting fold rotates with the category index so remainders do
    not all land on fold 0.  Categories with fewer than k patients are
    still assigned, with a warning.
    """
    if k < 2:
        raise EvaluationError("need at least 2 folds")
    by_category: dict[int, list[str]] = {}
    for pid in manifest.patients:
        by_category.setdefault(manifest.patient_label(pid), []).append(pid)
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    for ci in sorted(by_category):
        patients = by_category[ci]
        if len(patients) < k:
            log.warning("category %s has %d patients (< %d folds); some folds "
                        "lack test coverage for it",
                        manifest.category_names[ci], len(patients), k)
        order = rng.permutation(len(patients))
        for pos, idx in enumerate(order):
            assignment[patients[int(idx)]] = (pos + ci) % k
    return FoldAssignment(k=k, assignment=assignment)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise EvaluationError("accuracy needs equal-length, non-empty inputs")
    return float((preds == labels).mean())


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray                  # (C, C) ints, rows = true category

    @property
    def n_categories(self) -> int:
        return self.counts.shape[0]

    @property
    def row_percent(self) -> np.ndarray:
        """Row-normalized percentages; zero-support rows are NaN."""
        totals = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            pct = np.where(totals > 0, 100.0 * self.counts / totals, np.nan)
        return pct

    @property
    def per_category_recall(self) -> np.ndarray:
        return np.diagonal(self.row_percent) / 100.0


def confusion(preds, labels, n_categories: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.max() >= n_categories or preds.max() >= n_categories):
        raise EvaluationError("labels/preds out of range")
    counts = np.zeros((n_categories, n_categories), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def aggregate_confusions(mats: list[ConfusionMatrix]) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell mean and sample std over folds, skipping undefined rows."""
    if not mats:
        raise EvaluationError("nothing to aggregate")
    stack = np.stack([m.row_percent for m in mats])          # (F, C, C)
    defined = ~np.isnan(stack[:, :, 0])                      # (F, C)
    c = stack.shape[1]
    mean = np.full((c, c), np.nan)
    std = np.full((c, c), np.nan)
    for row in range(c):
        rows = stack[defined[:, row], row, :]
        if rows.shape[0] >= 1:
            mean[row] = rows.mean(axis=0)
        if rows.shape[0] >= 2:
            std[row] = rows.std(axis=0, ddof=1)
        elif rows.shape[0] == 1:
            std[row] = np.nan
    return mean, std


def _auc_binary(pos: np.ndarray, neg: np.ndarray) -> float:
    """P(pos score > neg score) + 0.5 P(tie), by integer win/tie counting."""
    values = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(len(pos), bool), np.zeros(len(neg), bool)])
    order = np.argsort(values, kind="stable")
    values, is_pos = values[order], is_pos[order]
    wins = ties = 0
    neg_below = 0
    i, n = 0, len(values)
    while i < n:
        j = i
        while j < n and values[j] == values[i]:
            j += 1
        p_at = int(is_pos[i:j].sum())
        n_at = (j - i) - p_at
        wins += p_at * neg_below
        ties += p_at * n_at
        neg_below += n_at
        i = j
    return (2 * wins + ties) / (2 * len(pos) * len(neg))


def roc_auc_ovr(scores: np.ndarray, labels) -> tuple[np.ndarray, float]:
    """One-vs-rest AUC per category (NaN when undefined) and the macro mean."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise EvaluationError("scores must be (n, C) with one label per row")
    n_cat = scores.shape[1]
    if len(np.unique(labels)) < 2:
        raise EvaluationError("ROC AUC needs at least two distinct labels")
    per_cat = np.full(n_cat, np.nan)
    for c in range(n_cat):
        pos = scores[labels == c, c]
        neg = scores[labels != c, c]
        if len(pos) and len(neg):
            per_cat[c] = _auc_binary(pos, neg)
    macro = float(np.nanmean(per_cat))
    return per_cat, macro


# ---------------------------------------------------------------------------
# bag loading and fold evaluation
# ---------------------------------------------------------------------------


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def other_index(category_names) -> int:
    """Index of the catch-all category; falls back to the last one."""
    names = list(category_names)
    return names.index("other") if "other" in names else len(names) - 1


def load_bags(manifest: DatasetManifest, mode: str, threads: int = 1) -> list[Bag]:
    """Read images and masks, extract patches, build one bag per entry."""

    def build(entry):
        img = read_image_png(entry.image_path)
        mask = read_mask(entry.mask_path)
        if mode == "fungi":
            mask = filter_by_diameter(mask, FUNGI_DIAMETER_LIMIT)
            patches = extract_fungi_patches(img, mask, id_prefix=entry.bag_id)
        else:
            patches = extract_bacteria_patches(img, mask, id_prefix=entry.bag_id)
        return build_bag(entry, patches)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(build, manifest.entries))
    return [build(e) for e in manifest.entries]


@dataclass
class FoldEvaluation:
    fold_index: int
    bag_ids: list[str]
    labels: np.ndarray
    preds: np.ndarray
    scores: np.ndarray                  # (n, C) softmax probabilities
    confusion: ConfusionMatrix
    accuracy_micro: float
    macro_recall: float
    per_category_auc: np.ndarray
    macro_auc: float


def evaluate_bags(model: MilModel, bags: list[Bag], category_names,
                  fold_index: int = 0) -> FoldEvaluation:
    """Deterministic forward pass over test bags; empty bags -> "other"."""
    if not bags:
        raise EvaluationError("no test bags")
    n_cat = len(category_names)
    fallback = other_index(category_names)
    labels = np.array([b.label for b in bags], dtype=np.int64)
    scores = np.zeros((len(bags), n_cat), dtype=np.float64)
    for i, bag in enumerate(bags):
        if bag.flagged_empty:
            scores[i, fallback] = 1.0
        else:
            scores[i] = _softmax_rows(model.forward_bag(bag).astype(np.float64))
    preds = scores.argmax(axis=1)
    cm = confusion(preds, labels, n_cat)
    per_auc, macro_auc = roc_auc_ovr(scores, labels)
    recalls = cm.per_category_recall
    return FoldEvaluation(
        fold_index=fold_index,
        bag_ids=[b.bag_id for b in bags],
        labels=labels,
        preds=preds,
        scores=scores,
        confusion=cm,
        accuracy_micro=accuracy(preds, labels),
        macro_recall=float(np.nanmean(recalls)),
        per_category_auc=per_auc,
        macro_auc=macro_auc,
    )


def export_embeddings(model: MilModel, bags: list[Bag], path: str | Path) -> int:
    """One pooled vector per non-empty bag, keyed by bag_id, as EMB1."""
    ids, rows = [], []
    for bag in bags:
        if bag.flagged_empty:
            continue
        ids.append(bag.bag_id)
        rows.append(model.bag_vector(bag).astype(np.float32))
    dim = model.config.attn_heads * model.config.embed_dim
    vectors = np.array(rows, dtype=np.float32) if rows else np.zeros((0, dim), np.float32)
    write_embedding_file(path, ids, vectors)
    return len(ids)


# ---------------------------------------------------------------------------
# cross-validation driver
# ---------------------------------------------------------------------------


@dataclass
class CrossvalResult:
    folds: FoldAssignment
    evaluations: list[FoldEvaluation]
    histories: list[list[tuple[int, float, float]]]
    checkpoints: list[dict]             # eval-time weights per fold
    raw_checkpoints: list[dict]         # last-step weights per fold
    category_names: tuple[str, ...]

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean([e.accuracy_micro for e in self.evaluations]))

    @property
    def macro_recall_mean(self) -> float:
        return float(np.mean([e.macro_recall for e in self.evaluations]))

    @property
    def macro_auc_mean(self) -> float:
        return float(np.mean([e.macro_auc for e in self.evaluations]))

    def aggregate_confusion(self) -> tuple[np.ndarray, np.ndarray]:
        return aggregate_confusions([e.confusion for e in self.evaluations])


def run_crossval(
    manifest: DatasetManifest,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    k: int = 3,
    seed: int = 0,
    threads: int = 1,
    embeddings_path: str | Path | None = None,
    bags: list[Bag] | None = None,
) -> CrossvalResult:
    """Folds -> train -> evaluate, with one fresh model per fold."""
    mode = train_cfg.mode
    if model_cfg is None:
        model_cfg = ModelConfig.for_mode(mode, n_categories=len(manifest.category_names))
    if model_cfg.n_categories != len(manifest.category_names):
        raise EvaluationError("model n_categories disagrees with the manifest")
    table = None
    if model_cfg.encoder == "frozen-table":
        if embeddings_path is None:
            raise EvaluationError("frozen-table mode needs an embeddings file")
        table = FrozenEmbeddingTable.from_file(embeddings_path)
        if table.dim != model_cfg.embed_dim:
            model_cfg = ModelConfig.for_mode(
                mode, n_categories=model_cfg.n_categories, embed_dim=table.dim,
                encoder="frozen-table")
    if bags is None:
        bags = load_bags(manifest, mode, threads=threads)
    by_patient: dict[str, list[Bag]] = {}
    for b in bags:
        by_patient.setdefault(b.patient_id, []).append(b)

    folds = patient_stratified_folds(manifest, k=k, seed=seed)

    def run_fold(fold: int):
        train_bags = [b for p in sorted(folds.train_patients(fold))
                      for b in by_patient.get(p, [])]
        test_bags = [b for p in sorted(folds.test_patients(fold))
                     for b in by_patient.get(p, [])]
        if not train_bags or not test_bags:
            raise EvaluationError(f"fold {fold} has an empty split")
        params = init_params(model_cfg, seed=seed + fold)
        mdl = MilModel(model_cfg, params, table)
        result = train(mdl, train_bags, train_cfg)
        eval_params = init_params(model_cfg, seed=0)
        eval_params.load_arrays(result.eval_params)
        eval_model = MilModel(model_cfg, eval_params, table)
        evaluation = evaluate_bags(eval_model, test_bags, manifest.category_names,
                                   fold_index=fold)
        log.info("fold %d: accuracy %.4f, macro AUC %.4f", fold,
                 evaluation.accuracy_micro, evaluation.macro_auc)
        return result, evaluation

    # folds are fully independent (own params, own bags view); results are
    # merged in fold order, so worker count cannot change any output
    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, k)) as pool:
            fold_results = list(pool.map(run_fold, range(k)))
    else:
        fold_results = [run_fold(fold) for fold in range(k)]

    return CrossvalResult(
        folds=folds,
        evaluations=[ev for _, ev in fold_results],
        histories=[res.history for res, _ in fold_results],
        checkpoints=[res.eval_params for res, _ in fold_results],
        raw_checkpoints=[res.params for res, _ in fold_results],
        category_names=manifest.category_names,
    )


def subset_manifest(manifest: DatasetManifest, subset: list[str]) -> DatasetManifest:
    """Restrict to named categories, relabeling into the compact subset space."""
    names = list(manifest.category_names)
    for s in subset:
        if s not in names:
            raise EvaluationError(f"unknown category {s!r}")
    if len(subset) < 2:
        raise EvaluationError("subset needs at least 2 categories")
    remap = {names.index(s): i for i, s in enumerate(subset)}
    entries = tuple(
        type(e)(bag_id=e.bag_id, patient_id=e.patient_id, label=remap[e.label],
                image_path=e.image_path, mask_path=e.mask_path)
        for e in manifest.entries if e.label in remap)
    if not entries:
        raise EvaluationError("subset matches no bags")
    return DatasetManifest(entries=entries, category_names=tuple(subset))


def subset_experiment(manifest: DatasetManifest, subset: list[str],
                      train_cfg: TrainConfig, **kwargs) -> CrossvalResult:
    return run_crossval(subset_manifest(manifest, subset), train_cfg, **kwargs)


# ---------------------------------------------------------------------------
# report bundle
# ---------------------------------------------------------------------------


def _fmt(x: float, digits: int = 1) -> str:
    return "n/a" if np.isnan(x) else f"{x:.{digits}f}"


def render_confusion_text(mean: np.ndarray, std: np.ndarray, category_names) -> str:
    """Plain-text mean +/- std percentage table, rows = true category."""
    cells = [[f"{_fmt(mean[r, c])} ±{_fmt(std[r, c])}"
              if not np.isnan(mean[r, c]) else "n/a"
              for c in range(mean.shape[1])] for r in range(mean.shape[0])]
    names = list(category_names)
    width = max(12, max(len(n) for n in names) + 2,
                max((len(x) for row in cells for x in row), default=0) + 2)
    head = " " * width + "".join(n.rjust(width) for n in names)
    lines = [head]
    for name, row in zip(names, cells):
        lines.append(name.rjust(width) + "".join(x.rjust(width) for x in row))
    lines.append("")
    lines.append("rows: true category; columns: predicted; values are percentages")
    return "\n".join(lines)


def write_report_bundle(out_dir: str | Path, result: CrossvalResult,
                        resolved_config: dict):
    """report.json + confusion.csv/.txt + roc.jsonl + history.csv + config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mean, std = result.aggregate_confusion()
    names = list(result.category_names)

    def clean(x):
        return None if np.isnan(x) else round(float(x), 10)

    report = {
        "fold_count": len(result.evaluations),
        "category_names": names,
        "folds": [
            {
                "fold": e.fold_index,
                "n_test_bags": len(e.bag_ids),
                "accuracy_micro": clean(e.accuracy_micro),
                "macro_recall": clean(e.macro_recall),
                "macro_auc": clean(e.macro_auc),
                "per_category_auc": [clean(a) for a in e.per_category_auc],
            }
            for e in result.evaluations
        ],
        "accuracy_micro_mean": clean(result.accuracy_mean),
        "macro_recall_mean": clean(result.macro_recall_mean),
        "macro_auc_mean": clean(result.macro_auc_mean),
        "confusion_mean_percent": [[clean(x) for x in row] for row in mean],
        "confusion_std_percent": [[clean(x) for x in row] for row in std],
        "resolved_config": resolved_config,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))

    with open(out / "confusion.csv", "w") as f:
        f.write("block,true," + ",".join(names) + "\n")
        for block, matrix in (("mean", mean), ("std", std)):
            for r, name in enumerate(names):
                row = ",".join(_fmt(matrix[r, c], 4) for c in range(len(names)))
                f.write(f"{block},{name},{row}\n")
    (out / "confusion.txt").write_text(render_confusion_text(mean, std, names))

    with open(out / "roc.jsonl", "w") as f:
        for e in result.evaluations:
            for bag_id, label, srow in zip(e.bag_ids, e.labels, e.scores):
                f.write(json.dumps({
                    "bag_id": bag_id,
                    "label": int(label),
                    "scores": [round(float(s), 10) for s in srow],
                }) + "\n")

    with open(out / "history.csv", "w") as f:
        f.write("fold,epoch,mean_loss,lr\n")
        for fold, history in enumerate(result.histories):
            for epoch, loss, lr in history:
                f.write(f"{fold},{epoch},{loss:.9g},{lr:.9g}\n")

    (out / "resolved-config.json").write_text(
        json.dumps(resolved_config, indent=2, sort_keys=True))

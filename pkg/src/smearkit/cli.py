"""Command-line entry point.

One subcommand per pipeline stage: synthetic data generation,
segmentation, patch extraction, training, cross-validated evaluation,
subset experiments, embedding export, and the annotation server with its
propose/export/refit companions.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("smearkit")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _segmenter_params(args):
    from .imaging import SegmenterParams

    return SegmenterParams(
        chroma_threshold=args.threshold,
        min_area=args.min_area,
        max_area=args.max_area,
        connectivity=args.connectivity,
    )


def _add_segmenter_flags(p):
    p.add_argument("--threshold", type=float, default=40.0)
    p.add_argument("--min-area", type=int, default=20)
    p.add_argument("--max-area", type=int, default=100_000)
    p.add_argument("--connectivity", type=int, default=8, choices=(4, 8))


def _train_config(args):
    """TrainConfig from mode defaults, then config file, then flags."""
    from .training import TrainConfig

    cfg = TrainConfig.for_mode(args.mode)
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
        doc.setdefault("mode", args.mode)
        if doc["mode"] != args.mode:
            raise DataError(f"config mode {doc['mode']!r} != --mode {args.mode!r}")
        cfg = TrainConfig.from_json(doc)
    overrides = {}
    for flag in ("epochs", "bag_batch", "seed", "max_lr", "warmup_epochs"):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[flag] = v
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return cfg


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--bag-batch", dest="bag_batch", type=int)
    p.add_argument("--max-lr", dest="max_lr", type=float)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smearkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", default="default-bacteria",
                   help="JSON spec file, or default-bacteria / default-fungi")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, help="override patients per category")
    p.add_argument("--images", type=int, help="override images per patient")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--embeddings", help="also write an EMB1 file here")
    p.add_argument("--separability", type=float, default=10.0)
    p.add_argument("--embed-dim", type=int, default=8)

    p = sub.add_parser("segment", help="segment an image (tiled)")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile-size", type=int, default=1024)
    p.add_argument("--format", choices=("png", "json"), default="png")
    _add_segmenter_flags(p)

    p = sub.add_parser("extract", help="extract patch archives for every bag")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("bacteria", "fungi"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("dir", "container"), default="container")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("train", help="train on every bag in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("bacteria", "fungi"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", help="EMB1 file (frozen-table mode)")
    p.add_argument("--threads", type=int, default=1)
    _add_train_flags(p)

    p = sub.add_parser("crossval", help="patient-stratified k-fold run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("bacteria", "fungi"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--embeddings")
    p.add_argument("--threads", type=int, default=1)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("bacteria", "fungi"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("subset", help="crossval restricted to named categories")
    p.add_argument("--manifest", required=True)
    p.add_argument("--categories", required=True, help="comma-separated names")
    p.add_argument("--mode", choices=("bacteria", "fungi"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--embeddings")
    p.add_argument("--threads", type=int, default=1)
    _add_train_flags(p)

    p = sub.add_parser("export-embeddings", help="pooled bag vectors to EMB1")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("bacteria", "fungi"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("serve", help="run the annotation review server")
    p.add_argument("--store", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--ui", help="static UI bundle directory")

    p = sub.add_parser("al-propose", help="queue machine-proposed masks")
    p.add_argument("--store", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--patch-size", type=int, default=256)
    _add_segmenter_flags(p)

    p = sub.add_parser("al-export", help="export reviewed ground truth")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("al-refit", help="grid-refit the baseline segmenter")
    p.add_argument("--store", required=True)
    p.add_argument("--out", help="write the selected params JSON here")
    p.add_argument("--grid", help="JSON file with grid lists")

    return parser


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------


def _resolve_spec(args):
    from . import synthsmear as sy

    if args.spec == "default-bacteria":
        spec = sy.default_bacteria_spec()
    elif args.spec == "default-fungi":
        spec = sy.default_fungi_spec()
    else:
        path = Path(args.spec)
        if not path.exists():
            raise DataError(f"spec file {path} not found")
        spec = sy.spec_from_json(json.loads(path.read_text()))
    from dataclasses import replace
    if args.patients:
        spec = replace(spec, patients_per_category=args.patients)
    if args.images:
        spec = replace(spec, images_per_patient=args.images)
    return spec


def cmd_synth(args) -> int:
    from . import synthsmear as sy

    spec = _resolve_spec(args)
    log.info("resolved config: %s", json.dumps(sy.spec_to_json(spec), sort_keys=True))
    manifest = sy.generate_dataset(spec, args.seed, args.out, threads=args.threads)
    log.info("wrote %d bags under %s", len(manifest.entries), args.out)
    if args.embeddings:
        n = sy.generate_embeddings(manifest, args.separability, args.embed_dim,
                                   args.seed, args.embeddings)
        log.info("wrote %d embeddings to %s", n, args.embeddings)
    return EXIT_OK


def cmd_segment(args) -> int:
    from .imaging import read_image_png, segment_tiled, write_mask_json, write_mask_png

    path = Path(args.image)
    if not path.exists():
        raise DataError(f"image {path} not found")
    mask = segment_tiled(read_image_png(path), _segmenter_params(args),
                         tile_size=args.tile_size)
    if args.format == "json":
        write_mask_json(mask, args.out)
    else:
        write_mask_png(mask, args.out)
    log.info("segmented %s: %d instances -> %s", path, mask.n_instances, args.out)
    return EXIT_OK


def _load_manifest(path):
    from .bagging import read_manifest

    p = Path(path)
    if not p.exists():
        raise DataError(f"manifest {p} not found")
    return read_manifest(p)


def cmd_extract(args) -> int:
    from .bagging import write_patch_container, write_patch_dir
    from .evaluation import load_bags

    manifest = _load_manifest(args.manifest)
    bags = load_bags(manifest, args.mode, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for bag in bags:
        if args.format == "dir":
            write_patch_dir(list(bag.patches), out / bag.bag_id)
        else:
            write_patch_container(list(bag.patches), out / f"{bag.bag_id}.bags")
    log.info("extracted %d bags to %s", len(bags), out)
    return EXIT_OK


def _frozen_table(args, model_cfg):
    from .model import FrozenEmbeddingTable

    if model_cfg.encoder != "frozen-table":
        return None, model_cfg
    if not args.embeddings:
        raise DataError("fungi (frozen-table) mode requires --embeddings")
    table = FrozenEmbeddingTable.from_file(args.embeddings)
    from dataclasses import replace
    return table, replace(model_cfg, embed_dim=table.dim)


def cmd_train(args) -> int:
    from .evaluation import load_bags
    from .model import MilModel, ModelConfig, init_params
    from .training import train, write_history_csv

    manifest = _load_manifest(args.manifest)
    cfg = _train_config(args)
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    model_cfg = ModelConfig.for_mode(args.mode, n_categories=len(manifest.category_names))
    table, model_cfg = _frozen_table(args, model_cfg)
    log.info("resolved config: %s", json.dumps(cfg.to_json(), sort_keys=True))
    bags = load_bags(manifest, args.mode, threads=args.threads)
    params = init_params(model_cfg, seed=cfg.seed)
    mdl = MilModel(model_cfg, params, table)
    result = train(mdl, bags, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from . import autodiff as ad
    ad.save_checkpoint(result.params, out / "model.ckpt")
    Path(str(out / "model.ckpt") + ".config.json").write_text(
        json.dumps(model_cfg.to_json()))
    if result.ema_params is not None:
        ad.save_checkpoint(result.ema_params, out / "model-ema.ckpt")
        Path(str(out / "model-ema.ckpt") + ".config.json").write_text(
            json.dumps(model_cfg.to_json()))
    write_history_csv(result.history, out / "history.csv")
    (out / "resolved-config.json").write_text(
        json.dumps(cfg.to_json(), indent=2, sort_keys=True))
    log.info("trained %d epochs; checkpoint in %s", cfg.epochs, out)
    return EXIT_OK


def _write_crossval_outputs(args, result, cfg, model_cfg):
    from . import autodiff as ad
    from .evaluation import write_report_bundle

    out = Path(args.out)
    resolved = {
        "command": "crossval",
        "mode": args.mode,
        "seed": args.seed,
        "k": len(result.evaluations),
        "train": cfg.to_json(),
        "model": model_cfg.to_json(),
    }
    write_report_bundle(out, result, resolved)
    for fold, arrays in enumerate(result.checkpoints):
        path = out / f"fold{fold}.ckpt"
        ad.save_checkpoint(arrays, path)
        Path(str(path) + ".config.json").write_text(json.dumps(model_cfg.to_json()))
    for fold, arrays in enumerate(result.raw_checkpoints):
        if result.checkpoints[fold] is not arrays:
            ad.save_checkpoint(arrays, out / f"fold{fold}-raw.ckpt")
    log.info("crossval: accuracy %.4f, macro AUC %.4f -> %s",
             result.accuracy_mean, result.macro_auc_mean, out)


def cmd_crossval(args) -> int:
    from .evaluation import run_crossval
    from .model import ModelConfig

    manifest = _load_manifest(args.manifest)
    cfg = _train_config(args)
    from dataclasses import replace
    cfg = replace(cfg, seed=args.seed)
    model_cfg = ModelConfig.for_mode(args.mode, n_categories=len(manifest.category_names))
    table, model_cfg = _frozen_table(args, model_cfg)
    log.info("resolved config: %s", json.dumps(cfg.to_json(), sort_keys=True))
    result = run_crossval(manifest, cfg, model_cfg, k=args.k, seed=args.seed,
                          threads=args.threads, embeddings_path=args.embeddings)
    _write_crossval_outputs(args, result, cfg, model_cfg)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_bags, load_bags, write_report_bundle, CrossvalResult
    from .model import FrozenEmbeddingTable, MilModel

    manifest = _load_manifest(args.manifest)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} not found")
    table = None
    if args.embeddings:
        table = FrozenEmbeddingTable.from_file(args.embeddings)
    try:
        mdl = MilModel.load(ckpt, table)
    except Exception as e:
        raise DataError(f"cannot load checkpoint {ckpt}: {e}") from e
    if mdl.config.mode != args.mode:
        raise DataError(
            f"checkpoint is {mdl.config.mode} mode but --mode is {args.mode}")
    if mdl.config.n_categories != len(manifest.category_names):
        raise DataError("checkpoint category count disagrees with the manifest")
    bags = load_bags(manifest, args.mode, threads=args.threads)
    ev = evaluate_bags(mdl, bags, manifest.category_names)
    from .evaluation import FoldAssignment
    result = CrossvalResult(
        folds=FoldAssignment(k=1, assignment={}),
        evaluations=[ev], histories=[[]], checkpoints=[{}], raw_checkpoints=[{}],
        category_names=manifest.category_names)
    resolved = {"command": "eval", "mode": args.mode, "checkpoint": str(ckpt),
                "model": mdl.config.to_json()}
    write_report_bundle(args.out, result, resolved)
    log.info("eval: accuracy %.4f, macro AUC %.4f", ev.accuracy_micro, ev.macro_auc)
    return EXIT_OK


def cmd_subset(args) -> int:
    from .evaluation import run_crossval, subset_manifest
    from .model import ModelConfig

    manifest = _load_manifest(args.manifest)
    subset = [s.strip() for s in args.categories.split(",") if s.strip()]
    sub = subset_manifest(manifest, subset)
    cfg = _train_config(args)
    from dataclasses import replace
    cfg = replace(cfg, seed=args.seed)
    model_cfg = ModelConfig.for_mode(args.mode, n_categories=len(sub.category_names))
    table, model_cfg = _frozen_table(args, model_cfg)
    result = run_crossval(sub, cfg, model_cfg, k=args.k, seed=args.seed,
                          threads=args.threads, embeddings_path=args.embeddings)
    _write_crossval_outputs(args, result, cfg, model_cfg)
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    from .evaluation import export_embeddings, load_bags
    from .model import FrozenEmbeddingTable, MilModel

    manifest = _load_manifest(args.manifest)
    table = FrozenEmbeddingTable.from_file(args.embeddings) if args.embeddings else None
    try:
        mdl = MilModel.load(args.checkpoint, table)
    except Exception as e:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
    if mdl.config.mode != args.mode:
        raise DataError(f"checkpoint is {mdl.config.mode} mode but --mode is {args.mode}")
    bags = load_bags(manifest, args.mode, threads=args.threads)
    n = export_embeddings(mdl, bags, args.out)
    log.info("exported %d bag embeddings to %s", n, args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    from .alserver import AnnotationStore, ReviewServer

    store = AnnotationStore(args.store)
    server = ReviewServer(store, host=args.host, port=args.port, ui_dir=args.ui)
    host, port = server.address
    log.info("annotation server on http://%s:%d (store: %s)", host, port, args.store)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return EXIT_OK


def cmd_al_propose(args) -> int:
    from .alserver import AnnotationStore, propose_items
    from .imaging import read_image_png

    images = []
    for path in args.images:
        p = Path(path)
        if not p.exists():
            raise DataError(f"image {p} not found")
        images.append(read_image_png(p))
    items = propose_items(_segmenter_params(args), images, patch_size=args.patch_size)
    store = AnnotationStore(args.store)
    added = store.add_items(items)
    log.info("proposed %d items (%d new) into %s", len(items), added, args.store)
    return EXIT_OK


def cmd_al_export(args) -> int:
    from .alserver import AnnotationStore

    n = AnnotationStore(args.store).export_training_set(args.out)
    log.info("exported %d ground-truth pairs to %s", n, args.out)
    return EXIT_OK


def cmd_al_refit(args) -> int:
    from .alserver import AnnotationStore, ParamGrid, refit_segmenter

    grid = ParamGrid()
    if args.grid:
        doc = json.loads(Path(args.grid).read_text())
        grid = ParamGrid(
            chroma_thresholds=tuple(doc.get("chroma_thresholds",
                                            grid.chroma_thresholds)),
            min_areas=tuple(doc.get("min_areas", grid.min_areas)),
            max_areas=tuple(doc.get("max_areas", grid.max_areas)))
    store = AnnotationStore(args.store)
    params, report = refit_segmenter(store, grid)
    doc = {"chroma_threshold": params.chroma_threshold, "min_area": params.min_area,
           "max_area": params.max_area, "connectivity": params.connectivity,
           "best_mean_iou": report["best_mean_iou"]}
    print(json.dumps(doc, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2))
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "segment": cmd_segment,
    "extract": cmd_extract,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "eval": cmd_eval,
    "subset": cmd_subset,
    "export-embeddings": cmd_export_embeddings,
    "serve": cmd_serve,
    "al-propose": cmd_al_propose,
    "al-export": cmd_al_export,
    "al-refit": cmd_al_refit,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    from .autodiff import NonFiniteError
    from .bagging import BaggingError
    from .imaging import ImagingError
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, BaggingError, ImagingError, FileNotFoundError,
            json.JSONDecodeError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

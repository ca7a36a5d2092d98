"""mcforge command line: step1 | step2 | train-classifier | augment |
train-segnet | segment | iterate | serve | catalog <sub>."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .catalog import Catalog
from .edlclassify import ClassifierCheckpoint
from .pipeline import (PipelineConfig, augment_run, iterate_run, segment_run,
                       step1_run, step2_run, train_classifier_run,
                       train_segnet_run)
from .segnet import SegCheckpoint
from .service import DEFAULT_BIND


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    defaults = PipelineConfig()
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--l-s", dest="l_s", type=int, default=defaults.l_s)
    p.add_argument("--l-w", dest="l_w", type=int, default=defaults.l_w)
    p.add_argument("--kernel-sigma", type=float, default=None)
    p.add_argument("--predictor", choices=("linear", "mlp"),
                   default=defaults.predictor)
    p.add_argument("--hidden-units", type=int, default=defaults.hidden_units)
    p.add_argument("--n-components", type=int, default=defaults.n_components)
    p.add_argument("--k-min", type=int, default=defaults.k_range[0])
    p.add_argument("--k-max", type=int, default=defaults.k_range[1])
    p.add_argument("--k", dest="k_override", type=int, default=None,
                   help="fit this many clusters instead of the BIC suggestion")
    p.add_argument("--weight-threshold", type=float,
                   default=defaults.weight_threshold)
    p.add_argument("--patch-stride", type=int, default=defaults.patch_stride)
    p.add_argument("--min-region", type=int, default=None)
    p.add_argument("--save-scorefield", action="store_true")
    p.add_argument("--k-prime", type=int, default=defaults.k_prime)
    p.add_argument("--tau-u", type=float, default=defaults.tau_u)
    p.add_argument("--cls-epochs", type=int, default=defaults.cls_epochs)
    p.add_argument("--cls-lr", type=float, default=defaults.cls_lr)
    p.add_argument("--cls-anneal", type=int, default=defaults.cls_anneal)
    p.add_argument("--seg-epochs", type=int, default=defaults.seg_epochs)
    p.add_argument("--seg-lr", type=float, default=defaults.seg_lr)
    p.add_argument("--seg-input", type=int, default=defaults.seg_input)
    p.add_argument("--collage-count", type=int, default=defaults.collage_count)
    p.add_argument("--collage-regions", type=int,
                   default=defaults.collage_regions)
    p.add_argument("--boundary-style", choices=("straight", "curved"),
                   default=defaults.boundary_style)
    p.add_argument("--scale-min", type=float, default=defaults.scale_min)
    p.add_argument("--scale-max", type=float, default=defaults.scale_max)


def _config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig()
    for name in vars(args):
        if hasattr(cfg, name) and getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    cfg.k_range = (args.k_min, args.k_max)
    cfg.k_override = args.k_override
    cfg.kernel_sigma = args.kernel_sigma
    cfg.min_region = args.min_region
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcforge")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("step1", help="unsupervised segmentation + harvesting")
    p.add_argument("image")
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, required=True,
                   help="side length of harvested region patches")
    _add_config_flags(p)

    p = sub.add_parser("step2", help="classify harvested regions")
    p.add_argument("step1_dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--no-enqueue", action="store_true")
    p.add_argument("--patch-size", type=int, default=None)
    _add_config_flags(p)

    p = sub.add_parser("train-classifier")
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--warm-start", default=None)
    p.add_argument("--patch-size", type=int, default=None)
    _add_config_flags(p)

    p = sub.add_parser("augment", help="generate a collage dataset")
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=None)
    _add_config_flags(p)

    p = sub.add_parser("train-segnet")
    p.add_argument("--dataset", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--catalog", default=None,
                   help="register the checkpoint in this catalog")
    p.add_argument("--warm-start", default=None)
    p.add_argument("--patch-size", type=int, default=None)
    _add_config_flags(p)

    p = sub.add_parser("segment", help="segment an image with a checkpoint")
    p.add_argument("image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("iterate", help="full loop over a new micrograph")
    p.add_argument("image")
    p.add_argument("--catalog", required=True)
    p.add_argument("--work", required=True)
    p.add_argument("--auto", action="store_true",
                   help="resolve reviews automatically (testing only)")
    p.add_argument("--patch-size", type=int, required=True)
    _add_config_flags(p)

    p = sub.add_parser("serve", help="run the review service")
    p.add_argument("--catalog", required=True)
    p.add_argument("--host", default=DEFAULT_BIND[0])
    p.add_argument("--port", type=int, default=DEFAULT_BIND[1])
    p.add_argument("--ui", default=None, help="static UI directory")

    p = sub.add_parser("catalog")
    csub = p.add_subparsers(dest="catalog_cmd", required=True)
    c = csub.add_parser("init")
    c.add_argument("root")
    c = csub.add_parser("show")
    c.add_argument("root")
    c = csub.add_parser("add-mc")
    c.add_argument("root")
    c.add_argument("--name", required=True)
    c.add_argument("--exemplar", action="append", required=True,
                   help="grayscale patch file; repeatable")
    c = csub.add_parser("queue")
    c.add_argument("root")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "step1":
        cfg = _config_from_args(args)
        cfg.patch_size = args.patch_size
        summary = step1_run(args.image, cfg, args.out)
        print(json.dumps(summary, indent=1))
        return 0
    if args.command == "step2":
        cfg = _config_from_args(args)
        catalog = Catalog.load(args.catalog)
        ckpt = ClassifierCheckpoint.load(args.checkpoint)
        payload = step2_run(args.step1_dir, ckpt, catalog, cfg,
                            out_path=args.out, enqueue=not args.no_enqueue)
        catalog.snapshot()
        print(json.dumps({"regions": [r["decision"]
                                      for r in payload["regions"]]}, indent=1))
        return 0
    if args.command == "train-classifier":
        cfg = _config_from_args(args)
        catalog = Catalog.load(args.catalog)
        warm = (ClassifierCheckpoint.load(args.warm_start)
                if args.warm_start else None)
        ckpt = train_classifier_run(catalog, cfg, args.out, warm_start=warm)
        catalog.snapshot()
        print(json.dumps(ckpt.metrics[-1] if ckpt.metrics else {}, indent=1))
        return 0
    if args.command == "augment":
        cfg = _config_from_args(args)
        catalog = Catalog.load(args.catalog)
        manifest = augment_run(catalog, cfg, args.out)
        print(f"wrote {len(manifest['items'])} items to {args.out}")
        return 0
    if args.command == "train-segnet":
        cfg = _config_from_args(args)
        from .augment import load_manifest
        manifest = load_manifest(args.dataset)
        catalog = Catalog.load(args.catalog) if args.catalog else None
        class_ids = manifest["classes"]
        warm = SegCheckpoint.load(args.warm_start) if args.warm_start else None
        ckpt = train_segnet_run(manifest, cfg, args.out, class_ids=class_ids,
                                warm_start=warm, catalog=catalog)
        if catalog is not None:
            catalog.snapshot()
        print(json.dumps(ckpt.metrics[-1] if ckpt.metrics else {}, indent=1))
        return 0
    if args.command == "segment":
        ckpt = SegCheckpoint.load(args.checkpoint)
        summary = segment_run(args.image, ckpt, args.out)
        print(json.dumps(summary, indent=1))
        return 0
    if args.command == "iterate":
        cfg = _config_from_args(args)
        cfg.patch_size = args.patch_size
        result = iterate_run(args.image, args.catalog, cfg, args.work,
                             auto=args.auto)
        print(json.dumps(result, indent=1))
        return 0
    if args.command == "serve":
        from .service import serve
        catalog = Catalog.load(args.catalog)
        serve(catalog, host=args.host, port=args.port, ui_dir=args.ui)
        return 0
    if args.command == "catalog":
        return _catalog_cmd(args)
    raise SystemExit(f"unknown command {args.command!r}")


def _catalog_cmd(args) -> int:
    from .imagecore import load_micrograph
    if args.catalog_cmd == "init":
        catalog = Catalog(args.root)
        catalog.snapshot()
        print(f"initialized catalog at {args.root}")
        return 0
    if args.catalog_cmd == "show":
        catalog = Catalog.load(args.root)
        print(json.dumps({
            "version": catalog.version,
            "patch_size": catalog.patch_size,
            "classes": [{"id": mc.class_id, "name": mc.name,
                         "status": mc.status,
                         "exemplars": len(mc.exemplars)} for mc in catalog.mcs],
            "pending_reviews": len(catalog.pending_reviews()),
            "models": [m.model_id for m in catalog.models],
        }, indent=1))
        return 0
    if args.catalog_cmd == "add-mc":
        catalog = Catalog.load(args.root)
        exemplars = [(load_micrograph(path).pixels, {"source_id": Path(path).stem})
                     for path in args.exemplar]
        record = catalog.add_mc(args.name, exemplars)
        catalog.snapshot()
        print(f"added class {record.class_id} ({record.name})")
        return 0
    if args.catalog_cmd == "queue":
        catalog = Catalog.load(args.root)
        for item in catalog.pending_reviews():
            print(f"{item.item_id} u={item.prediction.get('uncertainty'):.3f} "
                  f"candidates={item.prediction.get('candidates', [])[:3]}")
        return 0
    raise SystemExit(f"unknown catalog subcommand {args.catalog_cmd!r}")


if __name__ == "__main__":
    sys.exit(main())

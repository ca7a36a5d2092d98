"""Orchestration of the three-step loop: unsupervised segmentation, evidential
classification of harvested regions, and supervised segmentation training.

Every run directory receives a config snapshot with all seeds, sufficient to
reproduce the artifacts bit-exactly. `iterate` stages all catalog mutations in
a copy and commits with a directory swap, so a failed stage leaves the
catalog untouched.
"""

from __future__ import annotations

import dataclasses
import json
import shutil
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment, edlclassify, imagecore, scorefield, segnet, vbgmm
from .catalog import Catalog
from .edlclassify import ClassifierCheckpoint, class_list_hash
from .segnet import SegCheckpoint


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    # step 1: score clustering
    l_s: int = 5
    l_w: int = 20
    kernel_sigma: float | None = None       # default l_w / 2
    predictor: str = "linear"
    hidden_units: int = 10
    mlp_epochs: int = 80
    full_scores: bool = False
    n_components: int = 16                  # PCA before clustering; 0 disables
    k_range: tuple = (1, 8)                 # inclusive BIC sweep
    k_override: int | None = None           # fit at this K instead of suggested
    weight_threshold: float = 0.02
    vb_tol: float = 1e-6
    vb_max_iter: int = 500
    # the mixture is fitted on a stride lattice of smoothed vectors so that the
    # samples are approximately independent (the WMA makes neighboring vectors
    # nearly identical, which would let surplus components feed on the same
    # spatial lumps and distort BIC); None -> l_w + 2
    fit_stride: int | None = None
    # region harvesting: the patch side length is a required choice (the
    # upstream method leaves it open), surfaced on the CLI
    patch_size: int = 64
    patch_stride: int = 32
    min_region: int | None = None           # default patch_size**2
    save_scorefield: bool = False
    # step 2
    k_prime: int = 10
    tau_u: float = 0.5
    # classifier training
    cls_epochs: int = 30
    cls_batch: int = 32
    cls_lr: float = 2e-3
    cls_anneal: int = 60
    # "dihedral" multiplies exemplars by the 8 right-angle symmetries; leave
    # off when class identity depends on orientation (streaks, gratings)
    cls_augment: str = "none"
    # segmenter training
    seg_epochs: int = 30
    seg_batch: int = 8
    seg_lr: float = 2e-3
    seg_input: int = 64
    seg_downsample: int = 8
    seg_rates: tuple = (1, 2, 4)
    seg_base_channels: int = 16
    # collage generation
    collage_count: int = 120
    collage_regions: int = 3
    boundary_style: str = "straight"
    scale_min: float = 1.0
    scale_max: float = 1.1
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in data.items() if k in known}
        for key in ("k_range", "seg_rates"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _write_json(path, payload) -> None:
    with open(str(path), "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _snapshot_config(cfg: PipelineConfig, out: Path, command: str) -> None:
    _write_json(out / "config.json", {"command": command, **cfg.to_dict()})


def _stage(name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, PipelineError):
                raise PipelineError(name, exc) from exc
            return False
    return _Ctx()


# ---------------------------------------------------------------------------
# Step 1
# ---------------------------------------------------------------------------

def step1_run(image_path, cfg: PipelineConfig, out_dir) -> dict:
    """Unsupervised segmentation of one micrograph plus patch harvesting.

    Writes mask.pgm, bic.csv, weights.csv, harvested patches with provenance,
    and a config snapshot under out_dir. Returns the run summary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot_config(cfg, out, "step1")

    with _stage("load_micrograph"):
        m = imagecore.load_micrograph(image_path)
    with _stage("fit_predictor"):
        samples = imagecore.extract_neighborhoods(m, cfg.l_s)
        spec = scorefield.PredictorSpec(kind=cfg.predictor,
                                        hidden_units=cfg.hidden_units,
                                        epochs=cfg.mlp_epochs,
                                        full_scores=cfg.full_scores)
        predictor = scorefield.fit_predictor(samples, spec, seed=cfg.seed)
    with _stage("compute_scores"):
        field_raw = scorefield.compute_scores(m, predictor)
    with _stage("smooth_scores"):
        field = scorefield.smooth_scores(field_raw, cfg.l_w, cfg.kernel_sigma)
    if cfg.n_components:
        with _stage("reduce_scores"):
            if cfg.n_components < field.score_dim:
                field = scorefield.reduce_scores(field, cfg.n_components)
    if cfg.save_scorefield:
        scorefield.save_field(field, out / "scorefield.bin")

    stride = cfg.fit_stride or cfg.l_w + 2
    h_v, w_v, d_v = field.vectors.shape
    fit_vectors = np.ascontiguousarray(
        field.vectors[::stride, ::stride].reshape(-1, d_v))
    hyper = vbgmm.BgmHyper(K=1, tol=cfg.vb_tol, max_iter=cfg.vb_max_iter,
                           seed=cfg.seed)
    with _stage("information_criteria"):
        k_lo, k_hi = cfg.k_range
        k_hi = min(k_hi, len(fit_vectors))
        rows, suggested = vbgmm.information_criteria(
            fit_vectors, range(k_lo, k_hi + 1), hyper)
        with open(out / "bic.csv", "w") as fh:
            fh.write("K,logLik,P,AIC,BIC\n")
            for row in rows:
                fh.write(f"{row[0]},{row[1]!r},{row[2]},{row[3]!r},{row[4]!r}\n")
    k_fit = cfg.k_override or suggested
    with _stage("fit_vbgmm"):
        post = vbgmm.fit_vbgmm(fit_vectors, dataclasses.replace(hyper, K=k_fit))
        vbgmm.save_posterior(post, out / "posterior.bin")
        with open(out / "weights.csv", "w") as fh:
            fh.write("cluster,pi_hat\n")
            for j, pi in enumerate(post.pi_hat):
                fh.write(f"{j},{pi!r}\n")
    with _stage("segment_labels"):
        significant = {j for j, pi in enumerate(post.pi_hat)
                       if pi > cfg.weight_threshold}
        full_resp = vbgmm.predict_responsibilities(post, field.flat())
        full_post = dataclasses.replace(post, resp=full_resp)
        mask = vbgmm.segment_labels(full_post, field, significant)
        imagecore.save_mask(mask, out / "mask.pgm")
    with _stage("connected_regions"):
        min_region = cfg.min_region or cfg.patch_size ** 2
        regions = imagecore.connected_regions(mask, min_size=min_region)
    with _stage("harvest_patches"):
        patches_dir = out / "patches"
        patches_dir.mkdir(exist_ok=True)
        entries = []
        for ridx, region in enumerate(regions):
            for p in imagecore.harvest_patches(m, region, cfg.patch_size,
                                               cfg.patch_stride):
                fname = f"r{ridx:02d}_l{region.label}_{p.row}_{p.col}.pgm"
                imagecore.save_micrograph(
                    imagecore.Micrograph(p.pixels, id=fname[:-4]),
                    patches_dir / fname)
                entries.append({"file": f"patches/{fname}", "region": ridx,
                                "cluster_label": int(region.label),
                                "row": p.row, "col": p.col})
        _write_json(out / "patches.json",
                    {"image": m.id, "patch_size": cfg.patch_size,
                     "items": entries})

    summary = {
        "image": m.id,
        "suggested_K": int(suggested),
        "fitted_K": int(k_fit),
        "significant_clusters": sorted(int(j) for j in significant),
        "pi_hat": [float(p) for p in post.pi_hat],
        "n_regions": len(regions),
        "n_patches": len(entries),
        "mask_labels": mask.class_ids(),
    }
    _write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# Step 2
# ---------------------------------------------------------------------------

def step2_run(step1_dir, checkpoint: ClassifierCheckpoint, catalog: Catalog,
              cfg: PipelineConfig, out_path=None, enqueue: bool = True) -> dict:
    """Classify harvested patches per region with a majority vote.

    A region whose vote lands on "novel" (ties included: split votes go to
    review) is enqueued with its most uncertain patch as the exemplar.
    Returns the predictions payload, also written to out_path if given.
    """
    step1_dir = Path(step1_dir)
    with _stage("load_patches"):
        with open(step1_dir / "patches.json") as fh:
            harvest = json.load(fh)
    if checkpoint.class_hash != class_list_hash(catalog.class_ids()):
        raise PipelineError("class_list_check", ValueError(
            "checkpoint class list does not match the catalog"))
    if not harvest["items"]:
        return {"regions": [], "warning": "no patches harvested"}

    by_region = {}
    for item in harvest["items"]:
        by_region.setdefault(item["region"], []).append(item)
    regions_out = []
    with _stage("classify_patches"):
        for region_id in sorted(by_region):
            items = by_region[region_id]
            preds = []
            for item in items:
                pixels = imagecore.load_micrograph(step1_dir / item["file"]).pixels
                pred = edlclassify.classify_patch(
                    checkpoint, pixels, k_prime=cfg.k_prime,
                    tau_u=cfg.tau_u, patch_id=item["file"])
                preds.append((item, pred))
            votes = Counter()
            for _, pred in preds:
                decision = edlclassify.novelty_decision(pred, cfg.tau_u)
                votes["novel" if decision.kind == "novel" else decision.class_id] += 1
            ranked = votes.most_common()
            top_count = ranked[0][1]
            tied = [key for key, count in ranked if count == top_count]
            needs_review = "novel" in tied or len(tied) > 1
            mean_u = float(np.mean([p.uncertainty for _, p in preds]))
            region_entry = {
                "region": region_id,
                "votes": {str(k): v for k, v in votes.items()},
                "mean_uncertainty": mean_u,
                "decision": "review" if needs_review else f"existing:{ranked[0][0]}",
                "patches": [p.to_json() for _, p in preds],
            }
            if needs_review and enqueue:
                item, pred = max(preds, key=lambda ip: ip[1].uncertainty)
                queued = catalog.enqueue_review(
                    imagecore.load_micrograph(step1_dir / item["file"]).pixels,
                    {"source_id": harvest["image"],
                     "region_label": item["cluster_label"],
                     "row": item["row"], "col": item["col"]},
                    pred.to_json(), force=True)
                region_entry["queued_item"] = queued.item_id
            regions_out.append(region_entry)
    payload = {"image": harvest["image"], "regions": regions_out}
    if out_path is not None:
        _write_json(out_path, payload)
    return payload


# ---------------------------------------------------------------------------
# Training runs
# ---------------------------------------------------------------------------

def _classifier_patches_from_catalog(catalog: Catalog, input_size: int,
                                     augment_mode: str = "none"):
    """Exemplar patches as training data; optionally expanded with the 8
    right-angle dihedral variants (arbitrary-angle rotations need oversized
    sources, which catalog exemplars are not). Dihedral variants mislabel
    orientation-defined classes, so they are off by default."""
    images, labels = [], []
    class_ids = catalog.class_ids()
    for idx, cid in enumerate(class_ids):
        for ref in catalog.mcs[cid].exemplars:
            base = catalog.patch_pixels(ref.patch_id)
            if base.shape[0] != input_size:
                raise ValueError(f"exemplar size {base.shape[0]} != classifier "
                                 f"input {input_size}")
            if augment_mode == "dihedral":
                for k in range(4):
                    rot = np.rot90(base, k)
                    images.extend([rot, rot[:, ::-1]])
                    labels.extend([idx, idx])
            else:
                images.append(base)
                labels.append(idx)
    return edlclassify.LabeledPatches(images=np.array(images),
                                      labels=np.array(labels),
                                      class_ids=class_ids)


def train_classifier_run(catalog: Catalog, cfg: PipelineConfig, out_dir,
                         warm_start: ClassifierCheckpoint | None = None,
                         register: bool = True) -> ClassifierCheckpoint:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot_config(cfg, out, "train-classifier")
    data = _classifier_patches_from_catalog(catalog, catalog.patch_size,
                                            cfg.cls_augment)
    tcfg = edlclassify.TrainConfig(epochs=cfg.cls_epochs, batch_size=cfg.cls_batch,
                                   seed=cfg.seed, anneal_epochs=cfg.cls_anneal,
                                   lr=cfg.cls_lr)
    spec = edlclassify.ClassifierSpec(input_size=catalog.patch_size)
    ckpt = edlclassify.train_classifier(data, tcfg, spec=spec,
                                        warm_start=warm_start)
    path = out / "classifier.ckpt"
    ckpt.save(path)
    _write_json(out / "metrics.json", ckpt.metrics)
    if register:
        catalog.register_model("classifier", str(path), len(ckpt.class_ids),
                               ckpt.class_hash,
                               metrics=ckpt.metrics[-1] if ckpt.metrics else {})
    return ckpt


def augment_run(catalog: Catalog, cfg: PipelineConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot_config(cfg, out, "augment")
    acfg = augment.AugmentConfig(
        collage_size=cfg.seg_input, n_regions=cfg.collage_regions,
        boundary_style=cfg.boundary_style,
        scale_range=(cfg.scale_min, cfg.scale_max))
    return augment.build_dataset(catalog.exemplar_micrographs(),
                                 cfg.collage_count, acfg,
                                 ratios=(0.8, 0.1, 0.1), seed=cfg.seed,
                                 out_dir=out)


def train_segnet_run(manifest: dict, cfg: PipelineConfig, out_dir,
                     class_ids: list, warm_start: SegCheckpoint | None = None,
                     catalog: Catalog | None = None) -> SegCheckpoint:
    """Train the segmenter on a collage dataset manifest.

    Mask class ids are remapped to dense channel indices via `class_ids`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot_config(cfg, out, "train-segnet")
    lookup = {int(cid): i for i, cid in enumerate(class_ids)}

    def load_split(split):
        images, masks = augment.load_collage_split(manifest, split)
        if len(images) == 0:
            return None
        dense = np.full_like(masks, imagecore.UNLABELED)
        for cid, idx in lookup.items():
            dense[masks == cid] = idx
        return segnet.SegDataset(images=images, masks=dense)

    train = load_split("train")
    val = load_split("val")
    scfg = segnet.SegNetConfig(input_size=cfg.seg_input,
                               downsample=cfg.seg_downsample,
                               aspp_rates=cfg.seg_rates,
                               base_channels=cfg.seg_base_channels,
                               class_count=len(class_ids))
    tcfg = segnet.SegTrainConfig(epochs=cfg.seg_epochs, batch_size=cfg.seg_batch,
                                 seed=cfg.seed, lr=cfg.seg_lr)
    ckpt = segnet.train_segnet(train, scfg, tcfg, val=val,
                               warm_start=warm_start, class_ids=class_ids)
    path = out / "segmenter.ckpt"
    ckpt.save(path)
    _write_json(out / "metrics.json", ckpt.metrics)
    if catalog is not None:
        catalog.register_model("segmenter", str(path), len(class_ids),
                               class_list_hash(class_ids),
                               metrics=ckpt.metrics[-1] if ckpt.metrics else {})
    return ckpt


def segment_run(image_path, ckpt: SegCheckpoint, out_dir) -> dict:
    """Segment an image; writes mask.pgm, prob.f32 (+shape json), summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = imagecore.load_micrograph(image_path)
    mask, prob = segnet.segment(ckpt, m)
    imagecore.save_mask(mask, out / "mask.pgm")
    with open(out / "prob.f32", "wb") as fh:
        fh.write(prob.astype("<f4").tobytes())
    fractions = {str(ckpt.class_ids[j]):
                 float((mask.labels == j).mean())
                 for j in range(ckpt.config.class_count)}
    summary = {"image": m.id, "shape": list(mask.labels.shape),
               "class_fractions": fractions,
               "mean_confidence": float(prob.mean())}
    _write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# Iterate
# ---------------------------------------------------------------------------

def _latest_checkpoint(catalog: Catalog, kind: str):
    for entry in reversed(catalog.models):
        if entry.kind == kind:
            return entry
    return None


def _auto_decide(catalog: Catalog) -> int:
    """Resolve every pending item: novel predictions create a class, others
    assign the top candidate. Testing convenience for unattended runs."""
    created = 0
    for item in list(catalog.pending_reviews()):
        if item.prediction.get("novel") and item.prediction.get("candidates"):
            name = f"auto-{len(catalog.mcs)}"
            catalog.decide_review(item.item_id,
                                  {"action": "create_new", "name": name},
                                  "auto")
            created += 1
        else:
            top = item.prediction["candidates"][0]["class"]
            catalog.decide_review(item.item_id,
                                  {"action": "assign", "class_id": int(top)},
                                  "auto")
    return created


def iterate_run(image_path, catalog_root, cfg: PipelineConfig, work_dir,
                auto: bool = False) -> dict:
    """One full loop over a new micrograph with staged catalog commit.

    Mutations land in a staging copy of the catalog; only after every stage
    succeeds is the staging directory swapped in. Pending reviews block the
    run unless auto mode resolves them.
    """
    catalog_root = Path(catalog_root)
    staging = catalog_root.parent / (catalog_root.name + ".staging")
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    if staging.exists():
        shutil.rmtree(staging)
    shutil.copytree(catalog_root, staging)
    try:
        catalog = Catalog.load(staging)
        if catalog.pending_reviews():
            if auto:
                _auto_decide(catalog)
            else:
                raise PipelineError("preflight", RuntimeError(
                    f"{len(catalog.pending_reviews())} pending reviews must be "
                    "decided before retraining (or pass --auto)"))
        k_before = len(catalog.mcs)

        step1_summary = step1_run(image_path, cfg, work / "step1")

        cls_entry = _latest_checkpoint(catalog, "classifier")
        if cls_entry is None:
            raise PipelineError("preflight", RuntimeError(
                "catalog has no classifier model; run train-classifier first"))
        cls_ckpt = ClassifierCheckpoint.load(cls_entry.checkpoint_path)
        step2_run(work / "step1", cls_ckpt, catalog, cfg,
                  out_path=work / "predictions.json")

        if auto:
            _auto_decide(catalog)
        elif catalog.pending_reviews():
            raise PipelineError("review", RuntimeError(
                "novel regions are queued; decide them and rerun (or --auto)"))

        grew = len(catalog.mcs) > k_before
        new_cls = train_classifier_run(catalog, cfg, work / "classifier",
                                       warm_start=cls_ckpt)

        manifest = augment_run(catalog, cfg, work / "dataset")
        seg_entry = _latest_checkpoint(catalog, "segmenter")
        warm_seg = None
        if seg_entry is not None:
            prev_seg = SegCheckpoint.load(seg_entry.checkpoint_path)
            if grew:
                for cid in catalog.class_ids():
                    if cid not in [int(c) for c in prev_seg.class_ids]:
                        prev_seg = segnet.expand_classes(prev_seg, cid,
                                                         seed=cfg.seed)
            warm_seg = prev_seg
        new_seg = train_segnet_run(manifest, cfg, work / "segmenter",
                                   class_ids=catalog.class_ids(),
                                   warm_start=warm_seg, catalog=catalog)
        catalog.snapshot()

        backup = catalog_root.parent / (catalog_root.name + ".bak")
        if backup.exists():
            shutil.rmtree(backup)
        catalog_root.rename(backup)
        staging.rename(catalog_root)
        shutil.rmtree(backup)
        return {
            "step1": step1_summary,
            "classes_before": k_before,
            "classes_after": len(Catalog.load(catalog_root).mcs),
            "classifier_val": new_cls.metrics[-1] if new_cls.metrics else {},
            "segmenter_val": new_seg.metrics[-1] if new_seg.metrics else {},
        }
    except Exception:
        if staging.exists():
            shutil.rmtree(staging)
        raise

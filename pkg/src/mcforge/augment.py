"""Labeled multiphase collage synthesis from homogeneous texture exemplars.

A collage is built by partitioning the canvas into connected regions with
straight or curved boundaries, then pasting a transformed (cropped, rotated,
flipped, scaled) exemplar into each region. Masks carry class ids, and every
item's randomness derives from (base seed, item index), so parallel and
serial generation agree bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagecore import (UNLABELED, LabelMask, Micrograph, bilinear_resize,
                        load_mask, load_micrograph, save_mask, save_micrograph)

_MAX_REGIONS = 8


@dataclass
class PartitionSpec:
    width: int
    height: int
    n_regions: int
    boundary_style: str = "straight"    # "straight" | "curved"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_regions <= _MAX_REGIONS:
            raise ValueError(f"n_regions must be in 1..{_MAX_REGIONS}")
        if self.boundary_style not in ("straight", "curved"):
            raise ValueError(f"unknown boundary style {self.boundary_style!r}")


@dataclass
class TransformSpec:
    rotation: int = 0                   # degrees, right angles only
    flip: str = "none"                  # "none" | "h" | "v"
    scale: float = 1.0
    crop_offset: tuple = (0, 0)

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise ValueError("rotation must be a right angle")
        if self.flip not in ("none", "h", "v"):
            raise ValueError("flip must be none, h, or v")
        if not 1.0 <= self.scale <= 1.1:
            raise ValueError("scale must lie in [1.0, 1.1]")


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------

def _is_connected(mask: np.ndarray) -> bool:
    total = int(mask.sum())
    if total == 0:
        return False
    rows, cols = np.nonzero(mask)
    seen = np.zeros_like(mask, dtype=bool)
    queue = deque([(int(rows[0]), int(cols[0]))])
    seen[rows[0], cols[0]] = True
    count = 0
    h, w = mask.shape
    while queue:
        r, c = queue.popleft()
        count += 1
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                seen[rr, cc] = True
                queue.append((rr, cc))
    return count == total


def _split_values(region_mask, rng, curved):
    """Signed side value per pixel of the region for a random chord.

    A straight chord is a line through a random interior pivot; a curved chord
    offsets the line by a quadratic bump (the midpoint of a quadratic Bezier
    whose control point sits off the chord), evaluated along the chord axis.
    """
    rows, cols = np.nonzero(region_mask)
    pivot_idx = rng.integers(len(rows))
    pr, pc = float(rows[pivot_idx]), float(cols[pivot_idx])
    theta = rng.uniform(0.0, np.pi)
    nr, nc = np.cos(theta), np.sin(theta)
    side = (rows - pr) * nr + (cols - pc) * nc
    if curved:
        tr, tc = -nc, nr
        t = (rows - pr) * tr + (cols - pc) * tc
        lo, hi = t.min(), t.max()
        extent = max(hi - lo, 1.0)
        u = (t - lo) / extent
        amp = rng.uniform(0.12, 0.3) * extent * rng.choice([-1.0, 1.0])
        side = side - amp * 4.0 * u * (1.0 - u)
    return rows, cols, side


def make_partition(spec: PartitionSpec) -> LabelMask:
    """Partition the canvas into n_regions connected regions, deterministically
    per seed. Regions are grown by repeatedly splitting the largest region with
    a random chord; splits that disconnect or starve a side are retried."""
    rng = np.random.default_rng(spec.seed)
    labels = np.zeros((spec.height, spec.width), dtype=np.int32)
    for new_id in range(1, spec.n_regions):
        sizes = np.bincount(labels.reshape(-1), minlength=new_id)
        target = int(sizes.argmax())
        region_mask = labels == target
        target_size = int(region_mask.sum())
        placed = False
        for attempt in range(80):
            curved = spec.boundary_style == "curved" and attempt < 60
            rows, cols, side = _split_values(region_mask, rng, curved)
            new_sel = side > 0
            n_new = int(new_sel.sum())
            min_part = max(1, int(0.08 * target_size))
            if not min_part <= n_new <= target_size - min_part:
                continue
            new_mask = np.zeros_like(region_mask)
            new_mask[rows[new_sel], cols[new_sel]] = True
            rest_mask = region_mask & ~new_mask
            if not (_is_connected(new_mask) and _is_connected(rest_mask)):
                continue
            labels[new_mask] = new_id
            placed = True
            break
        if not placed:
            raise ValueError(f"could not place region {new_id}; "
                             "n_regions too large for this canvas")
    return LabelMask(labels=labels)


# ---------------------------------------------------------------------------
# Transforms and collages
# ---------------------------------------------------------------------------

def apply_transform(pixels: np.ndarray, t: TransformSpec,
                    out_shape: tuple) -> np.ndarray:
    """Rotate/flip/scale the exemplar, then crop `out_shape` at the offset."""
    out = np.rot90(pixels, k=t.rotation // 90)
    if t.flip == "h":
        out = out[:, ::-1]
    elif t.flip == "v":
        out = out[::-1, :]
    if t.scale != 1.0:
        out = bilinear_resize(out, int(out.shape[0] * t.scale),
                              int(out.shape[1] * t.scale))
    r0, c0 = t.crop_offset
    h, w = out_shape
    if r0 < 0 or c0 < 0 or r0 + h > out.shape[0] or c0 + w > out.shape[1]:
        raise ValueError(f"transformed source {out.shape} does not cover "
                         f"crop {out_shape} at offset {t.crop_offset}")
    return np.ascontiguousarray(out[r0:r0 + h, c0:c0 + w])


def random_transform(rng: np.random.Generator, source_shape: tuple,
                     needed_shape: tuple, scale_range=(1.0, 1.1)) -> TransformSpec:
    rotation = int(rng.choice([0, 90, 180, 270]))
    flip = str(rng.choice(["none", "h", "v"]))
    sh, sw = source_shape
    if rotation in (90, 270):
        sh, sw = sw, sh
    scale = float(rng.uniform(*scale_range))
    th, tw = int(sh * scale), int(sw * scale)
    nh, nw = needed_shape
    if th < nh or tw < nw:
        raise ValueError(f"exemplar {source_shape} too small for region "
                         f"{needed_shape} at scale {scale:.3f}")
    return TransformSpec(
        rotation=rotation, flip=flip, scale=scale,
        crop_offset=(int(rng.integers(0, th - nh + 1)),
                     int(rng.integers(0, tw - nw + 1))),
    )


def make_collage(sources, partition: LabelMask, transforms) -> tuple:
    """Paste one transformed exemplar per partition region.

    `sources` is a list of (class_id, Micrograph) and `transforms` a matching
    list of TransformSpec, both indexed by region id. Returns (Micrograph,
    LabelMask of class ids).
    """
    region_ids = sorted(set(partition.labels.reshape(-1).tolist()))
    if region_ids != list(range(len(sources))):
        raise ValueError(f"partition regions {region_ids} do not match "
                         f"{len(sources)} sources")
    if len(transforms) != len(sources):
        raise ValueError("one transform per source required")
    out = np.zeros((partition.height, partition.width))
    mask = np.zeros_like(partition.labels)
    for rid, ((class_id, exemplar), t) in enumerate(zip(sources, transforms)):
        sel = partition.labels == rid
        rows, cols = np.nonzero(sel)
        top, left = rows.min(), cols.min()
        bbox_shape = (rows.max() - top + 1, cols.max() - left + 1)
        patch = apply_transform(exemplar.pixels, t, bbox_shape)
        out[rows, cols] = patch[rows - top, cols - left]
        mask[rows, cols] = class_id
    return Micrograph(pixels=out, id="collage"), LabelMask(labels=mask)


def rotate_nearest(source: np.ndarray, angle_deg: float, out_size: int) -> np.ndarray:
    """Cut a rotated out_size x out_size patch from the center of an oversized
    source using nearest-neighbor resampling; never samples outside it."""
    need = int(np.ceil(out_size * (abs(np.cos(np.deg2rad(angle_deg)))
                                   + abs(np.sin(np.deg2rad(angle_deg)))))) + 2
    if source.shape[0] < need or source.shape[1] < need:
        raise ValueError(f"source {source.shape} too small for rotated "
                         f"{out_size} patch (needs {need})")
    theta = np.deg2rad(angle_deg)
    cr, cc = (source.shape[0] - 1) / 2.0, (source.shape[1] - 1) / 2.0
    rr, cc_idx = np.indices((out_size, out_size), dtype=np.float64)
    rr -= (out_size - 1) / 2.0
    cc_idx -= (out_size - 1) / 2.0
    src_r = np.rint(cr + rr * np.cos(theta) - cc_idx * np.sin(theta)).astype(int)
    src_c = np.rint(cc + rr * np.sin(theta) + cc_idx * np.cos(theta)).astype(int)
    if src_r.min() < 0 or src_c.min() < 0 or \
            src_r.max() >= source.shape[0] or src_c.max() >= source.shape[1]:
        raise ValueError("rotation sampled outside the source crop")
    return source[src_r, src_c]


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    collage_size: int = 64
    n_regions: int = 3
    boundary_style: str = "straight"
    scale_range: tuple = (1.0, 1.1)
    distinct_classes: bool = True
    patch_size: int = 64
    patch_stride: int = 32
    rotations: int = 0                  # 0 or 12 (30-degree steps)


def _split_counts(count: int, ratios) -> list:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    counts = [int(count * r) for r in ratios]
    counts[0] += count - sum(counts)
    return counts


def _item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(index,)))


def build_dataset(class_exemplars: dict, count: int, cfg: AugmentConfig,
                  ratios=(0.8, 0.1, 0.1), seed: int = 0, out_dir=".",
                  mode: str = "collage") -> dict:
    """Generate a dataset manifest plus image/mask files under out_dir.

    collage mode: `count` collages with per-region class/transform draws.
    patches mode: homogeneous classifier patches cut from exemplars, optionally
    expanded with 12 nearest-neighbor rotations at 30-degree steps.

    Item randomness is keyed by (seed, running item index); split membership is
    by index ranges, so splits never share an item seed.
    """
    out = Path(out_dir)
    for cid, exemplars in class_exemplars.items():
        if not exemplars:
            raise ValueError(f"class {cid} has no exemplars")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    split_names = ("train", "val", "test")[:len(ratios)]
    counts = _split_counts(count, ratios)
    items = []
    if mode == "collage":
        class_ids = sorted(class_exemplars)
        index = 0
        for split, n_split in zip(split_names, counts):
            for _ in range(n_split):
                rng = _item_rng(seed, index)
                chosen = _choose_classes(rng, class_ids, cfg)
                part = make_partition(PartitionSpec(
                    width=cfg.collage_size, height=cfg.collage_size,
                    n_regions=len(chosen), boundary_style=cfg.boundary_style,
                    seed=int(rng.integers(2 ** 31))))
                sources, transforms = [], []
                for rid in range(len(chosen)):
                    cid = chosen[rid]
                    ex = class_exemplars[cid][int(rng.integers(len(class_exemplars[cid])))]
                    sel = part.labels == rid
                    rows, cols = np.nonzero(sel)
                    bbox = (int(rows.max() - rows.min() + 1),
                            int(cols.max() - cols.min() + 1))
                    sources.append((cid, ex))
                    transforms.append(random_transform(
                        rng, ex.pixels.shape, bbox, cfg.scale_range))
                collage, mask = make_collage(sources, part, transforms)
                img_path = out / "images" / f"collage_{index:05d}.pgm"
                mask_path = out / "masks" / f"collage_{index:05d}.pgm"
                collage.id = f"collage_{index:05d}"
                save_micrograph(collage, img_path)
                save_mask(mask, mask_path)
                items.append({"image": str(img_path.relative_to(out)),
                              "mask": str(mask_path.relative_to(out)),
                              "split": split, "seed": index,
                              "classes": sorted(int(c) for c in set(chosen))})
                index += 1
    elif mode == "patches":
        base_items = _harvest_base_patches(class_exemplars, count, cfg, seed)
        index = 0
        base_idx = 0
        for split, n_split in zip(split_names, counts):
            for _ in range(n_split):
                cid, patch = base_items[base_idx]
                base_idx += 1
                variants = [(0.0, patch)]
                if cfg.rotations:
                    step = 360.0 / cfg.rotations
                    variants = [(step * j,
                                 rotate_nearest(patch, step * j, cfg.patch_size))
                                for j in range(cfg.rotations)]
                else:
                    ctr = (patch.shape[0] - cfg.patch_size) // 2
                    variants = [(0.0, patch[ctr:ctr + cfg.patch_size,
                                            ctr:ctr + cfg.patch_size])]
                for angle, arr in variants:
                    img_path = out / "images" / f"patch_{index:06d}.pgm"
                    save_micrograph(Micrograph(arr, id=f"patch_{index:06d}"),
                                    img_path)
                    items.append({"image": str(img_path.relative_to(out)),
                                  "class": int(cid), "split": split,
                                  "seed": base_idx - 1, "angle": angle})
                    index += 1
    else:
        raise ValueError(f"unknown mode {mode!r}")
    manifest = {"mode": mode, "seed": seed, "count": count,
                "ratios": list(ratios), "items": items,
                "classes": sorted(int(c) for c in class_exemplars)}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    manifest["_root"] = str(out)
    return manifest


def _choose_classes(rng, class_ids, cfg: AugmentConfig):
    n = cfg.n_regions
    if cfg.distinct_classes and len(class_ids) >= n:
        picked = rng.choice(len(class_ids), size=n, replace=False)
    else:
        picked = rng.integers(0, len(class_ids), size=n)
    return [class_ids[int(i)] for i in picked]


def _harvest_base_patches(class_exemplars, count, cfg: AugmentConfig, seed):
    """Oversized base crops (so any rotation stays inside), one per item."""
    margin = int(np.ceil(cfg.patch_size * np.sqrt(2))) + 2
    class_ids = sorted(class_exemplars)
    items = []
    for i in range(count):
        rng = _item_rng(seed, i)
        cid = class_ids[i % len(class_ids)]
        exemplars = class_exemplars[cid]
        ex = exemplars[int(rng.integers(len(exemplars)))]
        if ex.height < margin or ex.width < margin:
            raise ValueError(f"class {cid} exemplar smaller than {margin} px "
                             "needed for rotation-safe patches")
        r = int(rng.integers(0, ex.height - margin + 1))
        c = int(rng.integers(0, ex.width - margin + 1))
        items.append((cid, ex.pixels[r:r + margin, c:c + margin]))
    return items


# ---------------------------------------------------------------------------
# Manifest loading
# ---------------------------------------------------------------------------

def load_manifest(path) -> dict:
    with open(str(path)) as fh:
        manifest = json.load(fh)
    manifest["_root"] = str(Path(path).parent)
    return manifest


def load_collage_split(manifest: dict, split: str):
    """Returns (images (n,H,W), masks (n,H,W)) for one split."""
    root = Path(manifest["_root"])
    images, masks = [], []
    for item in manifest["items"]:
        if item["split"] != split:
            continue
        images.append(load_micrograph(root / item["image"]).pixels)
        masks.append(load_mask(root / item["mask"]).labels)
    return np.array(images), np.array(masks)


def load_patch_split(manifest: dict, split: str):
    """Returns (images (n,P,P), labels (n,), class_ids) for one split."""
    root = Path(manifest["_root"])
    class_ids = manifest["classes"]
    lookup = {cid: i for i, cid in enumerate(class_ids)}
    images, labels = [], []
    for item in manifest["items"]:
        if item["split"] != split:
            continue
        images.append(load_micrograph(root / item["image"]).pixels)
        labels.append(lookup[item["class"]])
    return np.array(images), np.array(labels, dtype=np.int64), class_ids


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

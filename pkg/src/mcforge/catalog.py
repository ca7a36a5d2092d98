"""Persistent microstructure-class catalog: records, exemplar patches, model
registry, review queue, and an append-only audit log.

Class ids are dense and never reused; nothing is ever deleted, so any model's
class-list version stays resolvable. Every mutation appends exactly one audit
record, and replaying the log from an empty state reproduces the catalog.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .imagecore import Micrograph, load_micrograph, save_micrograph


class CatalogError(Exception):
    pass


class NotFoundError(CatalogError):
    pass


class ConflictError(CatalogError):
    pass


class ValidationError(CatalogError):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _canonical_hash(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


@dataclass
class ExemplarRef:
    patch_id: str
    path: str                   # relative to the catalog root
    source_id: str = ""
    region_label: int = -1
    row: int = -1
    col: int = -1


@dataclass
class McRecord:
    class_id: int
    name: str
    status: str                 # "provisional" | "verified"
    created_at: str
    exemplars: list = field(default_factory=list)


@dataclass
class ReviewItem:
    item_id: str
    patch: ExemplarRef
    prediction: dict
    state: str = "pending"      # "pending" | "decided"
    decision: dict | None = None
    decided_by: str | None = None
    enqueued_at: str = ""
    decided_at: str | None = None


@dataclass
class ModelEntry:
    model_id: str
    kind: str                   # "classifier" | "segmenter"
    checkpoint_path: str
    class_count: int
    class_list_hash: str
    catalog_version: int
    metrics: dict = field(default_factory=dict)
    registered_at: str = ""


class Catalog:
    """Single-writer catalog bound to a directory.

    Patch files are written immediately on mutation; records and the queue are
    persisted by snapshot(). The audit log is appended on every mutation.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "patches").mkdir(exist_ok=True)
        (self.root / "models").mkdir(exist_ok=True)
        self.lock = threading.RLock()
        self.version = 0
        self.patch_size: int | None = None
        self.mcs: list[McRecord] = []
        self.items: dict[str, ReviewItem] = {}
        self.item_order: list[str] = []
        self.models: list[ModelEntry] = []
        self._next_patch = 0
        self._next_item = 0

    # -- internals ---------------------------------------------------------

    def _audit(self, op: str, payload: dict) -> None:
        self.version += 1
        record = {"seq": self.version, "at": _now(), "op": op, **payload}
        with open(self.root / "audit.log", "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _store_patch(self, pixels: np.ndarray, provenance: dict) -> ExemplarRef:
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 2 or pixels.shape[0] != pixels.shape[1]:
            raise ValidationError("patches must be square")
        if self.patch_size is None:
            self.patch_size = pixels.shape[0]
        elif pixels.shape[0] != self.patch_size:
            raise ValidationError(
                f"patch size {pixels.shape[0]} != catalog patch size "
                f"{self.patch_size}")
        patch_id = f"p{self._next_patch:06d}"
        self._next_patch += 1
        rel = f"patches/{patch_id}.pgm"
        save_micrograph(Micrograph(pixels, id=patch_id), self.root / rel)
        return ExemplarRef(patch_id=patch_id, path=rel,
                           source_id=provenance.get("source_id", ""),
                           region_label=provenance.get("region_label", -1),
                           row=provenance.get("row", -1),
                           col=provenance.get("col", -1))

    # -- mutations ----------------------------------------------------------

    def add_mc(self, name: str, exemplars, _replay: dict | None = None) -> McRecord:
        """Register a new microstructure class with >= 1 exemplar patches.

        `exemplars` is a list of (pixels, provenance dict).
        """
        with self.lock:
            if not name:
                raise ValidationError("name must not be empty")
            if any(mc.name == name for mc in self.mcs):
                raise ConflictError(f"class name {name!r} already exists")
            if not exemplars and _replay is None:
                raise ValidationError("at least one exemplar required")
            record = self._add_mc_inner(name, exemplars, _replay)
            self._audit("add_mc", {
                "class_id": record.class_id, "name": name,
                "created_at": record.created_at,
                "exemplars": [asdict(e) for e in record.exemplars],
                "patch_size": self.patch_size,
            })
            return record

    def _add_mc_inner(self, name, exemplars, _replay=None) -> McRecord:
        if _replay is not None:
            refs = [ExemplarRef(**e) for e in _replay["exemplars"]]
            created = _replay["created_at"]
            self.patch_size = _replay.get("patch_size", self.patch_size)
            self._next_patch = max(self._next_patch,
                                   max((int(r.patch_id[1:]) + 1 for r in refs),
                                       default=self._next_patch))
        else:
            refs = [self._store_patch(px, prov) for px, prov in exemplars]
            created = _now()
        record = McRecord(class_id=len(self.mcs), name=name, status="provisional",
                          created_at=created, exemplars=refs)
        self.mcs.append(record)
        return record

    def enqueue_review(self, pixels, provenance: dict, prediction: dict,
                       force: bool = False, _replay: dict | None = None) -> ReviewItem:
        """Queue a patch for human review; requires a novel-flagged prediction
        unless forced."""
        with self.lock:
            if not force and not prediction.get("novel", False):
                raise ValidationError("prediction is not flagged as novel; "
                                      "pass force to queue anyway")
            if _replay is not None:
                ref = ExemplarRef(**_replay["patch"])
                item_id = _replay["item_id"]
                at = _replay["enqueued_at"]
                self._next_item = max(self._next_item, int(item_id[1:]) + 1)
                self._next_patch = max(self._next_patch, int(ref.patch_id[1:]) + 1)
            else:
                ref = self._store_patch(pixels, provenance)
                item_id = f"q{self._next_item:06d}"
                self._next_item += 1
                at = _now()
            item = ReviewItem(item_id=item_id, patch=ref, prediction=dict(prediction),
                              enqueued_at=at)
            self.items[item_id] = item
            self.item_order.append(item_id)
            self._audit("enqueue_review", {
                "item_id": item_id, "patch": asdict(ref),
                "prediction": item.prediction, "enqueued_at": at,
                "force": force,
            })
            return item

    def decide_review(self, item_id: str, decision: dict, decided_by: str,
                      _replay: dict | None = None) -> ReviewItem:
        """Resolve a pending item: assign to an existing class or create one.

        decision: {"action": "assign", "class_id": int} or
                  {"action": "create_new", "name": str}.
        """
        with self.lock:
            item = self.items.get(item_id)
            if item is None:
                raise NotFoundError(f"unknown review item {item_id!r}")
            if item.state == "decided":
                raise ConflictError(f"item {item_id} already decided")
            action = decision.get("action")
            at = _replay["decided_at"] if _replay else _now()
            if action == "assign":
                class_id = decision.get("class_id")
                if class_id is None or not 0 <= int(class_id) < len(self.mcs):
                    raise NotFoundError(f"unknown class id {class_id!r}")
                mc = self.mcs[int(class_id)]
                mc.exemplars.append(item.patch)
                mc.status = "verified"
            elif action == "create_new":
                name = decision.get("name", "")
                if not name:
                    raise ValidationError("create_new requires a name")
                if any(mc.name == name for mc in self.mcs):
                    raise ConflictError(f"class name {name!r} already exists")
                record = McRecord(class_id=len(self.mcs), name=name,
                                  status="verified", created_at=at,
                                  exemplars=[item.patch])
                self.mcs.append(record)
                decision = {"action": "create_new", "name": name,
                            "class_id": record.class_id}
            else:
                raise ValidationError(f"unknown action {action!r}")
            item.state = "decided"
            item.decision = decision
            item.decided_by = decided_by
            item.decided_at = at
            self._audit("decide_review", {
                "item_id": item_id, "decision": decision,
                "decided_by": decided_by, "decided_at": at,
            })
            return item

    def register_model(self, kind: str, checkpoint_path: str, class_count: int,
                       class_list_hash: str, metrics: dict | None = None,
                       _replay: dict | None = None) -> ModelEntry:
        with self.lock:
            if kind not in ("classifier", "segmenter"):
                raise ValidationError(f"unknown model kind {kind!r}")
            if class_count > len(self.mcs):
                raise ValidationError("model class count exceeds catalog classes")
            if _replay is not None:
                model_id = _replay["model_id"]
                at = _replay["registered_at"]
            else:
                model_id = f"m{len(self.models):04d}"
                at = _now()
            entry = ModelEntry(model_id=model_id, kind=kind,
                               checkpoint_path=str(checkpoint_path),
                               class_count=class_count,
                               class_list_hash=class_list_hash,
                               catalog_version=self.version,
                               metrics=metrics or {}, registered_at=at)
            self.models.append(entry)
            self._audit("register_model", {
                "model_id": model_id, "kind": kind,
                "checkpoint_path": entry.checkpoint_path,
                "class_count": class_count, "class_list_hash": class_list_hash,
                "metrics": entry.metrics, "registered_at": at,
            })
            return entry

    # -- queries -------------------------------------------------------------

    def pending_reviews(self, sort: str | None = None) -> list[ReviewItem]:
        with self.lock:
            pending = [self.items[i] for i in self.item_order
                       if self.items[i].state == "pending"]
            if sort == "uncertainty":
                pending.sort(key=lambda it: -it.prediction.get("uncertainty", 0.0))
            elif sort is not None:
                raise ValidationError(f"unknown sort {sort!r}")
            return pending

    def get_item(self, item_id: str) -> ReviewItem:
        item = self.items.get(item_id)
        if item is None:
            raise NotFoundError(f"unknown review item {item_id!r}")
        return item

    def patch_pixels(self, patch_id: str) -> np.ndarray:
        path = self.root / "patches" / f"{patch_id}.pgm"
        if not path.exists():
            raise NotFoundError(f"unknown patch {patch_id!r}")
        return load_micrograph(path).pixels

    def class_ids(self) -> list[int]:
        return [mc.class_id for mc in self.mcs]

    def exemplar_micrographs(self) -> dict:
        """class id -> list of exemplar Micrographs (for dataset generation)."""
        out = {}
        for mc in self.mcs:
            out[mc.class_id] = [
                Micrograph(self.patch_pixels(ref.patch_id), id=ref.patch_id)
                for ref in mc.exemplars]
        return out

    # -- persistence -----------------------------------------------------------

    def _state_payload(self) -> dict:
        return {
            "version": self.version,
            "patch_size": self.patch_size,
            "next_patch": self._next_patch,
            "next_item": self._next_item,
            "mcs": [asdict(mc) for mc in self.mcs],
            "models": [asdict(m) for m in self.models],
        }

    def snapshot(self) -> None:
        """Write catalog.json and queue.json with content hashes."""
        with self.lock:
            state = self._state_payload()
            state["hash"] = _canonical_hash(state)
            with open(self.root / "catalog.json", "w") as fh:
                json.dump(state, fh, indent=1)
            queue = {"order": self.item_order,
                     "items": {k: asdict(v) for k, v in self.items.items()}}
            queue["hash"] = _canonical_hash(queue)
            with open(self.root / "queue.json", "w") as fh:
                json.dump(queue, fh, indent=1)

    @classmethod
    def load(cls, root) -> "Catalog":
        cat = cls(root)
        cat_path = cat.root / "catalog.json"
        if not cat_path.exists():
            return cat
        with open(cat_path) as fh:
            state = json.load(fh)
        expect = state.pop("hash", None)
        if expect != _canonical_hash(state):
            raise CatalogError(f"{cat_path}: manifest hash mismatch "
                               "(corrupted or tampered)")
        cat.version = state["version"]
        cat.patch_size = state["patch_size"]
        cat._next_patch = state["next_patch"]
        cat._next_item = state["next_item"]
        cat.mcs = [McRecord(**{**mc, "exemplars": [ExemplarRef(**e)
                                                   for e in mc["exemplars"]]})
                   for mc in state["mcs"]]
        cat.models = [ModelEntry(**m) for m in state["models"]]
        queue_path = cat.root / "queue.json"
        if queue_path.exists():
            with open(queue_path) as fh:
                queue = json.load(fh)
            expect = queue.pop("hash", None)
            if expect != _canonical_hash(queue):
                raise CatalogError(f"{queue_path}: queue hash mismatch")
            cat.item_order = queue["order"]
            cat.items = {k: ReviewItem(**{**v, "patch": ExemplarRef(**v["patch"])})
                         for k, v in queue["items"].items()}
        for mc in cat.mcs:
            for ref in mc.exemplars:
                if not (cat.root / ref.path).exists():
                    raise CatalogError(f"missing exemplar file {ref.path}")
        return cat

    @classmethod
    def replay(cls, root) -> "Catalog":
        """Rebuild catalog state by replaying audit.log from empty.

        Patch files must already exist under root; replaying writes no files
        and appends no audit records.
        """
        cat = cls(root)
        audit_path = cat.root / "audit.log"
        if not audit_path.exists():
            return cat
        audit_fn = cat._audit
        cat._audit = lambda op, payload: None
        try:
            with open(audit_path) as fh:
                for line in fh:
                    rec = json.loads(line)
                    op = rec["op"]
                    if op == "add_mc":
                        cat.add_mc(rec["name"], [], _replay=rec)
                    elif op == "enqueue_review":
                        cat.enqueue_review(None, {}, rec["prediction"],
                                           force=rec.get("force", False),
                                           _replay=rec)
                    elif op == "decide_review":
                        cat.decide_review(rec["item_id"], rec["decision"],
                                          rec["decided_by"], _replay=rec)
                    elif op == "register_model":
                        cat.register_model(rec["kind"], rec["checkpoint_path"],
                                           rec["class_count"],
                                           rec["class_list_hash"],
                                           rec.get("metrics"), _replay=rec)
                    else:
                        raise CatalogError(f"unknown audit op {op!r}")
                    cat.version = rec["seq"]
        finally:
            cat._audit = audit_fn
        return cat

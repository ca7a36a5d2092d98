"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion lines
as they complete. Training benchmarks are seeded and deterministic.
"""

import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

import texgen
from mcforge import augment, edlclassify as edl, imagecore, scorefield, segnet, vbgmm
from mcforge import neuralnet as nn
from mcforge.augment import file_hash
from mcforge.catalog import Catalog
from mcforge.imagecore import Micrograph, save_micrograph
from mcforge.pipeline import PipelineConfig, step1_run, train_segnet_run


@contextmanager
def gate(number, description, budget_s=None):
    start = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"[criterion {number:2d}] FAIL  {description}")
        raise
    elapsed = time.monotonic() - start
    if budget_s is not None:
        assert elapsed < budget_s, \
            f"criterion {number} exceeded budget: {elapsed:.1f}s >= {budget_s}s"
    print(f"[criterion {number:2d}] PASS  {description} ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# shared benchmark builders
# ---------------------------------------------------------------------------

def trio_image(size=128, seed=0):
    """Three fine-grained textures in vertical bands: noise, salt, grating."""
    h = w = size
    texs = [texgen.white_noise((h, w), 7 + seed, mean=100.0, std=30.0),
            texgen.salt((h, w), 8 + seed),
            texgen.grating((h, w), 4.0, 0.0, 9 + seed, noise=10.0)]
    edges = [0, w // 3, 2 * w // 3, w]
    px = np.zeros((h, w))
    lab = np.zeros((h, w), dtype=np.int32)
    for i, tex in enumerate(texs):
        px[:, edges[i]:edges[i + 1]] = tex[:, edges[i]:edges[i + 1]]
        lab[:, edges[i]:edges[i + 1]] = i
    return px, lab


TRIO_CFG = PipelineConfig(
    l_s=2, l_w=6, n_components=4, fit_stride=8,
    k_range=(1, 10), k_override=6, weight_threshold=0.02,
    patch_size=32, patch_stride=16, seed=0,
)


def patch_bank(classes, per_class, size=64, seed=0):
    images, labels = [], []
    for li, cls in enumerate(classes):
        big = texgen.texture(cls, (size * 5, size * 5), seed=seed + li)
        rng = np.random.default_rng(seed * 97 + li)
        for _ in range(per_class):
            r = int(rng.integers(0, size * 4))
            c = int(rng.integers(0, size * 4))
            images.append(big[r:r + size, c:c + size])
            labels.append(li)
    return edl.LabeledPatches(images=np.array(images), labels=np.array(labels),
                              class_ids=list(range(len(classes))))


SEG_CLASSES = [4, 5, 6]


def collage_banks(classes):
    return {cid: [Micrograph(texgen.texture(cid, (256, 256),
                                            seed=500 + 17 * cid + j),
                             id=f"ex{cid}_{j}") for j in range(2)]
            for cid in classes}


def dense_masks(masks, classes):
    dense = np.full_like(masks, imagecore.UNLABELED)
    for i, cid in enumerate(classes):
        dense[masks == cid] = i
    return dense


def collage_split(manifest, split, classes):
    images, masks = augment.load_collage_split(manifest, split)
    return segnet.SegDataset(images=images, masks=dense_masks(masks, classes))


def eval_collages(ckpt, manifest, classes):
    data = collage_split(manifest, "train", classes)
    x = (data.images.astype(np.float32) - np.float32(ckpt.train_mean))[:, None]
    out, _ = nn.forward(ckpt.net, x)
    return segnet.pixel_metrics(out.argmax(axis=1), data.masks, len(classes))


@pytest.fixture(scope="module")
def seg_bench(tmp_path_factory):
    """Criterion 8/9 artifacts: trained 3-class segmenter plus test sets."""
    tmp = tmp_path_factory.mktemp("seg_bench")
    banks = collage_banks(SEG_CLASSES)
    train_m = augment.build_dataset(
        banks, 200, augment.AugmentConfig(collage_size=64, n_regions=3,
                                          scale_range=(1.0, 1.1)),
        ratios=(0.9, 0.1), seed=10, out_dir=tmp / "train")
    test_plain = augment.build_dataset(
        banks, 48, augment.AugmentConfig(collage_size=64, n_regions=3,
                                         scale_range=(1.0, 1.0)),
        ratios=(1.0,), seed=777, out_dir=tmp / "test_plain")
    test_scaled = augment.build_dataset(
        banks, 48, augment.AugmentConfig(collage_size=64, n_regions=3,
                                         scale_range=(1.0, 1.1)),
        ratios=(1.0,), seed=888, out_dir=tmp / "test_scaled")
    cfg = segnet.SegNetConfig(input_size=64, downsample=8, class_count=3)
    ckpt = segnet.train_segnet(
        collage_split(train_m, "train", SEG_CLASSES), cfg,
        segnet.SegTrainConfig(epochs=30, seed=0, lr=2e-3),
        val=collage_split(train_m, "val", SEG_CLASSES))
    acc_plain, tpr_plain = eval_collages(ckpt, test_plain, SEG_CLASSES)
    acc_scaled, _ = eval_collages(ckpt, test_scaled, SEG_CLASSES)
    return {"ckpt": ckpt, "acc_plain": acc_plain, "tpr_plain": tpr_plain,
            "acc_scaled": acc_scaled}


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

class TestAcceptance:
    def test_criterion_01_score_zero_mean(self, tmp_path):
        with gate(1, "score vectors are zero-mean at the OLS fit"):
            images = {
                "noise": texgen.white_noise((128, 128), 1),
                "ar": texgen.ar_texture((128, 128), 0.8, 0.4, 2),
                "trio": trio_image(128, 3)[0],
            }
            # include a file roundtrip so the byte path is covered
            path = tmp_path / "img.pgm"
            save_micrograph(Micrograph(images["trio"], id="trio"), path)
            images["loaded"] = imagecore.load_micrograph(path).pixels
            for name, px in images.items():
                start = time.monotonic()
                m = Micrograph(px, id=name)
                ns = imagecore.extract_neighborhoods(m, 5)
                pred = scorefield.fit_predictor(
                    ns, scorefield.PredictorSpec(kind="linear"))
                field = scorefield.compute_scores(m, pred)
                mean = field.flat().mean(axis=0)
                assert np.max(np.abs(mean)) <= 1e-8, name
                assert time.monotonic() - start < 10.0, name

    def test_criterion_02_gradient_correctness(self):
        with gate(2, "all layer kinds and both losses pass FD checks",
                  budget_s=120):
            from test_neuralnet import FD_CASES, sq_loss

            for case, (layers, in_shape) in sorted(FD_CASES.items()):
                net = nn.Network(layers, in_shape, seed=11, dtype=np.float64)
                rng = np.random.default_rng(21)
                x = rng.normal(size=(3,) + in_shape)
                target = rng.normal(size=(3,) + net.output_shape)
                err = nn.grad_check(net, sq_loss, x, target, eps=1e-3,
                                    sample_frac=1.0, seed=5)
                assert err <= 1e-4, f"{case}: {err}"

            # evidential loss through a conv classifier
            cls_layers = [
                nn.layer("conv2d", "c1", channels=3, kernel=3, stride=2, padding=1),
                nn.layer("relu", "r1"),
                nn.layer("avgpool2d", "p"),
                nn.layer("flatten", "f"),
                nn.layer("dense", "d", units=4),
                nn.layer("exp_head", "e", clamp=10.0),
            ]
            net = nn.Network(cls_layers, (1, 8, 8), seed=3, dtype=np.float64)
            rng = np.random.default_rng(4)
            x = rng.normal(size=(4, 1, 8, 8))
            t = np.eye(4)[rng.integers(0, 4, size=4)]
            err = nn.grad_check(net, edl.edl_loss_fn(0.7), x, t, eps=1e-4,
                                sample_frac=1.0)
            assert err <= 1e-4

            # class-balanced segmentation loss through the segmenter
            cfg = segnet.SegNetConfig(input_size=16, downsample=4,
                                      aspp_rates=(1, 2), base_channels=4,
                                      class_count=3)
            base = segnet.build_segnet(cfg, seed=2)
            net = nn.Network(base.layers, base.input_shape, seed=2,
                             dtype=np.float64, class_count=3)
            x = rng.normal(0.0, 80.0, size=(2, 1, 16, 16))
            masks = rng.integers(0, 3, size=(2, 16, 16)).astype(np.int32)
            masks[0, :2] = imagecore.UNLABELED
            loss_fn = segnet.balanced_ce_loss_fn(
                segnet.ClassWeights(w=np.array([0.7, 1.0, 1.9])))
            err = nn.grad_check(net, loss_fn, x, masks, eps=1e-4,
                                sample_frac=0.5, seed=1)
            assert err <= 1e-4

    def test_criterion_03_vbgmm_properties(self):
        with gate(3, "ELBO monotone over 10 seeds; two-blob recovery matches "
                     "an independent EM reference", budget_s=60):
            for seed in range(10):
                rng = np.random.default_rng(100 + seed)
                x = rng.normal(size=(int(rng.integers(80, 400)),
                                     int(rng.integers(1, 6))))
                post = vbgmm.fit_vbgmm(x, vbgmm.BgmHyper(K=4, seed=seed,
                                                         max_iter=60))
                trace = np.array(post.elbo_trace)
                assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1]))

            rng = np.random.default_rng(42)
            blob_a = rng.normal(size=(200, 2))
            blob_b = rng.normal(size=(200, 2)) + 10.0
            x = np.concatenate([blob_a, blob_b])
            post = vbgmm.fit_vbgmm(x, vbgmm.BgmHyper(K=5, seed=0))
            big = np.sort(post.pi_hat[post.pi_hat > 0.05])
            assert big.shape == (2,) and np.all(np.abs(big - 0.5) <= 0.05)
            assert np.all(post.pi_hat[post.pi_hat <= 0.05] < 1e-3)
            from sklearn.mixture import GaussianMixture
            em = GaussianMixture(n_components=2, random_state=0, n_init=3).fit(x)
            ours = post.m[np.argsort(post.pi_hat)[-2:]]
            ours = ours[np.argsort(ours[:, 0])]
            ref = em.means_[np.argsort(em.means_[:, 0])]
            assert np.max(np.abs(ours - ref)) < 0.2

    def test_criterion_04_step1_model_selection(self, tmp_path):
        with gate(4, "3-texture image: exactly 3 substantial weights at K=6 "
                     "and BIC elbow at 3", budget_s=300):
            px, _ = trio_image(128, seed=0)
            image = tmp_path / "trio.pgm"
            save_micrograph(Micrograph(px, id="trio"), image)
            summary = step1_run(image, TRIO_CFG, tmp_path / "run")
            pi = np.array(summary["pi_hat"])
            assert pi.shape == (6,)
            assert (pi > 0.02).sum() == 3, pi
            assert summary["suggested_K"] == 3

    def test_criterion_05_step1_segmentation_accuracy(self):
        with gate(5, "two-phase AR image: >= 85% interior accuracy "
                     "(25px border excluded)", budget_s=300):
            size = 256
            phase_a = texgen.ar_texture((size, size), 0.6, 0.05, 3)
            phase_b = texgen.ar_texture((size, size), 0.05, 0.6, 4)
            px = np.concatenate([phase_a[:, :size // 2],
                                 phase_b[:, size // 2:]], axis=1)
            truth = np.zeros((size, size), dtype=int)
            truth[:, size // 2:] = 1
            m = Micrograph(px, id="ar2")
            ns = imagecore.extract_neighborhoods(m, 5)
            pred = scorefield.fit_predictor(
                ns, scorefield.PredictorSpec(kind="linear"))
            field = scorefield.smooth_scores(
                scorefield.compute_scores(m, pred), 20)
            field = scorefield.reduce_scores(field, 8)
            h, w, d = field.vectors.shape
            sub = field.vectors[::22, ::22].reshape(-1, d)
            post = vbgmm.fit_vbgmm(sub, vbgmm.BgmHyper(K=2, seed=0))
            resp = vbgmm.predict_responsibilities(post, field.flat())
            winners = resp.argmax(axis=1).reshape(h, w)
            interior = truth[25:-25, 25:-25]
            assert interior.shape == winners.shape
            # optimal matching: each cluster counts as its majority phase
            correct = 0
            for j in range(2):
                sel = winners == j
                if sel.any():
                    correct += max((interior[sel] == 0).sum(),
                                   (interior[sel] == 1).sum())
            accuracy = correct / interior.size
            assert accuracy >= 0.85, accuracy

    def test_criterion_06_edl_uncertainty_separation(self):
        with gate(6, "held-out textures: uncertainty gap >= 0.2 and novel "
                     "recall >= 0.8 at tau 0.5", budget_s=900):
            train = patch_bank([1, 3, 4, 6], per_class=100, seed=6)
            val = patch_bank([1, 3, 4, 6], per_class=25, seed=99)
            held_out = patch_bank([5, 8], per_class=25, seed=123)
            cfg = edl.TrainConfig(epochs=20, batch_size=32, seed=1, lr=2e-3,
                                  anneal_epochs=8)
            ckpt = edl.train_classifier(train, cfg, val=val)
            u_val = np.array([edl.classify_patch(ckpt, img).uncertainty
                              for img in val.images])
            u_novel = np.array([edl.classify_patch(ckpt, img).uncertainty
                                for img in held_out.images])
            assert u_novel.mean() - u_val.mean() >= 0.2
            recall = float(np.mean([
                edl.novelty_decision(
                    edl.classify_patch(ckpt, img), tau_u=0.5).kind == "novel"
                for img in held_out.images]))
            assert recall >= 0.8, recall

    def test_criterion_07_classifier_accuracy(self):
        with gate(7, ">= 95% validation accuracy on 8 texture classes",
                  budget_s=900):
            train = patch_bank(list(range(8)), per_class=160, seed=6)
            val = patch_bank(list(range(8)), per_class=40, seed=99)
            cfg = edl.TrainConfig(epochs=20, batch_size=32, seed=1, lr=2e-3,
                                  anneal_epochs=40)
            ckpt = edl.train_classifier(train, cfg, val=val)
            assert ckpt.metrics[-1]["val_acc"] >= 0.95

    def test_criterion_08_step3_segmentation(self, seg_bench):
        with gate(8, "3-class collage benchmark: >= 90% test accuracy, "
                     "all TPR >= 85%", budget_s=1800):
            assert seg_bench["acc_plain"] >= 0.90, seg_bench["acc_plain"]
            for cls, tpr in seg_bench["tpr_plain"].items():
                assert tpr >= 0.85, (cls, tpr)

    def test_criterion_09_scale_robustness(self, seg_bench):
        with gate(9, "scaled evaluation degrades accuracy by <= 2 points"):
            drop = seg_bench["acc_plain"] - seg_bench["acc_scaled"]
            assert drop <= 0.02, drop

    def test_criterion_10_transfer_expansion(self, tmp_path):
        with gate(10, "class expansion preserves old channels bit-exactly and "
                      "fine-tune reaches 0.90 in <= half the scratch epochs"):
            base_classes = [0, 4, 6, 7]
            full_classes = [0, 4, 6, 7, 5]

            def make(classes, count, seed, out):
                manifest = augment.build_dataset(
                    collage_banks(classes), count,
                    augment.AugmentConfig(collage_size=64, n_regions=3,
                                          scale_range=(1.0, 1.1)),
                    ratios=(0.85, 0.15), seed=seed, out_dir=out)
                return (collage_split(manifest, "train", classes),
                        collage_split(manifest, "val", classes))

            tr4, va4 = make(base_classes, 160, 20, tmp_path / "d4")
            cfg4 = segnet.SegNetConfig(input_size=64, downsample=8,
                                       class_count=4)
            base = segnet.train_segnet(
                tr4, cfg4, segnet.SegTrainConfig(epochs=25, seed=100, lr=2e-3),
                val=va4, class_ids=base_classes)

            grown = segnet.expand_classes(base, new_class_id=5, seed=0)
            x = np.random.default_rng(14).normal(
                0, 60, size=(2, 1, 64, 64)).astype(np.float32)
            before, _ = nn.forward(base.net, x)
            after, _ = nn.forward(grown.net, x)
            assert np.array_equal(before, after[:, :4])

            tr5, va5 = make(full_classes, 160, 30, tmp_path / "d5")
            cfg5 = segnet.SegNetConfig(input_size=64, downsample=8,
                                       class_count=5)

            def epochs_to_090(ckpt):
                for row in ckpt.metrics:
                    if row.get("val_acc", 0.0) >= 0.90:
                        return row["epoch"] + 1
                return None

            for seed in (0, 1, 2):
                tcfg = segnet.SegTrainConfig(epochs=50, seed=seed, lr=1e-3,
                                             stop_at_val_acc=0.90)
                warm = segnet.expand_classes(base, new_class_id=5, seed=seed)
                transfer = segnet.train_segnet(tr5, cfg5, tcfg, val=va5,
                                               warm_start=warm,
                                               class_ids=full_classes)
                scratch = segnet.train_segnet(tr5, cfg5, tcfg, val=va5,
                                              class_ids=full_classes)
                n_transfer = epochs_to_090(transfer)
                n_scratch = epochs_to_090(scratch)
                assert n_transfer is not None and n_scratch is not None, seed
                assert n_transfer <= 0.5 * n_scratch, \
                    (seed, n_transfer, n_scratch)

    def test_criterion_11_determinism(self, tmp_path):
        with gate(11, "step1 and train-segnet reruns are bit-identical"):
            px, _ = trio_image(128, seed=0)
            image = tmp_path / "trio.pgm"
            save_micrograph(Micrograph(px, id="trio"), image)
            step1_run(image, TRIO_CFG, tmp_path / "a")
            step1_run(image, TRIO_CFG, tmp_path / "b")
            for rel in ("mask.pgm", "bic.csv", "weights.csv", "posterior.bin",
                        "summary.json", "patches.json", "config.json"):
                assert file_hash(tmp_path / "a" / rel) == \
                    file_hash(tmp_path / "b" / rel), rel

            banks = collage_banks(SEG_CLASSES)
            manifest = augment.build_dataset(
                banks, 24, augment.AugmentConfig(collage_size=64, n_regions=3),
                ratios=(0.85, 0.15), seed=5, out_dir=tmp_path / "ds")
            cfg = PipelineConfig(seg_epochs=2, seg_input=64, seed=1)
            train_segnet_run(manifest, cfg, tmp_path / "t1",
                             class_ids=SEG_CLASSES)
            train_segnet_run(manifest, cfg, tmp_path / "t2",
                             class_ids=SEG_CLASSES)
            assert file_hash(tmp_path / "t1" / "segmenter.ckpt") == \
                file_hash(tmp_path / "t2" / "segmenter.ckpt")

    def test_criterion_12_service_contract(self, tmp_path):
        with gate(12, "queue/item/decision endpoints incl. 404/409 and "
                      "audit replay equality"):
            import dataclasses

            from fastapi.testclient import TestClient

            from mcforge.service import create_app

            catalog = Catalog(tmp_path / "cat")
            for i in range(3):
                catalog.add_mc(f"mc{i}", [(np.full((16, 16), 40.0 * i + 10), {})])
            items = [catalog.enqueue_review(
                np.full((16, 16), 200.0 + i), {},
                {"patch_id": f"x{i}",
                 "candidates": [{"class": 0, "p": 0.6}, {"class": 1, "p": 0.4}],
                 "uncertainty": 0.5 + i / 10, "novel": True})
                for i in range(3)]
            client = TestClient(create_app(catalog))

            assert len(client.get("/api/queue").json()) == 3
            us = [it["uncertainty"] for it in
                  client.get("/api/queue", params={"sort": "uncertainty"}).json()]
            assert us == sorted(us, reverse=True)
            assert client.get("/api/items/q404404").status_code == 404
            assert client.get("/api/items/q404404").json()["code"] == "not_found"

            url = f"/api/items/{items[0].item_id}/decision"
            body = {"action": "assign", "class_id": 1, "decided_by": "gate"}
            assert client.post(url, json=body).status_code == 200
            assert client.post(url, json=body).status_code == 409
            r = client.post(f"/api/items/{items[1].item_id}/decision",
                            json={"action": "create_new", "name": "fresh",
                                  "decided_by": "gate"})
            assert r.status_code == 200
            assert len(client.get("/api/mcs").json()) == 4
            bad = client.post(f"/api/items/{items[2].item_id}/decision",
                              content=b"{oops", headers={"content-type":
                                                         "application/json"})
            assert bad.status_code == 400

            replayed = Catalog.replay(tmp_path / "cat")
            assert replayed.version == catalog.version
            assert [dataclasses.asdict(mc) for mc in replayed.mcs] == \
                [dataclasses.asdict(mc) for mc in catalog.mcs]
            assert {k: dataclasses.asdict(v) for k, v in replayed.items.items()} \
                == {k: dataclasses.asdict(v) for k, v in catalog.items.items()}

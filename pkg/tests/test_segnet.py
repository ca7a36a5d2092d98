import numpy as np
import pytest

import texgen
from mcforge import neuralnet as nn
from mcforge import segnet
from mcforge.imagecore import UNLABELED, LabelMask, Micrograph


class TestBuild:
    def test_output_shape_contract(self):
        cfg = segnet.SegNetConfig(input_size=64, downsample=8, class_count=3)
        net = segnet.build_segnet(cfg, seed=0)
        out, _ = nn.forward(net, np.zeros((2, 1, 64, 64), dtype=np.float32))
        assert out.shape == (2, 3, 64, 64)

    def test_parameter_budget(self):
        net = segnet.build_segnet(segnet.SegNetConfig(class_count=5), seed=0)
        assert net.num_params() <= 2e5

    def test_constant_input_constant_interior(self):
        cfg = segnet.SegNetConfig(input_size=128, downsample=8, class_count=2)
        net = segnet.build_segnet(cfg, seed=1)
        out, _ = nn.forward(net, np.full((1, 1, 128, 128), 30.0, dtype=np.float32))
        center = out[0, :, 56:72, 56:72]
        assert np.ptp(center.reshape(2, -1), axis=1).max() <= 1e-4

    def test_downsample_validation(self):
        with pytest.raises(ValueError):
            segnet.SegNetConfig(downsample=5)
        with pytest.raises(ValueError):
            segnet.SegNetConfig(input_size=60, downsample=8)

    def test_ds4_and_ds16_build(self):
        for ds in (4, 16):
            cfg = segnet.SegNetConfig(input_size=64, downsample=ds, class_count=2)
            net = segnet.build_segnet(cfg, seed=0)
            out, _ = nn.forward(net, np.zeros((1, 1, 64, 64), dtype=np.float32))
            assert out.shape == (1, 2, 64, 64)


class TestClassWeights:
    def test_frequencies_example(self):
        labels = np.zeros((10, 10), dtype=np.int32)
        labels[8:] = 1  # 80 / 20 split
        w = segnet.ClassWeights.from_masks([labels], 2)
        assert np.allclose(w.w, [0.625, 2.5])
        assert np.allclose(np.sqrt(w.w), [0.7905694, 1.5811388])

    def test_absent_class_rejected(self):
        labels = np.zeros((4, 4), dtype=np.int32)
        with pytest.raises(ValueError, match="absent"):
            segnet.ClassWeights.from_masks([labels], 2)

    def test_unlabeled_excluded_from_counts(self):
        labels = np.zeros((4, 4), dtype=np.int32)
        labels[0] = UNLABELED
        labels[1] = 1
        w = segnet.ClassWeights.from_masks([labels], 2)
        assert np.allclose(w.w, [12 / (2 * 8), 12 / (2 * 4)])


class TestBalancedCE:
    def test_uniform_two_class(self):
        scores = np.zeros((2, 1, 1))
        mask = np.zeros((1, 1), dtype=np.int32)
        w = segnet.ClassWeights(w=np.array([1.0, 1.0]))
        loss = segnet.balanced_ce_loss(scores, mask, w)
        assert loss == pytest.approx(0.6931472, abs=1e-6)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        k, h, wdt = 3, 6, 5
        scores = rng.normal(size=(k, h, wdt))
        labels = rng.integers(0, k, size=(h, wdt)).astype(np.int32)
        labels[0, 0] = UNLABELED
        weights = segnet.ClassWeights(w=np.array([0.5, 1.0, 2.0]))
        loss = segnet.balanced_ce_loss(scores, labels, weights)
        total, count = 0.0, 0
        for r in range(h):
            for c in range(wdt):
                y = labels[r, c]
                if y == UNLABELED:
                    continue
                e = np.exp(scores[:, r, c] - scores[:, r, c].max())
                p = e / e.sum()
                total += np.sqrt(weights.w[y]) * (-np.log(p[y]))
                count += 1
        assert loss == pytest.approx(total / count, rel=1e-12)

    def test_all_unlabeled_rejected(self):
        scores = np.zeros((2, 2, 2))
        mask = np.full((2, 2), UNLABELED, dtype=np.int32)
        with pytest.raises(ValueError, match="no labeled pixels"):
            segnet.balanced_ce_loss(scores, mask,
                                    segnet.ClassWeights(w=np.ones(2)))

    def test_label_out_of_range(self):
        scores = np.zeros((2, 2, 2))
        mask = np.full((2, 2), 3, dtype=np.int32)
        with pytest.raises(ValueError, match="class count"):
            segnet.balanced_ce_loss(scores, mask,
                                    segnet.ClassWeights(w=np.ones(2)))

    def test_gradient_matches_fd_through_segnet(self):
        cfg = segnet.SegNetConfig(input_size=16, downsample=4,
                                  aspp_rates=(1, 2), base_channels=4,
                                  class_count=3)
        net64 = segnet.build_segnet(cfg, seed=2)
        net = nn.Network(net64.layers, net64.input_shape, seed=2,
                         dtype=np.float64, class_count=3)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 1, 16, 16))
        masks = rng.integers(0, 3, size=(2, 16, 16)).astype(np.int32)
        masks[0, :2] = UNLABELED
        loss_fn = segnet.balanced_ce_loss_fn(
            segnet.ClassWeights(w=np.array([0.7, 1.0, 1.9])))
        err = nn.grad_check(net, loss_fn, x, masks, eps=1e-4, sample_frac=0.3)
        assert err <= 1e-4


def band_dataset(classes, n_items, size=32, seed=0):
    """Two-texture images split at a random position/orientation per item, so
    the network cannot learn absolute-position shortcuts."""
    images, masks = [], []
    rng = np.random.default_rng(seed)
    for i in range(n_items):
        order = rng.permutation(len(classes))
        edge = int(size * rng.uniform(0.3, 0.7))
        px = np.zeros((size, size))
        lab = np.zeros((size, size), dtype=np.int32)
        texs = [texgen.texture(classes[j], (size, size), seed=seed + 31 * i + j)
                for j in order]
        if rng.random() < 0.5:
            px[:, :edge], px[:, edge:] = texs[0][:, :edge], texs[1][:, edge:]
            lab[:, :edge], lab[:, edge:] = order[0], order[1]
        else:
            px[:edge, :], px[edge:, :] = texs[0][:edge, :], texs[1][edge:, :]
            lab[:edge, :], lab[edge:, :] = order[0], order[1]
        images.append(px)
        masks.append(lab)
    return segnet.SegDataset(images=np.array(images), masks=np.array(masks))


class TestTraining:
    def test_single_collage_overfit(self):
        data = band_dataset([2, 4], n_items=1, size=32, seed=5)
        cfg = segnet.SegNetConfig(input_size=32, downsample=4, base_channels=8,
                                  class_count=2)
        ckpt = segnet.train_segnet(data, cfg,
                                   segnet.SegTrainConfig(epochs=60, seed=0, lr=3e-3))
        assert ckpt.metrics[-1]["train_acc"] >= 0.99

    def test_two_class_generalization(self):
        train = band_dataset([2, 4], n_items=24, size=32, seed=6)
        val = band_dataset([2, 4], n_items=6, size=32, seed=999)
        cfg = segnet.SegNetConfig(input_size=32, downsample=4, base_channels=8,
                                  class_count=2)
        ckpt = segnet.train_segnet(train, cfg,
                                   segnet.SegTrainConfig(epochs=30, seed=1, lr=2e-3),
                                   val=val)
        assert ckpt.metrics[-1]["val_acc"] >= 0.9

    def test_missing_class_rejected(self):
        data = band_dataset([2, 4], n_items=2, size=32, seed=7)
        cfg = segnet.SegNetConfig(input_size=32, downsample=4, class_count=3)
        with pytest.raises(ValueError, match="absent"):
            segnet.train_segnet(data, cfg, segnet.SegTrainConfig(epochs=1))

    def test_checkpoint_roundtrip(self, tmp_path):
        data = band_dataset([2, 4], n_items=2, size=32, seed=8)
        cfg = segnet.SegNetConfig(input_size=32, downsample=4, base_channels=4,
                                  class_count=2)
        ckpt = segnet.train_segnet(data, cfg, segnet.SegTrainConfig(epochs=2, seed=2))
        path = tmp_path / "seg.ckpt"
        ckpt.save(path)
        back = segnet.SegCheckpoint.load(path)
        assert back.class_ids == ckpt.class_ids
        assert back.config == ckpt.config
        m = Micrograph(data.images[0])
        a, pa = segnet.segment(ckpt, m)
        b, pb = segnet.segment(back, m)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(pa, pb)


@pytest.fixture(scope="module")
def trained():
    train = band_dataset([2, 3], n_items=40, size=32, seed=10)
    cfg = segnet.SegNetConfig(input_size=32, downsample=4, base_channels=8,
                              class_count=2)
    return segnet.train_segnet(train, cfg,
                               segnet.SegTrainConfig(epochs=30, seed=3, lr=2e-3))


class TestSegment:
    def test_output_dims_match_input(self, trained):
        for shape in ((32, 32), (80, 70), (40, 30), (20, 20)):
            rng_img = texgen.texture(2, shape, seed=4)
            mask, prob = segnet.segment(trained, Micrograph(rng_img))
            assert mask.labels.shape == shape
            assert prob.shape == shape
            assert not (mask.labels == UNLABELED).any()

    def test_uniform_texture_single_label(self, trained):
        img = texgen.texture(3, (64, 64), seed=12)
        mask, _ = segnet.segment(trained, Micrograph(img))
        frac = (mask.labels == 1).mean()
        assert frac >= 0.95

    def test_probabilities_bounded(self, trained):
        img = texgen.texture(2, (48, 48), seed=13)
        _, prob = segnet.segment(trained, Micrograph(img))
        assert prob.min() >= 1.0 / 2 - 1e-6 and prob.max() <= 1.0 + 1e-6


class TestExpandClasses:
    def test_old_channels_bit_exact(self, trained):
        grown = segnet.expand_classes(trained, new_class_id=2, seed=9)
        x = (np.random.default_rng(14).normal(size=(2, 1, 32, 32))
             .astype(np.float32))
        before, _ = nn.forward(trained.net, x)
        after, _ = nn.forward(grown.net, x)
        assert np.array_equal(before, after[:, :2])
        assert grown.class_ids == [0, 1, 2]

    def test_expansion_deterministic(self, trained):
        a = segnet.expand_classes(trained, 2, seed=9)
        b = segnet.expand_classes(trained, 2, seed=9)
        for name in a.net.param_order:
            assert np.array_equal(a.net.params[name], b.net.params[name])

    def test_duplicate_class_rejected(self, trained):
        with pytest.raises(ValueError, match="already present"):
            segnet.expand_classes(trained, 1, seed=0)

    def test_zero_init_mode(self, trained):
        grown = segnet.expand_classes(trained, 2, seed=0, zero_init=True)
        assert np.all(grown.net.params["head.w"][2] == 0.0)

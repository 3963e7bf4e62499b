import numpy as np
import pytest

from eegraph.data import SyntheticSpec, generate_synthetic, points_dataset, slice_trials, split_points
from eegraph.gcn import (
    BatchNorm,
    FeatureExtractor,
    GcnClassifier,
    GcnConfig,
    GcnTrainConfig,
    extract_features,
    forward_classify,
    load_gcn_checkpoint,
    save_gcn_checkpoint,
    train_gcn,
)
from eegraph.tensor import Tensor, cross_entropy, finite_diff_check

TINY = GcnConfig(n_nodes=6, conv_channels=(1, 3, 4), cheb_order=3,
                 fc_hidden=(8,), dropout_rate=0.0)


def tiny_model(seed=0):
    return GcnClassifier(TINY, seed=seed)


class TestForward:
    def test_softmax_sums_to_one(self):
        model = tiny_model()
        rng = np.random.default_rng(0)
        probs = forward_classify(rng.standard_normal(6), model)
        assert probs.shape == (4,)
        assert abs(probs.sum() - 1.0) < 1e-9

    def test_zero_final_layer_gives_uniform(self):
        model = tiny_model()
        model.fc_w[-1].data[:] = 0.0
        model.fc_b[-1].data[:] = 0.0
        probs = forward_classify(np.random.default_rng(1).standard_normal(6), model)
        assert np.allclose(probs, 0.25, atol=1e-12)

    def test_rejects_nonfinite_input(self):
        model = tiny_model()
        x = np.zeros(6)
        x[2] = np.nan
        with pytest.raises(ValueError):
            forward_classify(x, model)

    def test_paper_config_shape(self):
        cfg = GcnConfig.paper()
        assert cfg.conv_channels == (1, 16, 32, 64, 128, 256, 512)
        assert cfg.cheb_order == 5
        assert cfg.fc_hidden == (1024, 2048)
        assert cfg.feature_dim == 512
        assert cfg.dropout_rate == 0.5


class TestBatchNorm:
    def test_eval_mode_is_affine_and_deterministic(self):
        bn = BatchNorm(3)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((10, 3))
        bn.forward(x, train=True)
        y1, _ = bn.forward(x, train=False)
        y2, _ = bn.forward(x, train=False)
        assert np.array_equal(y1, y2)
        # affine in the input: f(ax) - f(0) == a (f(x) - f(0)) per channel
        y0, _ = bn.forward(np.zeros_like(x), train=False)
        ya, _ = bn.forward(2.0 * x, train=False)
        assert np.allclose(ya - y0, 2.0 * (y1 - y0), atol=1e-9)

    def test_train_eval_only_differ_through_statistics(self):
        bn = BatchNorm(4, momentum=1.0)  # running stats = batch stats after one pass
        rng = np.random.default_rng(6)
        x = rng.standard_normal((50, 4))
        y_train, _ = bn.forward(x, train=True)
        y_eval, _ = bn.forward(x, train=False)
        assert np.allclose(y_train, y_eval, atol=1e-9)

    def test_running_var_nonnegative(self):
        bn = BatchNorm(2, momentum=0.3)
        rng = np.random.default_rng(7)
        for _ in range(10):
            bn.forward(rng.standard_normal((8, 2)), train=True)
        assert np.all(bn.running_var >= 0.0)

    def test_gradient(self):
        bn = BatchNorm(3)
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((7, 3)))
        w = rng.standard_normal((7, 3))

        def f():
            y, cache = bn.forward(x.data, train=True)
            x.add_grad(bn.backward(w, cache))
            return float((y * w).sum())

        assert finite_diff_check(f, [x, bn.gamma, bn.beta], h=1e-5) < 1e-4


class TestEndToEndGradient:
    def test_full_network_loss_gradient(self):
        model = tiny_model(seed=3)
        rng = np.random.default_rng(11)
        x = rng.standard_normal((5, 6))
        y = rng.integers(0, 4, size=5)

        def f():
            model.zero_grads()
            logits, cache = model.forward(x, train=True, rng=None, warn=False)
            loss, dlogits = cross_entropy(logits, y)
            model.backward(dlogits, cache)
            return loss

        params = model.parameters()
        err = finite_diff_check(f, params, h=1e-5, max_entries_per_param=6,
                                rng=np.random.default_rng(0))
        assert err < 1e-3


class TestPoolingInvariance:
    def test_node_permutation_leaves_pooled_feature_unchanged(self):
        cfg = GcnConfig(n_nodes=6, conv_channels=(1, 4, 5), cheb_order=3,
                        fc_hidden=(8,), dropout_rate=0.0)
        model = GcnClassifier(cfg, seed=4)
        rng = np.random.default_rng(12)
        model.mask.values.data *= rng.uniform(0.5, 1.5, (6, 6))
        np.fill_diagonal(model.mask.values.data, 0.0)
        x = rng.standard_normal((3, 6))

        feats = model.freeze().features(x)
        perm = rng.permutation(6)
        permuted = GcnClassifier(cfg, seed=4)
        permuted.mask.values.data = model.mask.values.data[np.ix_(perm, perm)]
        permuted.frozen_perm = None
        feats_p = permuted.freeze().features(x[:, perm])
        assert np.max(np.abs(feats - feats_p)) < 1e-9


class TestExtractor:
    def test_identical_inputs_identical_features(self):
        model = tiny_model()
        ext = model.freeze()
        x = np.random.default_rng(3).standard_normal(6)
        f1 = extract_features(x, ext)
        f2 = extract_features(x, ext)
        assert np.array_equal(f1, f2)

    def test_zero_input_finite(self):
        ext = tiny_model().freeze()
        f = extract_features(np.zeros(6), ext)
        assert np.all(np.isfinite(f))

    def test_feature_dimension_matches_config(self):
        ext = tiny_model().freeze()
        assert ext.feature_dim == TINY.feature_dim
        rng = np.random.default_rng(4)
        assert ext.features(rng.standard_normal((7, 6))).shape == (7, TINY.feature_dim)

    def test_requires_frozen_extractor(self):
        with pytest.raises(TypeError):
            extract_features(np.zeros(6), tiny_model())

    def test_extractor_isolated_from_later_training(self):
        model = tiny_model()
        ext = model.freeze()
        x = np.random.default_rng(5).standard_normal(6)
        before = extract_features(x, ext)
        model.convs[0].theta.data += 1.0
        assert np.array_equal(before, extract_features(x, ext))


class TestTraining:
    def _separable_points(self, n_per_class=40, seed=0):
        spec = SyntheticSpec(n_trials=8, n_channels=6, clear_fraction=1.0,
                             noise_sigma=0.1, seed=seed, sample_rate=40.0)
        data = generate_synthetic(spec)
        trials, labels = slice_trials(data.recording)
        x, y = points_dataset(trials, labels, spec.sample_rate)
        return x, y

    def test_overfits_eight_samples(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((8, 6))
        y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        model = tiny_model(seed=1)
        cfg = GcnTrainConfig(epochs=500, batch_size=8, lr=0.01, seed=0)
        result = train_gcn(model, x, y, x, y, cfg)
        model.load_state(result.best_state)
        assert model.accuracy(x, y) == 1.0

    def test_synthetic_separable_dataset(self):
        x, y = self._separable_points()
        train_idx, val_idx = split_points(len(x), 0.2, seed=0)
        model = tiny_model(seed=2)
        cfg = GcnTrainConfig(epochs=100, batch_size=64, lr=0.01, seed=0)
        result = train_gcn(model, x[train_idx], y[train_idx], x[val_idx], y[val_idx], cfg)
        assert result.best_val_accuracy > 0.95

    def test_empty_training_set_raises(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            train_gcn(model, np.empty((0, 6)), np.empty(0, dtype=int),
                      np.zeros((1, 6)), np.zeros(1, dtype=int),
                      GcnTrainConfig(epochs=1))

    def test_batch_size_above_dataset_is_single_batch(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((5, 6))
        y = rng.integers(0, 4, size=5)
        model = tiny_model(seed=5)
        cfg = GcnTrainConfig(epochs=2, batch_size=1024, lr=0.001, seed=0)
        result = train_gcn(model, x, y, x, y, cfg)
        assert len(result.loss_history) == 2

    def test_best_snapshot_by_validation(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((20, 6))
        y = rng.integers(0, 4, size=20)
        model = tiny_model(seed=6)
        cfg = GcnTrainConfig(epochs=5, batch_size=8, lr=0.005, seed=0)
        result = train_gcn(model, x, y, x, y, cfg)
        assert result.best_val_accuracy == max(result.val_accuracy_history)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = tiny_model(seed=7)
        model.mask.values.data[0, 1] = 0.0
        model.mask.frozen[0, 1] = True
        path = tmp_path / "gcn.npz"
        save_gcn_checkpoint(path, model, extra_meta={"val_accuracy": 0.5})
        loaded, meta = load_gcn_checkpoint(path)
        rng = np.random.default_rng(13)
        x = rng.standard_normal((4, 6))
        assert np.allclose(model.predict_proba(x), loaded.predict_proba(x))
        assert meta["density"] == pytest.approx(model.mask.density(model.base))
        assert "lambda_max" in meta
        assert loaded.mask.frozen[0, 1]

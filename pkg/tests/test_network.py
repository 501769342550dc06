import numpy as np
import pytest

from scenehier.data_model import AggregationMatrix, DataError, Hyperparameters, LabelHierarchy
from scenehier.hierarchy import build_aggregation_matrix
from scenehier.network import (
    CLASS_SPACE,
    SUBCLASS_SPACE,
    Conv2D,
    Dense,
    MaxPool2D,
    Model,
    NumericalAbort,
    ReLU,
    SGDState,
    add_hierarchy_head,
    backward_and_step,
    build_default_model,
    forward,
    hierarchical_loss,
    learning_rate,
    load_checkpoint,
    replace_head,
    save_checkpoint,
    softmax,
    softmax_ce,
)

from conftest import finite_difference, max_relative_error, tiny_model

# Frozen with an arbitrary-precision oracle (50-digit evaluation of
# -log(e^3 / (e^1 + e^2 + e^3))).
CE_123_LABEL2 = 0.40760596444438030448


from scenehier.data_model import IdentityProvenance, SceneNameProvenance


def three_class_hierarchy() -> LabelHierarchy:
    return LabelHierarchy(
        n_classes=3,
        parent=(0, 0, 1, 1, 1, 2),
        provenance=(
            SceneNameProvenance("p"),
            SceneNameProvenance("q"),
            SceneNameProvenance("p"),
            SceneNameProvenance("q"),
            SceneNameProvenance("r"),
            IdentityProvenance(),
        ),
        common_classes=frozenset({0, 1}),
        rare_classes=frozenset({2}),
    )


class TestForward:
    def test_zero_head_gives_zero_logits(self, rng):
        model = tiny_model()
        model.head.params["W"][:] = 0.0
        model.head.params["b"][:] = 0.0
        x = rng.random((4, 8, 8, 3))
        assert np.array_equal(forward(model, x), np.zeros((4, 3)))

    def test_identical_patches_give_identical_rows(self, rng):
        model = tiny_model()
        one = rng.random((1, 8, 8, 3))
        batch = np.repeat(one, 5, axis=0)
        logits = forward(model, batch)
        assert np.array_equal(logits, np.repeat(logits[:1], 5, axis=0))

    def test_doubling_head_weights_doubles_logits(self, rng):
        model = tiny_model()
        x = rng.random((3, 8, 8, 3))
        base = forward(model, x)
        model.head.params["W"] *= 2.0
        model.head.params["b"] *= 2.0
        assert np.allclose(forward(model, x), 2.0 * base)

    def test_shape_mismatch_rejected(self, rng):
        model = tiny_model()
        with pytest.raises(DataError, match="8x8"):
            forward(model, rng.random((2, 9, 9, 3)))

    def test_dense_feature_mismatch_names_layer(self, rng):
        layer = Dense(10, 4)
        with pytest.raises(DataError, match="dense layer expects 10"):
            layer.forward(rng.random((2, 11)))


class TestSoftmaxCE:
    def test_uniform_logits_give_log_n(self):
        for n in (2, 4, 7):
            assert abs(softmax_ce(np.zeros(n), 0) - np.log(n)) < 1e-12

    def test_large_gap_saturates_to_zero(self):
        logits = np.array([20.0, 0.0, 0.0])
        assert softmax_ce(logits, 0) < 1e-6

    def test_frozen_oracle_value(self):
        assert abs(softmax_ce(np.array([1.0, 2.0, 3.0]), 2) - CE_123_LABEL2) < 1e-12

    def test_softmax_rows_are_a_probability_simplex(self, rng):
        logits = rng.normal(scale=30.0, size=(20, 6))
        probs = softmax(logits)
        assert np.all(probs >= 0)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


class TestHierarchicalLoss:
    def test_uniform_case_is_sum_of_logs(self):
        h = LabelHierarchy(
            n_classes=2,
            parent=(0, 0, 1, 1),
            provenance=tuple(SceneNameProvenance(s) for s in ("a", "b", "a", "b")),
            common_classes=frozenset({0, 1}),
            rare_classes=frozenset(),
        )
        W = build_aggregation_matrix(h)
        p = np.zeros((3, 4))
        out, _, _ = hierarchical_loss(
            p, np.array([0, 1, 2]), np.array([0, 0, 1]), W, alpha=1.0, beta=0.0,
            theta_sq_sum=0.0,
        )
        assert abs(out.total - (np.log(4) + np.log(2))) < 1e-9
        assert out.total == out.subclass_ce + 1.0 * out.class_ce + out.decay

    def test_alpha_zero_beta_zero_reduces_to_subclass_ce(self, rng):
        W = build_aggregation_matrix(three_class_hierarchy())
        p = rng.normal(size=(5, 6))
        sub = rng.integers(0, 6, size=5)
        cls = np.array([W.W[:, s].argmax() for s in sub])
        out, _, _ = hierarchical_loss(p, sub, cls, W, 0.0, 0.0, 123.0)
        expected = np.mean([softmax_ce(p[i], sub[i]) for i in range(5)])
        assert abs(out.total - expected) < 1e-12

    def test_gradient_matches_central_differences(self, rng):
        W = build_aggregation_matrix(three_class_hierarchy())
        m, n = 4, 6
        p = rng.normal(size=(m, n))
        sub = rng.integers(0, n, size=m)
        cls = np.array([W.W[:, s].argmax() for s in sub])
        alpha, beta = 0.7, 0.0

        def loss():
            out, _, _ = hierarchical_loss(p, sub, cls, W, alpha, beta, 0.0)
            return out.total

        _, dp, _ = hierarchical_loss(p, sub, cls, W, alpha, beta, 0.0)
        numeric = finite_difference(loss, p, step=1e-4)
        assert max_relative_error(dp, numeric) < 1e-4

    def test_w_gradient_matches_central_differences(self, rng):
        Wm = build_aggregation_matrix(three_class_hierarchy()).W.copy()
        m, n = 3, 6
        p = rng.normal(size=(m, n))
        sub = rng.integers(0, n, size=m)
        cls = np.array([Wm[:, s].argmax() for s in sub])

        def loss():
            out, _, _ = hierarchical_loss(p, sub, cls, Wm, 1.0, 0.0, 0.0)
            return out.total

        _, _, dW = hierarchical_loss(p, sub, cls, Wm, 1.0, 0.0, 0.0)
        numeric = finite_difference(loss, Wm, step=1e-4)
        assert max_relative_error(dW, numeric) < 1e-4

    def test_inconsistent_parent_rejected(self):
        W = build_aggregation_matrix(three_class_hierarchy())
        p = np.zeros((1, 6))
        with pytest.raises(DataError, match="parent"):
            hierarchical_loss(p, np.array([0]), np.array([2]), W, 1.0, 0.0, 0.0)

    def test_class_distribution_is_simplex(self, rng):
        W = build_aggregation_matrix(three_class_hierarchy()).W
        p = rng.normal(size=(10, 6))
        q = softmax(p @ W.T)
        assert np.all(q >= 0) and np.allclose(q.sum(axis=1), 1.0, atol=1e-9)


class TestLayerGradients:
    """Central-difference checks for every layer kind."""

    def _check_layer(self, layer, x, rng):
        readout = rng.normal(size=layer.forward(x)[0].shape)

        def loss():
            y, _ = layer.forward(x)
            return float(np.sum(y * readout))

        y, cache = layer.forward(x)
        dx, grads = layer.backward(readout, cache)
        num_dx = finite_difference(loss, x, step=1e-4)
        assert max_relative_error(dx, num_dx) < 1e-4
        for name, g in grads.items():
            num = finite_difference(loss, layer.params[name], step=1e-4)
            assert max_relative_error(g, num) < 1e-4, name

    def test_conv_stride1(self, rng):
        layer = Conv2D(3, 2, 3, stride=1, rng=rng)
        self._check_layer(layer, rng.normal(size=(2, 6, 6, 2)), rng)

    def test_conv_stride2(self, rng):
        layer = Conv2D(3, 2, 2, stride=2, rng=rng)
        self._check_layer(layer, rng.normal(size=(2, 7, 7, 2)), rng)

    def test_dense(self, rng):
        layer = Dense(12, 5, rng=rng)
        self._check_layer(layer, rng.normal(size=(3, 12)), rng)

    def test_relu(self, rng):
        layer = ReLU()
        x = rng.normal(size=(2, 4, 4, 3))
        x[np.abs(x) < 1e-2] = 0.1  # keep clear of the kink
        self._check_layer(layer, x, rng)

    def test_maxpool(self, rng):
        layer = MaxPool2D(2)
        # Well-separated values so the argmax never flips under the probe.
        vals = rng.permutation(np.arange(2 * 6 * 6 * 2, dtype=np.float64)) * 0.1
        x = vals.reshape(2, 6, 6, 2)
        self._check_layer(layer, x, rng)


class TestTrainingStep:
    def test_learning_rate_schedule_values(self):
        hp = Hyperparameters()
        assert learning_rate(hp, 0) == 0.001
        assert learning_rate(hp, 19999) == 0.001
        assert abs(learning_rate(hp, 20000) - 0.0001) < 1e-18
        assert abs(learning_rate(hp, 40000) - 0.00001) < 1e-19

    def test_frozen_layers_bit_identical_after_steps(self, rng):
        model = tiny_model()
        for layer in model.layers[:-1]:
            layer.trainable = False
        before = model.parameter_snapshot()
        hp = Hyperparameters(patch_size=8, batch_size=4, lr0=0.1)
        state = SGDState()
        x = rng.random((4, 8, 8, 3))
        labels = rng.integers(0, 3, size=4)
        for _ in range(5):
            backward_and_step(model, x, labels, hp, state)
        after = model.parameter_snapshot()
        for b, a in zip(before[:-1], after[:-1]):
            for k in b:
                assert np.array_equal(b[k], a[k])
        assert not np.array_equal(before[-1]["W"], after[-1]["W"])

    def test_single_batch_overfit_drives_loss_down(self, rng):
        model = tiny_model(seed=3)
        hp = Hyperparameters(patch_size=8, batch_size=4, lr0=0.5, beta=0.0)
        state = SGDState()
        x = rng.random((4, 8, 8, 3))
        labels = np.array([0, 1, 2, 0])
        loss = None
        for _ in range(200):
            loss = backward_and_step(model, x, labels, hp, state).total
        assert loss < 0.1

    def test_training_is_deterministic(self, rng):
        x = rng.random((4, 8, 8, 3))
        labels = np.array([0, 1, 2, 1])
        hp = Hyperparameters(patch_size=8, batch_size=4, lr0=0.2)

        def run():
            model = tiny_model(seed=4)
            state = SGDState()
            for _ in range(20):
                backward_and_step(model, x, labels, hp, state)
            return model.parameter_snapshot()

        a, b = run(), run()
        for pa, pb in zip(a, b):
            for k in pa:
                assert np.array_equal(pa[k], pb[k])

    def test_non_finite_loss_aborts_with_iteration(self, rng):
        model = tiny_model()
        model.head.params["b"][:] = np.inf
        hp = Hyperparameters(patch_size=8, batch_size=2)
        state = SGDState()
        state.iteration = 17
        with pytest.raises(NumericalAbort, match="17"):
            backward_and_step(model, rng.random((2, 8, 8, 3)), np.array([0, 1]), hp, state)


class TestHeadSurgery:
    def test_replace_head_touches_nothing_else(self):
        model = tiny_model()
        before = model.parameter_snapshot()
        replace_head(model, 5, seed=42)
        after = model.parameter_snapshot()
        for b, a in zip(before[:-1], after[:-1]):
            for k in b:
                assert np.array_equal(b[k], a[k])
        assert model.n_outputs == 5

    def test_replace_head_is_deterministic(self):
        m1, m2 = tiny_model(), tiny_model()
        replace_head(m1, 7, seed=9)
        replace_head(m2, 7, seed=9)
        assert np.array_equal(m1.head.params["W"], m2.head.params["W"])

    def test_subclass_to_class_replacement(self):
        model = tiny_model(n_out=6)
        model.head_label_space = SUBCLASS_SPACE
        replace_head(model, 3, seed=1, label_space=CLASS_SPACE)
        assert model.n_outputs == 3
        assert model.head_label_space == CLASS_SPACE

    def test_small_head_rejected(self):
        with pytest.raises(DataError):
            replace_head(tiny_model(), 1, seed=0)


class TestHierarchyHead:
    def test_identity_matrix_gives_identical_scores(self, rng):
        model = tiny_model(n_out=3)
        add_hierarchy_head(model, AggregationMatrix(np.eye(3)))
        x = rng.random((2, 8, 8, 3))
        logits = forward(model, x)
        from scenehier.network import class_scores

        assert np.allclose(class_scores(model, logits), logits)

    def test_class_score_is_sum_of_children(self, rng):
        model = tiny_model(n_out=6)
        W = build_aggregation_matrix(three_class_hierarchy())
        add_hierarchy_head(model, W)
        x = rng.random((3, 8, 8, 3))
        logits = forward(model, x)
        from scenehier.network import class_scores

        scores = class_scores(model, logits)
        for i in range(3):
            for j in range(3):
                expected = sum(
                    logits[i, s] for s in range(6) if W.W[j, s] == 1.0
                )
                assert abs(scores[i, j] - expected) < 1e-12

    def test_unfrozen_w_changes_after_step(self, rng):
        model = tiny_model(n_out=6)
        W = build_aggregation_matrix(three_class_hierarchy())
        add_hierarchy_head(model, W)
        model.aggregation_trainable = True
        before = model.aggregation_W.copy()
        hp = Hyperparameters(patch_size=8, batch_size=3, lr0=0.5)
        sub = np.array([0, 2, 5])
        cls = np.array([0, 1, 2])
        backward_and_step(model, rng.random((3, 8, 8, 3)), (sub, cls), hp, SGDState(), hierarchical=True)
        assert not np.array_equal(model.aggregation_W, before)

    def test_frozen_w_untouched_by_steps(self, rng):
        model = tiny_model(n_out=6)
        W = build_aggregation_matrix(three_class_hierarchy())
        add_hierarchy_head(model, W)
        hp = Hyperparameters(patch_size=8, batch_size=3, lr0=0.5)
        sub = np.array([0, 2, 5])
        cls = np.array([0, 1, 2])
        for _ in range(3):
            backward_and_step(model, rng.random((3, 8, 8, 3)), (sub, cls), hp, SGDState(), hierarchical=True)
        assert np.array_equal(model.aggregation_W, W.W)

    def test_shape_mismatch_rejected(self):
        model = tiny_model(n_out=4)
        with pytest.raises(DataError, match="4"):
            add_hierarchy_head(model, AggregationMatrix(np.eye(3)))


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path, rng):
        model = build_default_model(32, 5, seed=21, conv_channels=(4, 8), fc_dim=16)
        model.train_steps = 12
        model.hierarchy_id = "abc123"
        add_hierarchy_head(model, AggregationMatrix(np.eye(5)))
        path = tmp_path / "model.bin"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.train_steps == 12
        assert loaded.hierarchy_id == "abc123"
        assert loaded.head_label_space == model.head_label_space
        assert loaded.input_size == 32
        for la, lb in zip(model.layers, loaded.layers):
            assert la.kind == lb.kind
            for k in la.params:
                assert np.array_equal(la.params[k], lb.params[k])
        assert np.array_equal(loaded.aggregation_W, model.aggregation_W)
        x = rng.random((2, 32, 32, 3))
        assert np.array_equal(forward(model, x), forward(loaded, x))

    def test_checkpoint_bytes_are_deterministic(self, tmp_path):
        model = tiny_model(seed=8)
        save_checkpoint(tmp_path / "a.bin", model)
        save_checkpoint(tmp_path / "b.bin", model)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(DataError):
            load_checkpoint(path)

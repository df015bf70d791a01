import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robust_saliency.data import synth_blobs
from robust_saliency.nn import (
    CHECKPOINT_MAGIC,
    TinyModel,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    forward,
    hessian_vector_product,
    init_model,
    input_gradient,
    load_model,
    predict,
    save_model,
    softplus,
    train,
)


def random_model(seed, sizes=(6, 12, 4), beta=1.0):
    model = init_model(sizes, seed=seed, beta=beta)
    rng = np.random.default_rng(seed + 100)
    return TinyModel(model.weights, [rng.standard_normal(b.shape) * 0.5 for b in model.biases], beta=beta)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class TestSoftplus:
    def test_at_zero(self):
        assert softplus(0.0) == pytest.approx(np.log(2.0))

    def test_sharpness(self):
        assert softplus(1.0, beta=2.0) == pytest.approx(np.log1p(np.exp(2.0)) / 2.0)

    def test_finite_over_wide_range(self):
        u = np.linspace(-1e4, 1e4, 100_001)
        for beta in (1.0, 20.0):
            out = softplus(u, beta)
            assert np.all(np.isfinite(out))
            assert np.all(out >= 0)

    def test_asymptotes(self):
        assert softplus(1000.0) == 1000.0
        assert softplus(-40.0) == pytest.approx(np.exp(-40.0))


class TestTinyModel:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            TinyModel([np.zeros((3, 4)), np.zeros((2, 2))], [np.zeros(3), np.zeros(2)])

    def test_finite_parameters(self):
        with pytest.raises(ValueError):
            TinyModel([np.full((2, 2), np.nan)], [np.zeros(2)])

    def test_sizes(self):
        model = init_model((64, 256, 128, 10))
        assert model.layer_sizes == [64, 256, 128, 10]
        assert (model.n_inputs, model.n_classes) == (64, 10)

    def test_zero_weights_give_biases(self):
        model = TinyModel([np.zeros((5, 3)), np.zeros((2, 5))], [np.ones(5), np.array([0.3, -0.7])])
        np.testing.assert_array_equal(forward(model, np.ones(3)), [0.3, -0.7])

    def test_single_linear_layer(self):
        w, b = np.array([[1.0, 2.0], [3.0, -1.0]]), np.array([0.5, 0.0])
        model = TinyModel([w], [b])
        x = np.array([0.2, -0.4])
        np.testing.assert_allclose(forward(model, x), w @ x + b)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward(init_model((4, 3, 2)), np.ones(5))

    def test_batch_matches_single(self):
        model = random_model(0)
        X = np.random.default_rng(0).standard_normal((7, 6))
        np.testing.assert_allclose(forward(model, X), np.stack([forward(model, x) for x in X]))
        assert list(predict(model, X)) == [predict(model, x) for x in X]


class TestInputGradient:
    def test_linear_model(self):
        w = np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]])
        model = TinyModel([w], [np.zeros(2)])
        np.testing.assert_array_equal(input_gradient(model, np.ones(3), 1), w[1])

    def test_bad_class(self):
        with pytest.raises(ValueError):
            input_gradient(init_model((4, 3, 2)), np.ones(4), 2)

    def test_finite_differences(self):
        h = 1e-5
        for seed in range(100):
            model = random_model(seed)
            rng = np.random.default_rng(seed)
            x = rng.standard_normal(6)
            c = int(rng.integers(4))
            eye = np.eye(6) * h
            fd = (forward(model, x + eye)[:, c] - forward(model, x - eye)[:, c]) / (2 * h)
            assert rel_err(input_gradient(model, x, c), fd) <= 1e-5

    def test_tied_duplicate_features(self):
        base = random_model(3, sizes=(3, 8, 2))
        w0 = np.hstack([base.weights[0], base.weights[0][:, :1]])  # feature 3 duplicates feature 0
        model = TinyModel([w0, base.weights[1]], base.biases)
        g = input_gradient(model, np.array([0.4, -0.2, 0.9, 0.4]), 0)
        assert g[0] == pytest.approx(g[3], rel=1e-14)


class TestHessianVectorProduct:
    def test_linear_model(self):
        model = TinyModel([np.array([[1.0, -2.0]])], [np.zeros(1)])
        np.testing.assert_array_equal(hessian_vector_product(model, np.ones(2), 0, np.ones(2)), 0.0)

    def test_quadratic_construction(self):
        """square(L x) summed by the output layer is x^T A x with A = L^T diag(u) L."""
        rng = np.random.default_rng(7)
        lower, u = rng.standard_normal((5, 4)), rng.standard_normal(5)
        model = TinyModel([lower, u[None, :]], [np.zeros(5), np.zeros(1)], activation="square")
        a = lower.T @ np.diag(u) @ lower
        x, v = rng.standard_normal(4), rng.standard_normal(4)
        np.testing.assert_allclose(hessian_vector_product(model, x, 0, v), 2 * a @ v, rtol=1e-12)
        np.testing.assert_allclose(input_gradient(model, x, 0), 2 * a @ x, rtol=1e-12)

    @pytest.mark.parametrize("beta", [1.0, 5.0])
    def test_against_gradient_differences(self, beta):
        h = 1e-4
        for seed in range(50):
            model = random_model(seed, beta=beta)
            rng = np.random.default_rng(seed)
            x, v = rng.standard_normal(6), rng.standard_normal(6)
            fd = (input_gradient(model, x + h * v, 1) - input_gradient(model, x - h * v, 1)) / (2 * h)
            assert rel_err(hessian_vector_product(model, x, 1, v), fd) <= 1e-3

    def test_fd_method_agrees(self):
        model = random_model(11)
        x, v = np.ones(6) * 0.3, np.linspace(-1, 1, 6)
        fwd = hessian_vector_product(model, x, 0, v)
        assert rel_err(hessian_vector_product(model, x, 0, v, method="fd"), fwd) <= 1e-3

    def test_symmetric(self):
        model = random_model(12)
        rng = np.random.default_rng(0)
        x, u, v = rng.standard_normal((3, 6))
        assert u @ hessian_vector_product(model, x, 2, v) == pytest.approx(
            v @ hessian_vector_product(model, x, 2, u), rel=1e-10)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            hessian_vector_product(random_model(0), np.ones(6), 0, np.ones(6), method="magic")


class TestTrain:
    def test_separable_blobs(self):
        data = synth_blobs(2, 100, 2, separation=10.0, seed=0)
        model, history = train(init_model((2, 16, 2), seed=0), data.inputs, data.labels,
                               TrainConfig(epochs=50, learning_rate=0.05))
        assert history.final_accuracy >= 0.99
        assert len(history.loss) == 50

    def test_zero_epochs(self):
        model = init_model((2, 4, 2), seed=1)
        trained, history = train(model, np.ones((3, 2)), np.zeros(3, dtype=int), TrainConfig(epochs=0))
        for a, b in zip(model.weights, trained.weights):
            np.testing.assert_array_equal(a, b)
        assert history.final_accuracy is None

    def test_deterministic(self):
        data = synth_blobs(3, 30, 4, separation=3.0, seed=2)
        runs = [train(init_model((4, 8, 3), seed=5), data.inputs, data.labels, TrainConfig(epochs=3, seed=9))[0]
                for _ in range(2)]
        for a, b in zip(runs[0].weights, runs[1].weights):
            np.testing.assert_array_equal(a, b)

    def test_does_not_mutate_input(self):
        model = init_model((2, 4, 2), seed=1)
        before = [w.copy() for w in model.weights]
        data = synth_blobs(2, 10, 2, separation=4.0)
        train(model, data.inputs, data.labels, TrainConfig(epochs=2))
        for a, b in zip(before, model.weights):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        data = synth_blobs(2, 50, 2, separation=10.0, seed=0)
        with pytest.raises(TrainingDiverged, match="epoch"):
            train(init_model((2, 16, 2)), data.inputs * 1e3, data.labels,
                  TrainConfig(epochs=20, learning_rate=1e6, momentum=0.99))

    def test_digits(self, digits, digits_model):
        _, test_set = digits
        assert accuracy(digits_model, test_set.inputs, test_set.labels) >= 0.95

    @pytest.mark.parametrize("kwargs", [dict(learning_rate=0.0), dict(epochs=-1), dict(batch_size=0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = random_model(4, beta=3.0)
        path = tmp_path / "m.tmdl"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.beta == 3.0 and loaded.activation == "softplus"
        for a, b in zip(model.weights + model.biases, loaded.weights + loaded.biases):
            np.testing.assert_array_equal(a, b)

    def test_layout(self, tmp_path):
        model = TinyModel([np.arange(6.0).reshape(2, 3)], [np.array([7.0, 8.0])])
        path = tmp_path / "m.tmdl"
        save_model(model, path)
        data = path.read_bytes()
        assert data[:8] == CHECKPOINT_MAGIC
        assert int.from_bytes(data[8:12], "little") == 1
        assert data[12:13] == b"<"
        hlen = int.from_bytes(data[13:17], "little")
        payload = np.frombuffer(data[17 + hlen:], "<f8")
        np.testing.assert_array_equal(payload, [0, 1, 2, 3, 4, 5, 7, 8])

    def test_bytes_are_stable(self, tmp_path):
        model = random_model(8)
        save_model(model, tmp_path / "a")
        save_model(load_model(tmp_path / "a"), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"NOTAMODEL" + bytes(20))
        with pytest.raises(ValueError, match="offset 0"):
            load_model(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m"
        save_model(random_model(1), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValueError, match="offset"):
            load_model(path)


@given(st.floats(-1e4, 1e4), st.floats(0.1, 50.0))
def test_softplus_property(u, beta):
    out = softplus(u, beta)
    assert np.isfinite(out) and out >= max(u, 0.0) - 1e-12

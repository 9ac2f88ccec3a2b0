"""
Tests for the numpy U-Net, its gradients and the Adam optimiser
"""

import numpy as np
import pytest

from src.exceptions import ConfigurationError, ErrorCode, ShapeError, TrainingError
from src.tensor_nn import (
    AdamState, ModelWeights, Node, conv2d, sigmoid, SegmentationDataset, UNet, UNetConfig,
    adam_step, backward, bce_loss, bce_value, conv2d_forward, evaluate_loss,
    init_weights, train_epoch, unet_forward, unet_graph
)
from src.utils import make_rng


def _naive_conv(x, kernel, bias):
    """Direct same-padded cross-correlation used as an oracle"""
    n, c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    pad = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, c_out, h, w))
    for b in range(n):
        for o in range(c_out):
            for i in range(h):
                for j in range(w):
                    out[b, o, i, j] = np.sum(padded[b, :, i:i + k, j:j + k] * kernel[o]) + bias[o]
    return out


class TestUNetConfig:
    """Test UNetConfig validation and parameter layout"""

    def test_defaults(self):
        """Test default architecture"""
        config = UNetConfig()
        assert config.input_size == 64
        assert config.levels == 3
        assert config.base_channels == 8
        assert config.validate() is True

    def test_input_size_must_divide(self):
        """Test input size divisibility by 2^levels"""
        with pytest.raises(ConfigurationError) as exc_info:
            UNetConfig(input_size=60, levels=3)
        assert exc_info.value.error_code == ErrorCode.INVALID_CONFIG

    def test_invalid_levels(self):
        """Test zero levels is rejected"""
        with pytest.raises(ConfigurationError):
            UNetConfig(levels=0)

    def test_parameter_names_sorted_and_shapes(self):
        """Test canonical parameter order and head shape"""
        config = UNetConfig(input_size=8, levels=1, base_channels=2)
        weights = init_weights(config, make_rng(0, "init"))
        assert list(weights) == sorted(weights)
        assert weights["head.weight"].shape == (1, 2, 1, 1)
        assert weights["enc1.conv1.weight"].shape == (4, 2, 3, 3)


class TestInitWeights:
    """Test seeded initialisation"""

    def test_same_stream_same_weights(self):
        """Test identical streams give bit-identical weights"""
        config = UNetConfig(input_size=16, levels=2, base_channels=2)
        a = init_weights(config, make_rng(3, "init", "breast"))
        b = init_weights(config, make_rng(3, "init", "breast"))
        assert a.bit_equal(b)

    def test_different_streams_differ(self):
        """Test named streams are independent"""
        config = UNetConfig(input_size=16, levels=2, base_channels=2)
        a = init_weights(config, make_rng(3, "init", "breast"))
        b = init_weights(config, make_rng(3, "init", "dense"))
        assert not a.bit_equal(b)

    def test_biases_zero_and_kernels_bounded(self):
        """Test Kaiming-uniform bounds and zero biases"""
        config = UNetConfig(input_size=8, levels=1, base_channels=2)
        weights = init_weights(config, make_rng(1, "init"))
        for name, array in weights.items():
            assert array.dtype == np.float32
            if name.endswith(".bias"):
                assert not array.any()
            else:
                fan_in = array.shape[1] * array.shape[2] * array.shape[3]
                assert np.abs(array).max() <= np.sqrt(6.0 / fan_in) + 1e-6

    def test_weights_are_read_only(self):
        """Test ModelWeights freezes its arrays"""
        config = UNetConfig(input_size=8, levels=1, base_channels=2)
        weights = init_weights(config, make_rng(1, "init"))
        with pytest.raises(ValueError):
            weights["head.bias"][0] = 1.0


class TestConv2d:
    """Test the im2col convolution kernel"""

    def test_matches_naive_convolution(self):
        """Test against a direct loop implementation"""
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 5, 6))
        kernel = rng.normal(size=(4, 3, 3, 3))
        bias = rng.normal(size=4)
        np.testing.assert_allclose(conv2d_forward(x, kernel, bias), _naive_conv(x, kernel, bias), atol=1e-12)

    def test_centre_tap_identity(self):
        """Test a centre-tap kernel reproduces its input"""
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d_forward(x, kernel, np.zeros(1)), x)

    def test_channel_mismatch(self):
        """Test kernel/input channel mismatch raises ShapeError"""
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


class TestLoss:
    """Test binary cross-entropy"""

    def test_perfect_prediction_is_clamped(self):
        """Test exact 0/1 predictions give a finite, tiny loss"""
        target = np.array([[[[0.0, 1.0]]]])
        value = float(bce_value(target.copy(), target))
        assert np.isfinite(value)
        assert value == pytest.approx(-np.log(1 - 1e-7), rel=1e-6)

    def test_half_prediction(self):
        """Test p = 0.5 gives ln 2"""
        pred = np.full((1, 1, 2, 2), 0.5)
        target = np.array([[[[0.0, 1.0], [1.0, 0.0]]]])
        assert float(bce_value(pred, target)) == pytest.approx(np.log(2.0))

    def test_shape_mismatch(self):
        """Test mismatched shapes are rejected"""
        with pytest.raises(ShapeError):
            bce_value(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


class TestUNetForward:
    """Test the forward pass"""

    def setup_method(self):
        self.config = UNetConfig(input_size=16, levels=2, base_channels=2)
        self.weights = init_weights(self.config, make_rng(5, "init"))

    def test_output_shape_and_range(self):
        """Test probabilities have the input's spatial shape and lie in (0, 1)"""
        batch = np.random.default_rng(0).random((3, 1, 16, 16)).astype(np.float32)
        out = unet_forward(self.config, self.weights, batch)
        assert out.shape == (3, 1, 16, 16)
        assert out.min() > 0.0 and out.max() < 1.0

    def test_samples_do_not_interact(self):
        """Test batching does not change per-sample predictions"""
        batch = np.random.default_rng(1).random((2, 1, 16, 16)).astype(np.float32)
        together = unet_forward(self.config, self.weights, batch)
        alone = unet_forward(self.config, self.weights, batch[1:])
        np.testing.assert_allclose(together[1:], alone, rtol=1e-5, atol=1e-6)

    def test_wrong_input_size(self):
        """Test a batch of the wrong spatial size is rejected"""
        with pytest.raises(ShapeError):
            unet_forward(self.config, self.weights, np.zeros((1, 1, 8, 8), dtype=np.float32))

    def test_unet_predictor_interface(self):
        """Test UNet exposes input_size and predict_proba"""
        model = UNet(self.config, self.weights)
        assert model.input_size == 16
        out = model.predict_proba(np.zeros((1, 1, 16, 16), dtype=np.float32))
        assert out.shape == (1, 1, 16, 16)

    def test_zero_weights_give_one_half(self):
        """Test all-zero kernels and biases predict exactly 0.5 everywhere"""
        zeros = ModelWeights({name: np.zeros_like(array) for name, array in self.weights.items()})
        batch = np.random.default_rng(2).random((2, 1, 16, 16)).astype(np.float32)
        out = unet_forward(self.config, zeros, batch)
        assert np.all(out == 0.5)

    def test_saturated_output_stays_open(self):
        """Test a saturating head bias still yields probabilities strictly inside (0, 1)"""
        batch = np.zeros((1, 1, 16, 16), dtype=np.float32)
        for bias in (200.0, -200.0):
            arrays = {name: np.zeros_like(array) for name, array in self.weights.items()}
            arrays["head.bias"] = np.full_like(arrays["head.bias"], bias)
            out = unet_forward(self.config, ModelWeights(arrays), batch)
            assert out.min() > 0.0 and out.max() < 1.0


class TestGradients:
    """Finite-difference check of every parameter gradient"""

    def _loss(self, config, weights, batch, target):
        return float(bce_loss(unet_graph(config, weights, batch), target).value)

    def _numeric(self, config, weights, batch, target, name, index, h):
        plus = {k: np.array(v) for k, v in weights.items()}
        minus = {k: np.array(v) for k, v in weights.items()}
        plus[name][index] += h
        minus[name][index] -= h
        return (self._loss(config, ModelWeights(plus), batch, target)
                - self._loss(config, ModelWeights(minus), batch, target)) / (2 * h)

    def test_analytic_matches_central_differences(self):
        """Test max relative error < 1e-4 on an 8x8, levels=1, base=2 net in float64"""
        config = UNetConfig(input_size=8, levels=1, base_channels=2)
        weights = init_weights(config, make_rng(11, "gradcheck"), dtype=np.float64)
        data_rng = np.random.default_rng(11)
        batch = data_rng.random((2, 1, 8, 8))
        target = (data_rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64)

        grads = backward(bce_loss(unet_graph(config, weights, batch), target))
        assert sorted(grads) == sorted(weights)

        worst = 0.0
        for name, array in weights.items():
            assert grads[name].shape == array.shape
            for index in np.ndindex(*array.shape):
                analytic = float(grads[name][index])
                numeric = self._numeric(config, weights, batch, target, name, index, 1e-5)
                error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
                if error >= 1e-4:
                    # a ReLU kink or pooling switch inside the step; a tenth of it avoids the kink
                    numeric = self._numeric(config, weights, batch, target, name, index, 1e-6)
                    error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
                worst = max(worst, error)
        assert worst < 1e-4

    def test_leaf_without_name_gets_no_gradient(self):
        """Test only named parameter nodes are reported"""
        x = Node(np.ones((1, 1, 2, 2)))
        k = Node(np.ones((1, 1, 1, 1)), name="k")
        b = Node(np.zeros(1), name="b")
        loss = bce_loss(sigmoid(conv2d(x, k, b)), np.ones((1, 1, 2, 2)))
        grads = backward(loss)
        assert set(grads) == {"k", "b"}

    def test_non_finite_weights_raise(self):
        """Test NaN weights surface as TrainingError"""
        weights = ModelWeights({"w": np.array([1.0, np.nan])})
        with pytest.raises(TrainingError) as exc_info:
            weights.check_finite()
        assert exc_info.value.error_code == ErrorCode.NON_FINITE_VALUE


class TestAdam:
    """Test the Adam update"""

    def test_first_step_moves_by_learning_rate(self):
        """Test bias-corrected first step has magnitude lr per element"""
        weights = ModelWeights({"w": np.array([1.0, -2.0])})
        state = AdamState.for_weights(weights, learning_rate=0.1, weight_decay=0.0)
        new_weights, new_state = adam_step(state, weights, {"w": np.array([0.5, -3.0])})
        np.testing.assert_allclose(new_weights["w"], [0.9, -1.9], atol=1e-6)
        assert new_state.step_count == 1
        assert state.step_count == 0

    def test_zero_learning_rate_is_identity(self):
        """Test lr = 0 leaves weights bit-identical"""
        weights = ModelWeights({"w": np.array([0.25, -0.5], dtype=np.float32)})
        state = AdamState.for_weights(weights, learning_rate=0.0, weight_decay=1e-4)
        new_weights, _ = adam_step(state, weights, {"w": np.array([1.0, 1.0], dtype=np.float32)})
        assert new_weights.bit_equal(weights)

    def test_weight_decay_is_coupled(self):
        """Test decay enters the gradient: zero gradient still moves weights"""
        weights = ModelWeights({"w": np.array([1.0])})
        state = AdamState.for_weights(weights, learning_rate=0.01, weight_decay=0.1)
        new_weights, _ = adam_step(state, weights, {"w": np.array([0.0])})
        assert new_weights["w"][0] == pytest.approx(0.99, abs=1e-6)

    def test_gradient_names_must_match(self):
        """Test missing gradients are rejected"""
        weights = ModelWeights({"w": np.array([1.0])})
        with pytest.raises(ShapeError):
            adam_step(AdamState.for_weights(weights), weights, {"v": np.array([1.0])})

    def test_three_steps_on_quadratic_match_hand_trace(self):
        """Test three updates on f(w) = (w - 3)^2 / 2 against a scalar trace"""
        lr, wd, beta1, beta2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
        weights = ModelWeights({"w": np.array([0.0])})
        state = AdamState.for_weights(weights, learning_rate=lr, weight_decay=wd)

        w, m, v = 0.0, 0.0, 0.0
        for step in (1, 2, 3):
            weights, state = adam_step(state, weights, {"w": weights["w"] - 3.0})
            g = (w - 3.0) + wd * w
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            m_hat = m / (1 - beta1 ** step)
            v_hat = v / (1 - beta2 ** step)
            w = w - lr * m_hat / (v_hat ** 0.5 + eps)
            assert abs(float(weights["w"][0]) - w) <= 1e-12
        assert state.step_count == 3
        assert 0.0 < w < 3.0


class TestTraining:
    """Test epoch training and evaluation loss"""

    def setup_method(self):
        self.config = UNetConfig(input_size=8, levels=1, base_channels=2)
        rng = np.random.default_rng(2)
        inputs = rng.random((6, 1, 8, 8)).astype(np.float32)
        targets = (inputs > 0.5).astype(np.float32)
        self.data = SegmentationDataset(inputs, targets, [f"s{i}" for i in range(6)])

    def test_loss_decreases(self):
        """Test a few epochs reduce the training loss"""
        model = UNet.initialise(self.config, make_rng(0, "init"))
        state = AdamState.for_weights(model.weights, learning_rate=1e-2, weight_decay=0.0)
        rng = make_rng(0, "train")
        before = evaluate_loss(model, self.data)
        for _ in range(15):
            model, state, _ = train_epoch(model, self.data, state, rng, batch_size=3, augment=False)
        assert evaluate_loss(model, self.data) < before

    def test_deterministic_under_same_streams(self):
        """Test identical seeds give bit-identical weights"""
        results = []
        for _ in range(2):
            model = UNet.initialise(self.config, make_rng(4, "init"))
            state = AdamState.for_weights(model.weights)
            model, state, loss = train_epoch(model, self.data, state, make_rng(4, "train"), batch_size=4)
            results.append((model.weights, loss))
        assert results[0][0].bit_equal(results[1][0])
        assert results[0][1] == results[1][1]

    def test_empty_partition(self):
        """Test training on nothing raises EMPTY_PARTITION"""
        empty = self.data.subset([])
        model = UNet.initialise(self.config, make_rng(0, "init"))
        with pytest.raises(TrainingError) as exc_info:
            train_epoch(model, empty, AdamState.for_weights(model.weights), make_rng(0, "train"))
        assert exc_info.value.error_code == ErrorCode.EMPTY_PARTITION

    def test_dataset_shape_mismatch(self):
        """Test inputs and targets must agree"""
        with pytest.raises(ShapeError):
            SegmentationDataset(np.zeros((2, 1, 8, 8)), np.zeros((3, 1, 8, 8)))

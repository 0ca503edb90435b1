import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tt_fusion_workflow.exceptions import InvalidArgumentError
from tt_fusion_workflow.layers import (LSTM, BatchNorm, Conv1D, Conv2D, ConvBlock, Dense, Dropout,
                                       GlobalAveragePool, Layer, ReLU, ResidualBlock, Sequential,
                                       TTLinear, dropout, weighted_softmax_xent,
                                       weighted_softmax_xent_batch)
from tt_fusion_workflow.tensor_train import TTLayerSpec, tt_forward


def naive_conv2d(x, weight, bias, stride, padding):
    k = weight.shape[0]
    batch, height, width, _ = x.shape
    if padding == 'same':
        outs = [math.ceil(s / stride) for s in (height, width)]
        pads = [max((o - 1) * stride + k - s, 0) for o, s in zip(outs, (height, width))]
        x = np.pad(x, [(0, 0), (pads[0] // 2, pads[0] - pads[0] // 2),
                       (pads[1] // 2, pads[1] - pads[1] // 2), (0, 0)])
    else:
        outs = [(s - k) // stride + 1 for s in (height, width)]
    out = np.zeros((batch, outs[0], outs[1], weight.shape[-1]))
    for b in range(batch):
        for i in range(outs[0]):
            for j in range(outs[1]):
                for di in range(k):
                    for dj in range(k):
                        out[b, i, j] += x[b, i * stride + di, j * stride + dj] @ weight[di, dj]
    return out + bias


def naive_conv1d(x, weight, bias, stride):
    k = weight.shape[0]
    steps = (x.shape[1] - k) // stride + 1
    out = np.zeros((x.shape[0], steps, weight.shape[-1]))
    for b in range(x.shape[0]):
        for i in range(steps):
            for d in range(k):
                out[b, i] += x[b, i * stride + d] @ weight[d]
    return out + bias


class TestLayerBase:

    def test_named_params_are_dotted(self, rng):
        model = Sequential(Dense(2, 3, rng), ReLU(), Dense(3, 1, rng))
        names = [name for name, _, _ in model.named_params()]
        assert names == ['0.weight', '0.bias', '2.weight', '2.bias']
        assert model.param_count() == 2 * 3 + 3 + 3 + 1

    def test_duplicate_names(self, rng):
        layer = Layer()
        layer.add_param('w', np.zeros(2))
        with pytest.raises(InvalidArgumentError):
            layer.add_param('w', np.zeros(2))

    def test_zero_grad(self, rng):
        layer = Dense(2, 2, rng)
        layer.forward(np.ones((1, 2)))
        layer.backward(np.ones((1, 2)))
        assert np.any(layer.grads['weight'] != 0)
        layer.zero_grad()
        assert not np.any(layer.grads['weight'])


class TestDense:

    def test_forward(self, rng):
        layer = Dense(3, 2, rng)
        x = rng.normal(size=(4, 3))
        assert_allclose(layer.forward(x), x @ layer.params['weight'].T)

    def test_hand_computed(self, rng):
        layer = Dense(2, 2, rng)
        layer.params['weight'][...] = [[1.0, 2.0], [3.0, 4.0]]
        layer.params['bias'][...] = 1.0
        assert_array_equal(layer.forward(np.ones((1, 2))), [[4.0, 8.0]])

    def test_wrong_width(self, rng):
        with pytest.raises(InvalidArgumentError):
            Dense(3, 2, rng).forward(np.zeros((1, 4)))


class TestConvolution:

    @pytest.mark.parametrize('stride', [1, 2])
    @pytest.mark.parametrize('padding', ['same', 'valid'])
    def test_conv2d_matches_loops(self, rng, stride, padding):
        layer = Conv2D(2, 3, 3, rng, stride=stride, padding=padding)
        layer.params['weight'][...] = rng.integers(-3, 4, size=layer.params['weight'].shape)
        layer.params['bias'][...] = rng.integers(-3, 4, size=3)
        x = rng.integers(-5, 6, size=(2, 7, 6, 2)).astype(np.float64)
        expected = naive_conv2d(x, layer.params['weight'], layer.params['bias'], stride, padding)
        assert_array_equal(layer.forward(x), expected)

    @pytest.mark.parametrize('stride', [1, 2])
    def test_conv1d_matches_loops(self, rng, stride):
        layer = Conv1D(1, 2, 5, rng, stride=stride, padding='valid')
        layer.params['weight'][...] = rng.integers(-3, 4, size=layer.params['weight'].shape)
        x = rng.integers(-5, 6, size=(3, 11, 1)).astype(np.float64)
        expected = naive_conv1d(x, layer.params['weight'], layer.params['bias'], stride)
        assert_array_equal(layer.forward(x), expected)

    def test_conv2d_all_ones(self, rng):
        layer = Conv2D(1, 1, 3, rng, padding='valid')
        layer.params['weight'][...] = 1.0
        layer.params['bias'][...] = 0.0
        assert_array_equal(layer.forward(np.ones((1, 3, 3, 1))), [[[[9.0]]]])

    def test_conv1d_hand_computed(self, rng):
        layer = Conv1D(1, 1, 3, rng, padding='valid')
        layer.params['weight'][:, 0, 0] = [1.0, 2.0, 1.0]
        layer.params['bias'][...] = 0.0
        x = np.array([1.0, 0.0, 0.0, 1.0]).reshape(1, 4, 1)
        assert_array_equal(layer.forward(x), [[[1.0], [1.0]]])

    @pytest.mark.parametrize('size, stride, out', [(5, 2, 3), (8, 2, 4), (7, 1, 7), (1, 3, 1)])
    def test_same_padding_output_size(self, rng, size, stride, out):
        layer = Conv1D(1, 1, 3, rng, stride=stride)
        assert layer.forward(np.zeros((1, size, 1))).shape == (1, out, 1)

    def test_kernel_larger_than_input(self, rng):
        with pytest.raises(InvalidArgumentError):
            Conv2D(1, 1, 5, rng, padding='valid').forward(np.zeros((1, 3, 3, 1)))

    def test_channel_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            Conv2D(2, 1, 3, rng).forward(np.zeros((1, 4, 4, 3)))

    def test_bad_arguments(self, rng):
        with pytest.raises(InvalidArgumentError):
            Conv1D(1, 1, 3, rng, stride=0)
        with pytest.raises(InvalidArgumentError):
            Conv1D(1, 1, 3, rng, padding='full')


class TestBatchNorm:

    def test_train_normalizes_batch(self, rng):
        layer = BatchNorm(3)
        x = rng.normal(5.0, 3.0, size=(64, 3))
        y = layer.forward(x, train=True)
        assert_allclose(y.mean(axis=0), 0.0, atol=1e-10)
        assert_allclose(y.var(axis=0), 1.0, rtol=1e-3)

    def test_two_values(self):
        y = BatchNorm(1).forward(np.array([[1.0], [3.0]]), train=True)
        assert_allclose(y, [[-1.0], [1.0]], atol=1e-5)

    def test_running_statistics(self, rng):
        layer = BatchNorm(2, momentum=0.9)
        x = rng.normal(size=(16, 2))
        layer.forward(x, train=True)
        assert_allclose(layer.buffers['running_mean'], 0.1 * x.mean(axis=0))
        assert_allclose(layer.buffers['running_var'], 0.9 + 0.1 * x.var(axis=0))

    def test_inference_uses_running_statistics(self, rng):
        layer = BatchNorm(2)
        x = rng.normal(size=(4, 2))
        assert_allclose(layer.forward(x), x / math.sqrt(1.0 + 1e-5))

    def test_per_time_step_statistics(self, rng):
        layer = BatchNorm(2, reduce_axes=(0,), stat_shape=(3, 2))
        x = rng.normal(size=(8, 3, 2)) + np.arange(3)[None, :, None]
        y = layer.forward(x, train=True)
        assert_allclose(y.mean(axis=0), 0.0, atol=1e-10)
        assert layer.buffers['running_mean'].shape == (3, 2)

    def test_train_needs_two_samples(self):
        with pytest.raises(InvalidArgumentError):
            BatchNorm(2).forward(np.zeros((1, 2)), train=True)


class TestDropout:

    def test_inference_is_identity(self, rng):
        x = rng.normal(size=(4, 5))
        assert_array_equal(Dropout(0.5, rng).forward(x), x)

    def test_survivors_are_rescaled(self, rng):
        y = dropout(np.ones((200, 50)), 0.2, rng, train=True)
        assert set(np.unique(y)) <= {0.0, 1.25}
        assert abs(np.mean(y == 0.0) - 0.2) < 0.02

    def test_keep_rate_on_many_elements(self, rng):
        y = dropout(np.ones(10**6), 0.2, rng, train=True)
        assert abs(np.mean(y != 0.0) - 0.8) <= 0.005
        assert abs(y.mean() - 1.0) <= 0.01

    def test_zero_rate_is_identity(self, rng):
        x = rng.normal(size=(3, 4))
        assert_array_equal(Dropout(0.0, rng).forward(x, train=True), x)

    def test_backward_uses_same_mask(self, rng):
        layer = Dropout(0.5, rng)
        y = layer.forward(np.ones((10, 10)), train=True)
        assert_array_equal(layer.backward(np.ones((10, 10))), y)

    def test_invalid_rate(self, rng):
        with pytest.raises(InvalidArgumentError):
            Dropout(1.0, rng)


class TestResidualBlock:

    def test_zero_body_gives_relu_of_input(self, rng):
        block = ResidualBlock(2, 3, rng)
        for name, value, _ in block.named_params():
            if name.endswith('weight'):
                value[...] = 0.0
        x = rng.normal(size=(2, 4, 4, 2))
        assert_allclose(block.forward(x), np.maximum(x, 0.0))

    def test_channel_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            ResidualBlock(2, 3, rng).forward(np.zeros((1, 4, 4, 3)))


class TestConvBlock:

    def test_output_is_non_negative(self, rng):
        block = ConvBlock(Conv2D(3, 4, 3, rng, stride=2))
        y = block.forward(rng.normal(size=(2, 6, 6, 3)), train=True)
        assert y.shape == (2, 3, 3, 4)
        assert y.min() >= 0.0


def test_global_average_pool(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    layer = GlobalAveragePool()
    assert_allclose(layer.forward(x), x.mean(axis=(1, 2)))
    assert_allclose(layer.backward(np.ones((2, 5))), np.full(x.shape, 1 / 12))


class TestLSTM:

    def test_shapes(self, rng):
        x = rng.normal(size=(2, 5, 3))
        assert LSTM(3, 4, rng).forward(x).shape == (2, 4)
        assert LSTM(3, 4, rng, return_sequences=True).forward(x).shape == (2, 5, 4)

    def test_forget_gate_bias(self, rng):
        layer = LSTM(3, 4, rng)
        assert_array_equal(layer.params['bias'][4:8], 1.0)
        assert not np.any(layer.params['bias'][:4])

    def test_last_state_equals_sequence_end(self, rng):
        layer = LSTM(3, 4, rng, return_sequences=True)
        x = rng.normal(size=(2, 5, 3))
        seq = layer.forward(x)
        layer.return_sequences = False
        assert_allclose(layer.forward(x), seq[:, -1])

    def test_zero_weights_give_zero_state(self, rng):
        layer = LSTM(3, 4, rng)
        for value in layer.params.values():
            value[...] = 0.0
        assert_array_equal(layer.forward(rng.normal(size=(2, 5, 3))), 0.0)

    def test_single_step_by_hand(self, rng):
        layer = LSTM(1, 1, rng)
        layer.params['w_h'][...] = 0.0
        # gates: input open, forget closed, candidate tanh(x), output open
        layer.params['w_x'][...] = [[0.0, 0.0, 1.0, 0.0]]
        layer.params['bias'][...] = [50.0, -50.0, 0.0, 50.0]
        h = layer.forward(np.full((1, 1, 1), 0.5))
        assert_allclose(h, [[math.tanh(math.tanh(0.5))]], rtol=1e-12)

    def test_rejects_empty_sequence(self, rng):
        with pytest.raises(InvalidArgumentError):
            LSTM(3, 4, rng).forward(np.zeros((2, 0, 3)))


def test_tt_linear_matches_functional_forward(rng):
    spec = TTLayerSpec(input_modes=(2, 3), output_modes=(3, 2), ranks=(1, 2, 1), has_bias=True)
    layer = TTLinear(spec, rng)
    layer.params['bias'][...] = rng.normal(size=6)
    x = rng.normal(size=(4, 6))
    assert_allclose(layer.forward(x), tt_forward(spec, layer.cores, x))
    assert layer.param_count() == 2 * 3 * 2 + 2 * 2 * 3 + 6


class TestWeightedCrossEntropy:

    def test_uniform_logits(self):
        loss, grad = weighted_softmax_xent(np.zeros(4), 1, np.full(4, 0.5))
        assert loss == pytest.approx(0.5 * math.log(4))
        assert_allclose(grad, 0.5 * (np.full(4, 0.25) - np.eye(4)[1]))

    def test_uniform_three_classes(self):
        loss, _ = weighted_softmax_xent(np.zeros(3), 0, np.ones(3))
        assert loss == pytest.approx(math.log(3))

    def test_zero_target_weight(self, rng):
        loss, grad = weighted_softmax_xent(rng.normal(size=3), 1, np.array([1.0, 0.0, 1.0]))
        assert loss == 0.0
        assert_array_equal(grad, 0.0)

    @pytest.mark.parametrize('logits', [[1000.0, 0.0, -1000.0], [0.1, 0.2, 0.3, 0.4], [-5.0, 7.5]])
    def test_probabilities_sum_to_one(self, logits):
        loss, grad = weighted_softmax_xent(np.array(logits), 0, np.ones(len(logits)))
        # grad = softmax - onehot
        assert abs((grad.sum() + 1.0) - 1.0) <= 1e-12
        assert loss >= 0.0

    @pytest.mark.parametrize('bad', [-0.5, np.nan, np.inf])
    def test_rejects_bad_weights(self, bad):
        with pytest.raises(InvalidArgumentError):
            weighted_softmax_xent(np.zeros(3), 0, np.array([1.0, bad, 1.0]))

    def test_batch_is_mean_of_samples(self, rng):
        logits = rng.normal(size=(3, 5))
        targets = np.array([0, 4, 2])
        weights = rng.uniform(0.1, 1.0, size=5)
        loss, grad = weighted_softmax_xent_batch(logits, targets, weights)
        singles = [weighted_softmax_xent(logits[i], targets[i], weights) for i in range(3)]
        assert loss == pytest.approx(np.mean([s[0] for s in singles]))
        assert_allclose(grad, np.stack([s[1] for s in singles]) / 3)

    @pytest.mark.parametrize('target, weights', [(3, np.ones(3)), (0, np.ones(2)), (-1, np.ones(3))])
    def test_invalid_arguments(self, target, weights):
        with pytest.raises(InvalidArgumentError):
            weighted_softmax_xent(np.zeros(3), target, weights)

    def test_single_class(self):
        with pytest.raises(InvalidArgumentError):
            weighted_softmax_xent(np.zeros(1), 0, np.ones(1))

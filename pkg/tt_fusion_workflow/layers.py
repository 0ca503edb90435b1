"""Differentiable layers with hand-written backward passes.

Every layer keeps its trainable arrays in `params` and accumulates matching
gradients in `grads` during `backward`; non-trainable state (batch norm
running statistics) lives in `buffers`. Inputs carry a leading batch axis
and channels last.
"""
import math
from collections.abc import Iterator

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .exceptions import InvalidArgumentError
from .tensor_train import TTCores, TTLayerSpec, _sweep, _sweep_backward, init_tt_cores


class Layer:
    """Base class holding parameters, gradient buffers and child layers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, 'Layer'] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise InvalidArgumentError(f'duplicate parameter name {name!r}')
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])
        return self.params[name]

    def add_child(self, name: str, layer: 'Layer') -> 'Layer':
        if name in self.children:
            raise InvalidArgumentError(f'duplicate child name {name!r}')
        self.children[name] = layer
        return layer

    def named_params(self, prefix: str = '') -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        """Yield (dotted name, parameter, gradient) for this layer and all
        children, in insertion order."""

        for name, value in self.params.items():
            yield prefix + name, value, self.grads[name]
        for child_name, child in self.children.items():
            yield from child.named_params(f'{prefix}{child_name}.')

    def named_buffers(self, prefix: str = '') -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.buffers.items():
            yield prefix + name, value
        for child_name, child in self.children.items():
            yield from child.named_buffers(f'{prefix}{child_name}.')

    def sublayers(self) -> Iterator['Layer']:
        """This layer and every descendant, depth first."""

        yield self
        for child in self.children.values():
            yield from child.sublayers()

    def zero_grad(self):
        for _, _, grad in self.named_params():
            grad.fill(0.0)

    def param_count(self) -> int:
        return sum(value.size for _, value, _ in self.named_params())

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Sequential(Layer):
    """Chain of child layers applied in insertion order."""

    def __init__(self, *layers: Layer):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add_child(str(i), layer)

    def forward(self, x, train=False):
        for layer in self.children.values():
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(list(self.children.values())):
            grad = layer.backward(grad)
        return grad


class Dense(Layer):
    """y = x @ W.T + b with W of shape (out, in)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.add_param('weight', rng.normal(0.0, math.sqrt(2.0 / in_features),
                                            size=(out_features, in_features)))
        self.add_param('bias', np.zeros(out_features))

    def forward(self, x, train=False):
        weight = self.params['weight']
        if x.shape[-1] != weight.shape[1]:
            raise InvalidArgumentError(f'dense layer expects {weight.shape[1]} '
                                       f'features, got {x.shape[-1]}')
        self._x = x
        return x @ weight.T + self.params['bias']

    def backward(self, grad):
        self.grads['weight'] += grad.T @ self._x
        self.grads['bias'] += grad.sum(axis=0)
        return grad @ self.params['weight']


class ReLU(Layer):

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


class _Conv(Layer):
    """Cross-correlation over `ndim` spatial axes, channels last.

    The kernel is applied one spatial offset at a time: every offset is a
    strided view of the padded input multiplied into the output by a
    (C_in, C_out) matrix.
    """

    ndim = 0

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: str = 'same'):
        super().__init__()
        if stride < 1 or kernel_size < 1:
            raise InvalidArgumentError('kernel size and stride must be positive')
        if padding not in ('same', 'valid'):
            raise InvalidArgumentError(f'unknown padding mode {padding!r}')
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = kernel_size ** self.ndim * in_channels
        shape = (kernel_size,) * self.ndim + (in_channels, out_channels)
        self.add_param('weight', rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape))
        self.add_param('bias', np.zeros(out_channels))

    def _geometry(self, spatial: tuple[int, ...]) -> tuple[list[int], list[tuple[int, int]]]:
        k, s = self.kernel_size, self.stride
        outs, pads = [], []
        for size in spatial:
            if self.padding == 'same':
                out, lo, hi = _same_padding(size, k, s)
            else:
                out, lo, hi = (size - k) // s + 1, 0, 0
            if size + lo + hi < k:
                raise InvalidArgumentError(f'kernel of size {k} is larger than the '
                                           f'padded input of size {size + lo + hi}')
            outs.append(out)
            pads.append((lo, hi))
        return outs, pads

    def _window(self, offset: tuple[int, ...], outs: list[int]) -> tuple[slice, ...]:
        s = self.stride
        return (slice(None),) + tuple(slice(o, o + s * (n - 1) + 1, s)
                                      for o, n in zip(offset, outs))

    def forward(self, x, train=False):
        weight = self.params['weight']
        if x.ndim != self.ndim + 2 or x.shape[-1] != weight.shape[-2]:
            raise InvalidArgumentError(f'convolution expects input (B, spatial..., '
                                       f'{weight.shape[-2]}), got {x.shape}')
        outs, pads = self._geometry(x.shape[1:-1])
        xp = np.pad(x, [(0, 0)] + pads + [(0, 0)])
        out = np.zeros((x.shape[0], *outs, weight.shape[-1]))
        for offset in np.ndindex(*weight.shape[:self.ndim]):
            out += xp[self._window(offset, outs)] @ weight[offset]
        out += self.params['bias']
        self._cache = (x.shape, xp, outs, pads)
        return out

    def backward(self, grad):
        weight = self.params['weight']
        x_shape, xp, outs, pads = self._cache
        dxp = np.zeros_like(xp)
        axes = list(range(self.ndim + 1))
        for offset in np.ndindex(*weight.shape[:self.ndim]):
            window = self._window(offset, outs)
            self.grads['weight'][offset] += np.tensordot(xp[window], grad, axes=(axes, axes))
            dxp[window] += grad @ weight[offset].T
        self.grads['bias'] += grad.sum(axis=tuple(axes))
        crop = (slice(None),) + tuple(slice(lo, lo + n) for (lo, _), n
                                      in zip(pads, x_shape[1:-1]))
        return dxp[crop]


class Conv1D(_Conv):
    """1D convolution on (B, L, C) with kernel (k, C, C')."""

    ndim = 1


class Conv2D(_Conv):
    """2D convolution on (B, H, W, C) with kernel (k, k, C, C')."""

    ndim = 2


class BatchNorm(Layer):
    """Batch normalization over the last (feature) axis.

    Statistics are taken over `reduce_axes` (by default every axis but the
    last); for sequences (B, T, F) passing ``reduce_axes=(0,)`` normalizes
    every time step separately over the batch while scale and shift stay
    per feature.

    Running statistics follow an exponential average with `momentum` while
    training. In calibration mode they are instead the plain average of every
    batch seen since `reset_running_stats`.
    """

    def __init__(self, num_features: int, momentum: float = 0.99, eps: float = 1e-5,
                 reduce_axes: tuple[int, ...] | None = None,
                 stat_shape: tuple[int, ...] | None = None):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.reduce_axes = reduce_axes
        stat_shape = stat_shape or (num_features,)
        self.add_param('gamma', np.ones(num_features))
        self.add_param('beta', np.zeros(num_features))
        self.buffers['running_mean'] = np.zeros(stat_shape)
        self.buffers['running_var'] = np.ones(stat_shape)
        self.calibrating = False
        self._batches_seen = 0

    def reset_running_stats(self):
        self.buffers['running_mean'].fill(0.0)
        self.buffers['running_var'].fill(1.0)
        self._batches_seen = 0

    def _axes(self, x: np.ndarray) -> tuple[int, ...]:
        return self.reduce_axes if self.reduce_axes is not None else tuple(range(x.ndim - 1))

    def forward(self, x, train=False):
        if x.shape[-1] != self.params['gamma'].shape[0]:
            raise InvalidArgumentError(f'batch norm expects {self.params["gamma"].shape[0]} '
                                       f'features, got {x.shape[-1]}')
        axes = self._axes(x)
        if train:
            if x.shape[0] < 2:
                raise InvalidArgumentError('batch norm in train mode needs a batch of at least 2')
            mean = x.mean(axis=axes, keepdims=True)
            var = x.var(axis=axes, keepdims=True)
            if self.calibrating:
                self._batches_seen += 1
                m = 1.0 - 1.0 / self._batches_seen
            else:
                m = self.momentum
            self.buffers['running_mean'][...] = m * self.buffers['running_mean'] + \
                (1 - m) * mean.reshape(self.buffers['running_mean'].shape)
            self.buffers['running_var'][...] = m * self.buffers['running_var'] + \
                (1 - m) * var.reshape(self.buffers['running_var'].shape)
        else:
            mean = self.buffers['running_mean']
            var = self.buffers['running_var']
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        self._cache = (x_hat, inv_std, axes, train)
        return self.params['gamma'] * x_hat + self.params['beta']

    def backward(self, grad):
        x_hat, inv_std, axes, train = self._cache
        feature_axes = tuple(range(grad.ndim - 1))
        self.grads['gamma'] += (grad * x_hat).sum(axis=feature_axes)
        self.grads['beta'] += grad.sum(axis=feature_axes)
        g_hat = grad * self.params['gamma']
        if not train:
            return g_hat * inv_std
        n = math.prod(grad.shape[a] for a in axes)
        sum_g = g_hat.sum(axis=axes, keepdims=True)
        sum_gx = (g_hat * x_hat).sum(axis=axes, keepdims=True)
        return inv_std / n * (n * g_hat - sum_g - x_hat * sum_gx)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1 / (1 - rate) in training,
    inference is the identity."""

    def __init__(self, rate: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise InvalidArgumentError(f'dropout rate must be in [0, 1), got {rate}')
        self.rate = rate
        self.rng = rng

    def forward(self, x, train=False):
        self._scale = dropout_mask(x.shape, self.rate, self.rng) if train else None
        return x if self._scale is None else x * self._scale

    def backward(self, grad):
        return grad if self._scale is None else grad * self._scale


def dropout_mask(shape: tuple[int, ...], rate: float, rng: np.random.Generator) -> np.ndarray | None:
    """Return the multiplicative dropout mask for one training step, or None
    when the rate is zero."""

    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f'dropout rate must be in [0, 1), got {rate}')
    if rate == 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator, train: bool) -> np.ndarray:
    """Functional inverted dropout; the identity outside training."""

    mask = dropout_mask(x.shape, rate, rng) if train else None
    return x if mask is None else x * mask


class ConvBlock(Sequential):
    """Convolution followed by batch normalization and ReLU."""

    def __init__(self, conv: _Conv, momentum: float = 0.99, eps: float = 1e-5):
        out_channels = conv.params['bias'].shape[0]
        super().__init__(conv, BatchNorm(out_channels, momentum, eps), ReLU())


class ResidualBlock(Layer):
    """y = ReLU(x + F(x)) where F is two 2D conv + batch norm + ReLU stages
    with an identity skip connection."""

    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator,
                 momentum: float = 0.99, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.add_child('body', Sequential(
            ConvBlock(Conv2D(channels, channels, kernel_size, rng), momentum, eps),
            ConvBlock(Conv2D(channels, channels, kernel_size, rng), momentum, eps),
        ))
        self.add_child('act', ReLU())

    def forward(self, x, train=False):
        if x.shape[-1] != self.channels:
            raise InvalidArgumentError(f'residual block has {self.channels} channels, '
                                       f'input has {x.shape[-1]}')
        return self.children['act'].forward(x + self.children['body'].forward(x, train), train)

    def backward(self, grad):
        grad = self.children['act'].backward(grad)
        return grad + self.children['body'].backward(grad)


class GlobalAveragePool(Layer):
    """Mean over every axis between batch and channels."""

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=tuple(range(1, x.ndim - 1)))

    def backward(self, grad):
        spatial = self._shape[1:-1]
        expanded = grad.reshape((grad.shape[0],) + (1,) * len(spatial) + (grad.shape[-1],))
        return np.broadcast_to(expanded, self._shape) / math.prod(spatial)


class LSTM(Layer):
    """Single LSTM layer over (B, T, in) sequences.

    Gate order in the stacked weights is input, forget, cell, output. Returns
    the whole hidden sequence (B, T, H) or only the last state (B, H).
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator,
                 return_sequences: bool = False):
        super().__init__()
        self.hidden_size = hidden_size
        self.return_sequences = return_sequences
        h = hidden_size
        self.add_param('w_x', rng.normal(0.0, 1.0 / math.sqrt(input_size), size=(input_size, 4 * h)))
        self.add_param('w_h', rng.normal(0.0, 1.0 / math.sqrt(h), size=(h, 4 * h)))
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0
        self.add_param('bias', bias)

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[1] == 0:
            raise InvalidArgumentError(f'LSTM expects a non-empty (B, T, F) sequence, got {x.shape}')
        if x.shape[2] != self.params['w_x'].shape[0]:
            raise InvalidArgumentError(f'LSTM expects {self.params["w_x"].shape[0]} input '
                                       f'features, got {x.shape[2]}')
        batch, steps, _ = x.shape
        h_size = self.hidden_size
        w_x, w_h, bias = self.params['w_x'], self.params['w_h'], self.params['bias']

        h = np.zeros((batch, h_size))
        c = np.zeros((batch, h_size))
        hs = np.empty((batch, steps, h_size))
        self._steps = []
        for t in range(steps):
            z = x[:, t] @ w_x + h @ w_h + bias
            i = expit(z[:, :h_size])
            f = expit(z[:, h_size:2 * h_size])
            g = np.tanh(z[:, 2 * h_size:3 * h_size])
            o = expit(z[:, 3 * h_size:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tanh_c = np.tanh(c)
            h = o * tanh_c
            hs[:, t] = h
            self._steps.append((h_prev, c_prev, i, f, g, o, tanh_c))
        self._x = x
        return hs if self.return_sequences else h

    def backward(self, grad):
        x = self._x
        batch, steps, _ = x.shape
        w_x, w_h = self.params['w_x'], self.params['w_h']
        if self.return_sequences:
            dhs = grad
        else:
            dhs = np.zeros((batch, steps, self.hidden_size))
            dhs[:, -1] = grad

        dx = np.empty_like(x)
        dh_next = np.zeros((batch, self.hidden_size))
        dc_next = np.zeros((batch, self.hidden_size))
        for t in reversed(range(steps)):
            h_prev, c_prev, i, f, g, o, tanh_c = self._steps[t]
            dh = dhs[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tanh_c ** 2)
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g ** 2),
                dh * tanh_c * o * (1.0 - o),
            ], axis=1)
            self.grads['w_x'] += x[:, t].T @ dz
            self.grads['w_h'] += h_prev.T @ dz
            self.grads['bias'] += dz.sum(axis=0)
            dx[:, t] = dz @ w_x.T
            dh_next = dz @ w_h.T
            dc_next = dc * f
        return dx


class TTLinear(Layer):
    """Dense layer whose weight matrix is stored in Tensor-Train format."""

    def __init__(self, spec: TTLayerSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        cores = init_tt_cores(spec, rng)
        for k, core in enumerate(cores.cores):
            self.add_param(f'core_{k}', core)
        if spec.has_bias:
            self.add_param('bias', cores.bias)

    @property
    def cores(self) -> TTCores:
        return TTCores(cores=tuple(self.params[f'core_{k}'] for k in range(self.spec.d)),
                       bias=self.params.get('bias'))

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.spec.input_size:
            raise InvalidArgumentError(f'TT layer expects (B, {self.spec.input_size}), '
                                       f'got {x.shape}')
        y, self._saved = _sweep(self.spec, self.cores, x)
        if self.spec.has_bias:
            y = y + self.params['bias']
        return y

    def backward(self, grad):
        core_grads, grad_x = _sweep_backward(self.cores, self._saved, grad)
        for k, core_grad in enumerate(core_grads):
            self.grads[f'core_{k}'] += core_grad
        if self.spec.has_bias:
            self.grads['bias'] += grad.sum(axis=0)
        return grad_x


def weighted_softmax_xent(logits: np.ndarray, target: int,
                          class_weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Class-weighted softmax cross-entropy of a single sample.

    Returns the loss -w[target] * log softmax(logits)[target] and its
    gradient with respect to the logits.
    """

    logits = np.asarray(logits, dtype=np.float64)
    loss, grad = weighted_softmax_xent_batch(logits[None, :], np.array([target]), class_weights)
    return loss, grad[0]


def weighted_softmax_xent_batch(logits: np.ndarray, targets: np.ndarray,
                                class_weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of the class-weighted cross-entropy and its gradient."""

    batch, n = logits.shape
    class_weights = np.asarray(class_weights, dtype=np.float64)
    targets = np.asarray(targets)
    if n < 2 or class_weights.shape != (n,):
        raise InvalidArgumentError(f'need at least 2 classes and {n} class weights')
    if np.any(targets < 0) or np.any(targets >= n):
        raise InvalidArgumentError(f'target index out of range for {n} classes')
    if not np.all(np.isfinite(class_weights)) or np.any(class_weights < 0):
        raise InvalidArgumentError('class weights must be finite and non-negative')

    log_p = log_softmax(logits, axis=1)
    rows = np.arange(batch)
    w = class_weights[targets]
    loss = float(-(w * log_p[rows, targets]).sum() / batch)
    grad = softmax(logits, axis=1)
    grad[rows, targets] -= 1.0
    grad *= (w / batch)[:, None]
    return loss, grad

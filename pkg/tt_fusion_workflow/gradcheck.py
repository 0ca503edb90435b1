"""Central finite-difference checks of analytic gradients."""
import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .layers import (LSTM, BatchNorm, Conv1D, Conv2D, Dense, Layer, ResidualBlock,
                     TTLinear, weighted_softmax_xent)
from .tensor_train import TTLayerSpec

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    configs: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Largest per-coordinate |a - n| / max(|a| + |n|, floor).

    Below the floor the comparison is absolute.
    """

    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def numeric_gradient(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-5,
                     indices: np.ndarray | None = None) -> np.ndarray:
    """Central differences of `fn` with respect to the array `x`, which is
    perturbed in place and restored. Only `indices` (flat) are checked when
    given; other coordinates are left at zero."""

    grad = np.zeros_like(x, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_grad = grad.reshape(-1)
    for j in (range(x.size) if indices is None else indices):
        original = flat_x[j]
        flat_x[j] = original + eps
        f_plus = fn()
        flat_x[j] = original - eps
        f_minus = fn()
        flat_x[j] = original
        flat_grad[j] = (f_plus - f_minus) / (2 * eps)
    return grad


def grad_check(fn: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
               eps: float = 1e-5) -> float:
    """Compare an analytic gradient of `fn` at `x` against central
    differences.

    Parameters
    ----------
    fn : Callable[[np.ndarray], float]
        Scalar function.
    x : np.ndarray
        Point of evaluation (double precision).
    analytic : np.ndarray
        Analytic gradient of `fn` at `x`.
    eps : float, optional
        Finite-difference step, by default 1e-5.

    Returns
    -------
    float
        Maximum relative error over all coordinates.
    """

    x = np.array(x, dtype=np.float64)
    numeric = numeric_gradient(lambda: fn(x), x, eps)
    return relative_error(analytic, numeric)


def check_layer(layer: Layer, x: np.ndarray, rng: np.random.Generator, train: bool = True,
                eps: float = 1e-5) -> float:
    """Gradient-check `layer` on input `x` through the scalar
    sum(layer(x) * r) for a random projection r, covering the input and
    every parameter."""

    x = np.array(x, dtype=np.float64)
    out = layer.forward(x, train)
    projection = rng.normal(size=out.shape)

    layer.zero_grad()
    layer.forward(x, train)
    grad_x = layer.backward(projection)
    analytic = {name: grad.copy() for name, _, grad in layer.named_params()}

    def loss() -> float:
        return float(np.sum(layer.forward(x, train) * projection))

    errors = [relative_error(grad_x, numeric_gradient(loss, x, eps))]
    for name, param, _ in layer.named_params():
        errors.append(relative_error(analytic[name], numeric_gradient(loss, param, eps)))
    return max(errors)


def _dense_case(rng):
    n_in, n_out, batch = rng.integers(1, 6, size=3)
    return Dense(n_in, n_out, rng), rng.normal(size=(batch, n_in))


def _conv1d_case(rng):
    c_in, c_out = rng.integers(1, 4, size=2)
    kernel, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    length = int(rng.integers(kernel, 9))
    padding = ('same', 'valid')[int(rng.integers(2))]
    layer = Conv1D(c_in, c_out, kernel, rng, stride=stride, padding=padding)
    return layer, rng.normal(size=(2, length, c_in))


def _conv2d_case(rng):
    c_in, c_out = rng.integers(1, 4, size=2)
    kernel, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    size = int(rng.integers(kernel, 6))
    padding = ('same', 'valid')[int(rng.integers(2))]
    layer = Conv2D(c_in, c_out, kernel, rng, stride=stride, padding=padding)
    return layer, rng.normal(size=(2, size, size, c_in))


def _batchnorm_case(rng):
    features = int(rng.integers(1, 5))
    layer = BatchNorm(features)
    layer.params['gamma'][...] = rng.normal(1.0, 0.3, size=features)
    layer.params['beta'][...] = rng.normal(0.0, 0.3, size=features)
    return layer, rng.normal(size=(int(rng.integers(2, 6)), 3, features))


def _residual_case(rng):
    channels = int(rng.integers(1, 3))
    block = ResidualBlock(channels, 3, rng)
    # shift every normalized activation well away from the ReLU kink
    for name, value, _ in block.named_params():
        if name.endswith('gamma'):
            value[...] = rng.uniform(0.5, 1.5, size=value.shape)
        elif name.endswith('beta'):
            value[...] = rng.uniform(2.0, 3.0, size=value.shape)
    return block, rng.normal(size=(2, 4, 4, channels))


def _lstm_case(rng):
    n_in, hidden = rng.integers(1, 4, size=2)
    layer = LSTM(n_in, hidden, rng, return_sequences=bool(rng.integers(2)))
    return layer, rng.normal(size=(2, 5, n_in))


def _tt_case(rng):
    d = int(rng.integers(1, 4))
    ranks = (1,) + tuple(int(r) for r in rng.integers(1, 4, size=d - 1)) + (1,)
    spec = TTLayerSpec(input_modes=tuple(int(m) for m in rng.integers(1, 4, size=d)),
                       output_modes=tuple(int(n) for n in rng.integers(1, 4, size=d)),
                       ranks=ranks, has_bias=bool(rng.integers(2)))
    return TTLinear(spec, rng), rng.normal(size=(2, spec.input_size))


LAYER_CASES: dict[str, Callable[[np.random.Generator], tuple[Layer, np.ndarray]]] = {
    'dense': _dense_case,
    'conv1d': _conv1d_case,
    'conv2d': _conv2d_case,
    'batchnorm': _batchnorm_case,
    'residual_block': _residual_case,
    'lstm': _lstm_case,
    'tt_layer': _tt_case,
}


def check_xent(rng: np.random.Generator, eps: float = 1e-5) -> float:
    n = int(rng.integers(2, 9))
    logits = rng.normal(size=n)
    target = int(rng.integers(n))
    weights = rng.uniform(0.1, 1.0, size=n)
    _, analytic = weighted_softmax_xent(logits, target, weights)
    return grad_check(lambda z: weighted_softmax_xent(z, target, weights)[0],
                      logits, analytic, eps)


def run_gradcheck_suite(seed: int = 0, configs: int = 20,
                        tolerance: float = DEFAULT_TOLERANCE) -> list[GradCheckResult]:
    """Gradient-check every layer kind on `configs` random configurations.

    Parameters
    ----------
    seed : int, optional
        Seed of the configuration generator, by default 0.
    configs : int, optional
        Random configurations per layer kind, by default 20.
    tolerance : float, optional
        Maximum accepted relative error, by default 1e-4.

    Returns
    -------
    list[GradCheckResult]
        One result per layer kind, including the weighted cross-entropy.
    """

    rng = np.random.default_rng(seed)
    results = []
    for name, make_case in LAYER_CASES.items():
        worst = 0.0
        for _ in range(configs):
            layer, x = make_case(rng)
            worst = max(worst, check_layer(layer, x, rng))
        results.append(GradCheckResult(name, configs, worst, tolerance))
        logger.info('%s: max relative error %.3e over %d configs', name, worst, configs)

    worst = max(check_xent(rng) for _ in range(configs))
    results.append(GradCheckResult('weighted_xent', configs, worst, tolerance))
    logger.info('weighted_xent: max relative error %.3e over %d configs', worst, configs)
    return results

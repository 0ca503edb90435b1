"""Augmented outer-product fusion and the Tensor-Train matrix layer.

A TT layer represents a dense weight matrix W of shape (prod(m), prod(n)) as
a chain of 4-way cores G_k of shape (r_{k-1}, m_k, n_k, r_k), so that

    W[(i_1..i_d), (j_1..j_d)] = G_1[:, i_1, j_1, :] @ ... @ G_d[:, i_d, j_d, :]

with multi-indices flattened row-major. The layer computes y = x @ W (+ b)
by absorbing one core at a time from the left and never materializes W.
"""
import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .exceptions import CapacityError, InvalidArgumentError

DENSE_GUARD = 10 ** 7


class TTLayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_modes: tuple[int, ...]
    """Factorization m_1..m_d of the input width."""

    output_modes: tuple[int, ...]
    """Factorization n_1..n_d of the output width."""

    ranks: tuple[int, ...]
    """TT ranks r_0..r_d with r_0 = r_d = 1."""

    has_bias: bool = False
    """Whether the layer adds a bias of length prod(n)."""

    @model_validator(mode='after')
    def _check(self) -> 'TTLayerSpec':
        d = len(self.input_modes)
        if d == 0:
            raise ValueError('a TT layer needs at least one core')
        if len(self.output_modes) != d or len(self.ranks) != d + 1:
            raise ValueError(f'expected {d} output modes and {d + 1} ranks, got '
                             f'{len(self.output_modes)} and {len(self.ranks)}')
        if min(self.input_modes + self.output_modes + self.ranks) < 1:
            raise ValueError('modes and ranks must be positive')
        if self.ranks[0] != 1 or self.ranks[-1] != 1:
            raise ValueError('TT ranks must start and end with 1')
        return self

    @property
    def d(self) -> int:
        return len(self.input_modes)

    @property
    def input_size(self) -> int:
        return math.prod(self.input_modes)

    @property
    def output_size(self) -> int:
        return math.prod(self.output_modes)

    def core_shape(self, k: int) -> tuple[int, int, int, int]:
        return (self.ranks[k], self.input_modes[k], self.output_modes[k], self.ranks[k + 1])


@dataclass(frozen=True)
class TTCores:
    """Cores G_1..G_d of a TT layer plus an optional bias."""

    cores: tuple[np.ndarray, ...]
    bias: np.ndarray | None = None

    def check(self, spec: TTLayerSpec):
        """Raise `InvalidArgumentError` unless the shapes agree with `spec`."""

        if len(self.cores) != spec.d:
            raise InvalidArgumentError(f'expected {spec.d} cores, got {len(self.cores)}')
        for k, core in enumerate(self.cores):
            if core.shape != spec.core_shape(k):
                raise InvalidArgumentError(f'core {k} has shape {core.shape}, '
                                           f'expected {spec.core_shape(k)}')
        if spec.has_bias:
            if self.bias is None or self.bias.shape != (spec.output_size,):
                raise InvalidArgumentError(f'bias must have shape ({spec.output_size},)')

    @property
    def param_count(self) -> int:
        count = sum(core.size for core in self.cores)
        return count + (self.bias.size if self.bias is not None else 0)


@dataclass(frozen=True)
class CompressionReport:
    tt_params: int
    dense_params: int
    ratio: float


def outer_fuse(vx: np.ndarray, vy: np.ndarray, vz: np.ndarray) -> np.ndarray:
    """Build the augmented outer product of three view vectors.

    Each vector is prepended with a constant 1, so the result holds the
    views themselves, all pairwise products and the triple product:
    z[i, j, k] = a_i * b_j * c_k with a = (1, vx), b = (1, vy), c = (1, vz).

    Parameters
    ----------
    vx, vy, vz : np.ndarray
        View vectors of shape (L,) or batches of shape (B, L).

    Returns
    -------
    np.ndarray
        Tensor of shape (|vx|+1, |vy|+1, |vz|+1), with a leading batch axis
        when the inputs are batched.
    """

    views = [np.asarray(v) for v in (vx, vy, vz)]
    if any(v.ndim not in (1, 2) or v.shape[-1] == 0 for v in views):
        raise InvalidArgumentError('outer_fuse needs non-empty vectors')
    if len({v.ndim for v in views}) != 1 or (views[0].ndim == 2 and
                                              len({v.shape[0] for v in views}) != 1):
        raise InvalidArgumentError('outer_fuse inputs must share their batch layout')

    a, b, c = (_augment(v) for v in views)
    if a.ndim == 1:
        return np.einsum('i,j,k->ijk', a, b, c)
    return np.einsum('bi,bj,bk->bijk', a, b, c)


def outer_fuse_backward(vx: np.ndarray, vy: np.ndarray, vz: np.ndarray,
                        grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of `outer_fuse` with respect to its three (batched) inputs."""

    a, b, c = (_augment(np.atleast_2d(v)) for v in (vx, vy, vz))
    grad = grad.reshape((a.shape[0], a.shape[1], b.shape[1], c.shape[1]))
    da = np.einsum('bijk,bj,bk->bi', grad, b, c)
    db = np.einsum('bijk,bi,bk->bj', grad, a, c)
    dc = np.einsum('bijk,bi,bj->bk', grad, a, b)
    grads = (da[:, 1:], db[:, 1:], dc[:, 1:])
    if np.ndim(vx) == 1:
        return tuple(g[0] for g in grads)
    return grads


def _augment(v: np.ndarray) -> np.ndarray:
    ones = np.ones(v.shape[:-1] + (1,), dtype=np.result_type(v, np.float64))
    return np.concatenate([ones, v], axis=-1)


def init_tt_cores(spec: TTLayerSpec, rng: np.random.Generator) -> TTCores:
    """Draw Gaussian cores whose reconstructed matrix has entries of variance
    about 1 / prod(m), so the layer roughly preserves activation scale.

    Every entry of W is a sum over prod(r_1..r_{d-1}) products of d core
    entries; with a common core standard deviation s that sum has variance
    s^(2d) * prod(r_1..r_{d-1}).
    """

    inner_ranks = math.prod(spec.ranks[1:-1])
    std = (1.0 / (spec.input_size * inner_ranks)) ** (1.0 / (2 * spec.d))
    cores = tuple(rng.normal(0.0, std, size=spec.core_shape(k)) for k in range(spec.d))
    bias = np.zeros(spec.output_size) if spec.has_bias else None
    return TTCores(cores=cores, bias=bias)


def _sweep(spec: TTLayerSpec, cores: TTCores,
           x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Left-to-right contraction of a batch (B, prod(m)) with the cores.

    The running tensor has layout (B, done outputs, rank, remaining inputs).
    Returns the output without bias and the per-core inputs reshaped to
    (B, done, r_{k-1}, m_k, rest), which the backward sweep needs.
    """

    batch = x.shape[0]
    t = x.reshape(batch, 1, 1, spec.input_size)
    saved = []
    for k, core in enumerate(cores.cores):
        r, m, n, s = core.shape
        done, rest = t.shape[1], t.shape[3] // m
        t = t.reshape(batch, done, r, m, rest)
        saved.append(t)
        # (B, done, rest, n, s) -> (B, done, n, s, rest)
        p = np.tensordot(t, core, axes=([2, 3], [0, 1]))
        t = p.transpose(0, 1, 3, 4, 2).reshape(batch, done * n, s, rest)
    return t.reshape(batch, spec.output_size), saved


def _sweep_backward(cores: TTCores, saved: list[np.ndarray],
                    grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    batch = grad_out.shape[0]
    dt = grad_out.reshape(batch, grad_out.shape[1], 1, 1)
    core_grads = [None] * len(cores.cores)
    for k in reversed(range(len(cores.cores))):
        core = cores.cores[k]
        t_in = saved[k]
        _, done, r, m, rest = t_in.shape
        n, s = core.shape[2], core.shape[3]
        dp = dt.reshape(batch, done, n, s, rest).transpose(0, 1, 4, 2, 3)
        core_grads[k] = np.tensordot(t_in, dp, axes=([0, 1, 4], [0, 1, 2]))
        dt_in = np.tensordot(dp, core, axes=([3, 4], [2, 3]))
        dt = dt_in.transpose(0, 1, 3, 4, 2).reshape(batch, done, r, m * rest)
    return core_grads, dt.reshape(batch, -1)


def _as_batch(spec: TTLayerSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != spec.input_size or x.ndim not in (1, 2):
        raise InvalidArgumentError(f'input has shape {x.shape}, expected a trailing '
                                   f'axis of length {spec.input_size}')
    return np.atleast_2d(x)


def tt_forward(spec: TTLayerSpec, cores: TTCores, x: np.ndarray) -> np.ndarray:
    """Apply the TT layer: y = x @ W (+ bias).

    Parameters
    ----------
    spec : TTLayerSpec
        Layer shape.
    cores : TTCores
        Cores (and bias) matching `spec`.
    x : np.ndarray
        Input of shape (prod(m),) or a batch (B, prod(m)).

    Returns
    -------
    np.ndarray
        Output of shape (prod(n),), or (B, prod(n)) for batched input.
    """

    cores.check(spec)
    xb = _as_batch(spec, x)
    y, _ = _sweep(spec, cores, xb)
    if spec.has_bias:
        y = y + cores.bias
    return y[0] if np.ndim(x) == 1 else y


def tt_backward(spec: TTLayerSpec, cores: TTCores, x: np.ndarray,
                grad_out: np.ndarray) -> tuple[TTCores, np.ndarray]:
    """Exact gradients of sum(tt_forward(x) * grad_out).

    Returns
    -------
    tuple[TTCores, np.ndarray]
        Gradients shaped like the cores (and bias), and the gradient with
        respect to `x` shaped like `x`.
    """

    cores.check(spec)
    xb = _as_batch(spec, x)
    gb = np.atleast_2d(grad_out)
    if gb.shape != (xb.shape[0], spec.output_size):
        raise InvalidArgumentError(f'grad_out has shape {np.shape(grad_out)}, expected '
                                   f'a trailing axis of length {spec.output_size}')

    _, saved = _sweep(spec, cores, xb)
    core_grads, grad_x = _sweep_backward(cores, saved, gb)
    bias_grad = gb.sum(axis=0) if spec.has_bias else None
    grads = TTCores(cores=tuple(core_grads), bias=bias_grad)
    return grads, grad_x.reshape(np.shape(x))


def tt_to_dense(spec: TTLayerSpec, cores: TTCores) -> np.ndarray:
    """Reconstruct the (prod(m), prod(n)) matrix represented by the cores.

    Used as a verification oracle, so it merges cores directly instead of
    going through `tt_forward`.
    """

    cores.check(spec)
    entries = spec.input_size * spec.output_size
    if entries > DENSE_GUARD:
        raise CapacityError(f'dense reconstruction needs {entries} entries, '
                            f'more than the limit of {DENSE_GUARD}')

    # (rows so far, cols so far, trailing rank)
    w = cores.cores[0].reshape(spec.input_modes[0], spec.output_modes[0], spec.ranks[1])
    for core in cores.cores[1:]:
        rows, cols, _ = w.shape
        _, m, n, s = core.shape
        w = np.einsum('abr,rmns->ambns', w, core).reshape(rows * m, cols * n, s)
    return w[:, :, 0]


def tt_param_count(spec: TTLayerSpec) -> int:
    """Number of trainable scalars of a TT layer (cores plus bias)."""

    count = sum(math.prod(spec.core_shape(k)) for k in range(spec.d))
    if spec.has_bias:
        count += spec.output_size
    return count


def compression_report(spec: TTLayerSpec, dense_out: int) -> CompressionReport:
    """Compare a TT layer against a dense layer with `dense_out` outputs on
    the same input.
    """

    if dense_out < 1:
        raise InvalidArgumentError('dense_out must be at least 1')
    tt_params = tt_param_count(spec)
    dense_params = dense_out * spec.input_size
    return CompressionReport(tt_params=tt_params,
                             dense_params=dense_params,
                             ratio=tt_params / dense_params)

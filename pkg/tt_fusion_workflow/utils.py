import math
from collections.abc import Sequence
from typing import TypeVar

import numpy as np

from .exceptions import InvalidArgumentError

T = TypeVar('T')


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator used everywhere randomness is needed."""

    return np.random.default_rng(seed)


def split(dataset: Sequence[T], test_fraction: float, seed: int) -> tuple[list[T], list[T]]:
    """Split a dataset into a training and test partition.

    Parameters
    ----------
    dataset : Sequence[T]
        Items to split.
    test_fraction : float
        Share of items assigned to the test partition, strictly between 0 and 1.
    seed : int
        Seed of the permutation.

    Returns
    -------
    tuple[list[T], list[T]]
        Training and test items. The test partition holds round(n * f) items
        (halves rounded up); both keep the original order.
    """

    if not 0.0 < test_fraction < 1.0:
        raise InvalidArgumentError(f'test fraction must be in (0, 1), got {test_fraction}')

    n = len(dataset)
    n_test = math.floor(n * test_fraction + 0.5)
    permutation = make_rng(seed).permutation(n)
    is_test = np.zeros(n, dtype=bool)
    is_test[permutation[:n_test]] = True

    train = [item for item, flag in zip(dataset, is_test) if not flag]
    test = [item for item, flag in zip(dataset, is_test) if flag]
    return train, test


def class_weights(counts: Sequence[int], total: int | None = None) -> np.ndarray:
    """Inverse-frequency class weights i_x = T_d / (T_x * K), normalized
    to sum to one.

    Parameters
    ----------
    counts : Sequence[int]
        Number of items per class, all positive.
    total : int, optional
        Dataset size T_d, by default the sum of `counts`.

    Returns
    -------
    np.ndarray
        Weights in the order of `counts`.
    """

    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise InvalidArgumentError('class weights need counts of at least 2 classes')
    if np.any(counts <= 0):
        raise InvalidArgumentError('class weights are undefined for an empty class')

    total = counts.sum() if total is None else float(total)
    weights = total / (counts * counts.size)
    return weights / weights.sum()


def minibatches(n: int, batch_size: int,
                rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Indices of `n` items cut into ceil(n / batch_size) batches of
    near-equal size, shuffled by `rng` when given.

    Batch norm needs two items per batch in training, so every batch holds
    at least two items whenever n >= 2; a lone remainder is spread over the
    other batches.
    """

    if batch_size < 1:
        raise InvalidArgumentError('batch size must be positive')
    if n == 0:
        return []
    order = rng.permutation(n) if rng is not None else np.arange(n)
    count = max(1, min(math.ceil(n / batch_size), n // 2))
    return np.array_split(order, count)

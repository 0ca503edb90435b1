import dataclasses
import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from typing import TypeVar

import numpy as np

from .data import Context, head_classes
from .exceptions import InvalidArgumentError

logger = logging.getLogger(__name__)

T = TypeVar('T')

OUTPUTS = ('valence', 'arousal', 'context')


def filter_misc(dataset: Sequence[T]) -> list[T]:
    """Remove every clip whose game context is miscellaneous.

    Parameters
    ----------
    dataset : Sequence[T]
        Labelled items (clip records or manifest entries).

    Returns
    -------
    list[T]
        Remaining items in their original order.
    """

    return [item for item in dataset if item.labels.context is not Context.MISCELLANEOUS]


def rep_weight(class_count: int, total: int, n_classes: int) -> float:
    """Representation weight w_c = T_c / (T_d * N_c) of a class.

    Dividing by the number of classes of the output makes classes of
    outputs with different class counts comparable.
    """

    if total <= 0:
        raise InvalidArgumentError('representation weight needs a positive total')
    if n_classes < 2:
        raise InvalidArgumentError('representation weight needs at least 2 classes')
    return class_count / (total * n_classes)


@dataclass(frozen=True)
class CloneStep:
    """One oversampling decision."""

    source: int
    """Index of the cloned item in the dataset at selection time."""

    least: tuple[str, int]
    """(output, class) with the lowest representation weight."""

    most: tuple[str, int]
    """(output, class) with the highest representation weight."""


def _extremes(labels: np.ndarray) -> tuple[tuple[str, int], tuple[str, int]]:
    """Least and most represented (output, class) among present classes;
    ties go to the earlier output, then the lower class index."""

    total = labels.shape[0]
    least, most = None, None
    low, high = np.inf, -np.inf
    for o, output in enumerate(OUTPUTS):
        n_classes = len(head_classes(output))
        counts = np.bincount(labels[:, o], minlength=n_classes)
        for c in range(n_classes):
            if counts[c] == 0:
                continue
            w = rep_weight(int(counts[c]), total, n_classes)
            if w < low:
                low, least = w, (output, c)
            if w > high:
                high, most = w, (output, c)
    return least, most


def iter_oversample(dataset: Sequence, threshold: int, seed: int) -> Iterator[CloneStep]:
    """Yield clone decisions of the balancing procedure.

    Each step recomputes the representation weight of every class of every
    output over the current data (originals plus earlier clones), picks a
    random item that is in the least represented class and not in the most
    represented class, and clones it. Stops after `threshold` clones or when
    no item qualifies.
    """

    if threshold < 0:
        raise InvalidArgumentError('oversampling threshold must be non-negative')
    if any(item.labels.context is Context.MISCELLANEOUS for item in dataset):
        raise InvalidArgumentError('oversampling expects miscellaneous clips to be filtered')

    rng = np.random.default_rng(seed)
    n = len(dataset)
    labels = np.empty((n + threshold, len(OUTPUTS)), dtype=np.int64)
    labels[:n] = [[item.labels.index(o) for o in OUTPUTS] for item in dataset] or \
        np.empty((0, len(OUTPUTS)), dtype=np.int64)

    size = n
    while size < n + threshold and size > 0:
        current = labels[:size]
        least, most = _extremes(current)
        lo, mo = OUTPUTS.index(least[0]), OUTPUTS.index(most[0])
        candidates = np.flatnonzero((current[:, lo] == least[1]) & (current[:, mo] != most[1]))
        if candidates.size == 0:
            logger.info('Oversampling stopped early: no clip is in %s and not in %s',
                        least, most)
            return
        source = int(candidates[rng.integers(candidates.size)])
        labels[size] = labels[source]
        size += 1
        yield CloneStep(source=source, least=least, most=most)


def clone(item: T) -> T:
    """Copy of a record or manifest entry marked as a clone."""

    if hasattr(item, 'model_copy'):
        return item.model_copy(update={'origin': 'clone'})
    return dataclasses.replace(item, origin='clone')


def oversample(dataset: Sequence[T], threshold: int | None = None, seed: int = 0) -> list[T]:
    """Balance a training set by cloning minority-class items.

    Parameters
    ----------
    dataset : Sequence[T]
        Miscellaneous-filtered training items.
    threshold : int, optional
        Maximum number of clones, by default the size of `dataset`.
    seed : int, optional
        Seed of the random selection, by default 0.

    Returns
    -------
    list[T]
        Input items followed by the clones in selection order.
    """

    threshold = len(dataset) if threshold is None else threshold
    result = list(dataset)
    for step in iter_oversample(dataset, threshold, seed):
        result.append(clone(result[step.source]))

    logger.info('Oversampled %d clips to %d', len(dataset), len(result))
    return result

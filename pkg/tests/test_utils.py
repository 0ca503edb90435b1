import numpy as np
import pytest
from numpy.testing import assert_allclose

from tt_fusion_workflow.exceptions import InvalidArgumentError
from tt_fusion_workflow.utils import class_weights, make_rng, minibatches, split


class TestSplit:

    def test_sizes_round_half_up(self):
        train, test = split(list(range(10)), 0.25, seed=0)
        assert len(test) == 3
        assert len(train) == 7

    def test_partition_keeps_order(self):
        items = list(range(50))
        train, test = split(items, 0.2, seed=3)
        assert sorted(train + test) == items
        assert train == sorted(train) and test == sorted(test)
        assert not set(train) & set(test)

    def test_seeded(self):
        assert split(list(range(20)), 0.3, 5) == split(list(range(20)), 0.3, 5)

    def test_empty_dataset(self):
        assert split([], 0.5, 0) == ([], [])

    @pytest.mark.parametrize('fraction', [0.0, 1.0, -0.1, 1.5])
    def test_invalid_fraction(self, fraction):
        with pytest.raises(InvalidArgumentError):
            split([1, 2, 3], fraction, 0)


class TestClassWeights:

    def test_inverse_frequency(self):
        assert_allclose(class_weights([9, 1]), [0.1, 0.9])

    def test_three_classes(self):
        assert_allclose(class_weights([2, 3, 5]), [0.4839, 0.3226, 0.1935], atol=5e-5)

    def test_balanced(self):
        assert_allclose(class_weights([5, 5, 5, 5]), np.full(4, 0.25))

    def test_total_does_not_change_normalized_weights(self):
        assert_allclose(class_weights([246, 6227, 727], total=7200), class_weights([246, 6227, 727]))

    @pytest.mark.parametrize('counts', [[3, 0], [4], [[1, 2], [3, 4]]])
    def test_invalid(self, counts):
        with pytest.raises(InvalidArgumentError):
            class_weights(counts)


class TestMinibatches:

    def test_near_equal_batches(self):
        batches = minibatches(10, 4, make_rng(0))
        assert [len(b) for b in batches] == [4, 3, 3]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))

    def test_empty(self):
        assert minibatches(0, 8, make_rng(0)) == []

    @pytest.mark.parametrize('n, batch_size', [(5, 2), (4, 1), (9, 8), (17, 8), (3, 2), (2, 1)])
    def test_no_single_item_batches(self, n, batch_size):
        batches = minibatches(n, batch_size, make_rng(0))
        assert min(len(b) for b in batches) >= 2
        assert sorted(np.concatenate(batches).tolist()) == list(range(n))

    def test_single_item(self):
        assert [b.tolist() for b in minibatches(1, 8, make_rng(0))] == [[0]]

    def test_unshuffled_without_rng(self):
        assert [b.tolist() for b in minibatches(7, 3)] == [[0, 1, 2], [3, 4], [5, 6]]

    def test_invalid_batch_size(self):
        with pytest.raises(InvalidArgumentError):
            minibatches(5, 0, make_rng(0))

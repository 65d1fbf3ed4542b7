import numpy as np
import pytest

from hamlora.adapters import (
    AdapterGroup,
    LayerAdapter,
    TaskAdapter,
    delta_weight,
    new_task_adapter,
    nonzero_parameter_count,
)
from hamlora.errors import ShapeError
from hamlora.grouping import concat_into_group, prune
from hamlora.tensorops import RngState

from test_tensorops import naive_matmul


def random_adapter(task_id, shapes, rank, seed, alpha=1.0):
    rng = RngState(seed)
    layers = [LayerAdapter(rng.normal((d, rank)), rng.normal((rank, k))) for d, k in shapes]
    return TaskAdapter(task_id=task_id, layers=layers, alpha=alpha)


class TestLayerAdapter:
    def test_rank_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            LayerAdapter(np.ones((4, 2)), np.ones((3, 5)))

    def test_delta_weight_zero_adapter(self):
        layer = LayerAdapter(np.zeros((3, 2)), np.zeros((2, 4)))
        assert np.array_equal(delta_weight(layer), np.zeros((3, 4)))

    def test_delta_weight_outer_product(self):
        layer = LayerAdapter([[1.0], [2.0]], [[3.0, 4.0]])
        assert np.array_equal(delta_weight(layer), [[3, 4], [6, 8]])

    def test_delta_weight_matches_naive_oracle(self):
        rng = RngState(9)
        layer = LayerAdapter(rng.normal((6, 2)), rng.normal((2, 5)))
        assert np.max(np.abs(delta_weight(layer) - naive_matmul(layer.b, layer.a))) < 1e-12


class TestNewTaskAdapter:
    def test_initial_delta_is_zero(self):
        adapter = new_task_adapter(0, [(8, 4), (8, 8)], rank=2, rng=RngState(1))
        for layer in adapter.layers:
            assert np.array_equal(delta_weight(layer), np.zeros((layer.out_dim, layer.in_dim)))
        assert adapter.alpha == 1.0

    def test_rank_cap_enforced(self):
        with pytest.raises(ShapeError):
            new_task_adapter(0, [(8, 4)], rank=5, rng=RngState(1))


class TestNonzeroParameterCount:
    def test_unpruned_rank16(self):
        adapter = random_adapter(0, [(64, 64)], rank=16, seed=2)
        assert nonzero_parameter_count(adapter) == 16 * (64 + 64)

    def test_after_half_pruning(self):
        adapter = random_adapter(0, [(64, 64)], rank=16, seed=3)
        pruned = prune(adapter, 0.5)
        # oracle: ceil(0.5 * 1024) entries survive in each factor matrix
        assert nonzero_parameter_count(pruned) == 512 + 512

    def test_zero_adapter(self):
        adapter = TaskAdapter(0, [LayerAdapter(np.zeros((4, 2)), np.zeros((2, 4)))])
        assert nonzero_parameter_count(adapter) == 0


class TestGroupRankBookkeeping:
    @pytest.mark.parametrize("n_members", range(1, 11))
    def test_rank_grows_by_r_per_member(self, n_members):
        shapes = [(6, 5), (6, 6)]
        group = AdapterGroup(group_id=0)
        for i in range(n_members):
            concat_into_group(group, random_adapter(i, shapes, rank=3, seed=100 + i))
        for layer in group.layers:
            assert layer.rank == n_members * 3
        assert group.member_count == n_members

    def test_unpruned_concat_equals_sum_of_member_deltas(self):
        shapes = [(7, 4)]
        members = [random_adapter(i, shapes, rank=2, seed=i) for i in range(3)]
        group = AdapterGroup(group_id=0)
        for member in members:
            concat_into_group(group, member)
        expected = sum(naive_matmul(m.layers[0].b, m.layers[0].a) for m in members)
        assert np.max(np.abs(delta_weight(group.layers[0]) - expected)) < 1e-9

import numpy as np
import pytest

from hamlora.adapters import AdapterGroup, TaskAdapter
from hamlora.errors import FormatError
from hamlora.grouping import concat_into_group
from hamlora.merging import MergedDelta, merge_sources
from hamlora.serialization import describe_adapter, load_adapter, save_adapter
from hamlora.tensorops import RngState

from test_adapters import random_adapter


def assert_f32_close(got, expected):
    assert got.shape == expected.shape
    assert np.array_equal(got, np.asarray(expected, dtype="<f4").astype(np.float64))


class TestTaskAdapterRoundTrip:
    def test_shapes_and_values(self, tmp_path):
        adapter = random_adapter(7, [(6, 5), (6, 6)], rank=2, seed=1, alpha=0.375)
        path = tmp_path / "task.ham"
        save_adapter(path, adapter)
        back = load_adapter(path)
        assert isinstance(back, TaskAdapter)
        assert back.task_id == 7
        assert back.alpha == 0.375  # exact: alpha is stored as f64
        for orig, loaded in zip(adapter.layers, back.layers):
            assert_f32_close(loaded.b, orig.b)
            assert_f32_close(loaded.a, orig.a)

    def test_pruned_zeros_survive(self, tmp_path):
        from hamlora.grouping import prune

        adapter = prune(random_adapter(0, [(8, 8)], rank=4, seed=2), 0.3)
        path = tmp_path / "pruned.ham"
        save_adapter(path, adapter)
        back = load_adapter(path)
        assert np.count_nonzero(back.layers[0].b) == np.count_nonzero(adapter.layers[0].b)


class TestGroupRoundTrip:
    def test_membership_trailer_preserved(self, tmp_path):
        group = AdapterGroup(group_id=4)
        for i in (3, 9, 11):
            concat_into_group(group, random_adapter(i, [(6, 5)], rank=2, seed=10 + i,
                                                    alpha=0.5 + i / 10))
        assert group.layers[0].rank == 6
        path = tmp_path / "group.ham"
        save_adapter(path, group)
        back = load_adapter(path)
        assert isinstance(back, AdapterGroup)
        assert back.group_id == 4
        assert back.member_count == 3
        assert back.member_task_ids == [3, 9, 11]
        assert back.layers[0].rank == 6
        assert back.alpha_g == pytest.approx(group.alpha_g, abs=1e-15)

    def test_randomized_groups_round_trip(self, tmp_path):
        rng = RngState(33)
        for trial in range(5):
            group = AdapterGroup(group_id=trial)
            n_members = 1 + trial
            for i in range(n_members):
                concat_into_group(
                    group, random_adapter(i, [(5, 4), (5, 5)], rank=3, seed=int(rng.integers(0, 10**6)))
                )
            path = tmp_path / f"g{trial}.ham"
            save_adapter(path, group)
            back = load_adapter(path)
            assert back.member_count == n_members
            for orig, loaded in zip(group.layers, back.layers):
                assert loaded.rank == n_members * 3
                assert_f32_close(loaded.b, orig.b)
                assert_f32_close(loaded.a, orig.a)


class TestMergedRoundTrip:
    def test_factored_merged_delta(self, tmp_path):
        adapters = [random_adapter(i, [(6, 5)], rank=2, seed=40 + i, alpha=1.0) for i in range(3)]
        merged = merge_sources([(a.task_id, a.alpha, a.layers) for a in adapters], "ham")
        path = tmp_path / "merged.ham"
        save_adapter(path, merged)
        back = load_adapter(path)
        assert isinstance(back, MergedDelta)
        assert back.provenance == [(0, 1.0), (1, 1.0), (2, 1.0)]
        for orig, loaded in zip(merged.layer_deltas, back.layer_deltas):
            assert np.max(np.abs(orig - loaded)) < 1e-6  # f32 rounding

    def test_dense_merged_delta(self, tmp_path):
        adapters = [random_adapter(i, [(6, 5)], rank=2, seed=50 + i) for i in range(2)]
        merged = merge_sources([(a.task_id, a.alpha, a.layers) for a in adapters], "ties")
        assert merged.factors is None
        path = tmp_path / "ties.ham"
        save_adapter(path, merged)
        back = load_adapter(path)
        for orig, loaded in zip(merged.layer_deltas, back.layer_deltas):
            assert np.max(np.abs(orig - loaded)) < 1e-6


class TestFormatErrors:
    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ham"
        adapter = random_adapter(0, [(4, 3)], rank=1, seed=1)
        save_adapter(path, adapter)
        payload = bytearray(path.read_bytes())
        payload[:4] = b"NOPE"
        path.write_bytes(bytes(payload))
        with pytest.raises(FormatError):
            load_adapter(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "bad.ham"
        save_adapter(path, random_adapter(0, [(4, 3)], rank=1, seed=1))
        payload = bytearray(path.read_bytes())
        payload[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(payload))
        with pytest.raises(FormatError):
            load_adapter(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "trunc.ham"
        save_adapter(path, random_adapter(0, [(4, 3)], rank=1, seed=1))
        payload = path.read_bytes()
        path.write_bytes(payload[: len(payload) - 7])
        with pytest.raises(FormatError):
            load_adapter(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "garbage.ham"
        save_adapter(path, random_adapter(0, [(4, 3)], rank=1, seed=1))
        path.write_bytes(path.read_bytes() + b"\x00\x01")
        with pytest.raises(FormatError):
            load_adapter(path)

    def test_no_partial_state_on_error(self, tmp_path):
        path = tmp_path / "empty.ham"
        path.write_bytes(b"HA")
        with pytest.raises(FormatError):
            load_adapter(path)


class TestDescribe:
    def test_mentions_shapes_and_nonzeros(self, tmp_path):
        adapter = random_adapter(2, [(6, 5)], rank=2, seed=1)
        path = tmp_path / "t.ham"
        save_adapter(path, adapter)
        text = describe_adapter(path)
        assert "task" in text
        assert "d=6 k=5 r=2" in text
        assert "nonzero" in text

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from aikd.memory import ExemplarMemory, herding_select, update_memory
from aikd.protocol import ConfigError

from oracles import greedy_herding_bruteforce


class TestHerdingSelect:
    def test_single_candidate(self):
        assert herding_select(np.array([[0.3, -1.0]]), 1) == [0]

    def test_four_points_match_greedy_oracle(self):
        pts = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 1.0], [1.0, 1.5]])
        expected = greedy_herding_bruteforce(pts, 2)
        assert herding_select(pts, 2) == expected

    def test_identical_features_pick_in_index_order(self):
        assert herding_select(np.ones((6, 3)), 4) == [0, 1, 2, 3]

    def test_m_larger_than_n(self):
        with pytest.raises(ValueError):
            herding_select(np.zeros((3, 2)), 4)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12).flatmap(lambda n: st.tuples(
        arrays(np.float64, (n, 3), elements=st.floats(-5, 5, allow_nan=False, width=32)),
        st.integers(1, n))))
    def test_matches_bruteforce(self, case):
        feats, m = case
        assert herding_select(feats, m) == greedy_herding_bruteforce(feats, m)

    def test_prefix_property(self, rng):
        feats = rng.normal(size=(30, 4))
        assert herding_select(feats, 10)[:5] == herding_select(feats, 5)


def _class_data(rng, classes, n=40, d=4):
    return {c: (rng.normal(size=(n, 1, 2, 2)).astype(np.float32), rng.normal(size=(n, d))) for c in classes}


class TestUpdateMemory:
    def test_fixed_total_quota(self, rng):
        mem = ExemplarMemory("fixed_total", budget=2000)
        big = {c: (np.zeros((300, 1, 2, 2), np.float32), rng.normal(size=(300, 3))) for c in range(20)}
        mem = update_memory(mem, big, range(20))
        assert mem.total == 2000
        assert {len(v) for v in mem.images.values()} == {100}

    def test_per_class_adds_m_each(self, rng):
        mem = ExemplarMemory("per_class", per_class=20)
        mem = update_memory(mem, _class_data(rng, range(10)), range(10))
        assert mem.total == 200
        before = {c: v.copy() for c, v in mem.images.items()}
        mem = update_memory(mem, _class_data(rng, range(10, 20)), range(20))
        assert mem.total == 400
        assert all(np.array_equal(mem.images[c], before[c]) for c in before)

    def test_truncation_keeps_herding_prefix(self, rng):
        mem = ExemplarMemory("fixed_total", budget=400)
        first = _class_data(rng, [0, 1], n=250)
        mem = update_memory(mem, first, [0, 1])
        assert len(mem.images[0]) == 200
        kept = mem.images[0].copy()
        mem = update_memory(mem, _class_data(rng, [2, 3], n=250), [0, 1, 2, 3])
        assert len(mem.images[0]) == 100
        assert np.array_equal(mem.images[0], kept[:100])

    def test_selection_uses_normalized_features(self, rng):
        imgs = np.arange(8, dtype=np.float32).reshape(8, 1, 1, 1)
        feats = rng.normal(size=(8, 3))
        scaled = feats * rng.uniform(0.5, 5, size=(8, 1))
        a = update_memory(ExemplarMemory("per_class", per_class=3), {0: (imgs, feats)}, [0])
        b = update_memory(ExemplarMemory("per_class", per_class=3), {0: (imgs, scaled)}, [0])
        assert np.array_equal(a.images[0], b.images[0])

    def test_quota_zero_is_config_error(self, rng):
        with pytest.raises(ConfigError):
            update_memory(ExemplarMemory("fixed_total", budget=3), _class_data(rng, range(4)), range(4))

    def test_class_already_stored(self, rng):
        mem = update_memory(ExemplarMemory("per_class", per_class=2), _class_data(rng, [0]), [0])
        with pytest.raises(ValueError):
            update_memory(mem, _class_data(rng, [0]), [0])

    def test_snapshot_roundtrip(self, rng, tmp_path):
        mem = update_memory(ExemplarMemory("fixed_total", budget=30), _class_data(rng, [5, 2, 9]), [5, 2, 9])
        mem.save(tmp_path / "m.npz")
        back = ExemplarMemory.load(tmp_path / "m.npz")
        assert back.policy == "fixed_total" and back.budget == 30
        assert back.class_ids == mem.class_ids
        assert all(np.array_equal(back.images[c], mem.images[c]) for c in mem.class_ids)

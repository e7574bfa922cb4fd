import inspect
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stedm.errors import ParameterError, ShapeError
from stedm.style import (Aggregator, StyleEncoder, StyleQuerySet, aggregate, apply_style_drop,
                         encode_query_sets, extract_style, set_mean)

from oracles import mlp_loop_oracle


@pytest.fixture
def agg():
    torch.manual_seed(0)
    return Aggregator(32)


class TestAggregate:
    def test_scalar_loop_oracle(self, agg):
        vs = [torch.randn(32, generator=torch.Generator().manual_seed(i)) for i in range(10)]
        got = aggregate(vs, agg).double().tolist()
        want = mlp_loop_oracle(agg, [v.double().tolist() for v in vs])
        assert max(abs(a - b) for a, b in zip(got, want)) <= 1e-6

    def test_single_vector_goes_through_mlp(self, agg):
        v = torch.randn(32)
        torch.testing.assert_close(aggregate([v], agg), agg.mlp(v))

    @given(st.integers(1, 12), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_duplicates_match_single(self, n, seed):
        torch.manual_seed(0)
        a = Aggregator(16)
        v = torch.randn(16, generator=torch.Generator().manual_seed(seed))
        assert torch.equal(aggregate([v] * n, a), aggregate([v], a))

    @given(st.permutations(list(range(7))), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_permutation_is_bitwise_invariant(self, perm, seed):
        torch.manual_seed(0)
        a = Aggregator(16)
        gen = torch.Generator().manual_seed(seed)
        vs = [torch.randn(16, generator=gen) for _ in range(7)]
        assert torch.equal(aggregate(vs, a), aggregate([vs[i] for i in perm], a))

    def test_batched_path_matches_list_path(self, agg):
        vs = torch.randn(7, 32)
        flat = agg(vs, torch.tensor([3, 4]))
        # the pooled means are identical; the MLP matmul may block differently per batch size
        torch.testing.assert_close(flat[0], aggregate(list(vs[:3]), agg), atol=1e-6, rtol=0)
        torch.testing.assert_close(flat[1], aggregate(list(vs[3:]), agg), atol=1e-6, rtol=0)

    def test_mixed_lengths(self, agg):
        with pytest.raises(ShapeError):
            aggregate([torch.zeros(32), torch.zeros(16)], agg)
        with pytest.raises(ShapeError):
            aggregate([], agg)

    def test_alternative_order(self):
        torch.manual_seed(0)
        a = Aggregator(8, order="mlp_then_mean")
        vs = torch.randn(3, 8)
        torch.testing.assert_close(aggregate(list(vs), a), a.mlp(vs).mean(0))
        with pytest.raises(ParameterError):
            Aggregator(8, order="max")

    def test_set_mean_exact_on_duplicates(self):
        v = torch.tensor([[0.1, 1 / 3, -7.7]] * 9)
        assert torch.equal(set_mean(v[None])[0], v[0])


class TestEncoder:
    def test_shape_contract(self):
        enc = StyleEncoder(128, image_size=64).eval()
        img = np.random.default_rng(0).uniform(-1, 1, (64, 64, 3))
        v = extract_style(img, enc)
        assert v.shape == (128,)
        assert torch.equal(v, extract_style(img.copy(), enc))

    def test_dimension_mismatch(self):
        enc = StyleEncoder(16, image_size=16)
        with pytest.raises(ShapeError):
            extract_style(np.zeros((32, 32, 3)), enc)
        with pytest.raises(ShapeError):
            extract_style(np.zeros((16, 16, 4)), enc)

    def test_pixels_only(self):
        params = list(inspect.signature(StyleEncoder.forward).parameters)
        assert params == ["self", "images"]
        params = list(inspect.signature(extract_style).parameters)
        assert params == ["image", "encoder"]


class TestQuerySets:
    def test_empty_requires_dropped(self):
        with pytest.raises(ShapeError):
            StyleQuerySet(np.zeros((0, 4, 4, 3)))
        StyleQuerySet(np.zeros((0, 4, 4, 3)), dropped=True)

    def test_encode_marks_dropped_absent(self):
        torch.manual_seed(0)
        enc, agg = StyleEncoder(8, image_size=8), Aggregator(8)
        rng = np.random.default_rng(0)
        sets = [StyleQuerySet(rng.uniform(-1, 1, (n, 8, 8, 3))) for n in (1, 3, 2)]
        sets[1] = StyleQuerySet(sets[1].images, dropped=True)
        v, present = encode_query_sets(sets, enc, agg)
        assert present.tolist() == [True, False, True]
        assert torch.all(v[1] == 0)
        with torch.no_grad():
            expect = aggregate(list(enc(torch.from_numpy(sets[2].images).permute(0, 3, 1, 2))), agg)
        torch.testing.assert_close(v[2], expect)


class TestStyleDrop:
    def _batch(self, n):
        return [StyleQuerySet(np.zeros((1, 2, 2, 3)))] * n

    def test_extremes(self):
        b = self._batch(50)
        assert not any(q.dropped for q in apply_style_drop(b, 0.0, 1))
        assert all(q.dropped for q in apply_style_drop(b, 1.0, 1))

    def test_rate_within_three_se(self):
        out = apply_style_drop(self._batch(10_000), 0.25, 3)
        frac = np.mean([q.dropped for q in out])
        assert abs(frac - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 10_000)

    def test_deterministic_and_whole_set(self):
        b = [StyleQuerySet(np.zeros((4, 2, 2, 3)))] * 100
        a1, a2 = apply_style_drop(b, 0.5, 9), apply_style_drop(b, 0.5, 9)
        assert [q.dropped for q in a1] == [q.dropped for q in a2]
        assert all(q.n == 4 for q in a1)

    def test_bad_probability(self):
        with pytest.raises(ParameterError):
            apply_style_drop(self._batch(1), 1.5, 0)

"""Coordinate grid, pyramid fusion, and query generation."""
import numpy as np
import pytest

from refseg import autodiff as ad
from refseg.encoders import FeaturePyramid
from refseg.errors import DegenerateRowError, DimensionError
from refseg.neck import FusionNeck, QueryGenerator, coord_grid
from refseg.rng import Stream

from oracles import in_convex_hull

F64 = np.float64


class TestCoordGrid:
    def test_single_cell_midpoint(self):
        assert np.array_equal(coord_grid(1, 1), np.zeros((1, 1, 2)))

    def test_three_by_three_corners(self):
        g = coord_grid(3, 3)
        assert tuple(g[0, 0]) == (-1.0, -1.0)
        assert tuple(g[0, 2]) == (1.0, -1.0)
        assert tuple(g[2, 0]) == (-1.0, 1.0)
        assert tuple(g[2, 2]) == (1.0, 1.0)

    def test_two_by_two_exact_endpoints(self):
        g = coord_grid(2, 2)
        assert set(np.unique(g[..., 0])) == {-1.0, 1.0}
        assert set(np.unique(g[..., 1])) == {-1.0, 1.0}

    def test_center_row_zero(self):
        g = coord_grid(3, 5)
        assert np.all(g[1, :, 1] == 0.0)
        assert np.all(g[:, 2, 0] == 0.0)


def _pyramid(stream, extent=16, channels=(8, 8, 16)):
    h = extent
    return FeaturePyramid(
        stage2=ad.constant(stream.normal((h, h, channels[0]))),
        stage3=ad.constant(stream.normal((h // 2, h // 2, channels[1]))),
        stage4=ad.constant(stream.normal((h // 4, h // 4, channels[2]))),
    )


def _neck(seed=1, stage_channels=(4, 8, 8, 16), width=8):
    return FusionNeck(Stream.from_seed(seed), stage_channels, width, dtype=F64)


class TestFusionNeck:
    def test_zero_pyramid_deterministic(self):
        neck = _neck()
        zero = FeaturePyramid(stage2=ad.constant(np.zeros((16, 16, 8))),
                              stage3=ad.constant(np.zeros((8, 8, 8))),
                              stage4=ad.constant(np.zeros((4, 4, 16))))
        a = neck(zero).grid.data
        b = neck(zero).grid.data
        assert np.array_equal(a, b)
        assert np.isfinite(a).all()

    def test_output_extents(self):
        neck = _neck()
        out = neck(_pyramid(Stream.from_seed(2)))
        assert out.grid.shape == (8, 8, 8)

    def test_extent_inconsistency_rejected(self):
        neck = _neck()
        bad = FeaturePyramid(stage2=ad.constant(np.zeros((16, 16, 8))),
                             stage3=ad.constant(np.zeros((8, 8, 8))),
                             stage4=ad.constant(np.zeros((2, 2, 16))))
        with pytest.raises(DimensionError):
            neck(bad)

    def test_channel_severing_isolates_top_path(self):
        neck = _neck()
        width = 8
        # silence the carried/lifted stage-3 and stage-2 paths
        for layer in (neck.carry4, neck.lift3, neck.carry3, neck.lift2):
            layer.weight.data = np.zeros_like(layer.weight.data)
        # aggregation conv reads only the channels that came from the top path
        k = neck.aggregate.kernel.data
        k[:] = 0.0
        k[0, 0, 4 * width:, :] = Stream.from_seed(3).normal((width, width))
        s = Stream.from_seed(4)
        p1 = _pyramid(s)
        p2 = FeaturePyramid(stage2=ad.constant(s.normal((16, 16, 8))),
                            stage3=ad.constant(s.normal((8, 8, 8))),
                            stage4=p1.stage4)
        assert np.array_equal(neck(p1).grid.data, neck(p2).grid.data)

    def test_gradients_match_fd(self):
        neck = _neck(seed=5)
        pyr = _pyramid(Stream.from_seed(6), extent=8)
        w = ad.constant(Stream.from_seed(7).normal((4, 4, 8)))

        def objective():
            return (neck(pyr).grid * w).sum()

        report = ad.finite_diff_check(objective, list(neck.named_params("neck")),
                                      h=1e-5, tol=1e-4)
        assert report.passed, report.summary()


def _qgen(seed=1, width=8, num_queries=4, positions=16):
    return QueryGenerator(Stream.from_seed(seed), width, num_queries, positions, dtype=F64)


def _words(stream, max_len=6, width=8):
    return ad.constant(stream.normal((max_len, width)))


class TestQueryGenerator:
    def test_single_word_every_query_identical(self):
        gen = _qgen()
        s = Stream.from_seed(2)
        words = _words(s)
        mask = np.array([True] + [False] * 5)
        grid = ad.constant(s.normal((4, 4, 8)))
        out = gen(grid, words, mask)
        assert np.allclose(out.word_attn.data[:, 0], 1.0)
        expected = ad.linear(words, gen.project_words.weight).relu().data[0]
        for q in range(4):
            assert np.allclose(out.queries.data[q], expected, atol=1e-12)

    def test_single_query_is_convex_combination(self):
        gen = _qgen(num_queries=1)
        s = Stream.from_seed(3)
        words = _words(s)
        mask = np.array([True, True, True, False, False, False])
        grid = ad.constant(s.normal((4, 4, 8)))
        out = gen(grid, words, mask)
        attn = out.word_attn.data
        assert attn.shape == (1, 6)
        assert np.isclose(attn.sum(), 1.0, atol=1e-9)
        values = gen.project_words(words).relu().data
        assert np.allclose(out.queries.data, attn @ values, atol=1e-12)

    def test_duplicate_word_equals_single(self):
        gen = _qgen(seed=4)
        s = Stream.from_seed(5)
        row = s.normal((1, 8))
        words = ad.constant(np.vstack([row, row, np.zeros((4, 8))]))
        grid = ad.constant(s.normal((4, 4, 8)))
        single = gen(grid, words, np.array([True] + [False] * 5)).queries.data
        double = gen(grid, words, np.array([True, True] + [False] * 4)).queries.data
        assert np.allclose(single, double, atol=1e-12)

    def test_all_pad_rejected(self):
        gen = _qgen()
        with pytest.raises(DegenerateRowError):
            gen(ad.constant(np.zeros((4, 4, 8))), ad.constant(np.zeros((6, 8))),
                np.zeros(6, dtype=bool))

    def test_wrong_grid_positions_rejected(self):
        gen = _qgen(positions=16)
        with pytest.raises(DimensionError):
            gen(ad.constant(np.zeros((2, 2, 8))), ad.constant(np.zeros((6, 8))),
                np.array([True] * 6))

    def test_attention_rows_stochastic_and_bounded(self):
        gen = _qgen(seed=6)
        s = Stream.from_seed(7)
        for _ in range(100):
            words = _words(s)
            mask = s.uniform((6,)) < 0.6
            mask[0] = True
            grid = ad.constant(s.normal((4, 4, 8)))
            attn = gen(grid, words, mask).word_attn.data
            assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
            assert np.all(attn[:, ~mask] == 0.0)
            assert np.all(attn >= 0.0) and np.all(attn <= 1.0)

    def test_queries_in_convex_hull_of_word_projections(self):
        gen = _qgen(seed=8)
        s = Stream.from_seed(9)
        for _ in range(20):
            words = _words(s)
            mask = s.uniform((6,)) < 0.7
            mask[0] = True
            grid = ad.constant(s.normal((4, 4, 8)))
            out = gen(grid, words, mask)
            vertices = gen.project_words(words).relu().data[mask]
            for q in range(out.queries.shape[0]):
                assert in_convex_hull(out.queries.data[q], vertices, tol=1e-8)

    def test_positive_grid_scaling_keeps_rows_stochastic(self):
        gen = _qgen(seed=10)
        s = Stream.from_seed(11)
        words = _words(s)
        mask = np.array([True, True, True, True, False, False])
        grid = s.normal((4, 4, 8))
        base = gen(ad.constant(grid), words, mask).word_attn.data
        scaled = gen(ad.constant(grid * 7.0), words, mask).word_attn.data
        assert not np.allclose(base, scaled)
        assert np.allclose(scaled.sum(axis=-1), 1.0, atol=1e-6)

    def test_gradients_match_fd(self):
        gen = _qgen(seed=12)
        s = Stream.from_seed(13)
        words = _words(s)
        mask = np.array([True, True, True, False, False, False])
        grid = ad.constant(s.normal((4, 4, 8)))
        w = ad.constant(s.normal((4, 8)))

        def objective():
            return (gen(grid, words, mask).queries * w).sum()

        report = ad.finite_diff_check(objective, list(gen.named_params("qgen")),
                                      h=1e-5, tol=1e-4)
        assert report.passed, report.summary()

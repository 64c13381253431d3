"""Decoder layers, query calibration, and the calibration-off degeneracy."""
import numpy as np
import pytest

from refseg import autodiff as ad
from refseg.decoder import CalibrationDecoder, DecoderLayer, calibrate
from refseg.errors import ConfigurationError
from refseg.rng import Stream

F64 = np.float64
WIDTH = 8


def _layer(seed=1):
    return DecoderLayer(Stream.from_seed(seed), WIDTH, 2, 16, dtype=F64)


def _decoder(seed=2, layers=2, num_queries=3, positions=16, share=False):
    return CalibrationDecoder(Stream.from_seed(seed), WIDTH, 2, 16, layers,
                              num_queries, positions, share_calibrators=share, dtype=F64)


def _zero_out(layer):
    for lin in (layer.attn_self.proj_out, layer.attn_cross.proj_out, layer.ffn.outer):
        lin.weight.data = np.zeros_like(lin.weight.data)
        lin.bias.data = np.zeros_like(lin.bias.data)


class TestDecoderLayer:
    def test_zeroed_blocks_pass_residual_through(self):
        layer = _layer()
        _zero_out(layer)
        s = Stream.from_seed(3)
        x = ad.constant(s.normal((6, WIDTH)))
        q = ad.constant(s.normal((3, WIDTH)))
        assert np.array_equal(layer(x, q).data, x.data)

    def test_single_query_adds_shared_vector_pre_mlp(self):
        layer = _layer(seed=4)
        layer.ffn.outer.weight.data = np.zeros_like(layer.ffn.outer.weight.data)
        layer.ffn.outer.bias.data = np.zeros_like(layer.ffn.outer.bias.data)
        s = Stream.from_seed(5)
        x = ad.constant(s.normal((6, WIDTH)))
        q = ad.constant(s.normal((1, WIDTH)))
        normed = layer.norm_self(x)
        pre_cross = x + layer.attn_self(normed, normed)
        out = layer(x, q)
        added = out.data - pre_cross.data
        assert np.allclose(added, added[0], atol=1e-10)

    def test_gradient_reaches_stream_and_queries(self):
        layer = _layer(seed=6)
        s = Stream.from_seed(7)
        x = ad.param(s.normal((5, WIDTH)), dtype=F64)
        q = ad.param(s.normal((3, WIDTH)), dtype=F64)

        def objective():
            return (layer(x, q) * layer(x, q)).mean()

        grads = ad.backward(objective(), [x, q])
        assert np.abs(grads[x].data).max() > 0
        assert np.abs(grads[q].data).max() > 0
        report = ad.finite_diff_check(objective, [("x", x), ("q", q)], h=1e-5, tol=1e-5)
        assert report.passed, report.summary()


class TestCalibrate:
    def test_zero_gain_is_identity_bitwise(self):
        s = Stream.from_seed(8)
        prev = ad.constant(s.normal((3, WIDTH)))
        new = ad.constant(s.normal((3, WIDTH)))
        out = calibrate(prev, new, ad.constant(np.zeros(())))
        assert np.array_equal(out.data, prev.data)

    def test_unit_gain_from_zero(self):
        s = Stream.from_seed(9)
        new = ad.constant(s.normal((3, WIDTH)))
        out = calibrate(ad.constant(np.zeros((3, WIDTH))), new, ad.constant(np.ones(())))
        assert np.array_equal(out.data, new.data)

    def test_residual_algebra(self):
        s = Stream.from_seed(10)
        prev = ad.constant(s.normal((3, WIDTH)))
        new = ad.constant(s.normal((3, WIDTH)))
        for gain in (0.3, -1.7, 2.5):
            out = calibrate(prev, new, ad.constant(np.array(gain)))
            assert np.allclose(out.data - prev.data, gain * new.data, atol=1e-12)


class TestCalibrationDecoder:
    def _inputs(self, seed, num_queries=3):
        s = Stream.from_seed(seed)
        grid = ad.constant(s.normal((4, 4, WIDTH)))
        queries = ad.constant(s.normal((num_queries, WIDTH)))
        words = ad.constant(s.normal((6, WIDTH)))
        mask = np.array([True, True, True, True, False, False])
        return grid, queries, words, mask

    def test_zero_gains_match_fixed_query_baseline(self):
        dec = _decoder()
        for trial in range(5):
            grid, queries, words, mask = self._inputs(20 + trial)
            with_calib, _, _ = dec(grid, queries, words, mask)
            baseline, _, _ = dec(grid, queries, words, mask, skip_calibration=True)
            assert np.max(np.abs(with_calib.data - baseline.data)) < 1e-6

    def test_affine_chain_accumulates(self):
        dec = _decoder(seed=11)
        for i, gain in enumerate(dec.gains):
            gain.data = np.array(0.1 * (i + 1))
        grid, queries, words, mask = self._inputs(12)
        _, final_queries, trace = dec(grid, queries, words, mask)
        acc = trace.initial_queries.data.copy()
        for gain, term in zip(trace.gains, trace.calibration_terms):
            acc = acc + gain * term.data
        assert np.allclose(final_queries.data, acc, atol=1e-10)

    def test_layer_count_changes_output(self):
        one = _decoder(seed=13, layers=1)
        two = _decoder(seed=13, layers=2)
        grid, queries, words, mask = self._inputs(14)
        out1, _, _ = one(grid, queries, words, mask)
        out2, _, _ = two(grid, queries, words, mask)
        assert not np.allclose(out1.data, out2.data)

    def test_positional_encodings_enter_once(self):
        dec = _decoder(seed=15)
        grid, queries, words, mask = self._inputs(16)
        _, _, trace = dec(grid, queries, words, mask)
        pos = dec._positions(4, 4, np.float64)[1]
        assert np.allclose(trace.initial_queries.data, queries.data + pos, atol=1e-12)

    def test_too_few_layers_rejected(self):
        with pytest.raises(ConfigurationError):
            _decoder(layers=0)

    def test_shared_calibrators_reuse_parameters(self):
        dec = _decoder(seed=17, share=True)
        names = [n for n, _ in dec.named_params("d")]
        assert any("calib_shared" in n for n in names)
        assert not any("calib0" in n for n in names)
        grid, queries, words, mask = self._inputs(18)
        out, final_q, _ = dec(grid, queries, words, mask)
        assert np.isfinite(out.data).all() and np.isfinite(final_q.data).all()

    def test_attention_rows_stochastic_every_layer(self):
        dec = _decoder(seed=19, layers=3)
        grid, queries, words, mask = self._inputs(21)
        collected = []
        dec(grid, queries, words, mask, collect_attn=collected)
        assert len(collected) == 6  # self + cross per layer
        for weights in collected:
            assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-6)

    def test_full_decoder_fd_including_gains(self):
        dec = _decoder(seed=22, layers=2, num_queries=2, positions=4)
        for i, gain in enumerate(dec.gains):
            gain.data = np.array(0.2 + 0.1 * i)  # nonzero so calibrators get gradient
        s = Stream.from_seed(23)
        grid = ad.constant(s.normal((2, 2, WIDTH)))
        queries = ad.constant(s.normal((2, WIDTH)))
        words = ad.constant(s.normal((4, WIDTH)))
        mask = np.array([True, True, True, False])
        w = ad.constant(s.normal((2, WIDTH)))

        def objective():
            stream_out, final_q, _ = dec(grid, queries, words, mask)
            return (stream_out * stream_out).mean() + (final_q * w).sum()

        report = ad.finite_diff_check(objective, list(dec.named_params("dec")),
                                      h=1e-5, tol=1e-3)
        assert report.passed, report.summary()
        gain_checks = [c for c in report.checks if "gain" in c.name]
        assert gain_checks and all(c.passed for c in gain_checks)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rpprep import autodiff as ad
from rpprep import codec, entropy
from rpprep.codec import PredictionMode, qstep_from_qp
from rpprep.entropy import BitstreamError, EntropyModel


def rand_image(rng, c=3, h=24, w=24):
    return np.round(rng.random((c, h, w)) * 255) / 255


class TestQuantParams:
    @pytest.mark.parametrize("qp,qstep", [(4, 1.0), (22, 8.0), (28, 16.0)])
    def test_known_steps(self, qp, qstep):
        assert qstep_from_qp(qp).qstep == qstep

    @pytest.mark.parametrize("qp", [-1, 52, 3.5])
    def test_out_of_range(self, qp):
        with pytest.raises(ValueError):
            qstep_from_qp(qp)


class TestBlocks:
    def test_16x16_grid(self):
        g = codec.partition_blocks(np.zeros((16, 16)))
        assert g.blocks.shape == (2, 2, 8, 8)

    def test_padding_and_crop(self):
        p = np.arange(72.0).reshape(9, 8)
        g = codec.partition_blocks(p)
        assert g.blocks.shape == (2, 1, 8, 8)
        np.testing.assert_array_equal(g.blocks[1, 0, 1:], np.repeat(p[8:9], 7, axis=0))
        np.testing.assert_array_equal(codec.reassemble(g), p)

    def test_constant_single_block(self):
        g = codec.partition_blocks(np.full((8, 8), 0.3))
        np.testing.assert_array_equal(g.blocks[0, 0], np.full((8, 8), 0.3))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            codec.partition_blocks(np.zeros((0, 8)))

    @given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**31))
    def test_roundtrip(self, h, w, seed):
        p = np.random.default_rng(seed).random((h, w))
        np.testing.assert_array_equal(codec.reassemble(codec.partition_blocks(p)), p)


class TestIntraPrediction:
    def test_dc_of_constants(self):
        pred = codec.intra_predict(PredictionMode.DC, [0.5] * 8, [0.5] * 8)
        np.testing.assert_allclose(pred, 0.5, atol=1e-15)

    def test_vertical_copy(self):
        pred = codec.intra_predict(PredictionMode.ANGULAR_V, [0.8] * 8, np.zeros(8))
        np.testing.assert_allclose(pred, 0.8, atol=1e-15)

    def test_horizontal_copy(self):
        left = np.linspace(0, 1, 8)
        pred = codec.intra_predict(PredictionMode.ANGULAR_H, np.zeros(8), left)
        np.testing.assert_allclose(pred, np.repeat(left[:, None], 8, axis=1), atol=1e-15)

    def test_planar_corner(self):
        # ((7-x) L[y] + (x+1) T[7] + (7-y) T[x] + (y+1) L[7]) / 16 at (0, 0) with T = ramp, L = 0:
        # (0 + 1 * 1 + 7 * 0 + 1 * 0) / 16
        top = np.arange(8) / 7.0
        pred = codec.intra_predict(PredictionMode.PLANAR, top, np.zeros(8))
        assert pred[0, 0] == pytest.approx(1 / 16, abs=1e-15)

    def test_diagonals(self):
        top, left = np.arange(1, 9) / 10.0, np.arange(11, 19) / 20.0
        d45 = codec.intra_predict(PredictionMode.ANGULAR_D45, top, left)
        d135 = codec.intra_predict(PredictionMode.ANGULAR_D135, top, left, corner=0.25)
        assert d45[0, 0] == top[1] and d45[7, 7] == top[7]
        assert d135[3, 3] == 0.25 and d135[0, 2] == top[1] and d135[4, 1] == left[2]

    @given(st.integers(0, 5), st.integers(0, 2**31))
    def test_outputs_in_unit_range(self, mode, seed):
        rng = np.random.default_rng(seed)
        pred = codec.intra_predict(mode, rng.random(8), rng.random(8), rng.random())
        assert pred.min() >= -1e-12 and pred.max() <= 1 + 1e-12


class TestModeCosts:
    def test_perfect_dc_prediction(self):
        q = qstep_from_qp(30)
        costs = codec.mode_costs(np.full((8, 8), 0.5), [0.5] * 8, [0.5] * 8, 0.5, q)
        assert costs[PredictionMode.DC] == pytest.approx(codec.lambda_mode(q) * codec.MODE_BITS[0], rel=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        block, top, left, corner = rng.random((8, 8)), rng.random(8), rng.random(8), rng.random()
        q = qstep_from_qp(30)
        lam = 0.85 * q.qstep ** 2
        costs = codec.mode_costs(block, top, left, corner, q)
        for m in PredictionMode:
            pred = codec._predict_direct(m, corner, top, left)
            sse = sum(((block[y, x] - pred[y, x]) * 255.0) ** 2 for y in range(8) for x in range(8))
            assert costs[m] == pytest.approx(sse + lam * codec.MODE_BITS[m], rel=1e-9, abs=1e-6)

    def test_identical_predictions_identical_distortion(self):
        # Constant neighbours make DC, H, V and both diagonals predict the same block.
        q = qstep_from_qp(20)
        block = np.random.default_rng(2).random((8, 8))
        c = codec.mode_costs(block, [0.4] * 8, [0.4] * 8, 0.4, q) - codec.lambda_mode(q) * codec.MODE_BITS
        assert len({round(v, 6) for v in c}) == 1


class TestSoftModeSelect:
    def test_uniform(self):
        with ad.precision(np.float64):
            w = codec.soft_mode_select(np.zeros(6), 0.1).data
        np.testing.assert_allclose(w, 1 / 6, rtol=1e-14)

    def test_two_modes(self):
        with ad.precision(np.float64):
            w = codec.soft_mode_select(np.array([1.0, 2.0]), 1.0).data
        np.testing.assert_allclose(w, [0.7311, 0.2689], atol=5e-5)

    def test_sharp_limit(self):
        with ad.precision(np.float64):
            w = codec.soft_mode_select(np.array([1.0, 2.0]), 0.01).data
        assert w[0] >= 1 - 1e-40

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            codec.soft_mode_select(np.zeros(6), 0.0)

    @given(st.integers(0, 2**31))
    def test_argmin_mass_grows_as_tau_shrinks(self, seed):
        costs = np.random.default_rng(seed).random(6) * 10
        k = int(np.argmin(costs))
        with ad.precision(np.float64):
            mass = [codec.soft_mode_select(costs, tau).data[k] for tau in (10, 3, 1, 0.3, 0.1, 0.03)]
        assert all(b >= a - 1e-15 for a, b in zip(mass, mass[1:]))


class TestTransform:
    def test_constant_block(self):
        c = codec.dct2(np.full((8, 8), 0.25))
        assert c[0, 0] == pytest.approx(2.0, abs=1e-12)
        c[0, 0] = 0
        assert np.abs(c).max() < 1e-12

    def test_basis_function(self):
        basis = np.outer(codec.DCT[1], codec.DCT[0])
        c = codec.dct2(basis)
        expected = np.zeros((8, 8))
        expected[1, 0] = 1.0
        np.testing.assert_allclose(c, expected, atol=1e-12)

    @given(st.integers(0, 2**31))
    def test_roundtrip_and_parseval(self, seed):
        x = np.random.default_rng(seed).random((8, 8))
        c = codec.dct2(x)
        assert np.abs(codec.idct2(c) - x).max() <= 1e-5
        assert abs((x ** 2).sum() - (c ** 2).sum()) <= 1e-4

    def test_tensor_path_matches_numpy(self):
        x = np.random.default_rng(4).random((3, 8, 8))
        with ad.precision(np.float64):
            t = codec.dct2(ad.Tensor(x)).data
        np.testing.assert_allclose(t, np.stack([codec.dct2(b) for b in x]), atol=1e-12)


class TestSoftRound:
    def test_zero_and_half(self):
        assert codec.soft_round(np.array(0.0), 5) == 0.0
        assert codec.soft_round(np.array(0.5), 5) == pytest.approx(0.5, abs=1e-15)

    def test_quarter_single_term(self):
        assert codec.soft_round(np.array(0.25), 1) == pytest.approx(0.25 - 1 / (2 * math.pi), abs=1e-12)
        assert codec.soft_round(np.array(0.25), 1) == pytest.approx(0.09085, abs=5e-6)

    def test_termwise_formula(self):
        y = np.linspace(-3, 3, 101)
        s = sum(((-1) ** (n + 1) / n) * np.sin(2 * np.pi * n * y) for n in range(1, 8))
        np.testing.assert_allclose(codec.soft_round(y, 7), y - s / (2 * np.pi), atol=1e-12)

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            codec.soft_round(np.zeros(1), 0)

    @given(st.floats(-5, 5), st.integers(1, 21))
    def test_odd_symmetry(self, y, n):
        assert codec.soft_round(np.array(-y), n) == pytest.approx(-codec.soft_round(np.array(y), n), abs=1e-12)


class TestQuantize:
    q8 = codec.QuantParams(22, 8.0)

    def test_zero(self):
        assert codec.quantize(np.zeros(1), self.q8, "hard")[0] == 0
        assert codec.quantize(np.zeros(1), self.q8, "soft").data[0] == 0

    def test_half_away_from_zero(self):
        assert codec.quantize(np.array([12.0, -12.0]), self.q8, "hard").tolist() == [2, -2]

    def test_soft_at_half_integer(self):
        with ad.precision(np.float64):
            assert codec.quantize(np.array([12.0]), self.q8, "soft", 5).data[0] == pytest.approx(1.5, abs=1e-12)

    def test_clamped_to_16_bit(self):
        assert codec.quantize(np.array([1e9, -1e9]), codec.QuantParams(4, 1.0), "hard").tolist() == [32767, -32768]

    def test_dequantize(self):
        np.testing.assert_array_equal(codec.dequantize(np.array([2, -3]), self.q8), [16.0, -24.0])


class TestForwardDiff:
    def test_constant_image_exact(self):
        rec, bpp = codec.forward_diff(np.full((3, 16, 16), 0.5), 30, neighbors="source")
        np.testing.assert_array_equal(rec.data, 0.5)
        assert float(bpp.data[0]) >= 0

    def test_constant_image_hard_neighbors(self):
        # 0.5 is 127.5 in 8-bit units, so the rounded codec reconstruction
        # used as neighbours sits half a level away.
        rec, _ = codec.forward_diff(np.full((3, 16, 16), 0.5), 30)
        assert np.abs(rec.data - 0.5).max() <= 1 / 255

    @pytest.mark.parametrize("mode", ["hard", "recon", "source"])
    def test_shapes_and_range(self, mode):
        x = np.random.default_rng(1).random((2, 3, 16, 24)).astype(np.float32)
        rec, bpp = codec.forward_diff(x, 30, neighbors=mode)
        assert rec.shape == x.shape and bpp.size == 1
        assert rec.data.min() >= 0 and rec.data.max() <= 1

    def test_near_lossless_regime(self, natural20):
        x = natural20[0]
        hard = codec.decode_hard(codec.encode_hard(x, 4))
        with ad.no_grad(), ad.precision(np.float64):
            soft = codec.forward_diff(x, 4, tau=0.01, n_terms=9)[0].data

        def psnr(a, b):
            return 10 * np.log10(1 / np.mean((a - b) ** 2))

        assert psnr(x, hard) >= 45
        assert psnr(x, soft) >= psnr(x, hard) - 1.0

    def test_gradient_reaches_pixels_and_model(self):
        x = ad.Tensor(np.random.default_rng(5).random((3, 16, 16)).astype(np.float32), requires_grad=True)
        m = EntropyModel()
        rec, bpp = codec.forward_diff(x, 30, model=m)
        gx, gm = ad.gradients(ad.tsum(rec) + bpp, [x, m.log_scale])
        assert np.abs(gx).sum() > 0 and np.abs(gm).sum() > 0

    @pytest.mark.parametrize("mode", ["hard", "source"])
    def test_grad_check_16x16(self, mode):
        x = np.random.default_rng(8).random((3, 16, 16))
        m = EntropyModel()

        def f(t):
            rec, bpp = codec.forward_diff(t, 30, model=m, neighbors=mode)
            return ad.mean(rec * rec) + bpp * 0.01

        rep = ad.grad_check(f, x.astype(np.float32), eps=1e-5, tol=1e-3, n_coords=20, richardson=True,
                            ladder=3, floor=1e-2)
        assert rep.passed, rep.summary()

    def test_rejects_bad_neighbors(self):
        with pytest.raises(ValueError):
            codec.forward_diff(np.zeros((3, 8, 8)), 30, neighbors="oracle")


class TestHardCodec:
    @given(st.integers(0, 2**31), st.integers(0, 51), st.sampled_from([1, 3]),
           st.integers(1, 40), st.integers(1, 40), st.booleans())
    def test_decoder_matches_encoder(self, seed, qp, c, h, w, embed):
        img = rand_image(np.random.default_rng(seed), c, h, w)
        res = codec.encode_hard_detailed(img, qp, embed_model=embed)
        dec = codec.decode_hard(res.bitstream)
        assert dec.shape == img.shape
        np.testing.assert_array_equal(dec, res.reconstruction)

    def test_header_fields(self):
        img = rand_image(np.random.default_rng(0), 3, 10, 17)
        bs = codec.Bitstream.from_bytes(codec.encode_hard(img, 33))
        assert (bs.qp, bs.width, bs.height, bs.channels) == (33, 17, 10, 3)
        assert codec.encode_hard(img, 33)[:4] == b"DBPG"

    def test_constant_image_is_cheap(self):
        img = np.full((3, 64, 64), 0.4)
        for qp in (0, 22, 51):
            res = codec.encode_hard_detailed(img, qp)
            ac = res.levels.copy()
            ac[..., 0] = 0
            assert not ac.any()
            payload = codec.Bitstream.from_bytes(res.bitstream).payload
            assert len(payload) * 8 / (64 * 64) < 0.1

    def test_all_zero_blocks_cost_a_fraction_of_a_bit(self):
        table = entropy.CodingTable.from_scales(np.full(64, 2.0))
        zeros = np.zeros((4000, 64), dtype=np.int64)
        assert len(entropy.encode_blocks(zeros, table)) * 8 < 0.1 * 4000

    @given(st.integers(0, 2 ** 32 - 1))
    def test_block_flags_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        table = entropy.CodingTable.from_scales(np.exp(rng.uniform(-1, 3, 64)))
        lv = np.round(rng.laplace(0, 2, (12, 64))).astype(np.int64)
        lv[rng.random(12) < 0.4] = 0
        dc_only = rng.random(12) < 0.3
        lv[dc_only, 1:] = 0
        data = entropy.encode_blocks(lv, table)
        np.testing.assert_array_equal(entropy.decode_blocks(data, 12, table), lv)

    def test_higher_qp_fewer_bytes(self):
        img = rand_image(np.random.default_rng(1), 3, 32, 32)
        sizes = [len(codec.encode_hard(img, qp)) for qp in (10, 25, 40, 51)]
        assert sizes == sorted(sizes, reverse=True)

    def test_bad_magic(self):
        data = bytearray(codec.encode_hard(np.zeros((3, 8, 8)), 30))
        data[0] ^= 0xFF
        with pytest.raises(BitstreamError) as exc:
            codec.decode_hard(bytes(data))
        assert exc.value.offset == 0

    def test_truncation_reports_offset(self):
        data = codec.encode_hard(rand_image(np.random.default_rng(2)), 30)
        with pytest.raises(BitstreamError) as exc:
            codec.decode_hard(data[:-7])
        assert exc.value.offset is not None

    def test_single_bit_flip_never_silent(self):
        img = rand_image(np.random.default_rng(3), 3, 16, 16)
        data = codec.encode_hard(img, 28)
        ref = codec.decode_hard(data)
        rng = np.random.default_rng(4)
        for pos in rng.choice(len(data) * 8, 64, replace=False):
            bad = bytearray(data)
            bad[pos // 8] ^= 1 << (pos % 8)
            try:
                out = codec.decode_hard(bytes(bad))
            except (BitstreamError, ValueError):
                continue
            assert not np.array_equal(out, ref)

    def test_planes_independent(self):
        rng = np.random.default_rng(6)
        a = rand_image(rng, 3, 16, 16)
        b = a.copy()
        b[2] = rand_image(rng, 1, 16, 16)[0]
        ra = codec.encode_hard_detailed(a, 30).reconstruction
        rb = codec.encode_hard_detailed(b, 30).reconstruction
        np.testing.assert_array_equal(ra[:2], rb[:2])

    def test_oversized_rejected(self):
        with pytest.raises(ValueError):
            codec.encode_hard(np.zeros((1, 1, 65536)), 30)

"""Blockwise normal-float quantization, float casts, and the container format."""

import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lqdec.codebook import build_codebook
from lqdec.errors import FormatError
from lqdec.quant import (
    HEADER_BYTES,
    QuantConfig,
    QuantizedMatrix,
    cast_float,
    dequantize,
    exact_container_bytes,
    matmul_dequant,
    quantize_nf,
    read_quantized,
    rtn_quantize_unsigned,
    storage_bits_per_param,
    write_quantized,
)
from lqdec.tensor_io import gen_matrix

CFG = QuantConfig(4, 8, "fp32", 64, 256)


class TestQuantConfig:
    def test_parse(self):
        assert QuantConfig.parse("4,8,fp32,64,256") == CFG
        assert QuantConfig.parse(" 2, 2, fp16, 16, 16 ") == QuantConfig(2, 2, "fp16", 16, 16)

    def test_label_round_trip(self):
        assert QuantConfig.parse(CFG.label()) == CFG

    @pytest.mark.parametrize("text", [
        "4,8,fp32,64", "5,8,fp32,64,256", "4,9,fp32,64,256",
        "4,8,fp64,64,256", "4,8,fp32,0,256", "4,8,fp32,64,-1", "x",
    ])
    def test_parse_rejects(self, text):
        with pytest.raises(ValueError):
            QuantConfig.parse(text)

    @pytest.mark.parametrize("cfg,expected", [
        ((4, 8, "fp32", 64, 256), Fraction(2113, 512)),
        ((3, 8, "fp32", 64, 256), Fraction(1601, 512)),
        ((2, 2, "fp16", 16, 16), Fraction(35, 16)),
        ((8, 8, "fp32", 64, 256), Fraction(4161, 512)),
    ])
    def test_storage_bits_exact(self, cfg, expected):
        assert storage_bits_per_param(QuantConfig(*cfg)) == expected

    def test_storage_bits_floats(self):
        assert float(storage_bits_per_param(CFG)) == 4.126953125
        assert float(storage_bits_per_param(QuantConfig(2, 2, "fp16", 16, 16))) == 2.1875


class TestCastFloat:
    def test_fp32_identity(self):
        x = np.array([1.1, -2.5, 3e38], dtype=np.float32)
        assert np.array_equal(cast_float(x, "fp32"), x)

    def test_fp16_clips_to_max_finite(self):
        out = cast_float(np.array([70000.0, -70000.0], dtype=np.float32), "fp16")
        assert np.array_equal(out, np.array([65504.0, -65504.0], dtype=np.float32))
        assert np.all(np.isfinite(out))

    def test_fp16_rounds_to_nearest(self):
        # 1 + 2**-11 sits halfway between adjacent fp16 values around 1.0
        out = cast_float(np.array([1.0 + 2.0 ** -11], dtype=np.float32), "fp16")
        assert out[0] == np.float32(1.0)

    def test_bf16_round_to_nearest_even(self):
        # 1 + 2**-8 is halfway between bf16 neighbors 1.0 and 1 + 2**-7;
        # ties go to the even mantissa on both sides
        out = cast_float(np.array([1.0 + 2.0 ** -8, 1.0 + 3.0 * 2.0 ** -8], dtype=np.float32), "bf16")
        assert out[0] == np.float32(1.0)
        assert out[1] == np.float32(1.0 + 2.0 ** -6)

    def test_bf16_saturates_instead_of_overflowing(self):
        out = cast_float(np.array([3.4e38, -3.4e38], dtype=np.float32), "bf16")
        assert np.all(np.isfinite(out))
        assert out[0] == np.float32(3.3895313892515355e38)
        assert out[1] == -out[0]

    def test_bf16_exact_values_pass_through(self):
        x = np.array([1.0, -0.5, 1.5, 384.0], dtype=np.float32)
        assert np.array_equal(cast_float(x, "bf16"), x)

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            cast_float(np.zeros(1, dtype=np.float32), "fp64")


class TestRtnUnsigned:
    def test_frozen_small_case(self):
        # gmax 6, step 6/7; 3 * 7/6 = 3.5 rounds away from zero to 4
        codes, steps = rtn_quantize_unsigned(np.array([3.0, 6.0]), 3, 2)
        assert codes.tolist() == [4, 7]
        assert steps.tolist() == [6.0 / 7.0]

    def test_half_away_from_zero(self):
        # 5 * 7/14 = 2.5 rounds to 3, not to the even neighbor 2
        codes, _ = rtn_quantize_unsigned(np.array([5.0, 14.0]), 3, 2)
        assert codes.tolist() == [3, 7]

    def test_zero_group(self):
        codes, steps = rtn_quantize_unsigned(np.zeros(4), 2, 2)
        assert codes.tolist() == [0, 0, 0, 0]
        assert steps.tolist() == [0.0, 0.0]

    def test_max_maps_to_top_code(self):
        rng = np.random.default_rng(0)
        values = rng.uniform(0, 9, 64)
        codes, steps = rtn_quantize_unsigned(values, 4, 16)
        top = codes.reshape(4, 16).max(axis=1)
        assert np.all(top == 15)

    def test_multiply_before_divide_is_exact_on_grid(self):
        # values already of the form step * code reconstruct bit exactly
        step = np.float32(0.1)
        codes_in = np.array([0, 3, 7, 15], dtype=np.float64)
        values = (codes_in * np.float64(step)).astype(np.float64)
        codes, steps = rtn_quantize_unsigned(values, 4, 4)
        recon = (codes.astype(np.float64) * (15.0 * np.float64(steps[0]))) / 15.0
        assert codes.tolist() == [0, 3, 7, 15]
        assert np.array_equal(recon, values)


class TestQuantizeNF:
    def test_exact_signed_unit_values(self):
        w = np.array([[1.0, -1.0, 0.0, 0.5]], dtype=np.float32)
        q = quantize_nf(w, QuantConfig(4, 8, "fp32", 4, 4))
        out = dequantize(q)
        # codebook holds -1, 0, 1 exactly and the block scale is exact
        assert out[0, 0] == 1.0
        assert out[0, 1] == -1.0
        assert out[0, 2] == 0.0

    def test_single_entry_round_trips(self):
        w = np.array([[0.7]], dtype=np.float32)
        q = quantize_nf(w, CFG)
        assert dequantize(q)[0, 0] == np.float32(0.7)

    def test_ties_take_lower_index(self):
        from lqdec.quant import nearest_level_codes
        cb = build_codebook(2)
        eps = 1e-12
        values = np.array([
            cb.midpoints[1], cb.midpoints[1] + eps, cb.midpoints[1] - eps,
            cb.midpoints[2], cb.levels[3],
        ])
        codes = nearest_level_codes(values, cb)
        assert codes.tolist() == [1, 2, 1, 2, 3]

    def test_codes_are_nearest_levels(self):
        from lqdec.quant import nearest_level_codes
        cb = build_codebook(4)
        rng = np.random.default_rng(0)
        values = rng.uniform(-1, 1, 500)
        codes = nearest_level_codes(values, cb)
        dist_chosen = np.abs(values - cb.levels[codes])
        dist_all = np.abs(values[:, None] - cb.levels[None, :]).min(axis=1)
        assert np.array_equal(dist_chosen, dist_all)

    def test_zero_block_canonical_codes(self):
        w = np.zeros((2, 8), dtype=np.float32)
        w[0] = np.linspace(-1, 1, 8)
        cfg = QuantConfig(2, 8, "fp32", 8, 8)
        q = quantize_nf(w, cfg)
        cb = build_codebook(2)
        from lqdec.packing import unpack_bits
        codes = unpack_bits(q.codes, 2, 16).reshape(2, 8)
        assert np.all(codes[1] == cb.zero_index)
        assert np.all(dequantize(q)[1] == 0.0)

    def test_idempotent_at_fp32(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((96, 64)).astype(np.float32)
        q1 = quantize_nf(w, CFG)
        q2 = quantize_nf(dequantize(q1), CFG)
        assert q1.codes == q2.codes
        assert q1.s_codes == q2.s_codes
        assert np.array_equal(q1.group_scales, q2.group_scales)

    def test_on_grid_matrix_round_trips_exactly(self):
        cfg = QuantConfig(3, 4, "fp32", 16, 16)
        w = gen_matrix("on-grid", 48, 32, seed=11, config=cfg)
        q = quantize_nf(w, cfg)
        assert np.array_equal(dequantize(q), w)

    def test_mse_decreases_with_code_bits(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((250, 400)).astype(np.float32)
        mses = []
        for b0 in (2, 3, 4, 8):
            q = quantize_nf(w, QuantConfig(b0, 8, "fp32", 50, 100))
            mses.append(float(np.mean((w - dequantize(q)) ** 2)))
        assert mses == sorted(mses, reverse=True)
        assert mses[-1] < mses[0] / 10

    def test_block_scales_are_nonnegative(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal((32, 32)).astype(np.float32)
        q = quantize_nf(w, QuantConfig(4, 8, "fp16", 16, 16))
        assert np.all(q.group_scales >= 0)

    @pytest.mark.parametrize("bad", [
        np.zeros((0, 4), dtype=np.float32),
        np.full((2, 2), np.nan, dtype=np.float32),
        np.zeros(4, dtype=np.float32),
    ])
    def test_rejects_bad_input(self, bad):
        with pytest.raises(ValueError):
            quantize_nf(bad, CFG)

    @given(seed=st.integers(min_value=0, max_value=10 ** 6))
    @settings(max_examples=25, deadline=None)
    def test_projection_never_increases_with_exact_scale(self, seed):
        # blocks scaled so the absmax is a power of two reconstruct with
        # error no larger than half the widest level gap times the scale
        rng = np.random.default_rng(seed)
        w = (rng.uniform(-1, 1, (4, 16)) * 0.5).astype(np.float32)
        idx = rng.integers(0, 16, 4)
        w[np.arange(4), idx] = np.float32(1.0)
        cfg = QuantConfig(4, 8, "fp32", 16, 16)
        out = dequantize(quantize_nf(w, cfg))
        cb = build_codebook(4)
        gap = np.max(np.diff(cb.levels))
        assert np.max(np.abs(out - w)) <= gap / 2 + 1e-7


class TestContainer:
    def test_exact_container_bytes(self):
        assert HEADER_BYTES == 33
        assert exact_container_bytes(64, 64, CFG) == 33 + 2048 + 64 + 4

    def test_payload_bits_match_config(self):
        rows = cols = 256
        cfg = QuantConfig(3, 8, "fp32", 64, 256)
        layout = exact_container_bytes(rows, cols, cfg)
        codes = (rows * cols * 3 + 7) // 8
        blocks = rows * cols // 64
        s_bytes = (blocks * 8 + 7) // 8
        groups = (blocks + 255) // 256
        assert layout == 33 + codes + s_bytes + 4 * groups

    def test_write_read_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((40, 24)).astype(np.float32)
        cfg = QuantConfig(2, 4, "bf16", 8, 4)
        q = quantize_nf(w, cfg)
        path = tmp_path / "m.lqq"
        write_quantized(path, q)
        assert path.stat().st_size == exact_container_bytes(40, 24, cfg)
        back = read_quantized(path)
        assert back.config == cfg
        assert (back.rows, back.cols) == (40, 24)
        assert back.codes == q.codes
        assert back.s_codes == q.s_codes
        assert np.array_equal(back.group_scales, q.group_scales)
        assert np.array_equal(dequantize(back), dequantize(q))

    @pytest.mark.parametrize("fmt", ["fp32", "fp16", "bf16"])
    def test_scale_serialization_exact(self, tmp_path, fmt):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((16, 16)).astype(np.float32)
        cfg = QuantConfig(4, 8, fmt, 16, 4)
        q = quantize_nf(w, cfg)
        path = tmp_path / "m.lqq"
        write_quantized(path, q)
        assert np.array_equal(read_quantized(path).group_scales, q.group_scales)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.lqq"
        path.write_bytes(b"LQQ1\x01\x00")
        with pytest.raises(FormatError):
            read_quantized(path)

    def test_bad_magic(self, tmp_path):
        rng = np.random.default_rng(5)
        q = quantize_nf(rng.standard_normal((8, 8)).astype(np.float32), QuantConfig(2, 2, "fp32", 4, 4))
        path = tmp_path / "m.lqq"
        write_quantized(path, q)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_quantized(path)

    def test_bad_version(self, tmp_path):
        rng = np.random.default_rng(5)
        q = quantize_nf(rng.standard_normal((8, 8)).astype(np.float32), QuantConfig(2, 2, "fp32", 4, 4))
        path = tmp_path / "m.lqq"
        write_quantized(path, q)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<H", raw, 4, 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_quantized(path)

    def test_nonzero_padding_rejected(self, tmp_path):
        # 2-bit codes for a 2x3 matrix leave padding bits in the last byte
        w = np.ones((2, 3), dtype=np.float32)
        cfg = QuantConfig(2, 2, "fp32", 6, 1)
        q = quantize_nf(w, cfg)
        path = tmp_path / "m.lqq"
        write_quantized(path, q)
        raw = bytearray(path.read_bytes())
        raw[HEADER_BYTES + 1] |= 0xF0
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_quantized(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        rng = np.random.default_rng(6)
        q = quantize_nf(rng.standard_normal((8, 8)).astype(np.float32), QuantConfig(2, 2, "fp32", 4, 4))
        path = tmp_path / "m.lqq"
        write_quantized(path, q)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            read_quantized(path)

    def test_nonfinite_scale_rejected(self, tmp_path):
        rng = np.random.default_rng(6)
        cfg = QuantConfig(2, 2, "fp32", 4, 16)
        q = quantize_nf(rng.standard_normal((8, 8)).astype(np.float32), cfg)
        path = tmp_path / "m.lqq"
        write_quantized(path, q)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<f", raw, len(raw) - 4, np.inf)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_quantized(path)


class TestQuantizedMatrixValidation:
    def test_wrong_code_length(self):
        with pytest.raises(FormatError):
            QuantizedMatrix(rows=4, cols=4, config=QuantConfig(2, 2, "fp32", 4, 4),
                            codes=b"\x00", s_codes=b"\x00",
                            group_scales=np.ones(1, dtype=np.float32))

    def test_negative_scale(self):
        cfg = QuantConfig(2, 2, "fp32", 4, 4)
        with pytest.raises(FormatError):
            QuantizedMatrix(rows=4, cols=4, config=cfg,
                            codes=b"\x00" * 4, s_codes=b"\x00",
                            group_scales=-np.ones(1, dtype=np.float32))


class TestMatmulDequant:
    def test_matches_dense_reconstruction(self):
        rng = np.random.default_rng(8)
        w = rng.standard_normal((32, 48)).astype(np.float32)
        x = rng.standard_normal((5, 32)).astype(np.float32)
        q = quantize_nf(w, CFG)
        got = matmul_dequant(x, q)
        want = x @ dequantize(q)
        assert np.allclose(got, want, rtol=1e-6, atol=1e-6)

    def test_with_factors(self):
        from lqdec.factorize import factorize
        rng = np.random.default_rng(9)
        w = rng.standard_normal((24, 24)).astype(np.float32)
        x = rng.standard_normal((3, 24)).astype(np.float32)
        q = quantize_nf(w, CFG)
        fac = factorize(np.asarray(w, dtype=np.float64), rank=4)
        got = matmul_dequant(x, q, fac)
        want = x @ dequantize(q) + (x @ fac.l1) @ fac.l2
        assert np.allclose(got, want, rtol=1e-6, atol=1e-6)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(10)
        q = quantize_nf(rng.standard_normal((8, 8)).astype(np.float32), QuantConfig(2, 2, "fp32", 4, 4))
        with pytest.raises(ValueError):
            matmul_dequant(np.zeros((2, 9), dtype=np.float32), q)

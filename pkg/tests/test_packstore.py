"""
Unit tests for packed storage, memory accounting and shift-add inference.
"""

import math
import struct

import numpy as np
import pytest

from powquant.services.inq import PartitionState, partition_layer, quantize_group
from powquant.services.nncore import LayerSpec, ModelGraph, copy_model, forward, multiply_kernel
from powquant.services.packstore import (
    SQW_MAGIC,
    PackedModel,
    bench,
    memory_report,
    pack_codes,
    pack_model,
    pack_tensors,
    payload_size,
    read_sqw,
    serialize,
    shiftadd_forward,
    skip_rate,
    unpack_codes,
    unpack_model,
    write_sqw,
)
from powquant.utils import (
    BadMagicError,
    LevelSetError,
    RequiresQuantizedModelError,
    SQWFormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)


def quantize_fully(model, bits, max_level_override=None):
    """One-shot quantization of every quantizable tensor, in place."""
    state = PartitionState.start(model, bits, max_level_override)
    for name in state.free_masks:
        w = model.params[name]
        quantize_group(state, name, w, partition_layer(w, state.free_masks[name], 1.0))
    return state


def random_model(rng, seed):
    """A small dense or conv classifier with random widths."""
    if rng.random() < 0.5:
        specs = []
        for _ in range(int(rng.integers(1, 4))):
            specs += [LayerSpec("dense", units=int(rng.integers(1, 11))), LayerSpec("relu")]
        specs[-1] = LayerSpec("softmax_output")
        return ModelGraph((int(rng.integers(2, 13)),), specs, seed=seed)
    side = int(rng.choice([4, 6]))
    specs = [LayerSpec("pad2d", pad=1), LayerSpec("conv2d", filters=int(rng.integers(1, 5)), kernel_size=3),
             LayerSpec("relu"), LayerSpec("maxpool2x2"), LayerSpec("flatten"),
             LayerSpec("dense", units=int(rng.integers(2, 6))), LayerSpec("softmax_output")]
    return ModelGraph((side, side, int(rng.integers(1, 4))), specs, seed=seed)


def quantize_partially(model, bits, rng):
    """Quantize each tensor to a random fraction: none, some or all of it."""
    state = PartitionState.start(model, bits)
    for name in state.free_masks:
        w = model.params[name]
        fraction = float(rng.choice([0.0, rng.uniform(0.05, 0.95), 1.0]))
        quantize_group(state, name, w, partition_layer(w, state.free_masks[name], fraction))
    return state


def expected_sqw_size(model, state):
    """Byte count of an SQW file from the layout alone."""
    size = len(SQW_MAGIC) + 4
    for name, value in model.params.items():
        size += 2 + len(name.encode("utf-8")) + 2 + 4 * value.ndim
        if name in state.free_masks and not state.free_masks[name].any():
            size += 5 + math.ceil(state.level_sets[name].bit_width * value.size / 8)
        else:
            size += 4 * value.size
    return size


def level_header_offset(packed):
    """Byte offset of the first tensor's bit width field."""
    tensor = packed.tensors[0]
    return len(SQW_MAGIC) + 4 + 2 + len(tensor.name.encode("utf-8")) + 2 + 4 * len(tensor.shape)


class TestBitPacking:
    """Test the b-bit payload layout."""

    def test_payload_size(self):
        """Test 1000 weights at 5 bits take 625 bytes."""
        assert payload_size(5, 1000) == 625
        assert len(pack_codes(np.zeros(1000, dtype=np.uint32), 5)) == 625
        assert payload_size(3, 3) == 2

    def test_lsb_first(self):
        """Test codes are laid out least significant bit first."""
        assert pack_codes(np.array([1, 2]), 3) == bytes([0b00010001])

    def test_unpack_inverts_pack(self, rng):
        """Test unpacking recovers the codes."""
        codes = rng.integers(0, 2 ** 7, size=333).astype(np.uint32)
        np.testing.assert_array_equal(unpack_codes(pack_codes(codes, 7), 7, 333), codes)

    def test_unpack_wrong_length(self):
        """Test a short payload raises error."""
        with pytest.raises(TruncatedFileError):
            unpack_codes(b"\x00", 5, 10)


class TestSQW:
    """Test the SQW byte format."""

    def test_round_trip(self, conv_model):
        """Test a quantized model survives pack and unpack."""
        model = copy_model(conv_model)
        state = quantize_fully(model, 5)
        packed = unpack_model(pack_model(model, state))
        restored = packed.load_into(ModelGraph(model.input_shape, model.specs, seed=77))
        for name, value in model.params.items():
            np.testing.assert_array_equal(restored.params[name], value)
        assert set(packed.level_sets) == set(model.quantizable_names())

    def test_biases_stay_float(self, dense_model):
        """Test biases are stored as float32."""
        model = copy_model(dense_model)
        packed = pack_tensors(model, quantize_fully(model, 4))
        assert packed["0.dense.weight"].is_packed
        assert not packed["0.dense.bias"].is_packed

    def test_partially_quantized_tensor_stays_float(self, dense_model):
        """Test only fully quantized tensors are packed."""
        model = copy_model(dense_model)
        state = PartitionState.start(model, 4)
        name = "0.dense.weight"
        quantize_group(state, name, model.params[name], partition_layer(model.params[name],
                                                                        state.free_masks[name], 0.5))
        assert not pack_tensors(model, state)[name].is_packed

    def test_deterministic_bytes(self, dense_model):
        """Test packing the same model twice gives identical bytes."""
        model = copy_model(dense_model)
        state = quantize_fully(model, 6)
        assert pack_model(model, state) == pack_model(model, state)

    def test_empty_model(self):
        """Test a model with no tensors round-trips."""
        data = serialize(PackedModel())
        assert data == SQW_MAGIC + struct.pack("<HH", 1, 0)
        assert unpack_model(data).tensors == []

    def test_bad_magic(self, dense_model):
        """Test a wrong magic raises error."""
        data = pack_model(dense_model)
        with pytest.raises(BadMagicError):
            unpack_model(b"NOPE" + data[4:])

    def test_unsupported_version(self, dense_model):
        """Test an unknown version raises error."""
        data = pack_model(dense_model)
        with pytest.raises(UnsupportedVersionError):
            unpack_model(data[:4] + struct.pack("<H", 9) + data[6:])

    def test_truncated(self, dense_model):
        """Test truncated data raises error."""
        model = copy_model(dense_model)
        data = pack_model(model, quantize_fully(model, 4))
        for cut in [2, 7, len(data) // 2, len(data) - 1]:
            with pytest.raises(TruncatedFileError):
                unpack_model(data[:cut])

    def test_trailing_bytes(self, dense_model):
        """Test bytes after the last tensor raise error."""
        with pytest.raises(SQWFormatError):
            unpack_model(pack_model(dense_model) + b"\x00")

    @pytest.mark.parametrize("seed", range(100))
    def test_random_partial_models(self, seed):
        """Test mixed, partially quantized models round-trip exactly at the layout's byte count."""
        rng = np.random.default_rng([seed, 29])
        model = random_model(rng, seed)
        state = quantize_partially(model, int(rng.integers(2, 10)), rng)
        data = pack_model(model, state)
        assert len(data) == expected_sqw_size(model, state)
        restored = unpack_model(data).load_into(ModelGraph(model.input_shape, model.specs, seed=seed + 1000))
        for name, value in model.params.items():
            np.testing.assert_array_equal(restored.params[name], value)

    def test_exponents_outside_i16(self, dense_model):
        """Test a 16-bit level set below 2^-32768 is rejected when packing."""
        model = copy_model(dense_model)
        state = quantize_fully(model, 16, max_level_override=0.125)
        assert state.level_sets["0.dense.weight"].n2 < -0x8000
        with pytest.raises(SQWFormatError, match="i16"):
            pack_model(model, state)

    def test_exponents_at_i16_limit(self, dense_model):
        """Test n2 = -32768 still packs and round-trips."""
        model = copy_model(dense_model)
        state = quantize_fully(model, 16, max_level_override=0.25)
        assert state.level_sets["0.dense.weight"].n2 == -0x8000
        packed = unpack_model(pack_model(model, state))
        assert packed.level_sets["0.dense.weight"] == state.level_sets["0.dense.weight"]

    @pytest.mark.parametrize("field,fmt,value", [
        ("bit_width", "<B", 0),
        ("bit_width", "<B", 1),
        ("bit_width", "<B", 200),
        ("n2", "<h", -100),
    ])
    def test_corrupt_level_header(self, dense_model, field, fmt, value):
        """Test an inconsistent bit width or exponent pair raises a format error."""
        model = copy_model(dense_model)
        packed = pack_tensors(model, quantize_fully(model, 4))
        assert packed.tensors[0].is_packed
        data = bytearray(serialize(packed))
        offset = level_header_offset(packed) + (3 if field == "n2" else 0)
        struct.pack_into(fmt, data, offset, value)
        with pytest.raises(SQWFormatError, match="corrupt level set header") as excinfo:
            unpack_model(bytes(data))
        assert not isinstance(excinfo.value, LevelSetError)

    def test_file_round_trip(self, dense_model, tmp_path):
        """Test writing and reading an SQW file."""
        model = copy_model(dense_model)
        state = quantize_fully(model, 3)
        size = write_sqw(tmp_path / "m.sqw", model, state)
        assert size == (tmp_path / "m.sqw").stat().st_size
        assert read_sqw(tmp_path / "m.sqw").names() == list(model.params)


class TestMemoryReport:
    """Test memory accounting."""

    @pytest.mark.parametrize("bits,ratio", [(5, 6.4), (7, 4.571), (8, 4.0), (9, 3.556)])
    def test_headline_ratios(self, bits, ratio):
        """Test 32/b reductions on a million weights."""
        model = ModelGraph((1000,), [LayerSpec("dense", units=1000)], seed=0)
        packed = pack_tensors(model, quantize_fully(model, bits))
        report = memory_report(packed)
        assert report.float_bytes == 4_000_000
        assert report.packed_bytes == bits * 125_000
        assert report.reduction_ratio == pytest.approx(ratio, abs=1e-3)
        assert report.whole_model_ratio < report.reduction_ratio

    def test_float_only_model(self, dense_model):
        """Test an unquantized model reports a ratio of 1."""
        report = memory_report(pack_tensors(dense_model))
        assert report.reduction_ratio == 1.0
        assert report.whole_model_ratio == 1.0


class TestShiftAdd:
    """Test multiplier-free inference."""

    def test_single_product(self):
        """Test 2^3 * 5 = 40 without a multiply."""
        model = ModelGraph((1,), [LayerSpec("dense", units=1)], dtype=np.float32)
        model.set_param("0.dense.weight", np.array([[8.0]]))
        packed = pack_tensors(model, quantize_fully(model, 3))
        np.testing.assert_array_equal(shiftadd_forward(packed, model, np.array([[5.0]])), [[40.0]])

    @pytest.mark.parametrize("fixture", ["dense_model", "conv_model", "rnn_model"])
    def test_matches_multiply_kernel(self, fixture, request, rng):
        """Test shift-add outputs are bit-identical to the multiply kernel."""
        model = copy_model(request.getfixturevalue(fixture))
        packed = unpack_model(pack_model(model, quantize_fully(model, 5)))
        restored = packed.load_into(copy_model(model))
        X = rng.normal(size=(4,) + model.input_shape).astype(np.float32)
        expected = forward(restored, X, kernel=multiply_kernel)
        np.testing.assert_array_equal(shiftadd_forward(packed, restored, X), expected)

    @pytest.mark.parametrize("seed", range(20))
    def test_random_models_match_multiply_kernel(self, seed):
        """Test shift-add is bit-identical to the multiply kernel on random models and inputs."""
        rng = np.random.default_rng([seed, 31])
        model = random_model(rng, seed)
        packed = unpack_model(pack_model(model, quantize_fully(model, int(rng.integers(2, 10)))))
        restored = packed.load_into(copy_model(model))
        X = rng.normal(scale=2.0, size=(100,) + model.input_shape).astype(np.float32)
        expected = forward(restored, X, kernel=multiply_kernel)
        np.testing.assert_array_equal(shiftadd_forward(packed, restored, X), expected)

    def test_requires_quantized_model(self, dense_model):
        """Test float tensors are rejected."""
        packed = pack_tensors(dense_model)
        with pytest.raises(RequiresQuantizedModelError, match="requires quantized model"):
            shiftadd_forward(packed, dense_model, np.zeros((1, 6)))

    def test_all_zero_weights(self, dense_model):
        """Test zero codes are skipped and only biases remain."""
        model = copy_model(dense_model)
        for name in model.quantizable_names():
            model.set_param(name, np.zeros_like(model.params[name]))
        model.set_param("2.dense.bias", np.array([1.0, 2.0, 3.0]))
        packed = pack_tensors(model, quantize_fully(model, 4, max_level_override=1.0))
        assert skip_rate(packed) == 1.0
        out = shiftadd_forward(packed, model, np.ones((2, 6)))
        np.testing.assert_allclose(out, np.tile(np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum(), (2, 1)),
                                   rtol=1e-6)

    def test_bench_single_repetition(self, conv_model, rng):
        """Test bench with one repetition reports one timing per kernel."""
        model = copy_model(conv_model)
        packed = pack_tensors(model, quantize_fully(model, 4))
        report = bench(packed, model, rng.normal(size=(2, 6, 6, 2)).astype(np.float32), repetitions=1)
        assert len(report.multiply_times_s) == 1
        assert len(report.shiftadd_times_s) == 1
        assert report.batch_size == 2
        assert 0.0 <= report.skip_rate <= 1.0

    def test_bench_invalid_repetitions(self, dense_model):
        """Test zero repetitions raise error."""
        with pytest.raises(ValueError):
            bench(pack_tensors(dense_model), dense_model, np.zeros((1, 6)), repetitions=0)

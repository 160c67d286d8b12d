"""
PACKSTORE SERVICE - Packed weight storage and multiplier-free inference

This service turns a quantized model into bytes and back, and runs it without multiplies:
1. PackedTensor / PackedModel - codes packed LSB-first at b bits each, floats kept as float32
2. pack_model / unpack_model - the SQW byte layout (see below), deterministic output
3. memory_report - weights-only and whole-model reduction ratios
4. shiftadd_kernel / shiftadd_forward - every weight product becomes an exact 2^p scaling
5. bench - wall-clock comparison of the multiply and shift-add kernels

SQW layout (all integers little-endian):
    "SQW1" | u16 version | u16 tensor_count
    per tensor: u16 name_len | name (UTF-8) | u8 dtype (0=float32, 1=packed) | u8 rank | u32 dims[rank]
        packed:  u8 bit_width | i16 n1 | i16 n2 | ceil(b*N/8) payload bytes
        float32: N little-endian float32 values

SQW carries no architecture: PackedModel.load_into() restores parameters into a
ModelGraph built from the same recipe.
"""

import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from powquant.schemas import BenchReport, MemoryReport, TensorMemory
from powquant.services.inq import PartitionState
from powquant.services.nncore import ModelGraph, forward, multiply_kernel, reduce_products
from powquant.services.quantlevels import LevelSet, code_exponents, decode_array, encode_array
from powquant.utils import (
    BadMagicError,
    LevelSetError,
    RequiresQuantizedModelError,
    SQWFormatError,
    TruncatedFileError,
    UnsupportedVersionError,
    get_logger,
)

logger = get_logger(__name__)

SQW_MAGIC = b"SQW1"
SQW_VERSION = 1
I16_MIN, I16_MAX = -0x8000, 0x7FFF
DTYPE_FLOAT32 = 0
DTYPE_PACKED = 1


# Bit packing
def pack_codes(codes: np.ndarray, bit_width: int) -> bytes:
    """b-bit codes, least significant bit first, in flat index order; pad bits are zero."""
    codes = np.asarray(codes, dtype=np.uint32).reshape(-1)
    shifts = np.arange(bit_width, dtype=np.uint32)
    bits = ((codes[:, None] >> shifts[None, :]) & np.uint32(1)).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(payload: bytes, bit_width: int, count: int) -> np.ndarray:
    """Inverse of pack_codes."""
    expected = payload_size(bit_width, count)
    if len(payload) != expected:
        raise TruncatedFileError(f"payload has {len(payload)} bytes, expected {expected}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")[: bit_width * count]
    weights = np.uint32(1) << np.arange(bit_width, dtype=np.uint32)
    return (bits.reshape(count, bit_width).astype(np.uint32) * weights[None, :]).sum(axis=1).astype(np.uint32)


def payload_size(bit_width: int, count: int) -> int:
    return (bit_width * count + 7) // 8


@dataclass
class PackedTensor:
    """One named tensor: either packed codes or raw float32 values."""

    name: str
    shape: Tuple[int, ...]
    dtype: str
    payload: bytes = b""
    bit_width: Optional[int] = None
    n1: Optional[int] = None
    n2: Optional[int] = None
    values: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def is_packed(self) -> bool:
        return self.dtype == "packed"

    @property
    def level_set(self) -> LevelSet:
        if not self.is_packed:
            raise RequiresQuantizedModelError(f"{self.name} is stored as float32")
        return LevelSet(bit_width=self.bit_width, n1=self.n1, n2=self.n2)

    @property
    def stored_bytes(self) -> int:
        return len(self.payload) if self.is_packed else 4 * self.count

    def codes(self) -> np.ndarray:
        return unpack_codes(self.payload, self.bit_width, self.count)

    def to_array(self) -> np.ndarray:
        if self.is_packed:
            return decode_array(self.codes(), self.level_set, dtype=np.float32).reshape(self.shape)
        return np.asarray(self.values, dtype=np.float32).reshape(self.shape)


@dataclass
class PackedModel:
    """Ordered packed tensors; the unit pack_model writes and unpack_model reads."""

    tensors: List[PackedTensor] = field(default_factory=list)

    def __getitem__(self, name: str) -> PackedTensor:
        for tensor in self.tensors:
            if tensor.name == name:
                return tensor
        raise KeyError(name)

    def names(self) -> List[str]:
        return [t.name for t in self.tensors]

    @property
    def level_sets(self) -> Dict[str, LevelSet]:
        return {t.name: t.level_set for t in self.tensors if t.is_packed}

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {t.name: t.to_array() for t in self.tensors}

    def load_into(self, model: ModelGraph) -> ModelGraph:
        """Copy every stored tensor into a model of the same recipe."""
        model.load_state_dict(self.to_arrays())
        return model


# Packing
def pack_tensors(model: ModelGraph, state: Optional[PartitionState] = None) -> PackedModel:
    """
    PackedModel for a model: fully quantized tensors packed, the rest float32.

    Codes are recomputed from the live weights against the state's level sets,
    so a weight that drifted off its level raises LevelSetError here.
    """
    tensors = []
    for name, value in model.params.items():
        shape = tuple(int(d) for d in value.shape)
        fully_quantized = (
            state is not None and name in state.free_masks and not state.free_masks[name].any()
        )
        if fully_quantized:
            ls = state.level_sets[name]
            codes = encode_array(value.reshape(-1), ls)
            tensors.append(PackedTensor(name=name, shape=shape, dtype="packed",
                                        payload=pack_codes(codes, ls.bit_width),
                                        bit_width=ls.bit_width, n1=ls.n1, n2=ls.n2))
        else:
            tensors.append(PackedTensor(name=name, shape=shape, dtype="float32",
                                        values=np.asarray(value, dtype=np.float32).copy()))
    return PackedModel(tensors=tensors)


def serialize(packed: PackedModel) -> bytes:
    """SQW bytes for a PackedModel."""
    if len(packed.tensors) > 0xFFFF:
        raise SQWFormatError("too many tensors for a u16 count")
    chunks = [SQW_MAGIC, struct.pack("<HH", SQW_VERSION, len(packed.tensors))]
    for tensor in packed.tensors:
        name = tensor.name.encode("utf-8")
        if len(name) > 0xFFFF or len(tensor.shape) > 0xFF:
            raise SQWFormatError(f"{tensor.name}: name or rank does not fit the header")
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        dtype = DTYPE_PACKED if tensor.is_packed else DTYPE_FLOAT32
        chunks.append(struct.pack(f"<BB{len(tensor.shape)}I", dtype, len(tensor.shape), *tensor.shape))
        if tensor.is_packed:
            if not (I16_MIN <= tensor.n2 and tensor.n1 <= I16_MAX):
                raise SQWFormatError(
                    f"{tensor.name}: exponents n1={tensor.n1}, n2={tensor.n2} do not fit the i16 header fields"
                )
            chunks.append(struct.pack("<Bhh", tensor.bit_width, tensor.n1, tensor.n2))
            chunks.append(tensor.payload)
        else:
            chunks.append(np.asarray(tensor.values, dtype="<f4").reshape(-1).tobytes())
    return b"".join(chunks)


def pack_model(model: ModelGraph, state: Optional[PartitionState] = None) -> bytes:
    """Model (+ partition state) -> SQW bytes."""
    return serialize(pack_tensors(model, state))


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"SQW data ends at byte {len(self.data)}, needed {self.pos + n}")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack_tensors(data: bytes) -> List[PackedTensor]:
    """Parse SQW bytes into PackedTensors."""
    reader = _Reader(data)
    if len(data) < len(SQW_MAGIC):
        raise TruncatedFileError("SQW data shorter than its magic")
    magic = reader.take(len(SQW_MAGIC))
    if magic != SQW_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {SQW_MAGIC!r}")
    version, count = reader.unpack("<HH")
    if version != SQW_VERSION:
        raise UnsupportedVersionError(f"SQW version {version} is not supported (expected {SQW_VERSION})")

    tensors = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        dtype, rank = reader.unpack("<BB")
        shape = tuple(int(d) for d in reader.unpack(f"<{rank}I"))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if dtype == DTYPE_PACKED:
            bit_width, n1, n2 = reader.unpack("<Bhh")
            try:
                LevelSet(bit_width=bit_width, n1=n1, n2=n2)
            except LevelSetError as e:
                raise SQWFormatError(f"{name}: corrupt level set header ({e})") from e
            payload = reader.take(payload_size(bit_width, n))
            tensor = PackedTensor(name=name, shape=shape, dtype="packed", payload=payload,
                                  bit_width=bit_width, n1=n1, n2=n2)
        elif dtype == DTYPE_FLOAT32:
            values = np.frombuffer(reader.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
            tensor = PackedTensor(name=name, shape=shape, dtype="float32", values=values)
        else:
            raise SQWFormatError(f"{name}: unknown dtype tag {dtype}")
        tensors.append(tensor)

    if reader.pos != len(data):
        raise SQWFormatError(f"{len(data) - reader.pos} trailing bytes after the last tensor")
    return tensors


def unpack_model(data: bytes) -> PackedModel:
    """SQW bytes -> PackedModel (use load_into to restore a ModelGraph)."""
    return PackedModel(tensors=unpack_tensors(data))


def write_sqw(path: Union[str, Path], model: ModelGraph, state: Optional[PartitionState] = None) -> int:
    """Write a model to an SQW file; returns the byte count."""
    data = pack_model(model, state)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    logger.info(f"Wrote {path} ({len(data)} bytes)", extra={"event": "sqw_written", "path": str(path)})
    return len(data)


def read_sqw(path: Union[str, Path]) -> PackedModel:
    return unpack_model(Path(path).read_bytes())


# Memory accounting
def memory_report(packed: PackedModel) -> MemoryReport:
    """
    Weights-only ratio over packed tensors (4 bytes per weight vs payload bytes),
    plus the whole-model ratio with float32 tensors counted at 4 bytes each.
    """
    rows = [
        TensorMemory(name=t.name, dtype=t.dtype, count=t.count, bit_width=t.bit_width, stored_bytes=t.stored_bytes)
        for t in packed.tensors
    ]
    float_bytes = sum(4 * t.count for t in packed.tensors if t.is_packed)
    packed_bytes = sum(t.stored_bytes for t in packed.tensors if t.is_packed)
    whole_float = sum(4 * t.count for t in packed.tensors)
    whole_bytes = sum(t.stored_bytes for t in packed.tensors)
    return MemoryReport(
        float_bytes=float_bytes,
        packed_bytes=packed_bytes,
        whole_model_float_bytes=whole_float,
        whole_model_bytes=whole_bytes,
        reduction_ratio=float_bytes / packed_bytes if packed_bytes else 1.0,
        whole_model_ratio=whole_float / whole_bytes if whole_bytes else 1.0,
        tensors=rows,
    )


# Shift-add inference
def shiftadd_kernel(packed: PackedModel):
    """
    Matmul kernel that never multiplies by a weight.

    Each product x * (±2^p) is formed as ldexp(x, p) with a sign flip, zero
    codes contribute 0, and the sum goes through the same reduction as
    multiply_kernel.
    """
    tables = {}
    for tensor in packed.tensors:
        if not tensor.is_packed:
            continue
        exps, negative, zero = code_exponents(tensor.codes(), tensor.level_set)
        rows = tensor.count // tensor.shape[-1]
        cols = tensor.shape[-1]
        tables[tensor.name] = (exps.reshape(rows, cols), negative.reshape(rows, cols), zero.reshape(rows, cols))

    def kernel(x: np.ndarray, name: str, w: np.ndarray) -> np.ndarray:
        table = tables.get(name)
        if table is None:
            raise RequiresQuantizedModelError(f"requires quantized model: {name} is not packed")
        exps, negative, zero = table
        if exps.shape != w.shape:
            raise RequiresQuantizedModelError(f"{name}: packed shape {exps.shape} does not match {w.shape}")

        def products(xs: np.ndarray) -> np.ndarray:
            p = np.ldexp(xs[:, :, None], exps[None, :, :])
            np.negative(p, out=p, where=negative[None, :, :])
            p[:, zero] = 0
            return p

        return reduce_products(x, exps.shape, products)

    return kernel


def require_quantized(packed: PackedModel, model: ModelGraph) -> None:
    missing = [name for name in model.quantizable_names()
               if name not in packed.names() or not packed[name].is_packed]
    if missing:
        raise RequiresQuantizedModelError(f"requires quantized model: float32 tensors {missing}")


def shiftadd_forward(packed: PackedModel, model: ModelGraph, batch: np.ndarray) -> np.ndarray:
    """
    Predictions with every weight product done by exponent scaling.

    model supplies the architecture and the float tensors (biases); it is
    expected to hold packed.to_arrays(), e.g. via packed.load_into(model).
    """
    require_quantized(packed, model)
    return forward(model, batch, kernel=shiftadd_kernel(packed))


def skip_rate(packed: PackedModel) -> float:
    """Fraction of packed weights whose code is zero."""
    total = zeros = 0
    for tensor in packed.tensors:
        if tensor.is_packed:
            _, _, zero = code_exponents(tensor.codes(), tensor.level_set)
            total += zero.size
            zeros += int(np.count_nonzero(zero))
    return zeros / total if total else 0.0


def bench(packed: PackedModel, model: ModelGraph, batch: np.ndarray, repetitions: int = 5) -> BenchReport:
    """Median wall-clock of multiply vs shift-add inference; a report, no threshold."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    require_quantized(packed, model)
    kernel = shiftadd_kernel(packed)

    def timed(fn) -> List[float]:
        times = []
        for _ in range(repetitions):
            start = time.perf_counter()
            fn()
            times.append(time.perf_counter() - start)
        return times

    mult = timed(lambda: forward(model, batch, kernel=multiply_kernel))
    shift = timed(lambda: forward(model, batch, kernel=kernel))
    mult_median, shift_median = float(np.median(mult)), float(np.median(shift))
    report = BenchReport(
        repetitions=repetitions,
        batch_size=int(len(batch)),
        multiply_median_s=mult_median,
        shiftadd_median_s=shift_median,
        ratio=mult_median / shift_median if shift_median > 0 else math.inf,
        skip_rate=skip_rate(packed),
        multiply_times_s=mult,
        shiftadd_times_s=shift,
    )
    logger.info(f"bench: multiply {mult_median:.4f}s, shift-add {shift_median:.4f}s",
                extra={"event": "bench", "ratio": report.ratio, "skip_rate": report.skip_rate})
    return report

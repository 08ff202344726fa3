"""Binary weight container (MPQW format) and memory accounting.

File layout, little-endian throughout:

    magic    4 bytes   b"MPQW"
    version  u32       currently 1
    config   u32 x 6   n_layers, d_model, n_heads, d_ff, vocab_size, max_seq_len
             u8        task: 0 = classification, 1 = lm
             u32       n_classes (0 for lm)
    count    u32       number of tensor records
    records  see below
    crc32    u32       IEEE CRC-32 of every preceding byte

Record layout:

    name          u16 length + UTF-8 bytes
    dtype         u8: 0 = fp32, 1 = fp16, 2 = int8, 3 = int4
    rank          u32, then one u32 per dimension
    channel_axis  u8: axis index, 255 = per-tensor
    scales, mins  fp32 arrays, present only for int8/int4; length is
                  dims[channel_axis], or 1 when per-tensor
    payload       fp32/fp16 raw values; int8 one signed byte per value;
                  int4 two values per byte, low nibble first, packed row by
                  row along the trailing axis with odd-length rows padded
                  by a zero nibble

Memory accounting counts payload bytes plus scale/min bytes; record headers
are bookkeeping and excluded on both sides of a comparison.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, TransformerModel, param_shapes

MAGIC = b"MPQW"
VERSION = 1

DTYPE_CODES = {"fp32": 0, "fp16": 1, "int8": 2, "int4": 3}
_CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
PER_TENSOR = 255


class ContainerError(ValueError):
    """Base class for container load/save failures."""


class MagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


def pack_int4(codes: np.ndarray) -> bytes:
    """Pack int4 codes in [-8, 7] two per byte, low nibble first.

    Rows (runs along the trailing axis) are padded to whole bytes so values
    never straddle a row boundary.
    """
    codes = np.asarray(codes, dtype=np.int64)
    rows = codes.reshape(-1, codes.shape[-1]) if codes.ndim > 1 else codes.reshape(1, -1)
    biased = (rows + 8).astype(np.uint8)
    if np.any(biased > 15):
        raise ValueError("int4 code outside [-8, 7]")
    n = rows.shape[1]
    if n % 2:
        biased = np.concatenate([biased, np.zeros((rows.shape[0], 1), np.uint8)], axis=1)
    lo = biased[:, 0::2]
    hi = biased[:, 1::2]
    return (lo | (hi << 4)).astype(np.uint8).tobytes()


def unpack_int4(data: bytes, shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of pack_int4; returns int8 codes with the given shape."""
    row_len = shape[-1]
    n_rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
    packed = np.frombuffer(data, dtype=np.uint8).reshape(n_rows, (row_len + 1) // 2)
    lo = (packed & 0x0F).astype(np.int16)
    hi = (packed >> 4).astype(np.int16)
    interleaved = np.empty((n_rows, lo.shape[1] * 2), dtype=np.int16)
    interleaved[:, 0::2] = lo
    interleaved[:, 1::2] = hi
    return (interleaved[:, :row_len] - 8).astype(np.int8).reshape(shape)


def payload_nbytes(shape: tuple[int, ...], dtype: str) -> int:
    """Payload size in bytes for a tensor of the given shape and dtype."""
    numel = int(np.prod(shape))
    if dtype == "fp32":
        return 4 * numel
    if dtype == "fp16":
        return 2 * numel
    if dtype == "int8":
        return numel
    if dtype == "int4":
        row_len = shape[-1]
        n_rows = numel // row_len if row_len else 0
        return n_rows * ((row_len + 1) // 2)
    raise ValueError(f"unknown dtype {dtype!r}")


def metadata_nbytes(shape: tuple[int, ...], dtype: str, channel_axis: int | None) -> int:
    """Scale + min bytes for a record (zero for fp32/fp16)."""
    if dtype in ("fp32", "fp16"):
        return 0
    k = 1 if channel_axis is None else shape[channel_axis]
    return 2 * 4 * k


@dataclass
class TensorRecord:
    name: str
    dtype: str                      # "fp32" | "fp16" | "int8" | "int4"
    shape: tuple[int, ...]
    values: np.ndarray | None = None       # fp32/fp16 payload
    codes: np.ndarray | None = None        # int8 codes for int8/int4
    channel_axis: int | None = None        # None = per-tensor
    scales: np.ndarray | None = None       # fp32, len matches channel count
    mins: np.ndarray | None = None

    def __post_init__(self):
        if any(d < 1 for d in self.shape):
            raise ValueError(f"tensor {self.name!r} has an empty dimension")
        if len(self.name.encode("utf-8")) > 0xFFFF:
            raise ValueError("tensor name longer than 65535 bytes")
        if self.dtype not in DTYPE_CODES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.dtype in ("int8", "int4"):
            k = 1 if self.channel_axis is None else self.shape[self.channel_axis]
            if self.scales is None or len(self.scales) != k:
                raise ValueError(f"tensor {self.name!r}: scales length must be {k}")
            if self.mins is None or len(self.mins) != k:
                raise ValueError(f"tensor {self.name!r}: mins length must be {k}")

    def payload_bytes(self) -> int:
        return payload_nbytes(self.shape, self.dtype)

    def metadata_bytes(self) -> int:
        return metadata_nbytes(self.shape, self.dtype, self.channel_axis)

    def dequantized(self) -> np.ndarray:
        """Reconstruct float32 values from whatever this record stores."""
        if self.dtype in ("fp32", "fp16"):
            return self.values.astype(np.float32)
        bits = 8 if self.dtype == "int8" else 4
        q_min = -(1 << (bits - 1))
        if self.channel_axis is None:
            scale = np.float32(self.scales[0])
            minv = np.float32(self.mins[0])
        else:
            bshape = [1] * len(self.shape)
            bshape[self.channel_axis] = -1
            scale = self.scales.astype(np.float32).reshape(bshape)
            minv = self.mins.astype(np.float32).reshape(bshape)
        return ((self.codes.astype(np.float32) - np.float32(q_min)) * scale + minv).astype(
            np.float32
        )


@dataclass
class MemoryReport:
    m_o_bytes: int
    m_q_bytes: int
    cr: float
    fpr_percent: float


@dataclass
class WeightContainer:
    config: ModelConfig
    records: dict[str, TensorRecord]

    def total_bytes(self) -> int:
        return sum(r.payload_bytes() + r.metadata_bytes() for r in self.records.values())

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<I", VERSION)
        cfg = self.config
        task_code = 0 if cfg.task == "classification" else 1
        n_classes = cfg.n_classes if cfg.task == "classification" else 0
        out += struct.pack(
            "<IIIIII", cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff,
            cfg.vocab_size, cfg.max_seq_len,
        )
        out += struct.pack("<BI", task_code, n_classes)
        out += struct.pack("<I", len(self.records))
        for rec in self.records.values():
            out += _encode_record(rec)
        out += struct.pack("<I", zlib.crc32(bytes(out)))
        return bytes(out)

    def save(self, path) -> int:
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return len(data)

    @classmethod
    def load(cls, path) -> "WeightContainer":
        with open(path, "rb") as fh:
            data = fh.read()
        return cls.from_bytes(data)

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightContainer":
        if len(data) < 8:
            raise TruncatedError("file shorter than header")
        if data[:4] != MAGIC:
            raise MagicError(f"bad magic {data[:4]!r}")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != VERSION:
            raise VersionError(f"unsupported version {version}")
        if len(data) < 12:
            raise TruncatedError("file shorter than checksum footer")
        (crc_stored,) = struct.unpack_from("<I", data, len(data) - 4)
        crc_actual = zlib.crc32(data[:-4])
        if crc_stored != crc_actual:
            raise ChecksumError(f"crc mismatch: stored {crc_stored:#x}, actual {crc_actual:#x}")

        reader = _Reader(data[:-4], offset=8)
        n_layers, d_model, n_heads, d_ff, vocab, max_seq = reader.unpack("<IIIIII")
        task_code, n_classes = reader.unpack("<BI")
        config = ModelConfig(
            n_layers=n_layers, d_model=d_model, n_heads=n_heads, d_ff=d_ff,
            vocab_size=vocab, max_seq_len=max_seq,
            task="classification" if task_code == 0 else "lm",
            n_classes=n_classes if task_code == 0 else 2,
        )
        (count,) = reader.unpack("<I")
        records: dict[str, TensorRecord] = {}
        for _ in range(count):
            rec = _decode_record(reader)
            records[rec.name] = rec
        if reader.remaining():
            raise TruncatedError(f"{reader.remaining()} unexpected trailing bytes")
        return cls(config, records)


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncatedError(
                f"need {n} bytes at offset {self.offset}, only {len(self.data) - self.offset} left"
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def remaining(self) -> int:
        return len(self.data) - self.offset


def _encode_record(rec: TensorRecord) -> bytes:
    out = bytearray()
    name = rec.name.encode("utf-8")
    out += struct.pack("<H", len(name))
    out += name
    out += struct.pack("<B", DTYPE_CODES[rec.dtype])
    out += struct.pack("<I", len(rec.shape))
    for d in rec.shape:
        out += struct.pack("<I", d)
    axis = PER_TENSOR if rec.channel_axis is None else rec.channel_axis
    out += struct.pack("<B", axis)
    if rec.dtype in ("int8", "int4"):
        out += np.asarray(rec.scales, dtype="<f4").tobytes()
        out += np.asarray(rec.mins, dtype="<f4").tobytes()
        if rec.dtype == "int8":
            out += np.asarray(rec.codes, dtype="<i1").tobytes()
        else:
            out += pack_int4(rec.codes)
    elif rec.dtype == "fp32":
        out += np.asarray(rec.values, dtype="<f4").tobytes()
    else:
        out += np.asarray(rec.values, dtype="<f2").tobytes()
    return bytes(out)


def _decode_record(reader: _Reader) -> TensorRecord:
    (name_len,) = reader.unpack("<H")
    name = reader.take(name_len).decode("utf-8")
    (dtype_code,) = reader.unpack("<B")
    if dtype_code not in _CODE_DTYPES:
        raise TruncatedError(f"record {name!r}: unknown dtype code {dtype_code}")
    dtype = _CODE_DTYPES[dtype_code]
    (rank,) = reader.unpack("<I")
    shape = tuple(reader.unpack("<I")[0] for _ in range(rank))
    (axis_raw,) = reader.unpack("<B")
    channel_axis = None if axis_raw == PER_TENSOR else axis_raw
    scales = mins = values = codes = None
    if dtype in ("int8", "int4"):
        k = 1 if channel_axis is None else shape[channel_axis]
        scales = np.frombuffer(reader.take(4 * k), dtype="<f4").copy()
        mins = np.frombuffer(reader.take(4 * k), dtype="<f4").copy()
        if dtype == "int8":
            raw = reader.take(payload_nbytes(shape, dtype))
            codes = np.frombuffer(raw, dtype="<i1").reshape(shape).copy()
        else:
            raw = reader.take(payload_nbytes(shape, dtype))
            codes = unpack_int4(raw, shape)
    elif dtype == "fp32":
        raw = reader.take(payload_nbytes(shape, dtype))
        values = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    else:
        raw = reader.take(payload_nbytes(shape, dtype))
        values = np.frombuffer(raw, dtype="<f2").reshape(shape).copy()
    return TensorRecord(name, dtype, shape, values=values, codes=codes,
                        channel_axis=channel_axis, scales=scales, mins=mins)


def container_from_model(model: TransformerModel) -> WeightContainer:
    """Full-precision container holding every parameter as fp32."""
    records = {
        name: TensorRecord(name, "fp32", tuple(p.shape), values=p.astype(np.float32))
        for name, p in model.params.items()
    }
    return WeightContainer(model.config, records)


def model_from_container(container: WeightContainer) -> TransformerModel:
    """Materialize a float32 model, dequantizing records as needed."""
    expected = param_shapes(container.config)
    missing = set(expected) - set(container.records)
    if missing:
        raise ContainerError(f"container lacks parameters: {sorted(missing)}")
    params = {}
    for name, shape in expected.items():
        rec = container.records[name]
        if rec.shape != shape:
            raise ContainerError(f"{name}: shape {rec.shape} != expected {shape}")
        params[name] = np.ascontiguousarray(rec.dequantized())
    return TransformerModel(container.config, params)


def save(obj, path) -> int:
    """Write a model or a prepared container; returns bytes written."""
    if isinstance(obj, TransformerModel):
        obj = container_from_model(obj)
    return obj.save(path)


def load(path) -> WeightContainer:
    return WeightContainer.load(path)


def memory_report(original: WeightContainer, quantized: WeightContainer) -> MemoryReport:
    """Compression accounting between two containers with matching tensors."""
    if set(original.records) != set(quantized.records):
        raise ValueError("containers hold different tensor names")
    for name, rec in original.records.items():
        if rec.shape != quantized.records[name].shape:
            raise ValueError(f"{name}: shape mismatch {rec.shape} vs {quantized.records[name].shape}")
    m_o = original.total_bytes()
    m_q = quantized.total_bytes()
    cr = m_o / m_q
    fpr = 100.0 * (1.0 - m_q / m_o)
    return MemoryReport(m_o_bytes=m_o, m_q_bytes=m_q, cr=cr, fpr_percent=fpr)

"""Affine weight quantization to 4/8 bits and precision-plan application.

Codes live on the signed integer grid [-2^(b-1), 2^(b-1) - 1].  A channel's
scale maps its [min, max] value range onto that grid:

    scale = (max - min) / (q_max - q_min)
    code  = clamp(round((x - min) / scale) + q_min, q_min, q_max)
    x_hat = (code - q_min) * scale + min

Rounding is half-to-even by default; a floor mode exists for comparing the
two conventions.  Channels with zero range get a sentinel scale of 1.0 and
all codes at q_min, which reconstructs the constant exactly.

16-bit tiers are not integer-quantized: they convert to IEEE float16
(round-to-nearest-even) at serialization time.

Plans touch only the six weight matrices of each block, per-channel along
the output-feature axis (axis 1).  Embeddings, the task head, and every
layernorm vector stay at 16 bits regardless of the plan, so compression
figures always include those tensors at fp16 cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import TransformerModel
from .model_io import TensorRecord, WeightContainer, metadata_nbytes, model_from_container, payload_nbytes
from .tensor import DimensionError, DomainError

LAYER_MATRIX_COMPONENTS = ("attn.q", "attn.k", "attn.v", "attn.out", "ffn.in", "ffn.out")
OUTPUT_FEATURE_AXIS = 1  # weight matrices are stored (in_features, out_features)


@dataclass
class QuantParams:
    bits: int                      # 4 or 8
    channel_axis: int | None       # None = per-tensor
    scale: np.ndarray              # fp32, one entry per channel
    min_val: np.ndarray            # fp32, one entry per channel

    @property
    def q_min(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def q_max(self) -> int:
        return (1 << (self.bits - 1)) - 1


@dataclass
class QuantizedTensor:
    codes: np.ndarray              # int8, original shape
    params: QuantParams
    shape: tuple[int, ...]


def _broadcast_shape(shape: tuple[int, ...], axis: int | None) -> list[int]:
    b = [1] * len(shape)
    if axis is not None:
        b[axis] = shape[axis]
    return b


def quantize(x: np.ndarray, bits: int, channel_axis: int | None = None,
             rounding: str = "nearest") -> QuantizedTensor:
    """Affine quantization of a float tensor to signed `bits`-bit codes."""
    if bits not in (4, 8):
        raise DomainError(f"bits must be 4 or 8, got {bits}")
    if rounding not in ("nearest", "floor"):
        raise DomainError(f"unknown rounding mode {rounding!r}")
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise DomainError("quantize requires finite input")
    if channel_axis is not None and not 0 <= channel_axis < x.ndim:
        raise DimensionError(f"channel_axis {channel_axis} out of range for rank {x.ndim}")

    if channel_axis is None:
        reduce_axes = tuple(range(x.ndim))
    else:
        reduce_axes = tuple(a for a in range(x.ndim) if a != channel_axis)
    mins = x.min(axis=reduce_axes) if reduce_axes else x.copy()
    maxs = x.max(axis=reduce_axes) if reduce_axes else x.copy()
    mins = np.atleast_1d(np.asarray(mins, dtype=np.float32))
    maxs = np.atleast_1d(np.asarray(maxs, dtype=np.float32))

    q_min = -(1 << (bits - 1))
    q_max = (1 << (bits - 1)) - 1
    span = maxs - mins
    scale = np.where(span > 0, span / np.float32(q_max - q_min), np.float32(1.0))
    scale = scale.astype(np.float32)

    bshape = _broadcast_shape(x.shape, channel_axis)
    normalized = (x - mins.reshape(bshape)) / scale.reshape(bshape)
    rounded = np.rint(normalized) if rounding == "nearest" else np.floor(normalized)
    codes = np.clip(rounded + q_min, q_min, q_max).astype(np.int8)
    return QuantizedTensor(
        codes=codes,
        params=QuantParams(bits=bits, channel_axis=channel_axis, scale=scale, min_val=mins),
        shape=tuple(x.shape),
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct float32 values from codes."""
    p = q.params
    bshape = _broadcast_shape(q.shape, p.channel_axis)
    scale = p.scale.reshape(bshape)
    minv = p.min_val.reshape(bshape)
    return ((q.codes.astype(np.float32) - np.float32(p.q_min)) * scale + minv).astype(np.float32)


def quant_error(w: np.ndarray, q: QuantizedTensor) -> float:
    """Frobenius norm of the reconstruction error, computed in float64."""
    w = np.asarray(w)
    if tuple(w.shape) != q.shape:
        raise DimensionError(f"shape mismatch: {tuple(w.shape)} vs {q.shape}")
    diff = w.astype(np.float64) - dequantize(q).astype(np.float64)
    return float(np.sqrt(np.sum(diff * diff)))


def fp16_roundtrip(x: np.ndarray) -> np.ndarray:
    """float32 values after a trip through IEEE float16 (round-to-nearest-even)."""
    return np.asarray(x, dtype=np.float32).astype(np.float16).astype(np.float32)


def layer_weight_names(i: int) -> list[str]:
    return [f"layer.{i}.{c}" for c in LAYER_MATRIX_COMPONENTS]


def layer_memory_bytes(model: TransformerModel, layer: int, bits: int) -> int:
    """Container bytes (payload + scale/min metadata) for one layer's weight
    matrices at the given width."""
    dtype = {16: "fp16", 8: "int8", 4: "int4"}[bits]
    axis = None if bits == 16 else OUTPUT_FEATURE_AXIS
    total = 0
    for name in layer_weight_names(layer):
        shape = tuple(model.params[name].shape)
        total += payload_nbytes(shape, dtype) + metadata_nbytes(shape, dtype, axis)
    return total


def _quantized_record(name: str, w: np.ndarray, bits: int) -> TensorRecord:
    if bits == 16:
        return TensorRecord(name, "fp16", tuple(w.shape), values=w.astype(np.float16))
    q = quantize(w, bits, channel_axis=OUTPUT_FEATURE_AXIS)
    return TensorRecord(
        name, "int8" if bits == 8 else "int4", tuple(w.shape),
        codes=q.codes, channel_axis=OUTPUT_FEATURE_AXIS,
        scales=q.params.scale, mins=q.params.min_val,
    )


def apply_plan(model: TransformerModel, plan) -> tuple[WeightContainer, TransformerModel]:
    """Quantize a model per a precision plan.

    Returns the packed container and a simulated model whose fp32 weights are
    the dequantized container contents, so evaluating the simulated model is
    identical to evaluating a reload of the container.
    """
    bits_per_layer = list(plan.bits_per_layer)
    n_layers = model.config.n_layers
    if len(bits_per_layer) != n_layers:
        raise ValueError(f"plan covers {len(bits_per_layer)} layers, model has {n_layers}")
    if any(b not in (4, 8, 16) for b in bits_per_layer):
        raise ValueError(f"plan bits must be in {{4, 8, 16}}: {bits_per_layer}")

    matrix_names = {name for i in range(n_layers) for name in layer_weight_names(i)}
    records: dict[str, TensorRecord] = {}
    for name, p in model.params.items():
        if name in matrix_names:
            layer = int(name.split(".")[1])
            records[name] = _quantized_record(name, p, bits_per_layer[layer])
        else:
            # embeddings, head, and layernorm vectors always ride at 16 bits
            records[name] = TensorRecord(name, "fp16", tuple(p.shape),
                                         values=p.astype(np.float16))
    container = WeightContainer(model.config, records)
    return container, model_from_container(container)

"""Energy-based truncated-SVD compression of weight matrices.

The compression keeps the smallest rank r whose leading squared singular
values hold at least a fraction ``e`` of the total squared-singular-value
energy, and transmits the factor pair U = [sigma_1 u_1, ..., sigma_r u_r]
(m x r) and V = [v_1, ..., v_r]^T (r x n), so the compressed matrix is U @ V.

Every layer of a model is always truncated this way; the wire encoding then
picks whichever representation is smaller: the factor pair at r * (m + n)
values, or the truncated matrix itself dense at m * n values. The strict rule
``r * (m + n) < m * n`` decides (ties go dense), so compression can never
inflate traffic. Bias vectors are never compressed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import linalg
from .nn import Layer, MlpModel

MAGIC = b"FDLR"
WIRE_VERSION = 1

MODE_DENSE = "dense"
MODE_FACTORED = "factored"


class CompressionError(ValueError):
    """Raised for rank-0 inputs, bad thresholds, or malformed wire bytes."""


def _check_threshold(e: float) -> float:
    if not 0.0 < e <= 1.0:
        raise CompressionError(f"energy threshold must be in (0, 1], got {e}")
    return float(e)


def energy_rank(sigma, e: float) -> int:
    """Smallest r with sum of the top-r squared values >= e * total.

    ``sigma`` must be non-increasing and non-negative with at least one
    positive entry. The comparison is a plain >= on 64-bit cumulative sums.
    """
    e = _check_threshold(e)
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise CompressionError("sigma must be a non-empty 1-D sequence")
    if np.any(s < 0.0) or np.any(s[1:] > s[:-1]):
        raise CompressionError("sigma must be non-increasing and non-negative")
    energy = np.cumsum(s * s)
    total = energy[-1]
    if total <= 0.0:
        raise CompressionError("all-zero singular values: matrix has rank 0")
    target = e * total
    for i, kept in enumerate(energy):
        if kept >= target:
            return i + 1
    return int(s.size)  # pragma: no cover - cumulative sum always reaches total


@dataclass(frozen=True)
class FactorPair:
    """Low-rank factors of a compressed m x n matrix.

    U is m x r with columns sigma_i * u_i; V is r x n with rows v_i^T. The
    compressed matrix is U @ V.
    """

    U: np.ndarray
    V: np.ndarray
    rank: int
    orig_rows: int
    orig_cols: int


def lr_compress(w, e: float) -> FactorPair:
    """Truncate ``w`` to the minimal rank holding fraction ``e`` of its energy."""
    e = _check_threshold(e)
    w = linalg.as_matrix(w, "matrix to compress")
    if not np.any(w):
        raise CompressionError(
            f"cannot compress an all-zero {w.shape[0]}x{w.shape[1]} matrix"
        )
    dec = linalg.svd(w)
    r = energy_rank(dec.sigma, e)
    u = dec.U[:, :r] * dec.sigma[:r]
    v = dec.V[:, :r].T.copy()
    return FactorPair(U=u, V=v, rank=r, orig_rows=w.shape[0], orig_cols=w.shape[1])


def reconstruct(fp: FactorPair) -> np.ndarray:
    """Dense matrix U @ V with the original dimensions."""
    out = fp.U @ fp.V
    if out.shape != (fp.orig_rows, fp.orig_cols):
        raise CompressionError(
            f"factor shapes {fp.U.shape}x{fp.V.shape} do not match "
            f"original {fp.orig_rows}x{fp.orig_cols}"
        )
    return out


@dataclass(frozen=True)
class CompressedLayer:
    """One transmissible layer: compressed weights plus a dense bias.

    ``payload`` is a FactorPair when mode == "factored", else the dense
    (already truncated, for compressed models) weight matrix. ``rank`` records
    the selected truncation rank, or None when no truncation was applied
    (FedAvg passthrough).
    """

    payload: FactorPair | np.ndarray
    mode: str
    bias: np.ndarray
    rank: int | None

    @property
    def weight_shape(self) -> tuple[int, int]:
        if self.mode == MODE_FACTORED:
            return (self.payload.orig_rows, self.payload.orig_cols)
        return self.payload.shape

    def weights(self) -> np.ndarray:
        """Dense weight matrix carried by this layer."""
        if self.mode == MODE_FACTORED:
            return reconstruct(self.payload)
        return self.payload


@dataclass(frozen=True)
class CompressedModel:
    layers: tuple[CompressedLayer, ...]

    def weight_shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(layer.weight_shape for layer in self.layers)


def _encode_factored(m: int, n: int, r: int) -> bool:
    return r * (m + n) < m * n


def transmitted_params(layer: CompressedLayer) -> int:
    """Parameter count this layer puts on the wire (payload plus bias)."""
    m, n = layer.weight_shape
    if layer.mode == MODE_FACTORED:
        count = layer.payload.rank * (m + n)
    else:
        count = m * n
    return count + layer.bias.size


def _compress_layer(
    weights: np.ndarray, bias: np.ndarray, e: float, allow_dense_fallback: bool
) -> CompressedLayer:
    fp = lr_compress(weights, e)
    m, n = fp.orig_rows, fp.orig_cols
    if _encode_factored(m, n, fp.rank) or not allow_dense_fallback:
        return CompressedLayer(payload=fp, mode=MODE_FACTORED, bias=bias.copy(), rank=fp.rank)
    return CompressedLayer(
        payload=reconstruct(fp), mode=MODE_DENSE, bias=bias.copy(), rank=fp.rank
    )


def compress_model(
    model: MlpModel, e: float, allow_dense_fallback: bool = True
) -> CompressedModel:
    """Truncate every weight matrix independently; biases pass through dense.

    ``allow_dense_fallback=False`` forces the factored encoding even when it is
    not smaller (used by comparison harnesses; the carried matrix is identical).
    """
    e = _check_threshold(e)
    layers = []
    for idx, layer in enumerate(model.layers):
        try:
            layers.append(_compress_layer(layer.weights, layer.bias, e, allow_dense_fallback))
        except (CompressionError, linalg.LinalgError) as exc:
            raise CompressionError(f"layer {idx}: {exc}") from exc
    return CompressedModel(layers=tuple(layers))


def dense_model(model: MlpModel) -> CompressedModel:
    """Uncompressed passthrough (the FedAvg wire format): every layer dense."""
    layers = [
        CompressedLayer(
            payload=layer.weights.copy(), mode=MODE_DENSE, bias=layer.bias.copy(), rank=None
        )
        for layer in model.layers
    ]
    return CompressedModel(layers=tuple(layers))


def reconstruct_model(cm: CompressedModel) -> MlpModel:
    """Materialize the dense model a receiver trains on."""
    return MlpModel(
        layers=tuple(Layer(weights=l.weights(), bias=l.bias.copy()) for l in cm.layers)
    )


# Wire format, per layer:
#   magic "FDLR" | u16 version | u32 m | u32 n | u32 r | u8 mode | payload | u32 bias_len | bias
# All integers little-endian; payload and bias are little-endian float64,
# row-major. Dense payload holds m*n values and writes r = 0; factored payload
# holds U (m*r) then V (r*n). A model is the concatenation of its layers.

_HEADER = struct.Struct("<4sHIIIB")
_BIAS_LEN = struct.Struct("<I")


def layer_wire_size(layer: CompressedLayer) -> int:
    """Exact serialized byte count, computed from dimensions alone."""
    m, n = layer.weight_shape
    payload = layer.payload.rank * (m + n) if layer.mode == MODE_FACTORED else m * n
    return _HEADER.size + 8 * payload + _BIAS_LEN.size + 8 * layer.bias.size


def model_wire_size(cm: CompressedModel) -> int:
    return sum(layer_wire_size(layer) for layer in cm.layers)


def layer_to_bytes(layer: CompressedLayer) -> bytes:
    m, n = layer.weight_shape
    if layer.mode == MODE_FACTORED:
        fp = layer.payload
        header = _HEADER.pack(MAGIC, WIRE_VERSION, m, n, fp.rank, 1)
        payload = fp.U.astype("<f8").tobytes() + fp.V.astype("<f8").tobytes()
    else:
        header = _HEADER.pack(MAGIC, WIRE_VERSION, m, n, 0, 0)
        payload = layer.payload.astype("<f8").tobytes()
    bias = _BIAS_LEN.pack(layer.bias.size) + layer.bias.astype("<f8").tobytes()
    return header + payload + bias


def layer_from_bytes(buf: bytes, offset: int = 0) -> tuple[CompressedLayer, int]:
    """Decode one layer starting at ``offset``; returns (layer, next offset)."""
    try:
        magic, version, m, n, r, mode = _HEADER.unpack_from(buf, offset)
    except struct.error as exc:
        raise CompressionError(f"truncated layer header at offset {offset}") from exc
    if magic != MAGIC:
        raise CompressionError(f"bad magic {magic!r} at offset {offset}")
    if version != WIRE_VERSION:
        raise CompressionError(f"unsupported wire version {version}")
    pos = offset + _HEADER.size
    count = r * (m + n) if mode == 1 else m * n
    need = 8 * count
    if len(buf) < pos + need + _BIAS_LEN.size:
        raise CompressionError(f"truncated payload at offset {pos}")
    flat = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    pos += need
    if mode == 1:
        u = flat[: m * r].reshape(m, r)
        v = flat[m * r :].reshape(r, n)
        payload: FactorPair | np.ndarray = FactorPair(
            U=u, V=v, rank=r, orig_rows=m, orig_cols=n
        )
        rank: int | None = r
        mode_name = MODE_FACTORED
    else:
        payload = flat.reshape(m, n)
        rank = None
        mode_name = MODE_DENSE
    (bias_len,) = _BIAS_LEN.unpack_from(buf, pos)
    pos += _BIAS_LEN.size
    if len(buf) < pos + 8 * bias_len:
        raise CompressionError(f"truncated bias at offset {pos}")
    bias = np.frombuffer(buf, dtype="<f8", count=bias_len, offset=pos).astype(np.float64)
    pos += 8 * bias_len
    return CompressedLayer(payload=payload, mode=mode_name, bias=bias, rank=rank), pos


def model_to_bytes(cm: CompressedModel) -> bytes:
    return b"".join(layer_to_bytes(layer) for layer in cm.layers)


def model_from_bytes(buf: bytes) -> CompressedModel:
    layers = []
    pos = 0
    while pos < len(buf):
        layer, pos = layer_from_bytes(buf, pos)
        layers.append(layer)
    return CompressedModel(layers=tuple(layers))

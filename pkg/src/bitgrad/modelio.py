"""Compressed on-disk model format (magic BBCM) and its exporter/importer.

Layout, all integers little-endian:

    magic "BBCM" | version u16 | record count u16
    per record: kind u8 | shape 4 x u32 | payload | alpha (binary kinds)
    trailer: CRC-32 of all preceding bytes

Record kinds and their shape-header fields:

    0 fp-conv    (out, in, kernel, stride*256+pad)  payload out*in*k*k f32
    1 bin-conv   (out, in, kernel, stride*256+pad)  payload packed rows + alpha
    2 fp-linear  (out, in, 0, 0)                    payload weights then bias, f32
    3 bn         (channels, 0, 0, 0)                payload gamma,beta,mean,var,eps f32
    4 bin-linear (out, in, 0, 0)                    payload packed rows + alpha
    5 prelu      (channels, 0, 0, 0)                payload slopes f32
    6 pool       (mode, window, stride, 0)          mode 0=max 1=avg 2=global-avg
    7 route      (op, src, dst, 0)                  op 0=copy 1=add 2=switch

Binary payload rows are the packed binarized weights, rows*ceil(cols/64)*8
bytes; the estimator and MLP classifier are consumed at export time and
never serialized. Batch norm is stored unfolded so files stay auditable;
folding happens at load time where wanted.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError, ShapeError, VersionError
from .layers import (AvgPool, BatchNorm, BinaryConvLayer, BinaryLinear, BiRealBlock,
                     Flatten, Linear, MaxPool, PReLU)
from .networks import Network
from .ops import DTYPE
from .packed import (PackedBitMatrix, PackedModel, PkBatchNorm, PkBinConv, PkBinLinear,
                     PkFpConv, PkFpLinear, PkPool, PkPRelu, PkRoute)

MAGIC = b"BBCM"
VERSION = 1

K_FP_CONV, K_BIN_CONV, K_FP_LINEAR, K_BN, K_BIN_LINEAR, K_PRELU, K_POOL, K_ROUTE = range(8)

KIND_NAMES = {
    K_FP_CONV: "fp-conv", K_BIN_CONV: "bin-conv", K_FP_LINEAR: "fp-linear",
    K_BN: "bn", K_BIN_LINEAR: "bin-linear", K_PRELU: "prelu",
    K_POOL: "pool", K_ROUTE: "route",
}

MAX_DIM = 1 << 20  # sanity cap on any declared dimension


@dataclass
class Record:
    kind: int
    shape: tuple[int, int, int, int]
    payload: bytes
    alpha: np.ndarray | None = None
    name: str = ""  # not serialized; kept for reports

    def file_bytes(self) -> int:
        alpha = 0 if self.alpha is None else self.alpha.size * 4
        return 1 + 16 + len(self.payload) + alpha


# ---------------------------------------------------------------------------
# network -> records
# ---------------------------------------------------------------------------

def _conv_record(layer: BinaryConvLayer) -> Record:
    o, c, kh, kw = layer.w.value.shape
    if kh != kw:
        raise ShapeError("model format supports square kernels only")
    shape = (o, c, kh, layer.stride * 256 + layer.pad)
    if layer.binarize_weight:
        w_hat = layer.estimator.binarize(layer.w.value)
        packed = PackedBitMatrix.pack(w_hat.reshape(o, -1))
        from .estimators import scale_factor
        alpha = scale_factor(layer.w.value)
        return Record(K_BIN_CONV, shape, packed.words.tobytes(), alpha, layer.name)
    return Record(K_FP_CONV, shape, layer.w.value.tobytes(), None, layer.name)


def _linear_record(layer) -> Record:
    if isinstance(layer, BinaryLinear) and layer.binarize_weight:
        o, i = layer.w.value.shape
        w_hat = layer.estimator.binarize(layer.w.value)
        packed = PackedBitMatrix.pack(w_hat)
        from .estimators import scale_factor
        alpha = scale_factor(layer.w.value)
        return Record(K_BIN_LINEAR, (o, i, 0, 0), packed.words.tobytes(), alpha, layer.name)
    o, i = layer.w.value.shape
    bias = layer.b.value if isinstance(layer, Linear) else np.zeros(o, dtype=DTYPE)
    payload = layer.w.value.tobytes() + bias.astype(DTYPE).tobytes()
    return Record(K_FP_LINEAR, (o, i, 0, 0), payload, None, layer.name)


def _bn_record(layer: BatchNorm) -> Record:
    c = layer.gamma.value.shape[0]
    payload = (layer.gamma.value.tobytes() + layer.beta.value.tobytes()
               + layer.running_mean.tobytes() + layer.running_var.tobytes()
               + np.array([layer.eps], dtype=DTYPE).tobytes())
    return Record(K_BN, (c, 0, 0, 0), payload, None, layer.name)


def _pool_record(layer) -> Record:
    if isinstance(layer, MaxPool):
        return Record(K_POOL, (PkPool.MAX, layer.window, layer.stride, 0), b"", None, layer.name)
    if layer.window is None:
        return Record(K_POOL, (PkPool.GLOBAL_AVG, 0, 0, 0), b"", None, layer.name)
    stride = layer.window if layer.stride is None else layer.stride
    return Record(K_POOL, (PkPool.AVG, layer.window, stride, 0), b"", None, layer.name)


def _route(op, src, dst) -> Record:
    return Record(K_ROUTE, (op, src, dst, 0), b"", None, "route")


def network_records(net: Network) -> list[Record]:
    records: list[Record] = []
    for layer in net.layers:
        if isinstance(layer, BiRealBlock):
            records.append(_route(PkRoute.COPY, 0, 1))
            if layer.downsample:
                records.append(_route(PkRoute.SWITCH, 0, 1))
                for ds in layer.downsample:
                    if isinstance(ds, AvgPool):
                        records.append(_pool_record(ds))
                    elif isinstance(ds, BinaryConvLayer):
                        records.append(_conv_record(ds))
                    else:
                        records.append(_bn_record(ds))
                records.append(_route(PkRoute.SWITCH, 0, 0))
            records.append(_conv_record(layer.conv1))
            records.append(_bn_record(layer.bn1))
            records.append(_route(PkRoute.ADD, 1, 0))
            records.append(_route(PkRoute.COPY, 0, 1))
            records.append(_conv_record(layer.conv2))
            records.append(_bn_record(layer.bn2))
            records.append(_route(PkRoute.ADD, 1, 0))
        elif isinstance(layer, BinaryConvLayer):
            records.append(_conv_record(layer))
        elif isinstance(layer, (Linear, BinaryLinear)):
            records.append(_linear_record(layer))
        elif isinstance(layer, BatchNorm):
            records.append(_bn_record(layer))
        elif isinstance(layer, PReLU):
            records.append(Record(K_PRELU, (layer.slope.value.shape[0], 0, 0, 0),
                                  layer.slope.value.tobytes(), None, layer.name))
        elif isinstance(layer, (MaxPool, AvgPool)):
            records.append(_pool_record(layer))
        elif isinstance(layer, Flatten):
            continue  # linear records flatten implicitly
        else:
            raise FormatError(f"layer {layer.name} has no model-file representation")
    return records


# ---------------------------------------------------------------------------
# bytes <-> records
# ---------------------------------------------------------------------------

def encode(records: list[Record]) -> bytes:
    chunks = [MAGIC, struct.pack("<HH", VERSION, len(records))]
    for rec in records:
        chunks.append(struct.pack("<B4I", rec.kind, *rec.shape))
        chunks.append(rec.payload)
        if rec.alpha is not None:
            chunks.append(rec.alpha.astype(DTYPE).tobytes())
    blob = b"".join(chunks)
    return blob + struct.pack("<I", zlib.crc32(blob))


def _payload_len(kind, shape) -> tuple[int, int]:
    """(payload bytes, alpha bytes) implied by a record header."""
    o, i, k, _ = shape
    if kind == K_FP_CONV:
        return o * i * k * k * 4, 0
    if kind == K_BIN_CONV:
        return o * ((i * k * k + 63) // 64) * 8, o * 4
    if kind == K_FP_LINEAR:
        return (o * i + o) * 4, 0
    if kind == K_BIN_LINEAR:
        return o * ((i + 63) // 64) * 8, o * 4
    if kind == K_BN:
        return (4 * o + 1) * 4, 0
    if kind == K_PRELU:
        return o * 4, 0
    if kind in (K_POOL, K_ROUTE):
        return 0, 0
    raise FormatError(f"unknown record kind {kind}")


def decode(blob: bytes, source: str = "model") -> list[Record]:
    if len(blob) < 12:
        raise IntegrityError(f"{source}: file too short ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<HH", blob, 4)
    if version > VERSION:
        raise VersionError(f"{source}: format version {version} > supported {VERSION}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise IntegrityError(f"{source}: CRC mismatch, file corrupt")
    records = []
    offset = 8
    end = len(blob) - 4
    for idx in range(count):
        if offset + 17 > end:
            raise FormatError(f"{source}: record {idx} header truncated")
        kind = blob[offset]
        shape = struct.unpack_from("<4I", blob, offset + 1)
        offset += 17
        if any(d > MAX_DIM for d in shape):
            raise FormatError(f"{source}: record {idx} declares dimension > {MAX_DIM}")
        plen, alen = _payload_len(kind, shape)
        if offset + plen + alen > end:
            raise FormatError(f"{source}: record {idx} payload overruns file")
        payload = blob[offset:offset + plen]
        offset += plen
        alpha = None
        if alen:
            alpha = np.frombuffer(blob, dtype="<f4", count=alen // 4, offset=offset).copy()
            offset += alen
        records.append(Record(kind, tuple(shape), payload, alpha,
                              name=f"{KIND_NAMES[kind]}{idx}"))
    if offset != end:
        raise FormatError(f"{source}: {end - offset} trailing bytes after last record")
    return records


# ---------------------------------------------------------------------------
# records -> executable model
# ---------------------------------------------------------------------------

def _f32(payload, count, offset=0):
    return np.frombuffer(payload, dtype="<f4", count=count, offset=offset).copy()


def build_model(records: list[Record]) -> PackedModel:
    steps = []
    for rec in records:
        o, i, k, sp = rec.shape
        if rec.kind == K_FP_CONV:
            w = _f32(rec.payload, o * i * k * k).reshape(o, i, k, k)
            steps.append(PkFpConv(rec.name, w, sp // 256, sp % 256))
        elif rec.kind == K_BIN_CONV:
            cols = i * k * k
            words = np.frombuffer(rec.payload, dtype="<u8").reshape(o, -1).copy()
            steps.append(PkBinConv(rec.name, PackedBitMatrix(o, cols, words),
                                   rec.alpha, o, i, k, sp // 256, sp % 256))
        elif rec.kind == K_FP_LINEAR:
            w = _f32(rec.payload, o * i).reshape(o, i)
            b = _f32(rec.payload, o, offset=o * i * 4)
            steps.append(PkFpLinear(rec.name, w, b))
        elif rec.kind == K_BIN_LINEAR:
            words = np.frombuffer(rec.payload, dtype="<u8").reshape(o, -1).copy()
            steps.append(PkBinLinear(rec.name, PackedBitMatrix(o, i, words), rec.alpha))
        elif rec.kind == K_BN:
            c = o
            g, b = _f32(rec.payload, c), _f32(rec.payload, c, 4 * c)
            m, v = _f32(rec.payload, c, 8 * c), _f32(rec.payload, c, 12 * c)
            eps = float(_f32(rec.payload, 1, 16 * c)[0])
            steps.append(PkBatchNorm(rec.name, g, b, m, v, eps))
        elif rec.kind == K_PRELU:
            steps.append(PkPRelu(rec.name, _f32(rec.payload, o)))
        elif rec.kind == K_POOL:
            steps.append(PkPool(rec.name, o, i, k))
        elif rec.kind == K_ROUTE:
            steps.append(PkRoute(rec.name, o, i, k))
    return PackedModel(steps)


# ---------------------------------------------------------------------------
# public surface
# ---------------------------------------------------------------------------

def export(net: Network, path) -> list[Record]:
    """Serialize a trained network; classifier/estimator state is discarded."""
    records = network_records(net)
    Path(path).write_bytes(encode(records))
    return records


def import_model(path) -> PackedModel:
    blob = Path(path).read_bytes()
    return build_model(decode(blob, source=str(path)))


def size_report(net: Network) -> list[dict]:
    """Per-layer fp32-equivalent vs exported payload bytes, plus totals.

    The ratio excludes per-channel alpha arrays and record headers for
    binary layers (reported separately); the last row is the whole-file
    total including everything.
    """
    records = network_records(net)
    rows = []
    total_fp = total_file = 0
    for rec in records:
        o, i, k, _ = rec.shape
        if rec.kind in (K_FP_CONV, K_BIN_CONV):
            fp32 = o * i * k * k * 4
        elif rec.kind in (K_FP_LINEAR, K_BIN_LINEAR):
            fp32 = (o * i + (o if rec.kind == K_FP_LINEAR else 0)) * 4
        else:
            fp32 = len(rec.payload)
        payload = len(rec.payload)
        alpha = 0 if rec.alpha is None else rec.alpha.size * 4
        rows.append({"layer": rec.name, "kind": KIND_NAMES[rec.kind],
                     "fp32_bytes": fp32, "payload_bytes": payload,
                     "alpha_bytes": alpha,
                     "ratio": fp32 / payload if payload else 1.0})
        total_fp += fp32
        total_file += rec.file_bytes()
    total_file += 12  # header + trailer
    rows.append({"layer": "total", "kind": "", "fp32_bytes": total_fp,
                 "payload_bytes": total_file, "alpha_bytes": 0,
                 "ratio": total_fp / total_file if total_file else 1.0})
    return rows


def dump(path) -> str:
    """Human-readable header and per-record summary of a model file."""
    blob = Path(path).read_bytes()
    records = decode(blob, source=str(path))
    lines = [f"magic BBCM version {struct.unpack_from('<H', blob, 4)[0]} "
             f"records {len(records)} bytes {len(blob)}"]
    for idx, rec in enumerate(records):
        alpha = "" if rec.alpha is None else f" alpha[{rec.alpha.size}]"
        lines.append(f"[{idx:3d}] {KIND_NAMES[rec.kind]:<10} shape={rec.shape} "
                     f"payload={len(rec.payload)}B{alpha}")
    return "\n".join(lines) + "\n"

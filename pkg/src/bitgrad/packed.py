"""XNOR-popcount inference: bit-packed binary GEMM and the deployable model.

Binary {-1,+1} vectors are packed into little-endian 64-bit words (+1 -> bit
1, -1 -> bit 0, bit i of word j holds column 64*j+i, zero tail bits). The
dot product of two packed rows is recovered exactly from the XOR mismatch
count: dot = n - 2 * popcount(XOR), which equals the documented
2 * popcount(XNOR masked to n) - n since both tails are zero.

The binary-conv execution path reproduces the float training path bit for
bit: the integer dot is exact, and the alpha scaling and (unfolded) batch
norm reuse the training kernels, so exported models match checkpoint logits
exactly. FoldedAffine is the lossy-by-ulps per-channel fold used where that
guarantee is not needed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import EncodingError, ShapeError
from .estimators import sign_binarize
from .ops import DTYPE

WORD_BITS = 64


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


class PackedBitMatrix:
    """Row-major 1-bit matrix in 64-bit words, each row padded to a word boundary."""

    def __init__(self, rows: int, cols: int, words: np.ndarray):
        self.rows = rows
        self.cols = cols
        self.words = words  # (rows, ceil(cols/64)) uint64

    @property
    def words_per_row(self) -> int:
        return self.words.shape[1]

    @classmethod
    def pack(cls, t: np.ndarray) -> "PackedBitMatrix":
        """Pack a {-1,+1} vector or matrix; any other value is an encoding error."""
        t = np.asarray(t)
        if t.ndim == 1:
            t = t[None, :]
        if t.ndim != 2:
            raise ShapeError(f"pack expects a 1-D or 2-D array, got {t.ndim}-D")
        if not np.all(np.abs(t) == 1):
            raise EncodingError("pack: every element must be exactly -1 or +1")
        rows, cols = t.shape
        nw = (cols + WORD_BITS - 1) // WORD_BITS
        bits = np.zeros((rows, nw * WORD_BITS), dtype=np.uint8)
        bits[:, :cols] = t > 0
        packed = np.packbits(bits, axis=1, bitorder="little")
        return cls(rows, cols, packed.view("<u8"))

    def unpack(self) -> np.ndarray:
        byts = self.words.astype("<u8", copy=False).view(np.uint8)
        bits = np.unpackbits(byts.reshape(self.rows, -1), axis=1, bitorder="little")
        return (bits[:, :self.cols].astype(DTYPE) * 2 - 1)

    def row_words(self, i: int) -> np.ndarray:
        return self.words[i]


def _as_words(row) -> tuple[np.ndarray, int]:
    if isinstance(row, PackedBitMatrix):
        if row.rows != 1:
            raise ShapeError("xnor_dot expects single packed rows")
        return row.words[0], row.cols
    return np.asarray(row, dtype=np.uint64), -1


def xnor_dot(w_row, a_row, n: int | None = None) -> int:
    """Exact {-1,+1} dot product of two packed rows of logical length n."""
    w, wn = _as_words(w_row)
    a, an = _as_words(a_row)
    if n is None:
        n = wn if wn >= 0 else an
    if n is None or n < 0:
        raise ShapeError("xnor_dot: logical length n required for raw word rows")
    if wn >= 0 and an >= 0 and wn != an:
        raise ShapeError(f"xnor_dot: length mismatch {wn} vs {an}")
    if w.shape != a.shape:
        raise ShapeError(f"xnor_dot: word count mismatch {w.shape} vs {a.shape}")
    mismatches = int(popcount(w ^ a).sum())
    return n - 2 * mismatches


def xnor_gemm(a: PackedBitMatrix, w: PackedBitMatrix) -> np.ndarray:
    """All-pairs dot products: (a.rows, w.rows) int32 of exact {-1,+1} dots."""
    if a.cols != w.cols:
        raise ShapeError(f"xnor_gemm: logical widths differ, {a.cols} vs {w.cols}")
    out = np.empty((a.rows, w.rows), dtype=np.int32)
    for o in range(w.rows):
        mis = popcount(a.words ^ w.words[o]).sum(axis=1)
        out[:, o] = a.cols - 2 * mis.astype(np.int64)
    return out


@dataclass
class FoldedAffine:
    """Per-channel scale/bias absorbing the alpha scaling and inference batch norm."""

    scale: np.ndarray
    bias: np.ndarray

    @classmethod
    def fold(cls, alpha, gamma, beta, mean, var, eps=1e-5) -> "FoldedAffine":
        inv = gamma / np.sqrt(var + DTYPE(eps))
        return cls(scale=(alpha * inv).astype(DTYPE),
                   bias=(beta - mean * inv).astype(DTYPE))

    def apply(self, dots: np.ndarray) -> np.ndarray:
        # dots: (..., channels) integer accumulators
        return dots.astype(DTYPE) * self.scale + self.bias


# ---------------------------------------------------------------------------
# record-level inference layers
# ---------------------------------------------------------------------------

class PkFpConv:
    def __init__(self, name, weights, stride, pad):
        self.name = name
        self.weights = weights
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return ops.conv2d(x, self.weights, self.stride, self.pad)


class PkBinConv:
    """Packed binary convolution; output equals the float path exactly.

    Inputs are binarized with sign, padding positions enter the packed
    domain as -1 (bit 0) and are compensated with an exact per-position
    integer correction so the result matches zero padding.
    """

    def __init__(self, name, packed_w: PackedBitMatrix, alpha, out_ch, in_ch,
                 kernel, stride, pad):
        self.name = name
        self.packed_w = packed_w
        self.alpha = alpha
        self.out_ch = out_ch
        self.in_ch = in_ch
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self._corr = {}  # (h, w) -> (OH, OW, O) int32 pad compensation

    def _correction(self, h, w):
        if self.pad == 0:
            return None
        key = (h, w)
        if key not in self._corr:
            w_hat = self.packed_w.unpack().reshape(
                self.out_ch, self.in_ch, self.kernel, self.kernel)
            ones = np.ones((1, self.in_ch, h, w), dtype=DTYPE)
            in_sum = ops.conv2d(ones, w_hat, self.stride, self.pad)[0]
            total = w_hat.reshape(self.out_ch, -1).sum(axis=1)
            corr = total.reshape(-1, 1, 1) - in_sum  # pad-tap weight sums
            self._corr[key] = np.rint(corr).astype(np.int32).transpose(1, 2, 0)
        return self._corr[key]

    def __call__(self, x):
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} channels, got {c}")
        a = sign_binarize(x)
        if self.pad:
            ap = np.full((n, c, h + 2 * self.pad, w + 2 * self.pad), DTYPE(-1))
            ap[:, :, self.pad:self.pad + h, self.pad:self.pad + w] = a
        else:
            ap = a
        cols = ops.im2col(ap, self.kernel, self.kernel, self.stride, 0)
        packed_a = PackedBitMatrix.pack(cols)
        dots = xnor_gemm(packed_a, self.packed_w)
        oh = (h + 2 * self.pad - self.kernel) // self.stride + 1
        ow = (w + 2 * self.pad - self.kernel) // self.stride + 1
        dots = dots.reshape(n, oh, ow, self.out_ch)
        corr = self._correction(h, w)
        if corr is not None:
            dots = dots + corr
        out = dots.astype(DTYPE) * self.alpha
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


class PkFpLinear:
    def __init__(self, name, weights, bias):
        self.name = name
        self.weights = weights
        self.bias = bias

    def __call__(self, x):
        if x.ndim > 2:
            x = ops.flatten(x)
        return x @ self.weights.T + self.bias


class PkBinLinear:
    def __init__(self, name, packed_w: PackedBitMatrix, alpha):
        self.name = name
        self.packed_w = packed_w
        self.alpha = alpha

    def __call__(self, x):
        if x.ndim > 2:
            x = ops.flatten(x)
        a = sign_binarize(x)
        dots = xnor_gemm(PackedBitMatrix.pack(a), self.packed_w)
        return dots.astype(DTYPE) * self.alpha


class PkBatchNorm:
    def __init__(self, name, gamma, beta, mean, var, eps=1e-5):
        self.name = name
        self.gamma, self.beta, self.mean, self.var, self.eps = gamma, beta, mean, var, eps

    def folded(self, alpha) -> FoldedAffine:
        return FoldedAffine.fold(alpha, self.gamma, self.beta, self.mean, self.var, self.eps)

    def __call__(self, x):
        return ops.batchnorm_infer(x, self.gamma, self.beta, self.mean, self.var, self.eps)


class PkPRelu:
    def __init__(self, name, slope):
        self.name = name
        self.slope = slope

    def __call__(self, x):
        return ops.prelu(x, self.slope)


class PkPool:
    MAX, AVG, GLOBAL_AVG = 0, 1, 2

    def __init__(self, name, mode, window, stride):
        self.name = name
        self.mode = mode
        self.window = window
        self.stride = stride

    def __call__(self, x):
        if self.mode == self.MAX:
            return ops.maxpool2d(x, self.window, self.stride)
        if self.mode == self.AVG:
            return ops.avgpool2d(x, self.window, self.stride)
        return ops.avgpool2d(x, x.shape[2], x.shape[2])


class PkRoute:
    """Two-slot flow control for residual structure: copy, add, or switch."""

    COPY, ADD, SWITCH = 0, 1, 2

    def __init__(self, name, op, src, dst):
        self.name = name
        self.op = op
        self.src = src
        self.dst = dst


class PackedModel:
    """Immutable executable sequence of inference records."""

    def __init__(self, steps: list):
        self.steps = steps

    def forward(self, x: np.ndarray) -> np.ndarray:
        slots = {0: x}
        current = 0
        for step in self.steps:
            if isinstance(step, PkRoute):
                if step.op == PkRoute.COPY:
                    slots[step.dst] = slots[step.src]
                elif step.op == PkRoute.ADD:
                    slots[step.dst] = ops.add(slots[step.dst], slots[step.src])
                else:
                    current = step.dst
                continue
            slots[current] = step(slots[current])
        return slots[current]

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, images.shape[0], batch_size):
            out.append(self.forward(images[i:i + batch_size]).argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# cost accounting and micro-benchmark
# ---------------------------------------------------------------------------

def ops_accounting(steps: list, input_hw: tuple[int, int]) -> list[dict]:
    """Per-layer MAC counts for one sample: OPs = BOPs/64 + FLOPs.

    BOPs counts binary MACs, FLOPs counts full-precision MACs (convolutions
    and linear layers; normalization/activation glue is not counted).
    """
    h, w = input_hw
    rows = []
    for step in steps:
        bops = flops = 0
        if isinstance(step, (PkFpConv, PkBinConv)):
            if isinstance(step, PkFpConv):
                o, c, kh, kw = step.weights.shape
            else:
                o, c, kh, kw = step.out_ch, step.in_ch, step.kernel, step.kernel
            h = (h + 2 * step.pad - kh) // step.stride + 1
            w = (w + 2 * step.pad - kw) // step.stride + 1
            macs = h * w * o * c * kh * kw
            if isinstance(step, PkBinConv):
                bops = macs
            else:
                flops = macs
        elif isinstance(step, PkFpLinear):
            flops = step.weights.size
        elif isinstance(step, PkBinLinear):
            bops = step.packed_w.rows * step.packed_w.cols
        elif isinstance(step, PkPool):
            if step.mode == PkPool.GLOBAL_AVG:
                h = w = 1
            else:
                h = (h - step.window) // step.stride + 1
                w = (w - step.window) // step.stride + 1
        elif isinstance(step, PkRoute):
            continue
        rows.append({"layer": step.name, "kind": type(step).__name__,
                     "bops": bops, "flops": flops, "ops": bops / 64 + flops})
    return rows


def _time_loop(fn, min_time=0.02) -> float:
    """Best-of-3 amortized nanoseconds per call."""
    fn()  # warm up
    best = float("inf")
    for _ in range(3):
        k = 1
        while True:
            t0 = time.perf_counter()
            for _ in range(k):
                fn()
            dt = time.perf_counter() - t0
            if dt >= min_time:
                break
            k *= 4
        best = min(best, dt / k)
    return best * 1e9


def benchmark(sizes, rows: int = 128, rng: np.random.Generator | None = None) -> list[dict]:
    """Throughput of the packed GEMV kernel vs the float32 reference.

    For each logical length n, times a (rows x n) matrix-vector product in
    both domains and reports per-call nanoseconds, the speedup, and the
    analytic cost of the binary kernel (bops binary MACs -> ops = bops/64;
    flops is the float reference's MAC count).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out = []
    for n in sizes:
        if n < 1:
            raise ShapeError(f"benchmark: size must be >= 1, got {n}")
        wf = sign_binarize(rng.standard_normal((rows, n)).astype(DTYPE))
        af = sign_binarize(rng.standard_normal(n).astype(DTYPE))
        pw = PackedBitMatrix.pack(wf)
        pa = PackedBitMatrix.pack(af)

        def packed_call():
            mis = popcount(pw.words ^ pa.words[0]).sum(axis=1)
            return n - 2 * mis

        def float_call():
            return wf @ af

        packed_ns = _time_loop(packed_call)
        float_ns = _time_loop(float_call)
        out.append({"size": n, "packed_ns": packed_ns, "float_ns": float_ns,
                    "speedup": float_ns / packed_ns,
                    "bops": rows * n, "flops": rows * n, "ops": rows * n / 64})
    return out


def benchmark_csv(rows: list[dict]) -> str:
    cols = ("size", "packed_ns", "float_ns", "speedup", "bops", "flops", "ops")
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(f"{r[c]:.1f}" if isinstance(r[c], float) else str(r[c])
                              for c in cols))
    return "\n".join(lines) + "\n"


def accounting_csv(rows: list[dict]) -> str:
    lines = ["layer,kind,bops,flops,ops"]
    total_b = total_f = 0
    for r in rows:
        lines.append(f"{r['layer']},{r['kind']},{r['bops']},{r['flops']},{r['ops']:.1f}")
        total_b += r["bops"]
        total_f += r["flops"]
    lines.append(f"total,,{total_b},{total_f},{total_b / 64 + total_f:.1f}")
    return "\n".join(lines) + "\n"

"""Dense labelled tensors and contraction kernels.

Data is complex64, row-major over ``labels`` (last label fastest). Each tensor
carries a base-2 ``log_scale`` so that its value is ``2**log_scale * data``;
this keeps single-precision data away from underflow on large circuits.
"""

from __future__ import annotations

import itertools
import math
import struct
import threading
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

__all__ = [
    "TensorError",
    "Tensor",
    "ContractionSpec",
    "FlopCounter",
    "FLOPS",
    "transpose",
    "gemm",
    "contract_ttgt",
    "contract_naive",
    "flop_count",
    "normalize",
    "write_tensor",
    "read_tensor",
]

DTYPE = np.complex64
ITEMSIZE = np.dtype(DTYPE).itemsize
NAIVE_LOOP_BOUND = 1 << 22
MAX_VOLUME = 1 << 40


class TensorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Tensor:
    labels: tuple[str, ...]
    data: np.ndarray
    log_scale: float = 0.0

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(set(labels)) != len(labels):
            raise TensorError(f"duplicate labels in {labels}")
        data = np.asarray(self.data)
        if data.dtype != DTYPE:
            data = data.astype(DTYPE)
        if data.ndim != len(labels):
            raise TensorError(f"{len(labels)} labels for a rank-{data.ndim} array")
        if any(d < 1 for d in data.shape):
            raise TensorError(f"zero extent in shape {data.shape}")
        data = data.view()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rank(self) -> int:
        return len(self.labels)

    @property
    def volume(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return self.volume * ITEMSIZE

    def dim(self, label: str) -> int:
        return self.data.shape[self.labels.index(label)]

    def value(self) -> np.ndarray:
        """Represented value in double precision."""
        return self.data.astype(np.complex128) * 2.0 ** self.log_scale

    def scalar(self) -> complex:
        if self.volume != 1:
            raise TensorError(f"not a scalar: volume {self.volume}")
        return complex(self.data.reshape(())) * 2.0 ** self.log_scale

    def fix(self, label: str, index: int) -> "Tensor":
        """Drop ``label`` by selecting one of its values."""
        ax = self.labels.index(label)
        data = np.take(self.data, index, axis=ax)
        return Tensor(self.labels[:ax] + self.labels[ax + 1 :], np.array(data, order="C"), self.log_scale)

    def slice(self, label: str, lo: int, hi: int) -> "Tensor":
        ax = self.labels.index(label)
        idx = [slice(None)] * self.rank
        idx[ax] = slice(lo, hi)
        return Tensor(self.labels, np.array(self.data[tuple(idx)], order="C"), self.log_scale)

    def with_data(self, data: np.ndarray, log_scale: float | None = None) -> "Tensor":
        return Tensor(self.labels, data, self.log_scale if log_scale is None else log_scale)

    def __repr__(self):
        dims = "x".join(map(str, self.dims)) or "scalar"
        return f"Tensor({list(self.labels)}, {dims}, log_scale={self.log_scale})"


class FlopCounter:
    """Thread-safe integer flop accumulator."""

    def __init__(self):
        self._lock = threading.Lock()
        self._total = 0

    def add(self, flops: int) -> None:
        with self._lock:
            self._total += flops

    @property
    def total(self) -> int:
        return self._total

    def reset(self) -> int:
        with self._lock:
            total, self._total = self._total, 0
        return total


FLOPS = FlopCounter()


def flop_count(v0: int, v1: int, v2: int) -> int:
    """``8 * sqrt(v0 * v1 * v2)`` for the volumes of a pairwise contraction.

    For a valid contraction the radicand is a perfect square and the result is
    an exact integer; anything else means the volumes are inconsistent.
    """
    rad = int(v0) * int(v1) * int(v2)
    root = math.isqrt(rad)
    if root * root != rad:
        raise TensorError(f"volumes ({v0}, {v1}, {v2}) do not describe a pairwise contraction")
    return 8 * root


@dataclass(frozen=True, eq=False)
class ContractionSpec:
    left: Tensor
    right: Tensor
    contracted: tuple[str, ...]
    output: tuple[str, ...]

    @classmethod
    def build(cls, left: Tensor, right: Tensor, output: Sequence[str] | None = None) -> "ContractionSpec":
        shared = tuple(l for l in left.labels if l in right.labels)
        free = tuple(l for l in left.labels if l not in shared) + tuple(
            l for l in right.labels if l not in shared
        )
        spec = cls(left, right, shared, tuple(output) if output is not None else free)
        spec.validate()
        return spec

    def validate(self) -> None:
        l, r = self.left, self.right
        for lab in self.contracted:
            if lab not in l.labels or lab not in r.labels:
                raise TensorError(f"contracted label {lab!r} missing from an operand")
            if l.dim(lab) != r.dim(lab):
                raise TensorError(f"extent mismatch on {lab!r}: {l.dim(lab)} vs {r.dim(lab)}")
        shared = set(l.labels) & set(r.labels)
        if shared != set(self.contracted):
            raise TensorError(f"shared labels {sorted(shared)} must all be contracted")
        expected = set(l.labels) ^ set(r.labels)
        if set(self.output) != expected or len(self.output) != len(expected):
            raise TensorError(f"output {self.output} is not the symmetric difference {sorted(expected)}")

    def _extents(self) -> dict[str, int]:
        ext = dict(zip(self.left.labels, self.left.dims))
        ext.update(zip(self.right.labels, self.right.dims))
        return ext

    @property
    def output_dims(self) -> tuple[int, ...]:
        ext = self._extents()
        return tuple(ext[l] for l in self.output)

    @property
    def volumes(self) -> tuple[int, int, int]:
        return math.prod(self.output_dims), self.left.volume, self.right.volume

    @property
    def flops(self) -> int:
        return flop_count(*self.volumes)


def transpose(t: Tensor, perm: Sequence[str]) -> Tensor:
    """Permute ``t`` so its labels follow ``perm``."""
    perm = tuple(perm)
    if sorted(perm) != sorted(t.labels) or len(perm) != t.rank:
        raise TensorError(f"{perm} is not a permutation of {t.labels}")
    if perm == t.labels:
        return t
    axes = [t.labels.index(l) for l in perm]
    return Tensor(perm, np.array(np.transpose(t.data, axes), order="C"), t.log_scale)


def gemm(a: np.ndarray, b: np.ndarray, tile: tuple[int, int, int] = (512, 512, 512)) -> np.ndarray:
    """Cache-tiled complex GEMM, accumulating in the operands' precision."""
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise TensorError(f"gemm inner dimensions differ: {k} vs {k2}")
    tm, tn, tk = tile
    dtype = np.result_type(a, b)
    if m <= tm and n <= tn and k <= tk:
        return np.matmul(a, b).astype(dtype, copy=False)
    c = np.zeros((m, n), dtype=dtype)
    for i0 in range(0, m, tm):
        for j0 in range(0, n, tn):
            acc = c[i0 : i0 + tm, j0 : j0 + tn]
            for k0 in range(0, k, tk):
                acc += a[i0 : i0 + tm, k0 : k0 + tk] @ b[k0 : k0 + tk, j0 : j0 + tn]
    return c


def _spec_of(spec_or_left, right=None, output=None) -> ContractionSpec:
    if isinstance(spec_or_left, ContractionSpec):
        return spec_or_left
    return ContractionSpec.build(spec_or_left, right, output)


def contract_ttgt(
    spec: ContractionSpec | Tensor,
    right: Tensor | None = None,
    output: Sequence[str] | None = None,
    *,
    counter: FlopCounter | None = FLOPS,
    renormalize: bool = False,
    tile: tuple[int, int, int] = (512, 512, 512),
) -> Tensor:
    """Contract two tensors by transpose, transpose, GEMM, transpose.

    Accepts either a :class:`ContractionSpec` or ``(left, right[, output])``.
    The flop counter is charged ``flop_count(v_out, v_left, v_right)``.
    """
    spec = _spec_of(spec, right, output)
    left, right = spec.left, spec.right
    con = spec.contracted
    free_l = tuple(l for l in left.labels if l not in con)
    free_r = tuple(l for l in right.labels if l not in con)
    out_dims = spec.output_dims
    if math.prod(out_dims) > MAX_VOLUME:
        raise TensorError(f"output volume {math.prod(out_dims)} exceeds {MAX_VOLUME}")

    a = transpose(left, free_l + con).data
    b = transpose(right, con + free_r).data
    m = math.prod(a.shape[: len(free_l)])
    k = math.prod(a.shape[len(free_l) :])
    n = math.prod(b.shape[len(con) :])
    c = gemm(a.reshape(m, k), b.reshape(k, n), tile)
    ext = spec._extents()
    raw = Tensor(free_l + free_r, c.reshape([ext[l] for l in free_l + free_r]), left.log_scale + right.log_scale)
    out = transpose(raw, spec.output)
    if counter is not None:
        counter.add(spec.flops)
    return normalize(out) if renormalize else out


def contract_naive(
    spec: ContractionSpec | Tensor,
    right: Tensor | None = None,
    output: Sequence[str] | None = None,
    *,
    bound: int = NAIVE_LOOP_BOUND,
) -> Tensor:
    """Reference contraction by explicit loops, accumulated in double precision."""
    spec = _spec_of(spec, right, output)
    left, right = spec.left, spec.right
    ext = spec._extents()
    out_dims = spec.output_dims
    con_dims = tuple(ext[l] for l in spec.contracted)
    loops = math.prod(out_dims) * math.prod(con_dims)
    if loops > bound:
        raise TensorError(f"naive contraction needs {loops} iterations, bound is {bound}")

    lv = left.data.astype(np.complex128).ravel().tolist()
    rv = right.data.astype(np.complex128).ravel().tolist()

    def strides(t: Tensor) -> dict[str, int]:
        s, acc = {}, 1
        for lab, d in zip(reversed(t.labels), reversed(t.dims)):
            s[lab] = acc
            acc *= d
        return s

    ls, rs = strides(left), strides(right)
    out = np.zeros(out_dims, dtype=np.complex128)
    flat = out.reshape(-1)
    con_ranges = [range(d) for d in con_dims]
    for pos, oidx in enumerate(itertools.product(*(range(d) for d in out_dims))):
        lo = ro = 0
        for lab, i in zip(spec.output, oidx):
            if lab in ls:
                lo += i * ls[lab]
            else:
                ro += i * rs[lab]
        total = 0j
        for cidx in itertools.product(*con_ranges):
            li, ri = lo, ro
            for lab, i in zip(spec.contracted, cidx):
                li += i * ls[lab]
                ri += i * rs[lab]
            total += lv[li] * rv[ri]
        flat[pos] = total
    return Tensor(spec.output, out.astype(DTYPE), left.log_scale + right.log_scale)


def normalize(t: Tensor) -> Tensor:
    """Rescale data by a power of two so its largest magnitude lies in [0.5, 1].

    The represented value is unchanged. All-zero tensors are returned as is;
    callers can detect them with ``not t.data.any()``.
    """
    peak = float(np.max(np.abs(t.data))) if t.volume else 0.0
    if peak == 0.0 or not math.isfinite(peak):
        return t
    if 0.5 <= peak <= 1.0:
        return t
    _, exp = math.frexp(peak)
    re = np.ldexp(t.data.real, -exp)
    im = np.ldexp(t.data.imag, -exp)
    data = (re + 1j * im).astype(DTYPE)
    return Tensor(t.labels, data, t.log_scale + exp)


# Binary dump, little-endian:
#   b"QSTN" | u32 version=1 | u32 rank
#   rank x (u32 nbytes, utf-8 label) | rank x u64 extent
#   f64 log_scale | volume x complex64 (re f32, im f32)
_MAGIC = b"QSTN"


def write_tensor(fh: BinaryIO, t: Tensor) -> None:
    fh.write(_MAGIC + struct.pack("<II", 1, t.rank))
    for lab in t.labels:
        raw = lab.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)) + raw)
    fh.write(struct.pack(f"<{t.rank}Q", *t.dims))
    fh.write(struct.pack("<d", t.log_scale))
    fh.write(np.ascontiguousarray(t.data).astype("<c8").tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    head = fh.read(12)
    if len(head) != 12 or head[:4] != _MAGIC:
        raise TensorError("not a tensor dump")
    version, rank = struct.unpack("<II", head[4:])
    if version != 1:
        raise TensorError(f"unsupported tensor dump version {version}")
    labels = []
    for _ in range(rank):
        (ln,) = struct.unpack("<I", fh.read(4))
        labels.append(fh.read(ln).decode("utf-8"))
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    (log_scale,) = struct.unpack("<d", fh.read(8))
    count = math.prod(dims)
    raw = fh.read(count * 8)
    if len(raw) != count * 8:
        raise TensorError("truncated tensor dump")
    data = np.frombuffer(raw, dtype="<c8").astype(DTYPE).reshape(dims)
    return Tensor(tuple(labels), data, log_scale)


def random_tensor(labels: Iterable[str], dims: Iterable[int], rng: np.random.Generator) -> Tensor:
    dims = tuple(dims)
    data = rng.standard_normal(dims) + 1j * rng.standard_normal(dims)
    return Tensor(tuple(labels), data.astype(DTYPE))

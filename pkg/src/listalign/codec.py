"""Vector compression codecs and their on-disk formats.

Four codecs share one encode/decode shape: product quantization (PQ), rotated
product quantization (OPQ), per-dimension 8-bit scalar quantization, and a PCA
projection followed by scalar quantization. Encoded vectors are rows of uint8
codes (a CodeBlock); decode maps codes back to float vectors in the original
input space.

Trained codec parameters are rounded to float32 before use so that the values in
memory equal the values on disk; encoding after a save/load round-trip is
bit-identical to encoding before it.

File formats (little-endian):

    codec file      magic "BLCODEC1", kind u8 (0=PQ 1=OPQ 2=SCALAR 3=PCA),
                    kind-specific u32 dims, float32 parameter payload
    embedding file  magic "BLEMB001", n u64, d u32, dtype u8 (0=f32 1=u8),
                    row-major payload
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._fileio import Reader, atomic_write_bytes, pack_u8, pack_u32, pack_u64, read_magic
from .errors import DegenerateInput, ShapeMismatch
from .linalg import PcaModel, as_matrix, kmeans_fit, kmeans_refine, pca_fit, percentiles, procrustes

__all__ = [
    "CodeBlock",
    "PqCodebook",
    "OpqCodec",
    "ScalarQuantizer",
    "PcaCodec",
    "pq_train",
    "pq_encode",
    "pq_decode",
    "opq_train",
    "opq_encode",
    "opq_decode",
    "scalar_train",
    "scalar_encode",
    "scalar_decode",
    "pca_codec_train",
    "pca_codec_encode",
    "pca_codec_decode",
    "train_codec",
    "encode",
    "decode",
    "CompressionReport",
    "compression_report",
    "error_reduction",
    "save_codec",
    "load_codec",
    "save_embeddings",
    "load_embeddings",
]

CODEC_MAGIC = b"BLCODEC1"
EMB_MAGIC = b"BLEMB001"

KIND_PQ, KIND_OPQ, KIND_SCALAR, KIND_PCA = 0, 1, 2, 3

DEFAULT_LEVELS = (0.05, 0.25, 0.50, 0.75, 0.90, 0.99)


def _f32(a: np.ndarray) -> np.ndarray:
    """Round through float32, back to float64 (storage precision)."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class CodeBlock:
    """n encoded vectors, one row of uint8 codes each."""

    n: int
    bytes_per_vector: int
    codes: np.ndarray  # (n, bytes_per_vector) uint8

    def __post_init__(self):
        if self.codes.shape != (self.n, self.bytes_per_vector):
            raise ShapeMismatch(
                f"CodeBlock: codes shape {self.codes.shape} != "
                f"({self.n}, {self.bytes_per_vector})"
            )
        if self.codes.dtype != np.uint8:
            raise DegenerateInput("CodeBlock: codes must be uint8")


# ---------------------------------------------------------------------------
# product quantization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PqCodebook:
    """Per-subspace centroid tables.

    dim is the original input dimensionality; inputs are zero-padded up to
    m * sub_dim internally, and decode truncates back to dim.
    """

    dim: int
    m: int
    k: int
    sub_dim: int
    codebooks: np.ndarray  # (m, k, sub_dim)

    @property
    def padded_dim(self) -> int:
        return self.m * self.sub_dim


def _pad_columns(x: np.ndarray, width: int) -> np.ndarray:
    if x.shape[1] == width:
        return x
    out = np.zeros((x.shape[0], width))
    out[:, : x.shape[1]] = x
    return out


def pq_train(x, m: int, k: int, iters: int = 25, seed: int = 0) -> PqCodebook:
    """Train an m-subspace, k-centroid product quantizer.

    The input is zero-padded so the width divides evenly into m subspaces of
    sub_dim = ceil(d / m) columns each. Subspace j runs k-means with seed
    seed + j, so per-slice results can be reproduced independently.
    """
    x = as_matrix(x)
    n, d = x.shape
    if m < 1:
        raise DegenerateInput(f"pq_train: m must be >= 1, got {m}")
    if not 1 <= k <= 256:
        raise DegenerateInput(f"pq_train: k must be in [1, 256] (one byte per code), got {k}")
    if n < k:
        raise DegenerateInput(f"pq_train: need n >= k, got n={n}, k={k}")
    sub_dim = -(-d // m)
    xp = _pad_columns(x, m * sub_dim)
    codebooks = np.empty((m, k, sub_dim))
    for j in range(m):
        sl = xp[:, j * sub_dim : (j + 1) * sub_dim]
        codebooks[j] = kmeans_fit(sl, k, iters=iters, seed=seed + j).centroids
    return PqCodebook(dim=d, m=m, k=k, sub_dim=sub_dim, codebooks=_f32(codebooks))


def _pq_encode_padded(cb: PqCodebook, xp: np.ndarray) -> np.ndarray:
    n = xp.shape[0]
    codes = np.empty((n, cb.m), dtype=np.uint8)
    for j in range(cb.m):
        sl = xp[:, j * cb.sub_dim : (j + 1) * cb.sub_dim]
        c = cb.codebooks[j]
        d2 = (
            np.sum(sl * sl, axis=1)[:, None]
            - 2.0 * (sl @ c.T)
            + np.sum(c * c, axis=1)[None, :]
        )
        codes[:, j] = np.argmin(d2, axis=1)  # ties: lowest centroid index
    return codes


def pq_encode(cb: PqCodebook, x) -> CodeBlock:
    """Encode rows of x (n x dim) to m bytes per vector."""
    x = as_matrix(x)
    if x.shape[1] != cb.dim:
        raise ShapeMismatch(f"pq_encode: expected {cb.dim} columns, got {x.shape[1]}")
    codes = _pq_encode_padded(cb, _pad_columns(x, cb.padded_dim))
    return CodeBlock(n=x.shape[0], bytes_per_vector=cb.m, codes=codes)


def _pq_decode_padded(cb: PqCodebook, codes: np.ndarray) -> np.ndarray:
    parts = [cb.codebooks[j][codes[:, j]] for j in range(cb.m)]
    return np.concatenate(parts, axis=1)


def pq_decode(cb: PqCodebook, block: CodeBlock) -> np.ndarray:
    """Reconstruct vectors by concatenating the indexed centroids."""
    if block.bytes_per_vector != cb.m:
        raise ShapeMismatch(
            f"pq_decode: block has {block.bytes_per_vector} bytes/vector, codebook wants {cb.m}"
        )
    return _pq_decode_padded(cb, block.codes)[:, : cb.dim]


# ---------------------------------------------------------------------------
# rotated product quantization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpqCodec:
    """Orthogonal rotation composed with a product quantizer.

    The rotation acts on inputs zero-padded to rotated_dim; the inner PQ is
    trained in the rotated space, so pq.dim == rotated_dim.
    """

    input_dim: int
    rotated_dim: int
    rotation: np.ndarray  # (rotated_dim, rotated_dim)
    pq: PqCodebook
    objective_history: np.ndarray = field(default_factory=lambda: np.empty(0))


def _recon_error(cb: PqCodebook, xr: np.ndarray) -> float:
    codes = _pq_encode_padded(cb, xr)
    xhat = _pq_decode_padded(cb, codes)
    return float(np.sum((xr - xhat) ** 2))


def opq_train(
    x,
    m: int,
    k: int,
    rotated_dim: int | None = None,
    outer_iters: int = 10,
    seed: int = 0,
    kmeans_iters: int = 25,
) -> OpqCodec:
    """Alternate codebook and rotation updates to fit a rotated product quantizer.

    Starts from the identity rotation and a plain PQ fit, then loops: encode /
    decode in the rotated space, re-solve the rotation against the
    reconstructions (orthogonal Procrustes), and refine each subspace codebook
    by warm-started Lloyd iterations. Both steps lower the total squared
    reconstruction error, so the recorded objective never increases. With
    outer_iters=0 the result is exactly the plain PQ fit.
    """
    x = as_matrix(x)
    n, d = x.shape
    if rotated_dim is None:
        rotated_dim = -(-d // m) * m
    if rotated_dim < d:
        raise DegenerateInput(f"opq_train: rotated_dim {rotated_dim} < input dim {d}")
    if rotated_dim % m != 0:
        raise DegenerateInput(f"opq_train: rotated_dim {rotated_dim} not divisible by m={m}")
    if outer_iters < 0:
        raise DegenerateInput("opq_train: outer_iters must be >= 0")
    if n < rotated_dim and outer_iters > 0:
        raise DegenerateInput(
            f"opq_train: rotation update needs n >= rotated_dim, got n={n}, rotated_dim={rotated_dim}"
        )

    xp = _pad_columns(x, rotated_dim)
    rotation = np.eye(rotated_dim)
    xr = xp
    cb = pq_train(xr, m, k, iters=kmeans_iters, seed=seed)
    history = [_recon_error(cb, xr)]

    for _ in range(outer_iters):
        codes = _pq_encode_padded(cb, xr)
        xhat = _pq_decode_padded(cb, codes)
        rotation = _f32(procrustes(xp, xhat))
        xr = xp @ rotation
        sub = cb.sub_dim
        new_books = np.empty_like(cb.codebooks)
        for j in range(m):
            sl = xr[:, j * sub : (j + 1) * sub]
            new_books[j] = kmeans_refine(sl, cb.codebooks[j], iters=kmeans_iters).centroids
        cb = PqCodebook(dim=rotated_dim, m=m, k=k, sub_dim=sub, codebooks=_f32(new_books))
        history.append(_recon_error(cb, xr))

    return OpqCodec(
        input_dim=d,
        rotated_dim=rotated_dim,
        rotation=rotation,
        pq=cb,
        objective_history=np.asarray(history),
    )


def opq_encode(codec: OpqCodec, x) -> CodeBlock:
    x = as_matrix(x)
    if x.shape[1] != codec.input_dim:
        raise ShapeMismatch(f"opq_encode: expected {codec.input_dim} columns, got {x.shape[1]}")
    xr = _pad_columns(x, codec.rotated_dim) @ codec.rotation
    codes = _pq_encode_padded(codec.pq, xr)
    return CodeBlock(n=x.shape[0], bytes_per_vector=codec.pq.m, codes=codes)


def opq_decode(codec: OpqCodec, block: CodeBlock) -> np.ndarray:
    xr = pq_decode(codec.pq, block)
    return (xr @ codec.rotation.T)[:, : codec.input_dim]


# ---------------------------------------------------------------------------
# scalar quantization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarQuantizer:
    """Per-dimension affine map onto the 8-bit grid [0, 255]."""

    mins: np.ndarray   # (d,)
    scales: np.ndarray  # (d,) strictly positive

    @property
    def dim(self) -> int:
        return self.mins.shape[0]


def scalar_train(x) -> ScalarQuantizer:
    """Fit per-dimension min/scale from the data range.

    Zero-range dimensions get scale 1 so they decode exactly to the stored min.
    """
    x = as_matrix(x)
    if x.shape[0] < 1:
        raise DegenerateInput("scalar_train: need at least one row")
    mins = x.min(axis=0)
    spread = x.max(axis=0) - mins
    scales = np.where(spread > 0.0, spread / 255.0, 1.0)
    return ScalarQuantizer(mins=_f32(mins), scales=_f32(scales))


def scalar_encode(q: ScalarQuantizer, x) -> CodeBlock:
    """Round-half-to-even onto the grid, clipping out-of-range values."""
    x = as_matrix(x)
    if x.shape[1] != q.dim:
        raise ShapeMismatch(f"scalar_encode: expected {q.dim} columns, got {x.shape[1]}")
    grid = np.rint((x - q.mins) / q.scales)
    codes = np.clip(grid, 0.0, 255.0).astype(np.uint8)
    return CodeBlock(n=x.shape[0], bytes_per_vector=q.dim, codes=codes)


def scalar_decode(q: ScalarQuantizer, block: CodeBlock) -> np.ndarray:
    if block.bytes_per_vector != q.dim:
        raise ShapeMismatch(
            f"scalar_decode: block has {block.bytes_per_vector} bytes/vector, quantizer wants {q.dim}"
        )
    return q.mins + block.codes.astype(np.float64) * q.scales


# ---------------------------------------------------------------------------
# PCA + scalar codec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaCodec:
    """Project to out_dim principal components, then 8-bit quantize each one."""

    input_dim: int
    out_dim: int
    pca: PcaModel
    quantizer: ScalarQuantizer


def pca_codec_train(x, out_dim: int) -> PcaCodec:
    x = as_matrix(x)
    model = pca_fit(x, out_dim)
    model = PcaModel(
        mean=_f32(model.mean),
        components=_f32(model.components),
        explained_variance=_f32(model.explained_variance),
    )
    projected = model.project(x)
    return PcaCodec(
        input_dim=x.shape[1], out_dim=out_dim, pca=model, quantizer=scalar_train(projected)
    )


def pca_codec_encode(codec: PcaCodec, x) -> CodeBlock:
    x = as_matrix(x)
    if x.shape[1] != codec.input_dim:
        raise ShapeMismatch(
            f"pca_codec_encode: expected {codec.input_dim} columns, got {x.shape[1]}"
        )
    return scalar_encode(codec.quantizer, codec.pca.project(x))


def pca_codec_decode(codec: PcaCodec, block: CodeBlock) -> np.ndarray:
    return codec.pca.reconstruct(scalar_decode(codec.quantizer, block))


# ---------------------------------------------------------------------------
# kind-dispatched front door
# ---------------------------------------------------------------------------

Codec = PqCodebook | OpqCodec | ScalarQuantizer | PcaCodec

_KIND_OF = {PqCodebook: "pq", OpqCodec: "opq", ScalarQuantizer: "scalar", PcaCodec: "pca"}


def codec_kind(codec: Codec) -> str:
    return _KIND_OF[type(codec)]


def train_codec(kind: str, x, **kwargs) -> Codec:
    """Train a codec by kind name: pq, opq, scalar, or pca."""
    if kind == "pq":
        return pq_train(x, **kwargs)
    if kind == "opq":
        return opq_train(x, **kwargs)
    if kind == "scalar":
        return scalar_train(x)
    if kind == "pca":
        return pca_codec_train(x, **kwargs)
    raise DegenerateInput(f"unknown codec kind {kind!r}")


def encode(codec: Codec, x) -> CodeBlock:
    if isinstance(codec, PqCodebook):
        return pq_encode(codec, x)
    if isinstance(codec, OpqCodec):
        return opq_encode(codec, x)
    if isinstance(codec, ScalarQuantizer):
        return scalar_encode(codec, x)
    return pca_codec_encode(codec, x)


def decode(codec: Codec, block: CodeBlock) -> np.ndarray:
    if isinstance(codec, PqCodebook):
        return pq_decode(codec, block)
    if isinstance(codec, OpqCodec):
        return opq_decode(codec, block)
    if isinstance(codec, ScalarQuantizer):
        return scalar_decode(codec, block)
    return pca_codec_decode(codec, block)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompressionReport:
    """Distribution of per-vector L2 reconstruction errors."""

    levels: tuple
    values: np.ndarray
    mean_error: float
    mean_relative_error: float

    def as_dict(self) -> dict:
        return {
            "levels": list(self.levels),
            "values": [float(v) for v in self.values],
            "mean_error": self.mean_error,
            "mean_relative_error": self.mean_relative_error,
        }


def compression_report(x, x_hat, levels=DEFAULT_LEVELS) -> CompressionReport:
    """Percentiles of per-vector L2 error between originals and reconstructions.

    The relative mean divides each vector's error by its norm (zero-norm rows
    are skipped for the relative figure).
    """
    x = as_matrix(x)
    x_hat = as_matrix(x_hat, "x_hat")
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"compression_report: shapes differ, {x.shape} vs {x_hat.shape}")
    errs = np.linalg.norm(x - x_hat, axis=1)
    norms = np.linalg.norm(x, axis=1)
    ok = norms > 0.0
    rel = float(np.mean(errs[ok] / norms[ok])) if ok.any() else 0.0
    return CompressionReport(
        levels=tuple(float(p) for p in levels),
        values=percentiles(errs, levels),
        mean_error=float(errs.mean()),
        mean_relative_error=rel,
    )


def error_reduction(base: CompressionReport, improved: CompressionReport) -> np.ndarray:
    """Percent reduction of each error percentile, improved relative to base."""
    if base.levels != improved.levels:
        raise ShapeMismatch("error_reduction: reports use different percentile levels")
    b = np.asarray(base.values)
    return (b - np.asarray(improved.values)) / b * 100.0


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _read_f32(r: Reader, count: int, shape) -> np.ndarray:
    arr = np.frombuffer(r.raw(4 * count), dtype="<f4").astype(np.float64)
    return arr.reshape(shape)


def save_codec(path: str, codec: Codec) -> None:
    """Serialize any codec to the BLCODEC1 container."""
    parts = [CODEC_MAGIC]
    if isinstance(codec, PqCodebook):
        parts.append(pack_u8(KIND_PQ))
        for v in (codec.dim, codec.m, codec.k, codec.sub_dim):
            parts.append(pack_u32(v))
        parts.append(_f32_bytes(codec.codebooks))
    elif isinstance(codec, OpqCodec):
        parts.append(pack_u8(KIND_OPQ))
        for v in (codec.input_dim, codec.rotated_dim, codec.pq.m, codec.pq.k, codec.pq.sub_dim):
            parts.append(pack_u32(v))
        parts.append(_f32_bytes(codec.rotation))
        parts.append(_f32_bytes(codec.pq.codebooks))
    elif isinstance(codec, ScalarQuantizer):
        parts.append(pack_u8(KIND_SCALAR))
        parts.append(pack_u32(codec.dim))
        parts.append(_f32_bytes(codec.mins))
        parts.append(_f32_bytes(codec.scales))
    elif isinstance(codec, PcaCodec):
        parts.append(pack_u8(KIND_PCA))
        parts.append(pack_u32(codec.input_dim))
        parts.append(pack_u32(codec.out_dim))
        parts.append(_f32_bytes(codec.pca.mean))
        parts.append(_f32_bytes(codec.pca.components))
        parts.append(_f32_bytes(codec.pca.explained_variance))
        parts.append(_f32_bytes(codec.quantizer.mins))
        parts.append(_f32_bytes(codec.quantizer.scales))
    else:
        raise DegenerateInput(f"save_codec: unsupported codec type {type(codec).__name__}")
    atomic_write_bytes(path, b"".join(parts))


def load_codec(path: str) -> Codec:
    with open(path, "rb") as fh:
        buf = fh.read()
    read_magic(buf, CODEC_MAGIC, path)
    r = Reader(buf, 8)
    kind = r.u8()
    if kind == KIND_PQ:
        dim, m, k, sub_dim = r.u32(), r.u32(), r.u32(), r.u32()
        books = _read_f32(r, m * k * sub_dim, (m, k, sub_dim))
        return PqCodebook(dim=dim, m=m, k=k, sub_dim=sub_dim, codebooks=books)
    if kind == KIND_OPQ:
        input_dim, rotated_dim, m, k, sub_dim = (r.u32() for _ in range(5))
        rot = _read_f32(r, rotated_dim * rotated_dim, (rotated_dim, rotated_dim))
        books = _read_f32(r, m * k * sub_dim, (m, k, sub_dim))
        pq = PqCodebook(dim=rotated_dim, m=m, k=k, sub_dim=sub_dim, codebooks=books)
        return OpqCodec(input_dim=input_dim, rotated_dim=rotated_dim, rotation=rot, pq=pq)
    if kind == KIND_SCALAR:
        dim = r.u32()
        return ScalarQuantizer(mins=_read_f32(r, dim, (dim,)), scales=_read_f32(r, dim, (dim,)))
    if kind == KIND_PCA:
        input_dim, out_dim = r.u32(), r.u32()
        mean = _read_f32(r, input_dim, (input_dim,))
        comps = _read_f32(r, out_dim * input_dim, (out_dim, input_dim))
        ev = _read_f32(r, out_dim, (out_dim,))
        mins = _read_f32(r, out_dim, (out_dim,))
        scales = _read_f32(r, out_dim, (out_dim,))
        return PcaCodec(
            input_dim=input_dim,
            out_dim=out_dim,
            pca=PcaModel(mean=mean, components=comps, explained_variance=ev),
            quantizer=ScalarQuantizer(mins=mins, scales=scales),
        )
    raise ValueError(f"{path}: unknown codec kind {kind}")


def save_embeddings(path: str, array: np.ndarray) -> None:
    """Write a 2-D float32 or uint8 array to the BLEMB001 container."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ShapeMismatch(f"save_embeddings: expected 2-D array, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        dtype_tag, payload = 1, np.ascontiguousarray(arr).tobytes()
    else:
        dtype_tag, payload = 0, _f32_bytes(np.asarray(arr, dtype=np.float64))
    header = EMB_MAGIC + pack_u64(arr.shape[0]) + pack_u32(arr.shape[1]) + pack_u8(dtype_tag)
    atomic_write_bytes(path, header + payload)


def load_embeddings(path: str) -> np.ndarray:
    """Read a BLEMB001 file: float32 widens to float64, uint8 stays uint8."""
    with open(path, "rb") as fh:
        buf = fh.read()
    read_magic(buf, EMB_MAGIC, path)
    r = Reader(buf, 8)
    n, d, dtype_tag = r.u64(), r.u32(), r.u8()
    if dtype_tag == 0:
        return _read_f32(r, n * d, (n, d))
    if dtype_tag == 1:
        return np.frombuffer(r.raw(n * d), dtype=np.uint8).reshape(n, d).copy()
    raise ValueError(f"{path}: unknown embedding dtype tag {dtype_tag}")

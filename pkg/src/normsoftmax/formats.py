"""
Binary file formats.  All integers and floats are little-endian.

EMB1  embeddings      b"EMB1" u32 N  u32 D        N*D float32, row-major
BIN1  sign codes      b"BIN1" u32 N  u32 D_bits   N*ceil(D/64) uint64 words
PXE1  checkpoint      b"PXE1" u32 version  u32 F  u32 H  u32 D  u32 Z
                      u32 flags (bit 0: layer norm)  f64 layer-norm epsilon
                      then float64 row-major tensors:
                      [hidden_weight F*H, hidden_bias H if H > 0]
                      projection (H or F)*D, proxies Z*D

Labels files hold one decimal integer per line.
"""
import struct

import numpy as np

from .errors import FormatError
from .retrieval import BinaryCodeMatrix, n_words
from .trainer import EmbeddingModel

CHECKPOINT_VERSION = 1


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"{path}: truncated file")
    return buf


def _check_magic(fh, magic, path):
    got = fh.read(4)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")


def write_embeddings(path, embeddings):
    X = np.asarray(embeddings)
    n, d = X.shape
    with open(path, "wb") as fh:
        fh.write(b"EMB1" + struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())


def read_embeddings(path):
    """Returns an ``(N, D)`` float64 array."""
    with open(path, "rb") as fh:
        _check_magic(fh, b"EMB1", path)
        n, d = struct.unpack("<II", _read_exact(fh, 8, path))
        data = _read_exact(fh, 4 * n * d, path)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(n, d)


def write_codes(path, codes):
    with open(path, "wb") as fh:
        fh.write(b"BIN1" + struct.pack("<II", codes.n, codes.dim_bits))
        fh.write(np.ascontiguousarray(codes.words, dtype="<u8").tobytes())


def read_codes(path):
    with open(path, "rb") as fh:
        _check_magic(fh, b"BIN1", path)
        n, bits = struct.unpack("<II", _read_exact(fh, 8, path))
        w = n_words(bits)
        data = _read_exact(fh, 8 * n * w, path)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    words = np.frombuffer(data, dtype="<u8").astype(np.uint64).reshape(n, w)
    return BinaryCodeMatrix(words, bits)


def write_labels(path, labels):
    with open(path, "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in labels)


def read_labels(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    try:
        return np.array([int(v) for v in lines], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_checkpoint(path, model, proxies):
    proxies = np.asarray(proxies, dtype=np.float64)
    header = b"PXE1" + struct.pack(
        "<IIIIIId", CHECKPOINT_VERSION, model.feature_dim, model.hidden_dim,
        model.embed_dim, proxies.shape[0], int(model.layer_norm), model.layer_norm_epsilon,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        tensors = list(model.params().values()) + [proxies]
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(model, proxies)``."""
    with open(path, "rb") as fh:
        _check_magic(fh, b"PXE1", path)
        version, F, H, D, Z, flags, eps = struct.unpack("<IIIIIId", _read_exact(fh, 32, path))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")

        def take(*shape):
            count = int(np.prod(shape))
            return np.frombuffer(_read_exact(fh, 8 * count, path), dtype="<f8") \
                .astype(np.float64).reshape(shape)

        W1 = b1 = None
        if H:
            W1 = take(F, H)
            b1 = take(H)
        P = take(H or F, D)
        proxies = take(Z, D)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    model = EmbeddingModel(P, W1, b1, layer_norm=bool(flags & 1), layer_norm_epsilon=eps)
    return model, proxies

"""
Retrieval and clustering evaluation.

Nearest neighbours are exhaustive: cosine similarity on float embeddings,
Hamming distance on bit-packed sign codes.  Ties are always broken by the
smaller gallery index so results are reproducible bit for bit.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InvalidParams, KTooLarge, LengthMismatch, ShapeMismatch
from .sampling import make_rng

CUB_KS = (1, 2, 4, 8)
SOP_KS = (1, 10, 100)

# queries per block when materializing similarity rows
_BLOCK = 1024


class Mode(str, Enum):
    FLOAT = "FLOAT"
    BINARY = "BINARY"


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2:
            raise ShapeMismatch(f"embeddings must be 2-D, got {self.embeddings.shape}")
        if self.labels.shape != (self.embeddings.shape[0],):
            raise LengthMismatch("need one label per embedding row")
        if len(self) < 2:
            raise InvalidParams("an embedding set needs at least two rows")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidParams("embedding rows must be unit norm (within 1e-6)")

    def __len__(self):
        return self.embeddings.shape[0]


@dataclass
class BinaryCodeMatrix:
    """Sign bits packed into little-endian 64-bit words.

    Bit ``j % 64`` of word ``j // 64`` holds dimension ``j``; padding bits
    past ``dim_bits`` are zero.
    """

    words: np.ndarray
    dim_bits: int

    def __post_init__(self):
        self.words = np.asarray(self.words, dtype=np.uint64)
        if self.words.ndim != 2 or self.words.shape[1] != n_words(self.dim_bits):
            raise ShapeMismatch(
                f"{self.dim_bits} bits need {n_words(self.dim_bits)} words per row, "
                f"got shape {self.words.shape}"
            )

    @property
    def n(self):
        return self.words.shape[0]

    def unpack(self):
        """Rows of 0/1 bits, shape ``(n, dim_bits)``."""
        as_bytes = self.words.astype("<u8").view(np.uint8).reshape(self.n, -1)
        return np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :self.dim_bits]


def n_words(dim_bits):
    return (dim_bits + 63) // 64


def _check_k(K, n_gallery):
    if K < 1 or K > n_gallery:
        raise KTooLarge(f"K={K} but only {n_gallery} gallery items are available")


def _topk(scores, K, exclude_self_offset=None):
    """Indices of the K best (lowest) scores per row, ties by index."""
    if exclude_self_offset is not None:
        rows = np.arange(scores.shape[0])
        scores[rows, rows + exclude_self_offset] = np.inf
    order = np.argsort(scores, axis=1, kind="stable")
    return order[:, :K]


def knn_cosine(embeddings, K, gallery=None):
    """Top-K gallery rows by cosine similarity for every query row.

    With ``gallery=None`` the queries are their own gallery and each query is
    excluded from its own list.  Accepts an :class:`EmbeddingSet` or a raw
    array of unit rows.
    """
    Q = embeddings.embeddings if isinstance(embeddings, EmbeddingSet) else np.asarray(embeddings, dtype=np.float64)
    self_gallery = gallery is None
    G = Q if self_gallery else (gallery.embeddings if isinstance(gallery, EmbeddingSet) else np.asarray(gallery, dtype=np.float64))
    _check_k(K, G.shape[0] - 1 if self_gallery else G.shape[0])
    out = np.empty((Q.shape[0], K), dtype=np.int64)
    for start in range(0, Q.shape[0], _BLOCK):
        stop = min(start + _BLOCK, Q.shape[0])
        scores = -(Q[start:stop] @ G.T)
        out[start:stop] = _topk(scores, K, start if self_gallery else None)
    return out


def recall_from_neighbors(neighbors, query_labels, gallery_labels, Ks):
    hits = gallery_labels[neighbors] == query_labels[:, None]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), neighbors.shape[1])
    return {int(k): float(np.mean(first < k)) for k in Ks}


def recall_at_k(eset, Ks=CUB_KS, gallery=None):
    """Fraction of queries with a same-label item among their K nearest.

    ``gallery`` (another :class:`EmbeddingSet`) switches to split-gallery
    evaluation without self-exclusion.
    """
    Ks = sorted(int(k) for k in Ks)
    nbrs = knn_cosine(eset, Ks[-1], gallery)
    g_labels = eset.labels if gallery is None else gallery.labels
    return recall_from_neighbors(nbrs, eset.labels, g_labels, Ks)


def binarize(embeddings):
    """Threshold at zero (``x >= 0`` gives bit 1) and pack into 64-bit words."""
    X = embeddings.embeddings if isinstance(embeddings, EmbeddingSet) else np.asarray(embeddings)
    if X.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D array, got {X.shape}")
    n, d = X.shape
    bits = np.zeros((n, n_words(d) * 64), dtype=np.uint8)
    bits[:, :d] = X >= 0
    packed = np.packbits(bits, axis=1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64)
    return BinaryCodeMatrix(words.reshape(n, -1), d)


def hamming_distances(a_words, b_words):
    """Pairwise Hamming distances between two word matrices."""
    x = a_words[:, None, :] ^ b_words[None, :, :]
    return np.bitwise_count(x).sum(axis=2, dtype=np.int64)


def hamming_knn(codes, K, gallery=None):
    """Top-K gallery codes by Hamming distance, self excluded when no gallery."""
    self_gallery = gallery is None
    G = codes if self_gallery else gallery
    if G.dim_bits != codes.dim_bits:
        raise ShapeMismatch("query and gallery codes have different lengths")
    _check_k(K, G.n - 1 if self_gallery else G.n)
    out = np.empty((codes.n, K), dtype=np.int64)
    # keep the (block, n, words) XOR tensor around 64 MB
    block = max(1, min(_BLOCK, (1 << 23) // max(1, G.n * G.words.shape[1])))
    for start in range(0, codes.n, block):
        stop = min(start + block, codes.n)
        dist = hamming_distances(codes.words[start:stop], G.words).astype(np.float64)
        out[start:stop] = _topk(dist, K, start if self_gallery else None)
    return out


def binary_recall_at_k(codes, labels, Ks=CUB_KS):
    Ks = sorted(int(k) for k in Ks)
    labels = np.asarray(labels, dtype=np.int64)
    return recall_from_neighbors(hamming_knn(codes, Ks[-1]), labels, labels, Ks)


# -- clustering ----------------------------------------------------------------

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objectives: list
    iterations: int


def _sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(X, k, rng=None, max_iters=100):
    """Lloyd's algorithm with k-means++ seeding.

    Stops at an assignment fixpoint or after ``max_iters`` updates.  An empty
    cluster is re-seeded with the point farthest from its current centroid.
    ``objectives`` holds the sum of squared distances after every assignment.
    """
    X = X.embeddings if isinstance(X, EmbeddingSet) else np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or k > n:
        raise KTooLarge(f"k={k} clusters for {n} points")
    rng = make_rng(0) if rng is None else rng

    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centroids[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        else:
            pick = int(rng.integers(n))
        centroids[c] = X[pick]
        closest = np.minimum(closest, _sq_dists(X, centroids[c:c + 1])[:, 0])

    d = _sq_dists(X, centroids)
    assign = np.argmin(d, axis=1)
    objectives = [float(d[np.arange(n), assign].sum())]
    it = 0
    for it in range(1, max_iters + 1):
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, X)
        counts = np.bincount(assign, minlength=k)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for c in np.flatnonzero(~filled):
            own = _sq_dists(X, new)[np.arange(n), assign]
            far = int(np.argmax(own))
            new[c] = X[far]
            assign[far] = c
        centroids = new
        d = _sq_dists(X, centroids)
        new_assign = np.argmin(d, axis=1)
        objectives.append(float(d[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return KMeansResult(assign, centroids, objectives, it)


def _entropy(counts, total):
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def nmi(assignments, labels, average="arithmetic"):
    """Normalized mutual information between two partitions (natural logs).

    ``average="arithmetic"`` gives ``2 I / (H_a + H_l)``; ``"geometric"``
    gives ``I / sqrt(H_a H_l)``.  Two single-cluster partitions score 1.
    """
    a = np.asarray(assignments)
    b = np.asarray(labels)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.shape} vs {b.shape}")
    n = a.size
    if n == 0:
        raise LengthMismatch("empty partitions")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    ha = _entropy(table.sum(axis=1), n)
    hb = _entropy(table.sum(axis=0), n)
    if ha == 0.0 and hb == 0.0:
        return 1.0
    nz = table > 0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))[nz]
    joint = table[nz]
    mi = float((joint / n * (np.log(joint) + np.log(n) - np.log(outer))).sum())
    if average == "arithmetic":
        denom = (ha + hb) / 2.0
    elif average == "geometric":
        denom = np.sqrt(ha * hb)
    else:
        raise InvalidParams(f"unknown NMI average {average!r}")
    if denom == 0.0:
        return 0.0
    return float(min(max(mi / denom, 0.0), 1.0))


# -- bundled protocol ------------------------------------------------------------

@dataclass
class EvalReport:
    recall_at: dict
    nmi: float
    mode: Mode = Mode.FLOAT
    extra: dict = field(default_factory=dict)


def sign_embeddings(codes):
    """Map codes to unit vectors of +-1/sqrt(D) for clustering binary embeddings."""
    bits = codes.unpack().astype(np.float64)
    return (2.0 * bits - 1.0) / np.sqrt(codes.dim_bits)


def evaluate(eset, Ks=CUB_KS, with_binary=False, k_for_nmi=None, rng=None,
             nmi_average="arithmetic"):
    """Recall@K and k-means NMI; returns a list with the FLOAT report first.

    With ``with_binary`` a BINARY report follows, computed from the sign
    codes (Hamming kNN and k-means on the +-1 sign vectors).
    """
    if not isinstance(eset, EmbeddingSet):
        raise TypeError("evaluate expects an EmbeddingSet")
    k = k_for_nmi or int(np.unique(eset.labels).size)
    seed_rng = make_rng(0) if rng is None else rng
    nmi_seed = int(seed_rng.integers(2 ** 63))

    clusters = kmeans(eset.embeddings, k, make_rng(nmi_seed)).assignments
    reports = [EvalReport(recall_at_k(eset, Ks), nmi(clusters, eset.labels, nmi_average))]
    if with_binary:
        codes = binarize(eset)
        bclusters = kmeans(sign_embeddings(codes), k, make_rng(nmi_seed)).assignments
        reports.append(EvalReport(binary_recall_at_k(codes, eset.labels, Ks),
                                  nmi(bclusters, eset.labels, nmi_average), Mode.BINARY))
    return reports

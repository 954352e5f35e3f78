"""Offline semantic-ID construction.

Learns L level-wise codebooks by residual-quantization k-means: cluster
the current residuals, subtract each point's nearest centroid, recurse.
Determinism is enforced three ways: seeded k-means++ initialization,
lexicographic canonical ordering of centroid rows after fitting (k-means
label order is arbitrary), and fitting on a lexicographically sorted copy
of the data so the learned centroids do not depend on catalog order.
Nearest-centroid ties resolve to the lowest token index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ShapeError, VocabTooLargeError

KMEANS_MAX_ITERS = 100
KMEANS_REL_TOL = 1e-6

CODEBOOK_MAGIC = b"HSRLCB1\x00"


@dataclass
class ItemEmbeddings:
    """Catalog of item vectors sharing one dimension."""

    ids: np.ndarray       # (N,) int64 item ids
    vectors: np.ndarray   # (N, d) float64

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.ids.shape[0] != self.vectors.shape[0]:
            raise ShapeError("ids and vectors disagree on item count")
        if not np.isfinite(self.vectors).all():
            raise DataError("item embeddings contain NaN/Inf")
        if np.any(self.ids < 0):
            raise DataError("item ids must be non-negative")
        if len(np.unique(self.ids)) != len(self.ids):
            raise DataError("duplicate item ids in catalog")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Codebook:
    """L levels of centroid tables; the fixed semantic action space."""

    dim: int
    vocab_sizes: tuple[int, ...]
    centroids: list[np.ndarray] = field(default_factory=list)  # level -> (T_l, d)

    @property
    def levels(self) -> int:
        return len(self.vocab_sizes)


class SidIndex:
    """Deterministic bidirectional item <-> SID lookup."""

    def __init__(self, item_to_sid: dict[int, tuple[int, ...]]):
        self.item_to_sid = dict(item_to_sid)
        buckets: dict[tuple[int, ...], list[int]] = {}
        for item, sid in self.item_to_sid.items():
            buckets.setdefault(sid, []).append(item)
        self.sid_to_items = {sid: sorted(items) for sid, items in buckets.items()}

    def __len__(self) -> int:
        return len(self.item_to_sid)

    def sid_of(self, item_id: int) -> tuple[int, ...]:
        try:
            return self.item_to_sid[item_id]
        except KeyError:
            from .errors import UnknownItemError

            raise UnknownItemError(f"item {item_id} has no SID") from None

    def sid_matrix(self, item_ids) -> np.ndarray:
        """(n, L) token matrix for a list of items, in the given order."""
        return np.array([self.sid_of(i) for i in item_ids], dtype=np.int64)


@dataclass
class CollisionReport:
    n_items: int
    n_sids: int
    n_collided_sids: int
    max_bucket: int
    level_entropy: list[float]


# ---------------------------------------------------------------------------
# k-means core
# ---------------------------------------------------------------------------


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(N, T) squared Euclidean distances, same reduction path for N=1 and N>1."""
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = _sq_dists(points, centers[:1]).min(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)  # all points coincide with chosen centers
        centers[j] = points[idx]
        d2 = np.minimum(d2, _sq_dists(points, centers[j:j + 1]).min(axis=1))
    return centers


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means; returns centroids that are means of the final partition."""
    centers = _kmeanspp_init(points, k, rng)
    prev_inertia = np.inf
    for _ in range(KMEANS_MAX_ITERS):
        d2 = _sq_dists(points, centers)
        labels = d2.argmin(axis=1)
        inertia = d2[np.arange(len(points)), labels].sum()
        new_centers = np.empty_like(centers)
        empty = []
        for j in range(k):
            mask = labels == j
            if mask.any():
                new_centers[j] = points[mask].mean(axis=0)
            else:
                empty.append(j)
        if empty:
            # Reseed empty clusters at the points farthest from their
            # assigned centroid (deterministic: distance order, then index).
            order = np.argsort(-d2[np.arange(len(points)), labels], kind="stable")
            for slot, j in enumerate(empty):
                new_centers[j] = points[order[slot]]
            centers = new_centers
            prev_inertia = np.inf
            continue
        centers = new_centers
        if prev_inertia - inertia <= KMEANS_REL_TOL * max(prev_inertia, 1e-300):
            break
        prev_inertia = inertia
    return centers


def _canonical_order(centers: np.ndarray) -> np.ndarray:
    return centers[np.lexsort(centers.T[::-1])]


def _assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest-centroid tokens; argmin resolves ties to the lowest index."""
    return _sq_dists(points, centers).argmin(axis=1)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def fit_codebook(items: ItemEmbeddings, vocab_sizes: tuple[int, ...],
                 seed: int) -> tuple[Codebook, SidIndex]:
    """Learn all level codebooks and assign every catalog item its SID."""
    if len(vocab_sizes) < 1 or any(t < 1 for t in vocab_sizes):
        raise DataError("vocab sizes must be positive")
    if len(items) < max(vocab_sizes):
        raise VocabTooLargeError(
            int(np.argmax(vocab_sizes)) + 1, len(items), max(vocab_sizes))

    rng = np.random.default_rng(seed)
    # Learn on a canonically ordered copy so catalog order cannot leak in.
    learn = items.vectors[np.lexsort(items.vectors.T[::-1])].copy()
    residuals = items.vectors.copy()
    tokens = np.empty((len(items), len(vocab_sizes)), dtype=np.int64)

    book = Codebook(dim=items.dim, vocab_sizes=tuple(int(t) for t in vocab_sizes))
    for lvl, t_l in enumerate(book.vocab_sizes):
        distinct = np.unique(learn, axis=0).shape[0]
        if distinct < t_l:
            raise VocabTooLargeError(lvl + 1, distinct, t_l)
        centers = _canonical_order(_lloyd(learn, t_l, rng))
        if np.unique(centers, axis=0).shape[0] != t_l:
            raise DataError(f"level {lvl + 1}: k-means produced duplicate centroids")
        book.centroids.append(centers)

        learn -= centers[_assign(learn, centers)]
        labels = _assign(residuals, centers)
        tokens[:, lvl] = labels
        residuals -= centers[labels]

    index = SidIndex({int(i): tuple(int(z) for z in tokens[row])
                      for row, i in enumerate(items.ids)})
    return book, index


def assign_sid(book: Codebook, x: np.ndarray) -> tuple[int, ...]:
    """Tokenize one vector by the residual recursion."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (book.dim,):
        raise ShapeError(f"assign_sid: expected vector of dim {book.dim}, got {x.shape}")
    residual = x.copy()[None, :]
    sid = []
    for centers in book.centroids:
        z = int(_assign(residual, centers)[0])
        sid.append(z)
        residual = residual - centers[z][None, :]
    return tuple(sid)


def residual_norms(book: Codebook, items: ItemEmbeddings) -> np.ndarray:
    """Per-level mean squared residual norm after each quantization level."""
    residuals = items.vectors.copy()
    out = []
    for centers in book.centroids:
        residuals -= centers[_assign(residuals, centers)]
        out.append(float((residuals ** 2).sum(axis=1).mean()))
    return np.array(out)


def decode(index: SidIndex, sid: tuple[int, ...]) -> list[int]:
    """All items carrying this SID, ascending by item id; empty when unused."""
    return list(index.sid_to_items.get(tuple(sid), []))


def collision_report(index: SidIndex, vocab_sizes: tuple[int, ...]) -> CollisionReport:
    buckets = index.sid_to_items
    sizes = [len(v) for v in buckets.values()]
    levels = len(vocab_sizes)
    entropy = []
    for lvl in range(levels):
        counts = np.zeros(vocab_sizes[lvl])
        for sid in index.item_to_sid.values():
            counts[sid[lvl]] += 1
        p = counts[counts > 0] / counts.sum()
        entropy.append(float(-(p * np.log(p)).sum()))
    return CollisionReport(
        n_items=len(index),
        n_sids=len(buckets),
        n_collided_sids=sum(1 for s in sizes if s > 1),
        max_bucket=max(sizes) if sizes else 0,
        level_entropy=entropy,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"codebook file truncated while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def save_codebook(path, book: Codebook, index: SidIndex) -> None:
    """Little-endian binary: header, centroid blocks, then item->SID records."""
    parts = [CODEBOOK_MAGIC,
             struct.pack("<II", book.levels, book.dim),
             struct.pack(f"<{book.levels}I", *book.vocab_sizes)]
    for centers in book.centroids:
        parts.append(np.ascontiguousarray(centers, dtype="<f8").tobytes())
    items = sorted(index.item_to_sid)
    parts.append(struct.pack("<Q", len(items)))
    for item in items:
        parts.append(struct.pack("<Q", item))
        parts.append(struct.pack(f"<{book.levels}H", *index.item_to_sid[item]))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_codebook(path) -> tuple[Codebook, SidIndex]:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(len(CODEBOOK_MAGIC), "magic") != CODEBOOK_MAGIC:
        raise FormatError("bad codebook magic; not a codebook file or wrong version")
    levels, dim = struct.unpack("<II", rd.take(8, "header"))
    vocab_sizes = struct.unpack(f"<{levels}I", rd.take(4 * levels, "vocab sizes"))
    book = Codebook(dim=dim, vocab_sizes=tuple(int(t) for t in vocab_sizes))
    for lvl, t_l in enumerate(vocab_sizes):
        raw = rd.take(8 * t_l * dim, f"level {lvl + 1} centroid block")
        book.centroids.append(np.frombuffer(raw, dtype="<f8").reshape(t_l, dim).copy())
    (count,) = struct.unpack("<Q", rd.take(8, "item count"))
    mapping: dict[int, tuple[int, ...]] = {}
    for row in range(count):
        (item,) = struct.unpack("<Q", rd.take(8, f"item record {row}"))
        sid = struct.unpack(f"<{levels}H", rd.take(2 * levels, f"item record {row}"))
        mapping[item] = tuple(int(z) for z in sid)
    if rd.pos != len(rd.blob):
        raise FormatError("trailing bytes after codebook payload")
    for lvl, t_l in enumerate(vocab_sizes):
        for sid in mapping.values():
            if not 0 <= sid[lvl] < t_l:
                raise FormatError(f"token out of range at level {lvl + 1}")
    return book, SidIndex(mapping)


def save_embeddings(path, items: ItemEmbeddings) -> None:
    """Text format: header `d=<int>`, then `item_id<TAB>v1,v2,...,vd` lines."""
    with open(path, "w") as fh:
        fh.write(f"d={items.dim}\n")
        for i, vec in zip(items.ids, items.vectors):
            fh.write(f"{int(i)}\t{','.join(repr(float(v)) for v in vec)}\n")


def load_embeddings(path) -> ItemEmbeddings:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("d="):
            raise FormatError("embeddings file must start with a d=<int> header")
        try:
            dim = int(header[2:])
        except ValueError:
            raise FormatError(f"bad embeddings header: {header!r}") from None
        ids, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                item, csv = line.split("\t")
                vec = [float(v) for v in csv.split(",")]
            except ValueError:
                raise FormatError(f"embeddings line {lineno} is malformed") from None
            if len(vec) != dim:
                raise FormatError(f"embeddings line {lineno}: expected {dim} values")
            ids.append(int(item))
            rows.append(vec)
    if not ids:
        raise DataError("embeddings file holds no items")
    return ItemEmbeddings(np.array(ids), np.array(rows))

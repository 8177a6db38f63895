"""
Embedders and the exact flat vector index.

This module provides:
1. The Embedder interface with family-dependent preferred chunk sizes
2. A deterministic feature-hashing embedder and an HTTP embedding-service client
3. VectorIndex, exact inner-product top-k search over unit-norm rows
4. Binary index persistence and loaders for precomputed embedding files
"""
import hashlib
import json
import struct
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import requests
from sklearn.preprocessing import normalize as l2_normalize

import config
from exceptions import (BadMagicError, DimensionMismatchError, EmbeddingError, EmbeddingFileError,
                        IndexFormatError, IndexHeaderError, PreconditionError, TransportError, TruncatedPayloadError)
from utils.connection_manager import ConnectionManager
from utils.logger import setup_logger
from utils.text import count_words

logger = setup_logger("embedding")

INDEX_MAGIC = b'HVIX'
INDEX_VERSION = 1
_HEADER = struct.Struct('<4sHIQ')
_ID_LENGTH = struct.Struct('<I')

UNIT_NORM_TOLERANCE = 1e-5
RENORMALIZE_THRESHOLD = 1e-3


def hash_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """
    Feature-hashing embedding of a text.

    Each lowercased whitespace token is hashed with its seed to a 64-bit value;
    the value modulo ``dim`` picks the bucket and its top bit picks the sign.

    Args:
        text: Input text
        dim: Vector dimension (>= 8)
        seed: Hash seed

    Returns:
        Unit-norm float32 vector; e_0 when nothing accumulates
    """
    if dim < 8:
        raise PreconditionError("hash_embed needs dim >= 8")

    vector = np.zeros(dim, dtype=np.float64)
    for token in text.lower().split():
        digest = hashlib.blake2b(f"{seed}\x00{token}".encode('utf-8'), digest_size=8).digest()
        value = int.from_bytes(digest, 'little')
        vector[value % dim] += -1.0 if (value >> 63) & 1 else 1.0

    norm = np.linalg.norm(vector)
    if norm == 0.0:
        vector = np.zeros(dim, dtype=np.float64)
        vector[0] = 1.0
        return vector.astype(np.float32)
    return (vector / norm).astype(np.float32)


class Embedder(ABC):
    """Maps texts to unit-norm vectors of a fixed dimension."""

    def __init__(self, model_id: str, family: Optional[str] = None):
        self.model_id = model_id
        self.family = family or config.EMBEDDER_PROFILES.get(model_id, {}).get('family', 'general')
        if self.family not in config.EMBEDDER_FAMILIES:
            raise PreconditionError(f"unknown embedder family: {self.family}")

    @property
    @abstractmethod
    def dim(self) -> int:
        ...

    @property
    def preferred_chunk_tokens(self) -> int:
        return config.EMBEDDER_FAMILIES[self.family]['chunk_tokens']

    @property
    def preferred_overlap_tokens(self) -> int:
        return config.EMBEDDER_FAMILIES[self.family]['overlap_tokens']

    def count_tokens(self, text: str) -> int:
        """Token counter that chunk budgets are measured with."""
        return count_words(text)

    @abstractmethod
    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Embed a batch of texts into an (n, dim) float32 matrix."""

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]


class HashEmbedder(Embedder):
    """Deterministic embedder over hash_embed."""

    def __init__(self, dim: int = 256, seed: int = 0, family: Optional[str] = None, model_id: str = 'hash'):
        super().__init__(model_id, family)
        if dim < 8:
            raise PreconditionError("hash embedder needs dim >= 8")
        self._dim = dim
        self.seed = seed

    @property
    def dim(self) -> int:
        return self._dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self._dim), dtype=np.float32)
        return np.vstack([hash_embed(text, self._dim, self.seed) for text in texts])


class HttpEmbedder(Embedder):
    """
    Client for an external embedding service.

    Request body is {"texts": [...]}, the reply is {"vectors": [[...], ...]}.
    The dimension is fixed by the first reply unless given up front.
    """

    def __init__(self, url: str, model_id: str, family: Optional[str] = None,
                 dim: Optional[int] = None, batch_size: int = 64,
                 timeout: float = config.EUTILS['timeout'],
                 session: Optional[requests.Session] = None):
        super().__init__(model_id, family)
        self.url = url
        self.batch_size = batch_size
        self.timeout = timeout
        self.session = session or requests.Session()
        self._dim = dim
        self._dim_lock = threading.Lock()

    @property
    def dim(self) -> int:
        with self._dim_lock:
            if self._dim is None:
                self.embed(['dimension check'])
        return self._dim

    def _post(self, texts: List[str]) -> np.ndarray:
        manager = ConnectionManager(max_retries=config.RETRY['max_retries'],
                                    backoff_delays=config.RETRY['backoff_delays'])
        try:
            response = manager.run(lambda: self.session.post(self.url, json={'texts': texts}, timeout=self.timeout),
                                   description=f"POST {self.url}")
            vectors = np.asarray(response.json()['vectors'], dtype=np.float64)
        except TransportError as e:
            raise EmbeddingError(f"embedding service failed: {e}") from e
        except (ValueError, KeyError, TypeError) as e:
            raise EmbeddingError(f"unexpected embedding reply: {e}") from e

        if vectors.ndim != 2 or vectors.shape[0] != len(texts):
            raise EmbeddingError(f"embedding service returned shape {vectors.shape} for {len(texts)} texts")
        if self._dim is None:
            self._dim = vectors.shape[1]
        elif vectors.shape[1] != self._dim:
            raise DimensionMismatchError(f"embedding service returned dim {vectors.shape[1]}, expected {self._dim}")
        return _unit_rows(vectors, source=self.url)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        if not texts:
            return np.zeros((0, self._dim or 0), dtype=np.float32)
        parts = [self._post(texts[i:i + self.batch_size]) for i in range(0, len(texts), self.batch_size)]
        return np.vstack(parts)


def build_embedder(section) -> Embedder:
    """Embedder described by an EmbedderSection of the run configuration."""
    if section.id == 'hash':
        return HashEmbedder(dim=section.dim, seed=section.seed, family=section.family)
    if section.url:
        return HttpEmbedder(section.url, model_id=section.id, family=section.family)
    raise PreconditionError(f"embedder {section.id!r} needs a service url")


def _unit_rows(matrix: np.ndarray, source: str = '', ids: Optional[Sequence[str]] = None,
               error=EmbeddingError) -> np.ndarray:
    """Validate and L2-normalize rows; non-finite or zero rows are rejected."""
    matrix = np.asarray(matrix, dtype=np.float64)

    def name(row):
        return f"row {row}" + (f" (id {ids[row]})" if ids is not None else '')

    finite = np.isfinite(matrix).all(axis=1)
    if not finite.all():
        raise error(f"{source}: non-finite values in {name(int(np.argmin(finite)))}")

    norms = np.linalg.norm(matrix, axis=1)
    if (norms == 0.0).any():
        raise error(f"{source}: {name(int(np.argmax(norms == 0.0)))} is all zeros and cannot be normalized")

    deviating = int((np.abs(norms - 1.0) > RENORMALIZE_THRESHOLD).sum())
    if deviating:
        logger.warning(f"{source}: re-normalized {deviating} row(s) that were not unit-norm")
    return l2_normalize(matrix, norm='l2').astype(np.float32)


class VectorIndex:
    """
    Immutable exact inner-product index over unit-norm rows.

    Ties in score are broken by ascending id.
    """

    def __init__(self, dim: int, ids: Sequence[str], vectors: np.ndarray):
        """
        Initialize the index.

        Args:
            dim: Vector dimension
            ids: Row ids, unique
            vectors: (n, dim) matrix of unit-norm rows
        """
        if dim < 1:
            raise ValueError("dim must be positive")
        ids = tuple(str(value) for value in ids)
        vectors = np.array(vectors, dtype=np.float32).reshape(len(ids), dim)
        if len(set(ids)) != len(ids):
            raise ValueError("index ids must be unique")
        if len(ids):
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE)
            if bad.size:
                raise ValueError(f"row {int(bad[0])} ({ids[bad[0]]}) is not unit-norm")

        vectors.setflags(write=False)
        self.dim = dim
        self.ids = ids
        self.vectors = vectors

        id_rank = np.empty(len(ids), dtype=np.int64)
        id_rank[np.argsort(np.array(ids, dtype=object), kind='stable')] = np.arange(len(ids))
        self._id_rank = id_rank

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, ids: Sequence[str], texts: Sequence[str], embedder: Embedder) -> 'VectorIndex':
        """Embed ``texts`` and index them under ``ids``."""
        if len(ids) != len(texts):
            raise PreconditionError("ids and texts must have the same length")
        return cls(embedder.dim, ids, embedder.embed(list(texts)))

    def search(self, query: np.ndarray, k: int) -> List[Tuple[str, float]]:
        """
        Exact top-k by inner product.

        Args:
            query: Query vector of length dim
            k: Number of results

        Returns:
            min(k, n) (id, score) pairs, scores non-increasing
        """
        query = np.asarray(query, dtype=np.float64).ravel()
        if query.shape[0] != self.dim:
            raise DimensionMismatchError(f"query dim {query.shape[0]} does not match index dim {self.dim}")
        if k < 1:
            raise PreconditionError("k must be positive")
        if not self.ids:
            return []

        scores = self.vectors.astype(np.float64) @ query
        order = np.lexsort((self._id_rank, -scores))[:min(k, len(self.ids))]
        return [(self.ids[i], float(scores[i])) for i in order]


def save_index(index: VectorIndex) -> bytes:
    """Serialize: magic, version u16, dim u32, count u64, little-endian f32 rows, length-prefixed UTF-8 ids."""
    parts = [_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.dim, len(index.ids)),
             index.vectors.astype('<f4').tobytes()]
    for value in index.ids:
        encoded = value.encode('utf-8')
        parts.append(_ID_LENGTH.pack(len(encoded)))
        parts.append(encoded)
    return b''.join(parts)


def load_index(data: bytes) -> VectorIndex:
    """Deserialize an index written by save_index."""
    if data[:4] != INDEX_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {INDEX_MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("index header is truncated")

    _, version, dim, count = _HEADER.unpack_from(data, 0)
    if version != INDEX_VERSION:
        raise IndexHeaderError(f"unsupported index version {version}")
    if dim < 1:
        raise IndexHeaderError("index dimension must be positive")

    offset = _HEADER.size
    row_bytes = count * dim * 4
    if len(data) < offset + row_bytes:
        raise TruncatedPayloadError(f"expected {row_bytes} bytes of vectors, found {len(data) - offset}")
    vectors = np.frombuffer(data, dtype='<f4', count=count * dim, offset=offset).reshape(count, dim)
    offset += row_bytes

    ids = []
    for i in range(count):
        if len(data) < offset + _ID_LENGTH.size:
            raise TruncatedPayloadError(f"id {i} length is truncated")
        (length,) = _ID_LENGTH.unpack_from(data, offset)
        offset += _ID_LENGTH.size
        if len(data) < offset + length:
            raise TruncatedPayloadError(f"id {i} is truncated")
        try:
            ids.append(data[offset:offset + length].decode('utf-8'))
        except UnicodeDecodeError as e:
            raise IndexFormatError(f"id {i} is not valid UTF-8") from e
        offset += length

    if offset != len(data):
        raise IndexHeaderError(f"{len(data) - offset} trailing byte(s) after {count} declared ids")

    try:
        return VectorIndex(dim, ids, vectors.astype(np.float32))
    except ValueError as e:
        raise IndexFormatError(str(e)) from e


def write_index(index: VectorIndex, path):
    Path(path).write_bytes(save_index(index))


def read_index(path) -> VectorIndex:
    return load_index(Path(path).read_bytes())


def _read_ids(path) -> List[str]:
    text = Path(path).read_text(encoding='utf-8')
    if Path(path).suffix == '.json':
        try:
            return [str(value) for value in json.loads(text)]
        except (json.JSONDecodeError, TypeError) as e:
            raise EmbeddingFileError(f"{path}: ids file is not a JSON list: {e}") from e
    return [line.strip() for line in text.splitlines() if line.strip()]


def load_precomputed(embeddings_file, ids_file=None) -> VectorIndex:
    """
    Build an index from precomputed document embeddings.

    Accepted inputs:
        - JSON-lines records {"pmid": "...", "vector": [...]} (no ids file)
        - a .npy matrix with a parallel ids file (JSON list or one id per line)
        - the binary index format

    Rows that are not unit-norm are re-normalized (logged).
    """
    path = Path(embeddings_file)
    with open(path, 'rb') as handle:
        head = handle.read(4)

    if head == INDEX_MAGIC:
        index = read_index(path)
        ids, matrix = list(index.ids), index.vectors
    elif path.suffix == '.npy':
        if ids_file is None:
            raise PreconditionError(f"{path}: a .npy matrix needs an ids file")
        try:
            matrix = np.load(path, allow_pickle=False)
        except ValueError as e:
            raise EmbeddingFileError(f"{path}: unreadable .npy matrix: {e}") from e
        ids = _read_ids(ids_file)
        if matrix.ndim != 2:
            raise EmbeddingFileError(f"{path}: expected a 2-d matrix, got shape {matrix.shape}")
    else:
        ids, rows = [], []
        with open(path, 'r', encoding='utf-8') as handle:
            for line_number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    rows.append(record['vector'])
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise EmbeddingFileError(f"{path}:{line_number}: invalid embedding record: {e}") from e
                ids.append(str(record.get('pmid', record.get('id'))))
        if len({len(row) for row in rows}) > 1:
            raise EmbeddingFileError(f"{path}: vectors have different lengths")
        try:
            matrix = np.asarray(rows, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise EmbeddingFileError(f"{path}: vectors are not numeric: {e}") from e
        if ids_file is not None:
            ids = _read_ids(ids_file)

    if len(ids) != matrix.shape[0]:
        raise EmbeddingFileError(f"{path}: {matrix.shape[0]} rows but {len(ids)} ids")
    if not ids:
        raise EmbeddingFileError(f"{path}: no embeddings")

    matrix = _unit_rows(matrix, source=str(path), ids=ids, error=EmbeddingFileError)
    logger.info(f"Loaded {len(ids)} precomputed embeddings of dim {matrix.shape[1]} from {path.name}")
    return VectorIndex(matrix.shape[1], ids, matrix)

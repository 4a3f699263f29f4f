"""Feature repository of coarse-labeled training embeddings with exact cosine kNN."""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .data import Dataset

logger = logging.getLogger(__name__)

REPO_MAGIC = b"C2FSREPO"
REPO_VERSION = 1
_HEADER = struct.Struct("<8sIIQI")


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero embedding")
    return x / norms


class FeatureRepository:
    """Immutable store of unit-norm embeddings and their coarse labels.

    Embeddings are kept in float32 (the on-disk precision); distances are
    computed in float64.
    """

    def __init__(self, embeddings: np.ndarray, coarse: np.ndarray, coarse_count: Optional[int] = None):
        emb = np.asarray(embeddings, dtype=np.float32)
        if emb.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got {emb.shape}")
        norms = np.linalg.norm(emb.astype(np.float64), axis=1)
        if len(emb) and np.max(np.abs(norms - 1.0)) > 1e-5:
            raise ValueError("repository embeddings must have unit L2 norm")
        self.coarse = np.asarray(coarse, dtype=np.int64)
        if len(self.coarse) != len(emb):
            raise ValueError("one coarse label per embedding required")
        self.coarse_count = int(coarse_count if coarse_count is not None
                                else (self.coarse.max() + 1 if len(self.coarse) else 0))
        if len(self.coarse) and (self.coarse.min() < 0 or self.coarse.max() >= self.coarse_count):
            raise ValueError("coarse label outside declared range")
        self.embeddings = emb
        self.embeddings.setflags(write=False)
        self.coarse.setflags(write=False)
        self._emb64 = emb.astype(np.float64)
        self.coarse_index = {c: np.flatnonzero(self.coarse == c) for c in range(self.coarse_count)}

    @classmethod
    def from_raw(cls, embeddings, coarse, coarse_count=None) -> "FeatureRepository":
        return cls(normalize_rows(embeddings).astype(np.float32), coarse, coarse_count)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.embeddings)

    def vectors(self, idx) -> np.ndarray:
        return self._emb64[np.asarray(idx, dtype=np.int64)]

    def subset_by_coarse(self, y: int) -> np.ndarray:
        """Entry indices with coarse label ``y`` (the pool T_y)."""
        if y not in self.coarse_index:
            logger.warning("unknown coarse label %s; returning an empty pool", y)
            return np.zeros(0, dtype=np.int64)
        return self.coarse_index[y]

    def knn(self, query: np.ndarray, k: int, restrict_to: Optional[int] = None,
            exclude: Optional[Iterable[int]] = None) -> np.ndarray:
        """Indices of the ``k`` most cosine-similar entries, nearest first.

        Exact linear scan; ties go to the lower entry index.
        """
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query has shape {q.shape}, repository dim is {self.dim}")
        pool = (np.arange(len(self)) if restrict_to is None
                else self.subset_by_coarse(restrict_to))
        if exclude is not None:
            ex = np.fromiter(exclude, dtype=np.int64)
            if len(ex):
                pool = pool[~np.isin(pool, ex)]
        if k <= 0 or k > len(pool):
            raise ValueError(f"knn: k={k} but only {len(pool)} eligible entries "
                             f"(repository {len(self)}, restrict_to={restrict_to})")
        sims = self._emb64[pool] @ q
        order = np.lexsort((pool, -sims))[:k]
        return pool[order]

    # persistence ------------------------------------------------------

    def save(self, path) -> None:
        rec = np.dtype([("coarse", "<u2"), ("emb", "<f4", (self.dim,))])
        body = np.zeros(len(self), dtype=rec)
        body["coarse"] = self.coarse
        body["emb"] = self.embeddings
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(REPO_MAGIC, REPO_VERSION, self.dim, len(self), self.coarse_count))
            fh.write(body.tobytes())

    @classmethod
    def load(cls, path) -> "FeatureRepository":
        buf = Path(path).read_bytes()
        if len(buf) < _HEADER.size:
            raise ValueError(f"{path}: truncated repository header")
        magic, version, dim, count, n_coarse = _HEADER.unpack_from(buf, 0)
        if magic != REPO_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != REPO_VERSION:
            raise ValueError(f"{path}: unsupported repository version {version}")
        rec = np.dtype([("coarse", "<u2"), ("emb", "<f4", (dim,))])
        if len(buf) != _HEADER.size + count * rec.itemsize:
            raise ValueError(f"{path}: size does not match {count} entries of dim {dim}")
        body = np.frombuffer(buf, dtype=rec, count=count, offset=_HEADER.size)
        return cls(body["emb"].copy(), body["coarse"].astype(np.int64), n_coarse)


def embed_dataset(model, dataset: Dataset) -> np.ndarray:
    """L2-normalized backbone embeddings (float64) for every example."""
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.array(dataset.inputs)).to(dtype)
    fq = model.embed(x).double().numpy()
    return normalize_rows(fq)


def build_repository(dataset: Dataset, model) -> FeatureRepository:
    emb = embed_dataset(model, dataset)
    if emb.shape[1] != model.cfg.embedding_dim:
        raise ValueError(f"embedding dim {emb.shape[1]} != model dim {model.cfg.embedding_dim}")
    return FeatureRepository(emb.astype(np.float32), dataset.coarse, dataset.hierarchy.coarse_count)

"""Item feature index: exact and coarse-clustered approximate neighbor search.

Similarity is the dot product, which equals cosine on the unit-norm features
the models emit. Exact mode scans all candidates; approximate mode scans only
the members of the P clusters nearest to the query (k-means, fixed
iterations, seeded). Ranking ties break by ascending item id so results form
a total order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .serialize import load_arrays, save_arrays
from .sets import l2_rows

INDEX_VERSION = 1


@dataclass
class AnnConfig:
    clusters: int = 64
    probes: int = 8
    iters: int = 10
    seed: int = 0

    def validate(self) -> "AnnConfig":
        if self.clusters < 1 or self.probes < 1 or self.iters < 1:
            raise ValueError("clusters, probes and iters must be positive")
        return self


def _kmeans(features: np.ndarray, config: AnnConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    start = rng.choice(features.shape[0], size=config.clusters, replace=False)
    centroids = features[np.sort(start)].copy()
    labels = kernels.assign_nearest(features, centroids)
    for _ in range(config.iters):
        for c in range(config.clusters):
            members = features[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
        centroids = l2_rows(centroids)
        labels = kernels.assign_nearest(features, centroids)
    return centroids, labels


class RetrievalIndex:
    """Immutable set of items searchable by feature similarity."""

    def __init__(
        self,
        ids: np.ndarray,
        features: np.ndarray,
        categories: np.ndarray,
        ann: AnnConfig | None = None,
        centroids: np.ndarray | None = None,
        assignments: np.ndarray | None = None,
    ):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.features = np.asarray(features, dtype=np.float64)
        self.categories = np.asarray(categories, dtype=np.int64)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("item ids must be unique")
        if self.features.shape[0] != len(self.ids) or self.categories.shape != self.ids.shape:
            raise ValueError("ids, features and categories must align")
        self.ann = ann
        self.centroids = centroids
        self.assignments = assignments
        if ann is not None and centroids is None:
            ann.validate()
            if ann.clusters > len(self.ids):
                raise ValueError("more clusters than items")
            self.centroids, self.assignments = _kmeans(self.features, ann)
        self._row = {int(i): r for r, i in enumerate(self.ids)}
        self._cat_rows = {int(c): np.where(self.categories == c)[0] for c in np.unique(self.categories)}
        if self.assignments is not None:
            k = self.centroids.shape[0]
            self._members = [np.where(self.assignments == c)[0] for c in range(k)]
        else:
            self._members = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def feature_of(self, item_id: int) -> np.ndarray:
        return self.features[self._row[int(item_id)]]

    def features_of(self, item_ids) -> np.ndarray:
        rows = [self._row[int(i)] for i in np.asarray(item_ids).reshape(-1)]
        return self.features[rows]

    def _candidates(self, query: np.ndarray, category_filter, mode: str) -> np.ndarray:
        if mode == "exact":
            rows = np.arange(len(self.ids))
        elif mode == "approx":
            if self._members is None:
                raise ValueError("index was built without clustering")
            sims = self.centroids @ query
            order = kernels.topk_select(sims, np.arange(len(sims), dtype=np.int64), self.ann.probes)
            rows = np.concatenate([self._members[c] for c in order]) if len(order) else np.array([], dtype=np.int64)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        if category_filter is not None:
            allowed = self._cat_rows.get(int(category_filter), np.array([], dtype=np.int64))
            rows = rows[np.isin(rows, allowed)] if mode == "approx" else allowed
        return rows

    def query_knn(self, query: np.ndarray, k: int, category_filter: int | None = None, mode: str = "exact") -> list[tuple[int, float]]:
        """Ranked (item_id, similarity), descending, ties by ascending id."""
        if k < 1:
            raise ValueError("k must be at least 1")
        query = np.asarray(query, dtype=np.float64)
        rows = self._candidates(query, category_filter, mode)
        if len(rows) == 0:
            raise ValueError("no candidates after filtering")
        sims = self.features[rows] @ query
        pick = kernels.topk_select(sims, self.ids[rows], min(k, len(rows)))
        return [(int(self.ids[rows[p]]), float(sims[p])) for p in pick]

    def query_knn_batch(self, queries: np.ndarray, k: int, mode: str = "exact") -> list[np.ndarray]:
        """Unfiltered ids of the top-k neighbors for each query row."""
        queries = np.asarray(queries, dtype=np.float64)
        if mode == "exact":
            sims = queries @ self.features.T
            return [
                self.ids[kernels.topk_select(sims[i], self.ids, min(k, len(self.ids)))]
                for i in range(queries.shape[0])
            ]
        return [
            np.array([iid for iid, _ in self.query_knn(q, k, mode=mode)], dtype=np.int64)
            for q in queries
        ]

    def save(self, path: str | Path) -> None:
        arrays = {"ids": self.ids, "features": self.features, "categories": self.categories}
        meta: dict = {"kind": "retrieval-index", "version": INDEX_VERSION, "ann": None}
        if self.centroids is not None:
            arrays["centroids"] = self.centroids
            arrays["assignments"] = self.assignments.astype(np.int64)
            meta["ann"] = {"clusters": self.ann.clusters, "probes": self.ann.probes,
                           "iters": self.ann.iters, "seed": self.ann.seed}
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalIndex":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "retrieval-index":
            raise ValueError("not a retrieval index file")
        if meta.get("version") != INDEX_VERSION:
            raise ValueError(f"unsupported index version {meta.get('version')}")
        ann = AnnConfig(**meta["ann"]) if meta.get("ann") else None
        return cls(
            arrays["ids"], arrays["features"], arrays["categories"],
            ann=ann, centroids=arrays.get("centroids"), assignments=arrays.get("assignments"),
        )


def build_index(catalog, ann_config: AnnConfig | None = None, item_ids=None) -> RetrievalIndex:
    """Index a catalog (optionally restricted to `item_ids`)."""
    if len(catalog.items) == 0:
        raise ValueError("empty catalog")
    if item_ids is not None:
        catalog = catalog.subset(item_ids)
    return RetrievalIndex(catalog.ids.copy(), catalog.features.copy(), catalog.categories.copy(), ann=ann_config)

"""Embedding extraction and image-to-image retrieval scoring (mAP, CMC)."""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data.augment import ImageBatchLoader, batch_tensors, iter_batches
from .data.manifest import DatasetManifest

_MAGIC = b"MBRE"
_HEADER = struct.Struct("<4sQQ8s")


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray  # (N, dim) float32
    vehicle_ids: np.ndarray  # (N,)
    camera_ids: np.ndarray  # (N,)
    image_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        self.vehicle_ids = np.asarray(self.vehicle_ids, dtype=np.int64)
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64)
        if self.rows.ndim != 2:
            raise ValueError("embedding rows must be a 2-D array")
        n = self.rows.shape[0]
        if self.vehicle_ids.shape != (n,) or self.camera_ids.shape != (n,):
            raise ValueError("label sidecar length does not match row count")
        if self.image_ids and len(self.image_ids) != n:
            raise ValueError("image_ids length does not match row count")
        if not np.isfinite(self.rows).all():
            raise ValueError("embedding matrix contains non-finite entries")

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    # -- flat binary container + CSV sidecar --------------------------------
    def save(self, path: str | os.PathLike) -> tuple[Path, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, len(self), self.dim, b"float32".ljust(8, b"\0")))
            fh.write(np.ascontiguousarray(self.rows, dtype="<f4").tobytes())
        sidecar = path.with_suffix(path.suffix + ".csv")
        with open(sidecar, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "vehicle_id", "camera_id"])
            ids = self.image_ids or [""] * len(self)
            for i in range(len(self)):
                w.writerow([ids[i], int(self.vehicle_ids[i]), int(self.camera_ids[i])])
        return path, sidecar

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EmbeddingMatrix":
        path = Path(path)
        with open(path, "rb") as fh:
            magic, n, dim, dtype = _HEADER.unpack(fh.read(_HEADER.size))
            if magic != _MAGIC or dtype.rstrip(b"\0") != b"float32":
                raise ValueError(f"{path}: not an embedding file")
            rows = np.frombuffer(fh.read(), dtype="<f4")
        if rows.size != n * dim:
            raise ValueError(f"{path}: payload holds {rows.size} values, header says {n}x{dim}")
        with open(path.with_suffix(path.suffix + ".csv"), newline="") as fh:
            side = list(csv.DictReader(fh))
        if len(side) != n:
            raise ValueError(f"{path}: sidecar has {len(side)} rows, expected {n}")
        return cls(
            rows.reshape(n, dim).copy(),
            [int(r["vehicle_id"]) for r in side],
            [int(r["camera_id"]) for r in side],
            [r["image_id"] for r in side],
        )


@torch.no_grad()
def extract_embeddings(
    model,
    manifest: DatasetManifest,
    use_lai: bool = True,
    batch_size: int = 32,
    workers: int = 0,
) -> EmbeddingMatrix:
    """One f_g row per record, in manifest order. Side embeddings are used
    when the model has a table, ``use_lai`` is set and records carry cameras."""
    was_training = model.training
    model.eval()
    loader = ImageBatchLoader(model.spec.input_size, None, workers=workers)
    rows = []
    dim = None
    try:
        for records, images in iter_batches(manifest, batch_size, loader):
            cams, views, _ = batch_tensors(records)
            lai = use_lai and model.lai is not None
            bundle = model(images, cams if lai else None, views if lai else None, with_logits=False)
            g = bundle.global_.float().cpu().numpy()
            if dim is not None and g.shape[1] != dim:
                raise ValueError(f"embedding dim changed between batches: {dim} vs {g.shape[1]}")
            dim = g.shape[1]
            rows.append(g)
    finally:
        model.train(was_training)
    return EmbeddingMatrix(
        np.concatenate(rows),
        [r.vehicle_id for r in manifest.records],
        [r.camera_id for r in manifest.records],
        [r.image_id for r in manifest.records],
    )


@dataclass
class RetrievalResult:
    mAP: float
    cmc: np.ndarray  # cmc[k-1] = fraction of queries matched within rank k
    per_query_ap: list[float]
    n_queries: int
    n_excluded: int

    def cmc_at(self, k: int) -> float:
        if self.cmc.size == 0:
            return 0.0
        return float(self.cmc[min(k, self.cmc.size) - 1])

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "cmc1": self.cmc_at(1),
            "cmc5": self.cmc_at(5),
            "n_queries": self.n_queries,
            "n_excluded": self.n_excluded,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def distance_matrix(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Euclidean distances in float64, computed one query row at a time so a
    row never depends on how the queries are partitioned."""
    q = q.astype(np.float64)
    g = g.astype(np.float64)
    gg = (g * g).sum(1)
    out = np.empty((q.shape[0], g.shape[0]), dtype=np.float64)
    for i, row in enumerate(q):
        out[i] = np.sqrt(np.maximum(gg - 2.0 * (g @ row) + row @ row, 0.0))
    return out


def average_precision(relevant: np.ndarray) -> float:
    """AP of a ranked boolean relevance list."""
    hits = np.flatnonzero(relevant)
    if hits.size == 0:
        return 0.0
    return math.fsum((k + 1) / (pos + 1) for k, pos in enumerate(hits)) / hits.size


def rank_and_score(
    query: EmbeddingMatrix,
    gallery: EmbeddingMatrix,
    cross_camera: bool = True,
    max_rank: int | None = None,
) -> RetrievalResult:
    """Rank the gallery by ascending distance for every query.

    With ``cross_camera`` gallery entries sharing both identity and camera
    with the query are dropped before scoring. Queries left without any
    positive are excluded from mAP and CMC and counted in ``n_excluded``.
    Equal distances keep gallery order.
    """
    if query.dim != gallery.dim:
        raise ValueError(f"query dim {query.dim} != gallery dim {gallery.dim}")
    n_g = len(gallery)
    max_rank = n_g if max_rank is None else min(max_rank, n_g)
    dist = distance_matrix(query.rows, gallery.rows)
    first_hits = []
    aps = []
    excluded = 0
    for i in range(len(query)):
        order = np.argsort(dist[i], kind="stable")
        same_id = gallery.vehicle_ids[order] == query.vehicle_ids[i]
        if cross_camera:
            keep = ~(same_id & (gallery.camera_ids[order] == query.camera_ids[i]))
            same_id = same_id[keep]
        if not same_id.any():
            excluded += 1
            continue
        aps.append(average_precision(same_id))
        first_hits.append(int(np.argmax(same_id)))
    n = len(aps)
    cmc = np.zeros(max_rank, dtype=np.float64)
    if n:
        counts = np.bincount(np.minimum(first_hits, max_rank), minlength=max_rank + 1)[:max_rank]
        cmc = np.cumsum(counts) / n
    return RetrievalResult(
        mAP=math.fsum(aps) / n if n else 0.0,
        cmc=cmc,
        per_query_ap=aps,
        n_queries=n,
        n_excluded=excluded,
    )

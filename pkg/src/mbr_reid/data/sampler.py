"""P identities x K images batch sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .manifest import DatasetManifest, ImageRecord


@dataclass(frozen=True)
class PKBatchSpec:
    P: int = 6
    K: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ValueError("PK sampling needs P >= 2 and K >= 2")

    @property
    def batch_size(self) -> int:
        return self.P * self.K


VERI776_PK = PKBatchSpec(P=6, K=8)
VERIWILD_PK = PKBatchSpec(P=32, K=4)


class PKSampler:
    """Yields lists of record indices, P identities x K records each.

    One epoch visits every identity at least once: identities are shuffled
    and cut into chunks of P; a short final chunk is topped up with other
    identities drawn at random. Identities with fewer than K images are
    sampled with replacement. The stream depends only on (seed, epoch).

    Usable directly as a ``batch_sampler`` for ``torch.utils.data.DataLoader``.
    """

    def __init__(self, manifest: DatasetManifest, spec: PKBatchSpec, epoch: int = 0):
        self.manifest = manifest
        self.spec = spec
        self.epoch = epoch
        self.groups = manifest.by_identity()
        self.ids = sorted(self.groups)
        if len(self.ids) < spec.P:
            raise ValueError(f"PK sampling needs at least P={spec.P} identities, manifest has {len(self.ids)}")

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return -(-len(self.ids) // self.spec.P)

    def __iter__(self) -> Iterator[list[int]]:
        P, K = self.spec.P, self.spec.K
        rng = np.random.default_rng([self.spec.seed, self.epoch])
        order = [self.ids[i] for i in rng.permutation(len(self.ids))]
        for start in range(0, len(order), P):
            chunk = order[start : start + P]
            if len(chunk) < P:
                rest = [v for v in self.ids if v not in chunk]
                extra = rng.choice(len(rest), size=P - len(chunk), replace=False)
                chunk = chunk + [rest[i] for i in extra]
            batch = []
            for vid in chunk:
                pool = self.groups[vid]
                picks = rng.choice(len(pool), size=K, replace=len(pool) < K)
                batch.extend(pool[i] for i in picks)
            yield batch


def pk_sample(manifest: DatasetManifest, spec: PKBatchSpec, epoch: int = 0) -> Iterator[list[ImageRecord]]:
    """One epoch of PK batches as lists of records."""
    for batch in PKSampler(manifest, spec, epoch):
        yield [manifest.records[i] for i in batch]

"""Image loading, training augmentation (pad -> crop -> flip -> erase) and
tensor conversion."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .manifest import DatasetManifest, ImageRecord

# ImageNet statistics of the pretrained backbone
MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
MEAN_PIXEL = tuple(int(round(255 * m)) for m in MEAN)


@dataclass(frozen=True)
class AugmentationConfig:
    target_size: tuple[int, int] = (256, 256)
    pad: int = 10
    hflip_prob: float = 0.5
    random_erasing: bool = True
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_min_aspect: float = 0.3
    erase_fill: tuple[int, int, int] = MEAN_PIXEL

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(pad=0, hflip_prob=0.0, random_erasing=False)


def load_image(path: str, size: tuple[int, int] = (256, 256)) -> np.ndarray:
    """RGB uint8 array of shape (H, W, 3) resized to ``size`` = (H, W)."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


def sample_erase_box(rng: np.random.Generator, h: int, w: int, config: AugmentationConfig, attempts: int = 100):
    """(top, left, height, width) of the erased rectangle, or None."""
    log_ratio = (math.log(config.erase_min_aspect), math.log(1.0 / config.erase_min_aspect))
    area = h * w
    for _ in range(attempts):
        target = area * rng.uniform(*config.erase_area)
        aspect = math.exp(rng.uniform(*log_ratio))
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            return top, left, eh, ew
    return None


def augment(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    th, tw = config.target_size
    if image.shape[:2] != (th, tw):
        raise ValueError(f"augment expects a {th}x{tw} image, got {image.shape[:2]}")
    out = image
    if config.pad > 0:
        p = config.pad
        padded = np.pad(out, ((p, p), (p, p), (0, 0)), mode="constant")
        top = int(rng.integers(0, 2 * p + 1))
        left = int(rng.integers(0, 2 * p + 1))
        out = padded[top : top + th, left : left + tw]
    if config.hflip_prob > 0 and rng.random() < config.hflip_prob:
        out = out[:, ::-1]
    if config.random_erasing and rng.random() < config.erase_prob:
        box = sample_erase_box(rng, th, tw, config)
        if box is not None:
            out = out.copy()
            t, l, eh, ew = box
            out[t : t + eh, l : l + ew] = np.asarray(config.erase_fill, dtype=out.dtype)
    return np.ascontiguousarray(out)


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 HWC -> normalised float CHW."""
    x = (image.astype(np.float32) / 255.0 - MEAN) / STD
    return torch.from_numpy(x.transpose(2, 0, 1).copy())


def batch_tensors(records: Sequence[ImageRecord], label_map: dict[int, int] | None = None):
    """(cam_ids, view_ids, targets) tensors for a batch of records."""
    cams = torch.tensor([r.camera_id for r in records], dtype=torch.long)
    views = torch.tensor([0 if r.view_id is None else r.view_id for r in records], dtype=torch.long)
    if label_map is None:
        targets = torch.tensor([r.vehicle_id for r in records], dtype=torch.long)
    else:
        targets = torch.tensor([label_map[r.vehicle_id] for r in records], dtype=torch.long)
    return cams, views, targets


class ImageBatchLoader:
    """Decodes (and optionally augments) batches of records.

    Augmentation randomness for slot j of batch b in epoch e comes from the
    generator seeded with (seed, e, b, j), so a thread pool may decode in any
    order without changing the result.
    """

    def __init__(
        self,
        size: tuple[int, int] = (256, 256),
        config: AugmentationConfig | None = None,
        seed: int = 0,
        workers: int = 0,
        cache: bool = False,
    ):
        self.size = tuple(size)
        self.config = config
        self.seed = seed
        self.workers = workers
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def _decode(self, record: ImageRecord) -> np.ndarray:
        if self._cache is not None and record.source in self._cache:
            return self._cache[record.source]
        img = load_image(record.source, self.size)
        if self._cache is not None:
            self._cache[record.source] = img
        return img

    def _one(self, args) -> torch.Tensor:
        record, key = args
        img = self._decode(record)
        if self.config is not None:
            img = augment(img, self.config, np.random.default_rng([self.seed, *key]))
        return to_tensor(img)

    def load(self, records: Sequence[ImageRecord], epoch: int = 0, batch_no: int = 0) -> torch.Tensor:
        jobs = [(r, (epoch, batch_no, j)) for j, r in enumerate(records)]
        if self.workers > 0:
            with ThreadPoolExecutor(self.workers) as pool:
                tensors = list(pool.map(self._one, jobs))
        else:
            tensors = [self._one(j) for j in jobs]
        return torch.stack(tensors)


def iter_batches(manifest: DatasetManifest, batch_size: int, loader: ImageBatchLoader) -> Iterator[tuple[list[ImageRecord], torch.Tensor]]:
    """Sequential (unaugmented) batches over a manifest, in record order."""
    recs = list(manifest.records)
    for b, start in enumerate(range(0, len(recs), batch_size)):
        chunk = recs[start : start + batch_size]
        yield chunk, loader.load(chunk, 0, b)

"""Image records, split manifests, and directory-layout parsers."""
from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

SPLITS = ("train", "query", "gallery")
CSV_COLUMNS = ("image_id", "path", "vehicle_id", "camera_id", "view_id")
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")


class ManifestError(ValueError):
    """Raised for unreadable dataset layouts; ``files`` lists offending entries."""

    def __init__(self, message: str, files: list[str] | None = None):
        self.files = list(files or [])
        if self.files:
            shown = ", ".join(self.files[:10])
            more = f" (+{len(self.files) - 10} more)" if len(self.files) > 10 else ""
            message = f"{message}: {shown}{more}"
        super().__init__(message)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    source: str
    vehicle_id: int
    camera_id: int
    view_id: int | None = None

    def __post_init__(self):
        if self.vehicle_id < 0 or self.camera_id < 0:
            raise ValueError(f"{self.image_id}: ids must be non-negative")
        if self.view_id is not None and self.view_id < 0:
            raise ValueError(f"{self.image_id}: view id must be non-negative")


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    records: tuple[ImageRecord, ...]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        dupes = []
        for r in self.records:
            if r.image_id in seen:
                dupes.append(r.image_id)
            seen.add(r.image_id)
        if dupes:
            raise ManifestError("duplicate image ids", dupes)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def vehicle_ids(self) -> list[int]:
        return sorted({r.vehicle_id for r in self.records})

    @property
    def n_classes(self) -> int:
        return len({r.vehicle_id for r in self.records})

    @property
    def n_cameras(self) -> int:
        return max((r.camera_id for r in self.records), default=-1) + 1

    @property
    def n_views(self) -> int:
        views = [r.view_id for r in self.records if r.view_id is not None]
        return max(views, default=-1) + 1

    def label_map(self) -> dict[int, int]:
        """vehicle_id -> contiguous class index."""
        return {vid: i for i, vid in enumerate(self.vehicle_ids)}

    def by_identity(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for i, r in enumerate(self.records):
            groups.setdefault(r.vehicle_id, []).append(i)
        return groups


# ---------------------------------------------------------------------------
# CSV interchange


def write_manifest_csv(manifest: DatasetManifest, path: str | os.PathLike, root: str | os.PathLike | None = None):
    """Write a manifest as CSV; paths are stored relative to ``root`` when given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in manifest.records:
            src = os.path.relpath(r.source, root) if root is not None else r.source
            writer.writerow([r.image_id, src, r.vehicle_id, r.camera_id, "" if r.view_id is None else r.view_id])


def read_manifest_csv(path: str | os.PathLike, split: str, root: str | os.PathLike | None = None) -> DatasetManifest:
    path = Path(path)
    base = Path(root) if root is not None else path.parent
    records = []
    bad = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                view = row["view_id"].strip()
                src = row["path"]
                records.append(
                    ImageRecord(
                        image_id=row["image_id"],
                        source=src if os.path.isabs(src) else str(base / src),
                        vehicle_id=int(row["vehicle_id"]),
                        camera_id=int(row["camera_id"]),
                        view_id=int(view) if view else None,
                    )
                )
            except (ValueError, TypeError):
                bad.append(f"{path.name}:{line}")
    if bad:
        raise ManifestError("unparsable manifest rows", bad)
    if not records:
        raise ManifestError(f"{path}: no records found")
    return DatasetManifest(split, tuple(records))


# ---------------------------------------------------------------------------
# directory layouts

VERI776_DIRS = {"train": "image_train", "query": "image_query", "gallery": "image_test"}
_VERI_NAME = re.compile(r"^(\d+)_c(\d+)_(\d+)_(\d+)$")


def _veri776(root: Path, split: str, views: dict[str, int] | None = None) -> DatasetManifest:
    d = root / VERI776_DIRS[split]
    if not d.is_dir():
        raise ManifestError(f"missing split directory {d}")
    files = sorted(f for f in os.listdir(d) if f.lower().endswith(IMAGE_SUFFIXES))
    if not files:
        raise ManifestError(f"{d}: no records found")
    records, bad = [], []
    for fname in files:
        m = _VERI_NAME.match(Path(fname).stem)
        if m is None:
            bad.append(fname)
            continue
        cam = int(m.group(2))
        if cam < 1:
            bad.append(fname)
            continue
        records.append(
            ImageRecord(
                image_id=fname,
                source=str(d / fname),
                vehicle_id=int(m.group(1)),
                camera_id=cam - 1,
                view_id=(views or {}).get(fname),
            )
        )
    if bad:
        raise ManifestError(f"{d}: unparsable file names", bad)
    return DatasetManifest(split, tuple(records))


def _read_view_labels(path: Path) -> dict[str, int]:
    """``<file name> <view id>`` per line (whitespace or comma separated)."""
    out = {}
    for line in path.read_text().splitlines():
        parts = line.replace(",", " ").split()
        if len(parts) >= 2:
            out[Path(parts[0]).name] = int(parts[-1])
    return out


def _csv_layout(root: Path, split: str) -> DatasetManifest:
    path = root / f"{split}.csv"
    if not path.is_file():
        raise ManifestError(f"no records found: missing split manifest {path}")
    return read_manifest_csv(path, split, root)


LAYOUTS: dict[str, Callable[..., DatasetManifest]] = {
    "veri776": _veri776,
    "csv": _csv_layout,
}


def load_manifest(root: str | os.PathLike, layout: str = "csv", split: str = "train") -> DatasetManifest:
    """Parse one split of a dataset directory.

    ``veri776`` reads ``image_train/``, ``image_query/`` and ``image_test/``
    with labels encoded as ``<vehicle>_c<camera>_<frame>_<n>.jpg``; cameras
    are re-indexed from 0. Optional view labels are read from
    ``<root>/views_<split>.txt``. ``csv`` reads ``<root>/<split>.csv``.
    """
    root = Path(root)
    if layout not in LAYOUTS:
        raise ManifestError(f"unknown layout {layout!r}; registered: {sorted(LAYOUTS)}")
    if split not in SPLITS:
        raise ManifestError(f"unknown split {split!r}")
    if not root.is_dir():
        raise ManifestError(f"dataset root {root} does not exist")
    if layout == "veri776":
        view_file = root / f"views_{split}.txt"
        views = _read_view_labels(view_file) if view_file.is_file() else None
        return _veri776(root, split, views)
    return LAYOUTS[layout](root, split)


def load_splits(root: str | os.PathLike, layout: str = "csv") -> dict[str, DatasetManifest]:
    return {split: load_manifest(root, layout, split) for split in SPLITS}

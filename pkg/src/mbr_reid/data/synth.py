"""Synthetic re-identification fixture.

Each identity is a coloured shape with its own stripe pattern, drawn on a
noisy background. Cameras tint the whole frame and views rotate the shape,
so the task is learnable but not trivial pixel matching.
"""
from __future__ import annotations

import colorsys
import os
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .manifest import DatasetManifest, ImageRecord, write_manifest_csv

SHAPES = ("rectangle", "ellipse", "triangle", "diamond", "cross")
IMAGE_SIZE = 256


def _identity_style(vid: int, n_ids: int, rng: np.random.Generator) -> dict:
    hue = (vid / n_ids + rng.uniform(-0.02, 0.02)) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
    sr, sg, sb = colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.9, 0.35 + 0.6 * (vid % 2))
    return {
        "color": (int(255 * r), int(255 * g), int(255 * b)),
        "stripe_color": (int(255 * sr), int(255 * sg), int(255 * sb)),
        "shape": SHAPES[vid % len(SHAPES)],
        "stripes": 2 + (vid * 3) % 5,
        "stripe_angle": 0 if (vid // len(SHAPES)) % 2 == 0 else 90,
    }


def _polygon(shape: str, cx: float, cy: float, rx: float, ry: float) -> list[tuple[float, float]] | None:
    if shape == "triangle":
        return [(cx, cy - ry), (cx + rx, cy + ry), (cx - rx, cy + ry)]
    if shape == "diamond":
        return [(cx, cy - ry), (cx + rx, cy), (cx, cy + ry), (cx - rx, cy)]
    if shape == "cross":
        a, b = rx / 3, ry / 3
        return [
            (cx - a, cy - ry), (cx + a, cy - ry), (cx + a, cy - b), (cx + rx, cy - b),
            (cx + rx, cy + b), (cx + a, cy + b), (cx + a, cy + ry), (cx - a, cy + ry),
            (cx - a, cy + b), (cx - rx, cy + b), (cx - rx, cy - b), (cx - a, cy - b),
        ]
    return None


def render(style: dict, cam: int, n_cams: int, view: int, n_views: int, rng: np.random.Generator) -> Image.Image:
    s = IMAGE_SIZE
    bg = rng.integers(70, 150, size=(s, s, 3), dtype=np.int16)
    img = Image.fromarray(bg.astype(np.uint8), "RGB")

    # the object lives on its own layer so views can rotate it
    layer = Image.new("RGBA", (s, s), (0, 0, 0, 0))
    draw = ImageDraw.Draw(layer)
    cx = s / 2 + rng.uniform(-18, 18)
    cy = s / 2 + rng.uniform(-18, 18)
    rx = s * rng.uniform(0.28, 0.34)
    ry = s * rng.uniform(0.22, 0.30)
    box = [cx - rx, cy - ry, cx + rx, cy + ry]
    poly = _polygon(style["shape"], cx, cy, rx, ry)
    mask = Image.new("L", (s, s), 0)
    mdraw = ImageDraw.Draw(mask)
    if poly is not None:
        draw.polygon(poly, fill=style["color"] + (255,))
        mdraw.polygon(poly, fill=255)
    elif style["shape"] == "ellipse":
        draw.ellipse(box, fill=style["color"] + (255,))
        mdraw.ellipse(box, fill=255)
    else:
        draw.rectangle(box, fill=style["color"] + (255,))
        mdraw.rectangle(box, fill=255)

    stripes = Image.new("RGBA", (s, s), (0, 0, 0, 0))
    sdraw = ImageDraw.Draw(stripes)
    n = style["stripes"]
    width = max(4, int(2 * rx / (2 * n + 1)))
    for i in range(n):
        off = -rx + (2 * i + 1) * (2 * rx) / (2 * n + 1)
        if style["stripe_angle"] == 0:
            sdraw.rectangle([cx + off, cy - ry, cx + off + width, cy + ry], fill=style["stripe_color"] + (255,))
        else:
            sdraw.rectangle([cx - rx, cy + off * ry / rx, cx + rx, cy + off * ry / rx + width * ry / rx], fill=style["stripe_color"] + (255,))
    layer.paste(stripes, (0, 0), Image.composite(stripes, Image.new("RGBA", (s, s)), mask).getchannel("A"))

    angle = (360.0 / max(n_views, 1)) * view * 0.25 + rng.uniform(-6, 6)
    layer = layer.rotate(angle, resample=Image.BILINEAR, center=(cx, cy))
    img.paste(layer, (0, 0), layer)

    # per-camera colour cast and brightness
    arr = np.asarray(img, dtype=np.float32)
    phase = 2 * np.pi * cam / max(n_cams, 1)
    tint = 1.0 + 0.12 * np.array([np.cos(phase), np.cos(phase + 2.1), np.cos(phase + 4.2)], dtype=np.float32)
    arr = arr * tint * rng.uniform(0.9, 1.1) + rng.normal(0, 6, size=arr.shape)
    return Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8), "RGB")


def synth_dataset(
    root: str | os.PathLike,
    n_ids: int = 10,
    n_cams: int = 4,
    n_views: int = 2,
    imgs_per_id: int = 8,
    seed: int = 0,
    query_per_id: int = 2,
) -> dict[str, DatasetManifest]:
    """Render train/query/gallery PNGs under ``root`` and write ``<split>.csv``.

    Train holds ``imgs_per_id`` images per identity cycling over cameras and
    views. Queries use the first ``query_per_id`` cameras; the gallery holds
    one image per camera for every identity, so each query has positives in
    other cameras.
    """
    if n_ids < 2:
        raise ValueError("synth_dataset needs n_ids >= 2")
    if n_cams < 2:
        raise ValueError("synth_dataset needs n_cams >= 2 so queries have cross-camera matches")
    if n_views < 1 or imgs_per_id < 1 or not 1 <= query_per_id <= n_cams:
        raise ValueError("n_views, imgs_per_id must be >= 1 and 1 <= query_per_id <= n_cams")
    root = Path(root)
    style_rng = np.random.default_rng([seed, 0])
    styles = [_identity_style(v, n_ids, style_rng) for v in range(n_ids)]

    plan = {
        "train": [(v, k % n_cams, k % n_views) for v in range(n_ids) for k in range(imgs_per_id)],
        "query": [(v, c, c % n_views) for v in range(n_ids) for c in range(query_per_id)],
        "gallery": [(v, c, (c + 1) % n_views) for v in range(n_ids) for c in range(n_cams)],
    }
    manifests = {}
    for si, (split, items) in enumerate(plan.items(), start=1):
        out = root / split
        out.mkdir(parents=True, exist_ok=True)
        records = []
        for k, (vid, cam, view) in enumerate(items):
            rng = np.random.default_rng([seed, si, k])
            name = f"{vid:04d}_c{cam:03d}_v{view}_{k:05d}.png"
            render(styles[vid], cam, n_cams, view, n_views, rng).save(out / name, format="PNG")
            records.append(ImageRecord(f"{split}/{name}", str(out / name), vid, cam, view))
        manifest = DatasetManifest(split, tuple(records))
        write_manifest_csv(manifest, root / f"{split}.csv", root)
        manifests[split] = manifest
    return manifests

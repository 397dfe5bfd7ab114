import hashlib
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch
import torchvision.transforms.functional as TF
from hypothesis import given, settings
from hypothesis import strategies as st

from mbr_reid.data import (
    VERI776_PK,
    VERIWILD_PK,
    AugmentationConfig,
    DatasetManifest,
    ImageBatchLoader,
    ImageRecord,
    ManifestError,
    PKBatchSpec,
    PKSampler,
    augment,
    load_manifest,
    pk_sample,
    read_manifest_csv,
    sample_erase_box,
    synth_dataset,
    to_tensor,
    write_manifest_csv,
)


def manifest_of(counts, split="train"):
    recs = []
    for vid, n in enumerate(counts):
        for k in range(n):
            recs.append(ImageRecord(f"{vid}_{k}", f"/x/{vid}_{k}.png", vid, k % 3, None))
    return DatasetManifest(split, tuple(recs))


# -- records and manifests ------------------------------------------------------


def test_record_validation():
    with pytest.raises(ValueError):
        ImageRecord("a", "a.png", -1, 0)
    with pytest.raises(ValueError):
        ImageRecord("a", "a.png", 0, 0, -2)
    assert ImageRecord("a", "a.png", 0, 0).view_id is None


def test_duplicate_ids_rejected():
    r = ImageRecord("a", "a.png", 0, 0)
    with pytest.raises(ManifestError, match="duplicate"):
        DatasetManifest("train", (r, r))


def test_csv_round_trip(tmp_path):
    m = DatasetManifest(
        "query",
        (
            ImageRecord("q1", str(tmp_path / "img" / "q1.png"), 3, 1, 2),
            ImageRecord("q2", str(tmp_path / "img" / "q2.png"), 4, 0, None),
        ),
    )
    write_manifest_csv(m, tmp_path / "query.csv", tmp_path)
    back = read_manifest_csv(tmp_path / "query.csv", "query", tmp_path)
    assert set(back.records) == set(m.records)


def test_csv_bad_rows(tmp_path):
    (tmp_path / "train.csv").write_text("image_id,path,vehicle_id,camera_id,view_id\na,a.png,x,0,\n")
    with pytest.raises(ManifestError, match="train.csv:2"):
        load_manifest(tmp_path, "csv", "train")


def test_missing_split_is_reported(tmp_path):
    with pytest.raises(ManifestError, match="no records found"):
        load_manifest(tmp_path, "csv", "train")
    with pytest.raises(ManifestError, match="missing split directory"):
        load_manifest(tmp_path, "veri776", "train")


def test_unknown_layout(tmp_path):
    with pytest.raises(ManifestError, match="unknown layout"):
        load_manifest(tmp_path, "market1501")


def test_veri776_layout(tmp_path):
    d = tmp_path / "image_train"
    d.mkdir()
    for name in ["0002_c002_00030600_0.jpg", "0002_c003_00084280_1.jpg", "0010_c020_00010000_0.jpg"]:
        (d / name).write_bytes(b"")
    (tmp_path / "views_train.txt").write_text("0002_c002_00030600_0.jpg 5\n")
    m = load_manifest(tmp_path, "veri776", "train")
    assert len(m) == 3 and m.n_classes == 2
    first = m.records[0]
    assert (first.vehicle_id, first.camera_id, first.view_id) == (2, 1, 5)
    assert m.records[2].camera_id == 19 and m.records[2].view_id is None


def test_veri776_bad_names(tmp_path):
    d = tmp_path / "image_query"
    d.mkdir()
    (d / "0002_c002_00030600_0.jpg").write_bytes(b"")
    (d / "junk.jpg").write_bytes(b"")
    with pytest.raises(ManifestError) as err:
        load_manifest(tmp_path, "veri776", "query")
    assert err.value.files == ["junk.jpg"]


def test_veri776_empty_dir(tmp_path):
    (tmp_path / "image_test").mkdir()
    with pytest.raises(ManifestError, match="no records found"):
        load_manifest(tmp_path, "veri776", "gallery")


# -- PK sampling ------------------------------------------------------------------


def test_recipe_batch_sizes():
    assert VERI776_PK.batch_size == 48
    assert VERIWILD_PK.batch_size == 128


def test_pk_spec_validation():
    with pytest.raises(ValueError):
        PKBatchSpec(P=1, K=4)
    with pytest.raises(ValueError):
        PKBatchSpec(P=4, K=1)


def test_two_identities_two_each():
    m = manifest_of([2, 2])
    for batch in pk_sample(m, PKBatchSpec(2, 2)):
        assert Counter(r.vehicle_id for r in batch) == {0: 2, 1: 2}
        assert len({r.image_id for r in batch}) == 4


def test_too_few_identities():
    with pytest.raises(ValueError, match="at least P"):
        PKSampler(manifest_of([3, 3]), PKBatchSpec(3, 2))


@settings(max_examples=40, deadline=None)
@given(
    counts=st.lists(st.integers(1, 9), min_size=2, max_size=15),
    P=st.integers(2, 5),
    K=st.integers(2, 5),
    seed=st.integers(0, 99),
    epoch=st.integers(0, 5),
)
def test_pk_batches_have_p_ids_k_each(counts, P, K, seed, epoch):
    if len(counts) < P:
        return
    m = manifest_of(counts)
    sampler = PKSampler(m, PKBatchSpec(P, K, seed), epoch)
    seen = set()
    batches = list(sampler)
    assert len(batches) == len(sampler)
    for batch in batches:
        c = Counter(m.records[i].vehicle_id for i in batch)
        assert len(c) == P and set(c.values()) == {K}
        seen |= set(c)
    assert seen == set(range(len(counts)))  # every identity visited per epoch
    assert batches == list(PKSampler(m, PKBatchSpec(P, K, seed), epoch))


def test_pk_epochs_differ():
    m = manifest_of([5] * 8)
    a = list(PKSampler(m, PKBatchSpec(2, 2, 0), 0))
    b = list(PKSampler(m, PKBatchSpec(2, 2, 0), 1))
    assert a != b


# -- augmentation -------------------------------------------------------------------


def _image(seed=0, size=(256, 256)):
    return np.random.default_rng(seed).integers(0, 256, size=(*size, 3), dtype=np.uint8)


def test_disabled_augmentation_is_identity():
    img = _image()
    out = augment(img, AugmentationConfig.disabled(), np.random.default_rng(0))
    assert np.array_equal(out, img)


def test_forced_flip_mirrors_columns():
    img = _image(1)
    cfg = AugmentationConfig(pad=0, hflip_prob=1.0, random_erasing=False)
    out = augment(img, cfg, np.random.default_rng(0))
    assert np.array_equal(out, img[:, ::-1])


def test_pad_crop_is_a_shift_with_black_border():
    img = _image(2)
    cfg = AugmentationConfig(hflip_prob=0.0, random_erasing=False)
    out = augment(img, cfg, np.random.default_rng(5))
    rng = np.random.default_rng(5)
    top, left = int(rng.integers(0, 21)), int(rng.integers(0, 21))
    ref = np.zeros((276, 276, 3), np.uint8)
    ref[10:266, 10:266] = img
    assert np.array_equal(out, ref[top : top + 256, left : left + 256])


def test_erasing_matches_torchvision_reference():
    img = _image(3)
    cfg = AugmentationConfig(pad=0, hflip_prob=0.0, erase_prob=1.0)
    out = augment(img, cfg, np.random.default_rng(11))

    rng = np.random.default_rng(11)
    rng.random()  # the erase coin flip
    t, l, h, w = sample_erase_box(rng, 256, 256, cfg)
    chw = torch.from_numpy(img).permute(2, 0, 1)
    fill = torch.tensor(cfg.erase_fill, dtype=torch.uint8).view(3, 1, 1)
    ref = TF.erase(chw, t, l, h, w, fill).permute(1, 2, 0).numpy()
    assert np.array_equal(out, ref)

    diff = np.any(out != img, axis=2)
    rows, cols = np.nonzero(diff)
    assert rows.min() >= t and rows.max() < t + h and cols.min() >= l and cols.max() < l + w


def test_erase_box_respects_area_and_aspect():
    cfg = AugmentationConfig()
    rng = np.random.default_rng(0)
    for _ in range(200):
        t, l, h, w = sample_erase_box(rng, 256, 256, cfg)
        assert 0 <= t and t + h <= 256 and 0 <= l and l + w <= 256
        assert 0.3 * 0.8 <= h / w <= (1 / 0.3) * 1.25


def test_augment_rejects_wrong_size():
    with pytest.raises(ValueError):
        augment(_image(size=(128, 256)), AugmentationConfig(), np.random.default_rng(0))


def test_to_tensor_normalises():
    mean_pixel = np.array([[[124, 116, 104]]], dtype=np.uint8).repeat(4, 0).repeat(4, 1)
    t = to_tensor(mean_pixel)
    assert t.shape == (3, 4, 4) and t.abs().max() < 0.01


# -- synthetic fixture ----------------------------------------------------------------


def test_synth_counts(synth_root):
    m = {s: load_manifest(synth_root, "csv", s) for s in ("train", "query", "gallery")}
    assert len(m["train"]) == 80 and m["train"].n_classes == 10
    assert len(m["query"]) > 0 and len(m["gallery"]) > 0
    for vid in range(10):
        cams = {r.camera_id for r in m["query"].records + m["gallery"].records if r.vehicle_id == vid}
        assert len(cams) >= 2


def test_synth_small_manifest_classes(tmp_path):
    m = synth_dataset(tmp_path, n_ids=10, n_cams=2, n_views=1, imgs_per_id=4, seed=1)
    assert len(m["train"]) == 40
    # counted independently from the files on disk
    ids = {p.name.split("_")[0] for p in (tmp_path / "train").glob("*.png")}
    assert len(ids) == m["train"].n_classes == 10


def _digest(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*.png"))}


def test_synth_is_deterministic(tmp_path):
    synth_dataset(tmp_path / "a", 3, 2, 1, 2, seed=7)
    synth_dataset(tmp_path / "b", 3, 2, 1, 2, seed=7)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_synth_needs_two_ids(tmp_path):
    with pytest.raises(ValueError, match="n_ids"):
        synth_dataset(tmp_path, n_ids=1)


def test_loader_parallel_matches_sequential(synth_root):
    m = load_manifest(synth_root, "csv", "train")
    recs = list(m.records[:6])
    a = ImageBatchLoader(config=AugmentationConfig(), seed=3).load(recs, 2, 1)
    b = ImageBatchLoader(config=AugmentationConfig(), seed=3, workers=3).load(recs, 2, 1)
    assert torch.equal(a, b) and a.shape == (6, 3, 256, 256)

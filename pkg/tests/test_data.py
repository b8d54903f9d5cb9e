import json
import os

import numpy as np
import pytest

from refseg.data import (
    DatasetManifest,
    ManifestError,
    check_image,
    class_set,
    generate_synthetic,
    load_image,
    load_manifest,
    load_mask,
    load_split,
    pixel_mean,
    save_image,
    save_mask,
    split_labeled,
    write_manifest,
)
from refseg.utils import file_hash

from .fixtures import corpus  # noqa: F401


def _hashes(root):
    result = {}
    for folder in ("images", "masks"):
        for name in sorted(os.listdir(os.path.join(root, folder))):
            result[(folder, name)] = file_hash(os.path.join(root, folder, name))
    result["manifest"] = file_hash(os.path.join(root, "manifest.json"))
    return result


def test_generate_writes_one_pair_per_slice(corpus):  # noqa: F811
    assert len(corpus.entries) == 12
    for entry in corpus.entries:
        assert os.path.exists(corpus.image_path(entry))
        assert os.path.exists(corpus.mask_path(entry))
    assert corpus.entries_for("test")
    assert not corpus.entries_for("unlabeled")


def test_generate_is_byte_identical(tmp_path):
    args = dict(
        seed=5, num_patients=3, slices_per_patient=2, num_classes=2, size=32
    )
    generate_synthetic(root=str(tmp_path / "a"), **args)
    generate_synthetic(root=str(tmp_path / "b"), **args)
    assert _hashes(str(tmp_path / "a")) == _hashes(str(tmp_path / "b"))


def test_generate_desk_scale_corpus(tmp_path):
    manifest = generate_synthetic(
        seed=1,
        num_patients=20,
        slices_per_patient=4,
        num_classes=2,
        size=64,
        root=str(tmp_path),
    )
    assert len(manifest.entries) == 80
    masks = [mask for _, _, mask in load_split(manifest, "labeled", "test")]
    for class_id in (1, 2):
        fraction = np.mean([np.mean(m == class_id) for m in masks])
        assert 0.02 <= fraction <= 0.40


@pytest.mark.parametrize(
    ["kwargs", "message"],
    [
        ({"num_classes": 0}, "num_classes"),
        ({"num_classes": 5}, "num_classes"),
        ({"size": 16}, "size"),
        ({"num_patients": 0}, "patient"),
    ],
)
def test_generate_rejects_bad_arguments(tmp_path, kwargs, message):
    args = dict(
        seed=1, num_patients=2, slices_per_patient=1, num_classes=2, size=32
    )
    args.update(kwargs)
    with pytest.raises(ManifestError, match=message):
        generate_synthetic(root=str(tmp_path), **args)


def test_manifest_round_trip(corpus):  # noqa: F811
    loaded = load_manifest(corpus.root)
    assert loaded == corpus
    assert load_manifest(os.path.join(corpus.root, "manifest.json")) == corpus


def test_manifest_order_is_patient_then_file(tmp_path, corpus):  # noqa: F811
    raw = corpus.to_json()
    raw["entries"] = list(reversed(raw["entries"]))
    for folder in ("images", "masks"):
        os.symlink(os.path.join(corpus.root, folder), tmp_path / folder)
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    loaded = load_manifest(str(tmp_path))
    keys = [
        (e["patient"], os.path.basename(e["image"])) for e in loaded.entries
    ]
    assert keys == sorted(keys)


def test_labeled_entry_without_mask_is_named(tmp_path, corpus):  # noqa: F811
    raw = corpus.to_json()
    broken = raw["entries"][0]
    broken["mask"] = None
    broken["split"] = "labeled"
    os.symlink(os.path.join(corpus.root, "images"), tmp_path / "images")
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(ManifestError, match=broken["image"]):
        load_manifest(str(tmp_path))


def test_missing_and_malformed_manifest(tmp_path):
    with pytest.raises(ManifestError, match="does not exist"):
        load_manifest(str(tmp_path))
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ManifestError, match="not valid JSON"):
        load_manifest(str(tmp_path))


def test_write_manifest_is_deterministic(tmp_path, corpus):  # noqa: F811
    first = write_manifest(corpus, str(tmp_path / "one"))
    second = write_manifest(corpus, str(tmp_path / "two"))
    assert file_hash(first) == file_hash(second)


@pytest.fixture(scope="module")
def twenty_patients(tmp_path_factory):
    return generate_synthetic(
        seed=2,
        num_patients=20,
        slices_per_patient=1,
        num_classes=1,
        size=32,
        root=str(tmp_path_factory.mktemp("twenty")),
        test_fraction=0.0,
    )


def test_split_five_percent_keeps_one_patient(twenty_patients):
    split = split_labeled(twenty_patients, 0.05, seed=1)
    assert len(split.patients("labeled")) == 1
    assert len(split.patients("unlabeled")) == 19


def test_split_full_ratio_labels_everyone(twenty_patients):
    split = split_labeled(twenty_patients, 1.0, seed=1)
    assert not split.entries_for("unlabeled")


def test_split_depends_on_seed_not_counts(twenty_patients):
    choices = []
    for seed in range(1, 6):
        split = split_labeled(twenty_patients, 0.10, seed=seed)
        assert len(split.patients("labeled")) == 2
        choices.append(tuple(split.patients("labeled")))
    assert len(set(choices)) > 1
    again = split_labeled(twenty_patients, 0.10, seed=1)
    assert tuple(again.patients("labeled")) == choices[0]


def test_split_is_patient_disjoint(corpus):  # noqa: F811
    split = split_labeled(corpus, 0.4, seed=3)
    labeled = set(split.patients("labeled"))
    unlabeled = set(split.patients("unlabeled"))
    test = set(split.patients("test"))
    assert not labeled & unlabeled
    assert not (labeled | unlabeled) & test
    assert test == set(corpus.patients("test"))


@pytest.mark.parametrize("ratio", [0.0, -0.5, 1.5])
def test_split_rejects_bad_ratio(corpus, ratio):  # noqa: F811
    with pytest.raises(ManifestError):
        split_labeled(corpus, ratio, seed=1)


def test_png_round_trip(tmp_path):
    image = np.arange(64 * 64).reshape(64, 64) % 256 / 255.0
    save_image(str(tmp_path / "img.png"), image)
    assert np.array_equal(load_image(str(tmp_path / "img.png")), image)
    mask = (np.arange(64 * 64).reshape(64, 64) % 3).astype(np.int64)
    save_mask(str(tmp_path / "mask.png"), mask)
    assert np.array_equal(load_mask(str(tmp_path / "mask.png"), 2), mask)
    with pytest.raises(ManifestError, match="labels must lie in 0..1"):
        load_mask(str(tmp_path / "mask.png"), 1)


@pytest.mark.parametrize(
    "image",
    [
        np.zeros((4, 32)),
        np.full((16, 16), 1.5),
        np.full((16, 16), np.nan),
        np.zeros((2, 16, 16)),
    ],
)
def test_check_image_rejects_invalid(image):
    with pytest.raises(ValueError):
        check_image(image)


def test_pixel_mean_and_class_set(corpus):  # noqa: F811
    mean = pixel_mean(corpus)
    assert 0.0 < mean < 1.0
    assert class_set(np.array([[0, 2], [2, 0]])) == frozenset({2})


def test_manifest_dataclass_helpers(corpus):  # noqa: F811
    assert isinstance(corpus, DatasetManifest)
    assert corpus.patients() == sorted({e["patient"] for e in corpus.entries})

import json
import logging
import math
import os

from dataclasses import dataclass, field, replace

import numpy as np

from PIL import Image

from refseg.types import ManifestEntry
from refseg.utils import make_rng


logger = logging.getLogger(__name__)


SPLITS = ("labeled", "unlabeled", "test")
MANIFEST_FILE = "manifest.json"
MIN_SIZE = 8


class ManifestError(Exception):
    pass


@dataclass
class DatasetManifest:
    root: str
    num_classes: int
    classes: list
    entries: list = field(default_factory=list)

    def entries_for(self, *splits):
        return [e for e in self.entries if e["split"] in splits]

    def patients(self, *splits):
        entries = self.entries_for(*splits) if splits else self.entries
        return sorted({e["patient"] for e in entries})

    def image_path(self, entry):
        return os.path.join(self.root, entry["image"])

    def mask_path(self, entry):
        if entry["mask"] is None:
            return None
        return os.path.join(self.root, entry["mask"])

    def load_entry(self, entry):
        image = load_image(self.image_path(entry))
        mask = None
        if entry["mask"] is not None:
            mask = load_mask(self.mask_path(entry), self.num_classes)
        return image, mask

    def to_json(self):
        return {
            "num_classes": self.num_classes,
            "classes": list(self.classes),
            "entries": [dict(e) for e in self.entries],
        }


def check_image(image):
    image = np.asarray(image)
    if image.ndim != 2 or min(image.shape) < MIN_SIZE:
        raise ValueError(f"Image must be H×W with H,W >= {MIN_SIZE}")
    if not np.all(np.isfinite(image)):
        raise ValueError("Image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("Image intensities must lie in [0, 1]")
    return image


def check_mask(mask, num_classes, shape=None):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ManifestError("Mask must be H×W")
    if shape is not None and mask.shape != tuple(shape):
        raise ManifestError(
            f"Mask shape {mask.shape} does not match image shape {shape}"
        )
    if mask.size and (mask.min() < 0 or mask.max() > num_classes):
        raise ManifestError(f"Mask labels must lie in 0..{num_classes}")
    return mask


def load_image(path):
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return check_image(pixels)


def load_mask(path, num_classes):
    with Image.open(path) as img:
        labels = np.asarray(img, dtype=np.int64)
    return check_mask(labels, num_classes)


def ensure_parent(path):
    parent = os.path.dirname(path)
    if parent:
        try:
            os.makedirs(parent, exist_ok=True)
        except OSError as e:
            raise ManifestError(f"Unable to create directory {parent}: {e}")


def save_image(path, image):
    ensure_parent(path)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def save_mask(path, mask):
    ensure_parent(path)
    Image.fromarray(np.asarray(mask, dtype=np.uint8)).save(path)


def save_rgb(path, rgb):
    ensure_parent(path)
    pixels = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def _sort_entries(entries):
    return sorted(
        entries, key=lambda e: (e["patient"], os.path.basename(e["image"]))
    )


def _validate_entry(index, raw, root, num_classes):
    if not isinstance(raw, dict):
        raise ManifestError(f"Entry #{index} is not an object")
    name = raw.get("image")
    if not isinstance(name, str) or not name:
        raise ManifestError(f"Entry #{index} has no image file")
    patient = raw.get("patient")
    if not isinstance(patient, str) or not patient:
        raise ManifestError(f"Entry {name!r} has an empty patient id")
    split = raw.get("split")
    if split not in SPLITS:
        raise ManifestError(f"Entry {name!r} has invalid split {split!r}")
    mask = raw.get("mask")
    if mask is not None and not isinstance(mask, str):
        raise ManifestError(f"Entry {name!r} has an invalid mask reference")
    if split in ("labeled", "test") and mask is None:
        raise ManifestError(f"Entry {name!r} is {split} but has no mask")
    for ref in (name, mask):
        if ref is not None and not os.path.exists(os.path.join(root, ref)):
            raise ManifestError(
                f"Entry {name!r} references missing file {ref!r}"
            )
    return ManifestEntry(image=name, mask=mask, patient=patient, split=split)


def load_manifest(path):
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_FILE)
    if not os.path.exists(path):
        raise ManifestError(f"Manifest {path} does not exist")
    root = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"Manifest {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ManifestError(f"Manifest {path} must be a JSON object")
    num_classes = raw.get("num_classes")
    if not isinstance(num_classes, int) or num_classes < 1:
        raise ManifestError("num_classes must be a positive integer")
    classes = raw.get("classes", [])
    if not isinstance(classes, list) or len(classes) != num_classes:
        raise ManifestError("classes must list one name per foreground class")
    raw_entries = raw.get("entries")
    if not isinstance(raw_entries, list):
        raise ManifestError("entries must be a list")
    entries = [
        _validate_entry(i, e, root, num_classes)
        for i, e in enumerate(raw_entries)
    ]
    manifest = DatasetManifest(
        root=root,
        num_classes=num_classes,
        classes=[str(c) for c in classes],
        entries=_sort_entries(entries),
    )
    logger.debug(f"Loaded manifest {path} with {len(entries)} entries")
    return manifest


def write_manifest(manifest, root=None):
    root = root or manifest.root
    path = os.path.join(root, MANIFEST_FILE)
    ensure_parent(path)
    payload = manifest.to_json()
    payload["entries"] = _sort_entries(payload["entries"])
    try:
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise ManifestError(f"Unable to write manifest {path}: {e}")
    return path


# synthetic corpus

CLASS_LEVELS = (0.78, 0.52, 0.93, 0.36)
CLASS_SHAPES = ("ellipse", "polygon", "ellipse", "polygon")


def _patient_style(seed, patient, num_classes):
    rng = make_rng(seed, "patient-style", patient)
    return {
        "background": rng.uniform(0.08, 0.22),
        "levels": [
            CLASS_LEVELS[k] + rng.uniform(-0.04, 0.04)
            for k in range(num_classes)
        ],
        "noise": rng.uniform(0.02, 0.045),
        "scale": rng.uniform(0.85, 1.15),
        "harmonics": rng.uniform(0.03, 0.12, size=(num_classes, 3)),
        "bias": rng.uniform(-0.05, 0.05, size=2),
    }


def _blob(shape, size, center, radius, angle, harmonics, phases):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    cos, sin = math.cos(angle), math.sin(angle)
    u = cos * dx + sin * dy
    v = -sin * dx + cos * dy
    if shape == "ellipse":
        a, b = radius
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    # rounded polygon: star-shaped blob with a smooth radial profile
    theta = np.arctan2(v, u)
    r = np.hypot(u, v)
    profile = np.ones_like(theta)
    for k, (amp, phase) in enumerate(zip(harmonics, phases), start=3):
        profile += amp * np.cos(k * theta + phase)
    return r <= min(radius) * profile


def _draw_slice(rng, style, num_classes, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    image = style["background"] + style["bias"][0] * yy + style["bias"][1] * xx
    mask = np.zeros((size, size), dtype=np.int64)
    crowding = math.sqrt(max(1.0, num_classes / 2.0))
    placed = []
    for k in range(num_classes):
        r1 = size * rng.uniform(0.14, 0.22) * style["scale"] / crowding
        r2 = r1 * rng.uniform(0.7, 1.0)
        lo = 1.1 * r1 + 1.0
        hi = max(size - lo - 1.0, lo)
        center = None
        for _ in range(50):
            candidate = rng.uniform(lo, hi, size=2)
            if all(np.hypot(*(candidate - c)) >= r1 + r for c, r in placed):
                center = candidate
                break
        if center is None:
            center = rng.uniform(lo, hi, size=2)
        placed.append((center, r1))
        region = _blob(
            CLASS_SHAPES[k],
            size,
            center,
            (r1, r2),
            rng.uniform(0, math.pi),
            style["harmonics"][k],
            rng.uniform(0, 2 * math.pi, size=3),
        )
        mask[region] = k + 1
        image[region] = style["levels"][k]
    image = image + rng.normal(0.0, style["noise"], size=image.shape)
    return np.clip(image, 0.0, 1.0), mask


def generate_synthetic(
    seed,
    num_patients,
    slices_per_patient,
    num_classes,
    size,
    root,
    test_fraction=0.2,
):
    """
    Write a blob corpus under root and return its manifest.

    Every slice holds one blob per foreground class; blob style (intensities,
    noise, size, outline harmonics) is fixed per patient so patient-level
    splits are meaningful. The same arguments give a bit-identical corpus.
    """
    if not 1 <= num_classes <= len(CLASS_LEVELS):
        raise ManifestError(f"num_classes must be in [1, {len(CLASS_LEVELS)}]")
    if size < 32:
        raise ManifestError("size must be at least 32")
    if num_patients < 1 or slices_per_patient < 1:
        raise ManifestError("Need at least one patient and one slice")
    if not 0.0 <= test_fraction < 1.0:
        raise ManifestError("test_fraction must lie in [0, 1)")

    patients = [f"P{p:03d}" for p in range(num_patients)]
    n_test = 0
    if test_fraction > 0 and num_patients > 1:
        n_test = min(
            max(1, int(round(test_fraction * num_patients))), num_patients - 1
        )
    order = make_rng(seed, "test-split").permutation(num_patients)
    test_patients = {patients[i] for i in order[:n_test]}

    entries = []
    for p, patient in enumerate(patients):
        style = _patient_style(seed, p, num_classes)
        for s in range(slices_per_patient):
            rng = make_rng(seed, "slice", p, s)
            image, mask = _draw_slice(rng, style, num_classes, size)
            name = f"{patient}_{s:02d}.png"
            image_ref = os.path.join("images", name)
            mask_ref = os.path.join("masks", name)
            save_image(os.path.join(root, image_ref), image)
            save_mask(os.path.join(root, mask_ref), mask)
            entries.append(
                ManifestEntry(
                    image=image_ref,
                    mask=mask_ref,
                    patient=patient,
                    split="test" if patient in test_patients else "labeled",
                )
            )
    manifest = DatasetManifest(
        root=os.path.abspath(root),
        num_classes=num_classes,
        classes=[f"class{k}" for k in range(1, num_classes + 1)],
        entries=_sort_entries(entries),
    )
    write_manifest(manifest)
    logger.info(
        f"Generated {len(entries)} slices for {num_patients} patients "
        f"({n_test} test) under {root}"
    )
    return manifest


def split_labeled(manifest, ratio, seed):
    """
    Mark ceil(ratio · #train patients) patients labeled, the rest unlabeled.

    Test patients are untouched. Unlabeled entries keep their mask reference
    as hidden ground truth.
    """
    if not 0.0 < ratio <= 1.0:
        raise ManifestError(f"Label ratio must lie in (0, 1], got {ratio}")
    patients = manifest.patients("labeled", "unlabeled")
    n_labeled = math.ceil(ratio * len(patients) - 1e-9)
    if n_labeled < 1:
        raise ManifestError(
            f"Ratio {ratio} leaves zero labeled patients out of {len(patients)}"
        )
    rng = make_rng(seed, "label-split")
    chosen = {patients[i] for i in rng.permutation(len(patients))[:n_labeled]}
    entries = []
    for entry in manifest.entries:
        if entry["split"] == "test":
            entries.append(dict(entry))
            continue
        split = "labeled" if entry["patient"] in chosen else "unlabeled"
        if split == "labeled" and entry["mask"] is None:
            raise ManifestError(
                f"Entry {entry['image']!r} cannot be labeled without a mask"
            )
        entries.append(dict(entry, split=split))
    logger.info(
        f"Split {len(patients)} training patients: {n_labeled} labeled, "
        f"{len(patients) - n_labeled} unlabeled"
    )
    return replace(manifest, entries=_sort_entries(entries))


def pixel_mean(manifest, *splits):
    entries = manifest.entries_for(*splits) if splits else manifest.entries
    if not entries:
        return 0.5
    means = [load_image(manifest.image_path(e)).mean() for e in entries]
    return float(np.mean(means))


def binarize(mask, class_id):
    return (np.asarray(mask) == class_id).astype(np.float64)


def class_set(mask):
    return frozenset(int(c) for c in np.unique(mask) if c != 0)


def load_split(manifest, *splits, with_masks=True):
    """Load (entry, image, mask) triples; masks are None when not requested."""
    items = []
    for entry in manifest.entries_for(*splits):
        image = load_image(manifest.image_path(entry))
        mask = None
        if with_masks and entry["mask"] is not None:
            mask = check_mask(
                load_mask(manifest.mask_path(entry), manifest.num_classes),
                manifest.num_classes,
                image.shape,
            )
        items.append((entry, image, mask))
    return items


def entry_stem(entry):
    return os.path.splitext(os.path.basename(entry["image"]))[0]

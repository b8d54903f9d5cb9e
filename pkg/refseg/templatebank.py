import importlib
import json
import logging
import os

from dataclasses import dataclass
from typing import Optional

import numpy as np

from refseg.conf import settings
from refseg.data import (
    check_image,
    class_set,
    load_image,
    load_mask,
    save_image,
    save_mask,
)
from refseg.descriptors.base import DescriptorBackend
from refseg.utils import array_hash, make_rng


logger = logging.getLogger(__name__)


ANY = None
TOP_K = 3
BANK_FILE = "bank.json"
DESCRIPTOR_TOLERANCE = 1e-6


class RetrievalError(Exception):
    pass


class DuplicateTemplate(Exception):
    pass


def get_descriptor_backend(path=None) -> DescriptorBackend:
    module = importlib.import_module(path or settings.DESCRIPTOR_BACKEND)
    return module.DescriptorBackend()


_backend = None


def compute_descriptor(image, backend: Optional[DescriptorBackend] = None):
    global _backend
    if backend is None:
        if _backend is None:
            _backend = get_descriptor_backend()
        backend = _backend
    return backend.compute(check_image(image))


def template_probabilities(similarities, temperature):
    """Temperature softmax over candidate similarities."""
    logits = np.asarray(similarities, dtype=np.float64) / temperature
    logits = logits - logits.max()
    weights = np.exp(logits)
    return weights / weights.sum()


@dataclass
class TemplateEntry:
    image: np.ndarray
    mask: np.ndarray
    descriptor: np.ndarray
    patient: str
    classes: frozenset
    image_hash: str
    name: str = ""


@dataclass
class SampleDraw:
    chosen: int
    candidates: list
    similarities: list
    probabilities: list


class TemplateBank:
    def __init__(
        self, temperature=0.1, backend: Optional[DescriptorBackend] = None
    ):
        if temperature <= 0:
            raise ValueError("Sampling temperature must be positive")
        self.temperature = temperature
        self.entries = []
        self._backend = backend
        self._keys = set()
        self._matrix = None

    def __len__(self):
        return len(self.entries)

    @property
    def descriptors(self):
        if self._matrix is None:
            self._matrix = np.stack([e.descriptor for e in self.entries])
        return self._matrix

    def add_entry(self, entry):
        key = (entry.patient, entry.image_hash)
        if key in self._keys:
            raise DuplicateTemplate(
                f"Template {entry.name or entry.image_hash[:12]} of patient "
                f"{entry.patient} is already in the bank"
            )
        self._keys.add(key)
        self.entries.append(entry)
        self._matrix = None
        return self

    def insert(self, image, mask, patient_id, name=""):
        image = check_image(image)
        if np.shape(mask) != image.shape:
            raise ValueError("Template image and mask shapes differ")
        entry = TemplateEntry(
            image=image,
            mask=np.asarray(mask, dtype=np.int64),
            descriptor=compute_descriptor(image, self._backend),
            patient=patient_id,
            classes=class_set(mask),
            image_hash=array_hash(image),
            name=name,
        )
        return self.add_entry(entry)

    def top_k(self, query, k, class_id=ANY, exclude_patient=None):
        if not self.entries:
            raise RetrievalError("Template bank is empty")
        if k < 1:
            raise ValueError("k must be at least 1")
        eligible = [
            i
            for i, e in enumerate(self.entries)
            if (class_id is ANY or class_id in e.classes)
            and (exclude_patient is None or e.patient != exclude_patient)
        ]
        if not eligible:
            raise RetrievalError(
                f"No template in the bank contains class {class_id}"
                + (
                    f" outside patient {exclude_patient}"
                    if exclude_patient is not None
                    else ""
                )
            )
        similarities = self.descriptors[eligible] @ np.asarray(query)
        ranked = sorted(
            zip(eligible, similarities.tolist()), key=lambda r: (-r[1], r[0])
        )
        return ranked[:k]

    def sample_template(
        self, query, class_id=ANY, seed=0, exclude_patient=None
    ):
        candidates = self.top_k(query, TOP_K, class_id, exclude_patient)
        indices = [i for i, _ in candidates]
        similarities = [s for _, s in candidates]
        probabilities = template_probabilities(similarities, self.temperature)
        pick = make_rng(seed).choice(len(indices), p=probabilities)
        draw = SampleDraw(
            chosen=indices[pick],
            candidates=indices,
            similarities=similarities,
            probabilities=probabilities.tolist(),
        )
        logger.debug(f"Template draw class={class_id} seed={seed}: {draw}")
        return draw

    def save(self, directory):
        records = []
        for i, entry in enumerate(self.entries):
            stem = entry.name or f"template_{i:04d}"
            image_ref = os.path.join("images", f"{stem}.png")
            mask_ref = os.path.join("masks", f"{stem}.png")
            save_image(os.path.join(directory, image_ref), entry.image)
            save_mask(os.path.join(directory, mask_ref), entry.mask)
            records.append(
                {
                    "image": image_ref,
                    "mask": mask_ref,
                    "patient": entry.patient,
                    "name": entry.name,
                    "classes": sorted(entry.classes),
                    "descriptor": [repr(float(v)) for v in entry.descriptor],
                }
            )
        path = os.path.join(directory, BANK_FILE)
        with open(path, "w") as f:
            json.dump(
                {"temperature": self.temperature, "entries": records},
                f,
                indent=2,
                sort_keys=True,
            )
            f.write("\n")
        logger.info(
            f"Saved template bank with {len(self)} entries to {directory}"
        )
        return path

    @classmethod
    def load(cls, directory, backend=None):
        with open(os.path.join(directory, BANK_FILE), "r") as f:
            raw = json.load(f)
        bank = cls(temperature=raw["temperature"], backend=backend)
        for record in raw["entries"]:
            image = load_image(os.path.join(directory, record["image"]))
            mask = load_mask(
                os.path.join(directory, record["mask"]),
                max(record["classes"], default=0),
            )
            bank.insert(image, mask, record["patient"], name=record["name"])
            stored = np.array([float(v) for v in record["descriptor"]])
            if np.max(np.abs(stored - bank.entries[-1].descriptor)) > (
                DESCRIPTOR_TOLERANCE
            ):
                raise RetrievalError(
                    f"Stored descriptor of {record['image']} does not match "
                    f"the descriptor backend"
                )
        return bank


def build_bank(manifest, split="labeled", temperature=0.1, backend=None):
    """Insert every image/mask pair of a split, in manifest order."""
    bank = TemplateBank(temperature=temperature, backend=backend)
    for entry in manifest.entries_for(split):
        image, mask = manifest.load_entry(entry)
        stem = os.path.splitext(os.path.basename(entry["image"]))[0]
        bank.insert(image, mask, entry["patient"], name=stem)
    if not len(bank):
        raise RetrievalError(f"Split {split!r} has no entries for the bank")
    logger.info(f"Built template bank from {len(bank)} {split} slices")
    return bank

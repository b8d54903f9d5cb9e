import enum

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from scipy import ndimage

from refseg.utils import make_rng


POINT_SIGMA = 2.0
MAX_POINTS = 5


class PromptKind(str, enum.Enum):
    NONE = "none"
    PROB_MAP = "prob_map"
    BOX = "box"
    POINTS = "points"


@dataclass
class SpatialPrompt:
    """
    Spatial cue for the assistant's decoder.

    raster: H×W probabilities for PROB_MAP; box: inclusive corners
    (top, left, bottom, right); points: (row, col, label) with label 1 for
    positive and 0 for negative cues.
    """

    kind: PromptKind = PromptKind.NONE
    raster: Optional[np.ndarray] = None
    box: Optional[tuple] = None
    points: list = field(default_factory=list)

    def __post_init__(self):
        self.kind = PromptKind(self.kind)
        if self.kind is PromptKind.PROB_MAP:
            if self.raster is None:
                raise ValueError("PROB_MAP prompt needs a raster")
            raster = np.asarray(self.raster, dtype=np.float64)
            if raster.min() < 0.0 or raster.max() > 1.0:
                raise ValueError("Probability raster must lie in [0, 1]")
            self.raster = raster
        if self.kind is PromptKind.BOX and self.box is None:
            raise ValueError("BOX prompt needs corners")

    @property
    def is_empty(self):
        return self.kind is PromptKind.NONE

    def rasterize(self, height, width):
        """Soft H×W mask for the decoder, or None for an empty prompt."""
        if self.kind is PromptKind.NONE:
            return None
        if self.kind is PromptKind.PROB_MAP:
            if self.raster.shape != (height, width):
                raise ValueError("Probability raster does not match image size")
            return self.raster
        if self.kind is PromptKind.BOX:
            top, left, bottom, right = self.box
            inside = 0 <= top <= bottom < height and 0 <= left <= right < width
            if not inside:
                raise ValueError(
                    f"Box {self.box} outside a {height}×{width} image"
                )
            raster = np.zeros((height, width))
            raster[top : bottom + 1, left : right + 1] = 1.0
            return raster
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        raster = np.zeros((height, width))
        for row, col, label in self.points:
            if label > 0:
                bump = np.exp(
                    -((yy - row) ** 2 + (xx - col) ** 2) / (2 * POINT_SIGMA**2)
                )
                raster = np.maximum(raster, bump)
        return raster


NO_PROMPT = SpatialPrompt()


def bounding_box(binary):
    rows = np.flatnonzero(binary.any(axis=1))
    cols = np.flatnonzero(binary.any(axis=0))
    if rows.size == 0:
        return None
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def simulate_prompt(target, kind, seed):
    """
    Degraded version of a binary target, standing in for a teacher
    prediction while the assistant is pretrained.
    """
    kind = PromptKind(kind)
    rng = make_rng(seed)
    target = np.asarray(target, dtype=np.float64)
    h, w = target.shape
    if kind is PromptKind.NONE:
        return NO_PROMPT
    if kind is PromptKind.PROB_MAP:
        dy, dx = rng.integers(-2, 3, size=2)
        shifted = np.roll(target, (int(dy), int(dx)), axis=(0, 1))
        soft = ndimage.gaussian_filter(shifted, rng.uniform(0.5, 2.0))
        soft = soft + rng.normal(0.0, 0.05, size=soft.shape)
        soft = np.clip(soft, 0.0, 1.0)
        return SpatialPrompt(PromptKind.PROB_MAP, raster=soft)
    box = bounding_box(target > 0.5)
    if box is None:
        return NO_PROMPT
    if kind is PromptKind.BOX:
        jitter = rng.integers(-2, 3, size=4)
        top = int(np.clip(box[0] + jitter[0], 0, h - 1))
        left = int(np.clip(box[1] + jitter[1], 0, w - 1))
        bottom = int(np.clip(box[2] + jitter[2], top, h - 1))
        right = int(np.clip(box[3] + jitter[3], left, w - 1))
        return SpatialPrompt(PromptKind.BOX, box=(top, left, bottom, right))
    rows, cols = np.nonzero(target > 0.5)
    count = min(MAX_POINTS, rows.size)
    picks = rng.choice(rows.size, size=count, replace=False)
    points = [(int(rows[i]), int(cols[i]), 1) for i in sorted(picks)]
    return SpatialPrompt(PromptKind.POINTS, points=points)

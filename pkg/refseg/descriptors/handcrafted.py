import numpy as np
import torch
import torch.nn.functional as F


GRID = 8
INTENSITY_BINS = 32
ORIENTATION_BINS = 32


def _unit(vector):
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0 else vector


class DescriptorBackend:
    """
    Deterministic 128-d descriptor: 8×8 mean-pooled intensities, a 32-bin
    intensity histogram and a 32-bin magnitude-weighted gradient-orientation
    histogram, concatenated and L2-normalized as one vector.
    """

    dim = GRID * GRID + INTENSITY_BINS + ORIENTATION_BINS

    def compute(self, image):
        image = np.asarray(image, dtype=np.float64)
        pooled = F.adaptive_avg_pool2d(
            torch.as_tensor(image)[None, None], (GRID, GRID)
        )
        pooled = pooled.reshape(-1).numpy()

        hist, _ = np.histogram(image, bins=INTENSITY_BINS, range=(0.0, 1.0))
        hist = hist.astype(np.float64) / image.size

        gy, gx = np.gradient(image)
        magnitude = np.hypot(gx, gy)
        if magnitude.sum() > 0:
            angles = np.arctan2(gy, gx)
            orientation, _ = np.histogram(
                angles,
                bins=ORIENTATION_BINS,
                range=(-np.pi, np.pi),
                weights=magnitude,
            )
            orientation = orientation / magnitude.sum()
        else:
            # constant image: uniform by convention
            orientation = np.full(ORIENTATION_BINS, 1.0 / ORIENTATION_BINS)

        return _unit(np.concatenate([pooled, hist, orientation]))

from typing import Protocol

import numpy as np


class DescriptorBackend(Protocol):
    dim: int

    def compute(self, image: np.ndarray) -> np.ndarray:
        """Return an L2-normalized descriptor vector of length dim."""

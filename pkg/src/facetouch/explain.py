"""Where Grad-CAM looks: attention inside vs outside the head-and-hands region."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import FaceTouchModel, gradcam
from .synthdata import FigureSpec, figure_mask


@dataclass
class Focus:
    index: int
    inside: float
    outside: float

    @property
    def focused(self) -> bool:
        return self.inside > self.outside


def attention_focus(cam: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    mask = mask.astype(bool)
    if mask.all() or not mask.any():
        raise ValueError("region mask must split the image")
    return float(cam[mask].mean()), float(cam[~mask].mean())


def positive_focus(model: FaceTouchModel, images, labels, figures: list[FigureSpec],
                   threshold: float = 0.5, limit: int | None = None, layer: str | None = None) -> list[Focus]:
    """Focus of the touch-class map on correctly classified positives, in index order."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    probs = model.predict_proba(images)
    picked = np.flatnonzero((labels == 1) & (probs >= threshold))
    if limit is not None:
        picked = picked[:limit]
    out = []
    for i in picked:
        h, w = images[i].shape
        cam = gradcam(model, images[i], 1, layer)
        out.append(Focus(int(i), *attention_focus(cam, figure_mask(figures[i], h, w))))
    return out

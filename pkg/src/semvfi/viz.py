"""Diagnostic images: shared-basis PCA maps, offset heatmaps, input overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from .dsf import offset_magnitude
from .semantics import SemanticFeatures, pca_visualize

HEATMAP_CMAP = "inferno"


def save_png(array: np.ndarray, path: str | Path) -> Path:
    """Write an HWC (or HW) array in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.asarray(array, dtype=np.float32), 0.0, 1.0)
    img = Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path


def overlay_frames(i0: torch.Tensor, i1: torch.Tensor) -> np.ndarray:
    """Mean of the two inputs, as used in qualitative motion panels."""
    blend = 0.5 * (i0 + i1)
    return blend[0].permute(1, 2, 0).detach().cpu().numpy()


def pca_panel(f_a: SemanticFeatures, f_b: SemanticFeatures, which: str = "deep") -> np.ndarray:
    """Side-by-side shared-basis PCA maps for two frames."""
    map_a, map_b = pca_visualize(f_a, f_b, k=3, which=which)
    gap = np.ones((map_a.shape[0], 2, 3), dtype=map_a.dtype)
    return np.concatenate([map_a, gap, map_b], axis=1)


def offset_heatmap(offsets: torch.Tensor, groups: int) -> np.ndarray:
    """Colormapped per-pixel offset magnitude, normalized to [0, 1]."""
    mag = offset_magnitude(offsets, groups)[0, 0].detach().cpu().numpy()
    peak = mag.max()
    norm = mag / peak if peak > 0 else mag
    return np.asarray(colormaps[HEATMAP_CMAP](norm))[..., :3]

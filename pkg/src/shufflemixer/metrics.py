"""Overlap, change-region and surface-distance metrics for binary masks.

Conventions: two empty masks score 1 on every overlap metric; a one-sided
empty comparison scores 0.  HD95 is undefined (``nan``) when either mask is
empty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int


def _pair(pred, gt):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def confusion(pred, gt) -> Confusion:
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Confusion(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def dice(pred, gt) -> float:
    c = confusion(pred, gt)
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def jaccard(pred, gt) -> float:
    c = confusion(pred, gt)
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def precision(pred, gt) -> float:
    c = confusion(pred, gt)
    return _ratio(c.tp, c.tp + c.fp)


def recall(pred, gt) -> float:
    c = confusion(pred, gt)
    return _ratio(c.tp, c.tp + c.fn)


def doc(pred, initial, target) -> float:
    """Overlap of predicted vs. true change regions relative to ``initial``.

    ``|(P - M1) & (M2 - M1)| / |(P - M1) | (M2 - M1)|``.
    """
    p, m1 = _pair(pred, initial)
    _, m2 = _pair(pred, target)
    pc = p & ~m1
    tc = m2 & ~m1
    return _ratio(int(np.count_nonzero(pc & tc)), int(np.count_nonzero(pc | tc)))


_SIX = ndimage.generate_binary_structure(3, 1)


def surface(mask) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-connected background neighbour.

    Voxels outside the grid count as background.
    """
    m = np.asarray(mask).astype(bool)
    structure = ndimage.generate_binary_structure(m.ndim, 1)
    eroded = ndimage.binary_erosion(m, structure=structure, border_value=0)
    return m & ~eroded


def surface_distances(pred, gt, spacing: float = 1.0) -> np.ndarray:
    """Nearest-surface distances from each surface voxel of one mask to the other, both ways."""
    p, g = _pair(pred, gt)
    sp = np.argwhere(surface(p)).astype(np.float64) * spacing
    sg = np.argwhere(surface(g)).astype(np.float64) * spacing
    d_pg = cKDTree(sg).query(sp)[0]
    d_gp = cKDTree(sp).query(sg)[0]
    return np.concatenate([d_pg, d_gp])


def hd95(pred, gt, spacing: float = 1.0) -> float:
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        return float("nan")
    return float(np.percentile(surface_distances(p, g, spacing), 95, method="linear"))


def case_metrics(pred, gt, spacing: float = 1.0, initial=None) -> dict[str, float]:
    out = {
        "dice": dice(pred, gt),
        "jaccard": jaccard(pred, gt),
        "precision": precision(pred, gt),
        "recall": recall(pred, gt),
        "hd95": hd95(pred, gt, spacing),
    }
    if initial is not None:
        out["doc"] = doc(pred, initial, gt)
    return out

"""Deterministic synthetic volumes for desk-scale training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TASKS = ("binary-sphere", "multi-blob")


@dataclass(frozen=True)
class SynthSpec:
    task: str = "binary-sphere"
    count: int = 4
    side: int = 32
    classes: int = 1  # foreground classes (multi-blob only)
    noise: float = 0.02
    edge: float = 1.0  # soft-edge width of the sphere profile, in voxels


class SynthError(RuntimeError):
    pass


def _grid(side: int) -> np.ndarray:
    ax = np.arange(side, dtype=np.float64)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


def _normalize(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    return (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)


def sphere_case(rng: np.random.Generator, side: int, noise: float, edge: float):
    r = rng.uniform(side / 4, side / 3)
    c = rng.uniform(r + 1, side - r - 1, size=3)
    dist = np.linalg.norm(_grid(side) - c, axis=-1)
    profile = 1.0 / (1.0 + np.exp(-(r - dist) / edge))
    vol = _normalize(profile + noise * rng.standard_normal(profile.shape))
    return vol, (dist < r).astype(np.uint8)


def blob_case(rng: np.random.Generator, side: int, classes: int, noise: float):
    grid = _grid(side)
    intensity = np.zeros((side,) * 3)
    label = np.zeros((side,) * 3, dtype=np.uint8)
    best = np.zeros((side,) * 3)
    for k in range(1, classes + 1):
        sigma = rng.uniform(side / 16, side / 8)
        c = rng.uniform(2 * sigma, side - 2 * sigma, size=3)
        g = np.exp(-np.sum((grid - c) ** 2, axis=-1) / (2 * sigma ** 2))
        intensity += g * k / classes
        inside = (g > 0.5) & (g > best)
        label[inside] = k
        best = np.maximum(best, np.where(g > 0.5, g, 0.0))
    vol = _normalize(intensity + noise * rng.standard_normal(intensity.shape))
    return vol, label


def synth_dataset(spec: SynthSpec, seed: int, max_retries: int = 10):
    """``count`` pairs of (``(side, side, side, 1)`` float32 volume, uint8 label)."""
    if spec.task not in TASKS:
        raise ValueError(f"unknown task {spec.task!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    cases = []
    for _ in range(spec.count):
        for _attempt in range(max_retries):
            if spec.task == "binary-sphere":
                vol, lab = sphere_case(rng, spec.side, spec.noise, spec.edge)
            else:
                vol, lab = blob_case(rng, spec.side, spec.classes, spec.noise)
            if lab.any() and (spec.task == "binary-sphere" or len(np.unique(lab)) == spec.classes + 1):
                break
        else:
            raise SynthError(f"could not generate a non-empty mask in {max_retries} attempts")
        cases.append((vol[..., None].astype(np.float32), lab))
    return cases

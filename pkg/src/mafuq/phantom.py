"""Synthetic volumes: the smooth Gaussian phantom and a brain-like multi-sequence cohort."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .volume import Volume3

SEQUENCES = ("t1n", "t2w", "t2f")

# (center as fraction of extent, sigma as fraction of extent, amplitude)
_SMOOTH_BLOBS = (
    ((0.50, 0.50, 0.50), 0.22, 1.0),
    ((0.38, 0.60, 0.45), 0.15, 0.6),
    ((0.62, 0.42, 0.58), 0.12, 0.8),
)


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def smooth_phantom(size: int = 64) -> Volume3:
    """Sum of three low-frequency 3D Gaussians on a ``size**3`` grid."""
    dims = (size, size, size)
    x, y, z = _grid(dims)
    out = np.zeros(dims)
    for center, sigma, amp in _SMOOTH_BLOBS:
        c = [f * (size - 1) for f in center]
        s = sigma * size
        out += amp * np.exp(-((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) / (2 * s * s))
    return Volume3(out.astype(np.float32))


def inscribed_sphere(dims) -> np.ndarray:
    """Boolean mask of the largest sphere centered on the grid center."""
    x, y, z = _grid(dims)
    c = [(n - 1) / 2.0 for n in dims]
    r = min(c)
    return (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2 <= r * r


@dataclass
class SyntheticCase:
    case_id: str
    t1n: Volume3
    t2w: Volume3
    t2f: Volume3
    t1c: Volume3
    seg: Volume3
    noise_sigma: float

    @property
    def inputs(self):
        return (self.t1n, self.t2w, self.t2f)


def synthetic_case(case_id: str, size: int = 64, seed: int = 0, noise_sigma: float = 0.1) -> SyntheticCase:
    """A skull-stripped, brain-like case with a small enhancing tumor.

    Background is exactly 0. T1C equals T1N outside the tumor and is
    brightened inside it, mimicking contrast uptake.
    """
    rng = np.random.default_rng(seed)
    dims = (size, size, size)
    x, y, z = _grid(dims)
    c = (size - 1) / 2.0
    radii = size * np.array([0.40, 0.44, 0.36]) * rng.uniform(0.95, 1.05, 3)
    r2 = ((x - c) / radii[0]) ** 2 + ((y - c) / radii[1]) ** 2 + ((z - c) / radii[2]) ** 2
    brain = r2 <= 1.0

    tissue = np.zeros(dims)
    for _ in range(4):
        mu = c + rng.uniform(-0.2, 0.2, 3) * size
        s = rng.uniform(0.10, 0.20) * size
        tissue += rng.uniform(0.3, 1.0) * np.exp(-((x - mu[0]) ** 2 + (y - mu[1]) ** 2 + (z - mu[2]) ** 2) / (2 * s * s))
    tissue += 0.6 * (1.0 - r2)

    tc = c + rng.uniform(-0.15, 0.15, 3) * size
    tr = rng.uniform(0.06, 0.09) * size
    tumor = ((x - tc[0]) ** 2 + (y - tc[1]) ** 2 + (z - tc[2]) ** 2 <= tr * tr) & brain

    t1n = np.where(brain, 400.0 + 300.0 * tissue, 0.0)
    t2w = np.where(brain, 900.0 - 250.0 * tissue + 200.0 * tumor, 0.0)
    t2f = np.where(brain, 600.0 + 120.0 * tissue + 350.0 * tumor, 0.0)
    t1c = np.where(tumor, t1n + 500.0, t1n)
    seg = np.where(tumor, 1.0, 0.0)
    f = lambda a: Volume3(a.astype(np.float32))
    return SyntheticCase(case_id, f(t1n), f(t2w), f(t2f), f(t1c), f(seg), float(noise_sigma))


def synthetic_cohort(n_cases: int = 20, size: int = 64, seed: int = 0,
                     sigma_range=(0.02, 0.3)) -> List[SyntheticCase]:
    """``n_cases`` cases with noise levels spread evenly over ``sigma_range``."""
    sigmas = np.linspace(sigma_range[0], sigma_range[1], n_cases)
    return [synthetic_case(f"case_{i:03d}", size, seed * 1000 + i, float(s)) for i, s in enumerate(sigmas)]

"""Seeded synthetic phantoms with known ground truth.

An object is a star-shaped blob around the volume center whose radius
varies smoothly with direction. Optional structures at matched intensity
touch its boundary: a planar wall slab or a tubular vessel.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import component_nearest, connected_components

__all__ = ["PhantomParams", "Phantom", "CATEGORIES", "generate", "generate_dataset"]

ISOLATED = "isolated"
WALL = "wall"
VESSEL = "vessel"
LOW_CONTRAST = "low_contrast"
CATEGORIES = (ISOLATED, WALL, LOW_CONTRAST)


@dataclass
class PhantomParams:
    """Phantom construction parameters.

    ``amplitude`` is the relative radial bump size, so the boundary radius
    stays within ``radius * (1 +/- amplitude)``.
    """

    dims: tuple = (41, 41, 41)
    radius_range: tuple = (6.0, 12.0)
    amplitude: float = 0.3
    n_lobes: int = 3
    lobe_sharpness: float = 3.0
    contrast: float = 1.0
    noise: float = 0.2
    wall: bool = False
    wall_thickness: float = 4.0
    vessel: bool = False
    vessel_radius: float = 2.0
    category: str = ISOLATED
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 5:
            raise ValueError(f"dims must be three sizes >= 5, got {self.dims}")
        lo, hi = (float(r) for r in self.radius_range)
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius range {self.radius_range}")
        if hi > min(self.dims) / 2 - 2:
            raise ValueError(f"radius {hi} exceeds min(dims)/2 - 2 = {min(self.dims) / 2 - 2}")
        if not 0 <= self.amplitude <= 0.5:
            raise ValueError(f"amplitude must lie in [0, 0.5], got {self.amplitude}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


@dataclass
class Phantom:
    image: np.ndarray
    gt: np.ndarray
    category: str
    seed: int
    radius: float
    params: PhantomParams = field(repr=False, default=None)


def _unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _radius_field(offsets, dist, radius, amplitude, axes, weights, sharpness):
    with np.errstate(invalid="ignore", divide="ignore"):
        d = offsets / dist[..., None]
    d = np.nan_to_num(d)
    bump = np.zeros(dist.shape)
    for a, w in zip(axes, weights):
        bump += w * np.exp(sharpness * (d @ a - 1.0))
    return radius * (1.0 + amplitude * np.clip(bump, -1.0, 1.0))


def generate(params):
    """Build one phantom; every random draw comes from ``params.seed``.

    Returns
    -------
    Phantom
        Image ``contrast * gt`` (max-combined with any wall or vessel) plus
        Gaussian noise, and the ground-truth mask.
    """
    rng = np.random.Generator(np.random.PCG64(params.seed))
    lo, hi = params.radius_range
    radius = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    axes = _unit(rng, params.n_lobes)
    weights = rng.uniform(-1.0, 1.0, size=params.n_lobes)
    center = (np.asarray(params.dims, dtype=np.float64) - 1) / 2
    grid = np.indices(params.dims, dtype=np.float64)
    offsets = np.moveaxis(grid, 0, -1) - center
    dist = np.linalg.norm(offsets, axis=-1)
    r = _radius_field(offsets, dist, radius, params.amplitude, axes, weights, params.lobe_sharpness)
    gt = dist <= r
    comps = connected_components(gt)
    gt = comps.labels == component_nearest(comps.labels, center)

    image = params.contrast * gt.astype(np.float64)
    pts = offsets[gt]
    if params.wall:
        n = _unit(rng, 1)[0]
        h = float((pts @ n).max())
        proj = offsets @ n
        slab = (proj > h) & (proj <= h + params.wall_thickness)
        image = np.maximum(image, params.contrast * slab)
    if params.vessel:
        n = _unit(rng, 1)[0]
        t = np.cross(n, _unit(rng, 1)[0])
        t /= np.linalg.norm(t)
        h = float((pts @ n).max())
        anchor = (h + params.vessel_radius - 0.5) * n
        rel = offsets - anchor
        radial = rel - (rel @ t)[..., None] * t
        tube = np.linalg.norm(radial, axis=-1) <= params.vessel_radius
        image = np.maximum(image, params.contrast * tube)
    if params.noise > 0:
        image = image + rng.normal(0.0, params.noise, size=image.shape)
    return Phantom(image, gt, params.category, params.seed, radius, params)


def _with_category(template, category, seed):
    p = replace(template, category=category, seed=seed, wall=template.wall, vessel=template.vessel)
    if category == WALL:
        p.wall = True
    elif category == VESSEL:
        p.vessel = True
    elif category == LOW_CONTRAST:
        p.contrast = template.contrast * 0.5
    elif category != ISOLATED:
        raise ValueError(f"unknown category {category!r}")
    return p


def generate_dataset(n_train, n_val, n_test, template=None, seed=0, categories=CATEGORIES):
    """Three phantom lists drawn from disjoint seed streams.

    Categories are assigned round-robin within each split.
    """
    counts = (n_train, n_val, n_test)
    if min(counts) < 1:
        raise ValueError("every split needs at least one example")
    template = template or PhantomParams()
    categories = tuple(categories)
    if not categories:
        raise ValueError("need at least one category")
    streams = np.random.SeedSequence(seed).spawn(3)
    seeds = [s.generate_state(n, np.uint64) for s, n in zip(streams, counts)]
    flat = np.concatenate(seeds)
    if len(np.unique(flat)) != len(flat):
        raise RuntimeError("seed collision across splits")
    return tuple(
        [generate(_with_category(template, categories[i % len(categories)], int(s))) for i, s in enumerate(split)]
        for split in seeds
    )

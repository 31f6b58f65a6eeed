"""Seed-based initial segmentation by local thresholding and radius trimming."""
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .evaluation import jaccard
from .grid import as_field, as_mask, component_nearest, connected_components, gaussian_smooth, trilinear

__all__ = [
    "InitParams",
    "sphere_directions",
    "ray_radii",
    "initialize",
    "grid_search",
    "SeedInitializer",
    "SIGMA_GRID",
    "P_R_GRID",
]

SIGMA_GRID = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0)
P_R_GRID = (50.0, 55.0, 60.0, 65.0, 70.0, 75.0, 80.0)
RAY_STEP = 0.25


@dataclass
class InitParams:
    """Initialization parameters.

    ``seed_point`` defaults to the volume center. With ``invert`` the
    object is assumed darker than its surroundings.
    """

    sigma: float = 4.0
    p_r: float = 70.0
    n_rays: int = 1024
    seed_point: tuple = None
    invert: bool = False

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not 0 < self.p_r <= 100:
            raise ValueError(f"p_r must lie in (0, 100], got {self.p_r}")
        if self.n_rays < 32:
            raise ValueError(f"n_rays must be >= 32, got {self.n_rays}")


def sphere_directions(n):
    """``n`` unit vectors on a spherical Fibonacci lattice, shape (n, 3)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _seed(shape, seed_point):
    if seed_point is None:
        return (np.asarray(shape, dtype=np.float64) - 1) / 2
    p = np.asarray(seed_point, dtype=np.float64)
    if p.shape != (3,) or np.any(p < 0) or np.any(p > np.asarray(shape) - 1):
        raise ValueError(f"seed point {seed_point} lies outside the volume {shape}")
    return p


def ray_radii(mask, seed, directions, step=RAY_STEP):
    """Distance from ``seed`` to the first ray sample where the mask falls below 1/2.

    The mask is sampled trilinearly every ``step`` voxels; leaving the volume
    also ends a ray.
    """
    mask = as_mask(mask)
    hi = np.asarray(mask.shape, dtype=np.float64) - 1
    t = np.arange(0.0, np.linalg.norm(hi) + 2 * step, step)
    pts = seed[None, None, :] + t[None, :, None] * directions[:, None, :]
    inside = np.all((pts >= 0) & (pts <= hi), axis=2)
    vals = np.zeros(inside.shape)
    vals[inside] = trilinear(mask.astype(np.float64), pts[inside])
    stop = vals < 0.5
    first = np.argmax(stop, axis=1)
    first[~stop.any(axis=1)] = len(t) - 1
    return t[first]


def _nearest_component(b, seed):
    comps = connected_components(b)
    lab = component_nearest(comps.labels, seed)
    if lab == 0:
        return np.zeros_like(b)
    return comps.labels == lab


def _threshold_stage(m, sigma, seed, invert, directions):
    sm = gaussian_smooth(m, sigma)
    b = m < sm if invert else m > sm
    comp = _nearest_component(b, seed)
    radii = ray_radii(comp, seed, directions) if comp.any() else np.zeros(len(directions))
    return comp, radii


def _trim_stage(comp, radii, p_r, seed):
    r_star = np.percentile(radii, p_r)
    grid = np.indices(comp.shape, dtype=np.float64)
    d2 = sum((grid[a] - seed[a]) ** 2 for a in range(3))
    out = _nearest_component(comp & (d2 <= r_star * r_star), seed)
    if not out.any():
        out = np.zeros(comp.shape, dtype=bool)
        out[tuple(np.round(seed).astype(int))] = True
    return out


def _check_image(m):
    m = as_field(m)
    if not np.ptp(m) > 0:
        raise ValueError("cannot initialize on a constant image")
    return m


def initialize(m, params=None):
    """Initial segmentation of image ``m`` around a seed point.

    The image is thresholded against its Gaussian-smoothed copy, reduced to
    the connected component nearest the seed, trimmed to the ball whose
    radius is the ``p_r`` percentile of the ray lengths from the seed, and
    reduced to the nearest component again. An empty result falls back to
    the seed voxel alone.
    """
    params = params or InitParams()
    m = _check_image(m)
    seed = _seed(m.shape, params.seed_point)
    dirs = sphere_directions(params.n_rays)
    comp, radii = _threshold_stage(m, params.sigma, seed, params.invert, dirs)
    return _trim_stage(comp, radii, params.p_r, seed)


def grid_search(dataset, sigma_grid=SIGMA_GRID, p_r_grid=P_R_GRID, seed_points=None, n_rays=1024, invert=False):
    """Pick ``(sigma, p_r)`` maximizing mean Jaccard against the ground truth.

    Parameters
    ----------
    dataset : sequence of (image, gt) pairs
    sigma_grid, p_r_grid : sequences of float
    seed_points : sequence, optional
        One seed per example; volume centers by default.

    Returns
    -------
    sigma, p_r : float
        Best pair; ties go to the smaller sigma, then the smaller p_r.
    table : list of (sigma, p_r, mean_jaccard)
        In grid order, sigma outermost.
    """
    dataset = list(dataset)
    if not dataset or len(sigma_grid) == 0 or len(p_r_grid) == 0:
        raise ValueError("dataset and both grids must be non-empty")
    for p in p_r_grid:
        InitParams(p_r=p)
    if seed_points is None:
        seed_points = [None] * len(dataset)
    dirs = sphere_directions(n_rays)
    scores = np.zeros((len(sigma_grid), len(p_r_grid)))
    for (m, gt), sp in zip(dataset, seed_points):
        m = _check_image(m)
        gt = as_mask(gt)
        seed = _seed(m.shape, sp)
        for a, sigma in enumerate(sigma_grid):
            comp, radii = _threshold_stage(m, sigma, seed, invert, dirs)
            for b, p_r in enumerate(p_r_grid):
                scores[a, b] += jaccard(_trim_stage(comp, radii, p_r, seed), gt)
    scores /= len(dataset)
    table = [
        (float(s), float(p), float(scores[a, b]))
        for a, s in enumerate(sigma_grid)
        for b, p in enumerate(p_r_grid)
    ]
    best = max(table, key=lambda row: (row[2], -row[0], -row[1]))
    return best[0], best[1], table


class SeedInitializer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` runs the grid search, ``transform`` initializes.

    Parameters
    ----------
    sigma, p_r : float
        Used by ``transform`` when the estimator was not fitted.
    sigma_grid, p_r_grid : sequences of float
    n_rays : int
    invert : bool
    """

    def __init__(self, sigma=4.0, p_r=70.0, sigma_grid=SIGMA_GRID, p_r_grid=P_R_GRID, n_rays=1024, invert=False):
        self.sigma = sigma
        self.p_r = p_r
        self.sigma_grid = sigma_grid
        self.p_r_grid = p_r_grid
        self.n_rays = n_rays
        self.invert = invert

    def fit(self, X, y, seed_points=None):
        self.sigma_, self.p_r_, self.table_ = grid_search(
            list(zip(X, y)), self.sigma_grid, self.p_r_grid, seed_points, self.n_rays, self.invert
        )
        return self

    def transform(self, X, seed_points=None):
        sigma = getattr(self, "sigma_", self.sigma)
        p_r = getattr(self, "p_r_", self.p_r)
        if seed_points is None:
            seed_points = [None] * len(X)
        return [
            initialize(m, InitParams(sigma, p_r, self.n_rays, sp, self.invert))
            for m, sp in zip(X, seed_points)
        ]

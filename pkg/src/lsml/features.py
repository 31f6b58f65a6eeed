"""Shape and image features of a level-set iterate, and the two feature maps.

Feature Map 1 (``"FM1"``) has ``10 + 4 * len(sigmas)`` columns (18 for the
default scales 0 and 3); Feature Map 2 (``"FM2"``) extends it to
``19 + 45 * len(sigmas)`` columns (109 by default).

Global quantities are computed once per call; per-row work is vectorized
over the coordinate array, so row order always follows ``coords``.
"""
import csv
from dataclasses import dataclass

import numpy as np

from .grid import (
    DimensionError,
    as_field,
    central_gradient,
    gaussian_smooth,
    gradient_norm,
    interface_mask,
    trilinear,
)

__all__ = [
    "FM1",
    "FM2",
    "DEFAULT_SIGMAS",
    "N_RAY_SAMPLES",
    "GlobalShape",
    "GlobalImage",
    "SliceAreas",
    "FeatureMatrix",
    "ImageScales",
    "global_shape",
    "global_image",
    "slice_areas",
    "local_shape",
    "local_image",
    "assemble",
    "column_names",
    "n_columns",
    "write_csv",
]

FM1 = "FM1"
FM2 = "FM2"
DEFAULT_SIGMAS = (0.0, 3.0)
N_RAY_SAMPLES = 10
_EPS = 1e-8


@dataclass
class GlobalShape:
    volume: float
    length: float
    isoperimetric: float
    moments: np.ndarray  # p=1 (i, j, k) then p=2 (i, j, k)
    com: np.ndarray
    dist_mean: float
    dist_std: float
    dist_max: float
    degenerate: bool = False


@dataclass
class GlobalImage:
    mean_inside: float
    std_inside: float
    avg_edge: float
    mean_on_boundary: float
    degenerate: bool = False


@dataclass
class SliceAreas:
    areas: tuple
    changes: tuple


@dataclass
class FeatureMatrix:
    map_id: str
    coords: np.ndarray
    values: np.ndarray
    columns: list

    @property
    def shape(self):
        return self.values.shape


def _heaviside(u):
    return (u > 0).astype(np.float64)


def _boundary_density(u):
    # |D H(u)| with centered differences; the boundary slab contributes 0.
    return gradient_norm(_heaviside(u), boundary_mode="zero")


def _format_sigma(s):
    return f"s{float(s):g}"


def slice_areas(u):
    """Per-axis slice areas of ``{u > 0}`` and their centered absolute changes."""
    h = _heaviside(as_field(u))
    areas = (h.sum(axis=(1, 2)), h.sum(axis=(0, 2)), h.sum(axis=(0, 1)))
    changes = []
    for a in areas:
        p = np.pad(a, 1, mode="edge")
        changes.append(0.5 * np.abs(p[2:] - p[:-2]))
    return SliceAreas(areas=areas, changes=tuple(changes))


def global_shape(u, density=None, sa=None):
    """Volume, boundary length, isoperimetric ratio, moments and COM statistics.

    An empty positive region yields zeros, the volume center as COM and
    ``degenerate=True``.
    """
    u = as_field(u)
    if density is None:
        density = _boundary_density(u)
    if sa is None:
        sa = slice_areas(u)
    length = float(density.sum())
    volume = float(sa.areas[0].sum())
    center = (np.array(u.shape, dtype=np.float64) - 1.0) / 2.0
    if volume == 0:
        return GlobalShape(0.0, length, 0.0, np.zeros(6), center, 0.0, 0.0, 0.0, degenerate=True)

    moments = np.empty(6)
    for axis, a in enumerate(sa.areas):
        idx = np.arange(len(a), dtype=np.float64)
        moments[axis] = (idx * a).sum() / volume
        moments[3 + axis] = (idx * idx * a).sum() / volume
    com = moments[:3].copy()
    iso = 36.0 * np.pi * volume**2 / length**3 if length > 0 else 0.0

    pts = np.argwhere(interface_mask(u > 0))
    if len(pts):
        d = np.sqrt(((pts - com) ** 2).sum(axis=1))
        stats = float(d.mean()), float(d.std()), float(d.max())
    else:
        stats = 0.0, 0.0, 0.0
    return GlobalShape(volume, length, float(iso), moments, com, *stats)


def global_image(u, m_sigma, density=None):
    """Image statistics inside ``{u > 0}`` and over its boundary.

    ``m_sigma`` is the (already smoothed) image. Inside statistics need a
    non-empty region and boundary statistics a positive boundary length;
    otherwise those entries are 0 and ``degenerate`` is set.
    """
    u = as_field(u)
    m_sigma = as_field(m_sigma)
    if u.shape != m_sigma.shape:
        raise DimensionError(f"u has shape {u.shape} but image has shape {m_sigma.shape}")
    if density is None:
        density = _boundary_density(u)
    inside = u > 0
    degenerate = False
    if inside.any():
        vals = m_sigma[inside]
        mean = float(vals.mean())
        std = float(np.sqrt(((vals - mean) ** 2).mean()))
    else:
        mean = std = 0.0
        degenerate = True
    length = float(density.sum())
    if length > 0:
        edge = gradient_norm(m_sigma, boundary_mode="one_sided")
        avg_edge = float((edge * density).sum() / length)
        on_boundary = float((m_sigma * density).sum() / length)
    else:
        avg_edge = on_boundary = 0.0
        degenerate = True
    return GlobalImage(mean, std, avg_edge, on_boundary, degenerate)


def _check_coords(coords, shape):
    c = np.asarray(coords)
    if c.ndim == 1:
        c = c[None, :]
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValueError(f"coords must have shape (n, 3), got {c.shape}")
    c = c.astype(np.int64)
    if np.any(c < 0) or np.any(c >= np.array(shape)):
        raise ValueError("coordinate outside the volume")
    return c


def local_shape(u, gs, sa, coords):
    """Distance to COM, slice areas and slice area changes at each coordinate.

    Returns a dict of arrays keyed ``dist_com``, ``area`` (n, 3) and
    ``area_change`` (n, 3).
    """
    c = _check_coords(coords, np.shape(u))
    dist = np.sqrt(((c - gs.com) ** 2).sum(axis=1))
    area = np.stack([sa.areas[a][c[:, a]] for a in range(3)], axis=1)
    change = np.stack([sa.changes[a][c[:, a]] for a in range(3)], axis=1)
    return {"dist_com": dist, "area": area, "area_change": change}


def _ray_samples(m_sigma, c, direction, length, base_value):
    """Samples at ``c +/- t * length / 10 * direction``, t = 1..10.

    Returns an (n, 20) array: the inward block then the outward block.
    """
    n = len(c)
    t = np.arange(1, N_RAY_SAMPLES + 1, dtype=np.float64) / N_RAY_SAMPLES
    offs = (length[:, None] * t[None, :])[:, :, None] * direction[:, None, :]
    cf = c.astype(np.float64)[:, None, :]
    pts = np.concatenate([cf + offs, cf - offs], axis=1).reshape(-1, 3)
    out = trilinear(m_sigma, pts).reshape(n, 2 * N_RAY_SAMPLES)
    zero = length < _EPS
    if zero.any():
        out[zero] = base_value[zero, None]
    return out


def local_image(u, m_sigma, gs, coords, edge=None, du=None, rays=True):
    """Image value, edge strength, and normal / COM-ray samples per coordinate.

    The inward normal is ``+Du / |Du|`` (toward larger ``u``, i.e. into the
    segmentation); where ``|Du| < 1e-8`` the COM-ray direction is used.
    Rays have length equal to the distance to the COM, with ten samples in
    each direction. With ``rays=False`` only value and edge are returned.
    """
    u = as_field(u)
    m_sigma = as_field(m_sigma)
    c = _check_coords(coords, u.shape)
    if edge is None:
        edge = gradient_norm(m_sigma, boundary_mode="one_sided")
    if du is None:
        du = central_gradient(u, boundary_mode="one_sided")
    idx = tuple(c.T)
    value = m_sigma[idx]
    if not rays:
        return {"value": value, "edge": edge[idx]}

    to_com = gs.com[None, :] - c
    dist = np.sqrt((to_com**2).sum(axis=1))
    safe = np.where(dist < _EPS, 1.0, dist)
    com_dir = to_com / safe[:, None]

    g = np.stack([du[a][idx] for a in range(3)], axis=1)
    gn = np.sqrt((g**2).sum(axis=1))
    normal = np.where(gn[:, None] < _EPS, com_dir, g / np.where(gn < _EPS, 1.0, gn)[:, None])

    return {
        "value": value,
        "edge": edge[idx],
        "normal": _ray_samples(m_sigma, c, normal, dist, value),
        "comray": _ray_samples(m_sigma, c, com_dir, dist, value),
    }


class ImageScales:
    """Smoothed copies of an image and their edge-strength fields.

    The image does not change during evolution, so these are computed once
    per example and reused at every iteration.
    """

    def __init__(self, m, sigmas=DEFAULT_SIGMAS):
        m = as_field(m)
        self.shape = m.shape
        self.sigmas = tuple(float(s) for s in sigmas)
        self.smoothed = [gaussian_smooth(m, s) for s in self.sigmas]
        self.edges = [gradient_norm(ms, boundary_mode="one_sided") for ms in self.smoothed]


def n_columns(map_id, n_sigmas=len(DEFAULT_SIGMAS)):
    if map_id == FM1:
        return 10 + 4 * n_sigmas
    if map_id == FM2:
        return 19 + 45 * n_sigmas
    raise ValueError(f"unknown feature map {map_id!r}")


def column_names(map_id, sigmas=DEFAULT_SIGMAS):
    """Stable column identifiers, e.g. ``fm2.normal.s0.in.3``."""
    if map_id not in (FM1, FM2):
        raise ValueError(f"unknown feature map {map_id!r}")
    p = map_id.lower() + "."
    ss = [_format_sigma(s) for s in sigmas]
    names = ["volume", "length", "isoperimetric"]
    names += [f"moment{o}.{a}" for o in (1, 2) for a in "ijk"]
    names += ["dist_com"]
    names += [f"mean_inside.{s}" for s in ss]
    names += [f"std_inside.{s}" for s in ss]
    names += [f"value.{s}" for s in ss]
    names += [f"edge.{s}" for s in ss]
    if map_id == FM2:
        names += [f"mean_boundary.{s}" for s in ss]
        names += ["dist_com_mean", "dist_com_std", "dist_com_max"]
        names += [f"slice_area.{a}" for a in "ijk"]
        names += [f"slice_area_change.{a}" for a in "ijk"]
        for ray in ("normal", "comray"):
            for s in ss:
                for way in ("in", "out"):
                    names += [f"{ray}.{s}.{way}.{t}" for t in range(1, N_RAY_SAMPLES + 1)]
    return [p + n for n in names]


def assemble(u, m, map_id, coords, sigmas=DEFAULT_SIGMAS, scales=None):
    """Feature matrix for ``coords`` under feature map ``map_id``.

    Parameters
    ----------
    u : ndarray
        Level-set iterate (positive inside).
    m : ndarray or None
        Image. May be None when ``scales`` (an :class:`ImageScales` built
        from the image with the same sigmas) is given.
    map_id : {"FM1", "FM2"}
    coords : array_like, shape (n, 3)
    sigmas : sequence of float
    scales : ImageScales, optional

    Returns
    -------
    FeatureMatrix
    """
    if map_id not in (FM1, FM2):
        raise ValueError(f"unknown feature map {map_id!r}")
    u = as_field(u)
    c = np.asarray(coords)
    if c.size == 0:
        raise ValueError("coords must be non-empty")
    c = _check_coords(c, u.shape)
    if scales is None:
        scales = ImageScales(m, sigmas)
    elif tuple(float(s) for s in sigmas) != scales.sigmas:
        raise ValueError("sigmas do not match the precomputed image scales")
    if scales.shape != u.shape:
        raise DimensionError(f"image shape {scales.shape} does not match u shape {u.shape}")

    n = len(c)
    density = _boundary_density(u)
    sa = slice_areas(u)
    gs = global_shape(u, density=density, sa=sa)
    gims = [global_image(u, ms, density=density) for ms in scales.smoothed]
    du = central_gradient(u, boundary_mode="one_sided") if map_id == FM2 else None
    locs = [
        local_image(u, ms, gs, c, edge=e, du=du, rays=map_id == FM2)
        for ms, e in zip(scales.smoothed, scales.edges)
    ]
    ls = local_shape(u, gs, sa, c)

    def const(x):
        return np.full(n, x, dtype=np.float64)

    cols = [const(gs.volume), const(gs.length), const(gs.isoperimetric)]
    cols += [const(x) for x in gs.moments]
    cols += [ls["dist_com"]]
    cols += [const(g.mean_inside) for g in gims]
    cols += [const(g.std_inside) for g in gims]
    cols += [lo["value"] for lo in locs]
    cols += [lo["edge"] for lo in locs]
    blocks = [np.stack(cols, axis=1)]
    if map_id == FM2:
        extra = [const(g.mean_on_boundary) for g in gims]
        extra += [const(gs.dist_mean), const(gs.dist_std), const(gs.dist_max)]
        blocks.append(np.stack(extra, axis=1))
        blocks.append(ls["area"])
        blocks.append(ls["area_change"])
        blocks += [lo["normal"] for lo in locs]
        blocks += [lo["comray"] for lo in locs]
    values = np.ascontiguousarray(np.hstack(blocks))
    return FeatureMatrix(map_id, c, values, column_names(map_id, scales.sigmas))


def write_csv(fm, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "k"] + list(fm.columns))
        for c, row in zip(fm.coords, fm.values):
            w.writerow([int(x) for x in c] + [repr(float(x)) for x in row])

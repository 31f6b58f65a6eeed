"""Dense 3D field kernels shared by every other module.

Scalar fields are plain ``float64`` arrays of shape ``(ni, nj, nk)`` and masks
are ``bool`` arrays of the same shape. Voxel spacing is always 1.
"""
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage as ndi

__all__ = [
    "DimensionError",
    "DegenerateMaskError",
    "as_field",
    "as_mask",
    "central_gradient",
    "gradient_norm",
    "gaussian_kernel",
    "gaussian_smooth",
    "signed_distance",
    "interface_mask",
    "Components",
    "connected_components",
    "component_nearest",
    "trilinear",
]


class DimensionError(ValueError):
    """Field shapes are incompatible with the requested operation."""


class DegenerateMaskError(ValueError):
    """Mask is all-true or all-false where a mixed mask is required."""


def as_field(f):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3:
        raise DimensionError(f"expected a 3D field, got shape {f.shape}")
    return f


def as_mask(m):
    m = np.asarray(m)
    if m.ndim != 3:
        raise DimensionError(f"expected a 3D mask, got shape {m.shape}")
    return m.astype(bool, copy=False)


def central_gradient(f, boundary_mode="one_sided"):
    """Finite-difference gradient of a 3D field.

    Interior voxels use centered differences ``(f[+1] - f[-1]) / 2``. On the
    first and last voxel along an axis the component along that axis is
    either a one-sided first difference (``"one_sided"``) or zero
    (``"zero"``).

    Parameters
    ----------
    f : array_like, shape (ni, nj, nk)
    boundary_mode : {"one_sided", "zero"}

    Returns
    -------
    tuple of three ndarrays
        Components along i, j and k.
    """
    f = as_field(f)
    if min(f.shape) < 3:
        raise DimensionError(f"central_gradient needs >= 3 voxels per axis, got {f.shape}")
    if boundary_mode not in ("one_sided", "zero"):
        raise ValueError(f"unknown boundary_mode {boundary_mode!r}")
    comps = []
    for axis in range(3):
        g = np.gradient(f, axis=axis, edge_order=1)
        if boundary_mode == "zero":
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = 0
            hi[axis] = -1
            g[tuple(lo)] = 0.0
            g[tuple(hi)] = 0.0
        comps.append(g)
    return tuple(comps)


def gradient_norm(f, boundary_mode="one_sided"):
    gi, gj, gk = central_gradient(f, boundary_mode)
    return np.sqrt(gi * gi + gj * gj + gk * gk)


def gaussian_kernel(sigma):
    """Normalized discrete Gaussian truncated at radius ``ceil(4 sigma)``."""
    radius = int(np.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def gaussian_smooth(f, sigma):
    """Separable Gaussian smoothing with border renormalization.

    Each 1D pass divides by the kernel mass that falls inside the volume, so
    constant fields are reproduced exactly (up to rounding). ``sigma == 0``
    returns the input values unchanged.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    f = as_field(f)
    if sigma == 0:
        return f.copy()
    w = gaussian_kernel(sigma)
    out = f
    for axis in range(3):
        ones = np.ones(out.shape[axis])
        mass = ndi.correlate1d(ones, w, mode="constant", cval=0.0)
        shape = [1, 1, 1]
        shape[axis] = -1
        out = ndi.correlate1d(out, w, axis=axis, mode="constant", cval=0.0)
        out = out / mass.reshape(shape)
    return out


def signed_distance(m):
    """Exact Euclidean signed distance between voxel centers.

    True voxels get ``+d`` to the nearest false voxel, false voxels get
    ``-d`` to the nearest true voxel, so the field is positive inside.
    """
    m = as_mask(m)
    n_true = int(m.sum())
    if n_true == 0 or n_true == m.size:
        raise DegenerateMaskError("signed distance needs both true and false voxels")
    inside = ndi.distance_transform_edt(m)
    outside = ndi.distance_transform_edt(~m)
    return np.where(m, inside, -outside)


def interface_mask(m):
    """Voxels with at least one face neighbor of the opposite label."""
    m = as_mask(m)
    out = np.zeros_like(m)
    for axis in range(3):
        n = m.shape[axis]
        if n < 2:
            continue
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(0, n - 1)
        b[axis] = slice(1, n)
        diff = m[tuple(a)] != m[tuple(b)]
        out[tuple(a)] |= diff
        out[tuple(b)] |= diff
    return out


_FACE_STRUCTURE = ndi.generate_binary_structure(3, 1)


@dataclass
class Components:
    """6-connected labeling: ``labels`` is 0 on background, 1..n on components."""

    labels: np.ndarray
    sizes: np.ndarray

    @property
    def count(self):
        return len(self.sizes)


def connected_components(m):
    m = as_mask(m)
    labels, n = ndi.label(m, structure=_FACE_STRUCTURE)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return Components(labels=labels, sizes=sizes)


def component_nearest(labels, point):
    """Label of the component having the voxel closest to ``point``.

    Returns 0 when there are no components. Ties go to the smaller label.
    """
    labels = np.asarray(labels)
    idx = np.argwhere(labels > 0)
    if len(idx) == 0:
        return 0
    d2 = ((idx - np.asarray(point, dtype=np.float64)) ** 2).sum(axis=1)
    lab = labels[tuple(idx.T)]
    best = d2.min()
    return int(lab[d2 == best].min())


def trilinear(f, p):
    """Trilinear interpolation at one point or an ``(n, 3)`` array of points.

    Coordinates are clamped to ``[0, n - 1]`` per axis first, so samples
    outside the volume repeat the nearest face value.
    """
    f = as_field(f)
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    if pts.shape[-1] != 3:
        raise ValueError(f"points must have 3 coordinates, got shape {p.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be finite")
    out = _trilinear_kernel(f, np.ascontiguousarray(pts))
    return float(out[0]) if single else out


@njit(cache=True, nogil=True)
def _trilinear_kernel(f, pts):
    ni, nj, nk = f.shape
    out = np.empty(pts.shape[0])
    for r in range(pts.shape[0]):
        x = min(max(pts[r, 0], 0.0), ni - 1.0)
        y = min(max(pts[r, 1], 0.0), nj - 1.0)
        z = min(max(pts[r, 2], 0.0), nk - 1.0)
        # base index capped at n - 2 so the upper node is reproduced exactly
        i0 = min(int(np.floor(x)), max(ni - 2, 0))
        j0 = min(int(np.floor(y)), max(nj - 2, 0))
        k0 = min(int(np.floor(z)), max(nk - 2, 0))
        i1 = min(i0 + 1, ni - 1)
        j1 = min(j0 + 1, nj - 1)
        k1 = min(k0 + 1, nk - 1)
        ti = x - i0
        tj = y - j0
        tk = z - k0
        c00 = f[i0, j0, k0] * (1 - tk) + f[i0, j0, k1] * tk
        c01 = f[i0, j1, k0] * (1 - tk) + f[i0, j1, k1] * tk
        c10 = f[i1, j0, k0] * (1 - tk) + f[i1, j0, k1] * tk
        c11 = f[i1, j1, k0] * (1 - tk) + f[i1, j1, k1] * tk
        c0 = c00 * (1 - tj) + c01 * tj
        c1 = c10 * (1 - tj) + c11 * tj
        out[r] = c0 * (1 - ti) + c1 * ti
    return out

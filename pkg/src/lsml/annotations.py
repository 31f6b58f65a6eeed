"""Multi-reader contour annotations: rasterization, grouping and consolidation."""
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as graph_components
from scipy.spatial.distance import cdist

from .evaluation import jaccard
from .grid import DimensionError, as_field, as_mask, trilinear

__all__ = [
    "Annotation",
    "AnnotationGroup",
    "rasterize",
    "pairwise_distance",
    "distance_matrix",
    "cluster",
    "consensus50",
    "mean_jaccard",
    "jaccard_median",
    "resample_isotropic",
    "parse_corpus",
    "format_corpus",
    "read_corpus",
    "write_corpus",
]

TAU_FLOOR = 1e-9
# exhaustive search over membership classes up to this many classes
EXACT_CLASS_LIMIT = 16


@dataclass
class Annotation:
    """One reader's contour stack.

    ``slices`` is a list of ``(k, vertices)`` with ``vertices`` an (n, 2)
    array of continuous (i, j) positions; ``k`` strictly increases.
    """

    slices: list
    reader: str = ""

    def __post_init__(self):
        clean = []
        for k, verts in self.slices:
            v = np.asarray(verts, dtype=np.float64).reshape(-1, 2)
            clean.append((int(k), v))
        ks = [k for k, _ in clean]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError(f"slice indices must strictly increase, got {ks}")
        self.slices = clean

    def points(self, slice_thickness=1.0):
        """Vertices as 3D points ``(i, j, k * slice_thickness)``."""
        if not self.slices:
            return np.empty((0, 3))
        return np.vstack(
            [np.column_stack([v, np.full(len(v), k * slice_thickness)]) for k, v in self.slices]
        )


@dataclass
class AnnotationGroup:
    """Annotations judged to outline one object.

    ``over_capacity`` marks a group that still exceeds the reader limit
    after the adjacency threshold reached its floor.
    """

    annotations: list
    indices: list = field(default_factory=list)
    tau: float = 0.0
    over_capacity: bool = False

    def __len__(self):
        return len(self.annotations)


def _polygon_mask(verts, ni, nj, eps=1e-9):
    """Even-odd test of all (i, j) voxel centers; points on an edge count as inside."""
    gi, gj = np.meshgrid(np.arange(ni, dtype=np.float64), np.arange(nj, dtype=np.float64), indexing="ij")
    inside = np.zeros((ni, nj), dtype=bool)
    on_edge = np.zeros((ni, nj), dtype=bool)
    a = verts
    b = np.roll(verts, -1, axis=0)
    for (x1, y1), (x2, y2) in zip(a, b):
        # edge crossing of the ray towards +j
        straddle = (x1 > gi) != (x2 > gi)
        with np.errstate(divide="ignore", invalid="ignore"):
            yc = y1 + (gi - x1) * (y2 - y1) / (x2 - x1)
        inside ^= straddle & (gj < yc)
        cross = (x2 - x1) * (gj - y1) - (y2 - y1) * (gi - x1)
        dot = (gi - x1) * (x2 - x1) + (gj - y1) * (y2 - y1)
        seg2 = (x2 - x1) ** 2 + (y2 - y1) ** 2
        if seg2 == 0:
            on_edge |= (np.abs(gi - x1) <= eps) & (np.abs(gj - y1) <= eps)
            continue
        on_edge |= (np.abs(cross) <= eps * max(1.0, np.sqrt(seg2))) & (dot >= -eps) & (dot <= seg2 + eps)
    return inside | on_edge


def rasterize(a, dims):
    """Boolean volume of the voxel centers enclosed by each slice contour."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise DimensionError(f"dims must have three entries, got {dims}")
    out = np.zeros(dims, dtype=bool)
    for k, v in a.slices:
        if len(v) < 3:
            raise ValueError(f"slice {k} polygon has {len(v)} vertices; need at least 3")
        if not 0 <= k < dims[2]:
            raise ValueError(f"slice {k} lies outside dims {dims}")
        if v.min() < -0.5 or v[:, 0].max() > dims[0] - 0.5 or v[:, 1].max() > dims[1] - 0.5:
            raise ValueError(f"slice {k} polygon does not fit in dims {dims}")
        out[:, :, k] = _polygon_mask(v, dims[0], dims[1])
    return out


def pairwise_distance(a, b, slice_thickness=1.0):
    """Smallest 3D distance between any vertex of ``a`` and any vertex of ``b``."""
    pa = a.points(slice_thickness)
    pb = b.points(slice_thickness)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("pairwise distance needs two non-empty annotations")
    return float(cdist(pa, pb).min())


def distance_matrix(annotations, slice_thickness=1.0):
    n = len(annotations)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = pairwise_distance(annotations[i], annotations[j], slice_thickness)
    return d


def _groups(d, tau):
    _, labels = graph_components(csr_matrix(d <= tau), directed=False)
    # relabel by first member so group order follows input order
    order = {}
    for lab in labels:
        order.setdefault(lab, len(order))
    return np.array([order[lab] for lab in labels])


def cluster(annotations, slice_thickness, shrink=0.9, max_group=4):
    """Group annotations by thresholded vertex distance.

    The threshold starts at ``slice_thickness`` and is multiplied by
    ``shrink`` while some group exceeds ``max_group`` members. Once it
    reaches a floor of 1e-9 the remaining large groups are returned with
    ``over_capacity`` set and a :class:`RuntimeWarning`.
    """
    annotations = list(annotations)
    if not annotations:
        raise ValueError("need at least one annotation")
    if not slice_thickness > 0:
        raise ValueError(f"slice_thickness must be positive, got {slice_thickness}")
    if not 0 < shrink < 1:
        raise ValueError(f"shrink must lie in (0, 1), got {shrink}")
    d = distance_matrix(annotations, slice_thickness)
    tau = float(slice_thickness)
    while True:
        labels = _groups(d, tau)
        sizes = np.bincount(labels)
        if sizes.max() <= max_group or tau <= TAU_FLOOR:
            break
        tau = max(tau * shrink, TAU_FLOOR)
    if sizes.max() > max_group:
        warnings.warn(
            f"{int((sizes > max_group).sum())} group(s) exceed {max_group} annotations at the threshold floor",
            RuntimeWarning,
        )
    out = []
    for g in range(labels.max() + 1):
        idx = [int(i) for i in np.flatnonzero(labels == g)]
        out.append(
            AnnotationGroup([annotations[i] for i in idx], idx, tau, over_capacity=len(idx) > max_group)
        )
    return out


def _stack(masks):
    masks = [as_mask(m) for m in masks]
    if not masks:
        raise ValueError("need at least one mask")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise DimensionError("masks have different shapes")
    return np.stack(masks)


def consensus50(masks):
    """Voxels marked by at least half of the masks."""
    s = _stack(masks)
    return 2 * s.sum(axis=0) >= len(s)


def mean_jaccard(candidate, masks):
    """Mean Jaccard of ``candidate`` against every mask (empty pairs score 1)."""
    return float(np.mean([jaccard(candidate, m) for m in masks]))


def _class_scores(chosen, member, counts, sizes):
    """Mean Jaccard for rows of ``chosen`` (candidates x classes)."""
    inter = chosen @ (member * counts).T
    extra = chosen @ ((1 - member) * counts).T
    union = sizes[None, :] + extra
    with np.errstate(invalid="ignore", divide="ignore"):
        j = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return j.mean(axis=1)


def jaccard_median(masks):
    """Mask maximizing mean Jaccard overlap with ``masks``.

    Voxels of the union are grouped by which masks contain them. The score
    is convex in the number of voxels taken from any one group, so an
    optimum takes every group wholly or not at all. With at most 16 groups
    all choices are enumerated; otherwise the agreement-threshold masks are
    refined by greedy group flips.
    """
    s = _stack(masks)
    n = len(s)
    if n < 2:
        raise ValueError("jaccard_median needs at least two masks")
    union = s.any(axis=0)
    if not union.any():
        raise ValueError("masks have an empty union")
    cols = s[:, union].T.astype(np.int64)  # voxels x masks
    patterns, inverse, counts = np.unique(cols, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    member = patterns.T.astype(np.float64)  # masks x classes
    counts = counts.astype(np.float64)
    sizes = s.reshape(n, -1).sum(axis=1).astype(np.float64)
    n_cls = len(counts)
    agreement = patterns.sum(axis=1)

    cands = np.array([agreement >= t for t in range(1, n + 1)], dtype=np.float64)
    scores = _class_scores(cands, member, counts, sizes)
    best_i = int(np.argmax(scores))
    best, best_score = cands[best_i].copy(), scores[best_i]

    if n_cls <= EXACT_CLASS_LIMIT:
        allc = np.array(list(itertools.product((0.0, 1.0), repeat=n_cls)))
        sc = _class_scores(allc, member, counts, sizes)
        i = int(np.argmax(sc))
        if sc[i] > best_score + 1e-12:
            best, best_score = allc[i], sc[i]
    else:
        while True:
            flips = np.repeat(best[None, :], n_cls, axis=0)
            flips[np.arange(n_cls), np.arange(n_cls)] = 1.0 - best
            sc = _class_scores(flips, member, counts, sizes)
            i = int(np.argmax(sc))
            if sc[i] <= best_score + 1e-12:
                break
            best, best_score = flips[i], sc[i]

    out = np.zeros(union.shape, dtype=bool)
    out[union] = best[inverse] > 0.5
    return out


def resample_isotropic(f, in_spacing, out_dims, out_spacing=1.0):
    """Trilinear resampling onto a grid of ``out_spacing`` sharing the physical center.

    Input voxel ``p`` sits at ``(p - (n_in - 1) / 2) * in_spacing``; output
    voxel ``q`` at ``(q - (n_out - 1) / 2) * out_spacing``. Positions outside
    the input are clamped to its border.
    """
    f = as_field(f)
    s_in = np.asarray(in_spacing, dtype=np.float64)
    if s_in.shape != (3,) or np.any(s_in <= 0) or not out_spacing > 0:
        raise ValueError("spacings must be positive")
    out_dims = tuple(int(d) for d in out_dims)
    c_in = (np.asarray(f.shape, dtype=np.float64) - 1) / 2
    c_out = (np.asarray(out_dims, dtype=np.float64) - 1) / 2
    q = np.indices(out_dims, dtype=np.float64).reshape(3, -1).T
    p = (q - c_out) * (out_spacing / s_in) + c_in
    return trilinear(f, p).reshape(out_dims)


# -- corpus text format --------------------------------------------------------


def parse_corpus(text):
    """Parse ``annotation <reader>`` / ``slice <k>`` / ``v <i> <j>`` blocks."""
    out = []
    reader, slices, cur = None, [], None

    def close():
        nonlocal reader, slices, cur
        if reader is not None:
            out.append(Annotation(slices, reader))
        reader, slices, cur = None, [], None

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            close()
            continue
        if line.startswith("#"):
            continue
        head, *rest = line.split()
        if head == "annotation":
            close()
            reader = rest[0] if rest else ""
        elif head == "slice" and reader is not None and len(rest) == 1:
            cur = []
            slices.append((int(rest[0]), cur))
        elif head == "v" and cur is not None and len(rest) == 2:
            cur.append((float(rest[0]), float(rest[1])))
        else:
            raise ValueError(f"corpus line {lineno}: cannot parse {raw!r}")
    close()
    return out


def format_corpus(annotations):
    lines = []
    for a in annotations:
        lines.append(f"annotation {a.reader}")
        for k, v in a.slices:
            lines.append(f"slice {k}")
            lines += [f"v {x!r} {y!r}" for x, y in v.tolist()]
        lines.append("")
    return "\n".join(lines)


def read_corpus(path):
    with open(path) as fh:
        return parse_corpus(fh.read())


def write_corpus(path, annotations):
    with open(path, "w") as fh:
        fh.write(format_corpus(annotations))

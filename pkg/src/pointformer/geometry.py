"""Deterministic point-set kernels: sampling, neighbors, normalization.

All functions here are pure and operate on plain numpy arrays. Neighbor
search is brute force by design; the library targets desk-scale clouds
(a few thousand points) where a spatial index buys nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_KNN_CHUNK = 512


@dataclass
class TriMesh:
    """A triangle mesh: (V, 3) float vertices and (F, 3) integer faces."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError(
                f"face index out of range: vertices={len(self.vertices)}, "
                f"face indices span [{self.faces.min()}, {self.faces.max()}]"
            )

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point set is empty")
    return pts


def farthest_point_sample(points, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subsampling of ``m`` indices from an (N, 3) cloud.

    The first pick is ``start``; every subsequent pick maximizes its minimum
    squared distance to all points already picked. Distance ties are broken
    toward the lowest index.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} points from a cloud of {n}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range [0, {n})")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    min_d2 = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))  # first max = lowest index on ties
        chosen[i] = nxt
        np.minimum(min_d2, ((pts - pts[nxt]) ** 2).sum(axis=1), out=min_d2)
    return chosen


def canonical_start(points) -> int:
    """Index of the lexicographically smallest (x, y, z) point.

    Used as a permutation-stable start for farthest point sampling at
    evaluation time.
    """
    pts = _as_points(points)
    return int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])


def knn(reference, queries, k: int, self_index: np.ndarray | None = None) -> np.ndarray:
    """Euclidean k-nearest-neighbor indices, one sorted row per query.

    Rows are ordered by (squared distance, index) ascending, so coincident
    points resolve toward the lower index. When ``self_index`` is given it
    names, for each query, a reference point that is the query itself; that
    point is then guaranteed a slot in its row even if duplicates would
    otherwise crowd it out, keeping each center inside its own neighborhood.

    Args:
        reference: (N, 3) reference points.
        queries: (M, 3) query points.
        k: neighbors per query, 1 <= k <= N.
        self_index: optional (M,) reference indices to force-include.

    Returns:
        (M, k) int64 index table into ``reference``.
    """
    ref = _as_points(reference)
    qry = _as_points(queries)
    n, m = ref.shape[0], qry.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} reference points")
    if self_index is not None:
        self_index = np.asarray(self_index, dtype=np.int64)
        if self_index.shape != (m,):
            raise ValueError(f"self_index must have shape ({m},), got {self_index.shape}")

    out = np.empty((m, k), dtype=np.int64)
    for lo in range(0, m, _KNN_CHUNK):
        hi = min(lo + _KNN_CHUNK, m)
        d2 = ((qry[lo:hi, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
        # stable sort on distance keeps equal entries in index order
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        if self_index is not None:
            for r in range(hi - lo):
                s = self_index[lo + r]
                row = order[r]
                if s not in row:
                    row[-1] = s
                    rd = d2[r, row]
                    row[:] = row[np.lexsort((row, rd))]
        out[lo:hi] = order
    return out


def normalize_cloud(points) -> np.ndarray:
    """Center a cloud on its centroid and scale it into the unit sphere.

    Degenerate clouds (max radius below 1e-12, e.g. a single point) are only
    translated; the scale is left at 1.
    """
    pts = _as_points(points)
    centered = pts - pts.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius < 1e-12:
        return centered
    return centered / radius


def sample_mesh_surface(mesh: TriMesh, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` points uniformly from a mesh surface, area-weighted.

    Faces are selected with probability proportional to area (zero-area
    faces are never selected); points within a face come from folded
    barycentric sampling. Pure in (mesh, n, seed).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    areas = mesh.face_areas()
    keep = np.nonzero(areas > 0.0)[0]
    total = areas[keep].sum()
    if total <= 0.0:
        raise ValueError("mesh has zero total surface area")
    rng = np.random.default_rng(seed)
    face_ids = keep[rng.choice(len(keep), size=n, p=areas[keep] / total)]
    u = rng.random(n)
    v = rng.random(n)
    fold = u + v > 1.0
    u[fold] = 1.0 - u[fold]
    v[fold] = 1.0 - v[fold]
    tri = mesh.vertices[mesh.faces[face_ids]]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)

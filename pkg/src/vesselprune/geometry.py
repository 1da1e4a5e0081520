import numpy as np
from scipy.spatial import cKDTree

from vesselprune.vessel_tree import VesselTree


def pair_distances(points, seg_a, seg_b):
    """Euclidean distance from each point to the paired segment `[seg_a, seg_b]`.

    All three arrays broadcast against each other along the leading axes; zero-length
    segments degrade to point distances.

    Args:
        points (np.ndarray): `(..., 3)` query points
        seg_a (np.ndarray): `(..., 3)` segment starts
        seg_b (np.ndarray): `(..., 3)` segment ends

    Returns:
        np.ndarray:
            the distances, broadcast shape without the last axis
    """
    points = np.asarray(points, dtype=np.float64)
    seg_a = np.asarray(seg_a, dtype=np.float64)
    direction = np.asarray(seg_b, dtype=np.float64) - seg_a
    rel = points - seg_a
    denom = np.sum(direction * direction, axis=-1)
    safe = np.where(denom > 0, denom, 1.0)
    t = np.where(denom > 0, np.sum(rel * direction, axis=-1) / safe, 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = rel - t[..., None] * direction
    return np.sqrt(np.sum(closest * closest, axis=-1))


def brute_force_distances(points, seg_a, seg_b, chunk_size=2048):
    """Exhaustive nearest point-to-segment distance, O(N * M).

    Args:
        points (np.ndarray): `(N, 3)` query points
        seg_a (np.ndarray): `(M, 3)` segment starts
        seg_b (np.ndarray): `(M, 3)` segment ends
        chunk_size (int): points processed per batch

    Returns:
        np.ndarray:
            `(N,)` distances, `inf` when there are no segments
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    seg_a = np.asarray(seg_a, dtype=np.float64).reshape(-1, 3)
    seg_b = np.asarray(seg_b, dtype=np.float64).reshape(-1, 3)
    out = np.full(len(points), np.inf)
    if len(seg_a) == 0:
        return out
    for start in range(0, len(points), chunk_size):
        batch = points[start : start + chunk_size, None, :]
        out[start : start + chunk_size] = pair_distances(batch, seg_a, seg_b).min(axis=1)
    return out


class SegmentIndex:
    """Exact nearest-polyline distance queries accelerated with k-d trees.

    A query first bounds its answer by the distance to the segments of the nearest vertex,
    then only inspects segments whose midpoint lies within that bound plus the largest
    half-length.

    Args:
        seg_a (np.ndarray): `(M, 3)` segment starts
        seg_b (np.ndarray): `(M, 3)` segment ends
    """

    def __init__(self, seg_a, seg_b):
        self.seg_a = np.asarray(seg_a, dtype=np.float64).reshape(-1, 3)
        self.seg_b = np.asarray(seg_b, dtype=np.float64).reshape(-1, 3)
        self.n_segments = len(self.seg_a)
        if self.n_segments == 0:
            return
        vertices = np.concatenate([self.seg_a, self.seg_b])
        self._vertex_segment = np.concatenate([np.arange(self.n_segments)] * 2)
        self._vertex_tree = cKDTree(vertices)
        self._mid_tree = cKDTree((self.seg_a + self.seg_b) / 2)
        half = np.linalg.norm(self.seg_b - self.seg_a, axis=1) / 2
        self._max_half = float(half.max())

    @classmethod
    def from_tree(cls, tree: VesselTree) -> "SegmentIndex":
        return cls(*tree.segment_endpoints())

    def query(self, points) -> np.ndarray:
        """Distance from each point to the nearest segment.

        Args:
            points (np.ndarray): `(N, 3)` query points

        Returns:
            np.ndarray:
                `(N,)` distances, `inf` everywhere if the index holds no segments
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.n_segments == 0 or len(points) == 0:
            return np.full(len(points), np.inf)

        _, vertex = self._vertex_tree.query(points)
        first = self._vertex_segment[vertex]
        bound = pair_distances(points, self.seg_a[first], self.seg_b[first])

        candidates = self._mid_tree.query_ball_point(points, bound + self._max_half + 1e-9)
        counts = np.array([len(c) for c in candidates], dtype=np.int64)
        seg_idx = np.concatenate([np.asarray(c, dtype=np.int64) for c in candidates])
        pt_idx = np.repeat(np.arange(len(points)), counts)
        dist = pair_distances(points[pt_idx], self.seg_a[seg_idx], self.seg_b[seg_idx])
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        return np.minimum(np.minimum.reduceat(dist, offsets), bound)


def tree_distances(points, tree: VesselTree) -> np.ndarray:
    """Distance from each point to the polyline of `tree`, `inf` for an empty tree."""
    return SegmentIndex.from_tree(tree).query(points)


def voxel_centers(dims, spacing) -> np.ndarray:
    """World coordinates of all voxel centers as a `(nx, ny, nz, 3)` array."""
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(dims, spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def distance_field(seg_a, seg_b, dims, spacing, max_dist) -> np.ndarray:
    """Distance from every voxel center to the nearest segment, up to `max_dist`.

    Each segment only updates the voxels inside its bounding box grown by `max_dist`, so the
    cost scales with the tube volume rather than the grid. Voxels farther than `max_dist`
    from every segment are set to `inf`.

    Args:
        seg_a (np.ndarray): `(M, 3)` segment starts in mm
        seg_b (np.ndarray): `(M, 3)` segment ends in mm
        dims (tuple): voxel counts
        spacing (tuple): mm per voxel
        max_dist (float): the distance cut-off in mm

    Returns:
        np.ndarray:
            `dims`-shaped distance array
    """
    dims = np.asarray(dims, dtype=np.int64)
    spacing = np.asarray(spacing, dtype=np.float64)
    field = np.full(tuple(dims), np.inf)
    seg_a = np.asarray(seg_a, dtype=np.float64).reshape(-1, 3)
    seg_b = np.asarray(seg_b, dtype=np.float64).reshape(-1, 3)

    for a, b in zip(seg_a, seg_b):
        lo = np.minimum(a, b) - max_dist
        hi = np.maximum(a, b) + max_dist
        i_lo = np.maximum(np.ceil(lo / spacing - 0.5), 0).astype(np.int64)
        i_hi = np.minimum(np.floor(hi / spacing - 0.5), dims - 1).astype(np.int64)
        if np.any(i_lo > i_hi):
            continue
        axes = [(np.arange(i_lo[d], i_hi[d] + 1) + 0.5) * spacing[d] for d in range(3)]
        centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        box = tuple(slice(i_lo[d], i_hi[d] + 1) for d in range(3))
        np.minimum(field[box], pair_distances(centers, a, b), out=field[box])

    field[field > max_dist] = np.inf
    return field


def brute_force_distance_field(seg_a, seg_b, dims, spacing) -> np.ndarray:
    """Unbounded exhaustive distance from every voxel center to the nearest segment."""
    centers = voxel_centers(dims, spacing).reshape(-1, 3)
    return brute_force_distances(centers, seg_a, seg_b).reshape(tuple(dims))

import heapq
import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from tqdm.auto import tqdm

from vesselprune import settings
from vesselprune.vessel_tree import (
    ScalarVolume,
    VesselNode,
    VesselTree,
    empty_tree,
    merge_forests,
    validate_heatmap,
)


@dataclass
class TracerParams:
    """Parameters of the initial over-complete tracing.

    Args:
        binarize_threshold (float): heatmap level of the foreground, in (0, 1)
        dilation_radius (float): radius of the ball dilating the foreground, in voxels
        min_component_voxels (int): components smaller than this are not traced
        coverage_stop (float): stop once this fraction of the component is visited
        min_branch_len (float): stop once a new branch is shorter than this, in mm
        step_size (float): back-tracking step in mm
    """

    binarize_threshold: float = settings.TRACER_BINARIZE_THRESHOLD
    dilation_radius: float = settings.TRACER_DILATION_RADIUS
    min_component_voxels: int = settings.TRACER_MIN_COMPONENT_VOXELS
    coverage_stop: float = settings.TRACER_COVERAGE_STOP
    min_branch_len: float = settings.TRACER_MIN_BRANCH_LEN
    step_size: float = settings.TRACER_STEP_SIZE

    def validate(self):
        if not 0 < self.binarize_threshold < 1:
            raise ValueError(
                f"binarize_threshold: must lie in (0, 1), got {self.binarize_threshold}"
            )
        if self.dilation_radius < 0:
            raise ValueError(f"dilation_radius: must be non-negative, got {self.dilation_radius}")
        if self.min_component_voxels < 1:
            raise ValueError(
                f"min_component_voxels: must be positive, got {self.min_component_voxels}"
            )
        if not 0 < self.coverage_stop <= 1:
            raise ValueError(f"coverage_stop: must lie in (0, 1], got {self.coverage_stop}")
        if not self.min_branch_len > 0:
            raise ValueError(f"min_branch_len: must be positive, got {self.min_branch_len}")
        if not self.step_size > 0:
            raise ValueError(f"step_size: must be positive, got {self.step_size}")


@dataclass(frozen=True)
class TimeField:
    """Geodesic arrival times from `source`; `inf` outside the marched component.

    Args:
        times (ScalarVolume): arrival times in mm-equivalent units
        source (int): linear index of the source voxel
    """

    times: ScalarVolume
    source: int


@dataclass
class TraceStats:
    """Bookkeeping of one component trace."""

    n_voxels: int = 0
    visited_fraction: float = 0.0
    n_branches: int = 0
    n_abandoned: int = 0
    last_branch_len: float = math.inf


def ball_structure(radius) -> np.ndarray:
    """Boolean ball of voxels within Euclidean `radius` (in voxels) of the center."""
    r = int(math.floor(radius))
    offsets = np.arange(-r, r + 1)
    i, j, k = np.meshgrid(offsets, offsets, offsets, indexing="ij")
    return i**2 + j**2 + k**2 <= radius**2


def binarize_dilate(heatmap: ScalarVolume, params: TracerParams) -> ScalarVolume:
    """Thresholds a heatmap and dilates the foreground with a Euclidean ball.

    Args:
        heatmap (ScalarVolume): heatmap with values in [0, 1]
        params (TracerParams): threshold and dilation radius

    Returns:
        ScalarVolume:
            binary mask with values 0 and 1
    """
    binary = heatmap.data >= params.binarize_threshold
    if params.dilation_radius >= 1 and binary.any():
        binary = ndimage.binary_dilation(binary, structure=ball_structure(params.dilation_radius))
    return heatmap.with_data(binary.astype(np.float64))


def connected_components(mask: ScalarVolume, min_component_voxels=1) -> List[np.ndarray]:
    """Splits the foreground of a mask into 26-connected components.

    Args:
        mask (ScalarVolume): binary mask, foreground is any value > 0
        min_component_voxels (int): smaller components are discarded

    Returns:
        list:
            ascending linear voxel indices per component, largest component first and ties
            broken by lowest voxel index
    """
    labels, n_labels = ndimage.label(mask.data > 0, structure=np.ones((3, 3, 3), dtype=bool))
    flat = labels.ravel(order="F")
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n_labels + 1)
    groups = np.split(order, np.cumsum(counts)[:-1])[1:]
    comps = [g for g in groups if len(g) >= min_component_voxels]
    comps.sort(key=lambda c: (-len(c), int(c[0])))
    return comps


def _solve_eikonal(known: List[Tuple[float, float]], speed: float) -> float:
    """First-order upwind update from `(time, spacing)` pairs of the known axis neighbors."""
    known.sort()
    inv_f2 = 1.0 / (speed * speed)
    a = b = c = 0.0
    t = math.inf
    for m, (tk, h) in enumerate(known):
        w = 1.0 / (h * h)
        a += w
        b -= 2 * tk * w
        c += tk * tk * w
        disc = b * b - 4 * a * (c - inv_f2)
        if disc < 0:
            break
        t = (-b + math.sqrt(disc)) / (2 * a)
        if m + 1 == len(known) or t <= known[m + 1][0]:
            break
    return t


def fast_march(heatmap: ScalarVolume, component, source) -> TimeField:
    """Solves `|grad T| * F = 1` on a component with `F = (heatmap + eps) ** 2`.

    A first-order fast marching scheme over the 6-neighborhood; heap ties pop the lowest
    voxel index first. Component voxels only reachable through diagonal contacts keep `inf`.

    Args:
        heatmap (ScalarVolume): speed source
        component (np.ndarray): linear voxel indices the front may enter
        source (int): linear index of the source voxel, `T = 0` there

    Returns:
        TimeField:
            the arrival times

    Raises:
        ValueError:
            if `source` is not part of `component`
    """
    nx, ny, nz = heatmap.dims
    n = nx * ny * nz
    source = int(source)
    allowed = np.zeros(n, dtype=bool)
    allowed[np.asarray(component, dtype=np.int64)] = True
    if not 0 <= source < n or not allowed[source]:
        raise ValueError(f"Source voxel {source} lies outside the component")

    speed = (heatmap.flat() + settings.FAST_MARCH_EPSILON) ** 2
    hx, hy, hz = heatmap.spacing
    times = np.full(n, np.inf)
    accepted = np.zeros(n, dtype=bool)
    times[source] = 0.0
    heap = [(0.0, source)]
    sxy = nx * ny

    while heap:
        t, v = heapq.heappop(heap)
        if accepted[v] or t > times[v]:
            continue
        accepted[v] = True
        i, j, k = v % nx, (v // nx) % ny, v // sxy
        for w, inside in (
            (v - 1, i > 0),
            (v + 1, i < nx - 1),
            (v - nx, j > 0),
            (v + nx, j < ny - 1),
            (v - sxy, k > 0),
            (v + sxy, k < nz - 1),
        ):
            if not inside or not allowed[w] or accepted[w]:
                continue
            wi, wj, wk = w % nx, (w // nx) % ny, w // sxy
            known = []
            for lo_ok, hi_ok, step, h in (
                (wi > 0, wi < nx - 1, 1, hx),
                (wj > 0, wj < ny - 1, nx, hy),
                (wk > 0, wk < nz - 1, sxy, hz),
            ):
                best = math.inf
                if lo_ok and accepted[w - step]:
                    best = times[w - step]
                if hi_ok and accepted[w + step] and times[w + step] < best:
                    best = times[w + step]
                if best < math.inf:
                    known.append((best, h))
            tw = _solve_eikonal(known, speed[w])
            if tw < times[w]:
                times[w] = tw
                heapq.heappush(heap, (tw, w))

    return TimeField(ScalarVolume.from_flat(times, heatmap.dims, heatmap.spacing), source)


class _ComponentTracer:
    """Coverage-driven back-tracking over one component."""

    def __init__(self, heatmap: ScalarVolume, component, params: TracerParams):
        self.params = params
        self.dims = heatmap.dims
        self.spacing = np.asarray(heatmap.spacing)
        self.volume = heatmap
        self.comp = np.sort(np.asarray(component, dtype=np.int64))
        n = heatmap.n_voxels
        self.in_comp = np.zeros(n, dtype=bool)
        self.in_comp[self.comp] = True

        # the heatmap restricted to the component support
        flat = np.where(self.in_comp, heatmap.flat(), 0.0)
        self.heat = ScalarVolume.from_flat(flat, self.dims, heatmap.spacing)
        self.source = int(self.comp[np.argmax(flat[self.comp])])
        # seeds come from the thresholded foreground, never from the dilation margin
        self.foreground = self.in_comp & (flat >= params.binarize_threshold)
        if not self.foreground.any():
            self.foreground = self.in_comp
        self.times = fast_march(self.heat, self.comp, self.source).times.flat()

        finite = np.isfinite(self.times)
        fill = self.times[finite].max() + 10 * self.spacing.max()
        filled = np.where(finite, self.times, fill).reshape(self.dims, order="F")
        self.time_grid = filled
        self.grad = [
            np.gradient(filled, self.spacing[d], axis=d)
            if self.dims[d] >= 2
            else np.zeros_like(filled)
            for d in range(3)
        ]

        # diagonal-only voxels carry no arrival time and count as visited from the start
        self.visited = ~finite & self.in_comp
        self.owner = np.full(n, -1, dtype=np.int64)
        self.positions: List[np.ndarray] = []
        self.parents: List[int] = []
        self.radii: List[float] = []
        self.stats = TraceStats(n_voxels=len(self.comp))
        self.max_steps = int(math.ceil(3 * self.volume.extent.sum() / params.step_size))

    def _interp(self, grid, point) -> float:
        coords = (point / self.spacing - settings.VOXEL_CENTER_OFFSET).reshape(3, 1)
        return float(ndimage.map_coordinates(grid, coords, order=1, mode="nearest")[0])

    def _voxel_of(self, point) -> Optional[int]:
        ijk = np.floor(point / self.spacing).astype(np.int64)
        if np.any(ijk < 0) or np.any(ijk >= self.dims):
            return None
        return int(ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2]))

    def _center(self, v) -> np.ndarray:
        return self.volume.voxel_to_world(self.volume.voxel_index(v))

    def _neighbors(self, v) -> np.ndarray:
        ijk = self.volume.voxel_index(v)
        offsets = np.stack(np.meshgrid(*[np.arange(-1, 2)] * 3, indexing="ij"), -1).reshape(-1, 3)
        nb = ijk + offsets
        ok = np.all((nb >= 0) & (nb < self.dims), axis=1)
        lin = self.volume.linear_index(nb[ok])
        return np.sort(lin[(lin != v) & self.in_comp[lin]])

    def backtrack(self, seed) -> Tuple[Optional[List[np.ndarray]], int]:
        """Descends the arrival times from `seed`.

        Returns:
            tuple:
                the visited points (seed first) and the node row reached, -1 for the source;
                `(None, -1)` when the descent is trapped
        """
        x = self._center(seed)
        t_cur = float(self.times[seed])
        points = [x]
        source_pos = self._center(self.source)
        step = self.params.step_size
        for _ in range(self.max_steps):
            v = self._voxel_of(x)
            if self.positions and self.owner[v] >= 0:
                return points, int(self.owner[v])
            if not self.positions and (
                v == self.source or np.linalg.norm(x - source_pos) <= self.spacing.max()
            ):
                return points, -1

            moved = False
            g = np.array([self._interp(gd, x) for gd in self.grad])
            gnorm = np.linalg.norm(g)
            if gnorm > 1e-12:
                y = x - step * g / gnorm
                vy = self._voxel_of(y)
                if vy is not None and self.in_comp[vy]:
                    ty = self._interp(self.time_grid, y)
                    if ty < t_cur:
                        x, t_cur, moved = y, ty, True
            if not moved:
                nb = self._neighbors(v)
                if len(nb) == 0:
                    return None, -1
                best = nb[np.argmin(self.times[nb])]
                if not self.times[best] < t_cur:
                    return None, -1
                x, t_cur = self._center(best), float(self.times[best])
            points.append(x)
        return None, -1

    def estimate_radii(self, chain: np.ndarray) -> np.ndarray:
        """Distance along the path normals at which the heatmap drops below the threshold."""
        if len(chain) > 1:
            tangent = np.gradient(chain, axis=0)
        else:
            tangent = np.tile([1.0, 0.0, 0.0], (1, 1))
        tangent /= np.maximum(np.linalg.norm(tangent, axis=1, keepdims=True), 1e-12)
        helper = np.eye(3)[np.argmin(np.abs(tangent), axis=1)]
        n1 = np.cross(tangent, helper)
        n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
        n2 = np.cross(tangent, n1)
        normals = np.stack([n1, -n1, n2, -n2], axis=1)

        ray_step = 0.5 * self.spacing.min()
        radii = ray_step * np.arange(1, int(np.ceil(settings.HEATMAP_D_MAX / ray_step)) + 1)
        samples = chain[:, None, None, :] + normals[:, :, None, :] * radii[None, None, :, None]
        coords = (samples / self.spacing - settings.VOXEL_CENTER_OFFSET).reshape(-1, 3).T
        values = ndimage.map_coordinates(self.heat.data, coords, order=1, mode="constant")
        below = values.reshape(samples.shape[:3]) < self.params.binarize_threshold
        first = np.where(below.any(axis=2), below.argmax(axis=2), len(radii) - 1)
        return np.maximum(radii[first].mean(axis=1), 0.5 * self.spacing.min())

    def _mark(self, rows):
        extra = (self.params.dilation_radius + 1) * self.spacing.max()
        for row in rows:
            pos, reach = self.positions[row], self.radii[row] + extra
            lo = np.maximum(np.floor((pos - reach) / self.spacing - 0.5), 0).astype(np.int64)
            hi = np.minimum(np.ceil((pos + reach) / self.spacing - 0.5), np.asarray(self.dims) - 1)
            axes = [np.arange(lo[d], int(hi[d]) + 1) for d in range(3)]
            ijk = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
            lin = self.volume.linear_index(ijk)
            dist = np.linalg.norm(self.volume.voxel_to_world(ijk) - pos, axis=1)
            near = self.in_comp[lin] & (dist <= reach)
            self.visited[lin[near]] = True
            own = self.in_comp[lin] & (np.abs(ijk - np.floor(pos / self.spacing)).max(axis=1) <= 1)
            free = lin[own][self.owner[lin[own]] < 0]
            self.owner[free] = row

    def add_chain(self, chain: np.ndarray, parent_row: int):
        rows = []
        radii = self.estimate_radii(chain)
        for pos, radius in zip(chain, radii):
            self.positions.append(pos)
            self.radii.append(float(radius))
            self.parents.append(parent_row)
            parent_row = len(self.positions) - 1
            rows.append(parent_row)
        self._mark(rows)

    def run(self) -> VesselTree:
        p = self.params
        n_comp = len(self.comp)
        for _ in range(n_comp + 1):
            visited = self.visited[self.comp]
            self.stats.visited_fraction = float(visited.mean())
            if self.stats.visited_fraction >= p.coverage_stop:
                break
            candidates = self.comp[~visited & self.foreground[self.comp]]
            if len(candidates) == 0:
                break
            seed = int(candidates[np.argmax(self.times[candidates])])
            points, target = self.backtrack(seed)
            if points is None:
                self.visited[seed] = True
                self.stats.n_abandoned += 1
                continue

            anchor = self._center(self.source) if target < 0 else self.positions[target]
            chain = [pt for pt in points[::-1]]
            chain = _drop_duplicates([anchor] + chain)[1:]
            length = _polyline_length([anchor] + chain)
            self.stats.last_branch_len = length
            if length < p.min_branch_len or not chain:
                if not self.positions:
                    self.add_chain(anchor[None, :], -1)
                break

            if target < 0:
                self.add_chain(anchor[None, :], -1)
                target = 0
            self.add_chain(np.asarray(chain), target)
            self.stats.n_branches += 1

        if not self.positions:
            self.add_chain(self._center(self.source)[None, :], -1)
        self.stats.visited_fraction = float(self.visited[self.comp].mean())

        nodes = tuple(
            VesselNode(i + 1, settings.SWC_VESSEL_KIND, pos, r, par + 1 if par >= 0 else -1)
            for i, (pos, r, par) in enumerate(zip(self.positions, self.radii, self.parents))
        )
        return VesselTree(nodes)


def _drop_duplicates(points, tol=1e-9):
    out = [points[0]]
    for pt in points[1:]:
        if np.linalg.norm(pt - out[-1]) > tol:
            out.append(pt)
    return out


def _polyline_length(points) -> float:
    if len(points) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(np.asarray(points), axis=0), axis=1).sum())


def trace_component(heatmap: ScalarVolume, component, params: TracerParams, return_stats=False):
    """Traces one connected component into a single rooted tree.

    The source is the brightest component voxel. Seeds are the unvisited foreground voxels
    (heatmap at least `binarize_threshold`) with the largest arrival time, so no branch ends in
    the dilation margin; each seed is back-tracked down the arrival times until it reaches an
    already traced node (the new chain becomes its child) or the source (the first chain,
    rooted at the source). The voxels around each new chain are marked visited. Tracing stops
    once the visited fraction reaches `coverage_stop`, every foreground voxel is visited or a
    new branch is shorter than `min_branch_len`; trapped descents are abandoned and their seed
    marked visited.

    Args:
        heatmap (ScalarVolume): heatmap with values in [0, 1]
        component (np.ndarray): linear voxel indices of the component
        params (TracerParams): tracing parameters
        return_stats (bool): whether to also return the `TraceStats`

    Returns:
        VesselTree | tuple:
            the traced tree, and its stats if requested
    """
    if len(component) == 0:
        raise ValueError("Cannot trace an empty component")
    tracer = _ComponentTracer(heatmap, component, params)
    tree = tracer.run()
    if return_stats:
        return tree, tracer.stats
    return tree


def trace_all(heatmap: ScalarVolume, params: TracerParams, verbose=False) -> VesselTree:
    """Traces every connected component of the dilated heatmap foreground.

    Args:
        heatmap (ScalarVolume): heatmap with values in [0, 1]
        params (TracerParams): tracing parameters
        verbose (bool): show a progress bar over components

    Returns:
        VesselTree:
            the union forest with consecutive ids, empty if the mask is empty
    """
    params.validate()
    validate_heatmap(heatmap)
    mask = binarize_dilate(heatmap, params)
    comps = connected_components(mask, params.min_component_voxels)
    if not comps:
        warnings.warn("The binarized heatmap is empty, returning an empty forest", UserWarning)
        return empty_tree()

    trees = [
        trace_component(heatmap, comp, params)
        for comp in tqdm(comps, desc="Tracing components", disable=not verbose)
    ]
    return merge_forests(trees)

import math
import warnings
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from vesselprune import settings
from vesselprune.geometry import SegmentIndex, distance_field, voxel_centers
from vesselprune.vessel_tree import ScalarVolume, VesselNode, VesselTree, resample_polyline


@dataclass
class SynthParams:
    """Parameters of the random vessel forest generator.

    Args:
        rng_seed (int): seed of the generator
        n_trees (int): number of trees (roots) in the forest
        depth (int): maximal bifurcation depth, 0 for a single unbranched segment
        branch_len_range (tuple): `(min, max)` branch length in mm
        branch_angle_range (tuple): `(min, max)` angle between parent and child branch, degrees
        radius_root (float): radius of the root branch in mm
        radius_decay (float): radius multiplier per bifurcation level, in (0, 1]
        volume_dims (tuple): voxel counts of the scene
        spacing (tuple): mm per voxel
        margin (float): minimal distance of every node to the volume border in mm
        node_step (float): node spacing along generated branches in mm
    """

    rng_seed: int = 0
    n_trees: int = 2
    depth: int = 3
    branch_len_range: Tuple[float, float] = (10.0, 18.0)
    branch_angle_range: Tuple[float, float] = (25.0, 60.0)
    radius_root: float = 2.0
    radius_decay: float = 0.8
    volume_dims: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = settings.DEFAULT_SPACING
    margin: float = settings.HEATMAP_D_MAX
    node_step: float = 1.0

    def validate(self):
        lo, hi = self.branch_len_range
        if not 0 < lo <= hi:
            raise ValueError(f"branch_len_range: must satisfy 0 < min <= max, got {lo, hi}")
        lo, hi = self.branch_angle_range
        if not 0 <= lo <= hi <= 180:
            raise ValueError(
                f"branch_angle_range: must satisfy 0 <= min <= max <= 180, got {lo, hi}"
            )
        if self.n_trees < 1:
            raise ValueError(f"n_trees: must be positive, got {self.n_trees}")
        if self.depth < 0:
            raise ValueError(f"depth: must be non-negative, got {self.depth}")
        if not 0 < self.radius_decay <= 1:
            raise ValueError(f"radius_decay: must lie in (0, 1], got {self.radius_decay}")
        if not self.radius_root > 0:
            raise ValueError(f"radius_root: must be positive, got {self.radius_root}")
        if any(int(d) < 1 for d in self.volume_dims) or len(self.volume_dims) != 3:
            raise ValueError(f"volume_dims: must be 3 positive counts, got {self.volume_dims}")
        if any(not s > 0 for s in self.spacing) or len(self.spacing) != 3:
            raise ValueError(f"spacing: must be 3 positive values, got {self.spacing}")
        if self.margin < 0:
            raise ValueError(f"margin: must be non-negative, got {self.margin}")
        if not self.node_step > 0:
            raise ValueError(f"node_step: must be positive, got {self.node_step}")


@dataclass
class HeatmapParams:
    """Decay rate `alpha` (unitless) and heatmap radius `d_max` (mm) of the centerline heatmap."""

    alpha: float = settings.HEATMAP_ALPHA
    d_max: float = settings.HEATMAP_D_MAX

    def validate(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha: must be positive, got {self.alpha}")
        if not self.d_max > 0:
            raise ValueError(f"d_max: must be positive, got {self.d_max}")


@dataclass
class CorruptionParams:
    """Knobs emulating the errors of a predicted heatmap.

    Args:
        noise_sigma (float): standard deviation of additive Gaussian noise
        dropout_count (int): number of balls zeroed around random centerline points
        dropout_radius (float): ball radius in mm
        spurious_count (int): number of false tubes injected away from the true tree
        spurious_length (float): polyline length of each false tube in mm
        spurious_intensity (float): peak value of a false tube
        spurious_pieces (int): straight pieces per false tube polyline
        max_attempts (int): placement attempts per false tube before it is skipped
    """

    noise_sigma: float = 0.0
    dropout_count: int = 0
    dropout_radius: float = 3.0
    spurious_count: int = 0
    spurious_length: float = 15.0
    spurious_intensity: float = settings.SPURIOUS_TUBE_INTENSITY
    spurious_pieces: int = 3
    max_attempts: int = 200

    def validate(self):
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma: must be non-negative, got {self.noise_sigma}")
        for name in ("dropout_count", "spurious_count"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be non-negative, got {getattr(self, name)}")
        for name in ("dropout_radius", "spurious_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name}: must be positive, got {getattr(self, name)}")
        if not 0 < self.spurious_intensity <= 1:
            raise ValueError(
                f"spurious_intensity: must lie in (0, 1], got {self.spurious_intensity}"
            )
        if self.spurious_pieces < 1 or self.max_attempts < 1:
            raise ValueError("spurious_pieces and max_attempts must be positive")


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    norm = np.linalg.norm(v)
    while norm < 1e-12:
        v = rng.normal(size=3)
        norm = np.linalg.norm(v)
    return v / norm


def rotate_away(direction, theta, phi) -> np.ndarray:
    """Tilts a unit `direction` by angle `theta` (radians) around azimuth `phi` (radians)."""
    helper = np.eye(3)[np.argmin(np.abs(direction))]
    u = np.cross(direction, helper)
    u /= np.linalg.norm(u)
    v = np.cross(direction, u)
    out = math.cos(theta) * direction + math.sin(theta) * (math.cos(phi) * u + math.sin(phi) * v)
    return out / np.linalg.norm(out)


def box_reach(start, direction, lo, hi) -> float:
    """Distance travelled from `start` along `direction` before leaving the box `[lo, hi]`."""
    reach = np.inf
    for d in range(3):
        if direction[d] > 1e-12:
            reach = min(reach, (hi[d] - start[d]) / direction[d])
        elif direction[d] < -1e-12:
            reach = min(reach, (lo[d] - start[d]) / direction[d])
    return max(float(reach), 0.0)


class _ForestBuilder:
    def __init__(self, params: SynthParams, rng: np.random.Generator, lo, hi):
        self.params = params
        self.rng = rng
        self.lo = lo
        self.hi = hi
        self.nodes: List[VesselNode] = []

    def add(self, pos, radius, parent) -> int:
        node_id = len(self.nodes) + 1
        self.nodes.append(VesselNode(node_id, settings.SWC_VESSEL_KIND, pos, radius, parent))
        return node_id

    def root_direction(self, root) -> np.ndarray:
        best, best_reach = None, -1.0
        for _ in range(100):
            direction = random_unit_vector(self.rng)
            reach = box_reach(root, direction, self.lo, self.hi)
            if reach >= self.params.branch_len_range[0]:
                return direction
            if reach > best_reach:
                best, best_reach = direction, reach
        return best

    def grow(self, parent_id, start, direction, level):
        p = self.params
        drawn = self.rng.uniform(*p.branch_len_range)
        length = min(drawn, box_reach(start, direction, self.lo, self.hi))
        # bifurcation angles are drawn before any recursion so the draw order stays fixed
        azimuth = self.rng.uniform(0, 2 * math.pi)
        thetas = np.radians(self.rng.uniform(*p.branch_angle_range, size=2))
        if length < p.node_step:
            return

        radius = p.radius_root * p.radius_decay**level
        pieces = math.ceil(length / p.node_step)
        node_id = parent_id
        for k in range(1, pieces + 1):
            node_id = self.add(start + direction * (length * k / pieces), radius, node_id)
        end = start + direction * length

        if level < p.depth:
            for theta, phi in zip(thetas, (azimuth, azimuth + math.pi)):
                self.grow(node_id, end, rotate_away(direction, theta, phi), level + 1)


def generate_forest(params: SynthParams) -> VesselTree:
    """Generates a random forest of recursively bifurcating straight branches.

    Each tree starts at a uniformly drawn root, grows a branch of random length and splits into
    two children tilted by random angles on opposite azimuths, until `params.depth` levels are
    reached. Branches are clipped to the volume shrunk by `params.margin`; clipped branches
    shorter than one node step are dropped.

    Args:
        params (SynthParams): generator parameters

    Returns:
        VesselTree:
            the forest, with exactly `params.n_trees` roots

    Raises:
        ValueError:
            if the volume is too small to respect the margin
    """
    params.validate()
    extent = np.asarray(params.volume_dims, dtype=np.float64) * np.asarray(params.spacing)
    lo = np.full(3, float(params.margin))
    hi = extent - params.margin
    if np.any(hi - lo < params.node_step):
        raise ValueError(
            f"Volume extent {extent.tolist()} mm is too small for a margin of {params.margin} mm"
        )

    rng = np.random.default_rng(params.rng_seed)
    builder = _ForestBuilder(params, rng, lo, hi)
    for _ in range(params.n_trees):
        root = rng.uniform(lo, hi)
        direction = builder.root_direction(root)
        root_id = builder.add(root, params.radius_root, -1)
        builder.grow(root_id, root, direction, 0)

    return VesselTree(tuple(builder.nodes))


def heatmap_profile(dist, hp: HeatmapParams) -> np.ndarray:
    """Normalized centerline heatmap value for centerline distances `dist` in mm.

    `exp(alpha * (1 - D / d_max)) / exp(alpha)` inside the heatmap radius, 0 beyond it.
    """
    dist = np.asarray(dist, dtype=np.float64)
    out = np.zeros(dist.shape)
    inside = dist <= hp.d_max
    out[inside] = np.exp(hp.alpha * (1 - dist[inside] / hp.d_max)) / np.exp(hp.alpha)
    return out


def compute_heatmap(tree: VesselTree, dims, spacing, hp: HeatmapParams) -> ScalarVolume:
    """Computes the centerline heatmap of a forest.

    `D(p)` is the distance from each voxel center to the nearest parent-child segment.

    Args:
        tree (VesselTree): the ground-truth forest
        dims (tuple): voxel counts
        spacing (tuple): mm per voxel
        hp (HeatmapParams): decay rate and heatmap radius

    Returns:
        ScalarVolume:
            heatmap with values in [0, 1], 1 exactly on the centerline
    """
    hp.validate()
    if len(tree) == 0:
        raise ValueError("Cannot compute a heatmap for an empty tree")
    field = distance_field(*tree.segment_endpoints(), dims, spacing, hp.d_max)
    return ScalarVolume(heatmap_profile(field, hp), spacing)


def _spurious_polyline(rng, params: CorruptionParams, lo, hi) -> np.ndarray:
    piece = params.spurious_length / params.spurious_pieces
    points = [rng.uniform(lo, hi)]
    direction = random_unit_vector(rng)
    for _ in range(params.spurious_pieces):
        points.append(points[-1] + direction * piece)
        direction = rotate_away(direction, rng.uniform(0, math.pi / 4), rng.uniform(0, 2 * math.pi))
    return np.asarray(points)


def _clear_of_tree(polyline, vol: ScalarVolume, tree, hp: HeatmapParams) -> bool:
    step = min(vol.spacing) / 2
    samples = [polyline[:1]]
    for a, b in zip(polyline[:-1], polyline[1:]):
        n = max(1, math.ceil(np.linalg.norm(b - a) / step))
        samples.append(a + (b - a) * (np.arange(1, n + 1)[:, None] / n))
    samples = np.concatenate(samples)
    if tree is not None and len(tree):
        return bool(np.all(SegmentIndex.from_tree(tree).query(samples) > hp.d_max))
    idx = vol.containing_voxel(samples)
    return bool(np.all(vol.data[idx[:, 0], idx[:, 1], idx[:, 2]] == 0))


def corrupt_heatmap(
    vol: ScalarVolume,
    rng_seed,
    params: CorruptionParams,
    hp: HeatmapParams = None,
    tree: VesselTree = None,
    return_polylines=False,
):
    """Emulates an imperfect heatmap prediction.

    Applies, in order: dropout balls zeroed around random centerline points, additive spurious
    tubes with the heatmap profile scaled by `spurious_intensity` along random polylines clear
    of the true tree, and additive Gaussian noise; the result is clamped to [0, 1].

    Args:
        vol (ScalarVolume): the clean heatmap
        rng_seed (int): seed of all random draws
        params (CorruptionParams): corruption knobs
        hp (HeatmapParams): profile of the spurious tubes, defaults to `HeatmapParams()`
        tree (VesselTree): the true forest; centerline points and the clearance test come from
            it when given, otherwise from the heatmap ridge and support
        return_polylines (bool): whether to also return the injected polylines

    Returns:
        ScalarVolume | tuple:
            the corrupted heatmap, and the list of `(P, 3)` spurious polylines if requested
    """
    params.validate()
    hp = hp if hp is not None else HeatmapParams()
    rng = np.random.default_rng(rng_seed)
    data = np.array(vol.data)
    polylines = []

    if params.dropout_count > 0:
        if tree is not None and len(tree):
            pool = resample_polyline(tree, min(vol.spacing)).positions
        else:
            pool = vol.voxel_to_world(np.argwhere(data >= data.max())) if data.max() > 0 else []
        if len(pool) == 0:
            warnings.warn("No centerline points found, skipping heatmap dropout", UserWarning)
        else:
            centers = voxel_centers(vol.dims, vol.spacing)
            for _ in range(params.dropout_count):
                c = pool[rng.integers(len(pool))]
                inside = np.sum((centers - c) ** 2, axis=-1) <= params.dropout_radius**2
                data[inside] = 0.0

    lo = np.full(3, hp.d_max)
    hi = vol.extent - hp.d_max
    for tube in range(params.spurious_count):
        for _ in range(params.max_attempts):
            polyline = _spurious_polyline(rng, params, lo, hi)
            in_box = np.all((polyline >= lo) & (polyline <= hi))
            if in_box and _clear_of_tree(polyline, vol, tree, hp):
                break
        else:
            warnings.warn(
                f"Could not place spurious tube {tube} after {params.max_attempts} attempts",
                UserWarning,
            )
            continue
        polylines.append(polyline)
        field = distance_field(polyline[:-1], polyline[1:], vol.dims, vol.spacing, hp.d_max)
        data += params.spurious_intensity * heatmap_profile(field, hp)

    if params.noise_sigma > 0:
        data += rng.normal(0.0, params.noise_sigma, size=data.shape)

    out = vol.with_data(np.clip(data, 0.0, 1.0))
    if return_polylines:
        return out, polylines
    return out

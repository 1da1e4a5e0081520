import dataclasses
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import networkx as nx
import numpy as np
from scipy import ndimage

from vesselprune import settings
from vesselprune.geometry import SegmentIndex
from vesselprune.vessel_tree import FeatureStack, ScalarVolume, VesselTree, resample_polyline


SCENE_FIELD = "{scene}"


@dataclass
class DualGraphParams:
    """Segmenting and labeling parameters.

    Args:
        sampling_length (float): maximal branch segment length in mm
        nmd (float): node matching distance in mm for the soft targets
        resample_step (float): node spacing the forests are resampled to before segmenting
        feature_volumes (tuple): CVOL path templates, one per feature layer, where `{scene}`
            stands for the scene name; when given they replace the filter bank
    """

    sampling_length: float = settings.SAMPLING_LENGTH
    nmd: float = settings.NODE_MATCHING_DISTANCE
    resample_step: float = settings.RESAMPLE_STEP
    feature_volumes: Tuple[str, ...] = ()

    def validate(self):
        for name in ("sampling_length", "nmd", "resample_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name}: must be positive, got {getattr(self, name)}")
        for template in self.feature_volumes:
            if not isinstance(template, str) or SCENE_FIELD not in template:
                raise ValueError(
                    f"feature_volumes: path templates must contain {SCENE_FIELD}, got {template!r}"
                )

    def feature_paths(self, scene) -> List[str]:
        return [template.replace(SCENE_FIELD, scene) for template in self.feature_volumes]


@dataclass(frozen=True)
class Segment:
    """A piece of a traced branch.

    Args:
        id (int): 0-based segment index
        node_ids (tuple): tree node ids from the proximal to the distal end
        positions (np.ndarray): `(n, 3)` node coordinates in mm
        length (float): summed distance between consecutive nodes
    """

    id: int
    node_ids: Tuple[int, ...]
    positions: np.ndarray
    length: float

    @property
    def endpoints(self) -> Tuple[int, int]:
        return self.node_ids[0], self.node_ids[-1]


@dataclass(frozen=True)
class SegmentSet:
    """Ordered branch segments partitioning a forest."""

    segments: Tuple[Segment, ...]
    sampling_length: float

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __getitem__(self, i) -> Segment:
        return self.segments[i]

    @property
    def lengths(self) -> np.ndarray:
        return np.array([s.length for s in self.segments], dtype=np.float64)


def _branch_paths(forest: VesselTree) -> List[List[int]]:
    """Row paths between critical nodes, proximal first, in depth-first node order."""
    children = forest.children
    paths = []
    for root in forest.roots:
        if not children[root]:
            paths.append([root])
            continue
        stack = [root]
        while stack:
            start = stack.pop()
            junctions = []
            for child in children[start]:
                path = [start, child]
                while len(children[path[-1]]) == 1:
                    path.append(children[path[-1]][0])
                paths.append(path)
                if children[path[-1]]:
                    junctions.append(path[-1])
            stack.extend(reversed(junctions))
    return paths


def _cut_path(path_pos: np.ndarray, sampling_length: float) -> List[Tuple[int, int]]:
    """Greedy proximal-to-distal cut points as `(start, end)` row pairs of the path."""
    steps = np.linalg.norm(np.diff(path_pos, axis=0), axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(steps)])
    pieces = []
    start = 0
    last = len(path_pos) - 1
    while start < last:
        reach = cumulative[start] + sampling_length + 1e-9
        end = int(np.searchsorted(cumulative, reach, side="right")) - 1
        # an edge longer than the sampling length still forms its own piece
        end = min(max(end, start + 1), last)
        pieces.append((start, end))
        start = end
    return pieces


def segment_branches(forest: VesselTree, sampling_length) -> SegmentSet:
    """Breaks a forest into branch segments of length at most `sampling_length`.

    The forest is decomposed into maximal paths between critical nodes (roots, bifurcations
    and tips), each cut greedily from its proximal end. Cut and junction nodes are endpoints of
    every adjacent segment; an isolated root forms a single-node segment.

    Args:
        forest (VesselTree): the forest, resampled to at most 1 mm node spacing
        sampling_length (float): maximal segment length in mm

    Returns:
        SegmentSet:
            the segments with 0-based ids
    """
    if not sampling_length > 0:
        raise ValueError(f"sampling_length must be positive, got {sampling_length}")

    positions = forest.positions
    ids = forest.ids
    segments = []
    for path in _branch_paths(forest):
        path_pos = positions[path]
        if len(path) == 1:
            segments.append(Segment(len(segments), (int(ids[path[0]]),), path_pos, 0.0))
            continue
        for start, end in _cut_path(path_pos, sampling_length):
            piece = path_pos[start : end + 1]
            length = float(np.linalg.norm(np.diff(piece, axis=0), axis=1).sum())
            node_ids = tuple(int(i) for i in ids[path[start : end + 1]])
            segments.append(Segment(len(segments), node_ids, piece, length))
    return SegmentSet(tuple(segments), float(sampling_length))


@dataclass(frozen=True)
class DualGraph:
    """One node per branch segment; edges join segments sharing an endpoint node.

    Args:
        n_nodes (int): number of segments
        edges (np.ndarray): `(E, 2)` sorted pairs `i < j`
        segment_node_ids (tuple): tree node ids of each segment
        lengths (np.ndarray): segment lengths in mm
        features (np.ndarray): optional `(n_nodes, F)` feature matrix
        targets (np.ndarray): optional soft targets in [0, 1]
        scores (np.ndarray): optional predicted confidences in [0, 1]
    """

    n_nodes: int
    edges: np.ndarray
    segment_node_ids: Tuple[Tuple[int, ...], ...]
    lengths: np.ndarray
    features: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "lengths", np.asarray(self.lengths, dtype=np.float64))
        if edges.size and (edges.min() < 0 or edges.max() >= self.n_nodes):
            raise ValueError(f"Edge endpoints must lie in [0, {self.n_nodes})")
        for name in ("features", "targets", "scores"):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value, dtype=np.float64)
            if len(value) != self.n_nodes:
                raise ValueError(f"Got {len(value)} {name} for {self.n_nodes} dual nodes")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"Dual graph {name} must be finite")
            if name != "features" and value.size and (value.min() < 0 or value.max() > 1):
                raise ValueError(f"Dual graph {name} must lie in [0, 1]")
            object.__setattr__(self, name, value)

    def replace(self, **changes) -> "DualGraph":
        return dataclasses.replace(self, **changes)

    def neighbor_table(self) -> Tuple[np.ndarray, np.ndarray]:
        """Padded self-inclusive neighborhoods.

        Returns:
            tuple:
                `(n, D)` neighbor indices (self first, then ascending) and the `(n, D)` mask of
                valid entries, `D` being the largest neighborhood size
        """
        neighbors = [[i] for i in range(self.n_nodes)]
        for i, j in self.edges:
            neighbors[i].append(int(j))
            neighbors[j].append(int(i))
        width = max((len(nb) for nb in neighbors), default=1)
        table = np.zeros((self.n_nodes, width), dtype=np.int64)
        mask = np.zeros((self.n_nodes, width), dtype=bool)
        for i, nb in enumerate(neighbors):
            nb = [i] + sorted(set(nb[1:]))
            table[i, : len(nb)] = nb
            mask[i, : len(nb)] = True
        return table, mask

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n_nodes))
        graph.add_edges_from(self.edges.tolist())
        return graph

    def n_components(self) -> int:
        """Number of connected components, one per tree of the segmented forest."""
        if self.n_nodes == 0:
            return 0
        return nx.number_connected_components(self.to_networkx())

    def to_json_dict(self) -> Dict:
        nodes = []
        for i in range(self.n_nodes):
            nodes.append(
                {
                    "id": i,
                    "segment_node_ids": list(self.segment_node_ids[i]),
                    "length": float(self.lengths[i]),
                    "feature": None if self.features is None else self.features[i].tolist(),
                    "target": None if self.targets is None else float(self.targets[i]),
                    "score": None if self.scores is None else float(self.scores[i]),
                }
            )
        return {"nodes": nodes, "edges": self.edges.tolist()}

    @classmethod
    def from_json_dict(cls, data) -> "DualGraph":
        nodes = sorted(data["nodes"], key=lambda n: n["id"])

        def column(key):
            values = [n.get(key) for n in nodes]
            if not values or any(v is None for v in values):
                return None
            return np.asarray(values, dtype=np.float64)

        return cls(
            n_nodes=len(nodes),
            edges=np.asarray(data["edges"], dtype=np.int64).reshape(-1, 2),
            segment_node_ids=tuple(tuple(int(i) for i in n["segment_node_ids"]) for n in nodes),
            lengths=np.asarray([n["length"] for n in nodes], dtype=np.float64),
            features=column("feature"),
            targets=column("target"),
            scores=column("score"),
        )


def build_dual(segments: SegmentSet) -> DualGraph:
    """Connects every pair of segments sharing an endpoint node.

    Args:
        segments (SegmentSet): the segments

    Returns:
        DualGraph:
            the featureless dual graph
    """
    by_endpoint: Dict[int, List[int]] = {}
    for seg in segments:
        for node_id in set(seg.endpoints):
            by_endpoint.setdefault(node_id, []).append(seg.id)

    edges = set()
    for members in by_endpoint.values():
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                edges.add((min(members[a], members[b]), max(members[a], members[b])))

    return DualGraph(
        n_nodes=len(segments),
        edges=np.array(sorted(edges), dtype=np.int64).reshape(-1, 2),
        segment_node_ids=tuple(seg.node_ids for seg in segments),
        lengths=segments.lengths,
    )


def build_feature_volumes(heatmap: ScalarVolume) -> FeatureStack:
    """Filter-bank stand-in for the vessel enhancement CNN activations.

    Layers: the raw heatmap, Gaussian smoothings with sigma 1 and 2 voxels and the gradient
    magnitude of the sigma 1 layer rescaled to [0, 1] by its maximum.

    Args:
        heatmap (ScalarVolume): the heatmap

    Returns:
        FeatureStack:
            the four layers, named as in `settings.FEATURE_CHANNELS`
    """
    data = heatmap.data
    smooth_1 = ndimage.gaussian_filter(
        data, sigma=1, mode="nearest", truncate=settings.GAUSSIAN_TRUNCATE
    )
    smooth_2 = ndimage.gaussian_filter(
        data, sigma=2, mode="nearest", truncate=settings.GAUSSIAN_TRUNCATE
    )
    # axes with a single voxel carry no gradient
    axes = [d for d in range(3) if data.shape[d] >= 2]
    grad = np.zeros_like(smooth_1)
    if axes:
        parts = np.gradient(smooth_1, axis=axes)
        parts = parts if isinstance(parts, (list, tuple)) else [parts]
        grad = np.sqrt(sum(g**2 for g in parts))
    peak = grad.max() if grad.size else 0.0
    grad = grad / peak if peak > 0 else np.zeros_like(grad)

    layers = tuple(heatmap.with_data(layer) for layer in (data, smooth_1, smooth_2, grad))
    return FeatureStack(layers, tuple(settings.FEATURE_CHANNELS))


def neighborhood_means(stack: FeatureStack) -> List[np.ndarray]:
    """Mean over the 3x3x3 block around each voxel, per layer, replicating the border."""
    return [ndimage.uniform_filter(layer.data, size=3, mode="nearest") for layer in stack.layers]


def aggregate_features(segments: SegmentSet, stack: FeatureStack) -> np.ndarray:
    """Averages the 27-voxel layer means over each segment's nodes.

    Args:
        segments (SegmentSet): the segments
        stack (FeatureStack): the feature layers

    Returns:
        np.ndarray:
            `(n_segments, n_layers)` features, one channel per layer
    """
    means = neighborhood_means(stack)
    reference = stack.layers[0]
    features = np.zeros((len(segments), stack.n_layers))
    for seg in segments:
        if len(seg.positions) == 0:
            raise ValueError(f"Segment {seg.id} has no nodes")
        i, j, k = reference.containing_voxel(seg.positions).T
        values = np.stack([m[i, j, k] for m in means], axis=1)
        # sorted so the mean does not depend on node order
        features[seg.id] = np.sort(values, axis=0).mean(axis=0)
    return features


def label_targets(segments: SegmentSet, gt: VesselTree, nmd) -> np.ndarray:
    """Fraction of each segment's nodes within `nmd` of the ground-truth polyline.

    Args:
        segments (SegmentSet): the segments
        gt (VesselTree): ground truth, resampled to at most 1 mm node spacing
        nmd (float): node matching distance in mm

    Returns:
        np.ndarray:
            per-segment targets in [0, 1], all zero for an empty ground truth
    """
    if not nmd > 0:
        raise ValueError(f"nmd must be positive, got {nmd}")
    if len(segments) == 0:
        return np.zeros(0)
    if len(gt) == 0:
        return np.zeros(len(segments))

    index = SegmentIndex.from_tree(gt)
    counts = [len(seg.positions) for seg in segments]
    dist = index.query(np.concatenate([seg.positions for seg in segments]))
    matched = (dist <= nmd).astype(np.float64)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return np.add.reduceat(matched, offsets) / np.asarray(counts)


def featurize_forest(
    forest: VesselTree,
    heatmap: ScalarVolume,
    params: DualGraphParams,
    gt: VesselTree = None,
    stack: FeatureStack = None,
) -> Tuple[VesselTree, SegmentSet, DualGraph]:
    """Resamples, segments, and featurizes a traced forest, labeling it if `gt` is given.

    Args:
        forest (VesselTree): the traced forest
        heatmap (ScalarVolume): heatmap the default feature stack is built from
        params (DualGraphParams): segmenting and labeling parameters
        gt (VesselTree): optional ground truth for the soft targets
        stack (FeatureStack): optional external feature stack replacing the filter bank

    Returns:
        tuple:
            the resampled forest, its segments and the dual graph
    """
    params.validate()
    resampled = resample_polyline(forest, params.resample_step)
    segments = segment_branches(resampled, params.sampling_length)
    graph = build_dual(segments)
    if stack is None:
        stack = build_feature_volumes(heatmap)
    graph = graph.replace(features=aggregate_features(segments, stack))
    if gt is not None:
        gt = resample_polyline(gt, params.resample_step)
        graph = graph.replace(targets=label_targets(segments, gt, params.nmd))
    return resampled, segments, graph


def segments_from_dual(forest: VesselTree, graph: DualGraph) -> SegmentSet:
    """Rebuilds the segments a dual graph was derived from out of the segmented forest."""
    positions = forest.positions
    index = forest.index
    segments = []
    for i, node_ids in enumerate(graph.segment_node_ids):
        missing = [n for n in node_ids if n not in index]
        if missing:
            raise ValueError(f"Segment {i} references node ids {missing} absent from the forest")
        rows = [index[n] for n in node_ids]
        segments.append(Segment(i, tuple(node_ids), positions[rows], float(graph.lengths[i])))
    return SegmentSet(tuple(segments), math.nan)

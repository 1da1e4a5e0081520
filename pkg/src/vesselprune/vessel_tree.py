import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from vesselprune import settings


class SwcStructureError(ValueError):
    """Raised when parent links do not form a valid forest."""


def _as_spacing(spacing) -> Tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError(f"spacing must have 3 components, got {len(spacing)}")
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing components must be strictly positive, got {spacing}")
    return spacing


@dataclass(frozen=True)
class ScalarVolume:
    """A 3D voxel grid with physical spacing.

    Voxel `(i, j, k)` is centered at world position `((i, j, k) + 0.5) * spacing` in mm. The
    linear voxel index used for tie-breaking and serialization is x-fastest
    (`i + nx * (j + ny * k)`).

    Args:
        data (np.ndarray): scalar values indexed as `data[i, j, k]`, copied and made read-only
        spacing (tuple): mm per voxel along x, y, z
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = settings.DEFAULT_SPACING

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"Volume data must be 3 dimensional, got shape {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @classmethod
    def from_flat(cls, flat, dims, spacing=settings.DEFAULT_SPACING):
        """Builds a volume from x-fastest row-major values.

        Args:
            flat (array_like): `nx * ny * nz` scalar values
            dims (tuple): voxel counts `(nx, ny, nz)`
            spacing (tuple): mm per voxel

        Returns:
            ScalarVolume:
                the volume
        """
        flat = np.asarray(flat, dtype=np.float64).ravel()
        dims = tuple(int(d) for d in dims)
        if flat.size != int(np.prod(dims)):
            raise ValueError(
                f"Data length {flat.size} does not match dims {dims} ({int(np.prod(dims))})"
            )
        return cls(flat.reshape(dims, order="F"), spacing)

    @classmethod
    def zeros(cls, dims, spacing=settings.DEFAULT_SPACING):
        return cls(np.zeros(tuple(int(d) for d in dims)), spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def n_voxels(self) -> int:
        return int(self.data.size)

    @property
    def extent(self) -> np.ndarray:
        """World size of the grid in mm along each axis."""
        return np.asarray(self.dims, dtype=np.float64) * np.asarray(self.spacing)

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    def linear_index(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        return np.ravel_multi_index(tuple(np.moveaxis(ijk, -1, 0)), self.dims, order="F")

    def voxel_index(self, linear) -> np.ndarray:
        """Converts linear indices to `(..., 3)` voxel indices."""
        return np.stack(np.unravel_index(np.asarray(linear), self.dims, order="F"), axis=-1)

    def voxel_to_world(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.float64)
        return (ijk + settings.VOXEL_CENTER_OFFSET) * np.asarray(self.spacing)

    def world_to_voxel(self, pos) -> np.ndarray:
        """Continuous voxel coordinates of world positions, the inverse of `voxel_to_world`."""
        pos = np.asarray(pos, dtype=np.float64)
        return pos / np.asarray(self.spacing) - settings.VOXEL_CENTER_OFFSET

    def containing_voxel(self, pos) -> np.ndarray:
        """Integer index of the voxel containing each world position, clamped to the grid."""
        ijk = np.floor(np.asarray(pos, dtype=np.float64) / np.asarray(self.spacing))
        return np.clip(ijk, 0, np.asarray(self.dims) - 1).astype(np.int64)

    def with_data(self, data) -> "ScalarVolume":
        return ScalarVolume(data, self.spacing)


def validate_heatmap(vol: ScalarVolume):
    """Verifies that every voxel of a heatmap volume lies in [0, 1].

    Args:
        vol (ScalarVolume): the heatmap

    Raises:
        ValueError:
            if a value is outside [0, 1] or not finite
    """
    data = vol.data
    if data.size and (not np.all(np.isfinite(data)) or data.min() < 0 or data.max() > 1):
        raise ValueError(
            f"Heatmap values must lie in [0, 1], found range [{data.min()}, {data.max()}]"
        )


@dataclass(frozen=True)
class FeatureStack:
    """Ordered feature volumes sampled for the dual graph nodes.

    Args:
        layers (tuple): `ScalarVolume` per feature layer, identical dims and spacing
        channel_names (tuple): one label per layer
    """

    layers: Tuple[ScalarVolume, ...]
    channel_names: Tuple[str, ...] = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if len(layers) == 0:
            raise ValueError("A feature stack needs at least one layer")
        names = self.channel_names
        if names is None:
            names = tuple(f"layer_{i}" for i in range(len(layers)))
        names = tuple(names)
        if len(names) != len(layers):
            raise ValueError(f"Got {len(names)} channel names for {len(layers)} layers")
        for name, layer in zip(names, layers):
            if layer.dims != layers[0].dims or layer.spacing != layers[0].spacing:
                raise ValueError(
                    f"Feature layer {name} has dims {layer.dims} / spacing {layer.spacing}, "
                    f"expected {layers[0].dims} / {layers[0].spacing}"
                )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "channel_names", names)

    @property
    def n_layers(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class VesselNode:
    """One SWC node: id, structure tag, position (mm), radius (mm), parent id or -1."""

    id: int
    kind: int
    pos: Tuple[float, float, float]
    radius: float
    parent: int = -1

    def __post_init__(self):
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "kind", int(self.kind))
        object.__setattr__(self, "pos", tuple(float(p) for p in self.pos))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "parent", int(self.parent))


@dataclass(frozen=True)
class VesselTree:
    """An SWC-style forest of vessel nodes.

    Node order is preserved as given. The parent links are validated on construction: ids must
    be unique positive integers, parents must exist, the links must be acyclic and every
    parent-child distance finite and positive.

    Args:
        nodes (tuple): the `VesselNode` list
    """

    nodes: Tuple[VesselNode, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        _validate_forest(self)

    @classmethod
    def from_arrays(cls, ids, kinds, positions, radii, parents):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        return cls(
            tuple(
                VesselNode(i, k, p, r, par)
                for i, k, p, r, par in zip(ids, kinds, positions, radii, parents)
            )
        )

    def __len__(self):
        return len(self.nodes)

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([n.id for n in self.nodes], dtype=np.int64)

    @cached_property
    def parent_ids(self) -> np.ndarray:
        return np.array([n.parent for n in self.nodes], dtype=np.int64)

    @cached_property
    def kinds(self) -> np.ndarray:
        return np.array([n.kind for n in self.nodes], dtype=np.int64)

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array([n.pos for n in self.nodes], dtype=np.float64).reshape(-1, 3)

    @cached_property
    def radii(self) -> np.ndarray:
        return np.array([n.radius for n in self.nodes], dtype=np.float64)

    @cached_property
    def index(self) -> Dict[int, int]:
        """Maps node id to row index."""
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def parent_index(self) -> np.ndarray:
        """Row index of each node's parent, -1 for roots."""
        return np.array(
            [self.index[n.parent] if n.parent != -1 else -1 for n in self.nodes], dtype=np.int64
        )

    @cached_property
    def children(self) -> List[List[int]]:
        """Row indices of each node's children, in node order."""
        kids = [[] for _ in self.nodes]
        for i, p in enumerate(self.parent_index):
            if p >= 0:
                kids[p].append(i)
        return kids

    @cached_property
    def roots(self) -> List[int]:
        return [i for i, p in enumerate(self.parent_index) if p < 0]

    def edge_lengths(self) -> np.ndarray:
        """Length of the edge from each non-root node to its parent, in node order."""
        child = np.flatnonzero(self.parent_index >= 0)
        diff = self.positions[child] - self.positions[self.parent_index[child]]
        return np.linalg.norm(diff, axis=1)

    @property
    def total_length(self) -> float:
        return float(self.edge_lengths().sum())

    def segment_endpoints(self) -> Tuple[np.ndarray, np.ndarray]:
        """Polyline pieces of the forest as `(start, end)` arrays.

        Every parent-child edge contributes one piece; a node without parent or children
        contributes a zero-length piece so that isolated points are part of the polyline.

        Returns:
            tuple:
                `(M, 3)` start and end coordinates
        """
        child = np.flatnonzero(self.parent_index >= 0)
        starts = [self.positions[self.parent_index[child]]]
        ends = [self.positions[child]]
        isolated = [i for i in self.roots if not self.children[i]]
        if isolated:
            starts.append(self.positions[isolated])
            ends.append(self.positions[isolated])
        return np.concatenate(starts).reshape(-1, 3), np.concatenate(ends).reshape(-1, 3)


def _validate_forest(tree: VesselTree):
    ids = [n.id for n in tree.nodes]
    if any(i < 1 for i in ids):
        raise SwcStructureError(f"Node ids must be positive integers, got {min(ids)}")
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise SwcStructureError(f"Duplicate node ids: {dupes}")

    known = set(ids)
    for n in tree.nodes:
        if n.parent != -1 and n.parent not in known:
            raise SwcStructureError(f"Node {n.id} references missing parent {n.parent}")
        if n.parent == n.id:
            raise SwcStructureError(f"Node {n.id} is its own parent (cycle)")

    # every node must be reachable from a root, otherwise the links contain a cycle
    reached = 0
    stack = list(tree.roots)
    while stack:
        i = stack.pop()
        reached += 1
        stack.extend(tree.children[i])
    if reached != len(tree.nodes):
        raise SwcStructureError(
            f"Parent links contain a cycle: {len(tree.nodes) - reached} nodes are not reachable"
            " from a root"
        )

    if len(tree.nodes) and not np.all(np.isfinite(tree.positions)):
        raise SwcStructureError("Node positions must be finite")
    lengths = tree.edge_lengths()
    if lengths.size and not np.all(lengths > 0):
        bad = tree.ids[np.flatnonzero(tree.parent_index >= 0)[lengths <= 0]]
        raise SwcStructureError(f"Nodes {bad.tolist()} coincide with their parent")


def empty_tree() -> VesselTree:
    return VesselTree(())


def merge_forests(trees: Iterable[VesselTree]) -> VesselTree:
    """Concatenates forests, renumbering ids consecutively from 1 in concatenation order.

    Args:
        trees (Iterable[VesselTree]): the forests to merge

    Returns:
        VesselTree:
            the union forest with unique ids
    """
    nodes = []
    offset = 0
    for tree in trees:
        remap = {n.id: offset + i + 1 for i, n in enumerate(tree.nodes)}
        for n in tree.nodes:
            parent = remap[n.parent] if n.parent != -1 else -1
            nodes.append(VesselNode(remap[n.id], n.kind, n.pos, n.radius, parent))
        offset += len(tree.nodes)
    return VesselTree(tuple(nodes))


def subset_tree(tree: VesselTree, keep: Sequence[bool]) -> VesselTree:
    """Keeps the flagged nodes; nodes whose parent was dropped become roots.

    Args:
        tree (VesselTree): the forest
        keep (Sequence[bool]): one flag per node, in node order

    Returns:
        VesselTree:
            the sub-forest, node positions and ids unchanged
    """
    keep = np.asarray(keep, dtype=bool)
    kept_ids = set(tree.ids[keep].tolist())
    nodes = [
        VesselNode(n.id, n.kind, n.pos, n.radius, n.parent if n.parent in kept_ids else -1)
        for n, k in zip(tree.nodes, keep)
        if k
    ]
    return VesselTree(tuple(nodes))


def resample_polyline(tree: VesselTree, step: float) -> VesselTree:
    """Inserts linearly interpolated nodes so that no edge is longer than `step`.

    Existing nodes keep their id, position and order; each inserted chain is emitted directly
    before the child node it leads to. Inserted ids continue after the largest existing id.
    Radii are interpolated and the structure tag is copied from the child.

    Args:
        tree (VesselTree): the forest to resample
        step (float): maximal edge length in mm

    Returns:
        VesselTree:
            the resampled forest, with identical path geometry
    """
    if not step > 0:
        raise ValueError(f"Resampling step must be positive, got {step}")
    if len(tree) == 0:
        return tree

    next_id = int(tree.ids.max()) + 1
    positions = tree.positions
    nodes = []
    for i, n in enumerate(tree.nodes):
        p = tree.parent_index[i]
        if p < 0:
            nodes.append(n)
            continue
        start, end = positions[p], positions[i]
        length = float(np.linalg.norm(end - start))
        # tolerance keeps already-resampled trees unchanged
        pieces = max(1, math.ceil(length / step - 1e-9))
        parent_id = n.parent
        r0, r1 = tree.nodes[p].radius, n.radius
        for k in range(1, pieces):
            t = k / pieces
            pos, radius = start + (end - start) * t, r0 + (r1 - r0) * t
            nodes.append(VesselNode(next_id, n.kind, pos, radius, parent_id))
            parent_id = next_id
            next_id += 1
        nodes.append(VesselNode(n.id, n.kind, n.pos, n.radius, parent_id))
    return VesselTree(tuple(nodes))

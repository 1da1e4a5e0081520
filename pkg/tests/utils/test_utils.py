import os
from collections import deque

import numpy as np

from vesselprune.config import config_from_dict
from vesselprune.dual_graph import DualGraph
from vesselprune.geometry import brute_force_distance_field
from vesselprune.vessel_tree import ScalarVolume, VesselNode, VesselTree


def make_line_tree(start, end, n_nodes, radius=1.0, first_id=1):
    """Straight chain of `n_nodes` equally spaced nodes from `start` to `end`."""
    start, end = np.asarray(start, dtype=float), np.asarray(end, dtype=float)
    nodes = []
    for i in range(n_nodes):
        t = i / (n_nodes - 1) if n_nodes > 1 else 0.0
        parent = first_id + i - 1 if i > 0 else -1
        nodes.append(VesselNode(first_id + i, 3, start + (end - start) * t, radius, parent))
    return VesselTree(tuple(nodes))


def make_chain(length, step=1.0, start=(10.5, 10.5, 10.5)):
    """Chain along +x with nodes every `step` mm and a shorter last edge if needed."""
    xs = list(np.arange(0, length, step)) + [length]
    if len(xs) > 1 and np.isclose(xs[-1], xs[-2]):
        xs.pop()
    nodes = [
        VesselNode(i + 1, 3, (start[0] + x, start[1], start[2]), 1.0, i if i else -1)
        for i, x in enumerate(xs)
    ]
    return VesselTree(tuple(nodes))


def make_y_tree(trunk=4, arm=4, center=(16.0, 16.0, 16.0)):
    """Trunk along +x ending at a junction that forks into two diagonal arms, 1 mm node spacing.

    Returns:
        VesselTree:
            the tree, root at the trunk start, junction id `trunk + 1`
    """
    c = np.asarray(center, dtype=float)
    nodes = []
    for i in range(trunk + 1):
        pos = c + np.array([i - trunk, 0.0, 0.0])
        nodes.append(VesselNode(i + 1, 3, pos, 1.0, i if i else -1))
    junction = trunk + 1
    next_id = junction + 1
    for sign in (1.0, -1.0):
        direction = np.array([1.0, sign, 0.0]) / np.sqrt(2)
        parent = junction
        for j in range(1, arm + 1):
            nodes.append(VesselNode(next_id, 3, c + direction * j, 1.0, parent))
            parent = next_id
            next_id += 1
    return VesselTree(tuple(nodes))


def random_tree(rng, n_nodes, n_roots=1, box=(8.0, 40.0)):
    """Random forest whose nodes attach to random earlier nodes by 0.5 to 3 mm steps."""
    positions, parents = [], []
    for i in range(n_nodes):
        if i < n_roots:
            positions.append(rng.uniform(*box, size=3))
            parents.append(-1)
            continue
        p = int(rng.integers(i))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        positions.append(positions[p] + direction * rng.uniform(0.5, 3.0))
        parents.append(p + 1)
    return VesselTree.from_arrays(
        np.arange(1, n_nodes + 1), [3] * n_nodes, positions, [1.0] * n_nodes, parents
    )


def random_dual_graph(rng, n_nodes, n_features=4, edge_prob=0.4):
    """Random dual graph with random features in [0, 1] and soft targets away from 0 and 1."""
    edges = [
        (i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes) if rng.random() < edge_prob
    ]
    return DualGraph(
        n_nodes=n_nodes,
        edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        segment_node_ids=tuple((2 * i + 1, 2 * i + 2) for i in range(n_nodes)),
        lengths=rng.uniform(1, 5, n_nodes),
        features=rng.uniform(0, 1, (n_nodes, n_features)),
        targets=rng.uniform(0.1, 0.9, n_nodes),
    )


def flood_fill_components(mask):
    """Breadth-first 26-connected labeling, returned as sorted linear F-order index sets."""
    dims = mask.shape
    seen = np.zeros(dims, dtype=bool)
    offsets = [
        (di, dj, dk)
        for di in (-1, 0, 1)
        for dj in (-1, 0, 1)
        for dk in (-1, 0, 1)
        if (di, dj, dk) != (0, 0, 0)
    ]
    components = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        queue, members = deque([start]), []
        while queue:
            v = queue.popleft()
            members.append(v)
            for d in offsets:
                w = tuple(v[a] + d[a] for a in range(3))
                if all(0 <= w[a] < dims[a] for a in range(3)) and mask[w] and not seen[w]:
                    seen[w] = True
                    queue.append(w)
        linear = np.ravel_multi_index(tuple(np.array(members).T), dims, order="F")
        components.append(frozenset(int(i) for i in linear))
    return components


def tube_heatmap(tree, dims=(32, 32, 32), alpha=6.0, d_max=5.0):
    """Closed-form centerline heatmap of `tree`, evaluated with the exhaustive distance."""
    dist = brute_force_distance_field(*tree.segment_endpoints(), dims, (1.0, 1.0, 1.0))
    return ScalarVolume(np.where(dist <= d_max, np.exp(-alpha * dist / d_max), 0.0))


SMOKE_CONFIG = {
    "rng_seed": 7,
    "synth": {
        "n_trees": 1,
        "depth": 1,
        "branch_len_range": [6.0, 8.0],
        "volume_dims": [24, 24, 24],
        "margin": 4.0,
    },
    "corruption": {"noise_sigma": 0.01, "spurious_count": 1, "spurious_length": 5.0},
    "gat": {"heads": 2, "hidden_dim": 3, "hidden_layers": 1, "lr": 0.001, "epochs": 3},
    "benchmark": {"n_train": 2, "n_test": 1, "workers": 2},
}


def smoke_config(out_dir, **section_overrides):
    """Tiny config writing below `out_dir`; keyword arguments update the named sections."""
    data = {k: dict(v) if isinstance(v, dict) else v for k, v in SMOKE_CONFIG.items()}
    for section, values in section_overrides.items():
        data.setdefault(section, {}).update(values)
    data["out_dir"] = str(out_dir)
    return config_from_dict(data)


def stage_files(out_dir, stage):
    return sorted(os.listdir(os.path.join(out_dir, stage)))

"""
Binary cluster tree over RWG centroids, block partition and leaf ordering.

Nodes are split at the median centroid along the longest axis of their
bounding box. Splitting stops as soon as one of the children would have a
longest box side below ``leaf_factor`` wavelengths, so every leaf spans at
least that much along some axis. A pair of clusters is admissible (compressible) when
``eta * dist(boxes) >= min(diam_t, diam_s)`` with a strictly positive box
distance.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import reverse_cuthill_mckee

logger = logging.getLogger(__name__)


@dataclass
class ClusterNode:
    id: int
    lo: int
    hi: int
    box_min: np.ndarray
    box_max: np.ndarray
    level: int
    children: Tuple[int, ...] = ()
    parent: Optional[int] = None

    @property
    def size(self) -> int:
        return self.hi - self.lo

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.box_max - self.box_min))

    @property
    def side(self) -> float:
        """Longest side of the bounding box"""
        return float(np.max(self.box_max - self.box_min))


def box_distance(t: ClusterNode, s: ClusterNode) -> float:
    gap = np.maximum(0.0, np.maximum(t.box_min - s.box_max, s.box_min - t.box_max))
    return float(np.linalg.norm(gap))


def admissible(t: ClusterNode, s: ClusterNode, eta: float = 1.0) -> bool:
    dist = box_distance(t, s)
    if dist <= 0.0:
        return False
    return eta * dist >= min(t.diameter, s.diameter)


@dataclass
class ClusterTree:
    """Nodes in creation order (root first) and the basis permutation"""

    nodes: List[ClusterNode]
    permutation: np.ndarray
    wavelength: float
    leaf_factor: float

    @property
    def root(self) -> ClusterNode:
        return self.nodes[0]

    @property
    def depth(self) -> int:
        return max(node.level for node in self.nodes)

    @property
    def leaves(self) -> List[ClusterNode]:
        """Leaves in permutation order"""
        return sorted((node for node in self.nodes if node.is_leaf), key=lambda node: node.lo)

    def indices(self, node) -> np.ndarray:
        """Original basis indices of a node (accepts a node or its id)"""
        if not isinstance(node, ClusterNode):
            node = self.nodes[node]
        return self.permutation[node.lo:node.hi]

    def leaf_indices(self) -> Dict[int, np.ndarray]:
        return {leaf.id: self.indices(leaf) for leaf in self.leaves}


def _bounding_box(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return points.min(axis=0), points.max(axis=0)


def build_tree(centroids: np.ndarray, wavelength: float, leaf_factor: float = 0.5) -> ClusterTree:
    centroids = np.asarray(centroids, dtype=float).reshape(-1, 3)
    if len(centroids) == 0:
        raise ValueError("build_tree needs at least one centroid")
    if wavelength <= 0:
        raise ValueError(f"wavelength must be positive, got {wavelength}")
    min_side = leaf_factor * wavelength
    permutation = np.arange(len(centroids))
    lo_box, hi_box = _bounding_box(centroids)
    nodes = [ClusterNode(id=0, lo=0, hi=len(centroids), box_min=lo_box, box_max=hi_box, level=0)]
    stack = [0]
    while stack:
        node = nodes[stack.pop()]
        if node.size < 2:
            continue
        members = permutation[node.lo:node.hi]
        extent = node.box_max - node.box_min
        if extent.max() <= 0.0:
            continue
        axis = int(np.argmax(extent))
        order = np.argsort(centroids[members, axis], kind="stable")
        half = node.size // 2
        left, right = members[order[:half]], members[order[half:]]
        left_box = _bounding_box(centroids[left])
        right_box = _bounding_box(centroids[right])
        if min(np.max(left_box[1] - left_box[0]), np.max(right_box[1] - right_box[0])) < min_side:
            continue
        permutation[node.lo:node.hi] = np.concatenate([left, right])
        children = []
        for (box_min, box_max), lo, hi in ((left_box, node.lo, node.lo + half), (right_box, node.lo + half, node.hi)):
            child = ClusterNode(
                id=len(nodes), lo=lo, hi=hi, box_min=box_min, box_max=box_max, level=node.level + 1, parent=node.id
            )
            nodes.append(child)
            children.append(child.id)
        node.children = tuple(children)
        stack.extend(reversed(children))
    tree = ClusterTree(nodes=nodes, permutation=permutation, wavelength=wavelength, leaf_factor=leaf_factor)
    logger.debug(f"Cluster tree: {len(nodes)} nodes, {len(tree.leaves)} leaves, depth {tree.depth}")
    return tree


@dataclass
class BlockPartition:
    """
    Near (inadmissible leaf pairs) and far (admissible node pairs) blocks.

    Far blocks carry the tree level at which they were found; every far
    pair (t, s) appears together with its mirror (s, t).
    """

    near: List[Tuple[int, int]] = field(default_factory=list)
    far: List[Tuple[int, int, int]] = field(default_factory=list)
    eta: float = 1.0

    def far_by_level(self) -> Dict[int, List[Tuple[int, int]]]:
        levels: Dict[int, List[Tuple[int, int]]] = {}
        for t, s, level in self.far:
            levels.setdefault(level, []).append((t, s))
        return levels

    def coverage(self, tree: ClusterTree) -> int:
        """Number of matrix entries covered by all blocks; equals N^2 for a valid tiling"""
        nodes = tree.nodes
        total = sum(nodes[t].size * nodes[s].size for t, s in self.near)
        total += sum(nodes[t].size * nodes[s].size for t, s, _ in self.far)
        return total

    def near_adjacency(self, tree: ClusterTree) -> Tuple[sparse.csr_matrix, List[int]]:
        """Leaf graph with an edge per off-diagonal near pair; returns (graph, leaf ids in graph order)"""
        leaf_ids = [leaf.id for leaf in tree.leaves]
        position = {leaf_id: i for i, leaf_id in enumerate(leaf_ids)}
        rows = [position[t] for t, s in self.near if t != s]
        cols = [position[s] for t, s in self.near if t != s]
        graph = sparse.csr_matrix(
            (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(len(leaf_ids), len(leaf_ids))
        )
        return graph, leaf_ids

    def neighbour_counts(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for t, s in self.near:
            if t != s:
                counts[t] = counts.get(t, 0) + 1
        return counts


def partition_blocks(tree: ClusterTree, eta: float = 1.0) -> BlockPartition:
    partition = BlockPartition(eta=eta)
    nodes = tree.nodes
    stack = [(0, 0)]
    while stack:
        t_id, s_id = stack.pop()
        t, s = nodes[t_id], nodes[s_id]
        if admissible(t, s, eta):
            partition.far.append((t_id, s_id, max(t.level, s.level)))
        elif t.is_leaf and s.is_leaf:
            partition.near.append((t_id, s_id))
        elif t.is_leaf:
            stack.extend((t_id, c) for c in s.children)
        elif s.is_leaf:
            stack.extend((c, s_id) for c in t.children)
        else:
            stack.extend((a, b) for a in t.children for b in s.children)
    partition.near.sort()
    partition.far.sort()
    logger.debug(f"Partition: {len(partition.near)} near blocks, {len(partition.far)} far blocks (eta={eta})")
    return partition


def bandwidth(graph: sparse.spmatrix, order) -> int:
    """Largest |position(u) - position(v)| over graph edges under the given vertex order"""
    coo = sparse.coo_matrix(graph)
    if coo.nnz == 0:
        return 0
    position = np.empty(graph.shape[0], dtype=np.int64)
    position[np.asarray(order)] = np.arange(graph.shape[0])
    return int(np.abs(position[coo.row] - position[coo.col]).max())


def order_leaves(graph: sparse.spmatrix) -> np.ndarray:
    """
    Bandwidth-reducing vertex order (reverse Cuthill-McKee).

    Returns the vertices in their new order; connected components come out
    contiguous.
    """
    graph = sparse.csr_matrix(graph)
    graph = ((graph + graph.T) != 0).astype(np.int8).tocsr()
    if graph.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.asarray(reverse_cuthill_mckee(graph, symmetric_mode=True), dtype=np.int64)
    return order

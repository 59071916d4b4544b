"""Organising faces into a minimum spanning tree of TPS bending energy."""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .tps import tps_bending_energy
from .parallel import pmap


@dataclass
class FaceGraph:
    """Complete graph over faces with symmetric edge weights."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("weights must be square")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        self.weights = w

    @property
    def nodes(self):
        return list(range(len(self.weights)))


@dataclass
class SpanningTree:
    root: int
    parent_of: dict
    edges: list  # (parent, child) in breadth-first order
    weights: dict = field(default_factory=dict)  # (parent, child) -> weight

    @property
    def nodes(self):
        return [self.root] + [c for _, c in self.edges]

    def children(self, node):
        return [c for p, c in self.edges if p == node]

    def path_from_root(self, node):
        path = [node]
        while path[-1] != self.root:
            path.append(self.parent_of[path[-1]])
        return path[::-1]

    def total_weight(self):
        return float(sum(self.weights.get(e, 0.0) for e in self.edges))

    def to_text(self):
        return "".join(f"{p} {c} {self.weights.get((p, c), 0.0):.17g}\n" for p, c in self.edges)

    @classmethod
    def from_text(cls, text, root=None):
        edges, weights = [], {}
        for line in text.splitlines():
            if not line.strip():
                continue
            p, c, w = line.split()
            edges.append((int(p), int(c)))
            weights[(int(p), int(c))] = float(w)
        parent_of = {c: p for p, c in edges}
        if root is None:
            roots = {p for p, _ in edges} - set(parent_of)
            root = min(roots) if roots else 0
        return cls(root=root, parent_of=parent_of, edges=edges, weights=weights)


def pair_weight(landmarks_i, landmarks_j):
    """Symmetrised bending energy ``(beta_ij + beta_ji) / 2``.

    ``landmarks_*`` are the (x, y) positions of the same landmark ids on
    the two faces.
    """
    li = np.asarray(landmarks_i, dtype=np.float64)[:, :2]
    lj = np.asarray(landmarks_j, dtype=np.float64)[:, :2]
    return 0.5 * (tps_bending_energy(li, lj) + tps_bending_energy(lj, li))


def weight_matrix(landmark_sets, workers=1):
    """Pairwise weights for a list of ``(L, 2+)`` landmark arrays."""
    n = len(landmark_sets)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    vals = pmap(lambda ij: pair_weight(landmark_sets[ij[0]], landmark_sets[ij[1]]), pairs, workers)
    w = np.zeros((n, n))
    for (i, j), val in zip(pairs, vals):
        w[i, j] = w[j, i] = val
    return FaceGraph(w)


class _DisjointSet:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def kruskal(weights):
    """Minimum spanning tree edges ``(i, j, w)`` with ``i < j``."""
    w = np.asarray(weights)
    n = len(w)
    cand = sorted((w[i, j], i, j) for i in range(n) for j in range(i + 1, n))
    ds = _DisjointSet(n)
    out = []
    for wij, i, j in cand:
        if ds.union(i, j):
            out.append((i, j, float(wij)))
            if len(out) == n - 1:
                break
    return out


def build_mst(graph):
    """Minimum spanning tree rooted at its highest-degree node.

    Ties on degree go to the lowest face id; children are oriented away
    from the root by breadth-first search.
    """
    w = graph.weights if isinstance(graph, FaceGraph) else np.asarray(graph)
    n = len(w)
    if n == 0:
        raise ValueError("empty graph")
    undirected = kruskal(w)
    adj = {i: [] for i in range(n)}
    for i, j, wij in undirected:
        adj[i].append((j, wij))
        adj[j].append((i, wij))
    degree = [len(adj[i]) for i in range(n)]
    root = int(max(range(n), key=lambda i: (degree[i], -i)))
    return orient_tree(adj, root)


def orient_tree(adj, root):
    parent_of, edges, weights = {}, [], {}
    seen = {root}
    queue = deque([root])
    while queue:
        p = queue.popleft()
        for c, wpc in sorted(adj[p]):
            if c in seen:
                continue
            seen.add(c)
            parent_of[c] = p
            edges.append((p, c))
            weights[(p, c)] = wpc
            queue.append(c)
    return SpanningTree(root=root, parent_of=parent_of, edges=edges, weights=weights)

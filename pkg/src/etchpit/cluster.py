"""Density-based clustering of the embedded patches into pit-type groups.

Implements the full HDBSCAN chain on dense desk-scale data: mutual
reachability distances, Prim MST, single-linkage hierarchy, condensed
tree at min_cluster_size, and excess-of-mass cluster extraction with
membership strengths. ``assign_types`` then maps clusters onto the
BPD/TED/TSD taxonomy from their shape statistics (elongated pits are
basal-plane; among round pits the larger cross-section is the screw
type).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ClusterParams",
    "ClusterLabeling",
    "TypeAssignment",
    "core_distances",
    "mutual_reachability",
    "prim_mst",
    "single_linkage_merges",
    "condense_tree",
    "compute_stability",
    "hdbscan",
    "assign_types",
    "write_labeling_csv",
]

DISLOCATION_TYPES = ("BPD", "TED", "TSD")


@dataclass
class ClusterParams:
    min_cluster_size: int = 15
    min_samples: int = 10

    def __post_init__(self):
        if self.min_cluster_size < 2:
            raise ValueError("min_cluster_size must be >= 2")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")

    @classmethod
    def for_dataset(cls, n: int) -> "ClusterParams":
        return cls(min_cluster_size=max(15, n // 100), min_samples=10)


@dataclass
class ClusterLabeling:
    labels: np.ndarray  # (n,) int, -1 = noise
    strengths: np.ndarray  # (n,) float in [0, 1], 0 for noise
    n_clusters: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.strengths = np.asarray(self.strengths, dtype=np.float64)


@dataclass
class TypeAssignment:
    mapping: dict[int, str]  # cluster id -> BPD | TED | TSD
    evidence: dict[int, dict]  # cluster id -> mean lengthiness / area / population
    unassigned_types: list[str] = field(default_factory=list)
    unassigned_clusters: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def type_of(self, cluster: int) -> str | None:
        return self.mapping.get(cluster)


def _pairwise(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def core_distances(X: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance to the min_samples-th nearest neighbor (self excluded)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < min_samples + 1:
        raise ValueError(f"need at least min_samples+1={min_samples + 1} points, got {n}")
    d = _pairwise(X)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, min_samples - 1, axis=1)[:, min_samples - 1]


def mutual_reachability(X: np.ndarray, min_samples: int) -> np.ndarray:
    """d_mreach(a, b) = max(core_a, core_b, d(a, b)); zero diagonal."""
    core = core_distances(X, min_samples)
    d = _pairwise(np.asarray(X, dtype=np.float64))
    m = np.maximum(d, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(m, 0.0)
    return m


def prim_mst(dist: np.ndarray) -> np.ndarray:
    """Minimum spanning tree of a dense distance matrix, Prim O(N^2).
    Returns (N-1, 3) rows [u, v, weight] in insertion order."""
    n = dist.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    best_edge = np.zeros(n, dtype=np.int64)
    in_tree[0] = True
    best = dist[0].copy()
    best[0] = np.inf
    best_edge[:] = 0
    edges = np.empty((n - 1, 3))
    for t in range(n - 1):
        v = int(np.argmin(best))
        edges[t] = (best_edge[v], v, best[v])
        in_tree[v] = True
        best[v] = np.inf
        update = dist[v] < best
        update &= ~in_tree
        best[update] = dist[v][update]
        best_edge[update] = v
    return edges


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(2 * n - 1, dtype=np.int64)
        self.size = np.concatenate([np.ones(n, np.int64), np.zeros(n - 1, np.int64)])
        self.next_label = n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        new = self.next_label
        self.parent[a] = self.parent[b] = new
        self.size[new] = self.size[a] + self.size[b]
        self.next_label += 1
        return new


def single_linkage_merges(mst_edges: np.ndarray, n: int) -> list[tuple]:
    """Single-linkage hierarchy as multiway merges [(children, dist, size)].

    Ties are structural in mutual-reachability space (every pair capped
    by the same core distance shares its exact value), and a binary
    dendrogram is not well-defined under them. All components connected
    by edges of one tied weight therefore merge in a single multiway
    node, which makes the hierarchy canonical: independent of edge order
    and of which tied MST edges were chosen.

    Children are node ids (points 0..n-1, merge nodes n, n+1, ... in
    creation order); the final node contains all points.
    """
    lo = np.minimum(mst_edges[:, 0], mst_edges[:, 1])
    hi = np.maximum(mst_edges[:, 0], mst_edges[:, 1])
    order = np.lexsort((hi, lo, mst_edges[:, 2]))
    edges = mst_edges[order]

    parent = np.arange(2 * n - 1, dtype=np.int64)

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    merges: list[tuple] = []
    sizes = np.concatenate([np.ones(n, np.int64), np.zeros(n - 1, np.int64)])
    next_id = n
    i = 0
    while i < len(edges):
        j = i
        w = edges[i, 2]
        while j < len(edges) and edges[j, 2] == w:
            j += 1
        # families: connected components over current roots at this weight
        adj: dict[int, set[int]] = {}
        for u, v, _ in edges[i:j]:
            ru, rv = find(int(u)), find(int(v))
            if ru != rv:
                adj.setdefault(ru, set()).add(rv)
                adj.setdefault(rv, set()).add(ru)
        seen: set[int] = set()
        for start in sorted(adj):
            if start in seen:
                continue
            family = {start}
            queue = [start]
            while queue:
                node = queue.pop()
                for nb in adj.get(node, ()):
                    if nb not in family:
                        family.add(nb)
                        queue.append(nb)
            seen |= family
            children = tuple(sorted(family))
            size = int(sizes[list(children)].sum())
            sizes[next_id] = size
            for c in children:
                parent[c] = next_id
            merges.append((children, float(w), size))
            next_id += 1
        i = j
    return merges


def condense_tree(merges: list[tuple], n: int, min_cluster_size: int) -> list[tuple]:
    """Collapse the hierarchy into (parent, child, lambda, child_size)
    rows at lambda = 1/distance. Children holding at least
    min_cluster_size points survive splits as clusters (a new cluster
    each when two or more do, a continuation of the parent when exactly
    one does); everything else falls out of the parent as points."""
    rec = {n + t: m for t, m in enumerate(merges)}
    root = n + len(merges) - 1

    def node_size(node: int) -> int:
        return 1 if node < n else rec[node][2]

    def points_under(node: int) -> list[int]:
        out, stack = [], [node]
        while stack:
            cur = stack.pop()
            if cur < n:
                out.append(cur)
            else:
                stack.extend(rec[cur][0])
        return out

    rows: list[tuple] = []
    relabel = {root: n}
    next_label = n + 1
    queue = [root]
    while queue:
        node = queue.pop(0)
        children, dist, _ = rec[node]
        lam = 1.0 / dist if dist > 0.0 else np.inf
        label = relabel[node]
        big = [c for c in children if node_size(c) >= min_cluster_size]
        small = [c for c in children if node_size(c) < min_cluster_size]

        if len(big) >= 2:
            for child in big:
                relabel[child] = next_label
                rows.append((label, next_label, lam, node_size(child)))
                next_label += 1
                queue.append(child)
        elif len(big) == 1:
            if big[0] >= n:
                relabel[big[0]] = label
                queue.append(big[0])
            else:  # a lone point cannot continue a cluster
                rows.append((label, big[0], lam, 1))
        for s in small:
            for p in points_under(s):
                rows.append((label, p, lam, 1))
    return rows


def compute_stability(condensed: list[tuple], n: int) -> dict[int, float]:
    """Excess-of-mass stability: sum over children of
    (lambda_child - lambda_birth(parent)) * child_size."""
    births: dict[int, float] = {n: 0.0}
    for parent, child, lam, _ in condensed:
        if child >= n:
            births[child] = lam
    stability: dict[int, float] = {}
    for parent, child, lam, size in condensed:
        stability.setdefault(parent, 0.0)
        stability[parent] += (lam - births[parent]) * size
    for parent, child, lam, size in condensed:
        if child >= n:
            stability.setdefault(child, 0.0)
    return stability


def _select_clusters(condensed: list[tuple], stability: dict[int, float], n: int) -> list[int]:
    """Bottom-up excess-of-mass selection; the root is never selected."""
    cluster_children: dict[int, list[int]] = {}
    for parent, child, _, size in condensed:
        if child >= n:
            cluster_children.setdefault(parent, []).append(child)

    is_cluster = {c: True for c in stability}
    work = dict(stability)
    for node in sorted(stability, reverse=True):
        if node == n:
            is_cluster[node] = False
            continue
        subtree = sum(work[c] for c in cluster_children.get(node, []))
        if subtree > work[node]:
            is_cluster[node] = False
            work[node] = subtree
        else:
            stack = list(cluster_children.get(node, []))
            while stack:
                c = stack.pop()
                is_cluster[c] = False
                stack.extend(cluster_children.get(c, []))
    return sorted(c for c, flag in is_cluster.items() if flag)


def hdbscan(X: np.ndarray, params: ClusterParams | None = None) -> ClusterLabeling:
    """Cluster X; noise points get label -1 and strength 0.

    All-identical inputs collapse to one cluster (the hierarchy has no
    finite-density structure to rank, and rejecting everything as noise
    would discard the data).
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    params = params or ClusterParams.for_dataset(n)
    if n < 2 * params.min_cluster_size:
        raise ValueError(
            f"need at least 2*min_cluster_size={2 * params.min_cluster_size} points, got {n}"
        )

    mreach = mutual_reachability(X, params.min_samples)
    if mreach.max() == 0.0:
        return ClusterLabeling(
            labels=np.zeros(n, np.int64), strengths=np.ones(n), n_clusters=1
        )

    mst = prim_mst(mreach)
    merges = single_linkage_merges(mst, n)
    condensed = condense_tree(merges, n, params.min_cluster_size)
    stability = compute_stability(condensed, n)
    selected = _select_clusters(condensed, stability, n)

    parent_of: dict[int, int] = {}
    point_rows: dict[int, tuple[int, float]] = {}
    for parent, child, lam, size in condensed:
        if child >= n:
            parent_of[child] = parent
        else:
            point_rows[child] = (parent, lam)

    selected_set = set(selected)
    label_of = {c: i for i, c in enumerate(selected)}
    labels = np.full(n, -1, dtype=np.int64)
    point_lambda = np.zeros(n)
    for p in range(n):
        cluster, lam = point_rows[p]
        while cluster not in selected_set and cluster != n:
            cluster = parent_of[cluster]
        if cluster in selected_set:
            labels[p] = label_of[cluster]
            point_lambda[p] = lam

    strengths = np.zeros(n)
    for cid, lab in label_of.items():
        members = labels == lab
        lam = point_lambda[members]
        top = lam.max()
        if not np.isfinite(top) or top == 0.0:
            strengths[members] = 1.0
        else:
            strengths[members] = np.minimum(lam, top) / top
    return ClusterLabeling(labels=labels, strengths=strengths, n_clusters=len(selected))


def assign_types(
    labeling: ClusterLabeling,
    lengthiness: np.ndarray,
    areas: np.ndarray,
    round_limit: float = 1.5,
    area_tie_tolerance: float = 0.05,
) -> TypeAssignment:
    """Map clusters to dislocation types from their shape statistics.

    The cluster with the highest mean lengthiness is BPD; among the
    remaining round clusters the larger mean pit area is TSD and the
    smaller TED. With more than three clusters only the three most
    populous are mapped; near-equal areas are refused rather than
    guessed.
    """
    lengthiness = np.asarray(lengthiness, dtype=np.float64)
    areas = np.asarray(areas, dtype=np.float64)
    labels = labeling.labels
    clusters = [c for c in np.unique(labels) if c >= 0]
    assignment = TypeAssignment(mapping={}, evidence={})

    stats = {}
    for c in clusters:
        members = labels == c
        stats[c] = {
            "population": int(members.sum()),
            "mean_lengthiness": float(lengthiness[members].mean()),
            "mean_area": float(areas[members].mean()),
        }
    assignment.evidence = stats

    ranked = sorted(clusters, key=lambda c: -stats[c]["population"])
    active = ranked[:3]
    for extra in ranked[3:]:
        assignment.unassigned_clusters.append(int(extra))
        assignment.notes.append(
            f"cluster {extra} left unassigned: more than three clusters present"
        )

    if len(active) == 3:
        bpd = max(active, key=lambda c: stats[c]["mean_lengthiness"])
        assignment.mapping[int(bpd)] = "BPD"
        rest = sorted(
            (c for c in active if c != bpd), key=lambda c: stats[c]["mean_area"]
        )
        small, large = rest
        a_small, a_large = stats[small]["mean_area"], stats[large]["mean_area"]
        if a_large > 0 and (a_large - a_small) / a_large < area_tie_tolerance:
            assignment.unassigned_clusters.extend([int(small), int(large)])
            assignment.unassigned_types.extend(["TED", "TSD"])
            note = (
                f"clusters {small} and {large} have mean areas within "
                f"{area_tie_tolerance:.0%}; refusing to guess TED vs TSD"
            )
            assignment.notes.append(note)
            warnings.warn(note)
        else:
            assignment.mapping[int(small)] = "TED"
            assignment.mapping[int(large)] = "TSD"
    elif len(active) == 2:
        first, second = sorted(active, key=lambda c: -stats[c]["mean_lengthiness"])
        if stats[first]["mean_lengthiness"] > round_limit:
            assignment.mapping[int(first)] = "BPD"
            assignment.unassigned_clusters.append(int(second))
            assignment.unassigned_types.extend(["TED", "TSD"])
            assignment.notes.append(
                f"cluster {second} is round but has no counterpart to rank by area"
            )
        else:
            small, large = sorted(active, key=lambda c: stats[c]["mean_area"])
            a_small, a_large = stats[small]["mean_area"], stats[large]["mean_area"]
            assignment.unassigned_types.append("BPD")
            if a_large > 0 and (a_large - a_small) / a_large >= area_tie_tolerance:
                assignment.mapping[int(small)] = "TED"
                assignment.mapping[int(large)] = "TSD"
            else:
                assignment.unassigned_clusters.extend([int(small), int(large)])
                assignment.unassigned_types.extend(["TED", "TSD"])
                assignment.notes.append("two round clusters with near-equal areas")
    elif len(active) == 1:
        c = active[0]
        if stats[c]["mean_lengthiness"] > round_limit:
            assignment.mapping[int(c)] = "BPD"
            assignment.unassigned_types.extend(["TED", "TSD"])
        else:
            assignment.unassigned_clusters.append(int(c))
            assignment.unassigned_types.extend(list(DISLOCATION_TYPES))
            assignment.notes.append(
                f"single round cluster (mean lengthiness "
                f"{stats[c]['mean_lengthiness']:.2f}) cannot be typed"
            )
    else:
        assignment.unassigned_types.extend(list(DISLOCATION_TYPES))

    for t in DISLOCATION_TYPES:
        if t not in assignment.mapping.values() and t not in assignment.unassigned_types:
            assignment.unassigned_types.append(t)
    return assignment


def write_labeling_csv(path, ids: list[str], labeling: ClusterLabeling, assignment: TypeAssignment) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_id", "cluster", "strength", "assigned_type"])
        for pid, lab, s in zip(ids, labeling.labels, labeling.strengths):
            writer.writerow(
                [pid, int(lab), f"{s:.6f}", assignment.type_of(int(lab)) or "unassigned"]
            )

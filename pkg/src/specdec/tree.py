"""Offline compilation of a candidate tree into static verification buffers.

A tree is described by per-depth top-k widths and a prefix-closed set of
rank paths.  Compilation produces the immutable buffers the engine needs:
the T x T ancestor visibility mask, the node -> candidate-buffer offset map,
and the per-leaf path retrieval table (sentinel -1 padded to a fixed width),
so every verification step runs with constant tensor shapes.
"""

import json
from dataclasses import dataclass, field

import numpy as np


class TreeSpecError(ValueError):
    pass


@dataclass(frozen=True)
class TreeSpec:
    """Candidate tree: per-head candidate counts plus rank paths from the root."""

    topk_per_head: tuple
    paths: frozenset

    def __init__(self, topk_per_head, paths):
        object.__setattr__(self, "topk_per_head", tuple(int(t) for t in topk_per_head))
        object.__setattr__(self, "paths", frozenset(tuple(int(r) for r in p) for p in paths))
        self._validate()

    @property
    def n_heads(self):
        return len(self.topk_per_head)

    @property
    def n_nodes(self):
        return 1 + len(self.paths)

    def _validate(self):
        if not self.topk_per_head:
            raise TreeSpecError("topk_per_head must be non-empty")
        if any(t < 1 for t in self.topk_per_head):
            raise TreeSpecError(f"topk_per_head entries must be positive: {self.topk_per_head}")
        k = len(self.topk_per_head)
        for p in self.paths:
            if not 1 <= len(p) <= k:
                raise TreeSpecError(f"path {p} has depth outside [1, {k}]")
            for h, r in enumerate(p):
                if not 0 <= r < self.topk_per_head[h]:
                    raise TreeSpecError(
                        f"rank {r} out of bounds for head {h} (top-{self.topk_per_head[h]}) in path {p}"
                    )
            prefix = p[:-1]
            if prefix and prefix not in self.paths:
                raise TreeSpecError(f"path set is not prefix-closed: missing prefix {prefix} of {p}")


@dataclass(frozen=True)
class StaticTreeBuffers:
    """Compiled, immutable tree buffers (all arrays are read-only views)."""

    n_nodes: int
    attn_mask: np.ndarray  # (T, T) bool, ancestor-or-self visibility
    tree_indices: np.ndarray  # (T,) node -> candidate buffer offset
    retrieve_indices: np.ndarray  # (n_paths, K+1), -1 padded
    node_depth: np.ndarray  # (T,)
    n_paths: int
    topk_per_head: tuple
    node_paths: tuple = field(repr=False)  # rank path per node; () for root

    @property
    def n_heads(self):
        return len(self.topk_per_head)

    @property
    def candidate_buffer_len(self):
        return 1 + sum(self.topk_per_head)


def _freeze(a):
    a.setflags(write=False)
    return a


def compile_tree(spec: TreeSpec) -> StaticTreeBuffers:
    """Compile a TreeSpec into static buffers.

    Node order is breadth-first, ties broken by ascending rank tuple, with the
    root at index 0.  Pure and deterministic.
    """
    ordered = [()] + sorted(spec.paths, key=lambda p: (len(p), p))
    index_of = {p: i for i, p in enumerate(ordered)}
    t = len(ordered)
    k = spec.n_heads

    mask = np.zeros((t, t), dtype=bool)
    depth = np.zeros(t, dtype=np.int64)
    tree_indices = np.zeros(t, dtype=np.int64)
    head_base = np.cumsum([1] + list(spec.topk_per_head[:-1]))  # offset of each head's segment
    for i, p in enumerate(ordered):
        depth[i] = len(p)
        for d in range(len(p) + 1):
            mask[i, index_of[p[:d]]] = True
        if p:
            tree_indices[i] = head_base[len(p) - 1] + p[-1]

    children = {p: [] for p in ordered}
    for p in ordered:
        if p:
            children[p[:-1]].append(p)
    leaves = [p for p in ordered if p and not children[p]]
    leaves.sort(key=lambda p: index_of[p])

    retrieve = np.full((len(leaves), k + 1), -1, dtype=np.int64)
    for row, leaf in enumerate(leaves):
        for d in range(len(leaf) + 1):
            retrieve[row, d] = index_of[leaf[:d]]

    return StaticTreeBuffers(
        n_nodes=t,
        attn_mask=_freeze(mask),
        tree_indices=_freeze(tree_indices),
        retrieve_indices=_freeze(retrieve),
        node_depth=_freeze(depth),
        n_paths=len(leaves),
        topk_per_head=spec.topk_per_head,
        node_paths=tuple(ordered),
    )


@dataclass
class ValidationReport:
    ok: bool
    failures: list

    def __bool__(self):
        return self.ok


def validate_buffers(buffers: StaticTreeBuffers, spec: TreeSpec) -> ValidationReport:
    """Independent oracle check of compiled buffers.

    Recomputes the mask by explicit ancestor enumeration over node paths and
    the retrieval table by walking each leaf up to the root, then compares
    everything field by field.  Never raises; failures go in the report.
    """
    failures = []
    ordered = [()] + sorted(spec.paths, key=lambda p: (len(p), p))
    t = len(ordered)
    if buffers.n_nodes != t:
        failures.append(f"n_nodes {buffers.n_nodes} != {t}")
        return ValidationReport(False, failures)

    # Mask oracle: j visible from i iff j's path is a (possibly empty) prefix of i's.
    for i in range(t):
        for j in range(t):
            anc = len(ordered[j]) <= len(ordered[i]) and ordered[i][: len(ordered[j])] == ordered[j]
            if bool(buffers.attn_mask[i, j]) != anc:
                failures.append(f"mask mismatch at ({i}, {j}): got {bool(buffers.attn_mask[i, j])}, oracle {anc}")

    for i, p in enumerate(ordered):
        if buffers.node_depth[i] != len(p):
            failures.append(f"depth mismatch at node {i}")
        expect = 0 if not p else 1 + sum(spec.topk_per_head[: len(p) - 1]) + p[-1]
        if buffers.tree_indices[i] != expect:
            failures.append(f"tree_indices mismatch at node {i}: got {buffers.tree_indices[i]}, oracle {expect}")

    # Retrieval oracle: walk each leaf up through its parents.
    index_of = {p: i for i, p in enumerate(ordered)}
    has_child = set(p[:-1] for p in ordered if p)
    leaves = [p for p in ordered if p and p not in has_child]
    if buffers.retrieve_indices.shape != (len(leaves), spec.n_heads + 1):
        failures.append(
            f"retrieve_indices shape {buffers.retrieve_indices.shape} != {(len(leaves), spec.n_heads + 1)}"
        )
    else:
        got_rows = [tuple(int(x) for x in row if x >= 0) for row in buffers.retrieve_indices]
        for row, nodes in enumerate(got_rows):
            if not nodes or nodes[0] != 0:
                failures.append(f"retrieval row {row} does not start at the root")
                continue
            path = ordered[nodes[-1]]
            walk = []
            q = path
            while True:
                walk.append(index_of[q])
                if not q:
                    break
                q = q[:-1]
            walk.reverse()
            if list(nodes) != walk:
                failures.append(f"retrieval row {row} {nodes} != leaf walk-up {tuple(walk)}")
            if path in has_child:
                failures.append(f"retrieval row {row} ends at non-leaf node {nodes[-1]}")
        want_leaves = sorted(index_of[p] for p in leaves)
        got_leaves = sorted(r[-1] for r in got_rows if r)
        if want_leaves != got_leaves:
            failures.append(f"retrieval leaf set {got_leaves} != {want_leaves}")
    return ValidationReport(not failures, failures)


def default_tree(k: int) -> TreeSpec:
    """Documented default candidate tree for K heads (1 <= K <= 8).

    Dense near the root, narrowing with depth: widths [4, 3, 2, 2, ...];
    depth 1 keeps all four candidates, depth 2 keeps the children
    (0,0), (0,1), (0,2), (1,0), deeper levels extend the all-rank-0 chain.
    The shape is our choice, not taken from any published tree.
    """
    if not 1 <= k <= 8:
        raise TreeSpecError(f"head count {k} outside [1, 8]")
    topk = ([4, 3] + [2] * (k - 2))[:k]
    paths = {(r,) for r in range(4)}
    if k >= 2:
        paths |= {(0, 0), (0, 1), (0, 2), (1, 0)}
    for d in range(3, k + 1):
        paths.add((0,) * d)
    return TreeSpec(topk, paths)


def random_tree_spec(rng, n_heads=None, max_nodes=64, max_topk=4) -> TreeSpec:
    """Random prefix-closed spec (for oracle sweeps); grows nodes child-first
    so closure holds by construction."""
    k = int(n_heads if n_heads is not None else rng.integers(1, 5))
    topk = [int(rng.integers(1, max_topk + 1)) for _ in range(k)]
    paths = {(r,) for r in range(int(rng.integers(1, topk[0] + 1)))}
    target = int(rng.integers(len(paths), max_nodes))
    frontier = list(paths)
    while len(paths) + 1 < target and frontier:
        parent = frontier.pop(int(rng.integers(0, len(frontier))))
        if len(parent) >= k:
            continue
        width = topk[len(parent)]
        for r in range(width):
            child = parent + (r,)
            if child not in paths and rng.random() < 0.7:
                paths.add(child)
                frontier.append(child)
            if len(paths) + 1 >= target:
                break
    return TreeSpec(topk, paths)


def spec_from_json(obj) -> TreeSpec:
    """Parse the tree-spec JSON object; omitted `paths` means the full
    Cartesian tree over `topk_per_head`."""
    if "topk_per_head" not in obj:
        raise TreeSpecError("tree spec JSON must contain 'topk_per_head'")
    topk = obj["topk_per_head"]
    if "paths" in obj and obj["paths"] is not None:
        paths = [tuple(p) for p in obj["paths"]]
    else:
        # full Cartesian product, depth by depth
        paths = []
        frontier = [()]
        for width in topk:
            frontier = [p + (r,) for p in frontier for r in range(width)]
            paths += frontier
    return TreeSpec(topk, paths)


def load_spec(path) -> TreeSpec:
    with open(path) as f:
        return spec_from_json(json.load(f))


def save_spec(spec: TreeSpec, path):
    with open(path, "w") as f:
        json.dump(
            {"topk_per_head": list(spec.topk_per_head),
             "paths": sorted([list(p) for p in spec.paths], key=lambda p: (len(p), p))},
            f, indent=1)


def buffers_to_json(buffers: StaticTreeBuffers) -> dict:
    """Row-major integer dump of the compiled buffers for inspection/goldens."""
    return {
        "n_nodes": buffers.n_nodes,
        "n_paths": buffers.n_paths,
        "topk_per_head": list(buffers.topk_per_head),
        "attn_mask": buffers.attn_mask.astype(int).tolist(),
        "tree_indices": buffers.tree_indices.tolist(),
        "retrieve_indices": buffers.retrieve_indices.tolist(),
        "node_depth": buffers.node_depth.tolist(),
    }

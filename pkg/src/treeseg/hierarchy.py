"""Label hierarchy: parsing, validation, edge-weight schemes and level structure.

A label tree is a rooted tree whose leaves are the trainable classes.
Leaves get the contiguous ids ``0..C-1`` in depth-first declaration order
so probability vectors and distance matrices have a deterministic layout;
internal nodes follow with ids ``C..N-1``. Trees are immutable after
construction: operations that change weights return a new tree.

Levels count from the bottom: level 0 is the leaves, level ``K-1`` the
children of the root. Ragged trees are allowed; a leaf shallower than the
maximum depth belongs to every level at or below its depth band, so each
level forms a cut of the tree (every root-to-leaf path crosses it exactly
once) and aggregated probabilities sum to one at every level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParseError, RangeError, StructureError, WeightError

WEIGHT_SCHEMES = ("top", "leaf", "equal", "hier")


@dataclass(frozen=True)
class EdgeWeightScheme:
    """Edge weighting rule: 'top', 'leaf', 'equal' or 'hier' (geometric, scale kappa)."""

    kind: str
    kappa: float = 10.0

    def __post_init__(self):
        if self.kind not in WEIGHT_SCHEMES:
            raise WeightError(f"unknown weight scheme {self.kind!r}, expected one of {WEIGHT_SCHEMES}")
        if self.kind == "hier" and not self.kappa > 0:
            raise WeightError(f"hier scheme requires kappa > 0, got {self.kappa}")


@dataclass
class NodeRecord:
    id: int
    name: str
    children: list[int]  # declaration order

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class LabelTree:
    """Validated rooted weighted tree over the label space.

    ``edge_weight[v]`` is the weight of the edge from ``v`` to its parent;
    the root carries no edge. ``levels`` (``K``) is the maximum node depth.
    """

    nodes: list[NodeRecord]
    root: int
    parent: dict[int, int] = field(repr=False)
    edge_weight: dict[int, float] = field(repr=False)
    depth: dict[int, int] = field(repr=False)
    levels: int

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_leaves(self) -> int:
        return sum(1 for n in self.nodes if n.is_leaf)

    def children(self, v: int) -> list[int]:
        return self.nodes[v].children

    def name_of(self, v: int) -> str:
        return self.nodes[v].name

    def id_of(self, name: str) -> int:
        for n in self.nodes:
            if n.name == name:
                return n.id
        raise KeyError(name)

    def leaf_names(self) -> list[str]:
        return [self.nodes[i].name for i in range(self.n_leaves)]

    def leaves_under(self, v: int) -> list[int]:
        """Leaf ids in the subtree rooted at v, ascending."""
        out, stack = [], [v]
        while stack:
            u = stack.pop()
            if self.nodes[u].is_leaf:
                out.append(u)
            else:
                stack.extend(self.nodes[u].children)
        return sorted(out)

    def height(self, v: int) -> int:
        """Edge distance from v to its deepest descendant leaf."""
        if self.nodes[v].is_leaf:
            return 0
        return 1 + max(self.height(c) for c in self.nodes[v].children)

    def deepest_first(self) -> list[int]:
        """Node ids ordered children-before-parents (by decreasing depth)."""
        return sorted(range(self.n_nodes), key=lambda v: (-self.depth[v], v))

    def ancestors(self, v: int) -> list[int]:
        """Chain from v up to and including the root."""
        chain = [v]
        while chain[-1] != self.root:
            chain.append(self.parent[chain[-1]])
        return chain

    def to_dict(self) -> dict:
        def rec(v: int) -> dict:
            d: dict = {"name": self.nodes[v].name}
            if v != self.root:
                d["weight"] = self.edge_weight[v]
            if self.nodes[v].children:
                d["children"] = [rec(c) for c in self.nodes[v].children]
            return d

        return rec(self.root)


def serialize(tree: LabelTree) -> str:
    """Serialize to the hierarchy JSON format; parse_tree round-trips it."""
    return json.dumps(tree.to_dict(), indent=2)


def parse_tree(document: str) -> LabelTree:
    """Parse and validate a hierarchy document.

    The document is nested JSON ``{"name": str, "weight": number?,
    "children": [...]}``. A child entry may also be a string naming a node
    defined elsewhere; that allows documents to (incorrectly) attach one
    node under two parents or to form cycles, both rejected with
    StructureError.
    """
    try:
        data = json.loads(document)
    except json.JSONDecodeError as e:
        raise ParseError(f"hierarchy is not valid JSON: {e}") from e
    if isinstance(data, list):
        raise StructureError("hierarchy document must have a single root object")
    if not isinstance(data, dict):
        raise ParseError("hierarchy document must be a JSON object")

    defs: dict[str, dict] = {}  # name -> node object
    child_names: dict[str, list[str]] = {}

    def collect(obj: dict) -> str:
        if not isinstance(obj, dict) or "name" not in obj:
            raise ParseError("every node requires a 'name' field")
        name = obj["name"]
        if not isinstance(name, str):
            raise ParseError(f"node name must be a string, got {name!r}")
        if name in defs:
            raise ParseError(f"duplicate node name {name!r}")
        defs[name] = obj
        w = obj.get("weight", 1.0)
        if not isinstance(w, (int, float)) or isinstance(w, bool):
            raise ParseError(f"weight of {name!r} must be a number")
        if w < 0:
            raise WeightError(f"negative edge weight {w} on node {name!r}")
        kids = obj.get("children", [])
        if not isinstance(kids, list):
            raise ParseError(f"children of {name!r} must be a list")
        names = []
        for entry in kids:
            if isinstance(entry, str):
                names.append(entry)
            else:
                names.append(collect(entry))
        child_names[name] = names
        return name

    root_name = collect(data)

    parent_count: dict[str, int] = {}
    for p, kids in child_names.items():
        for c in kids:
            if c not in defs:
                raise ParseError(f"child reference {c!r} does not name a defined node")
            parent_count[c] = parent_count.get(c, 0) + 1

    for name, count in parent_count.items():
        if count > 1:
            raise StructureError(f"node {name!r} is listed under {count} parents")
    if root_name in parent_count:
        raise StructureError(f"root {root_name!r} appears as a child (cycle)")

    # Reachability from the root; with single parents, unreached defined
    # nodes mean a second root or a detached cycle.
    reached, stack = {root_name}, [root_name]
    while stack:
        u = stack.pop()
        for c in child_names[u]:
            if c in reached:
                raise StructureError(f"cycle through node {c!r}")
            reached.add(c)
            stack.append(c)
    unreached = set(defs) - reached
    if unreached:
        raise StructureError(f"nodes not reachable from the root: {sorted(unreached)}")

    weights = {name: float(defs[name].get("weight", 1.0)) for name in defs}
    return build_tree(root_name, child_names, weights)


def build_tree(root_name: str, child_names: dict[str, list[str]], weights: dict[str, float] | None = None) -> LabelTree:
    """Construct a validated LabelTree from name-keyed structure maps."""
    weights = weights or {}

    order: list[str] = []  # depth-first declaration order
    depth_by_name = {root_name: 0}
    stack = [root_name]
    while stack:
        u = stack.pop()
        order.append(u)
        for c in reversed(child_names.get(u, [])):
            depth_by_name[c] = depth_by_name[u] + 1
            stack.append(c)

    leaves = [n for n in order if not child_names.get(n)]
    internals = [n for n in order if child_names.get(n)]
    if len(leaves) < 2:
        raise StructureError(f"a label tree needs at least 2 leaves, got {len(leaves)}")
    ids = {name: i for i, name in enumerate(leaves + internals)}

    nodes = [NodeRecord(id=ids[n], name=n, children=[ids[c] for c in child_names.get(n, [])]) for n in leaves + internals]
    parent = {}
    for p, kids in child_names.items():
        for c in kids or []:
            parent[ids[c]] = ids[p]
    edge_weight = {}
    for name in leaves + internals:
        if name == root_name:
            continue
        w = float(weights.get(name, 1.0))
        if w < 0:
            raise WeightError(f"negative edge weight {w} on node {name!r}")
        edge_weight[ids[name]] = w
    depth = {ids[n]: depth_by_name[n] for n in leaves + internals}
    tree = LabelTree(
        nodes=nodes,
        root=ids[root_name],
        parent=parent,
        edge_weight=edge_weight,
        depth=depth,
        levels=max(depth_by_name[leaf] for leaf in leaves),
    )
    validate(tree)
    return tree


def validate(tree: LabelTree) -> None:
    """Check structural invariants; raise StructureError/WeightError on violation."""
    n = tree.n_nodes
    c = tree.n_leaves
    if c < 2:
        raise StructureError(f"need at least 2 leaves, got {c}")
    if not all(tree.nodes[i].is_leaf for i in range(c)) or any(tree.nodes[i].is_leaf for i in range(c, n)):
        raise StructureError("leaf ids must form the contiguous range 0..C-1")
    if tree.root in tree.parent:
        raise StructureError("root must not have a parent")
    for v in range(n):
        if v != tree.root and v not in tree.parent:
            raise StructureError(f"non-root node {v} has no parent")
    for v, w in tree.edge_weight.items():
        if w < 0:
            raise WeightError(f"negative weight on edge above node {v}")
    # every leaf's ancestor chain reaches the root without revisiting a node
    for leaf in range(c):
        seen = set()
        v = leaf
        while v != tree.root:
            if v in seen:
                raise StructureError(f"cycle in parent chain at node {v}")
            seen.add(v)
            v = tree.parent[v]


def assign_weights(tree: LabelTree, scheme: EdgeWeightScheme) -> LabelTree:
    """Return a copy of the tree with edge weights set by the scheme.

    top: 1 on root-child edges, 0 elsewhere. leaf: 1 on leaf edges, 0
    elsewhere. equal: all 1. hier: a leaf-adjacent edge weighs 1 and each
    edge one level closer to the root weighs kappa times its child edge;
    on ragged trees the exponent is the child node's height, so every
    leaf-adjacent edge weighs 1 regardless of branch depth.
    """
    weights: dict[int, float] = {}
    for v in range(tree.n_nodes):
        if v == tree.root:
            continue
        if scheme.kind == "top":
            weights[v] = 1.0 if tree.parent[v] == tree.root else 0.0
        elif scheme.kind == "leaf":
            weights[v] = 1.0 if tree.nodes[v].is_leaf else 0.0
        elif scheme.kind == "equal":
            weights[v] = 1.0
        else:
            weights[v] = float(scheme.kappa) ** tree.height(v)
    return replace(tree, edge_weight=weights)


def adjacency(tree: LabelTree) -> np.ndarray:
    """N x N 0/1 matrix with A[parent, child] = 1."""
    a = np.zeros((tree.n_nodes, tree.n_nodes))
    for child, par in tree.parent.items():
        a[par, child] = 1.0
    return a


def level_of_band(tree: LabelTree, v: int) -> int:
    """Distance-to-root band of v: root children sit at band K-1."""
    return tree.levels - tree.depth[v]


def level_nodes(tree: LabelTree, k: int) -> set[int]:
    """Node ids forming level k.

    Level k is a cut: internal nodes whose band equals k plus every leaf
    at band >= k. Level 0 is therefore all leaves and level K-1 the
    children of the root, including on ragged trees.
    """
    if not 0 <= k <= tree.levels - 1:
        raise RangeError(f"level {k} out of range [0, {tree.levels - 1}]")
    out = set()
    for v in range(tree.n_nodes):
        if v == tree.root:
            continue
        band = level_of_band(tree, v)
        if (band >= k) if tree.nodes[v].is_leaf else (band == k):
            out.add(v)
    return out


def leaf_level_map(tree: LabelTree, k: int) -> np.ndarray:
    """For each leaf, the id of its unique level-k cut node (itself if shallow)."""
    members = level_nodes(tree, k)
    out = np.empty(tree.n_leaves, dtype=np.int64)
    for leaf in range(tree.n_leaves):
        hit = [v for v in tree.ancestors(leaf) if v in members]
        out[leaf] = hit[0] if hit else leaf
    return out


def random_tree(rng: np.random.Generator, depth: int = 3, branching: tuple[int, int] = (2, 3), ragged: bool = False) -> LabelTree:
    """Sample a random label tree for tests and synthetic corpora.

    Each internal node gets a child count drawn from ``branching``
    (inclusive); with ``ragged`` some branches stop early. Deterministic
    given the generator state.
    """
    lo, hi = branching
    counter = [0]
    child_names: dict[str, list[str]] = {}

    def grow(name: str, remaining: int) -> None:
        if remaining == 0:
            child_names[name] = []
            return
        if ragged and remaining < depth and rng.random() < 0.25:
            child_names[name] = []
            return
        kids = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            counter[0] += 1
            kid = f"n{counter[0]}"
            kids.append(kid)
            grow(kid, remaining - 1)
        child_names[name] = kids

    while True:
        counter[0] = 0
        child_names.clear()
        grow("root", depth)
        if sum(1 for k in child_names.values() if not k) >= 2:
            return build_tree("root", child_names)

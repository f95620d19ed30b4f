"""Rooted class taxonomies and label paths.

A tree file is UTF-8 text with one node per line, ``name<TAB>parent_name``;
the root line is ``name<TAB>-`` and ``#`` starts a comment.  Node ids follow
file order with the root at 0.  The root is an artificial class: it is
excluded from label encodings and from every metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TreeParseError, UsageError

# A label path is a tuple of node ids from the root's child down to the final
# class, in depth order.  The root never appears in a path.
LabelPath = tuple  # tuple[int, ...]


@dataclass(frozen=True)
class TreeNode:
    id: int
    name: str
    parent: int | None


@dataclass
class ClassTree:
    nodes: list = field(default_factory=list)

    def __post_init__(self):
        self._children: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            if n.parent is not None:
                self._children[n.parent].append(n.id)
        self._by_name = {n.name: n.id for n in self.nodes}
        self._depth = {}
        for n in self.nodes:
            d, cur = 1, n
            while cur.parent is not None:
                cur = self.nodes[cur.parent]
                d += 1
            self._depth[n.id] = d

    # -- structure queries ---------------------------------------------------

    @property
    def root(self) -> int:
        return 0

    @property
    def n_classes(self) -> int:
        """Number of non-root classes."""
        return len(self.nodes) - 1

    def name(self, node_id: int) -> str:
        return self.nodes[node_id].name

    def id_of(self, name: str) -> int:
        if name not in self._by_name:
            raise UsageError(f"unknown class name {name!r}")
        return self._by_name[name]

    def children(self, node_id: int) -> list:
        return self._children[node_id]

    def is_leaf(self, node_id: int) -> bool:
        return not self._children[node_id]

    def leaves(self) -> list:
        return [n.id for n in self.nodes if self.is_leaf(n.id)]

    def depth(self, node_id: int) -> int:
        """Depth counting the root as 1."""
        return self._depth[node_id]

    def max_path_length(self) -> int:
        """Length of the longest label path (root excluded)."""
        return max(self._depth[v] for v in self.leaves()) - 1

    def path_to(self, node_id: int) -> LabelPath:
        """The unique root-to-node path, root excluded."""
        if not 0 < node_id < len(self.nodes):
            raise UsageError(f"unknown node id {node_id}")
        path = []
        cur = node_id
        while cur != self.root:
            path.append(cur)
            cur = self.nodes[cur].parent
        return tuple(reversed(path))

    def validate_path(self, path: LabelPath):
        if len(path) < 1:
            raise UsageError("a label path must contain at least one node")
        prev = self.root
        for v in path:
            if not 0 < v < len(self.nodes):
                raise UsageError(f"unknown node id {v} in path")
            if self.nodes[v].parent != prev:
                raise UsageError(
                    f"{self.name(v)!r} is not a child of "
                    f"{self.name(prev)!r}: invalid path")
            prev = v

    def path_names(self, path: LabelPath) -> str:
        return "/".join(self.name(v) for v in path)

    def path_from_names(self, text: str) -> LabelPath:
        path = tuple(self.id_of(n) for n in text.split("/"))
        self.validate_path(path)
        return path

    # -- serialization -------------------------------------------------------

    def serialize(self) -> str:
        lines = []
        for n in self.nodes:
            parent = "-" if n.parent is None else self.nodes[n.parent].name
            lines.append(f"{n.name}\t{parent}")
        return "\n".join(lines) + "\n"


def parse_tree(text: str) -> ClassTree:
    """Parse and validate a tree file."""
    nodes: list[TreeNode] = []
    by_name: dict[str, int] = {}
    pending: list[tuple[int, str, int]] = []  # (node id, parent name, line no)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TreeParseError("expected 'name<TAB>parent'", line=lineno)
        name, parent = parts[0].strip(), parts[1].strip()
        if not name:
            raise TreeParseError("empty node name", line=lineno)
        if name in by_name:
            raise TreeParseError(f"duplicate name {name!r}", line=lineno)
        node_id = len(nodes)
        if parent == "-":
            if node_id != 0:
                raise TreeParseError(
                    f"second root {name!r}; exactly one root allowed", line=lineno)
            nodes.append(TreeNode(node_id, name, None))
        else:
            if node_id == 0:
                raise TreeParseError("first line must be the root (parent '-')",
                                     line=lineno)
            pending.append((node_id, parent, lineno))
            nodes.append(TreeNode(node_id, name, None))
        by_name[name] = node_id
    if not nodes:
        raise TreeParseError("empty tree file", line=1)
    for node_id, parent, lineno in pending:
        if parent not in by_name:
            raise TreeParseError(f"dangling parent {parent!r}", line=lineno)
        nodes[node_id] = TreeNode(node_id, nodes[node_id].name, by_name[parent])
    _check_acyclic(nodes)
    return ClassTree(nodes)


def load_tree(path) -> ClassTree:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_tree(fh.read())


def _check_acyclic(nodes):
    for n in nodes:
        seen = set()
        cur = n.id
        while cur is not None:
            if cur in seen:
                raise TreeParseError(f"cycle through node {n.name!r}")
            seen.add(cur)
            cur = nodes[cur].parent


# -- encodings ---------------------------------------------------------------


def validate_fixed_depth(tree: ClassTree) -> int:
    """Return the common path length T; raise if leaf depths differ."""
    depths = {v: tree.depth(v) for v in tree.leaves()}
    distinct = set(depths.values())
    if len(distinct) != 1:
        offenders = ", ".join(
            f"{tree.name(v)} (depth {d})" for v, d in sorted(depths.items()))
        raise UsageError(f"leaves are at unequal depths: {offenders}")
    return distinct.pop() - 1


def one_hot(tree: ClassTree, path: LabelPath, level: int) -> np.ndarray:
    """One-hot vector of length N for the node at the given 1-based level."""
    if not 1 <= level <= len(path):
        raise UsageError(f"level {level} out of range for path of length {len(path)}")
    vec = np.zeros(tree.n_classes)
    vec[path[level - 1] - 1] = 1.0  # ids shift by one since the root is excluded
    return vec


def paths_to_multilabel(paths, tree: ClassTree) -> np.ndarray:
    """0/1 vector of length N marking every node on any of the paths."""
    vec = np.zeros(tree.n_classes)
    for path in paths:
        tree.validate_path(path)
        for v in path:
            vec[v - 1] = 1.0
    return vec


def enumerate_paths(tree: ClassTree, leaves_only: bool = True) -> list:
    """All root-to-leaf (or root-to-node) paths in depth-first file order."""
    out = []

    def visit_all(node_id, prefix):
        for child in tree.children(node_id):
            path = prefix + (child,)
            if not leaves_only or tree.is_leaf(child):
                out.append(path)
            visit_all(child, path)

    visit_all(tree.root, ())
    return out

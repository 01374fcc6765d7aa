"""Rooted key tree layered by hop distance from the root.

Trees are immutable snapshots: every mutation returns a new KeyTree. Layering
is canonical (BFS level, lowest-ID parent), so rebuilding from the same
membership and graph gives an identical tree.
"""
import logging
from dataclasses import dataclass

import networkx as nx

logger = logging.getLogger(__name__)


class KeyTreeError(Exception):
    pass


class IsolatedRoot(KeyTreeError):
    pass


class UnknownNode(KeyTreeError):
    pass


class Disconnected(KeyTreeError):
    pass


class RootDeparture(KeyTreeError):
    pass


class Unreachable(KeyTreeError):
    def __init__(self, nodes):
        self.nodes = sorted(nodes)
        super().__init__(f"Members unreachable from root: {self.nodes}")


class PartitionedSubtree(KeyTreeError):
    def __init__(self, nodes, tree=None, affected=None):
        self.nodes = sorted(nodes)
        self.tree = tree
        self.affected = affected
        super().__init__(f"Subtree cut off from the group: {self.nodes}")


@dataclass(frozen=True)
class KeyTree:
    root: int
    parent: dict
    children: dict
    level: dict
    checker: int | None = None

    @property
    def height(self):
        return max(self.level.values())

    @property
    def members(self):
        return frozenset(self.level)

    def __contains__(self, node):
        return node in self.level

    def subtree(self, node):
        found = {node}
        stack = [node]
        while stack:
            for child in self.children.get(stack.pop(), ()):
                found.add(child)
                stack.append(child)
        return frozenset(found)

    def bottom_up(self):
        """Members ordered deepest level first, ascending ID within a level."""
        return sorted(self.level, key=lambda n: (-self.level[n], n))

    def level_one(self):
        return tuple(self.children.get(self.root, ()))


def _layered(root, levels, graph, checker):
    parent = {}
    for node, lvl in levels.items():
        if node == root:
            continue
        parent[node] = min(m for m in graph.neighbors(node) if levels.get(m) == lvl - 1)
    return _assemble(root, parent, dict(levels), checker)


def _assemble(root, parent, level, checker):
    children = {node: [] for node in level}
    for node, up in parent.items():
        children[up].append(node)
    children = {node: tuple(sorted(kids)) for node, kids in children.items()}
    return KeyTree(root=root, parent=dict(parent), children=children, level=level, checker=checker)


def _bfs_levels(root, nodes, graph):
    sub = graph.subgraph(n for n in nodes if n in graph)
    if root not in sub:
        return {root: 0}
    return dict(nx.single_source_shortest_path_length(sub, root))


def select_checker(root, graph, rng):
    if root not in graph or graph.degree(root) == 0:
        raise IsolatedRoot(f"Root {root} has no one-hop neighbour to act as checker")
    neighbours = sorted(graph.neighbors(root))
    return neighbours[int(rng.integers(len(neighbours)))]


def build_tree(root, members, graph, checker):
    members = set(members)
    if checker is not None and checker not in members:
        raise KeyTreeError(f"Checker {checker} is not a group member")
    nodes = members - {checker}
    if root not in nodes:
        raise KeyTreeError(f"Root {root} is not a tree member")

    levels = _bfs_levels(root, nodes, graph)
    missing = nodes - levels.keys()
    if missing:
        raise Unreachable(missing)

    tree = _layered(root, levels, graph, checker)
    logger.debug(f"Built key tree rooted at {root}: {len(nodes)} members, height {tree.height}")
    return tree


def key_path(tree, node):
    if node not in tree:
        raise UnknownNode(f"Node {node} is not in the key tree")
    path = [node]
    while path[-1] != tree.root:
        path.append(tree.parent[path[-1]])
    return path


def attach_member(tree, new_node, graph):
    if new_node in tree or new_node == tree.checker:
        raise KeyTreeError(f"Node {new_node} is already a group member")
    neighbours = [m for m in graph.neighbors(new_node) if m in tree] if new_node in graph else []
    if not neighbours:
        raise Disconnected(f"Node {new_node} has no neighbour inside the key tree")

    lowest = min(tree.level[m] for m in neighbours)
    parent = dict(tree.parent)
    level = dict(tree.level)
    parent[new_node] = min(m for m in neighbours if tree.level[m] == lowest)
    level[new_node] = lowest + 1

    if any(tree.level[m] > lowest + 2 for m in neighbours):
        # the joiner is a shortcut for deeper nodes; re-layer to keep BFS levels exact
        logger.info(f"Joiner {new_node} shortens paths in the tree, re-layering")
        levels = _bfs_levels(tree.root, set(level), graph)
        return _layered(tree.root, levels, graph, tree.checker)
    return _assemble(tree.root, parent, level, tree.checker)


def detach_member(tree, leaver, graph, strict=False):
    """Remove a member and re-attach its orphans.

    Returns (new_tree, affected): the leaver's former ancestors plus every
    node whose parent changed. Members left without a path to the root are
    dropped from the tree (PartitionedSubtree when strict).
    """
    if leaver == tree.checker:
        return tree, {tree.root}
    if leaver not in tree:
        raise UnknownNode(f"Node {leaver} is not a group member")
    if leaver == tree.root:
        raise RootDeparture(f"Root {leaver} is leaving the group")

    ancestors = set(key_path(tree, leaver)[1:])
    remaining = tree.members - {leaver}
    levels = _bfs_levels(tree.root, remaining, graph)
    new_tree = _layered(tree.root, levels, graph, tree.checker)

    moved = {n for n in new_tree.parent if tree.parent.get(n) != new_tree.parent[n]}
    affected = ancestors | moved
    dropped = remaining - new_tree.members
    if dropped:
        logger.warning(f"Leave of {leaver} cut off {sorted(dropped)} from the group")
        if strict:
            raise PartitionedSubtree(dropped, new_tree, affected)
    return new_tree, affected


def is_bfs_layered(tree, graph):
    """Oracle: every level equals the BFS hop distance over the tree members."""
    return _bfs_levels(tree.root, tree.members, graph) == tree.level


def dump_tree(tree):
    lines = [f"checker,{'' if tree.checker is None else tree.checker}"]
    for node in sorted(tree.level, key=lambda n: (tree.level[n], n)):
        up = tree.parent.get(node)
        lines.append(f"{tree.level[node]},{node},{'' if up is None else up}")
    return '\n'.join(lines) + '\n'

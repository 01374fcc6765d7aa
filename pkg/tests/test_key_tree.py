import networkx as nx
import numpy as np
import pytest

from conftest import DEEP_JOINER, TREE_CHECKER, TREE_ROOT
from key_tree import (
    Disconnected,
    IsolatedRoot,
    KeyTreeError,
    PartitionedSubtree,
    RootDeparture,
    UnknownNode,
    Unreachable,
    attach_member,
    build_tree,
    detach_member,
    dump_tree,
    is_bfs_layered,
    key_path,
    select_checker,
)


@pytest.fixture
def tree(tree_graph):
    return build_tree(TREE_ROOT, tree_graph.nodes, tree_graph, TREE_CHECKER)


def test_tree_layout(tree, tree_graph):
    assert tree.root == TREE_ROOT
    assert tree.level[TREE_ROOT] == 0
    assert tree.height == 4
    assert len(tree.members) == 17
    assert TREE_CHECKER not in tree
    assert tree.level_one() == (2, 3, 4)
    assert is_bfs_layered(tree, tree_graph)


def test_every_member_but_the_root_has_one_parent(tree):
    assert set(tree.parent) == tree.members - {TREE_ROOT}
    for node, up in tree.parent.items():
        assert tree.level[up] == tree.level[node] - 1
        assert node in tree.children[up]


def test_parent_is_the_lowest_id_candidate(tree):
    # 13 hangs under 7 (level 2); 12 is a same-level neighbour only
    assert tree.parent[13] == 7
    assert tree.parent[8] == 3


def test_build_tree_is_canonical(tree_graph):
    first = build_tree(TREE_ROOT, tree_graph.nodes, tree_graph, TREE_CHECKER)
    second = build_tree(TREE_ROOT, sorted(tree_graph.nodes, reverse=True), tree_graph, TREE_CHECKER)
    assert first == second


def test_single_member_tree():
    graph = nx.Graph()
    graph.add_node(0)
    tree = build_tree(0, [0], graph, None)
    assert tree.height == 0
    assert tree.members == {0}


def test_unreachable_members_are_named(tree_graph):
    graph = tree_graph.copy()
    graph.add_node(40)
    with pytest.raises(Unreachable) as info:
        build_tree(TREE_ROOT, list(graph.nodes), graph, TREE_CHECKER)
    assert info.value.nodes == [40]


def test_checker_is_a_root_neighbour(tree_graph):
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert tree_graph.has_edge(TREE_ROOT, select_checker(TREE_ROOT, tree_graph, rng))


def test_checker_draw_is_uniform_over_root_neighbours(tree_graph):
    rng = np.random.default_rng(17)
    neighbours = sorted(tree_graph.neighbors(TREE_ROOT))
    draws = [select_checker(TREE_ROOT, tree_graph, rng) for _ in range(4000)]
    counts = np.array([draws.count(node) for node in neighbours])
    expected = len(draws) / len(neighbours)
    statistic = ((counts - expected) ** 2 / expected).sum()
    assert counts.sum() == len(draws)
    # chi-square, 3 degrees of freedom, 0.999 quantile
    assert statistic < 16.27


def connected_graphs(count, size=30):
    seed = 0
    while count:
        graph = nx.gnp_random_graph(size, 0.12, seed=seed)
        seed += 1
        if nx.is_connected(graph):
            count -= 1
            yield graph


def reference_layout(graph, root):
    levels = nx.single_source_shortest_path_length(graph, root)
    parents = {node: min(m for m in graph.neighbors(node) if levels[m] == level - 1)
               for node, level in levels.items() if node != root}
    return levels, parents


@pytest.mark.parametrize('graph', connected_graphs(20))
def test_build_tree_matches_bfs_with_lowest_id_parents(graph):
    tree = build_tree(0, graph.nodes, graph, None)
    levels, parents = reference_layout(graph, 0)
    assert tree.level == levels
    assert tree.parent == parents


def test_isolated_root_has_no_checker():
    graph = nx.Graph()
    graph.add_nodes_from([0, 1])
    with pytest.raises(IsolatedRoot):
        select_checker(0, graph, np.random.default_rng(0))


def test_key_path(tree):
    assert key_path(tree, 16) == [16, 11, 6, 2, 1]
    assert key_path(tree, TREE_ROOT) == [TREE_ROOT]
    with pytest.raises(UnknownNode):
        key_path(tree, 99)


def test_deep_join_becomes_a_leaf_under_its_neighbour(join_graph):
    base = build_tree(TREE_ROOT, set(join_graph.nodes) - {DEEP_JOINER}, join_graph, TREE_CHECKER)
    grown = attach_member(base, DEEP_JOINER, join_graph)
    assert grown.parent[DEEP_JOINER] == 6
    assert grown.level[DEEP_JOINER] == 3
    assert key_path(grown, DEEP_JOINER) == [DEEP_JOINER, 6, 2, 1]
    assert is_bfs_layered(grown, join_graph)
    # nobody else moved
    assert {n: grown.parent[n] for n in base.parent} == base.parent


def test_joiner_next_to_the_root_lands_on_level_one(tree_graph, tree):
    graph = tree_graph.copy()
    graph.add_edge(TREE_ROOT, 30)
    grown = attach_member(tree, 30, graph)
    assert grown.level[30] == 1
    assert 30 in grown.level_one()


def test_shortcut_joiner_relayers_the_tree(tree_graph, tree):
    graph = tree_graph.copy()
    graph.add_edges_from([(TREE_ROOT, 30), (30, 16)])
    grown = attach_member(tree, 30, graph)
    assert grown.level[16] == 2
    assert grown.parent[16] == 30
    assert is_bfs_layered(grown, graph)


def test_joiner_takes_the_shallower_neighbour(tree_graph, tree):
    graph = tree_graph.copy()
    # 9 sits on level 2 and 11 on level 3
    graph.add_edges_from([(30, 9), (30, 11)])
    grown = attach_member(tree, 30, graph)
    assert (tree.level[9], tree.level[11]) == (2, 3)
    assert grown.parent[30] == 9
    assert grown.level[30] == 3
    assert is_bfs_layered(grown, graph)


def test_joiner_without_a_member_neighbour(tree_graph, tree):
    graph = tree_graph.copy()
    graph.add_node(30)
    with pytest.raises(Disconnected):
        attach_member(tree, 30, graph)
    with pytest.raises(KeyTreeError):
        attach_member(tree, 6, tree_graph)


def test_leaf_leave_affects_only_its_ancestors(tree, tree_graph):
    shrunk, affected = detach_member(tree, 16, tree_graph)
    assert 16 not in shrunk
    assert affected == {11, 6, 2, 1}
    assert is_bfs_layered(shrunk, tree_graph)


def test_inner_leave_reattaches_orphans(tree_graph):
    graph = tree_graph.copy()
    graph.add_edge(12, 16)
    tree = build_tree(TREE_ROOT, graph.nodes, graph, TREE_CHECKER)
    shrunk, affected = detach_member(tree, 11, graph)
    assert shrunk.parent[16] == 12
    assert shrunk.level[16] == 4
    assert 16 in affected and 6 in affected


def test_leave_that_partitions_drops_the_cut_subtree(tree, tree_graph):
    shrunk, _ = detach_member(tree, 14, tree_graph)
    assert 17 not in shrunk
    with pytest.raises(PartitionedSubtree) as info:
        detach_member(tree, 14, tree_graph, strict=True)
    assert info.value.nodes == [17]


def test_root_and_unknown_leaves(tree, tree_graph):
    with pytest.raises(RootDeparture):
        detach_member(tree, TREE_ROOT, tree_graph)
    with pytest.raises(UnknownNode):
        detach_member(tree, 99, tree_graph)


def test_checker_leave_leaves_the_tree_alone(tree, tree_graph):
    same, affected = detach_member(tree, TREE_CHECKER, tree_graph)
    assert same is tree
    assert affected == {TREE_ROOT}


def test_dump_tree_format(tree):
    lines = dump_tree(tree).splitlines()
    assert lines[0] == f"checker,{TREE_CHECKER}"
    assert lines[1] == f"0,{TREE_ROOT},"
    assert lines[2] == "1,2,1"
    assert lines[-1] == "4,17,14"
    assert len(lines) == 18

import networkx as nx
import numpy as np
import pytest

from config import ScenarioConfig, SomConfig, TrafficConfig
from crypto_primitives import KeyMaterial
from gka_protocol import GroupSession, found_group

# Key tree of 17 members rooted at 1 with height 4; node 5 is the root's
# neighbour that acts as checker.
TREE_EDGES = [
    (1, 2), (1, 3), (1, 4), (1, 5), (2, 5),
    (2, 6), (2, 7), (3, 8), (3, 9), (4, 10),
    (6, 11), (6, 12), (7, 13), (8, 14), (9, 18), (10, 15),
    (11, 16), (14, 17),
    (2, 3), (7, 8), (12, 13),
]
TREE_ROOT = 1
TREE_CHECKER = 5

# a joiner three hops from the root, one hop from node 6
DEEP_JOINER = 19

# node A=1 with one-hop neighbours B=2, C=3, D=4, G=7
NEIGHBOURHOOD_EDGES = [(1, 2), (1, 3), (1, 4), (1, 7), (4, 5), (3, 6), (2, 3)]

# D=4 is the victim; every other node keeps a route around it
ALARM_EDGES = [(1, 4), (2, 4), (3, 4), (4, 5), (1, 2), (2, 3), (3, 6), (5, 6)]
ALARM_VICTIM = 4


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tree_graph():
    graph = nx.Graph()
    graph.add_edges_from(TREE_EDGES)
    return graph


@pytest.fixture
def join_graph(tree_graph):
    graph = tree_graph.copy()
    graph.add_edge(6, DEEP_JOINER)
    return graph


@pytest.fixture
def neighbourhood_graph():
    graph = nx.Graph()
    graph.add_edges_from(NEIGHBOURHOOD_EDGES)
    return graph


@pytest.fixture
def alarm_graph():
    graph = nx.Graph()
    graph.add_edges_from(ALARM_EDGES)
    return graph


def make_session(graph, seed=7, protocol=None, channel=None):
    master = KeyMaterial.random(np.random.default_rng([seed, 99]))
    return GroupSession(graph, TREE_ROOT, master, seed, protocol, channel)


@pytest.fixture
def tree_session(tree_graph):
    session = make_session(tree_graph)
    found_group(session, tree_graph.nodes, checker=TREE_CHECKER)
    return session


@pytest.fixture
def join_session(join_graph):
    """The tree group founded on a graph where the joiner is already in range."""
    session = make_session(join_graph)
    members = set(join_graph.nodes) - {DEEP_JOINER}
    found_group(session, members, checker=TREE_CHECKER)
    return session


@pytest.fixture
def small_som():
    return SomConfig(rows=8, cols=10, epochs=5)


@pytest.fixture
def small_scenario():
    """A short sparse run with one dropper; keeps the unit tests fast."""
    return ScenarioConfig(
        node_count=14,
        area_width=500.0,
        area_height=300.0,
        radio_range=180.0,
        duration=30.0,
        traffic=TrafficConfig(generators=8, destinations=4, attack_start=5.0, attack_end=25.0),
        som=SomConfig(rows=6, cols=8, epochs=3),
        dropper_counts=(1,),
        global_rekey_period=10.0,
        local_rekey_period=15.0,
        response_interval=5.0,
        window=5,
        min_window=5,
    )


@pytest.fixture
def dense_scenario():
    """Every node in range of every other; groups always form."""
    return ScenarioConfig(
        node_count=10,
        area_width=200.0,
        area_height=150.0,
        radio_range=300.0,
        duration=10.0,
        traffic=TrafficConfig(attack_start=0.0, attack_end=10.0),
        attack_trials=20,
        replay_trials=20,
    )

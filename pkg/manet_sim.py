"""Deterministic simulated MANET and the scenario runner.

A World holds node positions under random-waypoint mobility; connectivity is
the unit-disk graph at the radio range. Traffic features come from a
parametric model instead of a packet-level simulation: a source whose route
crosses an active dropper sees its receive rate and forwarding count fall and
its data retransmissions rise.
"""
import heapq
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import networkx as nx
import numpy as np
import pandas as pd

from config import FEATURE_COLUMNS, LABEL_COLUMN, ConfigError, validate_config
from crypto_primitives import KeyMaterial, NonceSource
from esom_detector import ATTACK, NORMAL, DetectorError, classify_frame, evaluate, fingerprint, train_model
from gka_protocol import (
    AbortError,
    DirectChannel,
    GroupSession,
    ProtocolError,
    decode_message,
    encode_message,
    found_group,
    member_join,
    member_leave,
    nx_component,
    periodic_global_rekey,
    periodic_local_rekey,
    reinitiate,
    snapshot,
    tree_is_stale,
)
from key_tree import KeyTreeError
from response_engine import (
    CoverageWindow,
    InsufficientWindow,
    NoSecureNeighbor,
    check_global_trigger,
    distribute_local_maps,
    global_alarm,
    lift_quarantine,
    routing_tables,
    select_forwarding_node,
)
from utils import EventTrace, ensure_dir, write_metrics

logger = logging.getLogger(__name__)

# feature model, in physical units
NAV_BASELINE = 0.02
RETX_BASELINE = 0.05
TX_BYTES_PER_SECOND = 4096.0
FEATURE_SPREAD = np.array([0.005, 1.5, 1.5, 0.01, 0.01, 1.0, 0.5])
ATTACK_SHIFT = np.array([0.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0])
SYNTHETIC_SHIFT = np.array([1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0])

# floor on a leg speed, m/s; a zero-speed leg never reaches its waypoint
MIN_LEG_SPEED = 0.1

_STREAMS = {
    'split': 2 ** 32 + 1,
    'som': 2 ** 32 + 2,
    'response': 2 ** 32 + 3,
    'master': 2 ** 32 + 4,
}

METRIC_COLUMNS = [
    'seed', 'pause_time', 'droppers', 'nodes', 'members',
    'train_samples', 'test_samples',
    'detection_rate', 'false_alarm_rate', 'node_detection_rate', 'node_false_alarm_rate', 'unclassified',
    'epochs_committed', 'epochs_aborted', 'protocol_drops',
    'replays_rejected', 'replays_accepted', 'frames_eavesdropped',
    'maps_accepted', 'map_tampers', 'alarms_sent', 'quarantines', 'quarantined_nodes', 'false_quarantines',
]


class SimulationError(Exception):
    pass


class AdversaryKind(Enum):
    DROPPER = 'dropper'
    EAVESDROPPER = 'eavesdropper'
    REPLAYER = 'replayer'


@dataclass(frozen=True)
class AdversaryRole:
    kind: AdversaryKind
    start: float = 0.0
    stop: float = math.inf

    def active(self, start, end=None):
        end = start if end is None else end
        return self.start <= end and self.stop >= start


@dataclass
class NodeMotion:
    position: np.ndarray
    waypoint: np.ndarray
    rng: np.random.Generator
    traffic_rng: np.random.Generator
    speed: float = 0.0
    pause_until: float = 0.0
    moving: bool = False

    @property
    def velocity(self):
        offset = self.waypoint - self.position
        distance = float(np.hypot(*offset))
        if not self.moving or distance == 0.0:
            return np.zeros(2)
        return offset * (self.speed / distance)


@dataclass
class World:
    config: object
    nodes: dict
    rng: np.random.Generator
    adversaries: dict = field(default_factory=dict)
    flows: dict = field(default_factory=dict)
    time: float = 0.0
    transcripts: dict = field(default_factory=dict)
    recorded: dict = field(default_factory=dict)
    queue: list = field(default_factory=list)
    links: nx.Graph | None = None
    seq: int = 0

    @property
    def area(self):
        return (self.config.area_width, self.config.area_height)

    def positions(self):
        return np.array([self.nodes[node].position for node in sorted(self.nodes)])

    def adversaries_of(self, kind):
        return sorted(node for node, role in self.adversaries.items() if role.kind is kind)


@dataclass(frozen=True)
class Delivery:
    frame: bytes
    delivered: tuple
    undelivered: tuple = ()
    arrival: float = 0.0


def _stream(seed, name):
    return np.random.default_rng([seed, _STREAMS[name]])


def _assign_adversaries(config, rng):
    candidates = [n for n in range(config.node_count) if n != config.root]
    if config.droppers:
        droppers = sorted(config.droppers)
    else:
        count = config.dropper_counts[0] if config.dropper_counts else 0
        if count > len(candidates):
            raise ConfigError(f"DROPPER_COUNTS: {count} droppers among {len(candidates)} candidate nodes")
        droppers = sorted(int(n) for n in rng.choice(candidates, size=count, replace=False))

    roles = {}
    traffic = config.traffic
    assignments = [
        (droppers, AdversaryRole(AdversaryKind.DROPPER, traffic.attack_start, traffic.attack_end)),
        (config.eavesdroppers, AdversaryRole(AdversaryKind.EAVESDROPPER)),
        (config.replayers, AdversaryRole(AdversaryKind.REPLAYER)),
    ]
    for nodes, role in assignments:
        for node in nodes:
            if node in roles:
                logger.warning(f"Node {node} already acts as {roles[node].kind.value}, now {role.kind.value}")
            roles[node] = role
    return roles


def _assign_flows(config, rng):
    n = config.node_count
    sources = sorted(int(s) for s in rng.choice(n, size=min(config.traffic.generators, n), replace=False))
    pool = [int(d) for d in rng.choice(n, size=min(config.traffic.destinations, n), replace=False)]
    flows = {}
    for index, source in enumerate(sources):
        for step in range(len(pool)):
            destination = pool[(index + step) % len(pool)]
            if destination != source:
                flows[source] = destination
                break
    return flows


def init_world(config, seed):
    """Place nodes uniformly; every node gets its own motion and traffic streams."""
    problems = validate_config(config)
    if problems:
        _, name, message = problems[0]
        raise ConfigError(f"{name}: {message}")

    streams = np.random.SeedSequence(seed).spawn(config.node_count + 1)
    rng = np.random.default_rng(streams[0])
    area = (config.area_width, config.area_height)
    nodes = {}
    for node in range(config.node_count):
        motion_seq, traffic_seq = streams[node + 1].spawn(2)
        motion = np.random.default_rng(motion_seq)
        position = motion.uniform((0.0, 0.0), area)
        nodes[node] = NodeMotion(
            position=position,
            waypoint=position.copy(),
            rng=motion,
            traffic_rng=np.random.default_rng(traffic_seq),
            pause_until=config.mobility.pause_time,
        )

    world = World(config, nodes, rng)
    world.adversaries = _assign_adversaries(config, rng)
    world.flows = _assign_flows(config, rng)
    logger.debug(f"World with {config.node_count} nodes, {len(world.adversaries)} adversaries, "
                 f"{len(world.flows)} flows (seed {seed})")
    return world


def _advance(motion, now, end, mobility, area):
    while now < end:
        if now < motion.pause_until:
            now = min(end, motion.pause_until)
            continue
        if not motion.moving:
            motion.waypoint = motion.rng.uniform((0.0, 0.0), area)
            speed = float(motion.rng.uniform(mobility.speed_min, mobility.speed_max))
            motion.speed = max(speed, min(MIN_LEG_SPEED, mobility.speed_max))
            motion.moving = True
        if motion.speed <= 0.0:
            return
        offset = motion.waypoint - motion.position
        distance = float(np.hypot(*offset))
        reach = motion.speed * (end - now)
        if reach >= distance:
            motion.position = motion.waypoint.copy()
            now += distance / motion.speed
            motion.moving = False
            motion.pause_until = now + mobility.pause_time
        else:
            motion.position = motion.position + offset * (reach / distance)
            now = end


def mobility_step(world, dt):
    """Random waypoint: travel at the leg speed, pause on arrival, then draw a new leg."""
    if dt <= 0:
        raise SimulationError(f"Mobility step needs dt > 0, got {dt}")
    end = world.time + dt
    for node in sorted(world.nodes):
        _advance(world.nodes[node], world.time, end, world.config.mobility, world.area)
    world.time = end
    world.links = None
    return world


def connectivity(world):
    """Unit-disk graph: an edge iff the distance is at most the range (inclusive).

    The graph is cached until the next mobility step; treat it as read-only.
    """
    if world.links is not None:
        return world.links
    ids = sorted(world.nodes)
    positions = world.positions()
    d2 = ((positions[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2)
    rows, cols = np.nonzero(np.triu(d2 <= world.config.radio_range ** 2, k=1))
    graph = nx.Graph()
    graph.add_nodes_from(ids)
    graph.add_edges_from((ids[i], ids[j]) for i, j in zip(rows, cols))
    world.links = graph
    return graph


def _tap(world, frame, hearers):
    for node in hearers:
        role = world.adversaries.get(node)
        if role is None or not role.active(world.time):
            continue
        if role.kind is AdversaryKind.EAVESDROPPER:
            world.transcripts.setdefault(node, []).append(frame)
        elif role.kind is AdversaryKind.REPLAYER:
            world.recorded.setdefault(node, []).append(frame)


def transmit(world, msg, trace=None):
    """One-hop delivery of a protocol message to the sender's radio range."""
    if msg.sender not in world.nodes:
        raise SimulationError(f"Sender {msg.sender} is not in the world")
    frame = encode_message(msg)
    in_range = sorted(connectivity(world).neighbors(msg.sender))
    missed = ()
    if msg.is_broadcast:
        delivered = tuple(in_range)
    elif msg.receiver in in_range:
        delivered = (msg.receiver,)
    else:
        delivered = ()
        missed = (msg.receiver,)
        logger.warning(f"{msg.kind.name} {msg.sender}->{msg.receiver} out of range")
        if trace is not None:
            trace.record(world.time, 'out_of_range', msg.sender, msg.receiver, msg.kind.name)
    _tap(world, frame, in_range)
    return Delivery(frame, delivered, missed, world.time + world.config.protocol.latency)


class WorldChannel:
    """Multi-hop delivery over the world's current connectivity.

    Broadcasts flood the sender's component, unicasts follow a shortest
    path, and adversaries overhear every hop they are in range of.
    """

    def __init__(self, world, latency=0.0):
        self.world = world
        self.latency = latency

    def route(self, msg, frame, participants):
        graph = connectivity(self.world)
        if msg.sender not in graph:
            return []
        hops = nx.single_source_shortest_path_length(graph, msg.sender)
        if msg.is_broadcast:
            targets = [n for n in sorted(participants) if n != msg.sender and n in hops]
            hearers = {n for n in hops if n != msg.sender}
        else:
            if msg.receiver not in participants or msg.receiver not in hops:
                logger.debug(f"{msg.kind.name} {msg.sender}->{msg.receiver} has no route")
                return []
            targets = [msg.receiver]
            hearers = set()
            for relay in nx.shortest_path(graph, msg.sender, msg.receiver)[:-1]:
                hearers.update(graph.neighbors(relay))
            hearers.discard(msg.sender)
        _tap(self.world, frame, sorted(hearers))
        return [(node, self.latency * hops[node]) for node in targets]


def replay_recorded(world, session, replayer, trace=None):
    """Re-inject the replayer's latest recorded frame; returns [(receiver, state_changed)]."""
    frames = world.recorded.get(replayer)
    if not frames:
        return []
    frame = frames[-1]
    msg = decode_message(frame)
    in_range = set(connectivity(world).neighbors(replayer)) & set(session.states)
    if msg.is_broadcast:
        targets = sorted(in_range - {msg.sender})
    else:
        targets = [msg.receiver] if msg.receiver in in_range else []

    outcomes = []
    for node in targets:
        before = snapshot(session.states[node])
        session.inject(frame, node)
        changed = node not in session.states or snapshot(session.states[node]) != before
        outcomes.append((node, changed))
        if changed:
            logger.warning(f"Replayed {msg.kind.name} from {replayer} changed the state of node {node}")
        if trace is not None:
            trace.record(world.time, 'replay', node, replayer,
                         f"{msg.kind.name} {'accepted' if changed else 'rejected'}")
    return outcomes


def schedule(world, when, kind, node=None):
    if when < world.time:
        raise SimulationError(f"Event {kind} at t={when} is earlier than the clock t={world.time}")
    world.seq += 1
    heapq.heappush(world.queue, (when, world.seq, kind, node))


def due_events(world):
    while world.queue and world.queue[0][0] <= world.time + 1e-9:
        when, _, kind, node = heapq.heappop(world.queue)
        yield when, kind, node


def _route(graph, source, destination):
    try:
        return nx.shortest_path(graph, source, destination)
    except nx.NetworkXNoPath:
        return None


def _drops(world, node, start, end):
    role = world.adversaries.get(node)
    return role is not None and role.kind is AdversaryKind.DROPPER and role.active(start, end)


def generate_features(world, traffic=None, dt=None):
    """One feature vector per traffic source for the interval (time - dt, time]."""
    traffic = traffic or world.config.traffic
    dt = traffic.sample_interval if dt is None else dt
    graph = connectivity(world)
    rate = TX_BYTES_PER_SECOND / traffic.mean_payload
    rows = []
    for source in sorted(world.flows):
        path = _route(graph, source, world.flows[source])
        relays = path[1:-1] if path else []
        attacked = any(_drops(world, node, world.time - dt, world.time) for node in relays)
        center = np.array([NAV_BASELINE, rate, rate, RETX_BASELINE, RETX_BASELINE,
                           graph.degree(source), len(relays)], dtype=float)
        noise = world.nodes[source].traffic_rng.standard_normal(len(FEATURE_COLUMNS))
        sample = np.maximum(center + FEATURE_SPREAD * (noise + traffic.effect_size * ATTACK_SHIFT * attacked), 0.0)
        row = {'time': world.time, 'node': source}
        row.update(zip(FEATURE_COLUMNS, sample.tolist()))
        row[LABEL_COLUMN] = ATTACK if attacked else NORMAL
        rows.append(row)
    return pd.DataFrame(rows, columns=['time', 'node', *FEATURE_COLUMNS, LABEL_COLUMN])


def synthetic_feature_frame(count, separation, rng, attack_fraction=0.5):
    """Two Gaussian classes; attack samples shift by `separation` spreads on every feature."""
    attacks = int(round(count * attack_fraction))
    labels = np.array([ATTACK] * attacks + [NORMAL] * (count - attacks))[rng.permutation(count)]
    noise = rng.standard_normal((count, len(FEATURE_COLUMNS)))
    shift = separation * SYNTHETIC_SHIFT * (labels == ATTACK)[:, None]
    center = np.array([NAV_BASELINE, 8.0, 8.0, RETX_BASELINE, RETX_BASELINE, 6.0, 3.0])
    frame = pd.DataFrame(center + FEATURE_SPREAD * (noise + shift), columns=FEATURE_COLUMNS)
    frame[LABEL_COLUMN] = labels
    return frame


def _ticks(config):
    return max(1, int(math.floor(config.duration / config.traffic.sample_interval + 1e-9)))


def collect_features(config, seed):
    """Feature dataset of a whole run, without any protocol activity."""
    world = init_world(config, seed)
    frames = []
    for _ in range(_ticks(config)):
        mobility_step(world, config.traffic.sample_interval)
        frames.append(generate_features(world, config.traffic))
    return pd.concat(frames, ignore_index=True)


def master_key(config, seed):
    if config.master_key:
        return KeyMaterial.from_hex(config.master_key)
    return KeyMaterial.random(_stream(seed, 'master'), config.protocol.key_bits)


def initial_group(config, seed, channel=None):
    """World at t=0 plus a group founded over the root's component."""
    world = init_world(config, seed)
    graph = connectivity(world)
    session = GroupSession(graph, config.root, master_key(config, seed), seed, config.protocol,
                           channel or DirectChannel(latency=config.protocol.latency))
    members = nx_component(graph, config.root, graph.nodes)
    if len(members) < 2:
        raise SimulationError(f"Root {config.root} has no neighbour at t=0")
    found_group(session, members)
    return world, session


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    trace: EventTrace = field(default_factory=EventTrace)

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=METRIC_COLUMNS)

    def write(self, out_dir):
        ensure_dir(out_dir)
        metrics_path = write_metrics(self.rows, os.path.join(out_dir, 'metrics.csv'), METRIC_COLUMNS)
        trace_path = self.trace.write(os.path.join(out_dir, 'trace.csv'))
        return metrics_path, trace_path


def _mean_rate(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


class ScenarioRunner:
    """One sweep cell: detector training pass, then the protocol and response timeline."""

    def __init__(self, config, seed, trace):
        self.config = config
        self.seed = seed
        self.trace = trace
        self.mark = len(trace)
        self.stats = Counter()
        self.alarmed = set()
        self.local_turn = 0
        self.response_rng = _stream(seed, 'response')
        self.response_nonces = {}
        self.world = init_world(config, seed)
        self.graph = connectivity(self.world)
        channel = WorldChannel(self.world, config.protocol.latency)
        self.session = GroupSession(self.graph, config.root, master_key(config, seed), seed, config.protocol, channel)
        self.tables = routing_tables(self.graph)
        self.windows = {node: CoverageWindow(config.window) for node in self.world.nodes}
        self.model = None
        self.map_fingerprint = bytes(32)
        logger.info(f"Scenario cell: pause {config.mobility.pause_time}s, "
                    f"{len(self.world.adversaries_of(AdversaryKind.DROPPER))} droppers, seed {seed}")

    @property
    def now(self):
        return self.world.time

    def nonces(self, node):
        """Long-lived nonce source a node issues map and alarm nonces from."""
        if node not in self.response_nonces:
            self.response_nonces[node] = NonceSource(node, self.response_rng)
        return self.response_nonces[node]

    def _guarded(self, operation, func, *args):
        try:
            return func(*args)
        except (AbortError, KeyTreeError) as e:
            logger.warning(f"t={self.now:.1f} {operation} aborted: {e}")
            self.trace.record(self.now, 'epoch_abort', self.session.root, None, f"{operation}: {type(e).__name__}")
        except ProtocolError as e:
            logger.error(f"t={self.now:.1f} {operation} failed: {e}")
            self.trace.record(self.now, 'protocol_error', self.session.root, None, f"{operation}: {type(e).__name__}")
        return None

    def train(self, dataset):
        split = _stream(self.seed, 'split').random(len(dataset)) < self.config.train_fraction
        train, test = dataset[split], dataset[~split]
        try:
            self.model = train_model(train, self.config.som, rng=_stream(self.seed, 'som'))
            self.map_fingerprint = fingerprint(self.model.grid, self.session.suite)
        except DetectorError as e:
            logger.error(f"Detector training failed: {e}")
            self.trace.record(0.0, 'detector_failed', None, None, str(e))
        return train, test

    def found(self):
        members = nx_component(self.graph, self.session.root, self.graph.nodes)
        if len(members) < 2:
            self.trace.record(self.now, 'group_unavailable', self.session.root)
            return None
        keys = self._guarded('found', found_group, self.session, members)
        if keys is not None:
            self.trace.record(self.now, 'group_founded', self.session.root, self.session.checker,
                              f"members={len(self.session.participants)}")
        return keys

    def refresh(self):
        if self.session.tree is None or self.session.keys is None:
            return self.found()
        if tree_is_stale(self.session):
            self.trace.record(self.now, 'tree_stale', self.session.root)
            return self._guarded('reinitiate', reinitiate, self.session)
        return self.session.keys

    def join(self, node):
        if self.refresh() is None:
            return
        if node in self.session.participants:
            self.trace.record(self.now, 'join_skipped', node, None, 'already a member')
            return
        if self._guarded('join', member_join, self.session, node, self.graph) is None:
            return
        self.trace.record(self.now, 'member_joined', node, self.session.tree.parent.get(node))
        if self.config.quarantine_lift_on_reauth:
            lift_quarantine(self.tables, node, self.graph, self.now, self.trace)
            self.alarmed.discard(node)

    def leave(self, node):
        if self.session.tree is None or node not in self.session.participants:
            self.trace.record(self.now, 'leave_skipped', node, None, 'not a member')
            return
        if self._guarded('leave', member_leave, self.session, node, self.graph) is not None:
            self.trace.record(self.now, 'member_left', node)

    def global_rekey(self):
        if self.refresh() is None:
            return
        if self._guarded('global_rekey', periodic_global_rekey, self.session) is not None:
            self.trace.record(self.now, 'global_rekey', self.session.checker, None, f"epoch={self.session.epoch}")

    def local_rekey(self):
        if self.refresh() is None:
            return
        level_one = self.session.tree.level_one()
        if not level_one:
            return
        member = level_one[self.local_turn % len(level_one)]
        self.local_turn += 1
        if self._guarded('local_rekey', periodic_local_rekey, self.session, member) is not None:
            self.trace.record(self.now, 'local_rekey', member, self.session.root, f"epoch={self.session.epoch}")

    def observe(self, verdicts):
        for node, verdict in verdicts:
            self.windows[node].observe(verdict)

    def respond(self):
        if self.session.keys is None or self.session.tree is None:
            return
        for table in self.tables.values():
            table.recompute(self.graph)
        maps = {node: self.windows[node].security_map(node, self.session.epoch, self.map_fingerprint)
                for node in self.world.nodes}
        self._local_response(maps)
        self._global_response(maps)

    def _local_response(self, maps):
        root = self.session.root
        root_state = self.session.states[root]
        neighbours = [j for j in self.session.tree.level_one() if self.graph.has_edge(root, j)]
        peer_keys = {j: self.session.states[j].local_keys[root] for j in neighbours
                     if j in root_state.local_keys and root in self.session.states[j].local_keys}
        keyring = {j: root_state.local_keys[j] for j in peer_keys}
        if not neighbours:
            return
        glm = distribute_local_maps(root, neighbours, keyring, maps, suite=self.session.suite,
                                    nonces=self.nonces(root), now=self.now, trace=self.trace,
                                    peer_keys=peer_keys)
        candidates = [j for j in glm.entries if j != root]
        if not candidates:
            return
        try:
            forwarder = select_forwarding_node(glm, candidates, self.tables[root].quarantined)
            self.trace.record(self.now, 'forwarder', root, forwarder, f"coverage={glm.entries[forwarder].coverage:.4f}")
        except NoSecureNeighbor as e:
            logger.warning(str(e))
            self.trace.record(self.now, 'no_secure_forwarder', root)

    def _global_response(self, maps):
        states = self.session.states
        for node in sorted(self.session.participants):
            if node in self.alarmed:
                continue
            try:
                triggered = check_global_trigger(maps[node], self.config.min_window)
            except InsufficientWindow:
                continue
            if not triggered:
                continue
            in_range = sorted(self.graph.neighbors(node))
            receiver_keys = {n: states[n].session_key for n in in_range if n in states}
            global_alarm(maps[node], states[node].session_key, in_range, self.tables, self.graph,
                         suite=self.session.suite, nonces=self.nonces(node), now=self.now,
                         min_window=self.config.min_window, trace=self.trace, receiver_keys=receiver_keys)
            self.alarmed.add(node)

    def replay(self):
        if self.session.tree is None:
            return
        for replayer in self.world.adversaries_of(AdversaryKind.REPLAYER):
            for _, changed in replay_recorded(self.world, self.session, replayer, self.trace):
                self.stats['replays_accepted' if changed else 'replays_rejected'] += 1

    def schedule_events(self):
        cfg = self.config
        for when, node in cfg.joins:
            schedule(self.world, when, 'join', node)
        for when, node in cfg.leaves:
            schedule(self.world, when, 'leave', node)
        periodic = [
            (cfg.global_rekey_period, 'global_rekey'),
            (cfg.local_rekey_period, 'local_rekey'),
            (cfg.response_interval, 'respond'),
        ]
        for period, kind in periodic:
            if period <= 0:
                continue
            for k in range(1, int(math.floor(cfg.duration / period + 1e-9)) + 1):
                schedule(self.world, k * period, kind)

    def dispatch(self, kind, node):
        if kind == 'join':
            self.join(node)
        elif kind == 'leave':
            self.leave(node)
        elif kind == 'global_rekey':
            self.global_rekey()
        elif kind == 'local_rekey':
            self.local_rekey()
        elif kind == 'respond':
            self.refresh()
            self.respond()
            self.replay()

    def run(self):
        dataset = collect_features(self.config, self.seed)
        train, test = self.train(dataset)
        verdicts = None
        if self.model is not None and len(test):
            verdicts = classify_frame(self.model, test)['verdict']
        per_tick = {}
        if verdicts is not None:
            for (time, node), verdict in zip(zip(test['time'], test['node']), verdicts):
                per_tick.setdefault(time, []).append((node, verdict))

        self.found()
        self.schedule_events()
        for _ in range(_ticks(self.config)):
            mobility_step(self.world, self.config.traffic.sample_interval)
            self.graph = connectivity(self.world)
            self.session.graph = self.graph
            self.observe(per_tick.get(self.now, ()))
            for _, kind, node in due_events(self.world):
                self.dispatch(kind, node)
        return self.metrics(dataset, train, test, verdicts)

    def metrics(self, dataset, train, test, verdicts):
        cfg = self.config
        empty = {'detection_rate': None, 'false_alarm_rate': None, 'unclassified': 0}
        scores = evaluate(verdicts, test[LABEL_COLUMN], cfg.count_unclassified) if verdicts is not None else empty
        node_scores = []
        if verdicts is not None:
            for _, rows in test.assign(verdict=verdicts.to_numpy()).groupby('node'):
                node_scores.append(evaluate(rows['verdict'], rows[LABEL_COLUMN], cfg.count_unclassified))

        quarantined = set().union(*(table.quarantined for table in self.tables.values()))
        attacked = set(dataset.loc[dataset[LABEL_COLUMN] == ATTACK, 'node'])
        since = self.mark
        return {
            'seed': self.seed,
            'pause_time': cfg.mobility.pause_time,
            'droppers': len(self.world.adversaries_of(AdversaryKind.DROPPER)),
            'nodes': cfg.node_count,
            'members': len(self.session.participants),
            'train_samples': len(train),
            'test_samples': len(test),
            'detection_rate': scores['detection_rate'],
            'false_alarm_rate': scores['false_alarm_rate'],
            'node_detection_rate': _mean_rate(s['detection_rate'] for s in node_scores),
            'node_false_alarm_rate': _mean_rate(s['false_alarm_rate'] for s in node_scores),
            'unclassified': scores['unclassified'],
            'epochs_committed': self.session.epoch,
            'epochs_aborted': sum(self.session.aborts.values()),
            'protocol_drops': sum(self.session.drops.values()),
            'replays_rejected': self.stats['replays_rejected'],
            'replays_accepted': self.stats['replays_accepted'],
            'frames_eavesdropped': sum(len(frames) for frames in self.world.transcripts.values()),
            'maps_accepted': self.trace.count('map_accepted', since),
            'map_tampers': self.trace.count('tamper', since),
            'alarms_sent': self.trace.count('alarm_sent', since),
            'quarantines': self.trace.count('quarantine', since),
            'quarantined_nodes': len(quarantined),
            'false_quarantines': len(quarantined - attacked),
        }


def run_scenario(config, seed, trace=None):
    """Run every sweep cell of the config; one metrics row per cell."""
    report = MetricsReport(trace=trace if trace is not None else EventTrace())
    for cell in config.cells():
        report.rows.append(ScenarioRunner(cell, seed, report.trace).run())
    return report

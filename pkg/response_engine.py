"""Local and global intrusion response.

Local response: the root exchanges security maps with its level-one
neighbours under their local keys and composes a global-local map used to
pick secure forwarders. Global response: a node whose map is mostly attack
broadcasts an alarm under the group key; receivers in range quarantine it.
"""
import hmac
import logging
import struct
from collections import deque
from dataclasses import dataclass, field

import networkx as nx

from config import ATTACK_DOMINANT, BROADCAST, DEFAULT_WINDOW, GLOBAL_TRIGGER
from crypto_primitives import (
    DEFAULT_SUITE,
    AEAD_NONCE_BYTES,
    AEAD_TAG_BYTES,
    CryptoError,
    Nonce,
    decrypt,
    encrypt,
    fresh_nonce,
    keyed_hash,
    succ,
)
from esom_detector import ATTACK, NORMAL, UNCLASSIFIED
from gka_protocol import (
    DROP_ERRORS,
    Kind,
    ProtocolMessage,
    decode_message,
    encode_message,
    pack_fields,
    unpack_fields,
)

logger = logging.getLogger(__name__)


class ResponseError(Exception):
    pass


class NoSecureNeighbor(ResponseError):
    pass


class InsufficientWindow(ResponseError):
    pass


_SUMMARY = struct.Struct('>4sIIdIII32s')
_SUMMARY_MAGIC = b'SMAP'
_GLM_HEADER = struct.Struct('>4sIdI')
_GLM_ENTRY = struct.Struct('>IdB')
_GLM_MAGIC = b'GLMP'
_SEALED_NONCE = AEAD_NONCE_BYTES + 4 + 8 + AEAD_TAG_BYTES


@dataclass(frozen=True)
class SecurityMap:
    owner: int
    coverage: float
    epoch: int = 0
    attack: int = 0
    normal: int = 0
    unclassified: int = 0
    fingerprint: bytes = bytes(32)
    grid: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise ResponseError(f"Coverage {self.coverage} of node {self.owner} outside [0, 1]")

    @property
    def window(self):
        return self.attack + self.normal

    def to_bytes(self):
        """Fixed 64-byte summary: verdict counts plus a fingerprint of the model bytes."""
        return _SUMMARY.pack(_SUMMARY_MAGIC, self.owner, self.epoch, self.coverage,
                             self.attack, self.normal, self.unclassified, self.fingerprint)

    @classmethod
    def from_bytes(cls, data):
        if len(data) != _SUMMARY.size:
            raise ResponseError(f"Map summary must be {_SUMMARY.size} bytes, got {len(data)}")
        magic, owner, epoch, coverage, attack, normal, unclassified, fingerprint = _SUMMARY.unpack(data)
        if magic != _SUMMARY_MAGIC:
            raise ResponseError("Not a security map summary")
        return cls(owner, coverage, epoch, attack, normal, unclassified, fingerprint)


@dataclass(frozen=True)
class MapEntry:
    coverage: float
    summary: str


@dataclass(frozen=True)
class GlobalLocalMap:
    owner: int
    entries: dict
    composed_at: float = 0.0

    def to_bytes(self):
        parts = [_GLM_HEADER.pack(_GLM_MAGIC, self.owner, self.composed_at, len(self.entries))]
        for node in sorted(self.entries):
            entry = self.entries[node]
            parts.append(_GLM_ENTRY.pack(node, entry.coverage, entry.summary == ATTACK))
        return b''.join(parts)

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _GLM_HEADER.size:
            raise ResponseError("Global-local map truncated")
        magic, owner, composed_at, count = _GLM_HEADER.unpack_from(data)
        if magic != _GLM_MAGIC or len(data) != _GLM_HEADER.size + count * _GLM_ENTRY.size:
            raise ResponseError("Malformed global-local map")
        entries = {}
        for k in range(count):
            node, coverage, flag = _GLM_ENTRY.unpack_from(data, _GLM_HEADER.size + k * _GLM_ENTRY.size)
            entries[node] = MapEntry(coverage, ATTACK if flag else NORMAL)
        return cls(owner, entries, composed_at)


class CoverageWindow:
    """Sliding window over the last classified verdicts of one node."""

    def __init__(self, size=DEFAULT_WINDOW):
        self.verdicts = deque(maxlen=size)
        self.unclassified = 0

    def observe(self, verdict):
        if verdict == UNCLASSIFIED:
            self.unclassified += 1
            return
        self.verdicts.append(verdict == ATTACK)

    @property
    def count(self):
        return len(self.verdicts)

    @property
    def coverage(self):
        return sum(self.verdicts) / len(self.verdicts) if self.verdicts else 0.0

    def security_map(self, owner, epoch=0, fingerprint=bytes(32), grid=None):
        attack = sum(self.verdicts)
        return SecurityMap(owner, self.coverage, epoch, attack, len(self.verdicts) - attack,
                           self.unclassified, fingerprint, grid)


@dataclass
class RoutingTable:
    owner: int
    next_hop: dict = field(default_factory=dict)
    quarantined: set = field(default_factory=set)
    alarms: set = field(default_factory=set)

    def recompute(self, graph):
        """Shortest-hop next hops over the graph with quarantined nodes removed."""
        allowed = [n for n in graph if n == self.owner or n not in self.quarantined]
        sub = graph.subgraph(allowed)
        self.next_hop = {}
        if self.owner not in sub:
            return self
        for dest, path in nx.single_source_shortest_path(sub, self.owner).items():
            if dest != self.owner:
                self.next_hop[dest] = path[1]
        return self

    def quarantine(self, node, graph):
        self.quarantined.add(node)
        return self.recompute(graph)

    def lift(self, node, graph):
        self.quarantined.discard(node)
        return self.recompute(graph)


def routing_tables(graph):
    return {node: RoutingTable(node).recompute(graph) for node in sorted(graph)}


def _record(trace, now, kind, node, peer=None, detail=''):
    if trace is not None:
        trace.record(now, kind, node, peer, detail)


def compose_global_local_map(own, neighbor_maps, now=0.0):
    entries = {}
    for security_map in [own, *neighbor_maps]:
        summary = ATTACK if security_map.coverage > ATTACK_DOMINANT else NORMAL
        entries[security_map.owner] = MapEntry(security_map.coverage, summary)
    return GlobalLocalMap(own.owner, dict(sorted(entries.items())), now)


def select_forwarding_node(glm, candidates, quarantined=frozenset()):
    unknown = set(candidates) - set(glm.entries)
    if unknown:
        raise ResponseError(f"Candidates {sorted(unknown)} have no entry in the map of {glm.owner}")
    eligible = [c for c in candidates if c not in quarantined and glm.entries[c].summary != ATTACK]
    if not eligible:
        raise NoSecureNeighbor(f"Node {glm.owner} has no secure forwarder among {sorted(candidates)}")
    return min(eligible, key=lambda c: (glm.entries[c].coverage, c))


def check_global_trigger(security_map, min_window=DEFAULT_WINDOW):
    if security_map.window < min_window:
        raise InsufficientWindow(f"Node {security_map.owner} has {security_map.window} classified samples, "
                                 f"{min_window} needed")
    return security_map.coverage > GLOBAL_TRIGGER


def _deliver(frame, receiver, tamper):
    return tamper(frame, receiver) if tamper is not None else frame


def _check_issuer(nonces, node):
    if nonces.issuer != node:
        raise ResponseError(f"Nonce source of node {nonces.issuer} cannot issue for node {node}")


def _read(frame, kind, sender=None, receiver=None, ids=None):
    """Decode a frame, or None when it is not the expected message."""
    try:
        msg = decode_message(frame)
    except DROP_ERRORS:
        return None
    if msg.kind != kind:
        return None
    if sender is not None and msg.sender != sender:
        return None
    if receiver is not None and msg.receiver != receiver:
        return None
    if ids is not None and msg.ids != tuple(ids):
        return None
    return msg


def _offer_frame(initiator, own_bytes, recipients, keyring, nonce, suite, rng):
    blocks = [own_bytes]
    for node in recipients:
        blocks.append(pack_fields(node))
        blocks.append(encrypt(keyring[node], pack_fields(initiator, nonce), suite=suite, rng=rng,
                              associated_data=bytes([Kind.MAP_STEP1])))
        blocks.append(keyed_hash(keyring[node], pack_fields(initiator, own_bytes, nonce), suite=suite))
    return encode_message(ProtocolMessage(Kind.MAP_STEP1, initiator, BROADCAST, (initiator, *recipients),
                                          b''.join(blocks)))


def _check_offer(frame, node, index, initiator, key, suite):
    """Neighbour side of step 1; returns the initiator's nonce value or None."""
    msg = _read(frame, Kind.MAP_STEP1, sender=initiator, receiver=BROADCAST)
    if msg is None or len(msg.ids) <= index + 1 or msg.ids[0] != initiator or msg.ids[index + 1] != node:
        return None
    block_size = 4 + _SEALED_NONCE + suite.digest_size
    start = _SUMMARY.size + index * block_size
    received_map = msg.payload[:_SUMMARY.size]
    block = msg.payload[start:start + block_size]
    if len(block) != block_size or block[:4] != pack_fields(node):
        return None
    try:
        plain = decrypt(key, block[4:4 + _SEALED_NONCE], suite=suite, associated_data=bytes([Kind.MAP_STEP1]))
        sender, value = unpack_fields(plain, 'in', suite)
    except (CryptoError, *DROP_ERRORS):
        return None
    expected = keyed_hash(key, pack_fields(sender, received_map, Nonce(value, sender)), suite=suite)
    if sender != initiator or not hmac.compare_digest(expected, block[4 + _SEALED_NONCE:]):
        return None
    return value


def _check_reply(frame, node, initiator, key, nonce, suite):
    """Initiator side of step 3; returns the neighbour's verified map or None."""
    msg = _read(frame, Kind.MAP_STEP2, sender=node, receiver=initiator, ids=(node, initiator))
    if msg is None or len(msg.payload) != _SUMMARY.size + suite.digest_size:
        return None
    body, digest = msg.payload[:_SUMMARY.size], msg.payload[_SUMMARY.size:]
    expected = keyed_hash(key, pack_fields(node, succ(nonce), body), suite=suite)
    if not hmac.compare_digest(expected, digest):
        return None
    try:
        security_map = SecurityMap.from_bytes(body)
    except ResponseError:
        return None
    return security_map if security_map.owner == node else None


def _check_composed(frame, node, index, initiator, key, nonce, glm_size, suite):
    msg = _read(frame, Kind.MAP_STEP4, sender=initiator, receiver=BROADCAST)
    if msg is None or len(msg.ids) <= index + 1 or msg.ids[0] != initiator or msg.ids[index + 1] != node:
        return False
    size = 4 + suite.digest_size
    body = msg.payload[:glm_size]
    block = msg.payload[glm_size + index * size:glm_size + (index + 1) * size]
    expected = keyed_hash(key, pack_fields(initiator, body, succ(nonce)), suite=suite)
    return len(block) == size and block[:4] == pack_fields(node) and hmac.compare_digest(expected, block[4:])


def distribute_local_maps(initiator, neighbors, keyring, maps, *, nonces, suite=DEFAULT_SUITE,
                          now=0.0, trace=None, tamper=None, peer_keys=None, responders=None):
    """Run the four-step authenticated map exchange and return the composed map.

    keyring maps each neighbour to the initiator's local key with it and
    peer_keys is each neighbour's own copy (defaults to the keyring). tamper
    is an in-flight hook (frame, receiver) -> frame. Only responders answer
    step 1; the rest count as timed out. nonces is the initiator's own
    NonceSource, kept across rounds.
    """
    _check_issuer(nonces, initiator)
    peer_keys = keyring if peer_keys is None else peer_keys
    responders = set(neighbors) if responders is None else set(responders)
    own = maps[initiator]

    recipients = []
    for node in sorted(neighbors):
        if node in keyring:
            recipients.append(node)
        else:
            logger.warning(f"Node {initiator} holds no local key with neighbour {node}, map not shared")
            _record(trace, now, 'map_excluded', initiator, node, 'no local key')

    # step 1: own map with a sealed nonce and keyed digest per recipient
    nonce = fresh_nonce(nonces)
    offer = _offer_frame(initiator, own.to_bytes(), recipients, keyring, nonce, suite, nonces.rng)

    # step 2: every neighbour that verified the offer answers with its own map
    replies = {}
    for index, node in enumerate(recipients):
        value = _check_offer(_deliver(offer, node, tamper), node, index, initiator, peer_keys[node], suite)
        if value is None:
            logger.warning(f"Neighbour {node} rejected the map offer of {initiator}")
            _record(trace, now, 'tamper', node, initiator, 'map offer failed verification')
            continue
        if node not in responders:
            logger.info(f"No map reply from {node} to {initiator}")
            _record(trace, now, 'map_excluded', initiator, node, 'no reply')
            continue
        theirs = maps[node].to_bytes()
        digest = keyed_hash(peer_keys[node], pack_fields(node, succ(Nonce(value, initiator)), theirs), suite=suite)
        replies[node] = encode_message(ProtocolMessage(Kind.MAP_STEP2, node, initiator, (node, initiator),
                                                       theirs + digest))

    # step 3: verify replies and compose
    verified = []
    for node, frame in replies.items():
        neighbour_map = _check_reply(_deliver(frame, initiator, tamper), node, initiator, keyring[node], nonce, suite)
        if neighbour_map is None:
            logger.warning(f"Map reply of {node} failed verification at {initiator}")
            _record(trace, now, 'tamper', initiator, node, 'map reply failed verification')
            continue
        verified.append(neighbour_map)
        _record(trace, now, 'map_accepted', initiator, node, f"coverage={neighbour_map.coverage:.4f}")

    glm = compose_global_local_map(own, verified, now)
    _record(trace, now, 'glm_composed', initiator, None, f"entries={len(glm.entries)}")

    # step 4: broadcast the composed map with one keyed digest per verified neighbour
    glm_bytes = glm.to_bytes()
    accepted = [m.owner for m in verified]
    blocks = [glm_bytes]
    for node in accepted:
        blocks.append(pack_fields(node))
        blocks.append(keyed_hash(keyring[node], pack_fields(initiator, glm_bytes, succ(nonce)), suite=suite))
    final = encode_message(ProtocolMessage(Kind.MAP_STEP4, initiator, BROADCAST, (initiator, *accepted),
                                           b''.join(blocks)))
    for index, node in enumerate(accepted):
        frame = _deliver(final, node, tamper)
        if _check_composed(frame, node, index, initiator, peer_keys[node], nonce, len(glm_bytes), suite):
            _record(trace, now, 'glm_accepted', node, initiator)
        else:
            logger.warning(f"Neighbour {node} rejected the global-local map of {initiator}")
            _record(trace, now, 'tamper', node, initiator, 'global-local map failed verification')
    return glm


def build_alarm(security_map, gk, *, nonces, suite=DEFAULT_SUITE):
    """GlobalAlarm frame: map summary in clear, sealed nonce, keyed digest under GK."""
    victim = security_map.owner
    _check_issuer(nonces, victim)
    nonce = fresh_nonce(nonces)
    summary = security_map.to_bytes()
    sealed = encrypt(gk, pack_fields(victim, nonce), suite=suite, rng=nonces.rng,
                     associated_data=bytes([Kind.GLOBAL_ALARM]))
    digest = keyed_hash(gk, pack_fields(victim, summary, nonce), suite=suite)
    return encode_message(ProtocolMessage(Kind.GLOBAL_ALARM, victim, BROADCAST, (victim,),
                                          summary + sealed + digest))


def _verify_alarm(frame, gk, table, suite, min_window):
    """Returns (victim, nonce value, map, reason); reason is None for a valid alarm."""
    try:
        msg = decode_message(frame)
    except DROP_ERRORS:
        return None, None, None, 'malformed alarm'
    if msg.kind != Kind.GLOBAL_ALARM or msg.receiver != BROADCAST or msg.ids != (msg.sender,):
        return msg.sender, None, None, 'malformed alarm'
    if len(msg.payload) != _SUMMARY.size + _SEALED_NONCE + suite.digest_size:
        return msg.sender, None, None, 'malformed alarm'
    if gk is None:
        return msg.sender, None, None, 'no group key'

    summary = msg.payload[:_SUMMARY.size]
    sealed = msg.payload[_SUMMARY.size:_SUMMARY.size + _SEALED_NONCE]
    digest = msg.payload[_SUMMARY.size + _SEALED_NONCE:]
    try:
        plain = decrypt(gk, sealed, suite=suite, associated_data=bytes([Kind.GLOBAL_ALARM]))
        victim, value = unpack_fields(plain, 'in', suite)
        security_map = SecurityMap.from_bytes(summary)
    except (CryptoError, ResponseError, *DROP_ERRORS):
        return msg.sender, None, None, 'alarm failed verification'
    expected = keyed_hash(gk, pack_fields(victim, summary, Nonce(value, victim)), suite=suite)
    if victim != msg.sender or security_map.owner != victim or not hmac.compare_digest(expected, digest):
        return msg.sender, None, None, 'alarm failed verification'
    if (victim, value) in table.alarms:
        return victim, value, security_map, 'replayed alarm'
    if security_map.window < min_window:
        return victim, value, security_map, 'window too short'
    if security_map.coverage <= GLOBAL_TRIGGER:
        return victim, value, security_map, 'coverage below trigger'
    return victim, value, security_map, None


def accept_alarm(frame, receiver, gk, table, graph, *, suite=DEFAULT_SUITE, min_window=DEFAULT_WINDOW, now=0.0,
                 trace=None):
    """Verify an alarm at one receiver and quarantine the victim; True when acted on."""
    victim, value, security_map, reason = _verify_alarm(frame, gk, table, suite, min_window)
    if reason is not None:
        kind = 'tamper' if reason in ('malformed alarm', 'alarm failed verification') else 'alarm_ignored'
        logger.warning(f"Node {receiver} ignored an alarm from {victim}: {reason}")
        _record(trace, now, kind, receiver, victim, reason)
        return False

    table.alarms.add((victim, value))
    table.quarantine(victim, graph)
    logger.info(f"Node {receiver} quarantined {victim} (coverage {security_map.coverage:.3f})")
    _record(trace, now, 'quarantine', receiver, victim, f"coverage={security_map.coverage:.4f}")
    return True


def global_alarm(security_map, gk, in_range, tables, graph, *, nonces, suite=DEFAULT_SUITE, now=0.0,
                 min_window=DEFAULT_WINDOW, trace=None, tamper=None, receiver_keys=None):
    """Victim broadcasts an alarm to its transmission range; receivers quarantine it.

    receiver_keys maps a receiver to the group key it holds (defaults to gk
    for everyone). Returns the routing tables.
    """
    frame = build_alarm(security_map, gk, nonces=nonces, suite=suite)
    _record(trace, now, 'alarm_sent', security_map.owner, None, f"coverage={security_map.coverage:.4f}")
    for node in sorted(in_range):
        if node == security_map.owner or node not in tables:
            continue
        key = gk if receiver_keys is None else receiver_keys.get(node)
        accept_alarm(_deliver(frame, node, tamper), node, key, tables[node], graph,
                     suite=suite, min_window=min_window, now=now, trace=trace)
    return tables


def lift_quarantine(tables, node, graph, now=0.0, trace=None):
    """Re-admit a node after it re-authenticated into the group."""
    for table in tables.values():
        if node in table.quarantined:
            table.lift(node, graph)
            _record(trace, now, 'quarantine_lifted', table.owner, node)
    return tables

"""Tree-based group key agreement.

Three layers live here: the bit-exact wire codec, the per-node state machine
(step_node and the begin_* starters) and the group flows that drive it over a
channel and commit or roll back a whole epoch at a time.
"""
import copy
import heapq
import hmac
import logging
import struct
from collections import Counter, namedtuple
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from functools import partial

import networkx as nx
import numpy as np

from config import BROADCAST, NODE_ID_BYTES, ProtocolConfig
from crypto_primitives import (
    NONCE_BYTES,
    CryptoSuite,
    IntegrityFailure,
    KeyMaterial,
    Nonce,
    NonceOverflow,
    NonceSource,
    decrypt,
    derive_key,
    encrypt,
    fresh_nonce,
    hash_digest,
    keyed_hash,
    succ,
    verify_keyed_hash,
    xor_combine,
)
from key_tree import (
    KeyTreeError,
    RootDeparture,
    attach_member,
    build_tree,
    detach_member,
    is_bfs_layered,
    key_path,
    select_checker,
)

logger = logging.getLogger(__name__)


class Kind(IntEnum):
    AUTH_STEP1 = 1
    AUTH_STEP2 = 2
    AUTH_STEP3 = 3
    AGREE_STEP1 = 4
    AGREE_STEP2 = 5
    AGREE_STEP3 = 6
    JOIN_REQUEST = 7
    JOIN_STEP_A = 8
    JOIN_STEP_B = 9
    JOIN_STEP_C = 10
    GLOBAL_REKEY = 11
    LOCAL_REKEY_STEP1 = 12
    LOCAL_REKEY_STEP3 = 13
    GLOBAL_REKEY_CONFIRM = 14
    MAP_STEP1 = 15
    MAP_STEP2 = 16
    MAP_STEP4 = 17
    GLOBAL_ALARM = 18


AUTH_FLOW = (Kind.AUTH_STEP1, Kind.AUTH_STEP2, Kind.AUTH_STEP3)
JOIN_FLOW = (Kind.JOIN_STEP_A, Kind.JOIN_STEP_B, Kind.JOIN_STEP_C)

BROADCAST_KINDS = frozenset({
    Kind.AGREE_STEP1,
    Kind.AGREE_STEP2,
    Kind.JOIN_REQUEST,
    Kind.GLOBAL_REKEY,
    Kind.MAP_STEP1,
    Kind.MAP_STEP4,
    Kind.GLOBAL_ALARM,
})


class Role(Enum):
    ROOT = 'root'
    CHECKER = 'checker'
    MEMBER = 'member'


class ProtocolError(Exception):
    pass


class DropError(ProtocolError):
    """The message is discarded and the receiver's state is left untouched."""


class NonceMismatch(DropError):
    pass


class ReplayDetected(DropError):
    pass


class UnexpectedKind(DropError):
    pass


class MalformedMessage(DropError):
    pass


class DigestMismatch(DropError):
    pass


class AbortError(ProtocolError):
    """The running epoch is abandoned; the group keeps its committed keys."""


class Timeout(AbortError):
    def __init__(self, edge):
        self.edge = edge
        super().__init__(f"Edge {edge[0]}->{edge[1]} did not complete in time")


class CheckerVerificationFailure(AbortError):
    def __init__(self, nodes):
        self.nodes = list(nodes)
        super().__init__(f"Checker rejected the key confirmation of {self.nodes}")


class ConfirmationMismatch(AbortError):
    def __init__(self, nodes):
        self.nodes = list(nodes)
        super().__init__(f"Rekey confirmation mismatch for {self.nodes}")


DROP_ERRORS = (DropError, IntegrityFailure, NonceOverflow)


# Wire codec

@dataclass(frozen=True)
class ProtocolMessage:
    kind: Kind
    sender: int
    receiver: int
    ids: tuple = ()
    payload: bytes = b''

    @property
    def is_broadcast(self):
        return self.receiver == BROADCAST


_HEADER = struct.Struct('>BIIB')
_ID = struct.Struct('>I')
_LENGTH = struct.Struct('>H')
MAX_PAYLOAD = 0xFFFF
MAX_IDS = 0xFF


def encode_message(msg):
    if len(msg.ids) > MAX_IDS:
        raise MalformedMessage(f"{len(msg.ids)} header ids do not fit the id-count field")
    if len(msg.payload) > MAX_PAYLOAD:
        raise MalformedMessage(f"Payload of {len(msg.payload)} bytes exceeds the length field")
    parts = [_HEADER.pack(int(msg.kind), msg.sender, msg.receiver, len(msg.ids))]
    parts.extend(_ID.pack(node) for node in msg.ids)
    parts.append(_LENGTH.pack(len(msg.payload)))
    parts.append(bytes(msg.payload))
    return b''.join(parts)


def decode_message(frame):
    frame = bytes(frame)
    if len(frame) < _HEADER.size:
        raise MalformedMessage("Frame shorter than its header")
    code, sender, receiver, count = _HEADER.unpack_from(frame)
    try:
        kind = Kind(code)
    except ValueError:
        raise MalformedMessage(f"Unknown message kind {code}") from None

    offset = _HEADER.size
    length_at = offset + count * _ID.size
    if len(frame) < length_at + _LENGTH.size:
        raise MalformedMessage("Frame truncated inside the id list")
    ids = tuple(_ID.unpack_from(frame, offset + k * _ID.size)[0] for k in range(count))
    (length,) = _LENGTH.unpack_from(frame, length_at)
    start = length_at + _LENGTH.size
    if len(frame) != start + length:
        raise MalformedMessage(f"Payload length {length} disagrees with frame size {len(frame)}")
    return ProtocolMessage(kind, sender, receiver, ids, frame[start:])


def pack_fields(*values):
    """Concatenate ids (4 bytes), nonces (8 bytes) and keys into a plaintext."""
    out = []
    for value in values:
        if isinstance(value, KeyMaterial):
            out.append(value.bits)
        elif isinstance(value, Nonce):
            out.append(value.to_bytes())
        elif isinstance(value, (bytes, bytearray)):
            out.append(bytes(value))
        else:
            out.append(_ID.pack(value))
    return b''.join(out)


_FIELD_BYTES = {'i': NODE_ID_BYTES, 'n': NONCE_BYTES}


def unpack_fields(data, layout, suite):
    """Split a plaintext by layout: 'i' id, 'n' nonce value, 'k' key."""
    sizes = [suite.key_bytes if code == 'k' else _FIELD_BYTES[code] for code in layout]
    if len(data) != sum(sizes):
        raise MalformedMessage(f"Plaintext has {len(data)} bytes, layout {layout!r} needs {sum(sizes)}")
    values = []
    offset = 0
    for code, size in zip(layout, sizes):
        chunk = data[offset:offset + size]
        offset += size
        values.append(KeyMaterial(chunk) if code == 'k' else int.from_bytes(chunk, 'big'))
    return values


# Node state machine

@dataclass
class NodeProtocolState:
    my_id: int
    master_key: KeyMaterial
    nonces: NonceSource
    suite: CryptoSuite = field(default_factory=CryptoSuite)
    replay_check: bool = True
    role: Role = Role.MEMBER
    root_id: int | None = None
    checker_id: int | None = None
    parent: int | None = None
    children: tuple = ()
    share: KeyMaterial | None = None
    intermediate: KeyMaterial | None = None
    subkey: KeyMaterial | None = None
    session_key: KeyMaterial | None = None
    local_keys: dict = field(default_factory=dict)
    pending_nonces: dict = field(default_factory=dict)
    children_received: dict = field(default_factory=dict)
    disclosed_shares: dict = field(default_factory=dict)
    round_nonce: Nonce | None = None
    peer_nonces: dict = field(default_factory=dict)
    members: frozenset = frozenset()
    confirmed: set = field(default_factory=set)
    staged_local: dict = field(default_factory=dict)
    seen: set = field(default_factory=set)
    epoch: int = 0

    def __deepcopy__(self, memo):
        # keys, nonces and tuples are immutable; only containers and the generator need copies
        return replace(
            self,
            nonces=NonceSource(self.nonces.issuer, copy.deepcopy(self.nonces.rng, memo), set(self.nonces.issued)),
            local_keys=dict(self.local_keys),
            pending_nonces=dict(self.pending_nonces),
            children_received=dict(self.children_received),
            disclosed_shares=dict(self.disclosed_shares),
            peer_nonces=dict(self.peer_nonces),
            confirmed=set(self.confirmed),
            staged_local=dict(self.staged_local),
            seen=set(self.seen),
        )

    def secrets(self):
        """Every key this node currently holds, by name."""
        held = {
            'master_key': self.master_key,
            'share': self.share,
            'intermediate': self.intermediate,
            'subkey': self.subkey,
            'session_key': self.session_key,
        }
        held.update({f"local_key[{peer}]": key for peer, key in self.local_keys.items()})
        held.update({f"child[{peer}]": key for peer, key in self.children_received.items()})
        held.update({f"disclosed[{peer}]": key for peer, key in self.disclosed_shares.items()})
        return {name: key for name, key in held.items() if key is not None}


def snapshot(state):
    """Canonical byte image of a node's protocol state, generator position included."""
    def hexed(key):
        return None if key is None else key.hex()

    def keyed(mapping):
        return sorted((peer, hexed(key)) for peer, key in mapping.items())

    image = (
        state.my_id, state.role.value, state.root_id, state.checker_id, state.parent, state.children,
        hexed(state.master_key), hexed(state.share), hexed(state.intermediate),
        hexed(state.subkey), hexed(state.session_key),
        keyed(state.local_keys), keyed(state.children_received), keyed(state.disclosed_shares),
        sorted((peer, n.value) for peer, n in state.pending_nonces.items()),
        sorted((peer, n.value) for peer, n in state.peer_nonces.items()),
        None if state.round_nonce is None else state.round_nonce.value,
        sorted(state.members), sorted(state.confirmed),
        sorted((peer, key.hex(), n.value) for peer, (key, n) in state.staged_local.items()),
        sorted(state.seen), sorted(state.nonces.issued), state.epoch,
        repr(state.nonces.rng.bit_generator.state),
    )
    return repr(image).encode()


def _associated(kind):
    return bytes([int(kind)])


def _seal(state, key, kind, *values):
    return encrypt(key, pack_fields(*values), suite=state.suite, rng=state.nonces.rng,
                   associated_data=_associated(kind))


def _open(state, key, msg, layout):
    if key is None:
        raise UnexpectedKind(f"Node {state.my_id} holds no key for {msg.kind.name}")
    plain = decrypt(key, msg.payload, suite=state.suite, associated_data=_associated(msg.kind))
    return unpack_fields(plain, layout, state.suite)


def _check_identities(msg, *embedded):
    if tuple(embedded) != (msg.sender, msg.receiver)[:len(embedded)]:
        raise MalformedMessage(f"Embedded identities {embedded} do not match the {msg.kind.name} header")


def _remember(state, peer, value):
    if state.replay_check and (peer, value) in state.seen:
        raise ReplayDetected(f"Node {state.my_id} already saw nonce {value:#x} from {peer}")
    state.seen.add((peer, value))


def _expect_successor(state, echoed, issued, peer):
    if issued is None:
        raise NonceMismatch(f"Node {state.my_id} has no outstanding nonce towards {peer}")
    if echoed != succ(issued).value:
        raise NonceMismatch(f"Node {state.my_id} got a stale nonce echo from {peer}")


def _unicast(kind, sender, receiver, payload):
    return ProtocolMessage(kind, sender, receiver, (sender, receiver), payload)


def _broadcast(kind, sender, payload):
    return ProtocolMessage(kind, sender, BROADCAST, (sender,), payload)


def _on_handshake_open(state, msg, flow):
    # parent side of step 1: authenticate the child, challenge it back
    child, me, nonce_child = _open(state, state.master_key, msg, 'iin')
    _check_identities(msg, child, me)
    if child not in state.children:
        raise UnexpectedKind(f"Node {child} is not a child of {state.my_id}")
    _remember(state, child, nonce_child)
    challenge = fresh_nonce(state.nonces)
    state.pending_nonces[child] = challenge
    payload = _seal(state, state.master_key, flow[1], me, child, succ(Nonce(nonce_child, child)), challenge)
    return [_unicast(flow[1], me, child, payload)]


def _on_handshake_reply(state, msg, flow):
    # child side of step 2: check our echo, answer with the intermediate key
    parent, me, echoed, challenge = _open(state, state.master_key, msg, 'iinn')
    _check_identities(msg, parent, me)
    if parent != state.parent:
        raise UnexpectedKind(f"Node {parent} is not the parent of {state.my_id}")
    _expect_successor(state, echoed, state.pending_nonces.get(parent), parent)
    _remember(state, parent, challenge)
    missing = [c for c in state.children if c not in state.children_received]
    if missing:
        raise UnexpectedKind(f"Node {state.my_id} still waits for children {missing}")

    del state.pending_nonces[parent]
    state.intermediate = xor_combine([state.share] + [state.children_received[c] for c in state.children])
    values = [me, parent, succ(Nonce(challenge, parent)), state.intermediate]
    if parent == state.root_id:
        values.append(state.share)
    payload = _seal(state, state.master_key, flow[2], *values)
    return [_unicast(flow[2], me, parent, payload)]


def _on_handshake_close(state, msg, flow):
    # parent side of step 3: record the child's intermediate key
    layout = 'iinkk' if state.my_id == state.root_id else 'iink'
    child, me, echoed, intermediate, *disclosed = _open(state, state.master_key, msg, layout)
    _check_identities(msg, child, me)
    if child not in state.children:
        raise UnexpectedKind(f"Node {child} is not a child of {state.my_id}")
    _expect_successor(state, echoed, state.pending_nonces.get(child), child)
    del state.pending_nonces[child]
    state.children_received[child] = intermediate
    if disclosed:
        state.disclosed_shares[child] = disclosed[0]
    return []


def _on_join_request(state, msg):
    if msg.ids != (msg.sender,) or msg.payload:
        raise MalformedMessage("Join request must carry exactly the joiner's identity")
    logger.debug(f"Node {state.my_id} heard a join request from {msg.sender}")
    return []


def _on_agree_distribute(state, msg):
    if msg.sender != state.root_id or state.role is Role.ROOT:
        raise UnexpectedKind(f"Node {state.my_id} does not accept subkeys from {msg.sender}")
    root, subkey, nonce_root = _open(state, state.master_key, msg, 'ikn')
    _check_identities(msg, root)
    _remember(state, root, nonce_root)
    state.subkey = subkey
    state.peer_nonces[root] = Nonce(nonce_root, root)
    level_one = state.parent == state.root_id and state.share is not None
    state.local_keys = {root: subkey ^ state.share} if level_one else {}
    if state.role is not Role.CHECKER:
        return []

    state.session_key = subkey ^ state.share
    challenge = fresh_nonce(state.nonces)
    state.round_nonce = challenge
    state.confirmed = set()
    payload = _seal(state, state.master_key, Kind.AGREE_STEP2,
                    state.my_id, state.share, succ(Nonce(nonce_root, root)), challenge)
    return [_broadcast(Kind.AGREE_STEP2, state.my_id, payload)]


def _on_agree_share(state, msg):
    if msg.sender != state.checker_id or state.role is Role.CHECKER:
        raise UnexpectedKind(f"Node {state.my_id} does not accept a checker share from {msg.sender}")
    if state.subkey is None:
        raise UnexpectedKind(f"Node {state.my_id} has no subkey yet")
    checker, checker_share, echoed, challenge = _open(state, state.master_key, msg, 'iknn')
    _check_identities(msg, checker)
    issued = state.round_nonce if state.role is Role.ROOT else state.peer_nonces.get(state.root_id)
    _expect_successor(state, echoed, issued, state.root_id)
    _remember(state, checker, challenge)

    state.session_key = state.subkey ^ checker_share
    nonce = Nonce(challenge, checker)
    state.peer_nonces[checker] = nonce
    digest = hash_digest(pack_fields(checker, succ(nonce), state.session_key), suite=state.suite)
    return [_unicast(Kind.AGREE_STEP3, state.my_id, checker, digest)]


def _accept_confirmation(state, msg, valid):
    if state.role is not Role.CHECKER or state.round_nonce is None:
        raise UnexpectedKind(f"Node {state.my_id} runs no confirmation round")
    if msg.sender not in state.members:
        raise UnexpectedKind(f"Node {msg.sender} is not a group member")
    if msg.ids != (msg.sender, state.my_id):
        raise MalformedMessage(f"{msg.kind.name} header ids {msg.ids} are wrong")
    if state.replay_check and msg.sender in state.confirmed:
        raise ReplayDetected(f"Node {msg.sender} already confirmed this round")
    if not valid:
        raise DigestMismatch(f"Confirmation digest of node {msg.sender} does not match")
    state.confirmed.add(msg.sender)
    return []


def _on_agree_confirm(state, msg):
    expected = None
    if state.round_nonce is not None and state.session_key is not None:
        expected = hash_digest(pack_fields(state.my_id, succ(state.round_nonce), state.session_key),
                               suite=state.suite)
    valid = expected is not None and hmac.compare_digest(expected, msg.payload)
    return _accept_confirmation(state, msg, valid)


def _on_global_rekey(state, msg):
    if msg.sender != state.checker_id or state.role is Role.CHECKER:
        raise UnexpectedKind(f"Node {state.my_id} does not accept a rekey from {msg.sender}")
    checker, fresh, challenge = _open(state, state.session_key, msg, 'ikn')
    _check_identities(msg, checker)
    _remember(state, checker, challenge)
    state.session_key = state.session_key ^ fresh
    nonce = Nonce(challenge, checker)
    state.peer_nonces[checker] = nonce
    digest = keyed_hash(state.session_key, pack_fields(state.my_id, succ(nonce)), suite=state.suite)
    return [_unicast(Kind.GLOBAL_REKEY_CONFIRM, state.my_id, checker, digest)]


def _on_global_confirm(state, msg):
    valid = (
        state.round_nonce is not None
        and state.session_key is not None
        and verify_keyed_hash(state.session_key, pack_fields(msg.sender, succ(state.round_nonce)),
                              msg.payload, suite=state.suite)
    )
    return _accept_confirmation(state, msg, valid)


def _on_local_rekey_offer(state, msg):
    if state.role is not Role.ROOT or msg.sender not in state.local_keys:
        raise UnexpectedKind(f"Node {state.my_id} shares no local key with {msg.sender}")
    member, fresh, challenge = _open(state, state.local_keys[msg.sender], msg, 'ikn')
    _check_identities(msg, member)
    _remember(state, member, challenge)
    state.staged_local[member] = (state.local_keys[member] ^ fresh, Nonce(challenge, member))
    return []


def _on_local_rekey_confirm(state, msg):
    staged = state.staged_local.get(msg.sender)
    if staged is None:
        raise UnexpectedKind(f"No local rekey of node {msg.sender} is in progress")
    if msg.ids != (msg.sender, state.my_id):
        raise MalformedMessage(f"{msg.kind.name} header ids {msg.ids} are wrong")
    new_key, nonce = staged
    expected = hash_digest(pack_fields(msg.sender, succ(nonce), new_key), suite=state.suite)
    if not hmac.compare_digest(expected, msg.payload):
        raise DigestMismatch(f"Local rekey digest of node {msg.sender} does not match")
    state.local_keys[msg.sender] = new_key
    del state.staged_local[msg.sender]
    return []


_HANDLERS = {
    Kind.AUTH_STEP1: partial(_on_handshake_open, flow=AUTH_FLOW),
    Kind.AUTH_STEP2: partial(_on_handshake_reply, flow=AUTH_FLOW),
    Kind.AUTH_STEP3: partial(_on_handshake_close, flow=AUTH_FLOW),
    Kind.JOIN_STEP_A: partial(_on_handshake_open, flow=JOIN_FLOW),
    Kind.JOIN_STEP_B: partial(_on_handshake_reply, flow=JOIN_FLOW),
    Kind.JOIN_STEP_C: partial(_on_handshake_close, flow=JOIN_FLOW),
    Kind.JOIN_REQUEST: _on_join_request,
    Kind.AGREE_STEP1: _on_agree_distribute,
    Kind.AGREE_STEP2: _on_agree_share,
    Kind.AGREE_STEP3: _on_agree_confirm,
    Kind.GLOBAL_REKEY: _on_global_rekey,
    Kind.GLOBAL_REKEY_CONFIRM: _on_global_confirm,
    Kind.LOCAL_REKEY_STEP1: _on_local_rekey_offer,
    Kind.LOCAL_REKEY_STEP3: _on_local_rekey_confirm,
}


def step_node(state, msg, now=0.0):
    """Apply one received message; returns (new_state, outgoing).

    The input state is never modified. Drop errors leave the caller holding
    the old state.
    """
    if msg.receiver not in (state.my_id, BROADCAST):
        raise UnexpectedKind(f"{msg.kind.name} for {msg.receiver} reached node {state.my_id}")
    if msg.is_broadcast and msg.kind not in BROADCAST_KINDS:
        raise MalformedMessage(f"{msg.kind.name} cannot be broadcast")
    handler = _HANDLERS.get(msg.kind)
    if handler is None:
        raise UnexpectedKind(f"{msg.kind.name} is not part of the key agreement")

    new_state = copy.deepcopy(state)
    outgoing = handler(new_state, msg)
    logger.debug(f"t={now:.3f} node {state.my_id} handled {msg.kind.name} from {msg.sender}, "
                 f"{len(outgoing)} message(s) out")
    return new_state, outgoing


def begin_handshake(state, parent, flow=AUTH_FLOW):
    state = copy.deepcopy(state)
    nonce = fresh_nonce(state.nonces)
    state.pending_nonces[parent] = nonce
    payload = _seal(state, state.master_key, flow[0], state.my_id, parent, nonce)
    return state, [_unicast(flow[0], state.my_id, parent, payload)]


def root_keys(state):
    """Subkey z and the level-one local keys, from the root's collected children."""
    missing = [c for c in state.children if c not in state.children_received]
    if missing:
        raise UnexpectedKind(f"Root {state.my_id} still waits for children {missing}")
    subkey = xor_combine([state.share] + [state.children_received[c] for c in state.children])
    local = {child: subkey ^ state.disclosed_shares[child] for child in state.children}
    return subkey, local


def begin_agreement(state):
    if state.role is not Role.ROOT:
        raise UnexpectedKind(f"Node {state.my_id} is not the root")
    state = copy.deepcopy(state)
    state.subkey, state.local_keys = root_keys(state)
    nonce = fresh_nonce(state.nonces)
    state.round_nonce = nonce
    payload = _seal(state, state.master_key, Kind.AGREE_STEP1, state.my_id, state.subkey, nonce)
    return state, [_broadcast(Kind.AGREE_STEP1, state.my_id, payload)]


def begin_join(state):
    return state, [ProtocolMessage(Kind.JOIN_REQUEST, state.my_id, BROADCAST, (state.my_id,), b'')]


def begin_global_rekey(state, share=None):
    if state.role is not Role.CHECKER or state.session_key is None:
        raise UnexpectedKind(f"Node {state.my_id} cannot start a global rekey")
    state = copy.deepcopy(state)
    fresh = share if share is not None else KeyMaterial.random(state.nonces.rng, state.suite.key_bits)
    nonce = fresh_nonce(state.nonces)
    payload = _seal(state, state.session_key, Kind.GLOBAL_REKEY, state.my_id, fresh, nonce)
    state.session_key = state.session_key ^ fresh
    state.share = state.share ^ fresh
    state.round_nonce = nonce
    state.confirmed = set()
    return state, [_broadcast(Kind.GLOBAL_REKEY, state.my_id, payload)]


def begin_local_rekey(state, share=None):
    root = state.root_id
    if state.parent != root or root not in state.local_keys:
        raise UnexpectedKind(f"Node {state.my_id} holds no local key with the root")
    state = copy.deepcopy(state)
    fresh = share if share is not None else KeyMaterial.random(state.nonces.rng, state.suite.key_bits)
    nonce = fresh_nonce(state.nonces)
    old = state.local_keys[root]
    offer = _seal(state, old, Kind.LOCAL_REKEY_STEP1, state.my_id, fresh, nonce)
    state.local_keys[root] = old ^ fresh
    digest = hash_digest(pack_fields(state.my_id, succ(nonce), state.local_keys[root]), suite=state.suite)
    return state, [
        _unicast(Kind.LOCAL_REKEY_STEP1, state.my_id, root, offer),
        _unicast(Kind.LOCAL_REKEY_STEP3, state.my_id, root, digest),
    ]


# Group orchestration

@dataclass(frozen=True)
class SessionKeys:
    gk: KeyMaterial
    lk: dict
    epoch: int


Drop = namedtuple('Drop', 'time receiver sender kind error')


class DirectChannel:
    """Every party hears every frame addressed to it; optional loss and fixed latency."""

    def __init__(self, latency=0.0, drop=None):
        self.latency = latency
        self.drop = drop

    def route(self, msg, frame, participants):
        if msg.is_broadcast:
            targets = [p for p in sorted(participants) if p != msg.sender]
        else:
            targets = [msg.receiver] if msg.receiver in participants else []
        return [(node, self.latency) for node in targets if self.drop is None or not self.drop(msg, node)]


class GroupSession:
    """One key-agreement group: its tree, every party's protocol state and the wire between them."""

    def __init__(self, graph, root, master_key, seed, protocol=None, channel=None):
        self.protocol = protocol or ProtocolConfig()
        self.suite = CryptoSuite.from_config(self.protocol)
        self.graph = graph
        self.root = root
        self.master_key = master_key
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.channel = channel or DirectChannel(latency=self.protocol.latency)
        self.tree = None
        self.states = {}
        self.departed = {}
        self.epoch = 0
        self.keys = None
        self.clock = 0.0
        self.transcript = []
        self.drops = Counter()
        self.drop_log = []
        self.lost = []
        self.aborts = Counter()
        self.last_refreshed = frozenset()
        self._retired = {}
        self._seq = 0

    @property
    def checker(self):
        return self.tree.checker if self.tree is not None else None

    @property
    def participants(self):
        if self.tree is None:
            return frozenset()
        return self.tree.members | {self.tree.checker}

    def node_state(self, node):
        if node not in self.states:
            nonces = self._retired.pop(node, None)
            if nonces is None:
                nonces = NonceSource(node, np.random.default_rng([self.seed, node]))
            self.states[node] = NodeProtocolState(
                my_id=node,
                master_key=self.master_key,
                nonces=nonces,
                suite=self.suite,
                replay_check=self.protocol.replay_check,
            )
        return self.states[node]

    def retire(self, nodes):
        for node in sorted(nodes):
            state = self.states.pop(node, None)
            if state is not None:
                self._retired[node] = state.nonces
                self.departed[node] = state
                logger.info(f"Node {node} left the key agreement at epoch {self.epoch}")

    def draw_shares(self, nodes):
        return {node: KeyMaterial.random(self.node_state(node).nonces.rng, self.suite.key_bits)
                for node in sorted(nodes)}

    def rekey_master(self, ids):
        """K_M' = derive(K_M || epoch || sorted ids), pushed to every listed party."""
        data = self.master_key.bits + self.epoch.to_bytes(8, 'big') + b''.join(_ID.pack(n) for n in sorted(ids))
        self.master_key = derive_key(data, suite=self.suite)
        for node in ids:
            self.states[node] = replace(self.node_state(node), master_key=self.master_key)

    def arrange(self, tree, shares, path):
        """Push the tree layout and new shares into the parties' states."""
        self.tree = tree
        for node in sorted(tree.members | {tree.checker}):
            state = self.node_state(node)
            children = tree.children.get(node, ())
            keep = {c for c in children if c not in path}
            role = Role.ROOT if node == tree.root else Role.CHECKER if node == tree.checker else Role.MEMBER
            self.states[node] = replace(
                state,
                role=role,
                root_id=tree.root,
                checker_id=tree.checker,
                parent=tree.parent.get(node),
                children=children,
                share=shares.get(node, state.share),
                children_received={c: k for c, k in state.children_received.items() if c in keep},
                disclosed_shares={c: k for c, k in state.disclosed_shares.items() if c in children},
                members=tree.members if role is Role.CHECKER else frozenset(),
            )

    def ledger(self):
        """Current contributory share of every party (members and checker)."""
        return {node: self.states[node].share for node in sorted(self.participants)}

    def xor_oracle(self):
        return xor_combine(self.ledger().values())

    def send(self, outgoing):
        heap = []
        for msg in outgoing:
            self._emit(msg, self.clock, heap)
        self._drain(heap)

    def inject(self, frame, receiver):
        """Deliver a recorded frame once more, as a replaying adversary would."""
        self._seq += 1
        heap = [(self.clock, self._seq, receiver, bytes(frame))]
        self._drain(heap)

    def _emit(self, msg, now, heap):
        frame = encode_message(msg)
        self.transcript.append(frame)
        for receiver, delay in self.channel.route(msg, frame, frozenset(self.states)):
            if delay > self.protocol.timeout:
                self.lost.append((now, msg.sender, receiver, msg.kind.name))
                logger.warning(f"{msg.kind.name} {msg.sender}->{receiver} exceeded the timeout ({delay:.2f}s)")
                continue
            self._seq += 1
            heapq.heappush(heap, (now + delay, self._seq, receiver, frame))

    def _drain(self, heap):
        while heap:
            arrival, _, receiver, frame = heapq.heappop(heap)
            self.clock = max(self.clock, arrival)
            state = self.states.get(receiver)
            if state is None:
                continue
            try:
                new_state, outgoing = step_node(state, decode_message(frame), self.clock)
            except DROP_ERRORS as e:
                self._record_drop(receiver, frame, e)
                continue
            self.states[receiver] = new_state
            for msg in outgoing:
                self._emit(msg, self.clock, heap)

    def _record_drop(self, receiver, frame, error):
        try:
            kind = Kind(frame[0]).name
        except (IndexError, ValueError):
            kind = 'UNKNOWN'
        sender = int.from_bytes(frame[1:5], 'big') if len(frame) >= 5 else None
        self.drops[kind] += 1
        self.drop_log.append(Drop(self.clock, receiver, sender, kind, type(error).__name__))
        logger.warning(f"Node {receiver} dropped {kind} from {sender}: {error}")

    @contextmanager
    def transaction(self, operation):
        saved = (copy.deepcopy(self.states), dict(self.departed), self.tree, self.master_key,
                 self.keys, self.epoch, self.root)
        try:
            yield
        except (AbortError, KeyTreeError) as e:
            generators = {node: state.nonces for node, state in self.states.items()}
            generators.update(self._retired)
            (self.states, self.departed, self.tree, self.master_key,
             self.keys, self.epoch, self.root) = saved
            # restored states keep their advanced generators so nonces never repeat
            for node, state in self.states.items():
                state.nonces = generators.pop(node, state.nonces)
            self._retired = generators
            self.aborts[operation] += 1
            logger.warning(f"{operation} aborted, group stays at epoch {self.epoch}: {e}")
            raise

    def commit(self, operation):
        self.epoch += 1
        for node, state in self.states.items():
            self.states[node] = replace(state, epoch=self.epoch)
        self.keys = SessionKeys(
            gk=self.states[self.checker].session_key,
            lk=dict(self.states[self.root].local_keys),
            epoch=self.epoch,
        )
        logger.info(f"Epoch {self.epoch} committed after {operation}: {len(self.tree.members)} members, "
                    f"root {self.root}, checker {self.checker}")
        return self.keys


def _failed_round(session, mark, kind, failure, pending):
    rejected = sorted({d.sender for d in session.drop_log[mark:]
                       if d.receiver == session.checker and d.kind == kind and d.error == 'DigestMismatch'})
    if rejected:
        raise failure(rejected)
    raise Timeout((pending[0], session.checker))


def _verify_round(session, mark, kind, failure):
    checker_state = session.states[session.checker]
    pending = sorted(session.tree.members - checker_state.confirmed)
    if pending:
        _failed_round(session, mark, kind.name, failure, pending)
    held = {session.states[node].session_key for node in session.participants}
    if len(held) != 1:
        raise failure(sorted(session.participants))


def run_key_initiation(session, tree, shares, refresh=None):
    """Authenticated bottom-up handshakes on the tree edges; returns (z, LKs).

    Without refresh every edge runs the three auth steps. With refresh (a set
    of nodes closed upward to the root) only those nodes re-run the join
    steps, and off-path children contribute their cached intermediate keys.
    """
    flow = AUTH_FLOW if refresh is None else JOIN_FLOW
    path = set(tree.members) if refresh is None else set(refresh)
    session.arrange(tree, shares, path)

    for node in tree.bottom_up():
        if node not in path or node == tree.root:
            continue
        parent = tree.parent[node]
        state, outgoing = begin_handshake(session.states[node], parent, flow)
        session.states[node] = state
        session.send(outgoing)
        if node not in session.states[parent].children_received:
            raise Timeout((node, parent))

    subkey, local = root_keys(session.states[tree.root])
    logger.debug(f"Key initiation over {len(path)} node(s) finished, root holds {len(local)} local keys")
    return subkey, local


def run_session_agreement(session, checker_share=None, refresh_checker=False):
    """Root distributes z, checker answers with S_Ch, members confirm K = z xor S_Ch."""
    checker = session.checker
    state = session.states[checker]
    if checker_share is None and (refresh_checker or state.share is None):
        checker_share = KeyMaterial.random(state.nonces.rng, session.suite.key_bits)
    if checker_share is not None:
        session.states[checker] = replace(state, share=checker_share)

    mark = len(session.drop_log)
    root_state, outgoing = begin_agreement(session.states[session.root])
    session.states[session.root] = root_state
    session.send(outgoing)
    _verify_round(session, mark, Kind.AGREE_STEP3, CheckerVerificationFailure)
    return session.states[checker].session_key


def _moved(old, new):
    return {n for n in new.parent if n in old.level and old.parent.get(n) != new.parent[n]}


def _path_closure(old, new, fresh):
    changed = set(fresh) | _moved(old, new)
    changed |= {n for n in new.members if n in old.level and old.children.get(n) != new.children.get(n)}
    closure = set()
    for node in changed & new.members:
        closure.update(key_path(new, node))
    return closure


def _found(session, members, checker=None, shares=None, checker_share=None, operation='found'):
    members = set(members)
    if checker is None:
        checker = select_checker(session.root, session.graph.subgraph(members), session.rng)
    tree = build_tree(session.root, members, session.graph, checker)
    session.retire(set(session.states) - members)
    if shares is None:
        shares = session.draw_shares(tree.members)
    run_key_initiation(session, tree, shares)
    run_session_agreement(session, checker_share=checker_share, refresh_checker=True)
    session.last_refreshed = frozenset(tree.members)
    return session.commit(operation)


def found_group(session, members, checker=None, shares=None, checker_share=None):
    """Initial key initiation plus session agreement for a fresh group."""
    with session.transaction('found'):
        return _found(session, members, checker, shares, checker_share)


def member_join(session, joiner, graph=None):
    if graph is not None:
        session.graph = graph
    with session.transaction('join'):
        old = session.tree
        state, outgoing = begin_join(session.node_state(joiner))
        session.states[joiner] = state
        session.send(outgoing)

        tree = attach_member(old, joiner, session.graph)
        session.rekey_master(tree.members | {tree.checker})
        fresh = set(key_path(tree, joiner)) | _moved(old, tree)
        shares = session.draw_shares(fresh)
        run_key_initiation(session, tree, shares, refresh=_path_closure(old, tree, fresh))
        run_session_agreement(session)
        session.last_refreshed = frozenset(fresh)
        return session.commit('join')


def _replace_root(session, leaver):
    tree = session.tree
    heirs = tree.level_one()
    if not heirs:
        raise RootDeparture(f"Root {leaver} leaves no level-one member to take over")
    new_root = min(heirs)
    remaining = (tree.members | {tree.checker}) - {leaver}
    reachable = set(nx_component(session.graph, new_root, remaining))
    logger.info(f"Root {leaver} leaves, node {new_root} re-founds the group")
    session.retire(set(session.states) - reachable)
    session.root = new_root
    session.rekey_master(reachable)
    return _found(session, reachable, operation='leave')


def nx_component(graph, node, allowed):
    """Nodes of `allowed` reachable from node inside the allowed subgraph."""
    sub = graph.subgraph(n for n in allowed if n in graph)
    return nx.node_connected_component(sub, node) if node in sub else {node}


def member_leave(session, leaver, graph=None):
    if graph is not None:
        session.graph = graph
    with session.transaction('leave'):
        tree = session.tree
        if leaver not in session.participants:
            raise KeyTreeError(f"Node {leaver} is not a group member")
        if leaver == tree.root:
            return _replace_root(session, leaver)

        refresh_checker = leaver == tree.checker
        if refresh_checker:
            new_checker = select_checker(tree.root, session.graph.subgraph(tree.members), session.rng)
            new_tree, affected = detach_member(replace(tree, checker=None), new_checker, session.graph)
            new_tree = replace(new_tree, checker=new_checker)
            logger.info(f"Checker {leaver} leaves, node {new_checker} takes over")
        else:
            new_tree, affected = detach_member(tree, leaver, session.graph)

        remaining = new_tree.members | {new_tree.checker}
        session.retire(session.participants - remaining)
        session.rekey_master(remaining)
        fresh = set(affected) & new_tree.members
        shares = session.draw_shares(fresh)
        run_key_initiation(session, new_tree, shares, refresh=_path_closure(tree, new_tree, fresh))
        run_session_agreement(session, refresh_checker=refresh_checker)
        session.last_refreshed = frozenset(fresh)
        return session.commit('leave')


def periodic_global_rekey(session, share=None):
    with session.transaction('global_rekey'):
        mark = len(session.drop_log)
        state, outgoing = begin_global_rekey(session.states[session.checker], share)
        session.states[session.checker] = state
        session.send(outgoing)
        _verify_round(session, mark, Kind.GLOBAL_REKEY_CONFIRM, ConfirmationMismatch)
        return session.commit('global_rekey').gk


def periodic_local_rekey(session, member, share=None):
    tree = session.tree
    if tree.parent.get(member) != tree.root:
        raise ProtocolError(f"Node {member} is not a level-one member")
    with session.transaction('local_rekey'):
        mark = len(session.drop_log)
        state, outgoing = begin_local_rekey(session.states[member], share)
        session.states[member] = state
        session.send(outgoing)

        new_key = session.states[member].local_keys[tree.root]
        root_state = session.states[tree.root]
        if root_state.local_keys.get(member) != new_key or member in root_state.staged_local:
            failed = [d for d in session.drop_log[mark:] if d.receiver == tree.root and d.sender == member]
            if failed:
                raise ConfirmationMismatch([member])
            raise Timeout((member, tree.root))
        session.commit('local_rekey')
        return new_key


def tree_is_stale(session):
    """True when mobility broke a tree edge or the checker's link to the root."""
    tree = session.tree
    graph = session.graph
    if tree is None:
        return True
    if any(not graph.has_edge(child, parent) for child, parent in tree.parent.items()):
        return True
    if not graph.has_edge(tree.root, tree.checker):
        return True
    return not is_bfs_layered(tree, graph)


def reinitiate(session):
    """Re-found the group over the members still reachable from the root."""
    with session.transaction('reinitiate'):
        reachable = set(nx_component(session.graph, session.root, session.participants))
        lost = session.participants - reachable
        if lost:
            logger.warning(f"Nodes {sorted(lost)} are out of reach of root {session.root}")
        return _found(session, reachable, operation='reinitiate')

"""Adversary oracles for the key agreement's security goals.

Each oracle plays one adversary against a live GroupSession:

- an eavesdropper scans every frame for key material in clear;
- a replayer re-injects recorded frames and checks that no state moved;
- a leaver keeps all it knew and tries to reach the next group key;
- a joiner tries to reach the group key from before it joined.

"Reach" means: decrypt whatever frames the known keys open, then test
whether the target key lies in the GF(2) span of everything learned, since
XOR is the only way the protocol combines keys.
"""
import copy
import logging
from dataclasses import dataclass, replace

import networkx as nx
import numpy as np

from config import SECURITY_GOALS
from crypto_primitives import CryptoError, decrypt
from gka_protocol import (
    DROP_ERRORS,
    DirectChannel,
    GroupSession,
    Kind,
    ProtocolError,
    decode_message,
    found_group,
    member_join,
    member_leave,
    periodic_global_rekey,
    periodic_local_rekey,
    snapshot,
    unpack_fields,
)
from key_tree import KeyTreeError, select_checker
from manet_sim import SimulationError, connectivity, init_world, master_key

logger = logging.getLogger(__name__)

SUITE_GROUP_SIZE = 18

# plaintext layouts of the encrypted kinds; 'k' fields are key material
_LAYOUTS = {
    Kind.AUTH_STEP1: ('iin',),
    Kind.AUTH_STEP2: ('iinn',),
    Kind.AUTH_STEP3: ('iink', 'iinkk'),
    Kind.JOIN_STEP_A: ('iin',),
    Kind.JOIN_STEP_B: ('iinn',),
    Kind.JOIN_STEP_C: ('iink', 'iinkk'),
    Kind.AGREE_STEP1: ('ikn',),
    Kind.AGREE_STEP2: ('iknn',),
    Kind.GLOBAL_REKEY: ('ikn',),
    Kind.LOCAL_REKEY_STEP1: ('ikn',),
}


@dataclass(frozen=True)
class GoalVerdict:
    goal: str
    passed: bool
    trials: int
    failures: int
    detail: str = ''

    @property
    def title(self):
        return SECURITY_GOALS.get(self.goal, self.goal)


class XorSpan:
    """Basis of the GF(2) span of a set of equal-width keys."""

    def __init__(self, keys=()):
        self.basis = {}
        for key in keys:
            self.add(key)

    def _reduce(self, value):
        while value:
            top = value.bit_length() - 1
            if top not in self.basis:
                return value
            value ^= self.basis[top]
        return 0

    def add(self, key):
        value = self._reduce(int.from_bytes(key.bits, 'big'))
        if value:
            self.basis[value.bit_length() - 1] = value
            return True
        return False

    def __contains__(self, key):
        return self._reduce(int.from_bytes(key.bits, 'big')) == 0

    def __len__(self):
        return len(self.basis)


def scan_transcript(frames, secrets):
    """Byte-aligned search of every frame for any secret; returns [(frame index, offset, name)]."""
    by_bytes = {}
    for name, key in secrets.items():
        by_bytes.setdefault(key.bits, name)
    widths = sorted({len(bits) for bits in by_bytes})
    hits = []
    for index, frame in enumerate(frames):
        for width in widths:
            for offset in range(len(frame) - width + 1):
                name = by_bytes.get(frame[offset:offset + width])
                if name is not None:
                    hits.append((index, offset, name))
    return hits


def _opened_keys(frame, keys, suite):
    try:
        msg = decode_message(frame)
    except DROP_ERRORS:
        return []
    layouts = _LAYOUTS.get(msg.kind)
    if layouts is None:
        return []
    for key in keys:
        try:
            plain = decrypt(key, msg.payload, suite=suite, associated_data=bytes([msg.kind]))
        except CryptoError:
            continue
        for layout in layouts:
            try:
                fields = unpack_fields(plain, layout, suite)
            except DROP_ERRORS:
                continue
            return [value for code, value in zip(layout, fields) if code == 'k']
    return []


def adversary_knowledge(known, frames, suite):
    """Close a key set under decryption of the given frames; returns a XorSpan."""
    known = {key.bits: key for key in known if key.width == suite.key_bits}
    pending = list(frames)
    progress = True
    while progress and pending:
        progress = False
        remaining = []
        for frame in pending:
            learned = _opened_keys(frame, list(known.values()), suite)
            if learned:
                progress = True
                for key in learned:
                    known.setdefault(key.bits, key)
            else:
                remaining.append(frame)
        pending = remaining
    return XorSpan(known.values())


def suite_session(config, seed, replay_check=True):
    """A group of up to SUITE_GROUP_SIZE parties around the root of the t=0 world."""
    world = init_world(config, seed)
    graph = connectivity(world)
    root = config.root
    if graph.degree(root) < 2:
        raise SimulationError(f"Root {root} needs two neighbours, one for the checker and one for the tree")
    protocol = replace(config.protocol, replay_check=replay_check)
    session = GroupSession(graph, root, master_key(config, seed), seed, protocol, DirectChannel())

    checker = select_checker(root, graph, session.rng)
    rest = graph.copy()
    rest.remove_node(checker)
    members = list(nx.bfs_tree(rest, root))[:SUITE_GROUP_SIZE - 1]
    if len(members) < 3:
        raise SimulationError(f"Root {root} reaches only {len(members)} tree members, the suite needs 3")
    members.append(checker)
    session.graph = graph.subgraph(members).copy()
    found_group(session, members, checker=checker)
    return session


def _epoch_secrets(session):
    secrets = {}
    for node, state in session.states.items():
        for name, key in state.secrets().items():
            secrets[f"{name}@{node}"] = key
    return secrets


def run_key_secrecy(session, epochs, rng):
    """Drive rekey epochs and scan the whole transcript for any key ever held."""
    secrets = _epoch_secrets(session)
    failures = 0
    for epoch in range(epochs):
        old = session.keys.gk
        try:
            if epoch % 10 == 9:
                level_one = session.tree.level_one()
                periodic_local_rekey(session, level_one[int(rng.integers(len(level_one)))])
            else:
                new = periodic_global_rekey(session)
                secrets[f"rekey_delta#{epoch}"] = new ^ old
        except (ProtocolError, KeyTreeError) as e:
            failures += 1
            logger.error(f"Epoch {epoch} of the secrecy run failed: {e}")
        for name, key in _epoch_secrets(session).items():
            secrets.setdefault(f"{name}#{session.epoch}", key)

    hits = scan_transcript(session.transcript, secrets)
    for index, offset, name in hits[:5]:
        logger.error(f"Key material {name} found in frame {index} at offset {offset}")
    detail = f"{len(session.transcript)} frames, {len(secrets)} keys, {len(hits)} matches"
    return GoalVerdict('key_secrecy', not hits and not failures, epochs, len(hits) + failures, detail)


def _replay_candidates(session, start):
    by_kind = {}
    for frame in session.transcript[start:]:
        by_kind.setdefault(frame[0], []).append(frame)
    return [by_kind[kind] for kind in sorted(by_kind)]


def _addressees(session, frame):
    msg = decode_message(frame)
    if msg.is_broadcast:
        return sorted(n for n in session.states if n != msg.sender)
    return [msg.receiver] if msg.receiver in session.states else []


def run_replay_trials(session, trials, rng):
    """Re-inject recorded frames, cycling over message kinds; no state may change."""
    start = len(session.transcript)
    periodic_global_rekey(session)
    level_one = session.tree.level_one()
    periodic_local_rekey(session, level_one[int(rng.integers(len(level_one)))])
    candidates = _replay_candidates(session, 0)

    failures = 0
    changed_kinds = set()
    for trial in range(trials):
        group = candidates[trial % len(candidates)]
        frame = group[int(rng.integers(len(group)))]
        saved = copy.deepcopy(session.states)
        before = {node: snapshot(state) for node, state in session.states.items()}
        for node in _addressees(session, frame):
            session.inject(frame, node)
        after = {node: snapshot(state) for node, state in session.states.items()}
        if after != before:
            failures += 1
            changed_kinds.add(Kind(frame[0]).name)
        session.states = saved
    logger.info(f"Replay trials: {trials - failures}/{trials} left every state unchanged "
                f"({len(session.transcript) - start} frames recorded)")
    detail = f"state changed on {sorted(changed_kinds)}" if changed_kinds else ''
    return GoalVerdict('replay', failures == 0, trials, failures, detail)


def _leaf_members(session):
    tree = session.tree
    return sorted(n for n in tree.members if n != tree.root and not tree.children.get(n))


def run_membership_trials(session, trials, rng):
    """Leave-then-rejoin of a random leaf member per trial.

    The leaver keeps every key it held and reads all frames sent after it
    left; the rejoining node knows only what it holds after the join.
    """
    forward_failures = backward_failures = 0
    for _ in range(trials):
        leaves = _leaf_members(session)
        node = leaves[int(rng.integers(len(leaves)))]

        # the leaver is not given K_M' = H(K_M || epoch || ids); a leaver that keeps K_M
        # breaks this goal, see "Master key rotation is a public derivation" in SECURITY.md
        known = list(session.states[node].secrets().values())
        mark = len(session.transcript)
        member_leave(session, node)
        after_leave = session.keys.gk
        span = adversary_knowledge(known, session.transcript[mark:], session.suite)
        if after_leave in span:
            forward_failures += 1
            logger.error(f"Leaver {node} reached the group key of epoch {session.epoch}")

        before_join = session.keys.gk
        absent = session.transcript[mark:]
        member_join(session, node)
        known = list(session.states[node].secrets().values())
        span = adversary_knowledge(known, absent, session.suite)
        if before_join in span:
            backward_failures += 1
            logger.error(f"Joiner {node} reached the group key of epoch {session.epoch - 1}")

    return (
        GoalVerdict('forward_secrecy', forward_failures == 0, trials, forward_failures),
        GoalVerdict('backward_secrecy', backward_failures == 0, trials, backward_failures),
    )


def run_attack_suite(config, seed, replay_check=True):
    """All four goals, each on its own freshly founded group."""
    logger.info(f"Attack suite: {config.attack_trials} trials, {config.replay_trials} replays, seed {seed}")
    rng = np.random.default_rng([seed, 0xA77AC])
    verdicts = [
        run_key_secrecy(suite_session(config, seed, replay_check), config.attack_trials, rng),
        run_replay_trials(suite_session(config, seed, replay_check), config.replay_trials, rng),
    ]
    verdicts.extend(run_membership_trials(suite_session(config, seed, replay_check), config.attack_trials, rng))
    for verdict in verdicts:
        log = logger.info if verdict.passed else logger.error
        log(f"{verdict.title}: {'PASS' if verdict.passed else 'FAIL'} ({verdict.failures}/{verdict.trials} failed)")
    return verdicts


def suite_passed(verdicts):
    return all(v.passed for v in verdicts)

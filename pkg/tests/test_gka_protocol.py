import numpy as np
import pytest

from config import BROADCAST, ProtocolConfig
from conftest import DEEP_JOINER, TREE_CHECKER, TREE_ROOT, make_session
from crypto_primitives import KeyMaterial, xor_combine
from gka_protocol import (
    ConfirmationMismatch,
    DirectChannel,
    Kind,
    MalformedMessage,
    ProtocolError,
    ProtocolMessage,
    Timeout,
    UnexpectedKind,
    decode_message,
    encode_message,
    found_group,
    member_join,
    member_leave,
    periodic_global_rekey,
    periodic_local_rekey,
    reinitiate,
    snapshot,
    step_node,
    tree_is_stale,
    unpack_fields,
)


def held_keys(session):
    return {session.states[node].session_key for node in session.participants}


def frames_of(session, kind):
    return [frame for frame in session.transcript if frame[0] == kind]


def test_all_parties_agree_on_the_group_key(tree_session):
    assert len(tree_session.participants) == 18
    assert held_keys(tree_session) == {tree_session.keys.gk}
    assert tree_session.keys.gk == tree_session.xor_oracle()
    assert tree_session.epoch == 1


def test_subkey_is_the_xor_of_tree_member_shares(tree_session):
    ledger = tree_session.ledger()
    subkey = xor_combine(share for node, share in ledger.items() if node != TREE_CHECKER)
    assert {tree_session.states[n].subkey for n in tree_session.participants} == {subkey}
    assert tree_session.keys.gk == subkey ^ ledger[TREE_CHECKER]


def test_local_keys_bind_root_and_level_one(tree_session):
    root = tree_session.states[TREE_ROOT]
    for member in tree_session.tree.level_one():
        expected = root.subkey ^ tree_session.states[member].share
        assert root.local_keys[member] == expected
        assert tree_session.states[member].local_keys == {TREE_ROOT: expected}
    deeper = tree_session.states[16]
    assert deeper.local_keys == {}


def test_founding_is_deterministic(tree_graph):
    first = make_session(tree_graph)
    second = make_session(tree_graph)
    found_group(first, tree_graph.nodes, checker=TREE_CHECKER)
    found_group(second, tree_graph.nodes, checker=TREE_CHECKER)
    assert first.keys.gk == second.keys.gk
    assert first.transcript == second.transcript


def test_deep_join_refreshes_exactly_the_key_path(join_session):
    before = join_session.ledger()
    old_gk = join_session.keys.gk
    member_join(join_session, DEEP_JOINER)
    after = join_session.ledger()

    changed = {node for node, share in after.items() if before.get(node) != share}
    assert changed == {DEEP_JOINER, 6, 2, TREE_ROOT}
    assert join_session.last_refreshed == changed
    assert join_session.keys.gk == join_session.xor_oracle()
    assert join_session.keys.gk != old_gk
    assert held_keys(join_session) == {join_session.keys.gk}
    assert join_session.tree.parent[DEEP_JOINER] == 6


def test_join_uses_the_join_handshake_and_a_new_master_key(join_session):
    old_master = join_session.master_key
    mark = len(join_session.transcript)
    member_join(join_session, DEEP_JOINER)
    kinds = {frame[0] for frame in join_session.transcript[mark:]}
    assert Kind.JOIN_REQUEST in kinds
    assert {Kind.JOIN_STEP_A, Kind.JOIN_STEP_B, Kind.JOIN_STEP_C} <= kinds
    assert Kind.AUTH_STEP1 not in kinds
    assert join_session.master_key != old_master
    assert {join_session.states[n].master_key for n in join_session.participants} == {join_session.master_key}


def test_rekey_algebra_over_many_epochs(tree_session):
    rng = np.random.default_rng(11)
    level_one = tree_session.tree.level_one()
    for _ in range(100):
        share = KeyMaterial.random(rng)
        if rng.random() < 0.5:
            old = tree_session.keys.gk
            new = periodic_global_rekey(tree_session, share)
            assert new ^ old == share
            assert new == tree_session.xor_oracle()
        else:
            member = level_one[int(rng.integers(len(level_one)))]
            old = tree_session.keys.lk[member]
            new = periodic_local_rekey(tree_session, member, share)
            assert new ^ old == share
            assert tree_session.keys.lk[member] == new
    assert held_keys(tree_session) == {tree_session.keys.gk}


def test_local_rekey_needs_a_level_one_member(tree_session):
    with pytest.raises(ProtocolError):
        periodic_local_rekey(tree_session, 16)


def test_aborted_founding_commits_nothing(tree_graph):
    channel = DirectChannel(drop=lambda msg, node: msg.kind == Kind.AUTH_STEP3 and msg.sender == 16)
    session = make_session(tree_graph, channel=channel)
    with pytest.raises(Timeout) as info:
        found_group(session, tree_graph.nodes, checker=TREE_CHECKER)
    assert info.value.edge == (16, 11)
    assert session.epoch == 0
    assert session.keys is None
    assert session.aborts['found'] == 1


def test_aborted_rekey_rolls_back_to_the_committed_key(tree_session):
    old = tree_session.keys.gk
    tree_session.channel.drop = lambda msg, node: msg.kind == Kind.GLOBAL_REKEY_CONFIRM and msg.sender == 16
    with pytest.raises(Timeout):
        periodic_global_rekey(tree_session)
    assert tree_session.epoch == 1
    assert tree_session.keys.gk == old
    assert held_keys(tree_session) == {old}

    tree_session.channel.drop = None
    share = KeyMaterial.random(np.random.default_rng(2))
    assert periodic_global_rekey(tree_session, share) == old ^ share
    assert tree_session.epoch == 2


def test_tampered_confirmation_is_a_checker_rejection(tree_session):
    emit = tree_session._emit

    def corrupting_emit(msg, now, heap):
        if msg.kind == Kind.GLOBAL_REKEY_CONFIRM and msg.sender == 16:
            msg = ProtocolMessage(msg.kind, msg.sender, msg.receiver, msg.ids, bytes(len(msg.payload)))
        return emit(msg, now, heap)

    tree_session._emit = corrupting_emit
    with pytest.raises(ConfirmationMismatch) as info:
        periodic_global_rekey(tree_session)
    assert info.value.nodes == [16]
    assert tree_session.epoch == 1


def test_leaf_leave_rekeys_without_the_leaver(tree_session):
    old = tree_session.keys.gk
    member_leave(tree_session, 16)
    assert 16 not in tree_session.participants
    assert 16 in tree_session.departed
    assert tree_session.keys.gk != old
    assert tree_session.keys.gk == tree_session.xor_oracle()
    assert held_keys(tree_session) == {tree_session.keys.gk}
    assert tree_session.last_refreshed == {11, 6, 2, TREE_ROOT}


def test_checker_leave_draws_a_new_checker(tree_session):
    member_leave(tree_session, TREE_CHECKER)
    checker = tree_session.checker
    assert checker != TREE_CHECKER
    assert checker in (2, 3, 4)
    assert checker not in tree_session.tree.members
    assert TREE_CHECKER not in tree_session.participants
    assert held_keys(tree_session) == {tree_session.keys.gk}
    assert tree_session.keys.gk == tree_session.xor_oracle()


def test_root_leave_hands_the_group_to_the_lowest_level_one_member(tree_session):
    member_leave(tree_session, TREE_ROOT)
    assert tree_session.root == 2
    assert tree_session.tree.root == 2
    # 4, 10 and 15 only reached the group through the old root
    assert not {TREE_ROOT, 4, 10, 15} & tree_session.participants
    assert held_keys(tree_session) == {tree_session.keys.gk}


def test_stale_tree_is_reinitiated(tree_session):
    assert not tree_is_stale(tree_session)
    graph = tree_session.graph.copy()
    graph.remove_edge(11, 16)
    tree_session.graph = graph
    assert tree_is_stale(tree_session)
    reinitiate(tree_session)
    assert 16 not in tree_session.participants
    assert not tree_is_stale(tree_session)
    assert held_keys(tree_session) == {tree_session.keys.gk}


def test_replayed_subkey_broadcast_is_dropped(tree_session):
    frame = frames_of(tree_session, Kind.AGREE_STEP1)[-1]
    before = snapshot(tree_session.states[16])
    tree_session.inject(frame, 16)
    assert snapshot(tree_session.states[16]) == before
    assert tree_session.drop_log[-1].error == 'ReplayDetected'
    assert tree_session.drops['AGREE_STEP1'] == 1


def test_replayed_handshake_is_dropped(tree_session):
    frame = frames_of(tree_session, Kind.AUTH_STEP1)[0]
    receiver = decode_message(frame).receiver
    before = snapshot(tree_session.states[receiver])
    tree_session.inject(frame, receiver)
    assert snapshot(tree_session.states[receiver]) == before
    assert tree_session.drop_log[-1].error == 'ReplayDetected'


def test_disabled_replay_check_lets_a_replay_through(tree_graph):
    session = make_session(tree_graph, protocol=ProtocolConfig(replay_check=False))
    found_group(session, tree_graph.nodes, checker=TREE_CHECKER)
    frame = frames_of(session, Kind.AGREE_STEP1)[-1]
    before = snapshot(session.states[TREE_CHECKER])
    session.inject(frame, TREE_CHECKER)
    assert snapshot(session.states[TREE_CHECKER]) != before


def test_step_node_leaves_its_input_alone(tree_session):
    frame = frames_of(tree_session, Kind.AGREE_STEP1)[-1]
    state = tree_session.states[16]
    before = snapshot(state)
    with pytest.raises(ProtocolError):
        step_node(state, decode_message(frame))
    assert snapshot(state) == before


def test_step_node_refuses_misaddressed_messages(tree_session):
    msg = ProtocolMessage(Kind.AUTH_STEP1, 16, 11, (16, 11), b'\x00' * 40)
    with pytest.raises(UnexpectedKind):
        step_node(tree_session.states[6], msg)
    broadcast = ProtocolMessage(Kind.AUTH_STEP1, 16, BROADCAST, (16,), b'')
    with pytest.raises(MalformedMessage):
        step_node(tree_session.states[6], broadcast)


def test_encode_known_join_request():
    msg = ProtocolMessage(Kind.JOIN_REQUEST, 19, BROADCAST, (19,), b'')
    frame = encode_message(msg)
    assert frame.hex() == '0700000013ffffffff01000000130000'
    assert decode_message(frame) == msg


def test_decode_one_byte_payload():
    frame = bytes.fromhex('0700000013ffffffff0100000013000100')
    assert decode_message(frame) == ProtocolMessage(Kind.JOIN_REQUEST, 19, BROADCAST, (19,), b'\x00')


@pytest.mark.parametrize('frame', [
    b'',
    bytes.fromhex('07000000'),
    bytes.fromhex('6300000013ffffffff0000'),
    bytes.fromhex('0700000013ffffffff010000'),
    bytes.fromhex('0700000013ffffffff0100000013000200'),
    bytes.fromhex('0700000013ffffffff01000000130000ff'),
])
def test_decode_rejects_malformed_frames(frame):
    with pytest.raises(MalformedMessage):
        decode_message(frame)


def test_unpack_fields_checks_the_length(tree_session):
    with pytest.raises(MalformedMessage):
        unpack_fields(b'\x00' * 15, 'iin', tree_session.suite)
    node, peer, nonce = unpack_fields(bytes.fromhex('00000001' '00000002' '0000000000000003'), 'iin',
                                      tree_session.suite)
    assert (node, peer, nonce) == (1, 2, 3)

import re
from pathlib import Path

import pytest

from config import BROADCAST
from gka_protocol import Kind, ProtocolMessage, decode_message, encode_message
from response_engine import SecurityMap

WIRE_DOC = Path(__file__).resolve().parent.parent / 'WIRE.md'


def blocks(tag):
    text = WIRE_DOC.read_text(encoding='utf-8')
    found = []
    for body in re.findall(rf"```{tag}\n(.*?)```", text, flags=re.S):
        head, *hex_lines = body.strip().splitlines()
        fields = dict(part.split('=', 1) for part in head.split())
        found.append((fields, bytes.fromhex(''.join(hex_lines))))
    return found


def expected_message(fields):
    receiver = BROADCAST if fields['receiver'] == 'broadcast' else int(fields['receiver'])
    ids = tuple(int(node) for node in fields['ids'].split(',') if node)
    return ProtocolMessage(Kind[fields['kind']], int(fields['sender']), receiver, ids,
                           bytes.fromhex(fields['payload']))


FRAMES = blocks('frame')


def test_document_has_examples():
    assert len(FRAMES) >= 4
    assert len(blocks('summary')) == 1


@pytest.mark.parametrize('fields, frame', FRAMES, ids=[fields['kind'] for fields, _ in FRAMES])
def test_frame_examples(fields, frame):
    msg = expected_message(fields)
    assert encode_message(msg) == frame
    assert decode_message(frame) == msg


def test_summary_example():
    (fields, data), = blocks('summary')
    security_map = SecurityMap(
        int(fields['owner']),
        float(fields['coverage']),
        epoch=int(fields['epoch']),
        attack=int(fields['attack']),
        normal=int(fields['normal']),
        unclassified=int(fields['unclassified']),
    )
    assert security_map.to_bytes() == data
    assert SecurityMap.from_bytes(data) == security_map
